//! Extended real numbers with explicit infinity tags.
//!
//! Conjugate penalties take the value `+inf` outside their effective domain;
//! the dual objective can be `-inf`. Keeping the tags separate from float
//! infinities avoids `inf - inf` turning into NaN.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A real number or one of the two infinities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExtReal<T> {
    NegInf,
    Finite(T),
    PosInf,
}

impl<T: Scalar> ExtReal<T> {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn finite(self) -> Option<T> {
        match self {
            ExtReal::Finite(x) => Some(x),
            _ => None,
        }
    }

    pub fn neg(self) -> Self {
        match self {
            ExtReal::NegInf => ExtReal::PosInf,
            ExtReal::PosInf => ExtReal::NegInf,
            ExtReal::Finite(x) => ExtReal::Finite(-x),
        }
    }

    /// Sum with the convention that opposite infinities never meet in this
    /// crate; if they do, the result is `NegInf` (the conservative choice for
    /// a maximisation objective).
    pub fn add(self, other: Self) -> Self {
        use ExtReal::*;
        match (self, other) {
            (Finite(a), Finite(b)) => Finite(a + b),
            (NegInf, _) | (_, NegInf) => NegInf,
            (PosInf, _) | (_, PosInf) => PosInf,
        }
    }

    pub fn sub(self, other: Self) -> Self {
        self.add(other.neg())
    }

    /// Scales by a non-negative weight with `0 * inf = 0`.
    pub fn weight(self, w: T) -> Self {
        if w == T::zero() {
            return ExtReal::Finite(T::zero());
        }
        match self {
            ExtReal::Finite(x) => ExtReal::Finite(w * x),
            other => other,
        }
    }

    /// Clamps into `[lo, hi]` when finite; infinities map to the ends.
    pub fn clamp_to(self, lo: T, hi: T) -> T {
        match self {
            ExtReal::NegInf => lo,
            ExtReal::PosInf => hi,
            ExtReal::Finite(x) => x.max(lo).min(hi),
        }
    }

    pub fn ge(self, other: Self) -> bool {
        use ExtReal::*;
        match (self, other) {
            (Finite(a), Finite(b)) => a >= b,
            (PosInf, _) | (_, NegInf) => true,
            _ => false,
        }
    }

    pub fn max(self, other: Self) -> Self {
        if self.ge(other) {
            self
        } else {
            other
        }
    }
}

impl<T: Scalar> From<T> for ExtReal<T> {
    fn from(x: T) -> Self {
        ExtReal::Finite(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_respects_tags() {
        let a = ExtReal::Finite(2.0);
        assert_eq!(a.add(ExtReal::Finite(3.0)), ExtReal::Finite(5.0));
        assert_eq!(a.sub(ExtReal::PosInf), ExtReal::NegInf);
        assert_eq!(ExtReal::<f64>::PosInf.neg(), ExtReal::NegInf);
        assert_eq!(ExtReal::<f64>::NegInf.weight(0.0), ExtReal::Finite(0.0));
        assert_eq!(ExtReal::<f64>::NegInf.weight(0.5), ExtReal::NegInf);
    }

    #[test]
    fn ordering() {
        assert!(ExtReal::Finite(1.0).ge(ExtReal::NegInf));
        assert!(!ExtReal::Finite(1.0).ge(ExtReal::PosInf));
        assert_eq!(ExtReal::Finite(1.0).max(ExtReal::Finite(4.0)), ExtReal::Finite(4.0));
        assert_eq!(ExtReal::<f64>::NegInf.clamp_to(-1.0, 1.0), -1.0);
    }
}
