//! Convex trading penalties, their conjugates, truncation and scaled limits.
//!
//! A penalty `g(t, S, nu)` is the cost of trading `nu` shares at time `t` when
//! the price path is `S`. All built-in penalties depend on the path only
//! through the current price `S(t)`, which makes them adapted by construction.
//! At a node they reduce to a one-dimensional convex function of `nu`, the
//! [`LocalPenalty`], which is what the engines work with.

use serde::{Deserialize, Serialize};

use crate::convex_pl::ConvexPl;
use crate::error::{invalid, Error, Result};
use crate::ext_real::ExtReal;
use crate::market_tree::PlPath;
use crate::scalar::Scalar;

/// Tabulated convex penalty, linear between points and extrapolated with the
/// end slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedPenalty<T> {
    pl: ConvexPl<T>,
    price_scaled: bool,
}

impl<T: Scalar> TabulatedPenalty<T> {
    /// `points` are `(nu, g(nu))`. With `price_scaled` the cost at price `S`
    /// is `S * g(nu)`.
    pub fn new(points: &[(T, T)], price_scaled: bool) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("tabulated penalty needs at least two points"));
        }
        let xs: Vec<T> = points.iter().map(|p| p.0).collect();
        let ys: Vec<T> = points.iter().map(|p| p.1).collect();
        let tol = T::tol();
        if ys.iter().any(|g| *g < -tol) {
            return Err(Error::NotConvex("tabulated penalty takes negative values".into()));
        }
        let first = (ys[1] - ys[0]) / (xs[1] - xs[0]);
        let k = xs.len();
        let last = (ys[k - 1] - ys[k - 2]) / (xs[k - 1] - xs[k - 2]);
        let pl = ConvexPl::new(xs, ys, Some(first), Some(last))?;
        for j in 1..k - 1 {
            let scale = T::one() + pl.segment_slope(j - 1).abs() + pl.segment_slope(j).abs();
            if pl.segment_slope(j) < pl.segment_slope(j - 1) - tol * scale {
                return Err(Error::NotConvex(format!("slope decreases at point {j}")));
            }
        }
        match pl.eval(T::zero()) {
            Some(g0) if g0.abs() <= tol => {}
            _ => return Err(invalid("tabulated penalty must vanish at zero")),
        }
        Ok(Self { pl, price_scaled })
    }

    /// Parses a two-column `(nu, g)` table.
    pub fn from_text(text: &str, price_scaled: bool) -> Result<Self> {
        let rows = crate::text_io::parse_two_columns(text)?;
        let pts: Vec<(T, T)> = rows.iter().map(|(a, b)| (T::lit(*a), T::lit(*b))).collect();
        Self::new(&pts, price_scaled)
    }

    pub fn function(&self) -> &ConvexPl<T> {
        &self.pl
    }

    pub fn price_scaled(&self) -> bool {
        self.price_scaled
    }
}

/// Penalty families.
#[derive(Debug, Clone, PartialEq)]
pub enum Penalty<T> {
    /// `lambda * nu^2`.
    Quadratic { lambda: T },
    /// `(c / sqrt(n)) * S(t) * |nu|`.
    Proportional { c: T },
    /// Truncation of the no-trading penalty at level `c`; the cost coincides
    /// with `Proportional { c }` and the scaled conjugate limit is zero.
    TruncatedZero { c: T },
    /// Quadratic below the threshold `c S / (2 sqrt(n) lambda)`, linear above.
    TruncatedQuadratic { lambda: T, c: T },
    /// `|nu|^gamma / gamma` for `gamma` in `[1, 2]`.
    Power { gamma: T },
    Tabulated(TabulatedPenalty<T>),
    /// Inf-convolution of `base` with `(c / sqrt(n)) S(t) |nu|`.
    Truncated { base: Box<Penalty<T>>, c: T },
}

/// Scaled conjugate limit `lim n G(t, S, y / sqrt(n))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScaledLimit<T> {
    Zero,
    /// `coef * y^2`.
    Quadratic { coef: T },
}

impl<T: Scalar> ScaledLimit<T> {
    pub fn eval(&self, y: T) -> T {
        match *self {
            ScaledLimit::Zero => T::zero(),
            ScaledLimit::Quadratic { coef } => coef * y * y,
        }
    }
}

fn positive<T: Scalar>(name: &str, v: T) -> Result<T> {
    if v > T::zero() && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(format!("{name} must be positive, got {v}")))
    }
}

impl<T: Scalar> Penalty<T> {
    pub fn quadratic(lambda: T) -> Result<Self> {
        Ok(Penalty::Quadratic { lambda: positive("lambda", lambda)? })
    }

    pub fn proportional(c: T) -> Result<Self> {
        if !(c >= T::zero()) || !c.is_finite() {
            return Err(invalid(format!("c must be non-negative, got {c}")));
        }
        Ok(Penalty::Proportional { c })
    }

    /// No friction at all.
    pub fn zero() -> Self {
        Penalty::Proportional { c: T::zero() }
    }

    pub fn truncated_zero(c: T) -> Result<Self> {
        Ok(Penalty::TruncatedZero { c: positive("c", c)? })
    }

    pub fn truncated_quadratic(lambda: T, c: T) -> Result<Self> {
        Ok(Penalty::TruncatedQuadratic { lambda: positive("lambda", lambda)?, c: positive("c", c)? })
    }

    pub fn power(gamma: T) -> Result<Self> {
        if gamma > T::lit(2.0) {
            return Err(Error::GrowthOutOfRange(gamma.f64()));
        }
        if !(gamma >= T::one()) {
            return Err(invalid(format!("power exponent must be in [1, 2], got {gamma}")));
        }
        Ok(Penalty::Power { gamma })
    }

    /// Penalty induced by a supply curve: trading `nu` shares costs
    /// `(supply(nu) - s) * nu` above the quoted price `s`.
    pub fn from_supply_curve(supply: impl Fn(T) -> T, s: T, nus: &[T]) -> Result<Self> {
        let pts: Vec<(T, T)> = nus.iter().map(|nu| (*nu, (supply(*nu) - s) * *nu)).collect();
        Ok(Penalty::Tabulated(TabulatedPenalty::new(&pts, false)?))
    }

    /// Truncation at level `c`: the conjugate is cut to `|y| <= c S(t) / sqrt(n)`.
    pub fn truncate(&self, c: T) -> Result<Self> {
        let c = positive("c", c)?;
        Ok(match self {
            Penalty::Quadratic { lambda } => Penalty::TruncatedQuadratic { lambda: *lambda, c },
            Penalty::Proportional { c: c0 } | Penalty::TruncatedZero { c: c0 } => {
                Penalty::TruncatedZero { c: c.min(*c0) }
            }
            Penalty::TruncatedQuadratic { lambda, c: c0 } => {
                Penalty::TruncatedQuadratic { lambda: *lambda, c: c.min(*c0) }
            }
            Penalty::Truncated { base, c: c0 } => Penalty::Truncated { base: base.clone(), c: c.min(*c0) },
            other => Penalty::Truncated { base: Box::new(other.clone()), c },
        })
    }

    /// Truncation level, if the conjugate has a bounded band.
    pub fn truncation_level(&self) -> Option<T> {
        match self {
            Penalty::Proportional { c } | Penalty::TruncatedZero { c } => Some(*c),
            Penalty::TruncatedQuadratic { c, .. } | Penalty::Truncated { c, .. } => Some(*c),
            _ => None,
        }
    }

    /// True when the cost depends on the path only through the current price,
    /// which the lattice engines require. Holds for every built-in family.
    pub fn is_price_markov(&self) -> bool {
        true
    }

    /// Penalty at time `t` with current price `s` in an `n`-step market.
    pub fn local(&self, _t: T, s: T, n: usize) -> LocalPenalty<T> {
        let band = |c: T| c * s / T::of(n).sqrt();
        match self {
            Penalty::Quadratic { lambda } => LocalPenalty::Quadratic { lambda: *lambda },
            Penalty::Proportional { c } | Penalty::TruncatedZero { c } => LocalPenalty::Abs { kappa: band(*c) },
            Penalty::TruncatedQuadratic { lambda, c } => LocalPenalty::Huber { lambda: *lambda, kappa: band(*c) },
            Penalty::Power { gamma } => {
                if *gamma == T::one() {
                    LocalPenalty::Abs { kappa: T::one() }
                } else if *gamma == T::lit(2.0) {
                    LocalPenalty::Quadratic { lambda: T::lit(0.5) }
                } else {
                    LocalPenalty::Power { gamma: *gamma }
                }
            }
            Penalty::Tabulated(tab) => {
                if tab.price_scaled {
                    LocalPenalty::Pl(tab.pl.scale(s))
                } else {
                    LocalPenalty::Pl(tab.pl.clone())
                }
            }
            Penalty::Truncated { base, c } => base.local(_t, s, n).truncate(band(*c)),
        }
    }

    /// Local penalty read off a path.
    pub fn local_on_path(&self, t: T, path: &PlPath<T>) -> Result<LocalPenalty<T>> {
        Ok(self.local(t, path.eval(t)?, path.n()))
    }

    /// `g(t, path, nu)`.
    pub fn g_eval(&self, t: T, path: &PlPath<T>, nu: T) -> Result<T> {
        Ok(self.local_on_path(t, path)?.eval(nu))
    }

    /// Conjugate `G(t, path, y) = sup_nu (nu y - g(t, path, nu))`.
    pub fn conj_eval(&self, t: T, path: &PlPath<T>, y: T) -> Result<ExtReal<T>> {
        Ok(self.local_on_path(t, path)?.conjugate(y))
    }

    /// Scaled conjugate limit.
    pub fn scaled_limit(&self) -> Result<ScaledLimit<T>> {
        match self {
            Penalty::Quadratic { lambda } | Penalty::TruncatedQuadratic { lambda, .. } => {
                Ok(ScaledLimit::Quadratic { coef: T::one() / (T::lit(4.0) * *lambda) })
            }
            Penalty::Proportional { .. } | Penalty::TruncatedZero { .. } => Ok(ScaledLimit::Zero),
            Penalty::Power { gamma } => {
                if *gamma == T::lit(2.0) {
                    Ok(ScaledLimit::Quadratic { coef: T::lit(0.5) })
                } else {
                    Ok(ScaledLimit::Zero)
                }
            }
            Penalty::Tabulated(tab) => {
                // a kink at zero makes the conjugate vanish near the origin
                if left_slope(&tab.pl, T::zero()) < right_slope(&tab.pl, T::zero()) {
                    Ok(ScaledLimit::Zero)
                } else {
                    Err(Error::UnsupportedLimit("tabulated penalty is smooth at zero".into()))
                }
            }
            Penalty::Truncated { base, .. } => base.scaled_limit(),
        }
    }
}

/// Penalty at a fixed node as a convex function of the trade size.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalPenalty<T> {
    /// `lambda nu^2`.
    Quadratic { lambda: T },
    /// `kappa |nu|`.
    Abs { kappa: T },
    /// `lambda nu^2` with slopes capped at `kappa`.
    Huber { lambda: T, kappa: T },
    /// `|nu|^gamma / gamma`, `1 < gamma < 2`.
    Power { gamma: T },
    /// Power penalty with slopes capped at `bound`.
    HuberPower { gamma: T, bound: T },
    /// Piecewise linear with rays on both sides.
    Pl(ConvexPl<T>),
}

impl<T: Scalar> LocalPenalty<T> {
    /// Inf-convolution with `b |nu|`.
    pub fn truncate(self, b: T) -> Self {
        match self {
            LocalPenalty::Quadratic { lambda } => LocalPenalty::Huber { lambda, kappa: b },
            LocalPenalty::Abs { kappa } => LocalPenalty::Abs { kappa: kappa.min(b) },
            LocalPenalty::Huber { lambda, kappa } => LocalPenalty::Huber { lambda, kappa: kappa.min(b) },
            LocalPenalty::Power { gamma } => LocalPenalty::HuberPower { gamma, bound: b },
            LocalPenalty::HuberPower { gamma, bound } => LocalPenalty::HuberPower { gamma, bound: bound.min(b) },
            LocalPenalty::Pl(f) => LocalPenalty::Pl(
                f.inf_convolution(&ConvexPl::abs(b)).expect("penalty bounded below"),
            ),
        }
    }

    /// Piecewise-linear form, when the penalty has one.
    pub fn as_pl(&self) -> Option<ConvexPl<T>> {
        match self {
            LocalPenalty::Abs { kappa } => Some(ConvexPl::abs(*kappa)),
            LocalPenalty::Pl(f) => Some(f.clone()),
            _ => None,
        }
    }

    pub fn eval(&self, nu: T) -> T {
        let two = T::lit(2.0);
        match self {
            LocalPenalty::Quadratic { lambda } => *lambda * nu * nu,
            LocalPenalty::Abs { kappa } => *kappa * nu.abs(),
            LocalPenalty::Huber { lambda, kappa } => {
                let knee = *kappa / (two * *lambda);
                if nu.abs() <= knee {
                    *lambda * nu * nu
                } else {
                    *kappa * nu.abs() - *kappa * *kappa / (T::lit(4.0) * *lambda)
                }
            }
            LocalPenalty::Power { gamma } => nu.abs().powf(*gamma) / *gamma,
            LocalPenalty::HuberPower { gamma, bound } => {
                let knee = bound.powf(T::one() / (*gamma - T::one()));
                if nu.abs() <= knee {
                    nu.abs().powf(*gamma) / *gamma
                } else {
                    knee.powf(*gamma) / *gamma + *bound * (nu.abs() - knee)
                }
            }
            LocalPenalty::Pl(f) => f.eval(nu).expect("tabulated penalty defined on the line"),
        }
    }

    fn smooth_derivative(&self, nu: T) -> T {
        let two = T::lit(2.0);
        match self {
            LocalPenalty::Quadratic { lambda } => two * *lambda * nu,
            LocalPenalty::Huber { lambda, kappa } => (two * *lambda * nu).max(-*kappa).min(*kappa),
            LocalPenalty::Power { gamma } => nu.signum() * nu.abs().powf(*gamma - T::one()),
            LocalPenalty::HuberPower { gamma, bound } => {
                (nu.signum() * nu.abs().powf(*gamma - T::one())).max(-*bound).min(*bound)
            }
            _ => unreachable!("piecewise-linear penalties have no smooth derivative"),
        }
    }

    /// Right derivative.
    pub fn d_right(&self, nu: T) -> T {
        match self {
            LocalPenalty::Abs { kappa } => {
                if nu >= T::zero() {
                    *kappa
                } else {
                    -*kappa
                }
            }
            LocalPenalty::Pl(f) => right_slope(f, nu),
            _ => self.smooth_derivative(nu),
        }
    }

    /// Left derivative.
    pub fn d_left(&self, nu: T) -> T {
        match self {
            LocalPenalty::Abs { kappa } => {
                if nu > T::zero() {
                    *kappa
                } else {
                    -*kappa
                }
            }
            LocalPenalty::Pl(f) => left_slope(f, nu),
            _ => self.smooth_derivative(nu),
        }
    }

    /// `inf { nu : g'_+(nu) >= tau }`.
    pub fn nu_lo(&self, tau: T) -> ExtReal<T> {
        match self {
            LocalPenalty::Abs { kappa } => {
                if tau <= -*kappa {
                    ExtReal::NegInf
                } else if tau <= *kappa {
                    ExtReal::Finite(T::zero())
                } else {
                    ExtReal::PosInf
                }
            }
            LocalPenalty::Pl(f) => f.first_right_slope_at_least(tau),
            _ => self.inverse_derivative(tau, true),
        }
    }

    /// `sup { nu : g'_-(nu) <= tau }`.
    pub fn nu_hi(&self, tau: T) -> ExtReal<T> {
        match self {
            LocalPenalty::Abs { kappa } => {
                if tau >= *kappa {
                    ExtReal::PosInf
                } else if tau >= -*kappa {
                    ExtReal::Finite(T::zero())
                } else {
                    ExtReal::NegInf
                }
            }
            LocalPenalty::Pl(f) => f.last_left_slope_at_most(tau),
            _ => self.inverse_derivative(tau, false),
        }
    }

    fn inverse_derivative(&self, tau: T, lower: bool) -> ExtReal<T> {
        let two = T::lit(2.0);
        let cap = match self {
            LocalPenalty::Huber { kappa, .. } => Some(*kappa),
            LocalPenalty::HuberPower { bound, .. } => Some(*bound),
            _ => None,
        };
        if let Some(b) = cap {
            if tau > b || (tau == b && !lower) {
                return ExtReal::PosInf;
            }
            if tau < -b || (tau == -b && lower) {
                return ExtReal::NegInf;
            }
        }
        ExtReal::Finite(match self {
            LocalPenalty::Quadratic { lambda } | LocalPenalty::Huber { lambda, .. } => tau / (two * *lambda),
            LocalPenalty::Power { gamma } | LocalPenalty::HuberPower { gamma, .. } => {
                tau.signum() * tau.abs().powf(T::one() / (*gamma - T::one()))
            }
            _ => unreachable!(),
        })
    }

    /// Effective domain of the conjugate as `(lo, hi)`.
    pub fn band(&self) -> (ExtReal<T>, ExtReal<T>) {
        let sym = |b: T| (ExtReal::Finite(-b), ExtReal::Finite(b));
        match self {
            LocalPenalty::Quadratic { .. } | LocalPenalty::Power { .. } => (ExtReal::NegInf, ExtReal::PosInf),
            LocalPenalty::Abs { kappa } | LocalPenalty::Huber { kappa, .. } => sym(*kappa),
            LocalPenalty::HuberPower { bound, .. } => sym(*bound),
            LocalPenalty::Pl(f) => (
                f.left_ray().map_or(ExtReal::NegInf, ExtReal::Finite),
                f.right_ray().map_or(ExtReal::PosInf, ExtReal::Finite),
            ),
        }
    }

    /// Conjugate `sup_nu (nu y - g(nu))`.
    pub fn conjugate(&self, y: T) -> ExtReal<T> {
        let (lo, hi) = self.band();
        if !ExtReal::Finite(y).ge(lo) || !hi.ge(ExtReal::Finite(y)) {
            return ExtReal::PosInf;
        }
        ExtReal::Finite(match self {
            LocalPenalty::Quadratic { lambda } | LocalPenalty::Huber { lambda, .. } => {
                y * y / (T::lit(4.0) * *lambda)
            }
            LocalPenalty::Abs { .. } => T::zero(),
            LocalPenalty::Power { gamma } | LocalPenalty::HuberPower { gamma, .. } => {
                let dual = *gamma / (*gamma - T::one());
                y.abs().powf(dual) / dual
            }
            LocalPenalty::Pl(f) => return f.conjugate(y),
        })
    }

    /// Conjugate after snapping `y` onto the band when it lies outside by at
    /// most `tol` (rounding in the conditional expectations).
    pub fn conjugate_within(&self, y: T, tol: T) -> ExtReal<T> {
        let (lo, hi) = self.band();
        let lo_v = lo.finite().map(|b| b - tol);
        let hi_v = hi.finite().map(|b| b + tol);
        let mut yy = y;
        if let (Some(b), Some(lv)) = (lo.finite(), lo_v) {
            if y < b && y >= lv {
                yy = b;
            }
        }
        if let (Some(b), Some(hv)) = (hi.finite(), hi_v) {
            if y > b && y <= hv {
                yy = b;
            }
        }
        self.conjugate(yy)
    }

    /// Derivative of the conjugate inside its band (zero for flat parts).
    pub fn conjugate_derivative(&self, y: T) -> T {
        match self {
            LocalPenalty::Quadratic { lambda } | LocalPenalty::Huber { lambda, .. } => {
                y / (T::lit(2.0) * *lambda)
            }
            LocalPenalty::Abs { .. } => T::zero(),
            LocalPenalty::Power { gamma } | LocalPenalty::HuberPower { gamma, .. } => {
                y.signum() * y.abs().powf(T::one() / (*gamma - T::one()))
            }
            LocalPenalty::Pl(f) => {
                // maximising knot of x y - f(x)
                let mut best = (T::neg_infinity(), T::zero());
                for (x, v) in f.xs().iter().zip(f.ys()) {
                    let val = *x * y - *v;
                    if val > best.0 {
                        best = (val, *x);
                    }
                }
                best.1
            }
        }
    }
}

fn right_slope<T: Scalar>(f: &ConvexPl<T>, x: T) -> T {
    let xs = f.xs();
    let last = xs.len() - 1;
    if x >= xs[last] {
        return f.right_ray().expect("tabulated penalty has rays");
    }
    if x < xs[0] {
        return f.left_ray().expect("tabulated penalty has rays");
    }
    let j = xs.partition_point(|v| *v <= x) - 1;
    f.segment_slope(j)
}

fn left_slope<T: Scalar>(f: &ConvexPl<T>, x: T) -> T {
    let xs = f.xs();
    let last = xs.len() - 1;
    if x <= xs[0] {
        return f.left_ray().expect("tabulated penalty has rays");
    }
    if x > xs[last] {
        return f.right_ray().expect("tabulated penalty has rays");
    }
    let j = xs.partition_point(|v| *v < x) - 1;
    f.segment_slope(j)
}

/// Conjugate of sampled values `(nu_i, g_i)` at `y`: `max_i (nu_i y - g_i)`.
pub fn conjugate_numeric<T: Scalar>(samples: &[(T, T)], y: T) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(samples.iter().map(|(nu, g)| *nu * y - *g).fold(T::neg_infinity(), T::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(n: usize, s: f64) -> PlPath<f64> {
        PlPath::interpolate(vec![s; n + 1]).unwrap()
    }

    #[test]
    fn reference_values() {
        let p = Penalty::proportional(0.1).unwrap();
        assert!((p.g_eval(0.3, &path(100, 100.0), -3.0).unwrap() - 3.0).abs() < 1e-12);
        let q = Penalty::quadratic(0.5).unwrap();
        assert_eq!(q.conj_eval(0.0, &path(4, 100.0), 2.0).unwrap(), ExtReal::Finite(2.0));
        let tz = Penalty::truncated_zero(0.1).unwrap();
        assert_eq!(tz.conj_eval(0.0, &path(4, 100.0), 6.0).unwrap(), ExtReal::PosInf);
        assert_eq!(tz.conj_eval(0.0, &path(4, 100.0), 4.0).unwrap(), ExtReal::Finite(0.0));
    }

    #[test]
    fn truncated_quadratic_closed_form() {
        // n = 4, S = 100, lambda = 0.5, c = 0.25: b = 12.5, knee = 12.5
        let tq = Penalty::truncated_quadratic(0.5, 0.25).unwrap();
        let p = path(4, 100.0);
        assert!((tq.g_eval(0.0, &p, 10.0).unwrap() - 50.0).abs() < 1e-12);
        let expect = 12.5 * 20.0 - 12.5 * 12.5 / 2.0;
        assert!((tq.g_eval(0.0, &p, -20.0).unwrap() - expect).abs() < 1e-12);
        let via_trunc = Penalty::quadratic(0.5).unwrap().truncate(0.25).unwrap();
        assert_eq!(via_trunc, tq);
    }

    #[test]
    fn invalid_parameters() {
        assert!(Penalty::quadratic(0.0).is_err());
        assert!(matches!(Penalty::power(2.5), Err(Error::GrowthOutOfRange(_))));
        assert!(Penalty::power(0.5).is_err());
        assert!(Penalty::proportional(-0.1).is_err());
        let bad = [(-1.0, 1.0), (0.0, 0.0), (1.0, 3.0), (2.0, 4.0)];
        assert!(matches!(TabulatedPenalty::new(&bad, false), Err(Error::NotConvex(_))));
        let shifted = [(-1.0, 2.0), (0.0, 1.0), (1.0, 2.0)];
        assert!(TabulatedPenalty::new(&shifted, false).is_err());
    }

    #[test]
    fn power_special_cases() {
        let p1 = Penalty::power(1.0).unwrap().local(0.0, 1.0, 1);
        assert_eq!(p1, LocalPenalty::Abs { kappa: 1.0 });
        assert_eq!(p1.conjugate(1.5), ExtReal::PosInf);
        let p2 = Penalty::power(2.0).unwrap();
        assert_eq!(p2.scaled_limit().unwrap(), ScaledLimit::Quadratic { coef: 0.5 });
        assert_eq!(Penalty::power(1.5).unwrap().scaled_limit().unwrap(), ScaledLimit::Zero);
    }

    #[test]
    fn tabulated_penalty_and_limits() {
        let tab = TabulatedPenalty::from_text("nu g\n-2 3\n0 0\n1 1\n3 5\n", false).unwrap();
        let pen = Penalty::Tabulated(tab);
        let lp = pen.local(0.0, 100.0, 4);
        assert_eq!(lp.eval(-1.0), 1.5);
        assert_eq!(lp.eval(5.0), 9.0);
        assert_eq!(pen.scaled_limit().unwrap(), ScaledLimit::Zero);
        let smooth = TabulatedPenalty::new(&[(-2.0, 1.0), (-1.0, 0.0), (1.0, 0.0), (2.0, 1.0)], false).unwrap();
        assert!(Penalty::Tabulated(smooth).scaled_limit().is_err());
    }

    #[test]
    fn supply_curve_penalty() {
        // linear supply curve s + 0.5 nu gives 0.5 nu^2
        let nus: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.5).collect();
        let pen = Penalty::from_supply_curve(|nu| 100.0 + 0.5 * nu, 100.0, &nus).unwrap();
        let lp = pen.local(0.0, 100.0, 1);
        assert!((lp.eval(2.0) - 2.0).abs() < 1e-12);
        assert!(Penalty::from_supply_curve(|nu| 100.0 - nu, 100.0, &nus).is_err());
    }

    #[test]
    fn truncation_of_tabulated_is_inf_convolution() {
        let tab = TabulatedPenalty::<f64>::new(&[(-1.0, 2.0), (0.0, 0.0), (1.0, 2.0)], false).unwrap();
        let pen = Penalty::Tabulated(tab).truncate(1.0).unwrap();
        // b = 1 * 4 / sqrt(4) = 2: slopes +-2 are already at the cap
        let lp = pen.local(0.0, 4.0, 4);
        assert!((lp.eval(3.0) - 6.0).abs() < 1e-12);
        let lp = pen.local(0.0, 2.0, 4);
        assert!((lp.eval(3.0) - 3.0).abs() < 1e-12);
    }

    fn all_locals() -> Vec<LocalPenalty<f64>> {
        let tab = TabulatedPenalty::new(&[(-2.0, 3.0), (0.0, 0.0), (1.0, 0.5), (3.0, 4.0)], true).unwrap();
        vec![
            LocalPenalty::Quadratic { lambda: 0.7 },
            LocalPenalty::Abs { kappa: 1.3 },
            LocalPenalty::Huber { lambda: 0.5, kappa: 0.8 },
            LocalPenalty::Power { gamma: 1.5 },
            LocalPenalty::HuberPower { gamma: 1.5, bound: 1.2 },
            Penalty::Tabulated(tab).local(0.0, 2.0, 1),
        ]
    }

    #[test]
    fn fenchel_young_and_biconjugate() {
        let nus: Vec<f64> = (-4000..=4000).map(|i| i as f64 * 0.005).collect();
        for lp in all_locals() {
            let samples: Vec<(f64, f64)> = nus.iter().map(|nu| (*nu, lp.eval(*nu))).collect();
            for y in [-1.1, -0.4, 0.0, 0.3, 0.75, 1.15] {
                let exact = lp.conjugate(y);
                let numeric = conjugate_numeric(&samples, y).unwrap();
                match exact {
                    ExtReal::Finite(v) => assert!((v - numeric).abs() < 1e-4, "{lp:?} y={y}"),
                    _ => assert!(numeric > 1.0, "{lp:?} y={y}"),
                }
                for nu in [-1.5, -0.2, 0.0, 0.4, 2.0] {
                    if let ExtReal::Finite(v) = exact {
                        assert!(lp.eval(nu) + v >= nu * y - 1e-12);
                    }
                }
            }
            // biconjugate at the sample points
            let ys: Vec<f64> = (-5000..=5000).map(|i| i as f64 * 0.001).collect();
            for nu in [-1.0, -0.3, 0.0, 0.6, 1.2] {
                let bi = ys
                    .iter()
                    .filter_map(|y| lp.conjugate(*y).finite().map(|c| nu * y - c))
                    .fold(f64::NEG_INFINITY, f64::max);
                if lp.band().1 == ExtReal::PosInf {
                    // truncated conjugate grid underestimates far out; only check near zero
                    if nu.abs() > 1.0 {
                        continue;
                    }
                }
                assert!((bi - lp.eval(nu)).abs() < 1e-3, "{lp:?} nu={nu}: {bi} vs {}", lp.eval(nu));
            }
        }
    }

    #[test]
    fn scaling_limit_residual() {
        let n = 10_000usize;
        let pen = Penalty::quadratic(0.8).unwrap();
        let lim = pen.scaled_limit().unwrap();
        let p = path(n, 50.0);
        for y in [-3.0, 0.5, 2.0] {
            let g = pen.conj_eval(0.0, &p, y / (n as f64).sqrt()).unwrap().finite().unwrap();
            assert!((n as f64 * g - lim.eval(y)).abs() <= 1e-8);
        }
        let tz = Penalty::truncated_zero(0.3).unwrap();
        let g = tz.conj_eval(0.0, &p, 0.1 / (n as f64).sqrt()).unwrap().finite().unwrap();
        assert!(((n as f64) * g).abs() <= 1e-8);
    }

    proptest! {
        #[test]
        fn second_differences_nonnegative(idx in 0usize..6, h in 0.01f64..0.5, x in -3.0f64..3.0) {
            let lp = &all_locals()[idx];
            let d2 = lp.eval(x - h) - 2.0 * lp.eval(x) + lp.eval(x + h);
            prop_assert!(d2 >= -1e-9);
        }

        #[test]
        fn inverse_derivative_brackets_subgradient(idx in 0usize..6, tau in -2.0f64..2.0) {
            let lp = &all_locals()[idx];
            if let ExtReal::Finite(lo) = lp.nu_lo(tau) {
                prop_assert!(lp.d_right(lo) >= tau - 1e-9);
                prop_assert!(lp.d_right(lo - 1e-6) <= tau + 1e-5);
            }
            if let ExtReal::Finite(hi) = lp.nu_hi(tau) {
                prop_assert!(lp.d_left(hi) <= tau + 1e-9);
                prop_assert!(lp.d_left(hi + 1e-6) >= tau - 1e-5);
            }
        }

        #[test]
        fn penalty_is_adapted(tail in prop::collection::vec(50.0f64..150.0, 3), t in 0.0f64..0.5) {
            // paths agreeing on [0, 0.5] give the same cost at t <= 0.5
            let mut a = vec![100.0, 101.0, 99.0];
            let mut b = a.clone();
            a.extend(tail.iter());
            b.extend([100.0, 100.0, 100.0]);
            let pa = PlPath::interpolate(a).unwrap();
            let pb = PlPath::interpolate(b).unwrap();
            let pen = Penalty::truncated_quadratic(0.5, 0.2).unwrap();
            prop_assert_eq!(pen.g_eval(t, &pa, 1.7).unwrap(), pen.g_eval(t, &pb, 1.7).unwrap());
        }
    }
}
