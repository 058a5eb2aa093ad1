//! Convex piecewise-linear functions of one variable.
//!
//! A function is stored as sorted knots `(x_j, y_j)` plus optional rays to the
//! left of the first knot and to the right of the last one. A missing ray means
//! the domain ends at that knot (the function is `+inf` beyond it).
//!
//! The exact Bellman step of the primal engine is built from three operations
//! here: pointwise maximum, adding a linear function, and the infimal
//! convolution (epigraph sum), which for piecewise-linear convex functions
//! reduces to merging slope sequences.

use crate::error::{Error, Result};
use crate::ext_real::ExtReal;
use crate::scalar::Scalar;

/// Convex piecewise-linear function with optional rays.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPl<T> {
    xs: Vec<T>,
    ys: Vec<T>,
    left: Option<T>,
    right: Option<T>,
}

fn merge_eps<T: Scalar>() -> T {
    T::epsilon() * T::lit(1e4)
}

impl<T: Scalar> ConvexPl<T> {
    /// Builds from knots; `left` / `right` are ray slopes or `None` for a
    /// domain that ends at the outer knot. Convexity is not enforced here.
    pub fn new(xs: Vec<T>, ys: Vec<T>, left: Option<T>, right: Option<T>) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::EmptyGrid);
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("knots must be strictly increasing".into()));
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite knot".into()));
        }
        Ok(Self { xs, ys, left, right })
    }

    /// Interpolant of samples on a bounded interval.
    pub fn from_samples(xs: Vec<T>, ys: Vec<T>) -> Result<Self> {
        Self::new(xs, ys, None, None)
    }

    /// Constant on the whole line.
    pub fn constant(value: T) -> Self {
        Self { xs: vec![T::zero()], ys: vec![value], left: Some(T::zero()), right: Some(T::zero()) }
    }

    /// Constant on `[lo, hi]`.
    pub fn constant_on(lo: T, hi: T, value: T) -> Self {
        if hi > lo {
            Self { xs: vec![lo, hi], ys: vec![value, value], left: None, right: None }
        } else {
            Self { xs: vec![lo], ys: vec![value], left: None, right: None }
        }
    }

    /// `kappa * |x|`.
    pub fn abs(kappa: T) -> Self {
        Self { xs: vec![T::zero()], ys: vec![T::zero()], left: Some(-kappa), right: Some(kappa) }
    }

    pub fn xs(&self) -> &[T] {
        &self.xs
    }

    pub fn ys(&self) -> &[T] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn left_ray(&self) -> Option<T> {
        self.left
    }

    pub fn right_ray(&self) -> Option<T> {
        self.right
    }

    /// Lower end of the domain, `None` if unbounded.
    pub fn lo(&self) -> Option<T> {
        self.left.is_none().then(|| self.xs[0])
    }

    /// Upper end of the domain, `None` if unbounded.
    pub fn hi(&self) -> Option<T> {
        self.right.is_none().then(|| self.xs[self.xs.len() - 1])
    }

    fn last(&self) -> usize {
        self.xs.len() - 1
    }

    /// Slope of the segment `[x_j, x_{j+1}]`.
    pub fn segment_slope(&self, j: usize) -> T {
        (self.ys[j + 1] - self.ys[j]) / (self.xs[j + 1] - self.xs[j])
    }

    /// Right derivative at knot `j`.
    pub fn right_slope_at_knot(&self, j: usize) -> ExtReal<T> {
        if j < self.last() {
            ExtReal::Finite(self.segment_slope(j))
        } else {
            self.right.map_or(ExtReal::PosInf, ExtReal::Finite)
        }
    }

    /// Left derivative at knot `j`.
    pub fn left_slope_at_knot(&self, j: usize) -> ExtReal<T> {
        if j > 0 {
            ExtReal::Finite(self.segment_slope(j - 1))
        } else {
            self.left.map_or(ExtReal::NegInf, ExtReal::Finite)
        }
    }

    /// Value at `x`, `None` outside the domain.
    pub fn eval(&self, x: T) -> Option<T> {
        let last = self.last();
        if x < self.xs[0] {
            return self.left.map(|l| self.ys[0] + l * (x - self.xs[0]));
        }
        if x > self.xs[last] {
            return self.right.map(|r| self.ys[last] + r * (x - self.xs[last]));
        }
        if last == 0 {
            return Some(self.ys[0]);
        }
        let idx = self.xs.partition_point(|v| *v <= x);
        let j = idx.saturating_sub(1).min(last - 1);
        let w = (x - self.xs[j]) / (self.xs[j + 1] - self.xs[j]);
        Some(self.ys[j] + w * (self.ys[j + 1] - self.ys[j]))
    }

    /// Value at `x` after clamping into the domain.
    pub fn eval_clamped(&self, x: T) -> T {
        let mut x = x;
        if let Some(lo) = self.lo() {
            x = x.max(lo);
        }
        if let Some(hi) = self.hi() {
            x = x.min(hi);
        }
        self.eval(x).expect("clamped point inside the domain")
    }

    pub fn sample(&self, points: &[T]) -> Vec<T> {
        points.iter().map(|p| self.eval_clamped(*p)).collect()
    }

    /// `f(x) + a x + b`.
    pub fn add_linear(&self, a: T, b: T) -> Self {
        Self {
            xs: self.xs.clone(),
            ys: self.xs.iter().zip(&self.ys).map(|(x, y)| *y + a * *x + b).collect(),
            left: self.left.map(|l| l + a),
            right: self.right.map(|r| r + a),
        }
    }

    /// `f(-x)`.
    pub fn reflect(&self) -> Self {
        Self {
            xs: self.xs.iter().rev().map(|x| -*x).collect(),
            ys: self.ys.iter().rev().copied().collect(),
            left: self.right.map(|r| -r),
            right: self.left.map(|l| -l),
        }
    }

    /// `c f(x)` for `c >= 0`.
    pub fn scale(&self, c: T) -> Self {
        Self {
            xs: self.xs.clone(),
            ys: self.ys.iter().map(|y| c * *y).collect(),
            left: self.left.map(|l| c * l),
            right: self.right.map(|r| c * r),
        }
    }

    /// `f(x / c)` for `c > 0`.
    pub fn stretch(&self, c: T) -> Self {
        Self {
            xs: self.xs.iter().map(|x| c * *x).collect(),
            ys: self.ys.clone(),
            left: self.left.map(|l| l / c),
            right: self.right.map(|r| r / c),
        }
    }

    /// Restriction to `[lo, hi]`; `None` if the intersection is empty.
    pub fn restrict(&self, lo: T, hi: T) -> Option<Self> {
        let a = self.lo().map_or(lo, |d| d.max(lo));
        let b = self.hi().map_or(hi, |d| d.min(hi));
        if a > b {
            return None;
        }
        let mut xs = vec![a];
        let mut ys = vec![self.eval(a)?];
        for (x, y) in self.xs.iter().zip(&self.ys) {
            if *x > a && *x < b {
                xs.push(*x);
                ys.push(*y);
            }
        }
        if b > a {
            xs.push(b);
            ys.push(self.eval(b)?);
        }
        let mut out = Self { xs, ys, left: None, right: None };
        out.simplify();
        Some(out)
    }

    /// Removes collinear and nearly coincident knots.
    pub fn simplify(&mut self) {
        let eps = merge_eps::<T>();
        let span = (self.xs[self.last()] - self.xs[0]).abs() + T::one();
        let mut xs: Vec<T> = Vec::with_capacity(self.xs.len());
        let mut ys: Vec<T> = Vec::with_capacity(self.ys.len());
        for (x, y) in self.xs.iter().zip(&self.ys) {
            if let Some(px) = xs.last() {
                if (*x - *px).abs() <= eps * span {
                    let last = ys.len() - 1;
                    ys[last] = ys[last].max(*y);
                    continue;
                }
            }
            xs.push(*x);
            ys.push(*y);
        }
        let mut kx: Vec<T> = Vec::with_capacity(xs.len());
        let mut ky: Vec<T> = Vec::with_capacity(ys.len());
        let count = xs.len();
        for j in 0..count {
            if j > 0 && j + 1 < count {
                let px = kx[kx.len() - 1];
                let py = ky[ky.len() - 1];
                let sl = (ys[j] - py) / (xs[j] - px);
                let sr = (ys[j + 1] - ys[j]) / (xs[j + 1] - xs[j]);
                if (sl - sr).abs() <= eps * (T::one() + sl.abs() + sr.abs()) {
                    continue;
                }
            }
            kx.push(xs[j]);
            ky.push(ys[j]);
        }
        let count = kx.len();
        if count >= 2 {
            if let Some(l) = self.left {
                let s = (ky[1] - ky[0]) / (kx[1] - kx[0]);
                if (l - s).abs() <= eps * (T::one() + l.abs() + s.abs()) {
                    kx.remove(0);
                    ky.remove(0);
                }
            }
        }
        let count = kx.len();
        if count >= 2 {
            if let Some(r) = self.right {
                let s = (ky[count - 1] - ky[count - 2]) / (kx[count - 1] - kx[count - 2]);
                if (r - s).abs() <= eps * (T::one() + r.abs() + s.abs()) {
                    kx.pop();
                    ky.pop();
                }
            }
        }
        self.xs = kx;
        self.ys = ky;
    }

    /// Pointwise maximum; `None` if the domains do not intersect.
    pub fn max(&self, other: &Self) -> Option<Self> {
        let lo = match (self.lo(), other.lo()) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        let hi = match (self.hi(), other.hi()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        if let (Some(a), Some(b)) = (lo, hi) {
            if a > b {
                return None;
            }
        }
        let inside = |x: T| lo.map_or(true, |a| x >= a) && hi.map_or(true, |b| x <= b);
        let mut pts: Vec<T> = self.xs.iter().chain(other.xs.iter()).copied().filter(|x| inside(*x)).collect();
        pts.extend(lo);
        pts.extend(hi);
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
        pts.dedup();
        if pts.is_empty() {
            // both unbounded with all knots filtered out cannot happen; keep a point anyway
            pts.push(T::zero());
        }
        let diff = |x: T| self.eval(x).unwrap() - other.eval(x).unwrap();
        let mut xs = Vec::with_capacity(pts.len() * 2);
        let mut ys = Vec::with_capacity(pts.len() * 2);
        let push = |xs: &mut Vec<T>, ys: &mut Vec<T>, x: T| {
            xs.push(x);
            ys.push(self.eval(x).unwrap().max(other.eval(x).unwrap()));
        };
        // crossing on the left ray
        let left = match (self.left, other.left) {
            (Some(a), Some(b)) if lo.is_none() => {
                let p = pts[0];
                let d = diff(p);
                let rel = a - b;
                if rel != T::zero() {
                    let x = p - d / rel;
                    if x < p {
                        push(&mut xs, &mut ys, x);
                    }
                }
                Some(a.min(b))
            }
            _ => None,
        };
        for w in 0..pts.len() {
            let p = pts[w];
            if w > 0 {
                let q = pts[w - 1];
                let dq = diff(q);
                let dp = diff(p);
                if (dq < T::zero() && dp > T::zero()) || (dq > T::zero() && dp < T::zero()) {
                    let x = q + (p - q) * dq / (dq - dp);
                    if x > q && x < p {
                        push(&mut xs, &mut ys, x);
                    }
                }
            }
            push(&mut xs, &mut ys, p);
        }
        let right = match (self.right, other.right) {
            (Some(a), Some(b)) if hi.is_none() => {
                let p = pts[pts.len() - 1];
                let d = diff(p);
                let rel = a - b;
                if rel != T::zero() {
                    let x = p - d / rel;
                    if x > p {
                        push(&mut xs, &mut ys, x);
                    }
                }
                Some(a.max(b))
            }
            _ => None,
        };
        let mut out = Self { xs, ys, left, right };
        out.simplify();
        Some(out)
    }

    /// Pointwise sum over the common domain.
    pub fn add(&self, other: &Self) -> Option<Self> {
        let lo = match (self.lo(), other.lo()) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        let hi = match (self.hi(), other.hi()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        if let (Some(a), Some(b)) = (lo, hi) {
            if a > b {
                return None;
            }
        }
        let inside = |x: T| lo.map_or(true, |a| x >= a) && hi.map_or(true, |b| x <= b);
        let mut pts: Vec<T> = self.xs.iter().chain(other.xs.iter()).copied().filter(|x| inside(*x)).collect();
        pts.extend(lo);
        pts.extend(hi);
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
        pts.dedup();
        let ys = pts.iter().map(|x| self.eval(*x).unwrap() + other.eval(*x).unwrap()).collect();
        let left = match (self.left, other.left) {
            (Some(a), Some(b)) if lo.is_none() => Some(a + b),
            _ => None,
        };
        let right = match (self.right, other.right) {
            (Some(a), Some(b)) if hi.is_none() => Some(a + b),
            _ => None,
        };
        let mut out = Self { xs: pts, ys, left, right };
        out.simplify();
        Some(out)
    }

    /// Splits at the leftmost minimiser into outward slope sequences.
    fn decompose(&self) -> Result<Decomposed<T>> {
        let last = self.last();
        if matches!(self.left, Some(l) if l > T::zero()) || matches!(self.right, Some(r) if r < T::zero()) {
            return Err(Error::Unbounded);
        }
        let star = (0..=last)
            .find(|j| self.right_slope_at_knot(*j).ge(ExtReal::Finite(T::zero())))
            .ok_or(Error::Unbounded)?;
        let right = (star..last).map(|j| (self.segment_slope(j), self.xs[j + 1] - self.xs[j])).collect();
        let left = (0..star).rev().map(|j| (self.segment_slope(j), self.xs[j + 1] - self.xs[j])).collect();
        Ok(Decomposed {
            x: self.xs[star],
            y: self.ys[star],
            left,
            left_ray: self.left,
            right,
            right_ray: self.right,
        })
    }

    /// Infimal convolution `inf_z f(z) + g(x - z)`.
    pub fn inf_convolution(&self, other: &Self) -> Result<Self> {
        let a = self.decompose()?;
        let b = other.decompose()?;
        let x0 = a.x + b.x;
        let y0 = a.y + b.y;
        let (right, right_ray) = merge_slopes(&a.right, a.right_ray, &b.right, b.right_ray, |s, t| s <= t);
        let (left, left_ray) = merge_slopes(&a.left, a.left_ray, &b.left, b.left_ray, |s, t| s >= t);
        let mut xs = Vec::with_capacity(left.len() + right.len() + 1);
        let mut ys = Vec::with_capacity(left.len() + right.len() + 1);
        let (mut x, mut y) = (x0, y0);
        let mut lx = Vec::with_capacity(left.len());
        let mut ly = Vec::with_capacity(left.len());
        for (s, len) in &left {
            x = x - *len;
            y = y - *s * *len;
            lx.push(x);
            ly.push(y);
        }
        xs.extend(lx.into_iter().rev());
        ys.extend(ly.into_iter().rev());
        xs.push(x0);
        ys.push(y0);
        let (mut x, mut y) = (x0, y0);
        for (s, len) in &right {
            x = x + *len;
            y = y + *s * *len;
            xs.push(x);
            ys.push(y);
        }
        let mut out = Self { xs, ys, left: left_ray, right: right_ray };
        out.simplify();
        Ok(out)
    }

    /// Minimiser interval and minimum value.
    pub fn argmin(&self) -> Result<(ExtReal<T>, ExtReal<T>, T)> {
        let d = self.decompose()?;
        let lo = if d.left.is_empty() && d.left_ray == Some(T::zero()) {
            ExtReal::NegInf
        } else {
            ExtReal::Finite(d.x)
        };
        let mut hi = d.x;
        for (s, len) in &d.right {
            if *s > T::zero() {
                return Ok((lo, ExtReal::Finite(hi), d.y));
            }
            hi = hi + *len;
        }
        if d.right_ray == Some(T::zero()) {
            return Ok((lo, ExtReal::PosInf, d.y));
        }
        Ok((lo, ExtReal::Finite(hi), d.y))
    }

    /// Convex conjugate `sup_x (x y - f(x))`.
    pub fn conjugate(&self, y: T) -> ExtReal<T> {
        if matches!(self.left, Some(l) if y < l) || matches!(self.right, Some(r) if y > r) {
            return ExtReal::PosInf;
        }
        let best = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, v)| *x * y - *v)
            .fold(T::neg_infinity(), T::max);
        ExtReal::Finite(best)
    }

    /// `inf { x : f'_+(x) >= tau }` over the domain.
    pub fn first_right_slope_at_least(&self, tau: T) -> ExtReal<T> {
        if matches!(self.left, Some(l) if l >= tau) {
            return ExtReal::NegInf;
        }
        let tau = ExtReal::Finite(tau);
        let idx = partition(self.last() + 1, |j| !self.right_slope_at_knot(j).ge(tau));
        if idx > self.last() {
            ExtReal::PosInf
        } else {
            ExtReal::Finite(self.xs[idx])
        }
    }

    /// `sup { x : f'_-(x) <= tau }` over the domain.
    pub fn last_left_slope_at_most(&self, tau: T) -> ExtReal<T> {
        if matches!(self.right, Some(r) if r <= tau) {
            return ExtReal::PosInf;
        }
        let tau = ExtReal::Finite(tau);
        let idx = partition(self.last() + 1, |j| tau.ge(self.left_slope_at_knot(j)));
        if idx == 0 {
            ExtReal::NegInf
        } else {
            ExtReal::Finite(self.xs[idx - 1])
        }
    }

    /// Smallest second difference of the samples on `points` (uniform grid).
    pub fn min_second_difference(&self, points: &[T]) -> T {
        let v = self.sample(points);
        v.windows(3)
            .map(|w| w[0] - w[1] - w[1] + w[2])
            .fold(T::infinity(), T::min)
    }
}

struct Decomposed<T> {
    x: T,
    y: T,
    left: Vec<(T, T)>,
    left_ray: Option<T>,
    right: Vec<(T, T)>,
    right_ray: Option<T>,
}

/// Number of leading indices in `0..len` satisfying the monotone predicate.
fn partition(len: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, len);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Merges two outward slope sequences; `first` orders the next slope to take.
/// A ray ends the merge with its slope.
fn merge_slopes<T: Scalar>(
    a: &[(T, T)],
    a_ray: Option<T>,
    b: &[(T, T)],
    b_ray: Option<T>,
    first: impl Fn(T, T) -> bool,
) -> (Vec<(T, T)>, Option<T>) {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    loop {
        let na = a.get(i).map(|s| s.0).or(a_ray);
        let nb = b.get(j).map(|s| s.0).or(b_ray);
        let take_a = match (na, nb) {
            (None, None) => return (out, None),
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(s), Some(t)) => first(s, t),
        };
        if take_a {
            match a.get(i) {
                Some(seg) => {
                    out.push(*seg);
                    i += 1;
                }
                None => return (out, a_ray),
            }
        } else {
            match b.get(j) {
                Some(seg) => {
                    out.push(*seg);
                    j += 1;
                }
                None => return (out, b_ray),
            }
        }
    }
}
