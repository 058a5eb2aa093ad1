//! Binomial market: parameters, price paths, tree and lattice nodes, and the
//! piecewise-linear interpolation of a discrete price path on [0, 1].
//!
//! Prices follow `S(k) = s0 * exp(sigma / sqrt(n) * (xi_1 + ... + xi_k))` with
//! `xi_i = +1 / -1`. A tree node `(k, bits)` stores the first move in the most
//! significant of its `k` bits, so the children of `(k, b)` are `(k + 1, 2b + 1)`
//! (up) and `(k + 1, 2b)` (down).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Largest `n` the exhaustive full-tree engines accept by default.
pub const EXHAUSTIVE_CAP: usize = 14;

/// Number of steps, volatility and initial price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams<T> {
    n: usize,
    sigma: T,
    s0: T,
}

impl<T: Scalar> MarketParams<T> {
    pub fn new(n: usize, sigma: T, s0: T) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        if !(s0 > T::zero()) || !s0.is_finite() {
            return Err(invalid(format!("s0 must be positive, got {s0}")));
        }
        Ok(Self { n, sigma, s0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn s0(&self) -> T {
        self.s0
    }

    /// Same market with a different number of steps.
    pub fn with_n(&self, n: usize) -> Result<Self> {
        Self::new(n, self.sigma, self.s0)
    }

    /// Log-price increment `sigma / sqrt(n)`.
    pub fn dx(&self) -> T {
        self.sigma / T::of(self.n).sqrt()
    }

    /// Price after a net number of up moves `level`.
    pub fn price_at_level(&self, level: i64) -> T {
        self.s0 * (self.dx() * T::of_i(level)).exp()
    }

    /// Risk-neutral up probability of the frictionless CRR model.
    pub fn crr_probability(&self) -> T {
        let d = self.dx();
        // (1 - e^{-d}) / (e^{d} - e^{-d}) written without cancellation
        -(-d).exp_m1() / (d.exp() - (-d).exp())
    }

    /// Price process of a node of the full tree.
    pub fn node_price(&self, node: TreeNode) -> T {
        self.price_at_level(node.level())
    }

    /// Stopped path `S(u_1, ..., u_{k ^ l})` of a tree node, interpolated on [0, 1].
    pub fn node_path(&self, node: TreeNode) -> PlPath<T> {
        let prefix = node.moves();
        let mut knots = Vec::with_capacity(self.n + 1);
        let mut level = 0i64;
        knots.push(self.s0);
        for j in 0..self.n {
            if j < prefix.len() {
                level += i64::from(prefix[j]);
            }
            knots.push(self.price_at_level(level));
        }
        PlPath { knots }
    }
}

/// A finite sequence of moves, each `+1` or `-1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathPrefix {
    moves: Vec<i8>,
}

impl PathPrefix {
    pub fn new(moves: Vec<i8>) -> Result<Self> {
        if let Some(bad) = moves.iter().find(|m| **m != 1 && **m != -1) {
            return Err(Error::InvalidPath(format!("move {bad} is not +1 or -1")));
        }
        Ok(Self { moves })
    }

    pub fn moves(&self) -> &[i8] {
        &self.moves
    }

    pub fn len(&self) -> usize {
        self.moves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }

    /// Net number of up moves.
    pub fn level(&self) -> i64 {
        self.moves.iter().map(|m| i64::from(*m)).sum()
    }

    pub fn node(&self) -> TreeNode {
        let bits = self.moves.iter().fold(0u64, |b, m| (b << 1) | u64::from(*m == 1));
        TreeNode { k: self.moves.len(), bits }
    }
}

/// Node of the full (non-recombining) tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreeNode {
    pub k: usize,
    pub bits: u64,
}

impl TreeNode {
    pub const ROOT: TreeNode = TreeNode { k: 0, bits: 0 };

    pub fn new(k: usize, bits: u64) -> Result<Self> {
        if k >= 64 || bits >> k != 0 {
            return Err(Error::InvalidNode(format!("bits {bits} do not fit depth {k}")));
        }
        Ok(Self { k, bits })
    }

    pub fn up(self) -> Self {
        Self { k: self.k + 1, bits: (self.bits << 1) | 1 }
    }

    pub fn down(self) -> Self {
        Self { k: self.k + 1, bits: self.bits << 1 }
    }

    pub fn parent(self) -> Option<Self> {
        (self.k > 0).then(|| Self { k: self.k - 1, bits: self.bits >> 1 })
    }

    /// Last move, or 0 at the root.
    pub fn last_move(self) -> i8 {
        match self.k {
            0 => 0,
            _ if self.bits & 1 == 1 => 1,
            _ => -1,
        }
    }

    pub fn level(self) -> i64 {
        2 * i64::from(self.bits.count_ones()) - self.k as i64
    }

    pub fn moves(self) -> Vec<i8> {
        (0..self.k)
            .map(|i| if (self.bits >> (self.k - 1 - i)) & 1 == 1 { 1 } else { -1 })
            .collect()
    }

    /// Text id: `r` followed by one `u` or `d` per move.
    pub fn id(self) -> String {
        let mut s = String::with_capacity(self.k + 1);
        s.push('r');
        for m in self.moves() {
            s.push(if m == 1 { 'u' } else { 'd' });
        }
        s
    }

    pub fn parse_id(id: &str) -> Result<Self> {
        let rest = id
            .strip_prefix('r')
            .ok_or_else(|| Error::InvalidNode(format!("node id {id:?} must start with 'r'")))?;
        let mut node = TreeNode::ROOT;
        for c in rest.chars() {
            node = match c {
                'u' => node.up(),
                'd' => node.down(),
                _ => return Err(Error::InvalidNode(format!("bad move {c:?} in {id:?}"))),
            };
        }
        Ok(node)
    }
}

/// Node of the recombining lattice: time `k` and net up moves `level`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeNode {
    pub k: usize,
    pub level: i64,
}

impl LatticeNode {
    pub fn new(k: usize, level: i64) -> Result<Self> {
        if level.unsigned_abs() as usize > k || (level + k as i64).rem_euclid(2) != 0 {
            return Err(Error::InvalidNode(format!("level {level} unreachable at time {k}")));
        }
        Ok(Self { k, level })
    }

    /// Position in the slice of time `k`, from 0 (all down) to `k` (all up).
    pub fn index(self) -> usize {
        ((self.level + self.k as i64) / 2) as usize
    }

    pub fn from_index(k: usize, i: usize) -> Self {
        Self { k, level: 2 * i as i64 - k as i64 }
    }
}

/// Price after the moves of `prefix`.
pub fn stock_price<T: Scalar>(params: &MarketParams<T>, prefix: &PathPrefix) -> Result<T> {
    if prefix.len() > params.n() {
        return Err(Error::InvalidPath(format!(
            "prefix of length {} longer than n = {}",
            prefix.len(),
            params.n()
        )));
    }
    Ok(params.price_at_level(prefix.level()))
}

/// Price at a lattice node.
pub fn lattice_price<T: Scalar>(params: &MarketParams<T>, node: LatticeNode) -> Result<T> {
    if node.k > params.n() {
        return Err(Error::InvalidNode(format!("time {} beyond n = {}", node.k, params.n())));
    }
    LatticeNode::new(node.k, node.level)?;
    Ok(params.price_at_level(node.level))
}

/// Piecewise-linear path on [0, 1] with knots at `k / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlPath<T> {
    knots: Vec<T>,
}

impl<T: Scalar> PlPath<T> {
    /// Interpolates `values[k]` placed at `t = k / n`, `n = values.len() - 1`.
    pub fn interpolate(values: Vec<T>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidPath("need at least two knots".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPath("non-finite knot".into()));
        }
        Ok(Self { knots: values })
    }

    /// Interpolates the prices along a full sequence of moves.
    pub fn from_moves(params: &MarketParams<T>, prefix: &PathPrefix) -> Result<Self> {
        if prefix.len() != params.n() {
            return Err(Error::InvalidPath(format!(
                "expected {} moves, got {}",
                params.n(),
                prefix.len()
            )));
        }
        let mut level = 0;
        let mut knots = vec![params.s0()];
        for m in prefix.moves() {
            level += i64::from(*m);
            knots.push(params.price_at_level(level));
        }
        Ok(Self { knots })
    }

    pub fn n(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn knot(&self, k: usize) -> T {
        self.knots[k]
    }

    /// Value at time `t`, linear between knots.
    pub fn eval(&self, t: T) -> Result<T> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::TimeOutOfRange(t.f64()));
        }
        let n = self.n();
        let s = t * T::of(n);
        let k = s.floor().to_usize().unwrap_or(0).min(n - 1);
        let w = s - T::of(k);
        Ok(self.knots[k] + w * (self.knots[k + 1] - self.knots[k]))
    }

    /// Supremum over [0, 1]; attained at a knot.
    pub fn max(&self) -> T {
        self.knots.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.knots.iter().copied().fold(T::infinity(), T::min)
    }

    /// Time integral over [0, 1]; the trapezoid rule is exact here.
    pub fn average(&self) -> T {
        let n = self.n();
        let inner: T = self.knots[1..n].iter().copied().sum();
        (inner + (self.knots[0] + self.knots[n]) * T::lit(0.5)) / T::of(n)
    }

    /// Arithmetic mean of the `n + 1` knots.
    pub fn knot_mean(&self) -> T {
        self.knots.iter().copied().sum::<T>() / T::of(self.knots.len())
    }
}
