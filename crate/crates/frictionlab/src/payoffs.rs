//! Contingent claims on the interpolated price path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::market_tree::{MarketParams, PathPrefix, PlPath};
use crate::scalar::Scalar;

/// How Asian claims average the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingRule {
    /// Time integral of the interpolated path over [0, 1].
    #[default]
    TimeIntegral,
    /// Mean of the `n + 1` knots.
    KnotMean,
}

/// Smallest state that determines the payoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarkovState {
    TerminalPrice,
    PriceAndAverage,
    FullPath,
}

/// Payoff given by a table of `(terminal price, payoff)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedPayoff<T> {
    prices: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> TabulatedPayoff<T> {
    pub fn new(points: &[(T, T)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("tabulated payoff needs at least two points"));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(invalid("tabulated payoff prices must be strictly increasing"));
        }
        if points.iter().any(|p| p.1 < T::zero() || !p.1.is_finite()) {
            return Err(invalid("tabulated payoff must be finite and non-negative"));
        }
        Ok(Self { prices: points.iter().map(|p| p.0).collect(), values: points.iter().map(|p| p.1).collect() })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows = crate::text_io::parse_two_columns(text)?;
        let pts: Vec<(T, T)> = rows.iter().map(|(a, b)| (T::lit(*a), T::lit(*b))).collect();
        Self::new(&pts)
    }

    fn slope(&self, j: usize) -> T {
        (self.values[j + 1] - self.values[j]) / (self.prices[j + 1] - self.prices[j])
    }

    /// Linear interpolation, extrapolated with the end slopes and floored at 0.
    pub fn eval(&self, s: T) -> T {
        let k = self.prices.len();
        let j = if s <= self.prices[0] {
            0
        } else if s >= self.prices[k - 1] {
            k - 2
        } else {
            self.prices.partition_point(|p| *p <= s) - 1
        };
        (self.values[j] + self.slope(j) * (s - self.prices[j])).max(T::zero())
    }

    pub fn lipschitz(&self) -> T {
        (0..self.prices.len() - 1).map(|j| self.slope(j).abs()).fold(T::zero(), T::max)
    }
}

/// Payoff families.
#[derive(Debug, Clone, PartialEq)]
pub enum ClaimKind<T> {
    Constant { value: T },
    Call { strike: T },
    Put { strike: T },
    AsianCall { strike: T },
    AsianPut { strike: T },
    /// `(max_t S(t) - strike)^+`.
    LookbackMax { strike: T },
    Tabulated(TabulatedPayoff<T>),
}

/// Polynomial growth bound `F(S) <= c (1 + |S|^p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Growth<T> {
    pub c: T,
    pub p: T,
}

/// A claim together with its growth certificate and averaging convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Claim<T> {
    pub kind: ClaimKind<T>,
    pub growth: Option<Growth<T>>,
    pub averaging: AveragingRule,
}

/// Outcome of [`growth_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub passed: bool,
    /// Largest `F / (c (1 + |S|^p))` seen.
    pub worst_ratio: f64,
    pub worst_moves: Vec<i8>,
    pub paths_checked: usize,
}

impl<T: Scalar> Claim<T> {
    pub fn new(kind: ClaimKind<T>) -> Self {
        Self { kind, growth: None, averaging: AveragingRule::TimeIntegral }
    }

    pub fn call(strike: T) -> Self {
        Self::new(ClaimKind::Call { strike })
    }

    pub fn put(strike: T) -> Self {
        Self::new(ClaimKind::Put { strike })
    }

    pub fn constant(value: T) -> Self {
        Self::new(ClaimKind::Constant { value })
    }

    pub fn with_averaging(mut self, rule: AveragingRule) -> Self {
        self.averaging = rule;
        self
    }

    /// Attaches a growth certificate; exponents above 2 are rejected.
    pub fn with_growth(mut self, c: T, p: T) -> Result<Self> {
        if p > T::lit(2.0) {
            return Err(Error::GrowthOutOfRange(p.f64()));
        }
        if !(c > T::zero()) || !(p >= T::zero()) {
            return Err(invalid("growth constants must be positive"));
        }
        self.growth = Some(Growth { c, p });
        Ok(self)
    }

    /// `F(path)`.
    pub fn payoff(&self, path: &PlPath<T>) -> T {
        let pos = |x: T| x.max(T::zero());
        let s = path.knot(path.n());
        match &self.kind {
            ClaimKind::Constant { value } => *value,
            ClaimKind::Call { strike } => pos(s - *strike),
            ClaimKind::Put { strike } => pos(*strike - s),
            ClaimKind::AsianCall { strike } => pos(self.average(path) - *strike),
            ClaimKind::AsianPut { strike } => pos(*strike - self.average(path)),
            ClaimKind::LookbackMax { strike } => pos(path.max() - *strike),
            ClaimKind::Tabulated(tab) => tab.eval(s),
        }
    }

    fn average(&self, path: &PlPath<T>) -> T {
        match self.averaging {
            AveragingRule::TimeIntegral => path.average(),
            AveragingRule::KnotMean => path.knot_mean(),
        }
    }

    pub fn markov_state(&self) -> MarkovState {
        match self.kind {
            ClaimKind::Constant { .. } | ClaimKind::Call { .. } | ClaimKind::Put { .. } | ClaimKind::Tabulated(_) => {
                MarkovState::TerminalPrice
            }
            ClaimKind::AsianCall { .. } | ClaimKind::AsianPut { .. } => MarkovState::PriceAndAverage,
            ClaimKind::LookbackMax { .. } => MarkovState::FullPath,
        }
    }

    /// Payoff as a function of the terminal price, for terminal-price claims.
    pub fn terminal_payoff(&self, s: T) -> Option<T> {
        let pos = |x: T| x.max(T::zero());
        match &self.kind {
            ClaimKind::Constant { value } => Some(*value),
            ClaimKind::Call { strike } => Some(pos(s - *strike)),
            ClaimKind::Put { strike } => Some(pos(*strike - s)),
            ClaimKind::Tabulated(tab) => Some(tab.eval(s)),
            _ => None,
        }
    }

    /// Payoff from the running average, for Asian claims.
    pub fn average_payoff(&self, avg: T) -> Option<T> {
        let pos = |x: T| x.max(T::zero());
        match &self.kind {
            ClaimKind::AsianCall { strike } => Some(pos(avg - *strike)),
            ClaimKind::AsianPut { strike } => Some(pos(*strike - avg)),
            _ => None,
        }
    }

    /// Running average before the first move.
    pub fn average_start(&self, n: usize, s0: T) -> T {
        match self.averaging {
            AveragingRule::TimeIntegral => T::zero(),
            AveragingRule::KnotMean => s0 / T::of(n + 1),
        }
    }

    /// Running average increment over one step.
    pub fn average_increment(&self, n: usize, s_now: T, s_next: T) -> T {
        match self.averaging {
            AveragingRule::TimeIntegral => (s_now + s_next) * T::lit(0.5) / T::of(n),
            AveragingRule::KnotMean => s_next / T::of(n + 1),
        }
    }

    /// Sensitivity of the payoff to the path in sup norm.
    pub fn lipschitz(&self) -> T {
        match &self.kind {
            ClaimKind::Constant { .. } => T::zero(),
            ClaimKind::Tabulated(tab) => tab.lipschitz(),
            _ => T::one(),
        }
    }
}

/// Checks `F(path) <= c (1 + max|S|^p)` on the extreme paths plus `samples`
/// random paths of the `n`-step tree.
pub fn growth_check<T: Scalar>(
    claim: &Claim<T>,
    params: &MarketParams<T>,
    samples: usize,
    seed: u64,
) -> Result<GrowthReport> {
    let growth = claim.growth.ok_or_else(|| invalid("claim has no growth certificate"))?;
    let n = params.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = vec![vec![1i8; n], vec![-1i8; n]];
    for _ in 0..samples {
        paths.push((0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect());
    }
    let mut report = GrowthReport { passed: true, worst_ratio: 0.0, worst_moves: Vec::new(), paths_checked: paths.len() };
    for moves in paths {
        let path = PlPath::from_moves(params, &PathPrefix::new(moves.clone())?)?;
        let bound = growth.c * (T::one() + path.max().abs().powf(growth.p));
        let ratio = (claim.payoff(&path) / bound).f64();
        if ratio > report.worst_ratio || report.worst_moves.is_empty() {
            report.worst_ratio = ratio;
            report.worst_moves = moves;
        }
    }
    report.passed = report.worst_ratio <= 1.0;
    Ok(report)
}
