//! Experiments behind the CLI subcommands. Each returns rows in config order
//! plus wall-clock timings, which are kept apart so the rows stay
//! reproducible.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use frictionlab::dual::{
    dual_ascent_lattice, dual_ascent_tree, dual_brute_force, kusuoka_lower_bound, AscentOptions, StepRule,
    BRUTE_FORCE_CAP,
};
use frictionlab::friction::{Penalty, ScaledLimit};
use frictionlab::limit_pde::{
    bs_for_claim, liquidity_premium_probe, solve_with, ControlRule, HjbGrid, HjbSolution, LimitSpec, PremiumReport,
};
use frictionlab::market_tree::EXHAUSTIVE_CAP;
use frictionlab::payoffs::{Claim, ClaimKind, MarkovState};
use frictionlab::primal::{superrep_exact, superrep_lattice, verify_superreplication, GammaGrid, PrimalOptions, Strategy};
use frictionlab::{Error, Market};

use crate::config::{Engine, ExperimentConfig};
use crate::error::{HarnessError, Result};

/// Slack allowed in the ordering `dual <= primal` and `kusuoka <= primal`.
pub const ORDER_TOLERANCE: f64 = 1e-6;

/// Snapshots kept by the `hjb` surface export besides `t = 1` and `t = 0`.
pub const SURFACE_SNAPSHOTS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub label: String,
    pub ms: f64,
}

fn timed<R>(label: String, timings: &mut Vec<Timing>, f: impl FnOnce() -> R) -> R {
    let start = Instant::now();
    let out = f();
    timings.push(Timing { label, ms: start.elapsed().as_secs_f64() * 1e3 });
    out
}

/// Engine actually used for one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Exact,
    Lattice,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Exact => "exact",
            Solver::Lattice => "lattice",
        }
    }
}

fn lattice_capable(pen: &Penalty<f64>, claim: &Claim<f64>) -> bool {
    pen.is_price_markov() && claim.markov_state() != MarkovState::FullPath
}

/// Resolves `auto`: the lattice whenever it can price the claim.
pub fn choose_solver(engine: Engine, pen: &Penalty<f64>, claim: &Claim<f64>) -> Solver {
    match engine {
        Engine::Exact => Solver::Exact,
        Engine::Lattice => Solver::Lattice,
        Engine::Auto if lattice_capable(pen, claim) => Solver::Lattice,
        Engine::Auto => Solver::Exact,
    }
}

pub fn primal_options(cfg: &ExperimentConfig, claim: &Claim<f64>) -> Result<PrimalOptions<f64>> {
    let m = cfg.grids.gamma_points;
    let grid = match cfg.grids.gamma_half_width {
        Some(h) => GammaGrid::new(-h, h, m)?,
        None => GammaGrid::for_claim(claim, m)?,
    };
    let mut opts = PrimalOptions::new(grid);
    opts.average_buckets = cfg.grids.average_buckets;
    Ok(opts)
}

fn ascent_options(cfg: &ExperimentConfig) -> AscentOptions<f64> {
    AscentOptions {
        steps: cfg.dual.steps,
        starts: cfg.dual.starts,
        seed: cfg.seed,
        rule: StepRule::Adaptive { initial: cfg.dual.step, grow: 1.5 },
        ..AscentOptions::default()
    }
}

/// `|a - b| / |b|`, or `|a - b|` when `b` vanishes.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if b == 0.0 {
        d
    } else {
        d / b.abs()
    }
}

/// Turns an engine refusal into `None`; other errors pass through.
fn optional<T>(r: frictionlab::Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_refusal() => Ok(None),
        Err(e) => Err(e.into()),
    }
}

struct Context {
    pen: Penalty<f64>,
    claim: Claim<f64>,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self { pen: cfg.penalty()?, claim: cfg.claim()? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriceRow {
    pub n: usize,
    pub engine: Solver,
    pub value: f64,
    pub boundary_hit: bool,
    pub widenings: usize,
    pub min_second_difference: f64,
}

#[derive(Debug, Clone)]
pub struct PriceReport {
    pub rows: Vec<PriceRow>,
    /// Extracted strategies of exact solves, by `n`.
    pub strategies: Vec<(usize, Strategy<f64>)>,
    pub timings: Vec<Timing>,
}

fn solve_primal(
    market: &Market,
    ctx: &Context,
    opts: &PrimalOptions<f64>,
    solver: Solver,
) -> Result<(PriceRow, Option<Strategy<f64>>)> {
    let n = market.n();
    Ok(match solver {
        Solver::Exact => {
            let s = superrep_exact(market, &ctx.pen, &ctx.claim, opts)?;
            let row = PriceRow {
                n,
                engine: solver,
                value: s.value,
                boundary_hit: s.boundary_hit,
                widenings: s.widenings,
                min_second_difference: s.min_second_difference,
            };
            (row, Some(s.strategy()))
        }
        Solver::Lattice => {
            let s = superrep_lattice(market, &ctx.pen, &ctx.claim, opts)?;
            let row = PriceRow {
                n,
                engine: solver,
                value: s.value,
                boundary_hit: s.boundary_hit,
                widenings: s.widenings,
                min_second_difference: s.min_second_difference,
            };
            (row, None)
        }
    })
}

/// One primal solve per `n`.
pub fn run_price(cfg: &ExperimentConfig) -> Result<PriceReport> {
    let ctx = Context::new(cfg)?;
    let opts = primal_options(cfg, &ctx.claim)?;
    let solver = choose_solver(cfg.engine, &ctx.pen, &ctx.claim);
    let mut rows = Vec::new();
    let mut strategies = Vec::new();
    let mut timings = Vec::new();
    for &n in &cfg.market.n {
        let market = cfg.market(n)?;
        let (row, strategy) = timed(format!("price n={n}"), &mut timings, || solve_primal(&market, &ctx, &opts, solver))?;
        rows.push(row);
        if let Some(s) = strategy {
            strategies.push((n, s));
        }
    }
    Ok(PriceReport { rows, strategies, timings })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityRow {
    pub n: usize,
    pub primal: f64,
    pub dual: f64,
    pub upper_bound: Option<f64>,
    pub method: String,
    pub iterations: usize,
    pub rel_gap: f64,
}

#[derive(Debug, Clone)]
pub struct DualityReport {
    pub rows: Vec<DualityRow>,
    /// Rows whose gap exceeds the configured threshold.
    pub breaches: Vec<String>,
    pub timings: Vec<Timing>,
}

/// Exact primal against the brute-force dual (`n <= 3`) or the ascent dual
/// on the full tree.
pub fn run_duality_check(cfg: &ExperimentConfig) -> Result<DualityReport> {
    let ctx = Context::new(cfg)?;
    let opts = primal_options(cfg, &ctx.claim)?;
    if let Some(&n) = cfg.market.n.iter().find(|&&n| n > EXHAUSTIVE_CAP) {
        return Err(Error::NodeCapExceeded { n, cap: EXHAUSTIVE_CAP }.into());
    }
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for &n in &cfg.market.n {
        let market = cfg.market(n)?;
        let primal = timed(format!("primal n={n}"), &mut timings, || superrep_exact(&market, &ctx.pen, &ctx.claim, &opts))?;
        let report = timed(format!("dual n={n}"), &mut timings, || {
            if n <= BRUTE_FORCE_CAP {
                dual_brute_force(&market, &ctx.pen, &ctx.claim, cfg.grids.q_resolution)
            } else {
                dual_ascent_tree(&market, &ctx.pen, &ctx.claim, None, &ascent_options(cfg))
            }
        })?;
        rows.push(DualityRow {
            n,
            primal: primal.value,
            dual: report.value,
            upper_bound: report.upper_bound,
            method: report.method.clone(),
            iterations: report.iterations,
            rel_gap: relative_gap(report.value, primal.value),
        });
    }
    let breaches = match cfg.thresholds.duality_gap {
        Some(tol) => rows
            .iter()
            .filter(|r| !(r.rel_gap <= tol))
            .map(|r| format!("n={}: relative duality gap {:.3e} above {tol:.3e}", r.n, r.rel_gap))
            .collect(),
        None => Vec::new(),
    };
    Ok(DualityReport { rows, breaches, timings })
}

/// Where the limit value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitSource {
    Constant,
    ClosedForm,
    Hjb,
}

impl LimitSource {
    pub fn name(self) -> &'static str {
        match self {
            LimitSource::Constant => "constant",
            LimitSource::ClosedForm => "closed_form",
            LimitSource::Hjb => "hjb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitValue {
    pub value: f64,
    pub source: LimitSource,
}

fn limit_spec(cfg: &ExperimentConfig, pen: &Penalty<f64>) -> Result<LimitSpec<f64>> {
    Ok(LimitSpec::from_penalty(pen, cfg.market.sigma, cfg.market.s0)?)
}

/// Value of the limit problem at `s0`: exact for constants, the closed form
/// for calls and puts without running cost, the HJB solver otherwise.
/// `None` when the penalty has no scaled limit or the claim is not Markov.
pub fn limit_value(cfg: &ExperimentConfig, pen: &Penalty<f64>, claim: &Claim<f64>) -> Result<Option<LimitValue>> {
    if let ClaimKind::Constant { value } = claim.kind {
        return Ok(Some(LimitValue { value, source: LimitSource::Constant }));
    }
    let Some(spec) = optional(LimitSpec::from_penalty(pen, cfg.market.sigma, cfg.market.s0))? else {
        return Ok(None);
    };
    if spec.cost == ScaledLimit::Zero && matches!(claim.kind, ClaimKind::Call { .. } | ClaimKind::Put { .. }) {
        let vol = spec.max_variance().sqrt();
        let value = bs_for_claim(claim, spec.s0, vol)?;
        return Ok(Some(LimitValue { value, source: LimitSource::ClosedForm }));
    }
    let grid = HjbGrid::for_spec(&spec, cfg.grids.hjb_nx)?;
    Ok(optional(solve_with(&spec, claim, &grid, ControlRule::Optimal, 0))?
        .map(|s| LimitValue { value: s.value, source: LimitSource::Hjb }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub engine: Solver,
    pub primal: f64,
    pub dual: Option<f64>,
    pub kusuoka: Option<f64>,
    pub limit: Option<f64>,
    /// `primal - limit`.
    pub gap: Option<f64>,
    pub rel_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub limit: Option<LimitValue>,
    /// Whether `|primal - limit|` decreases over the last three rows.
    pub trend_decreasing: Option<bool>,
    pub breaches: Vec<String>,
    pub timings: Vec<Timing>,
}

fn convergence_row(
    cfg: &ExperimentConfig,
    ctx: &Context,
    opts: &PrimalOptions<f64>,
    n: usize,
    limit: Option<LimitValue>,
) -> Result<(ConvergenceRow, f64)> {
    let start = Instant::now();
    let market = cfg.market(n)?;
    let lattice = lattice_capable(&ctx.pen, &ctx.claim);
    let solver = if lattice { Solver::Lattice } else { Solver::Exact };
    if !lattice && n > EXHAUSTIVE_CAP {
        return Err(Error::PathDependentClaim.into());
    }
    let (price, _) = solve_primal(&market, ctx, opts, solver)?;
    let ascent = ascent_options(cfg);
    let dual = if ctx.claim.markov_state() == MarkovState::TerminalPrice && ctx.pen.is_price_markov() {
        optional(dual_ascent_lattice(&market, &ctx.pen, &ctx.claim, cfg.dual.memory, &ascent))?
    } else if n <= EXHAUSTIVE_CAP {
        optional(dual_ascent_tree(&market, &ctx.pen, &ctx.claim, None, &ascent))?
    } else {
        None
    };
    let kusuoka = match cfg.kusuoka_a {
        Some(a) if ctx.claim.markov_state() == MarkovState::TerminalPrice => {
            optional(kusuoka_lower_bound(&market, &ctx.pen, &ctx.claim, a))?
        }
        _ => None,
    };
    let gap = limit.map(|l| price.value - l.value);
    let row = ConvergenceRow {
        n,
        engine: solver,
        primal: price.value,
        dual: dual.map(|d| d.value),
        kusuoka,
        limit: limit.map(|l| l.value),
        gap,
        rel_gap: limit.map(|l| relative_gap(price.value, l.value)),
    };
    Ok((row, start.elapsed().as_secs_f64() * 1e3))
}

/// True when the last three absolute gaps strictly decrease.
pub fn decreasing_tail(gaps: &[f64]) -> Option<bool> {
    if gaps.len() < 3 {
        return None;
    }
    let t = &gaps[gaps.len() - 3..];
    Some(t[0].abs() > t[1].abs() && t[1].abs() > t[2].abs())
}

/// Primal, dual and lower bounds for every `n` against the limit value.
/// Rows are computed concurrently and returned in config order.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let ctx = Context::new(cfg)?;
    let opts = primal_options(cfg, &ctx.claim)?;
    let mut timings = Vec::new();
    let limit = timed("limit".into(), &mut timings, || limit_value(cfg, &ctx.pen, &ctx.claim))?;
    let results: Vec<(ConvergenceRow, f64)> = cfg
        .market
        .n
        .par_iter()
        .map(|&n| convergence_row(cfg, &ctx, &opts, n, limit))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(results.len());
    for (row, ms) in results {
        timings.push(Timing { label: format!("converge n={}", row.n), ms });
        rows.push(row);
    }
    let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap).collect();
    let trend_decreasing = if gaps.len() == rows.len() { decreasing_tail(&gaps) } else { None };

    let mut breaches = Vec::new();
    for r in &rows {
        if let Some(d) = r.dual {
            if d > r.primal + ORDER_TOLERANCE {
                breaches.push(format!("n={}: dual {d} above primal {}", r.n, r.primal));
            }
        }
        if let Some(k) = r.kusuoka {
            if k > r.primal + ORDER_TOLERANCE {
                breaches.push(format!("n={}: kusuoka bound {k} above primal {}", r.n, r.primal));
            }
        }
    }
    if let Some(tol) = cfg.thresholds.convergence_gap {
        match rows.last().and_then(|r| r.rel_gap) {
            Some(g) if g <= tol => {}
            Some(g) => breaches.push(format!("final relative gap {g:.4e} above {tol:.4e}")),
            None => breaches.push("no limit value to compare against".into()),
        }
        if trend_decreasing == Some(false) {
            breaches.push("gap to the limit does not decrease over the last three n".into());
        }
    }
    Ok(ConvergenceReport { rows, limit, trend_decreasing, breaches, timings })
}

#[derive(Debug, Clone)]
pub struct HjbReport {
    pub spec: LimitSpec<f64>,
    pub grid: HjbGrid<f64>,
    pub solution: HjbSolution<f64>,
    /// Closed form at `s0` when there is one.
    pub closed_form: Option<f64>,
    pub timings: Vec<Timing>,
}

/// The limit equation alone, with surface snapshots.
pub fn run_hjb(cfg: &ExperimentConfig) -> Result<HjbReport> {
    let ctx = Context::new(cfg)?;
    let spec = limit_spec(cfg, &ctx.pen)?;
    let grid = HjbGrid::for_spec(&spec, cfg.grids.hjb_nx)?;
    let mut timings = Vec::new();
    let solution = timed("hjb".into(), &mut timings, || {
        solve_with(&spec, &ctx.claim, &grid, ControlRule::Optimal, SURFACE_SNAPSHOTS)
    })?;
    let closed_form = match (spec.cost, &ctx.claim.kind) {
        (_, ClaimKind::Constant { value }) => Some(*value),
        (ScaledLimit::Zero, ClaimKind::Call { .. } | ClaimKind::Put { .. }) => {
            Some(bs_for_claim(&ctx.claim, spec.s0, spec.max_variance().sqrt())?)
        }
        _ => None,
    };
    Ok(HjbReport { spec, grid, solution, closed_form, timings })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub n: usize,
    pub capital: f64,
    pub min_slack: f64,
    pub worst_path: String,
    pub paths: usize,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub breaches: Vec<String>,
    pub timings: Vec<Timing>,
}

/// Audits a strategy on every path: the one in `strategy_file` when given,
/// else the optimal strategy of the exact engine for each `n`.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let ctx = Context::new(cfg)?;
    let opts = primal_options(cfg, &ctx.claim)?;
    let given = match cfg.strategy_path() {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
            Some(Strategy::<f64>::from_text(&text)?)
        }
        None => None,
    };
    let ns: Vec<usize> = match &given {
        Some(s) => vec![s.n],
        None => cfg.market.n.clone(),
    };
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for n in ns {
        let market = cfg.market(n)?;
        let strategy = match &given {
            Some(s) => s.clone(),
            None => superrep_exact(&market, &ctx.pen, &ctx.claim, &opts)?.strategy(),
        };
        let report = timed(format!("verify n={n}"), &mut timings, || {
            verify_superreplication(&market, &ctx.pen, &strategy, &ctx.claim)
        })?;
        let worst_path = report.worst_moves.iter().map(|&m| if m == 1 { 'u' } else { 'd' }).collect();
        rows.push(VerifyRow {
            n,
            capital: strategy.initial_capital,
            min_slack: report.min_slack,
            worst_path,
            paths: report.paths,
        });
    }
    let breaches = match cfg.thresholds.min_slack {
        Some(tol) => rows
            .iter()
            .filter(|r| !(r.min_slack >= tol))
            .map(|r| format!("n={}: slack {:.3e} on path {} below {tol:.3e}", r.n, r.min_slack, r.worst_path))
            .collect(),
        None => Vec::new(),
    };
    Ok(VerifyReport { rows, breaches, timings })
}

#[derive(Debug, Clone)]
pub struct PremiumOutput {
    pub report: PremiumReport<f64>,
    pub timings: Vec<Timing>,
}

/// Limit value at level `eps` against `BS(sigma)` with its benchmarks.
pub fn run_premium_probe(cfg: &ExperimentConfig) -> Result<PremiumOutput> {
    let premium = cfg.premium.ok_or_else(|| HarnessError::Config("the premium probe needs a `premium` section".into()))?;
    let ctx = Context::new(cfg)?;
    let spec = limit_spec(cfg, &ctx.pen)?;
    let mut timings = Vec::new();
    let report = timed("premium".into(), &mut timings, || {
        liquidity_premium_probe(&spec, &ctx.claim, premium.eps, cfg.grids.hjb_nx, premium.scan)
    })?;
    Ok(PremiumOutput { report, timings })
}
