//! Primal super-replication: the backward dynamic programme over holdings.
//!
//! `C_k(u, gamma)` is the cheapest capital at node `u` that super-replicates
//! the claim when the inherited holding is `gamma`:
//!
//! ```text
//! C_n(u, .) = F(u)
//! C_k(u, g) = min_{g'} [ pen_u(g' - g) + max_v ( C_{k+1}(v, g') - g' (S_v - S_u) ) ]
//! ```
//!
//! Holdings live in the box `[lo, hi]` of a [`GammaGrid`]. Every surface is a
//! convex piecewise-linear function on that box. For piecewise-linear
//! penalties the step is exact (maximum, then infimal convolution). For smooth
//! penalties the minimum over `g'` is solved exactly against the
//! piecewise-linear envelope at each grid point and the surface is the
//! interpolant of those values, which lies above the true surface. Because of
//! that, strategies read off the surfaces super-replicate exactly.

use rayon::prelude::*;

use crate::convex_pl::ConvexPl;
use crate::error::{invalid, Error, Result};
use crate::ext_real::ExtReal;
use crate::friction::{LocalPenalty, Penalty};
use crate::market_tree::{MarketParams, PathPrefix, PlPath, TreeNode, EXHAUSTIVE_CAP};
use crate::payoffs::{Claim, MarkovState};
use crate::scalar::Scalar;

/// Uniform grid of holdings on `[lo, hi]` with `m` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaGrid<T> {
    lo: T,
    hi: T,
    m: usize,
}

impl<T: Scalar> GammaGrid<T> {
    pub fn new(lo: T, hi: T, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(invalid("holdings grid needs at least two points"));
        }
        if !(lo < hi) || !(lo <= T::zero() && hi >= T::zero()) {
            return Err(invalid(format!("holdings box [{lo}, {hi}] must contain 0")));
        }
        Ok(Self { lo, hi, m })
    }

    /// Box `[-2L, 2L]` where `L` is the claim's sensitivity to the path.
    pub fn for_claim(claim: &Claim<T>, m: usize) -> Result<Self> {
        let half = T::lit(2.0) * claim.lipschitz().max(T::lit(0.5));
        Self::new(-half, half, m)
    }

    pub fn lo(&self) -> T {
        self.lo
    }

    pub fn hi(&self) -> T {
        self.hi
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn step(&self) -> T {
        (self.hi - self.lo) / T::of(self.m - 1)
    }

    pub fn points(&self) -> Vec<T> {
        let h = self.step();
        (0..self.m).map(|i| if i + 1 == self.m { self.hi } else { self.lo + h * T::of(i) }).collect()
    }

    /// Halves the spacing; the old points are kept.
    pub fn refined(&self) -> Self {
        Self { m: 2 * self.m - 1, ..*self }
    }

    /// Doubles the box around its centre at the same spacing.
    pub fn widened(&self) -> Self {
        let half = (self.hi - self.lo) * T::lit(0.5);
        Self { lo: self.lo - half, hi: self.hi + half, m: 2 * self.m - 1 }
    }
}

/// Minimiser set of `g' -> pen(g' - g) + h(g')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerMin<T> {
    pub value: T,
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> InnerMin<T> {
    /// Minimiser closest to `gamma` (least trading).
    pub fn nearest(&self, gamma: T) -> T {
        gamma.max(self.lo).min(self.hi)
    }
}

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

/// Exact minimisation of `pen(g' - gamma) + h(g')` over the (bounded) domain
/// of `h`, by locating where the subdifferential contains zero.
pub fn inner_min<T: Scalar>(pen: &LocalPenalty<T>, h: &ConvexPl<T>, gamma: T) -> InnerMin<T> {
    let xs = h.xs();
    let last = xs.len() - 1;
    let zero = ExtReal::Finite(T::zero());
    let d_plus = |j: usize| h.right_slope_at_knot(j).add(ExtReal::Finite(pen.d_right(xs[j] - gamma)));
    let d_minus = |j: usize| h.left_slope_at_knot(j).add(ExtReal::Finite(pen.d_left(xs[j] - gamma)));
    let shift = |e: ExtReal<T>| e.add(ExtReal::Finite(gamma));

    let j = partition(last + 1, |j| !d_plus(j).ge(zero));
    let lo = if j == 0 {
        xs[0]
    } else {
        let s = h.segment_slope(j - 1);
        shift(pen.nu_lo(-s)).clamp_to(xs[j - 1], xs[j])
    };
    let cnt = partition(last + 1, |j| zero.ge(d_minus(j)));
    let j = cnt.max(1) - 1;
    let hi = if j == last {
        xs[last]
    } else {
        let s = h.segment_slope(j);
        shift(pen.nu_hi(-s)).clamp_to(xs[j], xs[j + 1])
    };
    let hi = hi.max(lo);
    let value = pen.eval(lo - gamma) + h.eval(lo).expect("minimiser inside the box");
    InnerMin { value, lo, hi }
}

/// `max_v (C_{k+1}(v, g') - g' (S_v - S_u))` over the two children.
pub fn hedge_envelope<T: Scalar>(s_u: T, s_up: T, s_dn: T, c_up: &ConvexPl<T>, c_dn: &ConvexPl<T>) -> ConvexPl<T> {
    let a = c_up.add_linear(-(s_up - s_u), T::zero());
    let b = c_dn.add_linear(-(s_dn - s_u), T::zero());
    a.max(&b).expect("children share the holdings box")
}

/// One Bellman step. Returns the new surface and whether the minimiser of the
/// envelope touches the box boundary.
pub fn bellman_step<T: Scalar>(
    h: &ConvexPl<T>,
    pen: &LocalPenalty<T>,
    grid: &GammaGrid<T>,
    points: &[T],
) -> Result<(ConvexPl<T>, bool)> {
    let (lo, hi) = (grid.lo(), grid.hi());
    let tol = T::lit(1e-9) * (hi - lo);
    let (alo, ahi, _) = h.argmin()?;
    let boundary = !alo.ge(ExtReal::Finite(lo + tol)) || ahi.ge(ExtReal::Finite(hi - tol));
    let surface = match pen.as_pl() {
        Some(pl) => h.inf_convolution(&pl.reflect())?.restrict(lo, hi).ok_or(Error::Unbounded)?,
        None => {
            let vals = points.iter().map(|g| inner_min(pen, h, *g).value).collect();
            ConvexPl::from_samples(points.to_vec(), vals)?
        }
    };
    Ok((surface, boundary))
}

/// Options shared by the primal engines.
#[derive(Debug, Clone, Copy)]
pub struct PrimalOptions<T> {
    pub grid: GammaGrid<T>,
    /// How many times the box may be doubled when the boundary is hit.
    pub max_widenings: usize,
    /// Largest `n` accepted by the exhaustive tree engine.
    pub node_cap: usize,
    /// Buckets of the running average for Asian claims (lattice engine).
    pub average_buckets: usize,
    /// Keep every lattice slice (memory heavy for large `n`).
    pub keep_surfaces: bool,
}

impl<T: Scalar> PrimalOptions<T> {
    pub fn new(grid: GammaGrid<T>) -> Self {
        Self { grid, max_widenings: 3, node_cap: EXHAUSTIVE_CAP, average_buckets: 101, keep_surfaces: false }
    }
}

/// Output of the exhaustive tree engine.
#[derive(Debug, Clone)]
pub struct ExactSolution<T> {
    pub value: T,
    pub grid: GammaGrid<T>,
    pub boundary_hit: bool,
    pub widenings: usize,
    /// Smallest second difference of any surface sampled on the grid.
    pub min_second_difference: T,
    params: MarketParams<T>,
    penalty: Penalty<T>,
    surfaces: Vec<Vec<ConvexPl<T>>>,
}

/// Reasons the box had to grow, kept out of the public result.
struct TreeRun<T> {
    surfaces: Vec<Vec<ConvexPl<T>>>,
    boundary: bool,
    min_d2: T,
}

fn node_step<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    k: usize,
    s_u: T,
    s_up: T,
    s_dn: T,
    c_up: &ConvexPl<T>,
    c_dn: &ConvexPl<T>,
    grid: &GammaGrid<T>,
    points: &[T],
) -> Result<(ConvexPl<T>, bool, T)> {
    let n = params.n();
    let pen = penalty.local(T::of(k) / T::of(n), s_u, n);
    let h = hedge_envelope(s_u, s_up, s_dn, c_up, c_dn);
    let (c, boundary) = bellman_step(&h, &pen, grid, points)?;
    let d2 = c.min_second_difference(points);
    Ok((c, boundary, d2))
}

fn solve_tree<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    grid: &GammaGrid<T>,
) -> Result<TreeRun<T>> {
    let n = params.n();
    let points = grid.points();
    let (lo, hi) = (grid.lo(), grid.hi());
    let terminal: Vec<ConvexPl<T>> = (0..1u64 << n)
        .into_par_iter()
        .map(|b| {
            let f = claim.payoff(&params.node_path(TreeNode { k: n, bits: b }));
            ConvexPl::constant_on(lo, hi, f)
        })
        .collect();
    let mut levels: Vec<Vec<ConvexPl<T>>> = vec![Vec::new(); n + 1];
    levels[n] = terminal;
    let mut boundary = false;
    let mut min_d2 = T::infinity();
    for k in (0..n).rev() {
        let next = &levels[k + 1];
        let out: Vec<(ConvexPl<T>, bool, T)> = (0..1u64 << k)
            .into_par_iter()
            .map(|b| {
                let node = TreeNode { k, bits: b };
                let (up, dn) = (node.up(), node.down());
                node_step(
                    params,
                    penalty,
                    k,
                    params.node_price(node),
                    params.node_price(up),
                    params.node_price(dn),
                    &next[up.bits as usize],
                    &next[dn.bits as usize],
                    grid,
                    &points,
                )
            })
            .collect::<Result<_>>()?;
        let mut level = Vec::with_capacity(out.len());
        for (c, bnd, d2) in out {
            boundary |= bnd;
            min_d2 = min_d2.min(d2);
            level.push(c);
        }
        levels[k] = level;
    }
    Ok(TreeRun { surfaces: levels, boundary, min_d2 })
}

/// Exhaustive engine on the full `2^n` tree; handles any claim.
pub fn superrep_exact<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    opts: &PrimalOptions<T>,
) -> Result<ExactSolution<T>> {
    if params.n() > opts.node_cap {
        return Err(Error::NodeCapExceeded { n: params.n(), cap: opts.node_cap });
    }
    let mut grid = opts.grid;
    let mut widenings = 0;
    loop {
        let run = solve_tree(params, penalty, claim, &grid)?;
        if !run.boundary || widenings == opts.max_widenings {
            let value = run.surfaces[0][0].eval_clamped(T::zero());
            return Ok(ExactSolution {
                value,
                grid,
                boundary_hit: run.boundary,
                widenings,
                min_second_difference: run.min_d2,
                params: *params,
                penalty: penalty.clone(),
                surfaces: run.surfaces,
            });
        }
        grid = grid.widened();
        widenings += 1;
    }
}

impl<T: Scalar> ExactSolution<T> {
    /// `C_k(u, .)` for a tree node.
    pub fn surface(&self, node: TreeNode) -> &ConvexPl<T> {
        &self.surfaces[node.k][node.bits as usize]
    }

    /// Holdings chosen along the optimal policy, nearest minimiser first.
    pub fn strategy(&self) -> Strategy<T> {
        let n = self.params.n();
        let mut holdings: Vec<Vec<T>> = Vec::with_capacity(n);
        let mut inherited = vec![T::zero()];
        for k in 0..n {
            let chosen: Vec<T> = (0..1u64 << k)
                .into_par_iter()
                .map(|b| {
                    let node = TreeNode { k, bits: b };
                    let (up, dn) = (node.up(), node.down());
                    let s_u = self.params.node_price(node);
                    let h = hedge_envelope(
                        s_u,
                        self.params.node_price(up),
                        self.params.node_price(dn),
                        self.surface(up),
                        self.surface(dn),
                    );
                    let pen = self.penalty.local(T::of(k) / T::of(n), s_u, n);
                    let g = inherited[b as usize];
                    inner_min(&pen, &h, g).nearest(g)
                })
                .collect();
            inherited = chosen.iter().flat_map(|g| [*g, *g]).collect();
            holdings.push(chosen);
        }
        Strategy { n, initial_capital: self.value, holdings }
    }
}

/// Holdings after trading at every non-terminal tree node, plus the capital.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy<T> {
    pub n: usize,
    pub initial_capital: T,
    holdings: Vec<Vec<T>>,
}

impl<T: Scalar> Strategy<T> {
    /// `holdings[k][bits]` is the position carried from time `k` to `k + 1`.
    pub fn new(initial_capital: T, holdings: Vec<Vec<T>>) -> Result<Self> {
        let n = holdings.len();
        for (k, level) in holdings.iter().enumerate() {
            if level.len() != 1 << k {
                return Err(invalid(format!("level {k} has {} holdings, expected {}", level.len(), 1u64 << k)));
            }
        }
        Ok(Self { n, initial_capital, holdings })
    }

    pub fn holding(&self, node: TreeNode) -> T {
        self.holdings[node.k][node.bits as usize]
    }

    /// One `node_id holding` line per node, after a `capital` line.
    pub fn to_text(&self) -> String {
        let mut rows = vec![("capital".to_string(), vec![self.initial_capital.f64()])];
        for (k, level) in self.holdings.iter().enumerate() {
            for (b, g) in level.iter().enumerate() {
                rows.push((TreeNode { k, bits: b as u64 }.id(), vec![g.f64()]));
            }
        }
        crate::text_io::write_keyed(&rows)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows = crate::text_io::parse_keyed(text)?;
        let mut capital = None;
        let mut entries = Vec::new();
        for (key, vals) in rows {
            let v = *vals.first().ok_or_else(|| invalid(format!("no value for {key}")))?;
            if key == "capital" {
                capital = Some(T::lit(v));
            } else {
                entries.push((TreeNode::parse_id(&key)?, T::lit(v)));
            }
        }
        let n = entries.iter().map(|(node, _)| node.k + 1).max().unwrap_or(0);
        let mut holdings: Vec<Vec<Option<T>>> = (0..n).map(|k| vec![None; 1 << k]).collect();
        for (node, v) in entries {
            holdings[node.k][node.bits as usize] = Some(v);
        }
        let holdings = holdings
            .into_iter()
            .map(|l| l.into_iter().collect::<Option<Vec<T>>>())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| invalid("strategy file misses nodes"))?;
        Self::new(capital.ok_or_else(|| invalid("strategy file has no capital line"))?, holdings)
    }
}

/// Terminal wealth `Y(n)` of the strategy along a full sequence of moves.
pub fn wealth_simulate<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    strategy: &Strategy<T>,
    moves: &PathPrefix,
) -> Result<T> {
    let n = params.n();
    if strategy.n != n {
        return Err(invalid(format!("strategy has {} steps, market has {n}", strategy.n)));
    }
    let path = PlPath::from_moves(params, moves)?;
    let mut wealth = strategy.initial_capital;
    let mut held = T::zero();
    let mut node = TreeNode::ROOT;
    for k in 0..n {
        let next = strategy.holding(node);
        let t = T::of(k) / T::of(n);
        wealth = wealth - penalty.g_eval(t, &path, next - held)? + next * (path.knot(k + 1) - path.knot(k));
        held = next;
        node = if moves.moves()[k] == 1 { node.up() } else { node.down() };
    }
    Ok(wealth)
}

/// Result of checking `Y(n) >= F` on every path.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport<T> {
    pub min_slack: T,
    pub worst_moves: Vec<i8>,
    pub paths: usize,
}

/// Enumerates all `2^n` paths and reports the smallest `Y(n) - F`.
pub fn verify_superreplication<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    strategy: &Strategy<T>,
    claim: &Claim<T>,
) -> Result<VerificationReport<T>> {
    let n = params.n();
    if n > EXHAUSTIVE_CAP {
        return Err(Error::NodeCapExceeded { n, cap: EXHAUSTIVE_CAP });
    }
    let slacks: Vec<(T, u64)> = (0..1u64 << n)
        .into_par_iter()
        .map(|b| {
            let moves = PathPrefix::new(TreeNode { k: n, bits: b }.moves())?;
            let y = wealth_simulate(params, penalty, strategy, &moves)?;
            let f = claim.payoff(&PlPath::from_moves(params, &moves)?);
            Ok((y - f, b))
        })
        .collect::<Result<_>>()?;
    let (min_slack, worst) = slacks
        .into_iter()
        .fold((T::infinity(), 0), |acc, x| if x.0 < acc.0 { x } else { acc });
    Ok(VerificationReport { min_slack, worst_moves: TreeNode { k: n, bits: worst }.moves(), paths: 1 << n })
}

/// Output of the recombining-lattice engine.
#[derive(Debug, Clone)]
pub struct LatticeSolution<T> {
    pub value: T,
    pub grid: GammaGrid<T>,
    pub boundary_hit: bool,
    pub widenings: usize,
    pub min_second_difference: T,
    pub root_surface: ConvexPl<T>,
    /// `slices[k][i]` for lattice index `i`, only when requested.
    pub slices: Option<Vec<Vec<ConvexPl<T>>>>,
}

/// Lattice engine for claims of the terminal price or of price and running
/// average. Requires a penalty that depends only on the current price.
pub fn superrep_lattice<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    opts: &PrimalOptions<T>,
) -> Result<LatticeSolution<T>> {
    if !penalty.is_price_markov() {
        return Err(Error::PathDependentClaim);
    }
    let state = claim.markov_state();
    if state == MarkovState::FullPath {
        return Err(Error::PathDependentClaim);
    }
    let mut grid = opts.grid;
    let mut widenings = 0;
    loop {
        let run = match state {
            MarkovState::TerminalPrice => solve_lattice(params, penalty, claim, &grid, opts.keep_surfaces)?,
            _ => solve_lattice_average(params, penalty, claim, &grid, opts.average_buckets)?,
        };
        if !run.boundary || widenings == opts.max_widenings {
            return Ok(LatticeSolution {
                value: run.root.eval_clamped(T::zero()),
                grid,
                boundary_hit: run.boundary,
                widenings,
                min_second_difference: run.min_d2,
                root_surface: run.root,
                slices: run.slices,
            });
        }
        grid = grid.widened();
        widenings += 1;
    }
}

struct LatticeRun<T> {
    root: ConvexPl<T>,
    boundary: bool,
    min_d2: T,
    slices: Option<Vec<Vec<ConvexPl<T>>>>,
}

fn solve_lattice<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    grid: &GammaGrid<T>,
    keep: bool,
) -> Result<LatticeRun<T>> {
    let n = params.n();
    let points = grid.points();
    let price = |k: usize, i: usize| params.price_at_level(2 * i as i64 - k as i64);
    let mut slice: Vec<ConvexPl<T>> = (0..=n)
        .map(|i| {
            let f = claim.terminal_payoff(price(n, i)).expect("terminal-price claim");
            ConvexPl::constant_on(grid.lo(), grid.hi(), f)
        })
        .collect();
    let mut kept = keep.then(Vec::new);
    let mut boundary = false;
    let mut min_d2 = T::infinity();
    for k in (0..n).rev() {
        let out: Vec<(ConvexPl<T>, bool, T)> = (0..=k)
            .into_par_iter()
            .map(|i| {
                node_step(
                    params,
                    penalty,
                    k,
                    price(k, i),
                    price(k + 1, i + 1),
                    price(k + 1, i),
                    &slice[i + 1],
                    &slice[i],
                    grid,
                    &points,
                )
            })
            .collect::<Result<_>>()?;
        let mut next = Vec::with_capacity(out.len());
        for (c, bnd, d2) in out {
            boundary |= bnd;
            min_d2 = min_d2.min(d2);
            next.push(c);
        }
        if let Some(store) = kept.as_mut() {
            store.push(std::mem::replace(&mut slice, next));
        } else {
            slice = next;
        }
    }
    let root = slice[0].clone();
    let slices = kept.map(|mut s| {
        s.push(slice);
        s.reverse();
        s
    });
    Ok(LatticeRun { root, boundary, min_d2, slices })
}

/// Running-average range over paths reaching lattice index `i` at time `k`.
fn average_bounds<T: Scalar>(params: &MarketParams<T>, claim: &Claim<T>, k: usize, i: usize) -> (T, T) {
    let n = params.n();
    let run = |first_up: bool| {
        let (mut level, mut a) = (0i64, claim.average_start(n, params.s0()));
        for j in 0..k {
            let up = if first_up { j < i } else { j >= k - i };
            let next = level + if up { 1 } else { -1 };
            a = a + claim.average_increment(n, params.price_at_level(level), params.price_at_level(next));
            level = next;
        }
        a
    };
    (run(false), run(true))
}

fn bucket_values<T: Scalar>(lo: T, hi: T, buckets: usize) -> Vec<T> {
    if hi - lo <= T::lit(1e-12) * (T::one() + hi.abs()) || buckets < 2 {
        return vec![lo];
    }
    (0..buckets).map(|b| lo + (hi - lo) * T::of(b) / T::of(buckets - 1)).collect()
}

/// Convex combination of two surfaces at weight `w` on the second.
fn blend<T: Scalar>(a: &ConvexPl<T>, b: &ConvexPl<T>, w: T) -> ConvexPl<T> {
    if w <= T::zero() {
        return a.clone();
    }
    if w >= T::one() {
        return b.clone();
    }
    a.scale(T::one() - w).add(&b.scale(w)).expect("same holdings box")
}

fn interpolate_bucket<T: Scalar>(values: &[T], surfaces: &[ConvexPl<T>], a: T) -> ConvexPl<T> {
    if values.len() == 1 {
        return surfaces[0].clone();
    }
    let j = values.partition_point(|v| *v <= a).clamp(1, values.len() - 1) - 1;
    let w = (a - values[j]) / (values[j + 1] - values[j]);
    blend(&surfaces[j], &surfaces[j + 1], w.max(T::zero()).min(T::one()))
}

fn solve_lattice_average<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    grid: &GammaGrid<T>,
    buckets: usize,
) -> Result<LatticeRun<T>> {
    let n = params.n();
    let points = grid.points();
    let price = |k: usize, i: usize| params.price_at_level(2 * i as i64 - k as i64);
    let avg = |k: usize, i: usize| {
        let (lo, hi) = average_bounds(params, claim, k, i);
        bucket_values(lo, hi, buckets)
    };
    let mut values: Vec<Vec<T>> = (0..=n).map(|i| avg(n, i)).collect();
    let mut slice: Vec<Vec<ConvexPl<T>>> = values
        .iter()
        .map(|vals| {
            vals.iter()
                .map(|a| {
                    let f = claim.average_payoff(*a).expect("average claim");
                    ConvexPl::constant_on(grid.lo(), grid.hi(), f)
                })
                .collect()
        })
        .collect();
    let mut boundary = false;
    let mut min_d2 = T::infinity();
    for k in (0..n).rev() {
        let here: Vec<Vec<T>> = (0..=k).map(|i| avg(k, i)).collect();
        let out: Vec<Vec<(ConvexPl<T>, bool, T)>> = (0..=k)
            .into_par_iter()
            .map(|i| {
                let (s_u, s_up, s_dn) = (price(k, i), price(k + 1, i + 1), price(k + 1, i));
                here[i]
                    .iter()
                    .map(|a| {
                        let a_up = *a + claim.average_increment(n, s_u, s_up);
                        let a_dn = *a + claim.average_increment(n, s_u, s_dn);
                        let c_up = interpolate_bucket(&values[i + 1], &slice[i + 1], a_up);
                        let c_dn = interpolate_bucket(&values[i], &slice[i], a_dn);
                        node_step(params, penalty, k, s_u, s_up, s_dn, &c_up, &c_dn, grid, &points)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        slice = out
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|(c, bnd, d2)| {
                        boundary |= bnd;
                        min_d2 = min_d2.min(d2);
                        c
                    })
                    .collect()
            })
            .collect();
        values = here;
    }
    Ok(LatticeRun { root: slice[0][0].clone(), boundary, min_d2, slices: None })
}

/// Values on successively refined grids and a Richardson extrapolation that
/// assumes second-order convergence in the grid spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStudy<T> {
    pub ms: Vec<usize>,
    pub values: Vec<T>,
    pub extrapolated: T,
    pub error_estimate: T,
}

pub fn grid_refinement<T: Scalar>(
    grid: &GammaGrid<T>,
    levels: usize,
    solve: impl Fn(&GammaGrid<T>) -> Result<T>,
) -> Result<RefinementStudy<T>> {
    if levels < 2 {
        return Err(invalid("refinement study needs at least two levels"));
    }
    let mut g = *grid;
    let mut ms = Vec::with_capacity(levels);
    let mut values = Vec::with_capacity(levels);
    for _ in 0..levels {
        ms.push(g.m());
        values.push(solve(&g)?);
        g = g.refined();
    }
    let fine = values[levels - 1];
    let coarse = values[levels - 2];
    let correction = (coarse - fine) / T::lit(3.0);
    Ok(RefinementStudy { ms, values, extrapolated: fine - correction, error_estimate: correction.abs() })
}
