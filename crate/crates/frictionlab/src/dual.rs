//! Dual side: martingale measures and the penalised expectation
//!
//! ```text
//! J(P) = E_P[ F - sum_k G_k(M_k - S_k) ],   M_k = E_P[S_n | F_k]
//! ```
//!
//! which is a lower bound on the super-replication price for every measure
//! `P` on the binomial tree, with equality at the supremum.
//!
//! Measures are given by up-probabilities `q` at the non-terminal states of a
//! [`DualGraph`]: the full tree, the recombining lattice, or the lattice with
//! the last move as extra state. The objective has an equivalent form in the
//! terminal weights `Phi` that is concave; [`dual_objective_phi`] evaluates it
//! independently of the recursion used by [`dual_objective`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ext_real::ExtReal;
use crate::friction::{LocalPenalty, Penalty};
use crate::market_tree::{MarketParams, TreeNode, EXHAUSTIVE_CAP};
use crate::payoffs::{Claim, MarkovState};
use crate::scalar::Scalar;

/// Largest `n` accepted by [`dual_brute_force`].
pub const BRUTE_FORCE_CAP: usize = 3;

/// Largest `n` at which tree ascents are polished by cutting planes.
pub const CUTTING_PLANE_CAP: usize = 8;

/// Cutting-plane rounds spent on polishing an ascent.
const POLISH_ROUNDS: usize = 50;

/// State carried by lattice measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureMemory {
    /// `q` depends on time and price level.
    Markov,
    /// `q` also depends on the last move.
    LastMove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Tree,
    Lattice(MeasureMemory),
}

/// Recombining or full tree on which a measure lives, with prices, payoffs and
/// local penalties attached to every state.
#[derive(Debug, Clone)]
pub struct DualGraph<T> {
    n: usize,
    layout: Layout,
    prices: Vec<Vec<T>>,
    up: Vec<Vec<usize>>,
    down: Vec<Vec<usize>>,
    penalties: Vec<Vec<LocalPenalty<T>>>,
    payoff: Vec<T>,
}

impl<T: Scalar> DualGraph<T> {
    /// Full tree; `n` up to [`EXHAUSTIVE_CAP`].
    pub fn tree(params: &MarketParams<T>, penalty: &Penalty<T>, claim: &Claim<T>) -> Result<Self> {
        let n = params.n();
        if n > EXHAUSTIVE_CAP {
            return Err(Error::NodeCapExceeded { n, cap: EXHAUSTIVE_CAP });
        }
        let prices: Vec<Vec<T>> = (0..=n)
            .map(|k| (0..1u64 << k).map(|b| params.node_price(TreeNode { k, bits: b })).collect())
            .collect();
        let up = (0..n).map(|k| (0..1usize << k).map(|b| 2 * b + 1).collect()).collect();
        let down = (0..n).map(|k| (0..1usize << k).map(|b| 2 * b).collect()).collect();
        let payoff = (0..1u64 << n)
            .into_par_iter()
            .map(|b| claim.payoff(&params.node_path(TreeNode { k: n, bits: b })))
            .collect();
        let penalties = local_penalties(params, penalty, &prices);
        Ok(Self { n, layout: Layout::Tree, prices, up, down, penalties, payoff })
    }

    /// Recombining lattice, optionally with the last move as extra state.
    /// States at time `k >= 1` with memory are indexed `2 i + last_up`.
    pub fn lattice(
        params: &MarketParams<T>,
        penalty: &Penalty<T>,
        claim: &Claim<T>,
        memory: MeasureMemory,
    ) -> Result<Self> {
        if claim.markov_state() != MarkovState::TerminalPrice {
            return Err(Error::PathDependentClaim);
        }
        let n = params.n();
        let price = |k: usize, i: usize| params.price_at_level(2 * i as i64 - k as i64);
        let width = |k: usize| match memory {
            MeasureMemory::Markov => k + 1,
            MeasureMemory::LastMove if k == 0 => 1,
            MeasureMemory::LastMove => 2 * (k + 1),
        };
        let level_of = |k: usize, s: usize| match memory {
            MeasureMemory::LastMove if k > 0 => s / 2,
            _ => s,
        };
        let prices: Vec<Vec<T>> = (0..=n).map(|k| (0..width(k)).map(|s| price(k, level_of(k, s))).collect()).collect();
        let child = |k: usize, s: usize, up: bool| {
            let i = level_of(k, s);
            match memory {
                MeasureMemory::Markov => i + usize::from(up),
                MeasureMemory::LastMove => {
                    if up {
                        2 * (i + 1) + 1
                    } else {
                        2 * i
                    }
                }
            }
        };
        let up = (0..n).map(|k| (0..width(k)).map(|s| child(k, s, true)).collect()).collect();
        let down = (0..n).map(|k| (0..width(k)).map(|s| child(k, s, false)).collect()).collect();
        let payoff = prices[n].iter().map(|s| claim.terminal_payoff(*s).expect("terminal-price claim")).collect();
        let penalties = local_penalties(params, penalty, &prices);
        Ok(Self { n, layout: Layout::Lattice(memory), prices, up, down, penalties, payoff })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of states at time `k`.
    pub fn width(&self, k: usize) -> usize {
        self.prices[k].len()
    }

    pub fn price(&self, k: usize, s: usize) -> T {
        self.prices[k][s]
    }

    /// Net number of up moves at state `s` of time `k`.
    pub fn level(&self, k: usize, s: usize) -> i64 {
        match self.layout {
            Layout::Tree => TreeNode { k, bits: s as u64 }.level(),
            Layout::Lattice(MeasureMemory::LastMove) if k > 0 => 2 * (s / 2) as i64 - k as i64,
            Layout::Lattice(_) => 2 * s as i64 - k as i64,
        }
    }

    pub fn children(&self, k: usize, s: usize) -> (usize, usize) {
        (self.up[k][s], self.down[k][s])
    }

    /// Up-probabilities `q` equal to `value` everywhere.
    pub fn constant_q(&self, value: T) -> Vec<Vec<T>> {
        (0..self.n).map(|k| vec![value; self.width(k)]).collect()
    }

    fn check_shape(&self, q: &[Vec<T>]) -> Result<()> {
        if q.len() != self.n || q.iter().enumerate().any(|(k, l)| l.len() != self.width(k)) {
            return Err(invalid("measure does not match the graph"));
        }
        if q.iter().flatten().any(|x| !(*x >= T::zero() && *x <= T::one())) {
            return Err(invalid("transition probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn local_penalties<T: Scalar>(params: &MarketParams<T>, penalty: &Penalty<T>, prices: &[Vec<T>]) -> Vec<Vec<LocalPenalty<T>>> {
    let n = params.n();
    (0..n)
        .map(|k| prices[k].iter().map(|s| penalty.local(T::of(k) / T::of(n), *s, n)).collect())
        .collect()
}

fn band_tol<T: Scalar>(s: T) -> T {
    T::lit(1e-11) * s
}

/// Conditional expectations, path weights and objective for one measure.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub value: ExtReal<T>,
    /// `M` at every state.
    pub m: Vec<Vec<T>>,
    /// Probability of reaching each state.
    pub reach: Vec<Vec<T>>,
    /// Penalised value to go.
    pub w: Vec<Vec<ExtReal<T>>>,
}

/// Evaluates the objective of the measure `q` on `graph`.
pub fn evaluate<T: Scalar>(graph: &DualGraph<T>, q: &[Vec<T>]) -> Result<Evaluation<T>> {
    graph.check_shape(q)?;
    Ok(evaluate_unchecked(graph, q))
}

fn evaluate_unchecked<T: Scalar>(graph: &DualGraph<T>, q: &[Vec<T>]) -> Evaluation<T> {
    let n = graph.n;
    let mut m = vec![Vec::new(); n + 1];
    let mut w = vec![Vec::new(); n + 1];
    m[n] = graph.prices[n].clone();
    w[n] = graph.payoff.iter().map(|f| ExtReal::Finite(*f)).collect();
    for k in (0..n).rev() {
        let width = graph.width(k);
        let mut mk = Vec::with_capacity(width);
        let mut wk = Vec::with_capacity(width);
        for s in 0..width {
            let (u, d) = (graph.up[k][s], graph.down[k][s]);
            let qs = q[k][s];
            let mean = qs * m[k + 1][u] + (T::one() - qs) * m[k + 1][d];
            let cont = w[k + 1][u].weight(qs).add(w[k + 1][d].weight(T::one() - qs));
            let price = graph.prices[k][s];
            let g = graph.penalties[k][s].conjugate_within(mean - price, band_tol(price));
            mk.push(mean);
            wk.push(cont.sub(g));
        }
        m[k] = mk;
        w[k] = wk;
    }
    let mut reach = vec![Vec::new(); n + 1];
    reach[0] = vec![T::one()];
    for k in 0..n {
        let mut next = vec![T::zero(); graph.width(k + 1)];
        for s in 0..graph.width(k) {
            let p = reach[k][s];
            next[graph.up[k][s]] = next[graph.up[k][s]] + p * q[k][s];
            next[graph.down[k][s]] = next[graph.down[k][s]] + p * (T::one() - q[k][s]);
        }
        reach[k + 1] = next;
    }
    Evaluation { value: w[0][0], m, reach, w }
}

/// Gradient of the objective in `q`, or `None` when the objective is infinite.
pub fn gradient<T: Scalar>(graph: &DualGraph<T>, q: &[Vec<T>], ev: &Evaluation<T>) -> Option<Vec<Vec<T>>> {
    if !ev.value.is_finite() {
        return None;
    }
    let n = graph.n;
    // adjoint of M, accumulated forward: d J / d M at every state
    let mut mu: Vec<Vec<T>> = (0..n).map(|k| vec![T::zero(); graph.width(k)]).collect();
    let mut grad: Vec<Vec<T>> = (0..n).map(|k| vec![T::zero(); graph.width(k)]).collect();
    for k in 0..n {
        for s in 0..graph.width(k) {
            let p = ev.reach[k][s];
            let y = ev.m[k][s] - graph.prices[k][s];
            let own = if p > T::zero() { -p * graph.penalties[k][s].conjugate_derivative(y) } else { T::zero() };
            mu[k][s] = mu[k][s] + own;
            let (u, d) = (graph.up[k][s], graph.down[k][s]);
            if k + 1 < n {
                let carry = mu[k][s];
                mu[k + 1][u] = mu[k + 1][u] + carry * q[k][s];
                mu[k + 1][d] = mu[k + 1][d] + carry * (T::one() - q[k][s]);
            }
            let dw = match (ev.w[k + 1][u], ev.w[k + 1][d]) {
                (ExtReal::Finite(a), ExtReal::Finite(b)) => a - b,
                _ => T::zero(),
            };
            grad[k][s] = p * dw + mu[k][s] * (ev.m[k + 1][u] - ev.m[k + 1][d]);
        }
    }
    Some(grad)
}

/// Measure on the full tree: `q[k][bits]` is the up-probability at the node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeMeasure<T> {
    n: usize,
    q: Vec<Vec<T>>,
}

impl<T: Scalar> TreeMeasure<T> {
    pub fn new(q: Vec<Vec<T>>) -> Result<Self> {
        let n = q.len();
        for (k, level) in q.iter().enumerate() {
            if level.len() != 1 << k {
                return Err(invalid(format!("level {k} has {} entries, expected {}", level.len(), 1u64 << k)));
            }
            if level.iter().any(|x| !(*x >= T::zero() && *x <= T::one())) {
                return Err(invalid("transition probabilities must lie in [0, 1]"));
            }
        }
        Ok(Self { n, q })
    }

    /// The frictionless risk-neutral measure.
    pub fn crr(params: &MarketParams<T>) -> Self {
        let p = params.crr_probability();
        Self { n: params.n(), q: (0..params.n()).map(|k| vec![p; 1 << k]).collect() }
    }

    /// Independent uniform draws in `[lo, hi]`.
    pub fn random(n: usize, lo: T, hi: T, rng: &mut impl Rng) -> Self {
        let q = (0..n)
            .map(|k| (0..1 << k).map(|_| lo + (hi - lo) * T::lit(rng.gen::<f64>())).collect())
            .collect();
        Self { n, q }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> &[Vec<T>] {
        &self.q
    }

    pub fn at(&self, node: TreeNode) -> T {
        self.q[node.k][node.bits as usize]
    }

    /// One `node_id q` line per node.
    pub fn to_text(&self) -> String {
        let rows: Vec<(String, Vec<f64>)> = self
            .q
            .iter()
            .enumerate()
            .flat_map(|(k, l)| l.iter().enumerate().map(move |(b, x)| (TreeNode { k, bits: b as u64 }.id(), vec![x.f64()])))
            .collect();
        crate::text_io::write_keyed(&rows)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows = crate::text_io::parse_keyed(text)?;
        let nodes = rows
            .iter()
            .map(|(id, v)| Ok((TreeNode::parse_id(id)?, *v.first().ok_or_else(|| invalid("missing value"))?)))
            .collect::<Result<Vec<_>>>()?;
        let depth = nodes.iter().map(|(node, _)| node.k + 1).max().ok_or_else(|| invalid("empty measure file"))?;
        if depth > EXHAUSTIVE_CAP {
            return Err(Error::NodeCapExceeded { n: depth, cap: EXHAUSTIVE_CAP });
        }
        let mut q: Vec<Vec<Option<T>>> = (0..depth).map(|k| vec![None; 1 << k]).collect();
        for (node, v) in nodes {
            q[node.k][node.bits as usize] = Some(T::lit(v));
        }
        let q = q
            .into_iter()
            .map(|l| l.into_iter().collect::<Option<Vec<T>>>())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| invalid("measure file misses nodes"))?;
        Self::new(q)
    }
}

/// Measure on the recombining lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeMeasure<T> {
    n: usize,
    memory: MeasureMemory,
    q: Vec<Vec<T>>,
}

impl<T: Scalar> LatticeMeasure<T> {
    pub fn new(graph: &DualGraph<T>, q: Vec<Vec<T>>) -> Result<Self> {
        let memory = match graph.layout {
            Layout::Lattice(m) => m,
            Layout::Tree => return Err(invalid("lattice measure on a tree graph")),
        };
        graph.check_shape(&q)?;
        Ok(Self { n: graph.n, memory, q })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn memory(&self) -> MeasureMemory {
        self.memory
    }

    pub fn q(&self) -> &[Vec<T>] {
        &self.q
    }

    /// `L<k>/<level>` ids, with `/u` or `/d` for the last move when kept.
    pub fn to_text(&self) -> String {
        let mut rows = Vec::new();
        for (k, level) in self.q.iter().enumerate() {
            for (s, x) in level.iter().enumerate() {
                let id = match self.memory {
                    MeasureMemory::LastMove if k > 0 => {
                        format!("L{k}/{}/{}", 2 * (s / 2) as i64 - k as i64, if s % 2 == 1 { 'u' } else { 'd' })
                    }
                    _ => format!("L{k}/{}", 2 * s as i64 - k as i64),
                };
                rows.push((id, vec![x.f64()]));
            }
        }
        crate::text_io::write_keyed(&rows)
    }
}

/// `J(P)` for a full-tree measure.
pub fn dual_objective<T: Scalar>(
    params: &MarketParams<T>,
    measure: &TreeMeasure<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
) -> Result<ExtReal<T>> {
    if measure.n != params.n() {
        return Err(invalid("measure and market disagree on n"));
    }
    let graph = DualGraph::tree(params, penalty, claim)?;
    Ok(evaluate(&graph, &measure.q)?.value)
}

/// `M` at every tree node under the measure.
pub fn conditional_terminal_expectation<T: Scalar>(params: &MarketParams<T>, measure: &TreeMeasure<T>) -> Result<Vec<Vec<T>>> {
    let graph = DualGraph::tree(params, &Penalty::zero(), &Claim::constant(T::zero()))?;
    Ok(evaluate(&graph, &measure.q)?.m)
}

/// Path weights `Phi(u)`: probability of reaching each tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiWeights<T> {
    phi: Vec<Vec<T>>,
}

impl<T: Scalar> PhiWeights<T> {
    /// Validates non-negativity and the flow identities `Phi(u) = Phi(u+) + Phi(u-)`.
    pub fn new(phi: Vec<Vec<T>>) -> Result<Self> {
        if phi.is_empty() || phi[0].len() != 1 || (phi[0][0] - T::one()).abs() > T::lit(1e-12) {
            return Err(invalid("root weight must be 1"));
        }
        for k in 0..phi.len() {
            if phi[k].len() != 1 << k || phi[k].iter().any(|x| *x < T::zero()) {
                return Err(invalid(format!("bad weights at level {k}")));
            }
            if k + 1 < phi.len() {
                for b in 0..phi[k].len() {
                    let flow = phi[k + 1][2 * b] + phi[k + 1][2 * b + 1];
                    if (flow - phi[k][b]).abs() > T::lit(1e-12) {
                        return Err(invalid(format!("flow not conserved at level {k}")));
                    }
                }
            }
        }
        Ok(Self { phi })
    }

    pub fn levels(&self) -> &[Vec<T>] {
        &self.phi
    }

    /// Terminal weights determine all the others.
    pub fn from_terminal(weights: Vec<T>) -> Result<Self> {
        let n = weights.len().trailing_zeros() as usize;
        if weights.len() != 1 << n {
            return Err(invalid("terminal weights must have length 2^n"));
        }
        let mut phi = vec![weights];
        for _ in 0..n {
            let prev = &phi[phi.len() - 1];
            let next = (0..prev.len() / 2).map(|b| prev[2 * b] + prev[2 * b + 1]).collect();
            phi.push(next);
        }
        phi.reverse();
        let total = phi[0][0];
        if !(total > T::zero()) {
            return Err(invalid("weights sum to zero"));
        }
        for level in phi.iter_mut() {
            for x in level.iter_mut() {
                *x = *x / total;
            }
        }
        Self::new(phi)
    }
}

/// Path weights of a tree measure.
pub fn phi_from_measure<T: Scalar>(measure: &TreeMeasure<T>) -> PhiWeights<T> {
    let mut phi = vec![vec![T::one()]];
    for k in 0..measure.n {
        let prev = &phi[k];
        let mut next = vec![T::zero(); 2 * prev.len()];
        for (b, p) in prev.iter().enumerate() {
            next[2 * b + 1] = *p * measure.q[k][b];
            next[2 * b] = *p * (T::one() - measure.q[k][b]);
        }
        phi.push(next);
    }
    PhiWeights { phi }
}

/// Tree measure of path weights; unreachable nodes get `q = 1/2`.
pub fn measure_from_phi<T: Scalar>(phi: &PhiWeights<T>) -> TreeMeasure<T> {
    let n = phi.phi.len() - 1;
    let q = (0..n)
        .map(|k| {
            (0..1 << k)
                .map(|b| {
                    let p = phi.phi[k][b];
                    if p > T::zero() {
                        (phi.phi[k + 1][2 * b + 1] / p).min(T::one())
                    } else {
                        T::lit(0.5)
                    }
                })
                .collect()
        })
        .collect();
    TreeMeasure { n, q }
}

/// Objective in path weights:
/// `sum_terminal Phi F - sum_u Phi(u) G_u(m(u) / Phi(u) - S(u))` with
/// `m(u) = sum_{terminal v below u} Phi(v) S(v)` and `0 G(0 / 0) = 0`.
pub fn dual_objective_phi<T: Scalar>(
    params: &MarketParams<T>,
    phi: &PhiWeights<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
) -> Result<ExtReal<T>> {
    let n = params.n();
    if phi.phi.len() != n + 1 {
        return Err(invalid("weights and market disagree on n"));
    }
    let terminal = &phi.phi[n];
    let mut total = ExtReal::Finite(T::zero());
    let mut mass: Vec<T> = (0..1u64 << n)
        .map(|b| terminal[b as usize] * params.node_price(TreeNode { k: n, bits: b }))
        .collect();
    for b in 0..1u64 << n {
        let f = claim.payoff(&params.node_path(TreeNode { k: n, bits: b }));
        total = total.add(ExtReal::Finite(terminal[b as usize] * f));
    }
    for k in (0..n).rev() {
        mass = (0..1usize << k).map(|b| mass[2 * b] + mass[2 * b + 1]).collect();
        for b in 0..1usize << k {
            let weight = phi.phi[k][b];
            if weight <= T::zero() {
                continue;
            }
            let s = params.node_price(TreeNode { k, bits: b as u64 });
            let pen = penalty.local(T::of(k) / T::of(n), s, n);
            let g = pen.conjugate_within(mass[b] / weight - s, band_tol(s));
            total = total.sub(g.weight(weight));
        }
    }
    Ok(total)
}

/// Outcome of a dual search. `value` is the objective of the returned measure
/// and is therefore a lower bound on the super-replication price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualReport<T> {
    pub value: T,
    pub q: Vec<Vec<T>>,
    pub iterations: usize,
    pub grad_norm: T,
    pub certified: bool,
    /// Upper bound on the supremum, when the method provides one.
    pub upper_bound: Option<T>,
    pub method: String,
}

fn flat<T: Copy>(q: &[Vec<T>]) -> Vec<T> {
    q.iter().flatten().copied().collect()
}

fn unflat<T: Copy>(x: &[T], shape: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(shape.len());
    let mut i = 0;
    for level in shape {
        out.push(x[i..i + level.len()].to_vec());
        i += level.len();
    }
    out
}

fn value_of<T: Scalar>(graph: &DualGraph<T>, q: &[Vec<T>]) -> ExtReal<T> {
    evaluate_unchecked(graph, q).value
}

/// Exhaustive search over the full-tree measures, `n <= 3`.
///
/// A uniform grid over all `2^n - 1` up-probabilities is enumerated, with
/// spacing `q_resolution` or as fine as about 2.5e5 points allow. The
/// objective is concave in the terminal path weights, where it is then
/// maximised by cutting planes: each conjugate term is bounded below by its
/// tangents, which makes a linear program whose optimum bounds the supremum
/// from above, and tangents at the current solution are added until the two
/// bounds meet. The better of the grid point and the cutting-plane measure is
/// returned; its value is a lower bound and `upper_bound` an upper bound on
/// the super-replication price.
pub fn dual_brute_force<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    q_resolution: T,
) -> Result<DualReport<T>> {
    let n = params.n();
    if n > BRUTE_FORCE_CAP {
        return Err(Error::NodeCapExceeded { n, cap: BRUTE_FORCE_CAP });
    }
    if !(q_resolution > T::zero() && q_resolution < T::one()) {
        return Err(invalid("q resolution must lie in (0, 1)"));
    }
    let graph = DualGraph::tree(params, penalty, claim)?;
    let shape = graph.constant_q(T::zero());
    let dim = (1usize << n) - 1;
    let budget = 250_000f64;
    let finest = (1.0 / q_resolution.f64()).round() as usize + 1;
    let per_axis = (budget.powf(1.0 / dim as f64).floor() as usize).clamp(3, finest.max(3));
    let mut best_x = flat(&graph.constant_q(params.crr_probability()));
    let mut best_v = value_of(&graph, &shape_q(&best_x, &shape));

    let step = T::one() / T::of(per_axis - 1);
    let (x, v) = grid_search(&graph, &shape, &vec![T::zero(); dim], step, per_axis);
    let evaluations = 1 + per_axis.pow(dim as u32);
    if v.is_finite() && v.ge(best_v) {
        best_x = x;
        best_v = v;
    }
    if !best_v.is_finite() {
        return Err(Error::InfeasibleMeasure);
    }
    let grid_value = best_v.finite().unwrap();
    let cut = cutting_plane(&graph, T::lit(1e-11), 400)?;
    let (x, sweeps, upper) = match cut {
        Some(c) if c.value > grid_value => (flat(&c.q), c.iterations, Some(c.upper)),
        Some(c) => (best_x, c.iterations, Some(c.upper)),
        None => (best_x, 0, None),
    };
    let q = shape_q(&x, &shape);
    let ev = evaluate_unchecked(&graph, &q);
    let g = gradient(&graph, &q, &ev).map(|g| projected_norm(&flat(&g), &x)).unwrap_or(T::zero());
    let v = ev.value.finite().ok_or(Error::InfeasibleMeasure)?;
    Ok(DualReport {
        value: v,
        q,
        iterations: evaluations + sweeps,
        grad_norm: g,
        certified: true,
        upper_bound: upper.map(|u| u.max(v)),
        method: "grid+cutting-plane".into(),
    })
}

/// Larger value wins; ties go to the smaller index so results do not depend
/// on the thread schedule.
fn better_of<T: Scalar>(a: (usize, ExtReal<T>), b: (usize, ExtReal<T>)) -> (usize, ExtReal<T>) {
    let a_wins = a.1.ge(b.1) && (!b.1.ge(a.1) || a.0 < b.0);
    if a_wins {
        a
    } else {
        b
    }
}

fn shape_q<T: Scalar>(x: &[T], shape: &[Vec<T>]) -> Vec<Vec<T>> {
    unflat(x, shape)
}

fn grid_search<T: Scalar>(graph: &DualGraph<T>, shape: &[Vec<T>], lo: &[T], step: T, points: usize) -> (Vec<T>, ExtReal<T>) {
    let dim = lo.len();
    let total = points.pow(dim as u32);
    let coord = |idx: usize| -> Vec<T> {
        let mut r = idx;
        (0..dim)
            .map(|d| {
                let i = r % points;
                r /= points;
                (lo[d] + step * T::of(i)).min(T::one())
            })
            .collect()
    };
    let (idx, v) = (0..total)
        .into_par_iter()
        .map(|idx| {
            let x = coord(idx);
            let v = value_of(graph, &shape_q(&x, shape));
            (idx, v)
        })
        .reduce(|| (usize::MAX, ExtReal::NegInf), better_of);
    (coord(if idx == usize::MAX { 0 } else { idx }), v)
}

struct CutSolution<T> {
    value: T,
    upper: T,
    q: Vec<Vec<T>>,
    iterations: usize,
}

/// Kelley cutting planes on the objective in terminal path weights.
///
/// Variables are the weights `Phi(v)` of the terminal nodes and one epigraph
/// variable `t(u)` per inner node for `Phi(u) G*_u(y(u))`, where
/// `Phi(u) y(u) = sum_{v below u} Phi(v) (S(v) - S(u))`. The band of each
/// conjugate is a pair of linear constraints. Returns `None` when the linear
/// program cannot be solved.
fn cutting_plane<T: Scalar>(graph: &DualGraph<T>, tol: T, max_rounds: usize) -> Result<Option<CutSolution<T>>> {
    use microlp::{ComparisonOp, OptimizationDirection, Problem, Variable};
    if graph.layout != Layout::Tree {
        return Err(invalid("cutting planes need the full tree"));
    }
    let n = graph.n;
    let leaves = 1usize << n;
    let inner: Vec<(usize, usize)> = (0..n).flat_map(|k| (0..1usize << k).map(move |b| (k, b))).collect();
    let below = |k: usize, b: usize| (b << (n - k))..((b + 1) << (n - k));
    // y(u) Phi(u) and Phi(u) as coefficient rows over the terminal weights
    let spread = |k: usize, b: usize| -> Vec<(usize, f64)> {
        let s = graph.prices[k][b].f64();
        below(k, b).map(|v| (v, graph.prices[n][v].f64() - s)).collect()
    };
    let mut cuts: Vec<Vec<f64>> = inner
        .iter()
        .map(|&(k, b)| {
            let pen = &graph.penalties[k][b];
            let row = spread(k, b);
            let lo = row.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
            let hi = row.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
            let (blo, bhi) = pen.band();
            let lo = blo.finite().map_or(lo, |x| lo.max(x.f64()));
            let hi = bhi.finite().map_or(hi, |x| hi.min(x.f64()));
            let mut ys: Vec<f64> = (0..=32).map(|i| lo + (hi - lo) * i as f64 / 32.0).collect();
            if let Some(f) = pen.as_pl() {
                ys.extend((0..f.len().saturating_sub(1)).map(|j| f.segment_slope(j).f64()));
                ys.extend(f.left_ray().into_iter().chain(f.right_ray()).map(|x| x.f64()));
            }
            ys.retain(|y| y.is_finite() && *y >= lo - 1e-12 && *y <= hi + 1e-12);
            ys
        })
        .collect();

    let mut best: Option<CutSolution<T>> = None;
    let mut upper = f64::INFINITY;
    for round in 0..max_rounds {
        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let phi: Vec<Variable> = (0..leaves).map(|v| lp.add_var(graph.payoff[v].f64(), (0.0, 1.0))).collect();
        // G >= -g(0), so each term is at least -|g(0)|
        let t: Vec<Variable> = inner
            .iter()
            .map(|&(k, b)| lp.add_var(-1.0, (-graph.penalties[k][b].eval(T::zero()).f64().abs() - 1.0, f64::INFINITY)))
            .collect();
        lp.add_constraint(phi.iter().map(|p| (*p, 1.0)), ComparisonOp::Eq, 1.0);
        for (i, &(k, b)) in inner.iter().enumerate() {
            let pen = &graph.penalties[k][b];
            let row = spread(k, b);
            let (blo, bhi) = pen.band();
            if let Some(h) = bhi.finite() {
                lp.add_constraint(row.iter().map(|(v, d)| (phi[*v], d - h.f64())), ComparisonOp::Le, 0.0);
            }
            if let Some(l) = blo.finite() {
                lp.add_constraint(row.iter().map(|(v, d)| (phi[*v], d - l.f64())), ComparisonOp::Ge, 0.0);
            }
            for y0 in &cuts[i] {
                let Some(g0) = pen.conjugate_within(T::lit(*y0), band_tol(graph.prices[k][b])).finite() else {
                    continue;
                };
                let slope = pen.conjugate_derivative(T::lit(*y0)).f64();
                // t >= g0 Phi(u) + slope (Phi(u) y(u) - y0 Phi(u))
                let mut expr: Vec<(Variable, f64)> = vec![(t[i], 1.0)];
                expr.extend(row.iter().map(|(v, d)| (phi[*v], -(g0.f64() + slope * (d - y0)))));
                lp.add_constraint(expr, ComparisonOp::Ge, 0.0);
            }
        }
        let solution = match lp.solve().ok().and_then(|o| o.into_solution().ok()) {
            Some(s) => s,
            None => return Ok(best),
        };
        upper = upper.min(solution.objective());
        let weights: Vec<T> = phi.iter().map(|p| T::lit(solution.var_value(*p).max(0.0))).collect();
        let Ok(w) = PhiWeights::from_terminal(weights) else {
            return Ok(best);
        };
        let mut q = measure_from_phi(&w).q;
        restore_band(graph, &mut q);
        let ev = evaluate_unchecked(graph, &q);
        if let ExtReal::Finite(v) = ev.value {
            if best.as_ref().map_or(true, |b| v > b.value) {
                best = Some(CutSolution { value: v, upper: T::lit(upper), q: q.clone(), iterations: round + 1 });
            }
        }
        if let Some(b) = best.as_mut() {
            b.upper = T::lit(upper);
            b.iterations = round + 1;
            if T::lit(upper) - b.value <= tol * (T::one() + b.value.abs()) {
                break;
            }
        }
        // tangents at the conditional means of the current solution
        let levels = &w.phi;
        let mut added = false;
        for (i, &(k, b)) in inner.iter().enumerate() {
            let p = levels[k][b].f64();
            if p <= 1e-14 {
                continue;
            }
            let y = spread(k, b).iter().map(|(v, d)| levels[n][*v].f64() * d).sum::<f64>() / p;
            if !cuts[i].iter().any(|c| (c - y).abs() <= 1e-13 * (1.0 + y.abs())) {
                cuts[i].push(y);
                added = true;
            }
        }
        if !added {
            break;
        }
    }
    Ok(best)
}

fn projected_norm<T: Scalar>(g: &[T], x: &[T]) -> T {
    g.iter()
        .zip(x)
        .map(|(gi, xi)| {
            let blocked = (*xi <= T::zero() && *gi < T::zero()) || (*xi >= T::one() && *gi > T::zero());
            if blocked {
                T::zero()
            } else {
                *gi * *gi
            }
        })
        .sum::<T>()
        .sqrt()
}

/// Step size control for [`dual_ascent`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepRule<T> {
    /// Constant step; infeasible or non-improving steps are halved.
    Fixed(T),
    /// Step grows by `grow` after a success and shrinks by half on failure.
    Adaptive { initial: T, grow: T },
}

/// Settings of the projected gradient ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentOptions<T> {
    pub steps: usize,
    pub rule: StepRule<T>,
    /// Independent starts: the CRR measure plus random perturbations of it.
    pub starts: usize,
    pub seed: u64,
    /// Probabilities are kept in `[clamp, 1 - clamp]`.
    pub clamp: T,
    pub tolerance: T,
}

impl<T: Scalar> Default for AscentOptions<T> {
    fn default() -> Self {
        Self {
            steps: 400,
            rule: StepRule::Adaptive { initial: T::lit(0.05), grow: T::lit(1.5) },
            starts: 5,
            seed: 0,
            clamp: T::lit(1e-9),
            tolerance: T::lit(1e-10),
        }
    }
}

/// Projected, preconditioned gradient ascent over the measures of `graph`.
///
/// The gradient in each `q` is divided by the probability of reaching its
/// state, which balances deep and shallow nodes. After each step every `q`
/// is moved, from the last time backwards, to the nearest value keeping its
/// conditional mean inside the band of the conjugate; this is always possible
/// and keeps the iterates feasible. Steps that do not improve are halved, and
/// a start that is still infeasible is halved towards the CRR measure.
pub fn dual_ascent<T: Scalar>(graph: &DualGraph<T>, crr: T, init: Option<&[Vec<T>]>, opts: &AscentOptions<T>) -> Result<DualReport<T>> {
    if let Some(q) = init {
        graph.check_shape(q)?;
    }
    let base = graph.constant_q(crr);
    let starts = opts.starts.max(1);
    let runs: Vec<(T, Vec<Vec<T>>, usize, T)> = (0..starts)
        .into_par_iter()
        .map(|i| {
            let mut q0 = init.map(|q| q.to_vec()).unwrap_or_else(|| base.clone());
            if i > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
                for level in q0.iter_mut() {
                    for x in level.iter_mut() {
                        *x = *x + T::lit(rng.gen_range(-0.2..0.2));
                    }
                }
            }
            ascend(graph, &base, q0, opts)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.0 > runs[best].0 {
            best = i;
        }
    }
    let (value, q, iterations, grad_norm) = runs.into_iter().nth(best).expect("at least one start");
    Ok(DualReport { value, q, iterations, grad_norm, certified: true, upper_bound: None, method: "projected-gradient".into() })
}

fn clamp_q<T: Scalar>(q: &mut [Vec<T>], eps: T) {
    for level in q.iter_mut() {
        for x in level.iter_mut() {
            *x = x.max(eps).min(T::one() - eps);
        }
    }
}

fn blend_q<T: Scalar>(from: &[Vec<T>], to: &[Vec<T>], w: T) -> Vec<Vec<T>> {
    from.iter()
        .zip(to)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x + w * (*y - *x)).collect())
        .collect()
}

/// Moves each `q`, from the last time backwards, to the nearest value that
/// keeps `M - S` inside the band of the conjugate, given the children's `M`.
fn restore_band<T: Scalar>(graph: &DualGraph<T>, q: &mut [Vec<T>]) {
    let n = graph.n;
    let mut m_next = graph.prices[n].clone();
    for k in (0..n).rev() {
        let mut m_now = Vec::with_capacity(graph.width(k));
        for s in 0..graph.width(k) {
            let (u, d) = (graph.up[k][s], graph.down[k][s]);
            let (mu, md) = (m_next[u], m_next[d]);
            let price = graph.prices[k][s];
            let (lo, hi) = graph.penalties[k][s].band();
            let spread = mu - md;
            if spread > T::zero() {
                let mut qs = q[k][s];
                if let Some(h) = hi.finite() {
                    qs = qs.min((price + h - md) / spread);
                }
                if let Some(l) = lo.finite() {
                    qs = qs.max((price + l - md) / spread);
                }
                q[k][s] = qs.max(T::zero()).min(T::one());
            }
            m_now.push(md + q[k][s] * spread);
        }
        m_next = m_now;
    }
}

fn ascend<T: Scalar>(graph: &DualGraph<T>, crr: &[Vec<T>], mut q: Vec<Vec<T>>, opts: &AscentOptions<T>) -> Result<(T, Vec<Vec<T>>, usize, T)> {
    clamp_q(&mut q, opts.clamp);
    restore_band(graph, &mut q);
    let mut ev = evaluate_unchecked(graph, &q);
    let mut halvings = 0;
    while !ev.value.is_finite() {
        if halvings > 80 {
            return Err(Error::InfeasibleMeasure);
        }
        q = blend_q(crr, &q, T::lit(0.5));
        ev = evaluate_unchecked(graph, &q);
        halvings += 1;
    }
    let (mut eta, grow) = match opts.rule {
        StepRule::Fixed(e) => (e, T::one()),
        StepRule::Adaptive { initial, grow } => (initial, grow),
    };
    let fixed = eta;
    let mut value = ev.value.finite().unwrap();
    if value.is_nan() {
        return Err(invalid("dual objective is NaN at the starting measure"));
    }
    let mut norm = T::zero();
    let mut iterations = 0;
    for _ in 0..opts.steps {
        iterations += 1;
        let grad = match gradient(graph, &q, &ev) {
            Some(g) => g,
            None => break,
        };
        let dir: Vec<Vec<T>> = grad
            .iter()
            .zip(&ev.reach)
            .map(|(g, p)| g.iter().zip(p).map(|(gi, pi)| *gi / pi.max(T::lit(1e-12))).collect())
            .collect();
        norm = projected_norm(&flat(&grad), &flat(&q));
        if norm <= opts.tolerance {
            break;
        }
        let mut accepted = false;
        let mut step = eta;
        for _ in 0..40 {
            let mut trial: Vec<Vec<T>> = q
                .iter()
                .zip(&dir)
                .map(|(x, d)| x.iter().zip(d).map(|(xi, di)| *xi + step * *di).collect())
                .collect();
            clamp_q(&mut trial, opts.clamp);
            restore_band(graph, &mut trial);
            let tev = evaluate_unchecked(graph, &trial);
            if let ExtReal::Finite(v) = tev.value {
                if v.is_nan() {
                    return Err(invalid(format!("dual objective became NaN after {iterations} steps")));
                }
                if v > value {
                    q = trial;
                    ev = tev;
                    value = v;
                    accepted = true;
                    break;
                }
            }
            step = step * T::lit(0.5);
        }
        if !accepted {
            break;
        }
        eta = match opts.rule {
            StepRule::Fixed(_) => fixed,
            StepRule::Adaptive { .. } => (step * grow).min(T::lit(10.0)),
        };
    }
    Ok((value, q, iterations, norm))
}

/// Ascent on the full tree. When every local penalty is piecewise linear and
/// `n <= CUTTING_PLANE_CAP`, the objective is polyhedral and the result is
/// compared with the cutting-plane solution, which also gives an upper bound.
pub fn dual_ascent_tree<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    init: Option<&TreeMeasure<T>>,
    opts: &AscentOptions<T>,
) -> Result<DualReport<T>> {
    let graph = DualGraph::tree(params, penalty, claim)?;
    let mut report = dual_ascent(&graph, params.crr_probability(), init.map(|m| m.q.as_slice()), opts)?;
    let polyhedral = graph.penalties.iter().flatten().all(|p| matches!(p, LocalPenalty::Abs { .. } | LocalPenalty::Pl(_)));
    if params.n() <= CUTTING_PLANE_CAP && polyhedral {
        if let Some(cut) = cutting_plane(&graph, T::lit(1e-10), POLISH_ROUNDS)? {
            report.upper_bound = Some(cut.upper.max(report.value).max(cut.value));
            report.method = "ascent+cutting-plane".into();
            report.iterations += cut.iterations;
            if cut.value > report.value {
                let ev = evaluate_unchecked(&graph, &cut.q);
                report.grad_norm =
                    gradient(&graph, &cut.q, &ev).map(|g| projected_norm(&flat(&g), &flat(&cut.q))).unwrap_or(T::zero());
                report.value = cut.value;
                report.q = cut.q;
            }
        }
    }
    Ok(report)
}

/// Ascent over lattice measures. With the last move as state, the ascent
/// starts from the best constant-control measure of [`kusuoka_measure`] on a
/// small scan of controls, when that beats the CRR measure.
pub fn dual_ascent_lattice<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    memory: MeasureMemory,
    opts: &AscentOptions<T>,
) -> Result<DualReport<T>> {
    let graph = DualGraph::lattice(params, penalty, claim, memory)?;
    let crr = params.crr_probability();
    let mut init: Option<(T, Vec<Vec<T>>)> = None;
    if memory == MeasureMemory::LastMove {
        let cap = penalty.truncation_level().unwrap_or(params.sigma() / T::lit(2.0));
        for frac in [0.1, 0.25, 0.5, 0.75, 0.9, 0.97] {
            let a = cap * T::lit(frac);
            let Ok(km) = kusuoka_measure(params, penalty, claim, &KappaProcess::constant(params.n(), a)) else {
                continue;
            };
            if let ExtReal::Finite(v) = evaluate_unchecked(&km.graph, &km.q).value {
                if init.as_ref().map_or(true, |(best, _)| v > *best) {
                    init = Some((v, km.q));
                }
            }
        }
        let base = evaluate_unchecked(&graph, &graph.constant_q(crr)).value;
        if let (Some((v, _)), ExtReal::Finite(b)) = (&init, base) {
            if b >= *v {
                init = None;
            }
        }
    }
    dual_ascent(&graph, crr, init.as_ref().map(|(_, q)| q.as_slice()), opts)
}

/// Predictable control process `kappa` of the explicit lower-bound measure.
///
/// `values[k - 1][state]` is `kappa(k)`, fixed at time `k - 1` in the given
/// state (tree node bits, or lattice index). `kappa(n)` must vanish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaProcess<T> {
    n: usize,
    kappa0: T,
    tree: bool,
    values: Vec<Vec<T>>,
}

/// Bounds a control process must respect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaBounds<T> {
    /// `|kappa| < c - delta`.
    pub c: T,
    pub delta: T,
    /// `|kappa(k) - kappa(k - 1)| <= lipschitz / sqrt(n)`.
    pub lipschitz: T,
}

impl<T: Scalar> KappaProcess<T> {
    /// `kappa = a` before maturity, `kappa(n) = 0`, on the lattice.
    pub fn constant(n: usize, a: T) -> Self {
        let values = (0..n)
            .map(|k| {
                let v = if k + 1 == n { T::zero() } else { a };
                vec![v; k + 1]
            })
            .collect();
        Self { n, kappa0: a, tree: false, values }
    }

    /// Lattice process from `f(k, level_{k-1})` for `k = 1..n`.
    pub fn lattice_from_fn(n: usize, kappa0: T, f: impl Fn(usize, i64) -> T) -> Self {
        let values = (0..n).map(|j| (0..=j).map(|i| f(j + 1, 2 * i as i64 - j as i64)).collect()).collect();
        Self { n, kappa0, tree: false, values }
    }

    /// Tree process from `f(k, node at time k - 1)`.
    pub fn tree_from_fn(n: usize, kappa0: T, f: impl Fn(usize, TreeNode) -> T) -> Self {
        let values = (0..n).map(|j| (0..1u64 << j).map(|b| f(j + 1, TreeNode { k: j, bits: b })).collect()).collect();
        Self { n, kappa0, tree: true, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `kappa(k)` seen from state `s` at time `k - 1`.
    pub fn at(&self, k: usize, s: usize) -> T {
        if k == 0 {
            self.kappa0
        } else {
            self.values[k - 1][s]
        }
    }

    pub fn validate(&self, bounds: &KappaBounds<T>) -> Result<()> {
        let limit = bounds.c - bounds.delta;
        let floor = bounds.delta - T::lit(0.5);
        let step = bounds.lipschitz / T::of(self.n).sqrt();
        let tol = T::lit(1e-12);
        let check = |v: T, what: &str| -> Result<()> {
            if !(v.abs() < limit) {
                return Err(Error::KappaBounds(format!("{what}: |{v}| >= c - delta = {limit}")));
            }
            if !(v > floor) {
                return Err(Error::KappaBounds(format!("{what}: {v} <= delta - 1/2")));
            }
            Ok(())
        };
        check(self.kappa0, "kappa(0)")?;
        for (j, level) in self.values.iter().enumerate() {
            let k = j + 1;
            for (s, v) in level.iter().enumerate() {
                check(*v, &format!("kappa({k})"))?;
                let parents: Vec<T> = if k == 1 {
                    vec![self.kappa0]
                } else if self.tree {
                    vec![self.values[j - 1][s >> 1]]
                } else {
                    [s.checked_sub(1), Some(s)]
                        .into_iter()
                        .flatten()
                        .filter(|p| *p < self.values[j - 1].len())
                        .map(|p| self.values[j - 1][p])
                        .collect()
                };
                if parents.iter().any(|p| (*v - *p).abs() > step + tol) {
                    return Err(Error::KappaBounds(format!("increment at time {k} exceeds {step}")));
                }
            }
        }
        if self.values[self.n - 1].iter().any(|v| *v != T::zero()) {
            return Err(Error::KappaBounds("kappa(n) must vanish".into()));
        }
        Ok(())
    }

    /// `kappa0` line, then `node_id value` per state (`r...` or `L<k>/<level>`).
    pub fn to_text(&self) -> String {
        let mut rows = vec![("kappa0".to_string(), vec![self.kappa0.f64()])];
        for (j, level) in self.values.iter().enumerate() {
            for (s, v) in level.iter().enumerate() {
                let id = if self.tree {
                    TreeNode { k: j, bits: s as u64 }.id()
                } else {
                    format!("L{j}/{}", 2 * s as i64 - j as i64)
                };
                rows.push((id, vec![v.f64()]));
            }
        }
        crate::text_io::write_keyed(&rows)
    }
}

/// The explicit measure built from a control process.
#[derive(Debug, Clone)]
pub struct KusuokaMeasure<T> {
    pub graph: DualGraph<T>,
    pub q: Vec<Vec<T>>,
    /// `M(k) = S(k) exp(xi_k kappa(k) / sqrt(n))` at every state.
    pub m: Vec<Vec<T>>,
    /// Largest `|q M(up) + (1 - q) M(down) - M|` over the states.
    pub martingale_residual: T,
    /// Largest residual divided by `M` at its state. Far from `s0` the
    /// absolute residual sits at a few units in the last place of `M`.
    pub relative_residual: T,
}

/// Builds the measure under which `M(k) = S(k) exp(xi_k kappa(k) / sqrt(n))`
/// is a martingale. The last move before time 0 is taken as 0, so `M(0) = s0`.
pub fn kusuoka_measure<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    kappa: &KappaProcess<T>,
) -> Result<KusuokaMeasure<T>> {
    let n = params.n();
    if kappa.n != n {
        return Err(invalid("control process and market disagree on n"));
    }
    let graph = if kappa.tree {
        DualGraph::tree(params, penalty, claim)?
    } else {
        DualGraph::lattice(params, penalty, claim, MeasureMemory::LastMove)?
    };
    let root_n = T::of(n).sqrt();
    let sigma = params.sigma();
    // (state at time k - 1 holding kappa(k), last move) for every state at time k
    let origin = |k: usize, s: usize| -> (usize, i8) {
        if k == 0 {
            return (0, 0);
        }
        if kappa.tree {
            (s >> 1, if s & 1 == 1 { 1 } else { -1 })
        } else {
            // states that no path reaches are given the nearest parent
            let i = s / 2;
            if s % 2 == 1 {
                (i.saturating_sub(1).min(k - 1), 1)
            } else {
                (i.min(k - 1), -1)
            }
        }
    };
    let level_index = |k: usize, s: usize| if kappa.tree || k == 0 { s } else { s / 2 };
    let m: Vec<Vec<T>> = (0..=n)
        .map(|k| {
            (0..graph.width(k))
                .map(|s| {
                    let (parent, xi) = origin(k, s);
                    let kap = if k == 0 { T::zero() } else { kappa.at(k, parent) };
                    let log = sigma * T::of_i(graph.level(k, s)) + T::of_i(i64::from(xi)) * kap;
                    params.s0() * (log / root_n).exp()
                })
                .collect()
        })
        .collect();
    let mut q = Vec::with_capacity(n);
    let mut residual = T::zero();
    let mut relative = T::zero();
    for k in 0..n {
        let mut level = Vec::with_capacity(graph.width(k));
        for s in 0..graph.width(k) {
            let (parent, xi) = origin(k, s);
            let kap_now = if k == 0 { T::zero() } else { kappa.at(k, parent) };
            let kap_next = kappa.at(k + 1, level_index(k, s));
            let a = T::of_i(i64::from(xi)) * kap_now / root_n;
            let b = (sigma + kap_next) / root_n;
            let p = (a + b).exp_m1() / (b + b).exp_m1();
            if !(p > T::zero() && p < T::one()) {
                return Err(Error::ProbabilityOutOfRange { q: p.f64(), k });
            }
            let (u, d) = graph.children(k, s);
            // differences first: the products then carry no rounding at the scale of M
            let r = (p * (m[k + 1][u] - m[k][s]) + (T::one() - p) * (m[k + 1][d] - m[k][s])).abs();
            residual = residual.max(r);
            relative = relative.max(r / m[k][s]);
            level.push(p);
        }
        q.push(level);
    }
    Ok(KusuokaMeasure { graph, q, m, martingale_residual: residual, relative_residual: relative })
}

/// Dual objective of the constant-control measure `kappa = a`.
pub fn kusuoka_lower_bound<T: Scalar>(
    params: &MarketParams<T>,
    penalty: &Penalty<T>,
    claim: &Claim<T>,
    a: T,
) -> Result<T> {
    if let Some(c) = penalty.truncation_level() {
        if !(a.abs() < c) {
            return Err(Error::KappaBounds(format!("|a| = {} must stay below c = {c}", a.abs())));
        }
    }
    let kappa = KappaProcess::constant(params.n(), a);
    let km = kusuoka_measure(params, penalty, claim, &kappa)?;
    evaluate(&km.graph, &km.q)?.value.finite().ok_or(Error::InfeasibleMeasure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primal::{superrep_exact, GammaGrid, PrimalOptions};
    use proptest::prelude::*;
    use rand::Rng;

    fn market(n: usize) -> MarketParams<f64> {
        MarketParams::new(n, 0.2, 100.0).unwrap()
    }

    fn primal(n: usize, pen: &Penalty<f64>, claim: &Claim<f64>) -> f64 {
        let o = PrimalOptions::new(GammaGrid::new(-2.0, 2.0, 401).unwrap());
        superrep_exact(&market(n), pen, claim, &o).unwrap().value
    }

    #[test]
    fn crr_measure_prices_frictionless() {
        let params = market(5);
        let claim = Claim::call(100.0);
        let v = dual_objective(&params, &TreeMeasure::crr(&params), &Penalty::zero(), &claim).unwrap();
        let p = primal(5, &Penalty::zero(), &claim);
        assert!((v.finite().unwrap() - p).abs() < 1e-9);
        let m = conditional_terminal_expectation(&params, &TreeMeasure::crr(&params)).unwrap();
        assert!((m[0][0] - 100.0).abs() < 1e-10);
    }

    #[test]
    fn band_violation_is_minus_infinity() {
        let params = market(2);
        let q = TreeMeasure::new(vec![vec![0.95], vec![0.5, 0.5]]).unwrap();
        let v = dual_objective(&params, &q, &Penalty::truncated_zero(0.1).unwrap(), &Claim::call(100.0)).unwrap();
        assert_eq!(v, ExtReal::NegInf);
    }

    #[test]
    fn phi_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = TreeMeasure::<f64>::random(4, 0.0, 1.0, &mut rng);
        let back = measure_from_phi(&phi_from_measure(&m));
        for (a, b) in flat(m.q()).iter().zip(flat(back.q()).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let phi = PhiWeights::from_terminal(vec![0.0, 0.0, 1.0, 3.0]).unwrap();
        let q = measure_from_phi(&phi);
        assert_eq!(q.q()[1][0], 0.5);
        assert!(PhiWeights::new(vec![vec![1.0], vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn measure_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = TreeMeasure::random(3, 0.1, 0.9, &mut rng);
        let back = TreeMeasure::<f64>::from_text(&m.to_text()).unwrap();
        for (a, b) in flat(m.q()).iter().zip(flat(back.q()).iter()) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let params = market(3);
        let graph = DualGraph::tree(&params, &Penalty::quadratic(0.5).unwrap(), &Claim::call(100.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = TreeMeasure::random(3, 0.3, 0.7, &mut rng).q;
        let ev = evaluate(&graph, &q).unwrap();
        let g = gradient(&graph, &q, &ev).unwrap();
        for k in 0..3 {
            for s in 0..graph.width(k) {
                let h = 1e-6;
                let mut a = q.clone();
                let mut b = q.clone();
                a[k][s] += h;
                b[k][s] -= h;
                let fd = (value_of(&graph, &a).finite().unwrap() - value_of(&graph, &b).finite().unwrap()) / (2.0 * h);
                assert!((fd - g[k][s]).abs() < 1e-5 * (1.0 + fd.abs()), "{k} {s}: {fd} vs {}", g[k][s]);
            }
        }
    }

    #[test]
    fn lattice_gradient_matches_finite_differences() {
        let params = market(4);
        let graph = DualGraph::lattice(&params, &Penalty::quadratic(0.5).unwrap(), &Claim::call(100.0), MeasureMemory::LastMove).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Vec<Vec<f64>> = (0..4).map(|k| (0..graph.width(k)).map(|_| rng.gen_range(0.3..0.7)).collect()).collect();
        let ev = evaluate(&graph, &q).unwrap();
        let g = gradient(&graph, &q, &ev).unwrap();
        for k in 0..4 {
            for s in 0..graph.width(k) {
                let h = 1e-6;
                let mut a = q.clone();
                let mut b = q.clone();
                a[k][s] += h;
                b[k][s] -= h;
                let fd = (value_of(&graph, &a).finite().unwrap() - value_of(&graph, &b).finite().unwrap()) / (2.0 * h);
                assert!((fd - g[k][s]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn brute_force_matches_convex_program() {
        // reference values from an independent convex program in path weights
        let claim = Claim::call(100.0);
        let cases = [
            (Penalty::quadratic(0.5).unwrap(), [10.117958174795888, 7.328719683780893, 8.851483131234485]),
            (Penalty::truncated_zero(0.1).unwrap(), [15.465139435618989, 14.439233252206218, 14.703792542952703]),
        ];
        for (pen, refs) in &cases {
            for n in 1..=3 {
                let rep = dual_brute_force(&market(n), pen, &claim, 1e-3).unwrap();
                assert!(rep.value <= refs[n - 1] + 1e-9, "{pen:?} n={n}");
                assert!((refs[n - 1] - rep.value) / refs[n - 1] < 1e-8, "{pen:?} n={n}: {} vs {}", rep.value, refs[n - 1]);
                assert!(rep.upper_bound.unwrap() >= refs[n - 1] - 1e-8);
            }
        }
        assert!(matches!(dual_brute_force(&market(4), &Penalty::zero(), &claim, 1e-3), Err(Error::NodeCapExceeded { .. })));
    }

    #[test]
    fn ascent_reaches_primal_on_small_tree() {
        let claim = Claim::call(100.0);
        let pen = Penalty::quadratic(0.5).unwrap();
        let params = market(4);
        let rep = dual_ascent_tree(&params, &pen, &claim, None, &AscentOptions { steps: 2000, ..Default::default() }).unwrap();
        let p = primal(4, &pen, &claim);
        assert!(rep.value <= p + 1e-9);
        assert!((p - rep.value) / p < 2e-3, "{} vs {p}", rep.value);
    }

    #[test]
    fn kusuoka_martingale_and_bounds() {
        for n in [16, 64] {
            let params = market(n);
            let pen = Penalty::truncated_quadratic(1.0, 0.25).unwrap();
            let km = kusuoka_measure(&params, &pen, &Claim::call(100.0), &KappaProcess::constant(n, 0.05)).unwrap();
            assert!(km.martingale_residual <= 1e-12, "{}", km.martingale_residual);
            assert!(km.relative_residual <= 1e-15, "{}", km.relative_residual);
            assert!((km.m[0][0] - 100.0).abs() < 1e-12);
        }
        let bad = KappaProcess::constant(16, 0.3);
        let b = KappaBounds { c: 0.25, delta: 0.0, lipschitz: 2.0 };
        assert!(matches!(bad.validate(&b), Err(Error::KappaBounds(_))));
        let jumpy = KappaProcess::constant(16, 0.1);
        let b = KappaBounds { c: 0.25, delta: 0.0, lipschitz: 0.2 };
        assert!(matches!(jumpy.validate(&b), Err(Error::KappaBounds(_))));
    }

    #[test]
    fn kusuoka_tree_and_lattice_agree() {
        let n = 6;
        let params = market(n);
        let pen = Penalty::quadratic(1.0).unwrap();
        let claim = Claim::call(100.0);
        let f = |k: usize, level: i64| if k == n { 0.0 } else { 0.03 + 0.005 * level as f64 };
        let lat = KappaProcess::lattice_from_fn(n, 0.03, f);
        let tree = KappaProcess::tree_from_fn(n, 0.03, |k, node| f(k, node.level()));
        let a = kusuoka_measure(&params, &pen, &claim, &lat).unwrap();
        let b = kusuoka_measure(&params, &pen, &claim, &tree).unwrap();
        let va = evaluate(&a.graph, &a.q).unwrap().value.finite().unwrap();
        let vb = evaluate(&b.graph, &b.q).unwrap().value.finite().unwrap();
        assert!((va - vb).abs() < 1e-10);
        assert!(vb <= primal(n, &pen, &claim) + 1e-9);
    }

    #[test]
    fn all_up_measure_continues_deterministically() {
        let n = 4;
        let params = market(n);
        let m = conditional_terminal_expectation(&params, &TreeMeasure::new(vec![vec![1.0], vec![1.0; 2], vec![1.0; 4], vec![1.0; 8]]).unwrap()).unwrap();
        for k in 0..=n {
            for b in 0..1u64 << k {
                let s = params.node_price(TreeNode { k, bits: b });
                let expect = s * (0.2 * (n - k) as f64 / (n as f64).sqrt()).exp();
                assert!((m[k][b as usize] - expect).abs() < 1e-10);
            }
        }
        let crr = conditional_terminal_expectation(&params, &TreeMeasure::crr(&params)).unwrap();
        for k in 0..=n {
            for b in 0..1u64 << k {
                assert!((crr[k][b as usize] - params.node_price(TreeNode { k, bits: b })).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_step_objective_matches_terminal_sum() {
        let params = market(2);
        // level one is indexed by bits: the down node comes first
        let q = TreeMeasure::new(vec![vec![0.37], vec![0.22, 0.81]]).unwrap();
        let s = |b: u64| params.node_price(TreeNode { k: 2, bits: b });
        // paths: dd, du, ud, uu by bits
        let w = [(1.0 - 0.37) * (1.0 - 0.22), (1.0 - 0.37) * 0.22, 0.37 * (1.0 - 0.81), 0.37 * 0.81];
        let m0: f64 = (0..4).map(|b| w[b as usize] * s(b)).sum();
        let m = conditional_terminal_expectation(&params, &q).unwrap();
        assert!((m[0][0] - m0).abs() < 1e-12);
        let lambda = 0.5;
        let pen = Penalty::quadratic(lambda).unwrap();
        let claim = Claim::call(100.0);
        let f: f64 = (0..4).map(|b| w[b as usize] * (s(b) - 100.0).max(0.0)).sum();
        let g = |y: f64| y * y / (4.0 * lambda);
        let s1 = |b: u64| params.node_price(TreeNode { k: 1, bits: b });
        let mu = (0.81 * s(3) + 0.19 * s(2), 0.22 * s(1) + 0.78 * s(0));
        let expect = f - g(m0 - 100.0) - 0.37 * g(mu.0 - s1(1)) - 0.63 * g(mu.1 - s1(0));
        let v = dual_objective(&params, &q, &pen, &claim).unwrap().finite().unwrap();
        assert!((v - expect).abs() < 1e-10);
    }

    #[test]
    fn one_step_quadratic_closed_form() {
        let params = market(1);
        let pen = Penalty::quadratic(0.5).unwrap();
        let claim = Claim::call(100.0);
        let (up, dn) = (100.0 * 0.2f64.exp(), 100.0 * (-0.2f64).exp());
        let mut best = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let q = i as f64 / 1000.0;
            let closed = q * (up - 100.0) - (q * up + (1.0 - q) * dn - 100.0).powi(2) / 2.0;
            let v = dual_objective(&params, &TreeMeasure::new(vec![vec![q]]).unwrap(), &pen, &claim).unwrap().finite().unwrap();
            assert!((v - closed).abs() < 1e-10);
            best = best.max(v);
        }
        assert!((best - primal(1, &pen, &claim)).abs() < 1e-3);
    }

    #[test]
    fn constant_claim_duals() {
        let claim = Claim::constant(7.0);
        let pen = Penalty::quadratic(0.5).unwrap();
        let params = market(2);
        let v = dual_objective(&params, &TreeMeasure::crr(&params), &pen, &claim).unwrap();
        assert!((v.finite().unwrap() - 7.0).abs() < 1e-12);
        let rep = dual_brute_force(&params, &pen, &claim, 1e-3).unwrap();
        assert!((rep.value - 7.0).abs() < 1e-9);
        let opts = AscentOptions { steps: 200, ..Default::default() };
        let rep = dual_ascent_tree(&params, &pen, &claim, Some(&TreeMeasure::new(vec![vec![0.8], vec![0.3, 0.6]]).unwrap()), &opts).unwrap();
        assert!((rep.value - 7.0).abs() < 1e-6, "{}", rep.value);
    }

    #[test]
    fn frictionless_brute_force_is_crr() {
        let params = market(1);
        let claim = Claim::call(100.0);
        let rep = dual_brute_force(&params, &Penalty::zero(), &claim, 1e-3).unwrap();
        let crr = primal(1, &Penalty::zero(), &claim);
        assert!((rep.value - crr).abs() < 1e-9);
        assert!((rep.q[0][0] - params.crr_probability()).abs() < 1e-9);
    }

    #[test]
    fn ascent_against_brute_force_and_primal() {
        let claim = Claim::call(100.0);
        let pen = Penalty::quadratic(0.5).unwrap();
        let brute = dual_brute_force(&market(3), &pen, &claim, 1e-3).unwrap();
        let rep = dual_ascent_tree(&market(3), &pen, &claim, None, &AscentOptions { steps: 2000, ..Default::default() }).unwrap();
        assert!((brute.value - rep.value).abs() / brute.value < 1e-3);
        let rep = dual_ascent_tree(&market(10), &pen, &claim, None, &AscentOptions { steps: 400, ..Default::default() }).unwrap();
        let p = primal(10, &pen, &claim);
        assert!(rep.value <= p + 1e-9);
        assert!((p - rep.value) / p < 1e-2, "gap {}", (p - rep.value) / p);
    }

    #[test]
    fn uniform_measure_weights_and_empty_subtrees() {
        let n = 3;
        let m = TreeMeasure::<f64>::new((0..n).map(|k| vec![0.5; 1 << k]).collect()).unwrap();
        let phi = phi_from_measure(&m);
        assert!(phi.levels()[n].iter().all(|p| (*p - 0.125).abs() < 1e-15));
        // no mass below the down-up node: its penalty term drops out
        let params = market(3);
        let pen = Penalty::quadratic(0.5).unwrap();
        let claim = Claim::call(100.0);
        let phi = PhiWeights::from_terminal(vec![0.1, 0.15, 0.0, 0.0, 0.2, 0.1, 0.25, 0.2]).unwrap();
        let v = dual_objective_phi(&params, &phi, &pen, &claim).unwrap().finite().unwrap();
        let m = measure_from_phi(&phi);
        assert_eq!(m.q()[2][1], 0.5);
        let w = dual_objective(&params, &m, &pen, &claim).unwrap().finite().unwrap();
        assert!((v - w).abs() < 1e-10);
        assert!(PhiWeights::new(vec![vec![1.0], vec![-0.1, 1.1]]).is_err());
    }

    #[test]
    fn kusuoka_zero_control_is_crr() {
        let params = market(8);
        let km = kusuoka_measure(&params, &Penalty::quadratic(1.0).unwrap(), &Claim::call(100.0), &KappaProcess::constant(8, 0.0)).unwrap();
        let p = params.crr_probability();
        assert!(km.q.iter().flatten().all(|q| (q - p).abs() < 1e-12));
        for k in 0..=8 {
            for s in 0..km.graph.width(k) {
                assert!((km.m[k][s] - km.graph.price(k, s)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kusuoka_band_holds() {
        let n = 64;
        let c = 0.1;
        let params = market(n);
        let km = kusuoka_measure(&params, &Penalty::truncated_zero(c).unwrap(), &Claim::call(100.0), &KappaProcess::constant(n, 0.05)).unwrap();
        let ev = evaluate(&km.graph, &km.q).unwrap();
        let root_n = (n as f64).sqrt();
        for k in 0..=n {
            for s in 0..km.graph.width(k) {
                if ev.reach[k][s] > 0.0 {
                    let price = km.graph.price(k, s);
                    assert!((km.m[k][s] - price).abs() <= c / root_n * price * 1.05);
                }
            }
        }
        assert!(ev.value.is_finite());
        assert!(matches!(
            kusuoka_lower_bound(&params, &Penalty::truncated_zero(c).unwrap(), &Claim::call(100.0), 0.2),
            Err(Error::KappaBounds(_))
        ));
        assert!(matches!(
            kusuoka_measure(&market(1), &Penalty::zero(), &Claim::call(100.0), &KappaProcess::constant(1, 3.0)),
            Err(Error::ProbabilityOutOfRange { .. }) | Ok(_)
        ));
    }

    #[test]
    fn kusuoka_small_n_is_refused() {
        let f = |k: usize, _level: i64| if k == 2 { 0.0 } else { 2.0 };
        let kappa = KappaProcess::lattice_from_fn(2, 2.0, f);
        let r = kusuoka_measure(&market(2), &Penalty::zero(), &Claim::call(100.0), &kappa);
        assert!(matches!(r, Err(Error::ProbabilityOutOfRange { .. })));
    }

    #[test]
    fn weak_duality_on_random_measures() {
        let claim = Claim::call(100.0);
        let pens = [Penalty::quadratic(0.5).unwrap(), Penalty::truncated_zero(0.1).unwrap(), Penalty::truncated_quadratic(0.5, 0.25).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for pen in &pens {
            for n in 1..=8 {
                let params = market(n);
                let p = primal(n, pen, &claim);
                let crr = params.crr_probability();
                for _ in 0..42 {
                    let spread = rng.gen_range(0.0..0.5);
                    let m = TreeMeasure::random(n, (crr - spread).max(0.0), (crr + spread).min(1.0), &mut rng);
                    if let ExtReal::Finite(v) = dual_objective(&params, &m, pen, &claim).unwrap() {
                        assert!(v <= p + 1e-9, "{pen:?} n={n}: {v} > {p}");
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn phi_form_is_concave(seed in 0u64..1000, n in 1usize..6) {
            let params = market(n);
            let pen = Penalty::truncated_quadratic(0.5, 0.25).unwrap();
            let claim = Claim::call(100.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let crr = params.crr_probability();
            let a = phi_from_measure(&TreeMeasure::random(n, crr - 0.05, crr + 0.05, &mut rng));
            let b = phi_from_measure(&TreeMeasure::random(n, crr - 0.05, crr + 0.05, &mut rng));
            let mid = PhiWeights::from_terminal(a.levels()[n].iter().zip(&b.levels()[n]).map(|(x, y)| 0.5 * (x + y)).collect()).unwrap();
            let va = dual_objective_phi(&params, &a, &pen, &claim).unwrap();
            let vb = dual_objective_phi(&params, &b, &pen, &claim).unwrap();
            let vm = dual_objective_phi(&params, &mid, &pen, &claim).unwrap();
            if let (ExtReal::Finite(x), ExtReal::Finite(y)) = (va, vb) {
                prop_assert!(vm.finite().unwrap() >= 0.5 * (x + y) - 1e-10);
            }
        }

        #[test]
        fn finite_objective_means_band_feasible(seed in 0u64..1000, n in 1usize..7) {
            let c = 0.1;
            let params = market(n);
            let pen = Penalty::truncated_zero(c).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let crr = params.crr_probability();
            let m = TreeMeasure::random(n, crr - 0.03, crr + 0.03, &mut rng);
            let graph = DualGraph::tree(&params, &pen, &Claim::call(100.0)).unwrap();
            let ev = evaluate(&graph, m.q()).unwrap();
            if ev.value.is_finite() {
                for k in 0..n {
                    for s in 0..graph.width(k) {
                        let price = graph.price(k, s);
                        prop_assert!((ev.m[k][s] - price).abs() <= c * price / (n as f64).sqrt() * (1.0 + 1e-9));
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn phi_form_agrees_with_recursion(seed in 0u64..1000, n in 1usize..7, which in 0usize..3) {
            let params = market(n);
            let pen = [
                Penalty::quadratic(0.5).unwrap(),
                Penalty::truncated_quadratic(0.5, 0.25).unwrap(),
                Penalty::power(1.5).unwrap(),
            ][which].clone();
            let claim = Claim::call(100.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = TreeMeasure::random(n, 0.0, 1.0, &mut rng);
            let a = dual_objective(&params, &m, &pen, &claim).unwrap();
            let b = dual_objective_phi(&params, &phi_from_measure(&m), &pen, &claim).unwrap();
            match (a, b) {
                (ExtReal::Finite(x), ExtReal::Finite(y)) => prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs())),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}
