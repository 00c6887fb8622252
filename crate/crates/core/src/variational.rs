//! Parallel EM-MAP and mean-field updates on the dual model, their
//! tree-blocked variants, and naive mean-field on the primal model.
//!
//! The variational routines need duals whose messages are finite (the
//! binary factorization path); constraint-style duals are rejected.
//!
//! Mean-field states hold per-variable marginals `mu` and the aggregated
//! expected messages `xi = E[r(theta) | mu]`. Given `mu`, the best dual
//! factor is `p(theta | mu)`, so the joint objective
//! `KL(q(x) p(theta | mu) || p(x, theta))` is a function of `mu` alone.

use rand::Rng;
use rayon::prelude::*;

use crate::duality::{DualModel, FactorDual};
use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::model::{FactorId, Model, State};
use crate::oracle::{exact_dual_joint_capped, exact_log_z};
use crate::rng::{log_sum_exp, softmax_in_place, Domain, RngStreams};
use crate::sampling::{BlockPartition, PAR_GRAIN};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Joint `(x, theta)` states allowed for the enumerated objective.
pub const JOINT_KL_CAP: u64 = 1 << 20;

fn require_smooth(dual: &DualModel) -> Result<()> {
    match dual.duals().find(|(_, d)| !d.is_smooth()) {
        Some((id, _)) => Err(Error::Unsupported(format!(
            "factor {id} has a constraint-style dual; variational updates need finite messages"
        ))),
        None => Ok(()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unnormalized log posterior of each component given endpoint marginals.
fn component_logits(d: &FactorDual, mu_u: &[f64], mu_v: &[f64]) -> Vec<f64> {
    d.components()
        .iter()
        .map(|c| c.log_weight + dot(mu_u, &c.left) + dot(mu_v, &c.right))
        .collect()
}

fn map_vars<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if n >= PAR_GRAIN {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// `xi = E[r(theta) | mu]` summed onto each variable, over the dual
/// variables for which `include` holds.
pub fn expected_messages(dual: &DualModel, marginals: &[Vec<f64>], include: impl Fn(FactorId) -> bool + Sync) -> Vec<Vec<f64>> {
    let duals: Vec<(FactorId, &FactorDual)> = dual.duals().filter(|(id, _)| include(*id)).collect();
    let contribution = |&(_, d): &(FactorId, &FactorDual)| {
        let (u, v) = d.scope();
        let mut q = component_logits(d, &marginals[u], &marginals[v]);
        softmax_in_place(&mut q);
        let mut to_u = vec![0.0; marginals[u].len()];
        let mut to_v = vec![0.0; marginals[v].len()];
        for (c, &p) in d.components().iter().zip(&q) {
            for (t, l) in to_u.iter_mut().zip(&c.left) {
                *t += p * l;
            }
            for (t, r) in to_v.iter_mut().zip(&c.right) {
                *t += p * r;
            }
        }
        (u, v, to_u, to_v)
    };
    let parts: Vec<_> = if duals.len() >= PAR_GRAIN {
        duals.par_iter().map(contribution).collect()
    } else {
        duals.iter().map(contribution).collect()
    };
    let mut xi: Vec<Vec<f64>> = marginals.iter().map(|m| vec![0.0; m.len()]).collect();
    for (u, v, to_u, to_v) in parts {
        for (a, b) in xi[u].iter_mut().zip(&to_u) {
            *a += b;
        }
        for (a, b) in xi[v].iter_mut().zip(&to_v) {
            *a += b;
        }
    }
    xi
}

fn one_hot(model: &Model, x: &[usize]) -> Vec<Vec<f64>> {
    x.iter()
        .enumerate()
        .map(|(v, &s)| {
            let mut e = vec![0.0; model.cardinality(v)];
            e[s] = 1.0;
            e
        })
        .collect()
}

/// Index of the largest entry; ties go to the lower index.
fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in w.iter().enumerate().skip(1) {
        if x > w[best] {
            best = k;
        }
    }
    best
}

fn field(dual: &DualModel, xi: &[Vec<f64>], v: usize) -> Vec<f64> {
    dual.h_unary(v).iter().zip(&xi[v]).map(|(h, m)| h + m).collect()
}

fn not_retained(partition: Option<&BlockPartition>) -> impl Fn(FactorId) -> bool + Sync + '_ {
    move |id| partition.is_none_or(|p| !p.is_retained(id))
}

/// EM state for MAP inference.
#[derive(Debug, Clone, PartialEq)]
pub struct MapState {
    pub x: State,
    /// `E[r(theta) | x]` per variable.
    pub xi: Vec<Vec<f64>>,
}

impl MapState {
    /// State at `x` with consistent expected messages.
    pub fn new(dual: &DualModel, x: State) -> Result<Self> {
        Self::blocked(dual, x, None)
    }

    /// Start from the per-variable argmax of the model unaries.
    pub fn from_unaries(dual: &DualModel) -> Result<Self> {
        let m = dual.model();
        let x = (0..m.num_variables()).map(|v| argmax(m.unary(v))).collect();
        Self::new(dual, x)
    }

    /// Like [`MapState::new`] with messages only from dual variables
    /// outside the retained forest.
    pub fn blocked(dual: &DualModel, x: State, partition: Option<&BlockPartition>) -> Result<Self> {
        require_smooth(dual)?;
        dual.model().validate_state(&x)?;
        let xi = expected_messages(dual, &one_hot(dual.model(), &x), not_retained(partition));
        Ok(Self { x, xi })
    }

    /// `log p~(x)`.
    pub fn objective(&self, dual: &DualModel) -> f64 {
        dual.model().energy_unchecked(&self.x)
    }
}

/// One EM step: `x = argmax h(x) e^<s(x), xi>` per variable, then
/// `xi = E[r(theta) | x]`.
pub fn em_map_step(dual: &DualModel, state: &MapState) -> Result<MapState> {
    require_smooth(dual)?;
    let x = map_vars(dual.num_variables(), |v| argmax(&field(dual, &state.xi, v)));
    let xi = expected_messages(dual, &one_hot(dual.model(), &x), |_| true);
    Ok(MapState { x, xi })
}

/// EM step with the retained forest maximized jointly by max-product.
pub fn tree_blocked_map_step(dual: &DualModel, state: &MapState, partition: &BlockPartition) -> Result<MapState> {
    require_smooth(dual)?;
    let model = dual.model();
    let forest = Forest::build(model, partition.retained_ids())?;
    let node: Vec<Vec<f64>> = (0..model.num_variables()).map(|v| field(dual, &state.xi, v)).collect();
    let x = forest.max_product(&node, |id, a, b| dual.dual(id).unwrap().log_g(a, b));
    let xi = expected_messages(dual, &one_hot(model, &x), not_retained(Some(partition)));
    Ok(MapState { x, xi })
}

/// Result of an iterated MAP or mean-field run.
#[derive(Debug, Clone)]
pub struct Run<S> {
    pub state: S,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm change of the last step (0 or 1 for MAP runs).
    pub final_delta: f64,
    /// Objective after each iterate, starting with the initial state.
    pub objective: Vec<f64>,
}

fn run_map(dual: &DualModel, init: MapState, max_iter: usize, partition: Option<&BlockPartition>) -> Result<Run<MapState>> {
    let mut state = init;
    let mut objective = vec![state.objective(dual)];
    for it in 1..=max_iter {
        let next = match partition {
            Some(p) => tree_blocked_map_step(dual, &state, p)?,
            None => em_map_step(dual, &state)?,
        };
        let same = next.x == state.x;
        state = next;
        objective.push(state.objective(dual));
        if same {
            return Ok(Run {
                state,
                iterations: it,
                converged: true,
                final_delta: 0.0,
                objective,
            });
        }
    }
    Ok(Run {
        state,
        iterations: max_iter,
        converged: false,
        final_delta: 1.0,
        objective,
    })
}

/// Iterate [`em_map_step`] until `x` stops changing.
pub fn run_em_map(dual: &DualModel, init: MapState, max_iter: usize) -> Result<Run<MapState>> {
    run_map(dual, init, max_iter, None)
}

/// Iterate [`tree_blocked_map_step`] with a fixed partition.
pub fn run_tree_map(dual: &DualModel, init: MapState, partition: &BlockPartition, max_iter: usize) -> Result<Run<MapState>> {
    run_map(dual, init, max_iter, Some(partition))
}

/// Mean-field state: factorized `q(x)` and consistent expected messages.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    pub marginals: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
}

impl MeanFieldState {
    /// Uniform marginals (`eta = 0.5` for binary variables).
    pub fn new(dual: &DualModel) -> Result<Self> {
        let m = dual.model();
        let marginals = (0..m.num_variables())
            .map(|v| vec![1.0 / m.cardinality(v) as f64; m.cardinality(v)])
            .collect();
        Self::from_marginals(dual, marginals)
    }

    pub fn from_marginals(dual: &DualModel, marginals: Vec<Vec<f64>>) -> Result<Self> {
        require_smooth(dual)?;
        let xi = expected_messages(dual, &marginals, |_| true);
        Ok(Self { marginals, xi })
    }

    /// `E[x_v]` per variable.
    pub fn eta(&self) -> Vec<f64> {
        self.marginals
            .iter()
            .map(|m| m.iter().enumerate().map(|(k, p)| k as f64 * p).sum())
            .collect()
    }
}

/// One parallel mean-field step. `damping` in `[0, 1)` mixes the previous
/// marginals into the update.
pub fn mean_field_step(dual: &DualModel, state: &MeanFieldState, damping: f64) -> Result<MeanFieldState> {
    require_smooth(dual)?;
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::InvalidArgument(format!("damping {damping} outside [0, 1)")));
    }
    let marginals = map_vars(dual.num_variables(), |v| {
        let mut m = field(dual, &state.xi, v);
        softmax_in_place(&mut m);
        if damping > 0.0 {
            for (a, b) in m.iter_mut().zip(&state.marginals[v]) {
                *a = (1.0 - damping) * *a + damping * b;
            }
        }
        m
    });
    let xi = expected_messages(dual, &marginals, |_| true);
    Ok(MeanFieldState { marginals, xi })
}

fn entropy_term(m: &[f64]) -> f64 {
    m.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum()
}

/// `KL(q(x) p(theta | mu) || p(x, theta)) - log Z` in closed form.
pub fn mean_field_free_energy(dual: &DualModel, marginals: &[Vec<f64>]) -> f64 {
    let unary: f64 = marginals
        .iter()
        .enumerate()
        .map(|(v, m)| entropy_term(m) - dot(m, dual.h_unary(v)))
        .sum();
    let pair: f64 = dual
        .duals()
        .map(|(_, d)| {
            let (u, v) = d.scope();
            log_sum_exp(&component_logits(d, &marginals[u], &marginals[v]))
        })
        .sum();
    unary - pair
}

/// Exact joint objective `KL(q(x) p(theta | mu) || p(x, theta))`.
pub fn joint_kl_objective(dual: &DualModel, state: &MeanFieldState) -> Result<f64> {
    require_smooth(dual)?;
    Ok(mean_field_free_energy(dual, &state.marginals) + exact_log_z(dual.model())?)
}

/// The same objective by enumerating every `(x, theta)`.
pub fn joint_kl_enumerated(dual: &DualModel, state: &MeanFieldState) -> Result<f64> {
    require_smooth(dual)?;
    let joint = exact_dual_joint_capped(dual, JOINT_KL_CAP)?;
    let q_theta: Vec<(FactorId, Vec<f64>)> = dual
        .duals()
        .map(|(id, d)| {
            let (u, v) = d.scope();
            let mut q = component_logits(d, &state.marginals[u], &state.marginals[v]);
            softmax_in_place(&mut q);
            (id, q)
        })
        .collect();
    let nt = joint.n_theta();
    let mut kl = 0.0;
    for (xi, x) in joint.x_states.iter().enumerate() {
        let qx: f64 = x.iter().enumerate().map(|(v, &s)| state.marginals[v][s]).product();
        if qx == 0.0 {
            continue;
        }
        for (ti, t) in joint.theta_states.iter().enumerate() {
            let qt: f64 = q_theta.iter().map(|(id, q)| q[t[id.index()]]).product();
            if qt == 0.0 {
                continue;
            }
            kl += qx * qt * ((qx * qt).ln() - joint.log_joint[xi * nt + ti]);
        }
    }
    Ok(kl)
}

/// `KL(q || p(x))` for a fully factorized `q` given `log Z`.
pub fn product_kl(model: &Model, marginals: &[Vec<f64>], log_z: f64) -> f64 {
    naive_free_energy(model, marginals) + log_z
}

/// `KL(q || p(x)) - log Z` for a fully factorized `q`.
pub fn naive_free_energy(model: &Model, marginals: &[Vec<f64>]) -> f64 {
    let unary: f64 = marginals
        .iter()
        .enumerate()
        .map(|(v, m)| entropy_term(m) - dot(m, model.unary(v)))
        .sum();
    let pair: f64 = model
        .factors()
        .map(|f| {
            let (u, v) = f.scope();
            let mut e = 0.0;
            for (a, pa) in marginals[u].iter().enumerate() {
                for (b, pb) in marginals[v].iter().enumerate() {
                    e += pa * pb * f.log_value(a, b);
                }
            }
            e
        })
        .sum();
    unary - pair
}

fn max_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Convergence settings for mean-field runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MeanFieldOptions {
    fn default() -> Self {
        Self {
            damping: 0.0,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Iterate [`mean_field_step`] until the max-norm change of the marginals
/// drops below `tol`. The objective column is the free energy.
pub fn run_mean_field(dual: &DualModel, init: MeanFieldState, opts: MeanFieldOptions) -> Result<Run<MeanFieldState>> {
    let mut state = init;
    let mut objective = vec![mean_field_free_energy(dual, &state.marginals)];
    let mut delta = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let next = mean_field_step(dual, &state, opts.damping)?;
        delta = max_change(&next.marginals, &state.marginals);
        state = next;
        objective.push(mean_field_free_energy(dual, &state.marginals));
        if delta < opts.tol {
            return Ok(Run {
                state,
                iterations: it,
                converged: true,
                final_delta: delta,
                objective,
            });
        }
    }
    Ok(Run {
        state,
        iterations: opts.max_iter,
        converged: false,
        final_delta: delta,
        objective,
    })
}

/// Tree-structured mean-field state: `q(x)` is the forest distribution
/// with node potentials `h + field`, `marginals` are its node marginals
/// and `xi` the expected messages of the dualized factors under them.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMeanFieldState {
    pub field: Vec<Vec<f64>>,
    pub marginals: Vec<Vec<f64>>,
    pub log_z_q: f64,
    pub xi: Vec<Vec<f64>>,
}

impl TreeMeanFieldState {
    /// `q(x)` from a zero field.
    pub fn new(dual: &DualModel, partition: &BlockPartition) -> Result<Self> {
        require_smooth(dual)?;
        let zero: Vec<Vec<f64>> = (0..dual.num_variables()).map(|v| vec![0.0; dual.model().cardinality(v)]).collect();
        Self::with_field(dual, partition, zero)
    }

    fn with_field(dual: &DualModel, partition: &BlockPartition, field_: Vec<Vec<f64>>) -> Result<Self> {
        let model = dual.model();
        let forest = Forest::build(model, partition.retained_ids())?;
        let node: Vec<Vec<f64>> = (0..model.num_variables()).map(|v| field(dual, &field_, v)).collect();
        let res = forest.sum_product(&node, |id, a, b| dual.dual(id).unwrap().log_g(a, b));
        let xi = expected_messages(dual, &res.marginals, not_retained(Some(partition)));
        Ok(Self {
            field: field_,
            marginals: res.marginals,
            log_z_q: res.log_z,
            xi,
        })
    }

    /// `KL(q(x) p(theta_1 | mu) || p(x, theta_1)) - log Z`.
    pub fn free_energy(&self, dual: &DualModel, partition: &BlockPartition) -> f64 {
        let linear: f64 = self.marginals.iter().zip(&self.field).map(|(m, f)| dot(m, f)).sum();
        let pair: f64 = dual
            .duals()
            .filter(|(id, _)| !partition.is_retained(*id))
            .map(|(_, d)| {
                let (u, v) = d.scope();
                log_sum_exp(&component_logits(d, &self.marginals[u], &self.marginals[v]))
            })
            .sum();
        linear - self.log_z_q - pair
    }
}

/// Exact sum-product on the retained forest with the dualized factors'
/// expected messages as extra unaries, then the message update.
pub fn tree_blocked_mf_step(dual: &DualModel, state: &TreeMeanFieldState, partition: &BlockPartition) -> Result<TreeMeanFieldState> {
    require_smooth(dual)?;
    TreeMeanFieldState::with_field(dual, partition, state.xi.clone())
}

pub fn run_tree_mean_field(
    dual: &DualModel,
    init: TreeMeanFieldState,
    partition: &BlockPartition,
    opts: MeanFieldOptions,
) -> Result<Run<TreeMeanFieldState>> {
    let mut state = init;
    let mut objective = vec![state.free_energy(dual, partition)];
    let mut delta = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let next = tree_blocked_mf_step(dual, &state, partition)?;
        delta = max_change(&next.marginals, &state.marginals);
        state = next;
        objective.push(state.free_energy(dual, partition));
        if delta < opts.tol {
            return Ok(Run {
                state,
                iterations: it,
                converged: true,
                final_delta: delta,
                objective,
            });
        }
    }
    Ok(Run {
        state,
        iterations: opts.max_iter,
        converged: false,
        final_delta: delta,
        objective,
    })
}

/// Standard coordinate-ascent naive mean-field on `p(x)`, updating
/// variables in index order. Returns the marginals and the sweep count.
pub fn refine_naive_mean_field(model: &Model, init: Vec<Vec<f64>>, tol: f64, max_iter: usize) -> (Vec<Vec<f64>>, usize) {
    let mut mu = init;
    for it in 1..=max_iter {
        let mut delta: f64 = 0.0;
        for v in 0..model.num_variables() {
            let mut w = model.unary(v).to_vec();
            for &fid in model.adjacency(v) {
                let f = model.factor(fid).unwrap();
                let (other, is_row) = f.other(v);
                for (k, wk) in w.iter_mut().enumerate() {
                    *wk += mu[other]
                        .iter()
                        .enumerate()
                        .map(|(b, p)| p * f.log_value_from(is_row, k, b))
                        .sum::<f64>();
                }
            }
            softmax_in_place(&mut w);
            delta = delta.max(w.iter().zip(&mu[v]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            mu[v] = w;
        }
        if delta < tol {
            return (mu, it);
        }
    }
    (mu, max_iter)
}

/// Best-effort `min_q KL(q || p(x))` over fully factorized `q` by
/// coordinate descent from `restarts` random starts plus every supplied
/// start. Returns the smallest KL found.
pub fn min_product_kl(model: &Model, log_z: f64, restarts: usize, seed: u64, starts: &[Vec<Vec<f64>>]) -> f64 {
    let streams = RngStreams::new(seed);
    let mut best = f64::INFINITY;
    let mut candidates: Vec<Vec<Vec<f64>>> = starts.to_vec();
    for r in 0..restarts {
        let mut rng = streams.stream(Domain::Restart, r, 0);
        candidates.push(
            (0..model.num_variables())
                .map(|v| {
                    let mut w: Vec<f64> = (0..model.cardinality(v)).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();
                    softmax_in_place(&mut w);
                    w
                })
                .collect(),
        );
    }
    for c in candidates {
        let start_kl = product_kl(model, &c, log_z);
        let (mu, _) = refine_naive_mean_field(model, c, 1e-12, DEFAULT_MAX_ITER);
        best = best.min(start_kl).min(product_kl(model, &mu, log_z));
    }
    best.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::duality::dualize_model;
    use crate::model::{build_grid_ising, build_random_graph, ising_table, Table};
    use crate::oracle::exact_map;
    use crate::sampling::random_spanning_forest;

    #[test]
    fn zero_coupling_map_is_immediate() {
        let mut m = Model::binary(3);
        m.set_unary(0, vec![0.0, 0.4]).unwrap();
        m.set_unary(2, vec![0.0, -1.0]).unwrap();
        m.add_factor(0, 1, Table::from_rows([[1.0, 1.0], [1.0, 1.0]])).unwrap();
        let d = dualize_model(m).unwrap();
        let run = run_em_map(&d, MapState::new(&d, vec![0, 1, 1]).unwrap(), 100).unwrap();
        assert_eq!(run.state.x, vec![1, 0, 0]);
        assert!(run.iterations <= 2);
    }

    #[test]
    fn chain_map_reaches_all_ones() {
        let mut m = Model::binary(5);
        m.set_unary(2, vec![0.0, 1.0]).unwrap();
        for v in 0..4 {
            m.add_factor(v, v + 1, ising_table(2.0)).unwrap();
        }
        let d = dualize_model(m.clone()).unwrap();
        let run = run_em_map(&d, MapState::new(&d, vec![1; 5]).unwrap(), 100).unwrap();
        assert_eq!(run.state.x, exact_map(&m).unwrap());
        assert_eq!(run.state.x, vec![1; 5]);
    }

    #[test]
    fn em_is_monotone() {
        for seed in 0..20 {
            let m = build_random_graph(7, 2, seed).unwrap();
            let d = dualize_model(m).unwrap();
            let run = run_em_map(&d, MapState::from_unaries(&d).unwrap(), 1000).unwrap();
            for w in run.objective.windows(2) {
                assert!(w[1] >= w[0] - 1e-12);
            }
        }
    }

    #[test]
    fn mean_field_descends_and_bounds_primal_kl() {
        for seed in 0..10 {
            let m = build_random_graph(6, 2, seed).unwrap();
            let d = dualize_model(m.clone()).unwrap();
            let log_z = exact_log_z(&m).unwrap();
            let mut s = MeanFieldState::new(&d).unwrap();
            let mut prev = joint_kl_objective(&d, &s).unwrap();
            for _ in 0..50 {
                s = mean_field_step(&d, &s, 0.0).unwrap();
                let j = joint_kl_objective(&d, &s).unwrap();
                assert!(j <= prev + 1e-9);
                assert!(j >= product_kl(&m, &s.marginals, log_z) - 1e-9);
                prev = j;
            }
            let enumerated = joint_kl_enumerated(&d, &s).unwrap();
            assert!((enumerated - prev).abs() < 1e-9, "{enumerated} vs {prev}");
        }
    }

    #[test]
    fn fixed_point_equations_hold() {
        let m = build_grid_ising(3, 3, 0.2, Some(&[0.1, -0.2, 0.3, 0.0, 0.1, -0.1, 0.2, 0.0, -0.3])).unwrap();
        let d = dualize_model(m).unwrap();
        let run = run_mean_field(&d, MeanFieldState::new(&d).unwrap(), MeanFieldOptions::default()).unwrap();
        assert!(run.converged);
        let s = &run.state;
        for v in 0..9 {
            let mut want = field(&d, &s.xi, v);
            softmax_in_place(&mut want);
            assert!(max_change(&[want], &[s.marginals[v].clone()]) < 1e-8);
        }
        let xi = expected_messages(&d, &s.marginals, |_| true);
        assert!(max_change(&xi, &s.xi) < 1e-12);
    }

    #[test]
    fn damping_reaches_same_objective() {
        let m = build_grid_ising(3, 3, 0.1, Some(&[0.1, -0.2, 0.3, 0.0, 0.1, -0.1, 0.2, 0.0, -0.3])).unwrap();
        let d = dualize_model(m).unwrap();
        let a = run_mean_field(&d, MeanFieldState::new(&d).unwrap(), MeanFieldOptions::default()).unwrap();
        let opts = MeanFieldOptions {
            damping: 0.5,
            ..Default::default()
        };
        let b = run_mean_field(&d, MeanFieldState::new(&d).unwrap(), opts).unwrap();
        assert!((a.objective.last().unwrap() - b.objective.last().unwrap()).abs() < 1e-6);
    }

    #[test]
    fn tree_map_is_exact_on_trees() {
        let mut m = Model::binary(6);
        for (v, a) in [0.3, -0.5, 0.0, 0.8, -0.2, 0.1].iter().enumerate() {
            m.set_unary(v, vec![0.0, *a]).unwrap();
        }
        m.add_factor(0, 1, ising_table(1.0)).unwrap();
        m.add_factor(1, 2, Table::from_rows([[1.0, 2.0], [0.5, 3.0]])).unwrap();
        m.add_factor(1, 3, ising_table(-0.4)).unwrap();
        m.add_factor(3, 4, ising_table(0.7)).unwrap();
        m.add_factor(4, 5, Table::from_rows([[2.0, 1.0], [1.0, 0.2]])).unwrap();
        let d = dualize_model(m.clone()).unwrap();
        let p = random_spanning_forest(&m, &RngStreams::new(0), 0);
        assert_eq!(p.retained_ids().len(), 5);
        let init = MapState::blocked(&d, vec![0; 6], Some(&p)).unwrap();
        let next = tree_blocked_map_step(&d, &init, &p).unwrap();
        assert_eq!(next.x, exact_map(&m).unwrap());
    }

    #[test]
    fn empty_partition_reduces_to_plain_steps() {
        let m = build_random_graph(6, 2, 3).unwrap();
        let d = dualize_model(m.clone()).unwrap();
        let p = BlockPartition::empty(&m);
        let s = MapState::new(&d, vec![0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(tree_blocked_map_step(&d, &s, &p).unwrap(), em_map_step(&d, &s).unwrap());

        let mf = MeanFieldState::new(&d).unwrap();
        let tree = TreeMeanFieldState::with_field(&d, &p, mf.xi.clone()).unwrap();
        let plain = mean_field_step(&d, &mf, 0.0).unwrap();
        assert!(max_change(&tree.marginals, &plain.marginals) < 1e-14);
        assert!((tree.free_energy(&d, &p) - mean_field_free_energy(&d, &plain.marginals)).abs() < 1e-12);
    }

    #[test]
    fn tree_mean_field_descends() {
        let m = build_grid_ising(3, 3, 0.5, Some(&[0.1, -0.2, 0.3, 0.0, 0.1, -0.1, 0.2, 0.0, -0.3])).unwrap();
        let d = dualize_model(m.clone()).unwrap();
        let p = random_spanning_forest(&m, &RngStreams::new(4), 0);
        let run = run_tree_mean_field(&d, TreeMeanFieldState::new(&d, &p).unwrap(), &p, MeanFieldOptions::default()).unwrap();
        for w in run.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(run.converged);
    }

    #[test]
    fn naive_mean_field_refinement_lowers_kl() {
        let m = build_random_graph(6, 2, 9).unwrap();
        let log_z = exact_log_z(&m).unwrap();
        let uniform = vec![vec![0.5, 0.5]; 6];
        let before = product_kl(&m, &uniform, log_z);
        let (mu, _) = refine_naive_mean_field(&m, uniform, 1e-10, 1000);
        assert!(product_kl(&m, &mu, log_z) <= before);
        assert!(min_product_kl(&m, log_z, 10, 1, &[]) >= 0.0);
    }

    #[test]
    fn rejects_constraint_duals() {
        let m = build_grid_ising(2, 2, 0.5, None).unwrap();
        let d = DualModel::new(m, crate::duality::Strategy::SwendsenWang).unwrap();
        assert!(matches!(MeanFieldState::new(&d), Err(Error::Unsupported(_))));
    }
}
