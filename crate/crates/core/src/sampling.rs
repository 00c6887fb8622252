//! Gibbs samplers: sequential single-site, parallel primal-dual,
//! Swendsen-Wang clusters and blocked forests.
//!
//! Every draw comes from a stream of [`RngStreams`] keyed by the entity it
//! updates and the sweep index, so trajectories do not depend on the
//! number of worker threads.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::duality::{DualKind, DualModel, DualState, Strategy};
use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::model::{FactorId, Model, State};
use crate::rng::{sample_log_weights, softmax_in_place, Domain, RngStreams};
use crate::union_find::UnionFind;

/// Entity count above which half-steps are split across rayon workers.
pub const PAR_GRAIN: usize = 2048;

/// Default number of discarded sweeps: 10% of the requested sweeps.
pub fn default_burn_in(sweeps: usize) -> usize {
    sweeps / 10
}

/// Per-sweep summary statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepStats {
    /// `log p~(x)` of the primal model.
    pub energy: f64,
    /// Mean state index over variables.
    pub magnetization: f64,
}

impl SweepStats {
    pub fn of(model: &Model, x: &[usize]) -> Self {
        let n = x.len().max(1) as f64;
        Self {
            energy: model.energy_unchecked(x),
            magnetization: x.iter().sum::<usize>() as f64 / n,
        }
    }
}

/// Joint state after a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub state: State,
    pub dual: DualState,
    pub stats: SweepStats,
}

fn with_buf<R>(k: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    if k <= 8 {
        let mut a = [0.0; 8];
        f(&mut a[..k])
    } else {
        let mut v = vec![0.0; k];
        f(&mut v)
    }
}

fn draw(log_w: &[f64], u: f64, what: &str, entity: usize) -> usize {
    sample_log_weights(log_w, u).unwrap_or_else(|| panic!("{what} {entity} has an empty conditional support"))
}

fn check_state(model: &Model, x: &[usize]) -> Result<()> {
    model.validate_state(x)
}

/// Full conditional of variable `v` given the rest of `x`.
pub fn conditional_prob(model: &Model, x: &[usize], v: usize) -> Result<Vec<f64>> {
    if v >= model.num_variables() {
        return Err(Error::UnknownVariable(v));
    }
    check_state(model, x)?;
    let mut p: Vec<f64> = (0..model.cardinality(v)).map(|s| model.local_energy(x, v, s)).collect();
    softmax_in_place(&mut p);
    Ok(p)
}

#[inline]
fn resample_site(model: &Model, x: &mut [usize], v: usize, u: f64) {
    x[v] = with_buf(model.cardinality(v), |w| {
        for (s, slot) in w.iter_mut().enumerate() {
            *slot = model.local_energy(x, v, s);
        }
        draw(w, u, "variable", v)
    });
}

/// One systematic-scan sweep over variables in index order.
pub fn sequential_gibbs_sweep(model: &Model, x: &mut State, streams: &RngStreams, sweep: u64) {
    for v in 0..model.num_variables() {
        resample_site(model, x, v, streams.uniform(Domain::Primal, v, sweep));
    }
}

/// A single-site update at global update index `step`; the variable is
/// `step mod n`.
pub fn single_site_update(model: &Model, x: &mut State, streams: &RngStreams, step: u64) {
    let n = model.num_variables();
    if n == 0 {
        return;
    }
    let v = (step % n as u64) as usize;
    resample_site(model, x, v, streams.uniform(Domain::Primal, v, step));
}

/// Log weights of `p(x_v | theta)` before cluster constraints: `log h_v`
/// plus every incident message selected by `theta`.
pub(crate) fn primal_logits(dual: &DualModel, theta: &[usize], v: usize, out: &mut [f64]) {
    out.copy_from_slice(dual.h_unary(v));
    let slots = dual.dual_slots();
    for &fid in dual.model().adjacency(v) {
        let d = slots[fid.index()].as_ref().expect("dual out of sync");
        let msg = d.message(theta[fid.index()], d.scope().0 == v);
        for (o, m) in out.iter_mut().zip(msg) {
            *o += m;
        }
    }
}

/// Variables tied together by active equality components, each group
/// sorted and the groups ordered by smallest member.
pub(crate) fn clusters(dual: &DualModel, theta: &[usize]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(dual.num_variables());
    for (id, d) in dual.duals() {
        if d.components()[theta[id.index()]].equality {
            let (u, v) = d.scope();
            uf.union(u, v);
        }
    }
    uf.groups()
}

/// Summed log weights of each cluster over the shared state.
pub(crate) fn cluster_log_weights(dual: &DualModel, theta: &[usize]) -> Vec<(Vec<usize>, Vec<f64>)> {
    clusters(dual, theta)
        .into_iter()
        .map(|group| {
            let k = dual.model().cardinality(group[0]);
            let mut total = vec![0.0; k];
            let mut buf = vec![0.0; k];
            for &v in &group {
                primal_logits(dual, theta, v, &mut buf);
                for (t, b) in total.iter_mut().zip(&buf) {
                    *t += b;
                }
            }
            (group, total)
        })
        .collect()
}

/// Primal half-step: overwrite `x` with a draw from `p(x | theta)`.
///
/// The previous contents of `x` are never read. Without equality bonds
/// every variable is drawn independently from stream `(domain, v, step)`;
/// otherwise each cluster is drawn from the stream of its smallest member.
pub fn sample_primal(dual: &DualModel, theta: &[usize], streams: &RngStreams, domain: Domain, step: u64, x: &mut [usize]) {
    let n = dual.num_variables();
    debug_assert_eq!(x.len(), n);
    if !dual.has_equality() {
        let site = |v: usize, slot: &mut usize| {
            *slot = with_buf(dual.model().cardinality(v), |w| {
                primal_logits(dual, theta, v, w);
                draw(w, streams.uniform(domain, v, step), "variable", v)
            });
        };
        if n >= PAR_GRAIN {
            x.par_iter_mut().enumerate().for_each(|(v, slot)| site(v, slot));
        } else {
            x.iter_mut().enumerate().for_each(|(v, slot)| site(v, slot));
        }
        return;
    }
    for (group, log_w) in cluster_log_weights(dual, theta) {
        let s = draw(&log_w, streams.uniform(domain, group[0], step), "cluster of variable", group[0]);
        for v in group {
            x[v] = s;
        }
    }
}

/// Dual half-step: overwrite every live entry of `theta` with a draw from
/// `p(theta_i | x)` using stream `(domain, i, step)`.
pub fn sample_dual(dual: &DualModel, x: &[usize], streams: &RngStreams, domain: Domain, step: u64, theta: &mut DualState) {
    if theta.len() < dual.factor_capacity() {
        theta.resize(dual.factor_capacity(), 0);
    }
    let slots = dual.dual_slots();
    let site = |i: usize, slot: &mut usize| {
        let Some(d) = slots[i].as_ref() else { return };
        let (u, v) = d.scope();
        let (a, b) = (x[u], x[v]);
        *slot = with_buf(d.cardinality(), |w| {
            for (k, lw) in w.iter_mut().enumerate() {
                *lw = d.log_component(k, a, b);
            }
            draw(w, streams.uniform(domain, i, step), "dual variable", i)
        });
    };
    let live = &mut theta[..slots.len()];
    if slots.len() >= PAR_GRAIN {
        live.par_iter_mut().enumerate().for_each(|(i, slot)| site(i, slot));
    } else {
        live.iter_mut().enumerate().for_each(|(i, slot)| site(i, slot));
    }
}

/// Uniform random primal state.
pub fn initial_state(model: &Model, streams: &RngStreams) -> State {
    (0..model.num_variables())
        .map(|v| {
            let k = model.cardinality(v);
            ((streams.uniform(Domain::InitPrimal, v, 0) * k as f64) as usize).min(k - 1)
        })
        .collect()
}

/// Initial dual state drawn from `p(theta | x)`.
pub fn initial_dual(dual: &DualModel, x: &[usize], streams: &RngStreams) -> DualState {
    let mut theta = dual.zero_dual_state();
    sample_dual(dual, x, streams, Domain::InitDual, 0, &mut theta);
    theta
}

/// Primal-dual sweep: `x ~ p(x | theta)` then `theta ~ p(theta | x)`.
pub fn pd_sweep(dual: &DualModel, x: &mut State, theta: &mut DualState, streams: &RngStreams, sweep: u64) -> SweepStats {
    if theta.len() < dual.factor_capacity() {
        theta.resize(dual.factor_capacity(), 0);
    }
    sample_primal(dual, theta, streams, Domain::Primal, sweep, x);
    sample_dual(dual, x, streams, Domain::Dual, sweep, theta);
    SweepStats::of(dual.model(), x)
}

fn check_swendsen_wang(dual: &DualModel) -> Result<()> {
    for (id, d) in dual.duals() {
        if !matches!(d.kind(), DualKind::SwendsenWang { .. }) {
            return Err(Error::NotSwendsenWang(id));
        }
    }
    Ok(())
}

/// Swendsen-Wang sweep on a model dualized with
/// [`Strategy::SwendsenWang`]: bonds given `x`, then one joint draw per
/// bonded cluster. `theta` holds the bonds on return.
pub fn sw_sweep(dual: &DualModel, x: &mut State, theta: &mut DualState, streams: &RngStreams, sweep: u64) -> Result<SweepStats> {
    check_swendsen_wang(dual)?;
    sample_dual(dual, x, streams, Domain::Dual, sweep, theta);
    sample_primal(dual, theta, streams, Domain::Primal, sweep, x);
    Ok(SweepStats::of(dual.model(), x))
}

/// Factors whose dual variables are integrated out for one blocked sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    /// Indexed by factor id; `true` for factors kept as exact edges.
    pub retained: Vec<bool>,
}

impl BlockPartition {
    /// No retained factors: every dual variable is used.
    pub fn empty(model: &Model) -> Self {
        Self {
            retained: vec![false; model.factor_capacity()],
        }
    }

    pub fn from_ids(model: &Model, ids: &[FactorId]) -> Self {
        let mut p = Self::empty(model);
        for id in ids {
            p.retained[id.index()] = true;
        }
        p
    }

    pub fn is_retained(&self, id: FactorId) -> bool {
        self.retained.get(id.index()).copied().unwrap_or(false)
    }

    pub fn retained_ids(&self) -> Vec<FactorId> {
        self.retained
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(FactorId(i)))
            .collect()
    }
}

/// Kruskal over a uniformly shuffled factor order: a maximal spanning
/// forest of retained factors.
pub fn random_spanning_forest(model: &Model, streams: &RngStreams, step: u64) -> BlockPartition {
    let mut ids: Vec<FactorId> = model.factors().map(|f| f.id()).collect();
    ids.shuffle(&mut streams.stream(Domain::Forest, 0, step));
    let mut uf = UnionFind::new(model.num_variables());
    let mut partition = BlockPartition::empty(model);
    for id in ids {
        let (u, v) = model.factor(id).unwrap().scope();
        if uf.union(u, v) {
            partition.retained[id.index()] = true;
        }
    }
    partition
}

/// Blocked sweep: `x ~ p(x | theta_1)` exactly by forward filtering and
/// backward sampling on the retained forest, then every dual variable
/// from `p(theta | x)`.
pub fn blocked_tree_sweep(
    dual: &DualModel,
    x: &mut State,
    theta: &mut DualState,
    partition: &BlockPartition,
    streams: &RngStreams,
    sweep: u64,
) -> Result<SweepStats> {
    if dual.has_equality() {
        return Err(Error::Unsupported("blocked sweeps need duals without equality bonds".into()));
    }
    if theta.len() < dual.factor_capacity() {
        theta.resize(dual.factor_capacity(), 0);
    }
    let model = dual.model();
    let forest = Forest::build(model, partition.retained_ids())?;
    let slots = dual.dual_slots();
    let node: Vec<Vec<f64>> = (0..model.num_variables())
        .map(|v| {
            let mut w = dual.h_unary(v).to_vec();
            for &fid in model.adjacency(v) {
                if partition.is_retained(fid) {
                    continue;
                }
                let d = slots[fid.index()].as_ref().expect("dual out of sync");
                for (o, m) in w.iter_mut().zip(d.message(theta[fid.index()], d.scope().0 == v)) {
                    *o += m;
                }
            }
            w
        })
        .collect();
    *x = forest.sample(&node, |id, a, b| slots[id.index()].as_ref().unwrap().log_g(a, b), streams, sweep);
    sample_dual(dual, x, streams, Domain::Dual, sweep, theta);
    Ok(SweepStats::of(model, x))
}

/// Sampler families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SamplerKind {
    /// One step is a full systematic-scan sweep.
    Sequential,
    /// One step is a single-site update.
    SequentialSingleSite,
    PrimalDual,
    SwendsenWang,
    /// Primal-dual with a fresh random spanning forest each sweep.
    BlockedTree,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 5] = [
        SamplerKind::Sequential,
        SamplerKind::SequentialSingleSite,
        SamplerKind::PrimalDual,
        SamplerKind::SwendsenWang,
        SamplerKind::BlockedTree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Sequential => "sequential",
            SamplerKind::SequentialSingleSite => "sequential-site",
            SamplerKind::PrimalDual => "primal-dual",
            SamplerKind::SwendsenWang => "swendsen-wang",
            SamplerKind::BlockedTree => "blocked-tree",
        }
    }

    /// Whether the chain carries dual variables.
    pub fn uses_dual(self) -> bool {
        !matches!(self, SamplerKind::Sequential | SamplerKind::SequentialSingleSite)
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" | "seq" => Ok(SamplerKind::Sequential),
            "sequential-site" | "single-site" => Ok(SamplerKind::SequentialSingleSite),
            "primal-dual" | "pd" => Ok(SamplerKind::PrimalDual),
            "swendsen-wang" | "sw" => Ok(SamplerKind::SwendsenWang),
            "blocked-tree" | "blocked" => Ok(SamplerKind::BlockedTree),
            other => Err(Error::InvalidArgument(format!("unknown sampler `{other}`"))),
        }
    }
}

/// A model prepared for one sampler family.
#[derive(Debug, Clone)]
pub struct Sampler {
    kind: SamplerKind,
    model: Model,
    dual: Option<DualModel>,
}

/// State of one Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub x: State,
    pub theta: DualState,
    streams: RngStreams,
    steps: u64,
}

impl Chain {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn streams(&self) -> &RngStreams {
        &self.streams
    }
}

impl Sampler {
    /// Dualizes `model` as the sampler requires: the generic strategy for
    /// primal-dual and blocked sweeps, bonds for Swendsen-Wang.
    pub fn new(model: Model, kind: SamplerKind) -> Result<Self> {
        let dual = match kind {
            SamplerKind::Sequential | SamplerKind::SequentialSingleSite => None,
            SamplerKind::PrimalDual | SamplerKind::BlockedTree => Some(DualModel::new(model.clone(), Strategy::Generic)?),
            SamplerKind::SwendsenWang => Some(DualModel::new(model.clone(), Strategy::SwendsenWang)?),
        };
        Self::build(model, kind, dual)
    }

    /// Use an existing dual model, e.g. one with custom decompositions.
    pub fn with_dual(dual: DualModel, kind: SamplerKind) -> Result<Self> {
        let model = dual.model().clone();
        let dual = kind.uses_dual().then_some(dual);
        Self::build(model, kind, dual)
    }

    fn build(model: Model, kind: SamplerKind, dual: Option<DualModel>) -> Result<Self> {
        if let Some(d) = &dual {
            match kind {
                SamplerKind::SwendsenWang => check_swendsen_wang(d)?,
                SamplerKind::BlockedTree if d.has_equality() => {
                    return Err(Error::Unsupported("blocked sweeps need duals without equality bonds".into()))
                }
                _ => {}
            }
        }
        Ok(Self { kind, model, dual })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn dual(&self) -> Option<&DualModel> {
        self.dual.as_ref()
    }

    /// Uniform random `x0` and, for dual samplers, `theta0 ~ p(theta | x0)`.
    pub fn init(&self, streams: RngStreams) -> Chain {
        let x = initial_state(&self.model, &streams);
        let theta = match &self.dual {
            Some(d) => initial_dual(d, &x, &streams),
            None => Vec::new(),
        };
        Chain {
            x,
            theta,
            streams,
            steps: 0,
        }
    }

    /// Start from a given state.
    pub fn init_from(&self, x: State, streams: RngStreams) -> Result<Chain> {
        self.model.validate_state(&x)?;
        let theta = match &self.dual {
            Some(d) => initial_dual(d, &x, &streams),
            None => Vec::new(),
        };
        Ok(Chain {
            x,
            theta,
            streams,
            steps: 0,
        })
    }

    /// Advance one step; see [`SamplerKind`] for what a step is.
    pub fn step(&self, chain: &mut Chain) -> Result<()> {
        let t = chain.steps;
        let s = &chain.streams;
        match self.kind {
            SamplerKind::Sequential => sequential_gibbs_sweep(&self.model, &mut chain.x, s, t),
            SamplerKind::SequentialSingleSite => single_site_update(&self.model, &mut chain.x, s, t),
            SamplerKind::PrimalDual => {
                let d = self.dual.as_ref().unwrap();
                if chain.theta.len() < d.factor_capacity() {
                    chain.theta.resize(d.factor_capacity(), 0);
                }
                sample_primal(d, &chain.theta, s, Domain::Primal, t, &mut chain.x);
                sample_dual(d, &chain.x, s, Domain::Dual, t, &mut chain.theta);
            }
            SamplerKind::SwendsenWang => {
                let d = self.dual.as_ref().unwrap();
                sample_dual(d, &chain.x, s, Domain::Dual, t, &mut chain.theta);
                sample_primal(d, &chain.theta, s, Domain::Primal, t, &mut chain.x);
            }
            SamplerKind::BlockedTree => {
                let d = self.dual.as_ref().unwrap();
                let partition = random_spanning_forest(&self.model, s, t);
                blocked_tree_sweep(d, &mut chain.x, &mut chain.theta, &partition, s, t)?;
            }
        }
        chain.steps += 1;
        Ok(())
    }

    pub fn stats(&self, chain: &Chain) -> SweepStats {
        SweepStats::of(&self.model, &chain.x)
    }

    pub fn snapshot(&self, chain: &Chain) -> SweepResult {
        SweepResult {
            state: chain.x.clone(),
            dual: chain.theta.clone(),
            stats: self.stats(chain),
        }
    }
}
