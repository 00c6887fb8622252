//! Discrete pairwise Markov random fields with strictly positive factor tables.
//!
//! A [`Model`] is a list of variables (each with a log-domain unary vector)
//! and an id-addressable set of pairwise factors. The unnormalized
//! probability of a state `x` is
//!
//! ```text
//! p~(x) = exp( sum_v unary_v[x_v] ) * prod_f table_f[x_u, x_v]
//! ```
//!
//! Factor ids are stable handles: they are never reused within the lifetime
//! of a model, so per-factor auxiliary state (the dual variables) can be
//! keyed by them across edits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// An assignment of a state to every variable, indexed by variable id.
pub type State = Vec<usize>;

/// Stable handle of a factor within a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FactorId(pub usize);

impl FactorId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for FactorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Row-major table over the states of two variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidTable("table must have at least one row and column".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidTable(format!(
                "expected {} entries for a {rows}x{cols} table, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<const R: usize, const C: usize>(rows: [[f64; C]; R]) -> Self {
        Self {
            rows: R,
            cols: C,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.cols + b]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for b in 0..self.cols {
            for a in 0..self.rows {
                data.push(self.get(a, b));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&p| p * c).collect(),
        }
    }
}

/// The Ising edge table `[[1, e^-w], [e^-w, 1]]`.
pub fn ising_table(w: f64) -> Table {
    let off = (-w).exp();
    Table::from_rows([[1.0, off], [off, 1.0]])
}

/// The Potts edge table with ones on the diagonal and `e^-w` elsewhere.
pub fn potts_table(w: f64, n_states: usize) -> Table {
    let off = (-w).exp();
    let data = (0..n_states * n_states)
        .map(|i| if i / n_states == i % n_states { 1.0 } else { off })
        .collect();
    Table {
        rows: n_states,
        cols: n_states,
        data,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    unary: Vec<f64>,
}

impl Variable {
    pub fn new(unary: Vec<f64>) -> Result<Self> {
        if unary.len() < 2 {
            return Err(Error::InvalidVariable(format!(
                "cardinality must be at least 2, got {}",
                unary.len()
            )));
        }
        if let Some(bad) = unary.iter().find(|a| !a.is_finite()) {
            return Err(Error::InvalidVariable(format!("non-finite unary entry {bad}")));
        }
        Ok(Self { unary })
    }

    pub fn binary(a: f64) -> Result<Self> {
        Self::new(vec![0.0, a])
    }

    pub fn cardinality(&self) -> usize {
        self.unary.len()
    }

    pub fn unary(&self) -> &[f64] {
        &self.unary
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    id: FactorId,
    scope: (usize, usize),
    table: Table,
    log_table: Vec<f64>,
}

impl Factor {
    pub fn id(&self) -> FactorId {
        self.id
    }

    pub fn scope(&self) -> (usize, usize) {
        self.scope
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    #[inline]
    pub fn log_value(&self, a: usize, b: usize) -> f64 {
        self.log_table[a * self.table.cols + b]
    }

    /// Endpoint of the factor other than `v`, and whether `v` is the first
    /// (row) endpoint.
    #[inline]
    pub fn other(&self, v: usize) -> (usize, bool) {
        if self.scope.0 == v {
            (self.scope.1, true)
        } else {
            (self.scope.0, false)
        }
    }

    /// Log table value with `v` at `state_v` and the other endpoint at
    /// `state_other`, honoring orientation.
    #[inline]
    pub fn log_value_from(&self, v_is_row: bool, state_v: usize, state_other: usize) -> f64 {
        if v_is_row {
            self.log_value(state_v, state_other)
        } else {
            self.log_value(state_other, state_v)
        }
    }
}

/// Clamped variables and their fixed states.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Evidence {
    clamped: BTreeMap<usize, usize>,
}

impl Evidence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, var: usize, state: usize) -> Self {
        self.clamped.insert(var, state);
        self
    }

    pub fn insert(&mut self, var: usize, state: usize) {
        self.clamped.insert(var, state);
    }

    pub fn get(&self, var: usize) -> Option<usize> {
        self.clamped.get(&var).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.clamped.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.clamped.iter().map(|(&v, &s)| (v, s))
    }
}

/// Result of absorbing evidence into a model.
#[derive(Debug, Clone)]
pub struct ClampedModel {
    /// Model over the free variables only.
    pub model: Model,
    /// `free[i]` is the original id of reduced variable `i`.
    pub free: Vec<usize>,
    /// Log of the constant contributed by clamped unaries and by factors
    /// whose endpoints are both clamped.
    pub log_constant: f64,
}

impl ClampedModel {
    /// Expand a reduced state back to a full state of the original model.
    pub fn expand(&self, reduced: &[usize], evidence: &Evidence, n_vars: usize) -> State {
        let mut x = vec![0; n_vars];
        for (v, s) in evidence.iter() {
            x[v] = s;
        }
        for (i, &v) in self.free.iter().enumerate() {
            x[v] = reduced[i];
        }
        x
    }
}

/// Pairwise Markov random field.
#[derive(Debug, Clone, Default)]
pub struct Model {
    variables: Vec<Variable>,
    factors: Vec<Option<Factor>>,
    adjacency: Vec<Vec<FactorId>>,
    live: usize,
    edit_work: u64,
}

impl PartialEq for Model {
    /// Models are equal when they have the same variables and the same live
    /// factors under the same ids. Bookkeeping counters are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.variables == other.variables && self.factors().eq(other.factors())
    }
}

impl Model {
    pub fn new() -> Self {
        Self::default()
    }

    /// `n` binary variables with zero unaries.
    pub fn binary(n: usize) -> Self {
        let mut model = Self::new();
        for _ in 0..n {
            model.variables.push(Variable { unary: vec![0.0, 0.0] });
            model.adjacency.push(Vec::new());
        }
        model
    }

    pub fn add_variable(&mut self, variable: Variable) -> usize {
        self.variables.push(variable);
        self.adjacency.push(Vec::new());
        self.variables.len() - 1
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn cardinality(&self, v: usize) -> usize {
        self.variables[v].cardinality()
    }

    pub fn unary(&self, v: usize) -> &[f64] {
        &self.variables[v].unary
    }

    pub fn set_unary(&mut self, v: usize, unary: Vec<f64>) -> Result<()> {
        let current = self.variables.get(v).ok_or(Error::UnknownVariable(v))?;
        if unary.len() != current.cardinality() {
            return Err(Error::InvalidVariable(format!(
                "variable {v} has cardinality {}, got {} unary entries",
                current.cardinality(),
                unary.len()
            )));
        }
        self.variables[v] = Variable::new(unary)?;
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.variables.iter().all(|v| v.cardinality() == 2)
    }

    /// Number of live factors.
    pub fn num_factors(&self) -> usize {
        self.live
    }

    /// One past the largest factor id ever issued.
    pub fn factor_capacity(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, id: FactorId) -> Option<&Factor> {
        self.factors.get(id.0).and_then(Option::as_ref)
    }

    /// Live factors in increasing id order.
    pub fn factors(&self) -> impl Iterator<Item = &Factor> + '_ {
        self.factors.iter().flatten()
    }

    pub fn adjacency(&self, v: usize) -> &[FactorId] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    /// Total adjacency entries touched by `add_factor`/`remove_factor` so far.
    pub fn edit_work(&self) -> u64 {
        self.edit_work
    }

    pub fn add_factor(&mut self, u: usize, v: usize, table: Table) -> Result<FactorId> {
        let id = FactorId(self.factors.len());
        let factor = self.make_factor(id, u, v, table)?;
        self.factors.push(Some(factor));
        self.adjacency[u].push(id);
        self.adjacency[v].push(id);
        self.live += 1;
        self.edit_work += 2;
        Ok(id)
    }

    /// Insert a factor under an explicit id. Used by the model reader; ids
    /// must be fresh.
    pub(crate) fn insert_factor(&mut self, id: FactorId, u: usize, v: usize, table: Table) -> Result<()> {
        if self.factor(id).is_some() {
            return Err(Error::InvalidFactor {
                factor: id,
                reason: "duplicate factor id".into(),
            });
        }
        let factor = self.make_factor(id, u, v, table)?;
        if self.factors.len() <= id.0 {
            self.factors.resize(id.0 + 1, None);
        }
        self.factors[id.0] = Some(factor);
        self.adjacency[u].push(id);
        self.adjacency[v].push(id);
        self.live += 1;
        Ok(())
    }

    fn make_factor(&self, id: FactorId, u: usize, v: usize, table: Table) -> Result<Factor> {
        let n = self.num_variables();
        if u >= n {
            return Err(Error::UnknownVariable(u));
        }
        if v >= n {
            return Err(Error::UnknownVariable(v));
        }
        if u == v {
            return Err(Error::InvalidFactor {
                factor: id,
                reason: format!("scope ({u}, {v}) repeats a variable"),
            });
        }
        if table.rows != self.cardinality(u) || table.cols != self.cardinality(v) {
            return Err(Error::InvalidFactor {
                factor: id,
                reason: format!(
                    "table is {}x{}, scope cardinalities are {}x{}",
                    table.rows,
                    table.cols,
                    self.cardinality(u),
                    self.cardinality(v)
                ),
            });
        }
        if let Some(bad) = table.data.iter().find(|&&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidFactor {
                factor: id,
                reason: format!("table entry {bad} is not strictly positive and finite"),
            });
        }
        let log_table = table.data.iter().map(|p| p.ln()).collect();
        Ok(Factor {
            id,
            scope: (u, v),
            table,
            log_table,
        })
    }

    /// Remove a factor. Touches only the adjacency lists of its endpoints.
    pub fn remove_factor(&mut self, id: FactorId) -> Result<Factor> {
        let factor = self
            .factors
            .get_mut(id.0)
            .and_then(Option::take)
            .ok_or(Error::UnknownFactor(id))?;
        let (u, v) = factor.scope;
        for w in [u, v] {
            let list = &mut self.adjacency[w];
            let pos = list.iter().position(|&f| f == id).expect("adjacency out of sync");
            self.edit_work += pos as u64 + 1;
            list.swap_remove(pos);
        }
        self.live -= 1;
        Ok(factor)
    }

    pub fn validate_state(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.num_variables() {
            return Err(Error::StateLength {
                expected: self.num_variables(),
                got: x.len(),
            });
        }
        for (var, (&state, variable)) in x.iter().zip(&self.variables).enumerate() {
            if state >= variable.cardinality() {
                return Err(Error::StateOutOfRange {
                    var,
                    state,
                    cardinality: variable.cardinality(),
                });
            }
        }
        Ok(())
    }

    /// Log of the unnormalized probability of `x`.
    pub fn energy(&self, x: &[usize]) -> Result<f64> {
        self.validate_state(x)?;
        Ok(self.energy_unchecked(x))
    }

    pub(crate) fn energy_unchecked(&self, x: &[usize]) -> f64 {
        let unary: f64 = self
            .variables
            .iter()
            .zip(x)
            .map(|(var, &s)| var.unary[s])
            .sum();
        let pairwise: f64 = self
            .factors()
            .map(|f| f.log_value(x[f.scope.0], x[f.scope.1]))
            .sum();
        unary + pairwise
    }

    /// Energy terms that involve variable `v` at state `s`, with all other
    /// variables taken from `x`.
    pub(crate) fn local_energy(&self, x: &[usize], v: usize, s: usize) -> f64 {
        let mut e = self.variables[v].unary[s];
        for &fid in &self.adjacency[v] {
            let f = self.factors[fid.0].as_ref().expect("adjacency out of sync");
            let (other, is_row) = f.other(v);
            e += f.log_value_from(is_row, s, x[other]);
        }
        e
    }

    /// Absorb evidence: factors touching a clamped variable become unary
    /// terms on their free endpoint, or constants when both endpoints are
    /// clamped.
    pub fn clamp(&self, evidence: &Evidence) -> Result<ClampedModel> {
        for (v, s) in evidence.iter() {
            let var = self.variables.get(v).ok_or(Error::UnknownVariable(v))?;
            if s >= var.cardinality() {
                return Err(Error::StateOutOfRange {
                    var: v,
                    state: s,
                    cardinality: var.cardinality(),
                });
            }
        }
        let mut new_index = vec![usize::MAX; self.num_variables()];
        let mut free = Vec::new();
        let mut unaries = Vec::new();
        let mut log_constant = 0.0;
        for (v, var) in self.variables.iter().enumerate() {
            match evidence.get(v) {
                Some(s) => log_constant += var.unary[s],
                None => {
                    new_index[v] = free.len();
                    free.push(v);
                    unaries.push(var.unary.clone());
                }
            }
        }
        let mut pairs = Vec::new();
        for f in self.factors() {
            let (u, v) = f.scope;
            match (evidence.get(u), evidence.get(v)) {
                (Some(a), Some(b)) => log_constant += f.log_value(a, b),
                (Some(a), None) => {
                    let target = &mut unaries[new_index[v]];
                    for (s, t) in target.iter_mut().enumerate() {
                        *t += f.log_value(a, s);
                    }
                }
                (None, Some(b)) => {
                    let target = &mut unaries[new_index[u]];
                    for (s, t) in target.iter_mut().enumerate() {
                        *t += f.log_value(s, b);
                    }
                }
                (None, None) => pairs.push((new_index[u], new_index[v], f.table.clone())),
            }
        }
        let mut model = Model::new();
        for unary in unaries {
            model.add_variable(Variable::new(unary)?);
        }
        for (u, v, table) in pairs {
            model.add_factor(u, v, table)?;
        }
        model.edit_work = 0;
        Ok(ClampedModel {
            model,
            free,
            log_constant,
        })
    }
}

/// Binary `height x width` grid with 4-neighborhood Ising couplings.
///
/// Variables are numbered row-major. `unaries`, when given, holds the log
/// potential of state 1 for every variable.
pub fn build_grid_ising(height: usize, width: usize, beta: f64, unaries: Option<&[f64]>) -> Result<Model> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be at least 1".into()));
    }
    let n = height * width;
    let mut model = binary_with_unaries(n, unaries)?;
    let table = ising_table(beta);
    for r in 0..height {
        for c in 0..width {
            let v = r * width + c;
            if c + 1 < width {
                model.add_factor(v, v + 1, table.clone())?;
            }
            if r + 1 < height {
                model.add_factor(v, v + width, table.clone())?;
            }
        }
    }
    model.edit_work = 0;
    Ok(model)
}

/// Fully connected binary Ising model with zero unaries.
pub fn build_full_ising(n_vars: usize, beta: f64) -> Result<Model> {
    if n_vars < 2 {
        return Err(Error::InvalidArgument("need at least 2 variables".into()));
    }
    let mut model = Model::binary(n_vars);
    let table = ising_table(beta);
    for u in 0..n_vars {
        for v in u + 1..n_vars {
            model.add_factor(u, v, table.clone())?;
        }
    }
    model.edit_work = 0;
    Ok(model)
}

/// Random binary model with `k * n_vars` factors on distinct variable pairs.
///
/// Unary log potentials of state 1 and all four log table entries of every
/// factor are i.i.d. standard normal.
pub fn build_random_graph(n_vars: usize, k: usize, seed: u64) -> Result<Model> {
    let n_factors = k
        .checked_mul(n_vars)
        .ok_or_else(|| Error::Infeasible("factor count overflows".into()))?;
    let max_pairs = n_vars.saturating_mul(n_vars.saturating_sub(1)) / 2;
    if n_factors > max_pairs {
        return Err(Error::Infeasible(format!(
            "{n_factors} factors requested but only {max_pairs} distinct pairs exist on {n_vars} variables"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new();
    for _ in 0..n_vars {
        let a: f64 = rng.sample(StandardNormal);
        model.add_variable(Variable::binary(a)?);
    }
    let mut seen = HashSet::with_capacity(n_factors);
    while model.num_factors() < n_factors {
        let u = rng.random_range(0..n_vars);
        let v = rng.random_range(0..n_vars);
        if u == v || !seen.insert((u.min(v), u.max(v))) {
            continue;
        }
        let data = (0..4)
            .map(|_| rng.sample::<f64, _>(StandardNormal).exp())
            .collect();
        model.add_factor(u, v, Table::new(2, 2, data)?)?;
    }
    model.edit_work = 0;
    Ok(model)
}

fn binary_with_unaries(n: usize, unaries: Option<&[f64]>) -> Result<Model> {
    let mut model = Model::binary(n);
    if let Some(a) = unaries {
        if a.len() != n {
            return Err(Error::InvalidArgument(format!(
                "expected {n} unary values, got {}",
                a.len()
            )));
        }
        for (v, &a) in a.iter().enumerate() {
            model.variables[v] = Variable::binary(a)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_edge(table: Table) -> Model {
        let mut m = Model::binary(2);
        m.add_factor(0, 1, table).unwrap();
        m
    }

    #[test]
    fn energy_examples() {
        let m = Model::binary(1);
        assert_eq!(m.energy(&[0]).unwrap(), 0.0);
        assert_eq!(m.energy(&[1]).unwrap(), 0.0);

        let m = single_edge(ising_table(1.0));
        assert!((m.energy(&[0, 1]).unwrap() + 1.0).abs() < 1e-15);

        let grid = build_grid_ising(2, 2, 0.5, None).unwrap();
        assert_eq!(grid.energy(&[0, 0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn energy_rejects_bad_states() {
        let m = Model::binary(2);
        assert!(matches!(m.energy(&[0]), Err(Error::StateLength { .. })));
        assert!(matches!(m.energy(&[0, 2]), Err(Error::StateOutOfRange { var: 1, .. })));
    }

    #[test]
    fn grid_sizes() {
        let g = build_grid_ising(1, 2, 0.0, None).unwrap();
        assert_eq!(g.num_factors(), 1);
        assert!(g.factors().next().unwrap().table().data().iter().all(|&p| p == 1.0));
        let g = build_grid_ising(2, 2, 0.3, None).unwrap();
        assert_eq!((g.num_variables(), g.num_factors()), (4, 4));
        let g = build_grid_ising(50, 50, 0.3, None).unwrap();
        assert_eq!((g.num_variables(), g.num_factors()), (2500, 4900));
    }

    #[test]
    fn full_ising_sizes() {
        assert_eq!(build_full_ising(100, 0.01).unwrap().num_factors(), 4950);
        assert_eq!(build_full_ising(2, 0.3).unwrap().num_factors(), 1);
        assert_eq!(build_full_ising(30, 0.012).unwrap().num_factors(), 435);
        assert!(build_full_ising(1, 0.1).is_err());
    }

    #[test]
    fn random_graph_is_simple_and_reproducible() {
        let a = build_random_graph(4, 1, 7).unwrap();
        let b = build_random_graph(4, 1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_factors(), 4);
        let pairs: HashSet<_> = a
            .factors()
            .map(|f| (f.scope().0.min(f.scope().1), f.scope().0.max(f.scope().1)))
            .collect();
        assert_eq!(pairs.len(), 4);
        assert_ne!(a, build_random_graph(4, 1, 8).unwrap());

        let big = build_random_graph(1000, 2, 1).unwrap();
        assert_eq!((big.num_variables(), big.num_factors()), (1000, 2000));
        assert!(matches!(build_random_graph(4, 2, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn add_remove_restores_factor_set() {
        let mut m = build_grid_ising(3, 3, 0.4, None).unwrap();
        let before = m.clone();
        let id = m.add_factor(0, 8, ising_table(0.7)).unwrap();
        assert_ne!(m, before);
        m.remove_factor(id).unwrap();
        assert_eq!(m, before);
        assert!(matches!(m.remove_factor(id), Err(Error::UnknownFactor(_))));
        // ids are never reused
        let next = m.add_factor(0, 8, ising_table(0.7)).unwrap();
        assert_ne!(next, id);
    }

    #[test]
    fn add_factor_validation() {
        let mut m = Model::binary(2);
        let bad = Table::from_rows([[1.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(m.add_factor(0, 1, bad), Err(Error::InvalidFactor { .. })));
        assert!(m.add_factor(0, 0, ising_table(1.0)).is_err());
        assert!(matches!(m.add_factor(0, 5, ising_table(1.0)), Err(Error::UnknownVariable(5))));
        assert_eq!(m.num_factors(), 0);
    }

    #[test]
    fn removing_all_factors_leaves_unary_energy() {
        let mut m = build_grid_ising(2, 2, 0.8, Some(&[0.1, -0.2, 0.3, 0.4])).unwrap();
        let ids: Vec<_> = m.factors().map(Factor::id).collect();
        for id in ids {
            m.remove_factor(id).unwrap();
        }
        let x = [1, 0, 1, 1];
        assert!((m.energy(&x).unwrap() - (0.1 + 0.3 + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn remove_work_is_local() {
        let mut m = build_grid_ising(10, 10, 0.2, None).unwrap();
        let id = m.add_factor(0, 99, ising_table(0.3)).unwrap();
        let before = m.edit_work();
        m.remove_factor(id).unwrap();
        let spent = m.edit_work() - before;
        assert!(spent <= (m.degree(0) + m.degree(99) + 2) as u64);
    }

    #[test]
    fn clamp_nothing_is_identity() {
        let m = build_grid_ising(2, 3, 0.4, Some(&[0.1, 0.2, 0.3, -0.1, -0.2, 0.5])).unwrap();
        let c = m.clamp(&Evidence::new()).unwrap();
        assert_eq!(c.model, m);
        assert_eq!(c.free, (0..6).collect::<Vec<_>>());
        assert_eq!(c.log_constant, 0.0);
    }

    #[test]
    fn clamp_single_edge_absorbs_column() {
        let t = Table::from_rows([[1.0, 2.0], [3.0, 5.0]]);
        let m = single_edge(t);
        let c = m.clamp(&Evidence::new().with(1, 1)).unwrap();
        assert_eq!(c.model.num_variables(), 1);
        assert_eq!(c.model.num_factors(), 0);
        let u = c.model.unary(0);
        assert!((u[0] - 2f64.ln()).abs() < 1e-15);
        assert!((u[1] - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn clamp_errors() {
        let m = Model::binary(2);
        assert!(matches!(m.clamp(&Evidence::new().with(3, 0)), Err(Error::UnknownVariable(3))));
        assert!(matches!(m.clamp(&Evidence::new().with(0, 2)), Err(Error::StateOutOfRange { .. })));
    }

    #[test]
    fn potts_table_shape() {
        let t = potts_table(1.0, 3);
        assert_eq!(t.get(1, 1), 1.0);
        assert!((t.get(0, 2) - (-1f64).exp()).abs() < 1e-16);
        assert_eq!(ising_table(0.4), potts_table(0.4, 2));
    }
}
