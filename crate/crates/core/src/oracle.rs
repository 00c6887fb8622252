//! Brute-force exact inference for small models.
//!
//! States are enumerated in lexicographic order with variable 0 most
//! significant. All quantities are accumulated in the log domain.

use std::collections::BTreeMap;

use crate::duality::{DualModel, DualState};
use crate::error::{Error, Result};
use crate::model::{FactorId, Model, State};
use crate::rng::log_sum_exp;

/// Default limit on the number of enumerated joint states.
pub const DEFAULT_CAP: u64 = 1 << 22;

/// Exact quantities of a primal model.
#[derive(Debug, Clone)]
pub struct ExactSummary {
    pub log_z: f64,
    /// Per-variable probability vectors.
    pub marginals: Vec<Vec<f64>>,
    /// Per-factor joint tables, row-major over the factor scope.
    pub pairwise: BTreeMap<FactorId, Vec<f64>>,
    /// Probability of every state in enumeration order.
    pub joint: Vec<f64>,
}

/// Mixed-radix odometer over joint states.
#[derive(Debug, Clone)]
pub struct StateIter {
    radices: Vec<usize>,
    current: Vec<usize>,
    done: bool,
}

impl StateIter {
    pub fn new(radices: Vec<usize>) -> Self {
        let done = radices.contains(&0);
        Self {
            current: vec![0; radices.len()],
            radices,
            done,
        }
    }
}

impl Iterator for StateIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let mut i = self.radices.len();
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.current[i] += 1;
            if self.current[i] < self.radices[i] {
                break;
            }
            self.current[i] = 0;
        }
        Some(out)
    }
}

fn cardinalities(model: &Model) -> Vec<usize> {
    (0..model.num_variables()).map(|v| model.cardinality(v)).collect()
}

pub fn state_space_size(model: &Model) -> f64 {
    cardinalities(model).iter().map(|&k| k as f64).product()
}

fn check_cap(states: f64, cap: u64) -> Result<()> {
    if states > cap as f64 {
        return Err(Error::TooLarge { states, cap });
    }
    Ok(())
}

/// Every state of `model` in enumeration order.
pub fn all_states(model: &Model) -> Result<Vec<State>> {
    check_cap(state_space_size(model), DEFAULT_CAP)?;
    Ok(StateIter::new(cardinalities(model)).collect())
}

/// Index of `x` in enumeration order.
pub fn state_index(model: &Model, x: &[usize]) -> usize {
    x.iter()
        .enumerate()
        .fold(0, |acc, (v, &s)| acc * model.cardinality(v) + s)
}

pub fn exact_log_z(model: &Model) -> Result<f64> {
    check_cap(state_space_size(model), DEFAULT_CAP)?;
    let energies: Vec<f64> = StateIter::new(cardinalities(model))
        .map(|x| model.energy_unchecked(&x))
        .collect();
    Ok(log_sum_exp(&energies))
}

pub fn exact_summary(model: &Model) -> Result<ExactSummary> {
    check_cap(state_space_size(model), DEFAULT_CAP)?;
    let states: Vec<State> = StateIter::new(cardinalities(model)).collect();
    let energies: Vec<f64> = states.iter().map(|x| model.energy_unchecked(x)).collect();
    let log_z = log_sum_exp(&energies);
    let joint: Vec<f64> = energies.iter().map(|e| (e - log_z).exp()).collect();
    let mut marginals: Vec<Vec<f64>> = cardinalities(model).iter().map(|&k| vec![0.0; k]).collect();
    let mut pairwise: BTreeMap<FactorId, Vec<f64>> = model
        .factors()
        .map(|f| (f.id(), vec![0.0; f.table().rows() * f.table().cols()]))
        .collect();
    for (x, &p) in states.iter().zip(&joint) {
        for (v, &s) in x.iter().enumerate() {
            marginals[v][s] += p;
        }
        for f in model.factors() {
            let (u, v) = f.scope();
            pairwise.get_mut(&f.id()).unwrap()[x[u] * f.table().cols() + x[v]] += p;
        }
    }
    Ok(ExactSummary {
        log_z,
        marginals,
        pairwise,
        joint,
    })
}

/// Most probable state; ties go to the lexicographically smallest state.
pub fn exact_map(model: &Model) -> Result<State> {
    check_cap(state_space_size(model), DEFAULT_CAP)?;
    let mut best = None;
    let mut best_e = f64::NEG_INFINITY;
    for x in StateIter::new(cardinalities(model)) {
        let e = model.energy_unchecked(&x);
        if best.is_none() || e > best_e {
            best_e = e;
            best = Some(x);
        }
    }
    Ok(best.unwrap_or_default())
}

/// `KL(p || q)` for distributions over the same finite set.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Exact joint distribution over `(x, theta)` of a dual model.
#[derive(Debug, Clone)]
pub struct DualJointSummary {
    pub log_z: f64,
    /// Primal states in enumeration order.
    pub x_states: Vec<State>,
    /// Dual states in enumeration order (full-length, indexed by factor id).
    pub theta_states: Vec<DualState>,
    /// `log p(x, theta)`, row-major with one row per primal state.
    pub log_joint: Vec<f64>,
    pub p_x: Vec<f64>,
    pub p_theta: Vec<f64>,
}

impl DualJointSummary {
    pub fn n_theta(&self) -> usize {
        self.theta_states.len()
    }

    pub fn p(&self, xi: usize, ti: usize) -> f64 {
        self.log_joint[xi * self.n_theta() + ti].exp()
    }

    /// `p(x | theta)` over all primal states.
    pub fn x_given_theta(&self, ti: usize) -> Vec<f64> {
        let pt = self.p_theta[ti];
        (0..self.x_states.len()).map(|xi| self.p(xi, ti) / pt).collect()
    }

    /// `p(theta | x)` over all dual states.
    pub fn theta_given_x(&self, xi: usize) -> Vec<f64> {
        let px = self.p_x[xi];
        (0..self.n_theta()).map(|ti| self.p(xi, ti) / px).collect()
    }

    /// `I(x, theta) = sum p(x, theta) log(p(x, theta) / (p(x) p(theta)))`.
    pub fn mutual_information(&self) -> f64 {
        let mut total = 0.0;
        for xi in 0..self.x_states.len() {
            for ti in 0..self.n_theta() {
                let lp = self.log_joint[xi * self.n_theta() + ti];
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                total += lp.exp() * (lp - self.p_x[xi].ln() - self.p_theta[ti].ln());
            }
        }
        total
    }

    /// `E_theta KL(p(x | theta) || p(x))`.
    pub fn expected_kl(&self) -> f64 {
        (0..self.n_theta())
            .filter(|&ti| self.p_theta[ti] > 0.0)
            .map(|ti| self.p_theta[ti] * kl_divergence(&self.x_given_theta(ti), &self.p_x))
            .sum()
    }

    /// Per-variable marginals of `x`.
    pub fn x_marginals(&self, model: &Model) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = cardinalities(model).iter().map(|&k| vec![0.0; k]).collect();
        for (x, &p) in self.x_states.iter().zip(&self.p_x) {
            for (v, &s) in x.iter().enumerate() {
                out[v][s] += p;
            }
        }
        out
    }
}

pub fn exact_dual_joint(dual: &DualModel) -> Result<DualJointSummary> {
    exact_dual_joint_capped(dual, DEFAULT_CAP)
}

pub fn exact_dual_joint_capped(dual: &DualModel, cap: u64) -> Result<DualJointSummary> {
    let ids = dual.live_dual_ids();
    let dual_radices: Vec<usize> = ids.iter().map(|&id| dual.dual_cardinality(id).unwrap()).collect();
    let nx = state_space_size(dual.model());
    let nt: f64 = dual_radices.iter().map(|&k| k as f64).product();
    check_cap(nx * nt, cap)?;

    let x_states: Vec<State> = StateIter::new(cardinalities(dual.model())).collect();
    let theta_states: Vec<DualState> = StateIter::new(dual_radices)
        .map(|t| {
            let mut full = dual.zero_dual_state();
            for (&id, k) in ids.iter().zip(t) {
                full[id.index()] = k;
            }
            full
        })
        .collect();
    let mut log_joint = Vec::with_capacity(x_states.len() * theta_states.len());
    for x in &x_states {
        for t in &theta_states {
            log_joint.push(dual.log_joint(x, t));
        }
    }
    let log_z = log_sum_exp(&log_joint);
    for lp in log_joint.iter_mut() {
        *lp -= log_z;
    }
    let nt = theta_states.len();
    let p_x = (0..x_states.len())
        .map(|xi| log_sum_exp(&log_joint[xi * nt..(xi + 1) * nt]).exp())
        .collect();
    let mut p_theta = vec![0.0; nt];
    for xi in 0..x_states.len() {
        for (ti, pt) in p_theta.iter_mut().enumerate() {
            *pt += log_joint[xi * nt + ti].exp();
        }
    }
    Ok(DualJointSummary {
        log_z,
        x_states,
        theta_states,
        log_joint,
        p_x,
        p_theta,
    })
}
