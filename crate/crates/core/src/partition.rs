//! The `(s, r)`-transforms `G` and `H`, the estimator
//! `V(x, theta) = G(x) H(theta) / e^<s(x), r(theta)>` and the lower bound
//! `E[log V] <= log Z`.

use crate::duality::{DualModel, FactorDual};
use crate::error::{Error, Result};
use crate::model::State;
use crate::oracle::exact_dual_joint;
use crate::rng::{log_sum_exp, RngStreams};
use crate::sampling::{cluster_log_weights, default_burn_in, Sampler, SamplerKind};
use crate::variational::min_product_kl;

/// `log G(x) = sum_i log sum_k g_i(k) e^<s(x), r_i(k)>`.
pub fn big_g(dual: &DualModel, x: &[usize]) -> f64 {
    dual.duals().map(|(_, d)| d.log_g(x[d.scope().0], x[d.scope().1])).sum()
}

/// `log H(theta) = log sum_x h(x) e^<s(x), r(theta)>`, summing each
/// bonded cluster over its shared state.
pub fn big_h(dual: &DualModel, theta: &[usize]) -> f64 {
    cluster_log_weights(dual, theta)
        .iter()
        .map(|(_, w)| log_sum_exp(w))
        .sum()
}

fn inner(d: &FactorDual, k: usize, a: usize, b: usize) -> f64 {
    let c = &d.components()[k];
    c.left[a] + c.right[b]
}

/// `<s(x), r(theta)>`.
pub fn inner_product(dual: &DualModel, x: &[usize], theta: &[usize]) -> f64 {
    dual.duals()
        .map(|(id, d)| inner(d, theta[id.index()], x[d.scope().0], x[d.scope().1]))
        .sum()
}

/// `log V(x, theta)`.
pub fn log_v(dual: &DualModel, x: &[usize], theta: &[usize]) -> f64 {
    big_g(dual, x) + big_h(dual, theta) - inner_product(dual, x, theta)
}

/// Sampled estimate of `E[log V]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogZEstimate {
    /// Mean of `log V` over retained sweeps; a lower bound on `log Z` in
    /// expectation.
    pub mean_log_v: f64,
    /// Batch-means standard error of `mean_log_v`.
    pub std_error: f64,
    pub n_samples: usize,
    /// `log` of the mean of `V`, the unbiased but high-variance estimate.
    pub log_mean_v: f64,
}

/// Mean and batch-means standard error with batch size `floor(sqrt(T))`.
pub fn batch_means(values: &[f64]) -> (f64, f64) {
    let t = values.len();
    if t == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    let b = ((t as f64).sqrt() as usize).max(1);
    let n_batches = t / b;
    if n_batches < 2 {
        return (mean, 0.0);
    }
    let batch: Vec<f64> = (0..n_batches)
        .map(|j| values[j * b..(j + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let bm = batch.iter().sum::<f64>() / n_batches as f64;
    let var = batch.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    (mean, (var / n_batches as f64).sqrt())
}

/// Run a dual sampler for `n_sweeps`, discard `burn_in` (default 10%) and
/// average `log V` over the rest.
pub fn estimate_log_z_lower(sampler: &Sampler, n_sweeps: usize, burn_in: Option<usize>, seed: u64) -> Result<LogZEstimate> {
    let dual = sampler
        .dual()
        .ok_or_else(|| Error::Unsupported(format!("sampler `{}` does not carry dual variables", sampler.kind())))?;
    let burn_in = burn_in.unwrap_or_else(|| default_burn_in(n_sweeps));
    if n_sweeps <= burn_in {
        return Err(Error::InvalidArgument(format!(
            "{n_sweeps} sweeps leave no samples after a burn-in of {burn_in}"
        )));
    }
    let mut chain = sampler.init(RngStreams::new(seed));
    let mut values = Vec::with_capacity(n_sweeps - burn_in);
    for t in 0..n_sweeps {
        sampler.step(&mut chain)?;
        if t >= burn_in {
            values.push(log_v(dual, &chain.x, &chain.theta));
        }
    }
    let (mean_log_v, std_error) = batch_means(&values);
    Ok(LogZEstimate {
        mean_log_v,
        std_error,
        n_samples: values.len(),
        log_mean_v: log_sum_exp(&values) - (values.len() as f64).ln(),
    })
}

/// Exact `E[log V]` and `log E[V]` under `p(x, theta)` by enumeration.
pub fn exact_log_v_moments(dual: &DualModel) -> Result<(f64, f64)> {
    let joint = exact_dual_joint(dual)?;
    let nt = joint.n_theta();
    let mut mean = 0.0;
    let mut terms = Vec::new();
    for (xi, x) in joint.x_states.iter().enumerate() {
        for (ti, t) in joint.theta_states.iter().enumerate() {
            let lp = joint.log_joint[xi * nt + ti];
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let lv = log_v(dual, x, t);
            mean += lp.exp() * lv;
            terms.push(lp + lv);
        }
    }
    Ok((mean, log_sum_exp(&terms)))
}

/// Both sides of `I(x, theta) = E_theta KL(p(x | theta) || p(x)) >= min KL`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InformationCheck {
    pub mutual_information: f64,
    pub expected_kl: f64,
    /// Best-found `min_xi KL(p(x | xi) || p(x))`.
    pub min_kl: f64,
}

impl InformationCheck {
    pub fn holds(&self, tol: f64) -> bool {
        (self.mutual_information - self.expected_kl).abs() <= tol && self.expected_kl >= self.min_kl - tol
    }
}

/// Evaluate the information identity and inequality by enumeration. The
/// minimum is searched with 10 random restarts plus a start at the best
/// factorized `p(x | theta)`.
pub fn mutual_information_check(dual: &DualModel) -> Result<InformationCheck> {
    let joint = exact_dual_joint(dual)?;
    let model = dual.model();
    let mut starts: Vec<Vec<Vec<f64>>> = Vec::new();
    if !dual.has_equality() {
        let best = (0..joint.n_theta())
            .filter(|&t| joint.p_theta[t] > 0.0)
            .map(|t| (crate::oracle::kl_divergence(&joint.x_given_theta(t), &joint.p_x), t))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, t)) = best {
            starts.push(conditional_marginals(dual, &joint.x_states, &joint.x_given_theta(t)));
        }
    }
    Ok(InformationCheck {
        mutual_information: joint.mutual_information(),
        expected_kl: joint.expected_kl(),
        min_kl: min_product_kl(model, joint.log_z, 10, 0, &starts),
    })
}

fn conditional_marginals(dual: &DualModel, states: &[State], p: &[f64]) -> Vec<Vec<f64>> {
    let m = dual.model();
    let mut out: Vec<Vec<f64>> = (0..m.num_variables()).map(|v| vec![0.0; m.cardinality(v)]).collect();
    for (x, &px) in states.iter().zip(p) {
        for (v, &s) in x.iter().enumerate() {
            out[v][s] += px;
        }
    }
    out
}

/// Sampler kinds that carry dual variables and can feed the estimator.
pub fn supports_estimator(kind: SamplerKind) -> bool {
    kind.uses_dual()
}
