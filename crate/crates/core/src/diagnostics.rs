//! Multi-chain runs, the potential scale reduction factor and mixing
//! times.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::State;
use crate::rng::{Domain, RngStreams};
use crate::sampling::{Chain, Sampler};

/// Gelman-Rubin statistic from per-chain means and sample variances of
/// windows of length `n`:
/// `sqrt(((n - 1) / n * W + B / n) / W)` with `W` the mean within-chain
/// variance and `B = n * var(chain means)`.
pub fn psrf_from_moments(means: &[f64], variances: &[f64], n: usize) -> f64 {
    let m = means.len() as f64;
    let nf = n as f64;
    let w = variances.iter().sum::<f64>() / m;
    let grand = means.iter().sum::<f64>() / m;
    let b = nf * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w <= 0.0 {
        return if b > 0.0 { f64::INFINITY } else { 1.0 };
    }
    (((nf - 1.0) / nf * w + b / nf) / w).sqrt()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// PSRF of the first `n` values of each chain.
pub fn psrf(chains: &[&[f64]], n: usize) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InvalidArgument("PSRF needs at least two chains".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("PSRF needs windows of at least two values".into()));
    }
    if let Some(c) = chains.iter().find(|c| c.len() < n) {
        return Err(Error::InvalidArgument(format!("chain of length {} shorter than window {n}", c.len())));
    }
    let (means, vars): (Vec<f64>, Vec<f64>) = chains.iter().map(|c| mean_var(&c[..n])).unzip();
    Ok(psrf_from_moments(&means, &vars, n))
}

/// PSRF evaluated on prefixes of length `stride, 2 stride, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsrfSeries {
    pub stride: usize,
    pub values: Vec<f64>,
}

impl PsrfSeries {
    /// Prefix length at which `values[i]` was evaluated.
    pub fn sweeps_at(&self, i: usize) -> usize {
        (i + 1) * self.stride
    }

    /// Mixing time in sweeps, or `None` when censored.
    pub fn mixing_sweeps(&self, threshold: f64) -> Option<usize> {
        match mixing_time(&self.values, threshold) {
            MixingTime::Index(i) => Some(self.sweeps_at(i)),
            MixingTime::Censored => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingTime {
    Index(usize),
    Censored,
}

/// First index after which every value stays strictly below `threshold`.
pub fn mixing_time(series: &[f64], threshold: f64) -> MixingTime {
    let mut first = series.len();
    for (i, &v) in series.iter().enumerate().rev() {
        if v < threshold {
            first = i;
        } else {
            break;
        }
    }
    if first == series.len() {
        MixingTime::Censored
    } else {
        MixingTime::Index(first)
    }
}

/// Per-step record of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub seed: u64,
    pub energy: Vec<f64>,
    /// Full states per step when requested.
    pub states: Option<Vec<State>>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub chains: usize,
    pub max_sweeps: usize,
    pub stride: usize,
    /// Include per-variable PSRFs in the reported maximum.
    pub track_variables: bool,
    /// Keep every state in the traces.
    pub keep_states: bool,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            chains: 10,
            max_sweeps: 1000,
            stride: 10,
            track_variables: true,
            keep_states: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    pub traces: Vec<ChainTrace>,
    /// Maximum of the energy PSRF and, when tracked, per-variable PSRFs.
    pub psrf: PsrfSeries,
    pub energy_psrf: PsrfSeries,
}

#[derive(Debug, Clone, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn var(&self) -> f64 {
        self.m2 / (self.n - 1) as f64
    }
}

struct Runner {
    chain: Chain,
    trace: ChainTrace,
    energy: Welford,
    sums: Vec<f64>,
    sumsq: Vec<f64>,
}

/// Run `chains` independent chains in lockstep from uniform random
/// starts, evaluating the PSRF every `stride` steps on the prefix so far.
pub fn run_chains(sampler: &Sampler, opts: RunOptions) -> Result<ChainRun> {
    if opts.chains < 2 {
        return Err(Error::InvalidArgument("at least two chains are required".into()));
    }
    if opts.stride < 2 {
        return Err(Error::InvalidArgument("PSRF stride must be at least 2".into()));
    }
    let master = RngStreams::new(opts.seed);
    let n_vars = sampler.model().num_variables();
    let n_tracked = if opts.track_variables { n_vars } else { 0 };
    let mut runners: Vec<Runner> = (0..opts.chains)
        .map(|c| {
            let streams = master.child(Domain::Chain, c);
            Runner {
                chain: sampler.init(streams),
                trace: ChainTrace {
                    seed: streams.seed(),
                    energy: Vec::with_capacity(opts.max_sweeps),
                    states: opts.keep_states.then(Vec::new),
                },
                energy: Welford::default(),
                sums: vec![0.0; n_tracked],
                sumsq: vec![0.0; n_tracked],
            }
        })
        .collect();
    let mut combined = Vec::new();
    let mut energy_only = Vec::new();
    let mut done = 0;
    while done < opts.max_sweeps {
        let steps = opts.stride.min(opts.max_sweeps - done);
        runners.par_iter_mut().try_for_each(|r| -> Result<()> {
            for _ in 0..steps {
                sampler.step(&mut r.chain)?;
                let e = sampler.stats(&r.chain).energy;
                r.energy.push(e);
                r.trace.energy.push(e);
                for (v, &s) in r.chain.x.iter().enumerate().take(n_tracked) {
                    r.sums[v] += s as f64;
                    r.sumsq[v] += (s * s) as f64;
                }
                if let Some(states) = &mut r.trace.states {
                    states.push(r.chain.x.clone());
                }
            }
            Ok(())
        })?;
        done += steps;
        if steps < opts.stride {
            break;
        }
        let n = done;
        let (means, vars): (Vec<f64>, Vec<f64>) = runners.iter().map(|r| (r.energy.mean, r.energy.var())).unzip();
        let e = psrf_from_moments(&means, &vars, n);
        let nf = n as f64;
        let mut worst = e;
        let mut means = vec![0.0; runners.len()];
        let mut vars = vec![0.0; runners.len()];
        for v in 0..n_tracked {
            for (c, r) in runners.iter().enumerate() {
                let mean = r.sums[v] / nf;
                means[c] = mean;
                vars[c] = ((r.sumsq[v] - nf * mean * mean) / (nf - 1.0)).max(0.0);
            }
            worst = worst.max(psrf_from_moments(&means, &vars, n));
        }
        energy_only.push(e);
        combined.push(worst);
    }
    Ok(ChainRun {
        traces: runners.into_iter().map(|r| r.trace).collect(),
        psrf: PsrfSeries {
            stride: opts.stride,
            values: combined,
        },
        energy_psrf: PsrfSeries {
            stride: opts.stride,
            values: energy_only,
        },
    })
}

/// CSV with columns `chain,sweep,energy` and, when states were kept,
/// one `v<i>` column per variable.
pub fn traces_csv(traces: &[ChainTrace]) -> String {
    let mut out = String::from("chain,sweep,energy");
    let n_vars = traces
        .iter()
        .find_map(|t| t.states.as_ref().and_then(|s| s.first()).map(Vec::len))
        .unwrap_or(0);
    for v in 0..n_vars {
        write!(out, ",v{v}").unwrap();
    }
    out.push('\n');
    for (c, t) in traces.iter().enumerate() {
        for (s, e) in t.energy.iter().enumerate() {
            write!(out, "{c},{},{e}", s + 1).unwrap();
            if let Some(states) = &t.states {
                for x in &states[s] {
                    write!(out, ",{x}").unwrap();
                }
            }
            out.push('\n');
        }
    }
    out
}

/// CSV with columns `sweep,psrf`.
pub fn psrf_csv(series: &PsrfSeries) -> String {
    let mut out = String::from("sweep,psrf\n");
    for (i, v) in series.values.iter().enumerate() {
        writeln!(out, "{},{v}", series.sweeps_at(i)).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_grid_ising, Model};
    use crate::sampling::SamplerKind;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn psrf_examples() {
        let c = [1.0, 2.0, 3.0, 4.0].repeat(25);
        let r = psrf(&[&c, &c], 100).unwrap();
        assert!((r - (0.99f64).sqrt()).abs() < 1e-15);
        let a = vec![1.0; 10];
        let b = vec![2.0; 10];
        assert_eq!(psrf(&[&a, &b], 10).unwrap(), f64::INFINITY);
        assert_eq!(psrf(&[&a, &a], 10).unwrap(), 1.0);
    }

    fn reference_psrf(chains: &[Vec<f64>]) -> f64 {
        // Textbook two-pass computation.
        let m = chains.len() as f64;
        let n = chains[0].len() as f64;
        let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
        let grand: f64 = means.iter().sum::<f64>() / m;
        let b = n / (m - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
        let w = chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| c.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0))
            .sum::<f64>()
            / m;
        let var_plus = (n - 1.0) / n * w + b / n;
        (var_plus / w).sqrt()
    }

    fn gaussian_chains(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn matches_reference_and_is_affine_invariant() {
        let chains = gaussian_chains(10, 500, 1);
        let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        let r = psrf(&refs, 500).unwrap();
        assert!((r - reference_psrf(&chains)).abs() < 1e-12);
        let scaled: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|x| 3.5 * x - 2.0).collect()).collect();
        let srefs: Vec<&[f64]> = scaled.iter().map(|c| c.as_slice()).collect();
        assert!((psrf(&srefs, 500).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn iid_chains_approach_one() {
        let chains = gaussian_chains(10, 100_000, 2);
        let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        assert!((psrf(&refs, 100_000).unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn mixing_time_examples() {
        assert_eq!(mixing_time(&[1.5, 1.2, 1.005, 1.003], 1.01), MixingTime::Index(2));
        assert_eq!(mixing_time(&[1.005, 1.02, 1.004, 1.001], 1.01), MixingTime::Index(2));
        assert_eq!(mixing_time(&[1.2, 1.1], 1.01), MixingTime::Censored);
        let s = [1.3, 1.05, 1.02, 1.009, 1.001];
        let idx = |t| match mixing_time(&s, t) {
            MixingTime::Index(i) => i,
            MixingTime::Censored => usize::MAX,
        };
        assert!(idx(1.01) >= idx(1.03) && idx(1.03) >= idx(1.1));
    }

    #[test]
    fn independent_model_mixes_quickly() {
        let m = Model::binary(16);
        for kind in [SamplerKind::Sequential, SamplerKind::PrimalDual, SamplerKind::BlockedTree] {
            let s = Sampler::new(m.clone(), kind).unwrap();
            let run = run_chains(&s, RunOptions { max_sweeps: 2000, ..Default::default() }).unwrap();
            assert!(run.psrf.mixing_sweeps(1.01).is_some_and(|t| t <= 2000), "{kind}");
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let m = build_grid_ising(4, 4, 0.3, None).unwrap();
        let s = Sampler::new(m, SamplerKind::PrimalDual).unwrap();
        let opts = RunOptions {
            chains: 3,
            max_sweeps: 50,
            keep_states: true,
            seed: 9,
            ..Default::default()
        };
        let a = run_chains(&s, opts).unwrap();
        let b = run_chains(&s, opts).unwrap();
        assert_eq!(a, b);
        let csv = traces_csv(&a.traces);
        assert!(csv.starts_with("chain,sweep,energy,v0,"));
        assert_eq!(csv.lines().count(), 1 + 3 * 50);
        assert!(psrf_csv(&a.psrf).starts_with("sweep,psrf\n10,"));
    }
}
