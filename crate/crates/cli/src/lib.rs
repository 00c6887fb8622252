//! Experiment harness for the pdgibbs samplers.
//!
//! Every command is a deterministic function of its inputs and seed. Rows
//! are produced in a fixed order regardless of how work is scheduled on
//! the worker pool, whose size is read from `PDGIBBS_WORKERS`.
//!
//! CSV schemas (version 1):
//!
//! * mixing: `sampler,coupling,mixing_index,censored,unit`
//! * traces: `chain,sweep,energy`
//! * final states: `variable,state`
//! * objective trajectories: `iteration,objective`

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use pdgibbs::diagnostics::{run_chains, traces_csv, ChainTrace, RunOptions};
use pdgibbs::duality::dualize_model;
use pdgibbs::io::{parse_model, write_model};
use pdgibbs::model::{build_full_ising, build_grid_ising, build_random_graph};
use pdgibbs::oracle::{exact_log_z, exact_map, DEFAULT_CAP};
use pdgibbs::partition::estimate_log_z_lower;
use pdgibbs::rng::Domain;
use pdgibbs::sampling::{random_spanning_forest, Sampler, SamplerKind};
use pdgibbs::variational::{
    naive_free_energy, product_kl, refine_naive_mean_field, run_em_map, run_mean_field, run_tree_map,
    run_tree_mean_field, MapState, MeanFieldOptions, MeanFieldState, TreeMeanFieldState, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use pdgibbs::{Model, RngStreams};

pub const WORKERS_ENV: &str = "PDGIBBS_WORKERS";
pub const MIXING_HEADER: &str = "sampler,coupling,mixing_index,censored,unit";
pub const TRACE_HEADER: &str = "chain,sweep,energy";
pub const STATE_HEADER: &str = "variable,state";
pub const OBJECTIVE_HEADER: &str = "iteration,objective";

#[derive(Debug, Parser)]
#[command(name = "pdgibbs", version, about = "Primal-dual Gibbs sampling experiments")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, env = WORKERS_ENV, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mixing times to a PSRF threshold for each coupling and sampler.
    Mixing(MixingArgs),
    /// Run one sampler on a model file and write its energy trace.
    Sample(SampleArgs),
    /// Estimate the log partition function by the mean of log V.
    Logz(LogzArgs),
    /// MAP or mean-field inference.
    Infer(InferArgs),
    /// Write a generated model in the text format.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    Grid,
    Random,
    Full,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
}

#[derive(Debug, Args)]
pub struct MixingArgs {
    #[arg(long, value_enum, default_value = "grid")]
    pub experiment: ExperimentKind,
    /// Grid side length, or number of variables for random/full.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub beta_min: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta_max: f64,
    #[arg(long, default_value_t = 5)]
    pub beta_steps: usize,
    /// Factors per variable for the random experiment.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "sequential,primal-dual")]
    pub sampler: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub chains: usize,
    #[arg(long, default_value_t = 5000)]
    pub max_sweeps: usize,
    #[arg(long, default_value_t = 1.01)]
    pub psrf_threshold: f64,
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model file for `--experiment file`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "primal-dual")]
    pub sampler: String,
    #[arg(long, default_value_t = 1000)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the final state as CSV.
    #[arg(long)]
    pub state_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LogzArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "primal-dual")]
    pub sampler: String,
    #[arg(long, default_value_t = 10_000)]
    pub sweeps: usize,
    /// Discarded sweeps; defaults to 10% of `--sweeps`.
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    MapEm,
    MeanField,
    TreeMap,
    TreeMf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "map-em")]
    pub method: Method,
    /// Seeds the random spanning forest of the tree methods.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub damping: f64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Fine-tune mean-field marginals with coordinate-ascent naive mean-field.
    #[arg(long)]
    pub refine: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "grid")]
    pub experiment: ExperimentKind,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    pub beta: f64,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parsed and validated mixing experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub size: usize,
    /// Couplings: `beta` values for grid/full, `k` for random.
    pub couplings: Vec<f64>,
    pub samplers: Vec<SamplerKind>,
    pub chains: usize,
    pub max_sweeps: usize,
    pub threshold: f64,
    pub stride: usize,
    pub seed: u64,
    pub model_file: Option<PathBuf>,
}

/// One line of the mixing CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingRow {
    pub sampler: SamplerKind,
    pub coupling: f64,
    /// Steps until the PSRF stays below the threshold; the horizon when
    /// censored.
    pub mixing_index: usize,
    pub censored: bool,
    pub unit: &'static str,
}

fn default_size(kind: ExperimentKind) -> usize {
    match kind {
        ExperimentKind::Grid => 16,
        ExperimentKind::Random => 200,
        ExperimentKind::Full => 30,
        ExperimentKind::File => 0,
    }
}

/// Evenly spaced values from `min` to `max` inclusive, rounded to 12
/// decimals so that grid points print as typed.
pub fn linspace(min: f64, max: f64, steps: usize) -> Vec<f64> {
    let round = |x: f64| (x * 1e12).round() / 1e12;
    match steps {
        0 => Vec::new(),
        1 => vec![min],
        _ => (0..steps)
            .map(|i| round(min + (max - min) * i as f64 / (steps - 1) as f64))
            .collect(),
    }
}

impl ExperimentConfig {
    pub fn from_args(args: &MixingArgs) -> Result<Self> {
        let samplers = args
            .sampler
            .iter()
            .map(|s| s.parse::<SamplerKind>())
            .collect::<pdgibbs::Result<Vec<_>>>()?;
        let couplings = match args.experiment {
            ExperimentKind::Random => args.k.iter().map(|&k| k as f64).collect(),
            ExperimentKind::File => vec![0.0],
            _ => linspace(args.beta_min, args.beta_max, args.beta_steps),
        };
        let config = Self {
            experiment: args.experiment,
            size: args.size.unwrap_or_else(|| default_size(args.experiment)),
            couplings,
            samplers,
            chains: args.chains,
            max_sweeps: args.max_sweeps,
            threshold: args.psrf_threshold,
            stride: args.stride,
            seed: args.seed,
            model_file: args.model.clone(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold <= 1.0 {
            bail!("PSRF threshold must exceed 1, got {}", self.threshold);
        }
        if self.chains < 2 {
            bail!("at least two chains are required, got {}", self.chains);
        }
        if self.stride < 2 {
            bail!("PSRF stride must be at least 2");
        }
        if self.max_sweeps < self.stride {
            bail!("max sweeps {} below the PSRF stride {}", self.max_sweeps, self.stride);
        }
        if self.couplings.is_empty() || self.samplers.is_empty() {
            bail!("need at least one coupling value and one sampler");
        }
        if self.experiment == ExperimentKind::File && self.model_file.is_none() {
            bail!("--experiment file needs --model");
        }
        if self.experiment != ExperimentKind::File && self.size == 0 {
            bail!("size must be positive");
        }
        Ok(())
    }

    /// Model for coupling index `i`.
    pub fn model(&self, i: usize) -> Result<Model> {
        let c = self.couplings[i];
        Ok(match self.experiment {
            ExperimentKind::Grid => build_grid_ising(self.size, self.size, c, None)?,
            ExperimentKind::Full => build_full_ising(self.size, c)?,
            ExperimentKind::Random => build_random_graph(self.size, c as usize, self.seed)?,
            ExperimentKind::File => read_model(self.model_file.as_ref().unwrap())?,
        })
    }

    /// Seed shared by every sampler at coupling index `i`.
    pub fn run_seed(&self, i: usize) -> u64 {
        RngStreams::new(self.seed).child(Domain::Chain, i).seed()
    }
}

/// Mixing indices for every coupling and sampler, in configuration order.
/// In the fully connected experiment the sequential sampler runs single-site
/// updates and reports them as its unit, with a horizon of `max_sweeps * N`.
pub fn mixing_rows(config: &ExperimentConfig) -> Result<Vec<MixingRow>> {
    config.validate()?;
    let jobs: Vec<(usize, SamplerKind)> = (0..config.couplings.len())
        .flat_map(|i| config.samplers.iter().map(move |&s| (i, s)))
        .collect();
    jobs.par_iter()
        .map(|&(i, requested)| {
            let model = config.model(i)?;
            let n = model.num_variables();
            let (kind, unit, horizon) = match (config.experiment, requested) {
                (ExperimentKind::Full, SamplerKind::Sequential | SamplerKind::SequentialSingleSite) => {
                    (SamplerKind::SequentialSingleSite, "single-site-update", config.max_sweeps * n)
                }
                (_, SamplerKind::SequentialSingleSite) => (requested, "single-site-update", config.max_sweeps * n),
                _ => (requested, "sweep", config.max_sweeps),
            };
            let sampler = Sampler::new(model, kind)?;
            let run = run_chains(
                &sampler,
                RunOptions {
                    chains: config.chains,
                    max_sweeps: horizon,
                    stride: config.stride,
                    track_variables: true,
                    keep_states: false,
                    seed: config.run_seed(i),
                },
            )?;
            let index = run.psrf.mixing_sweeps(config.threshold);
            Ok(MixingRow {
                sampler: requested,
                coupling: config.couplings[i],
                mixing_index: index.unwrap_or(horizon),
                censored: index.is_none(),
                unit,
            })
        })
        .collect()
}

pub fn mixing_csv(rows: &[MixingRow]) -> String {
    let mut out = format!("{MIXING_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.sampler, r.coupling, r.mixing_index, r.censored, r.unit).unwrap();
    }
    out
}

pub fn read_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_model(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) if p.as_os_str() != "-" => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        _ => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Energy trace of a single chain and its final state.
pub fn sample_outputs(model: Model, kind: SamplerKind, sweeps: usize, seed: u64) -> Result<(String, String)> {
    let sampler = Sampler::new(model, kind)?;
    let mut chain = sampler.init(RngStreams::new(seed));
    let mut energy = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        sampler.step(&mut chain)?;
        energy.push(sampler.stats(&chain).energy);
    }
    let trace = traces_csv(&[ChainTrace {
        seed,
        energy,
        states: None,
    }]);
    let mut state = format!("{STATE_HEADER}\n");
    for (v, s) in chain.x.iter().enumerate() {
        writeln!(state, "{v},{s}").unwrap();
    }
    Ok((trace, state))
}

fn enumerable(model: &Model) -> bool {
    (0..model.num_variables())
        .map(|v| model.cardinality(v) as f64)
        .product::<f64>()
        <= DEFAULT_CAP as f64
}

/// Text report of the log-partition estimate, `key=value` per line.
pub fn logz_report(model: Model, kind: SamplerKind, sweeps: usize, burn_in: Option<usize>, seed: u64) -> Result<String> {
    let exact = enumerable(&model).then(|| exact_log_z(&model)).transpose()?;
    let sampler = Sampler::new(model, kind)?;
    let est = estimate_log_z_lower(&sampler, sweeps, burn_in, seed)?;
    let mut out = String::new();
    writeln!(out, "sampler={kind}").unwrap();
    writeln!(out, "sweeps={sweeps}").unwrap();
    writeln!(out, "samples={}", est.n_samples).unwrap();
    writeln!(out, "mean_log_v={:?}", est.mean_log_v).unwrap();
    writeln!(out, "std_error={:?}", est.std_error).unwrap();
    writeln!(out, "log_mean_v={:?}", est.log_mean_v).unwrap();
    match exact {
        Some(z) => {
            writeln!(out, "exact_log_z={z:?}").unwrap();
            writeln!(out, "gap={:?}", z - est.mean_log_v).unwrap();
        }
        None => {
            writeln!(out, "exact_log_z=unavailable").unwrap();
            writeln!(out, "gap=unavailable").unwrap();
        }
    }
    Ok(out)
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Text report of an inference run: `key=value` lines, then the objective
/// trajectory as CSV after a blank line.
pub fn infer_report(model: Model, args: &InferArgs) -> Result<String> {
    let dual = dualize_model(model.clone())?;
    let opts = MeanFieldOptions {
        damping: args.damping,
        tol: args.tol,
        max_iter: args.max_iter,
    };
    let partition = random_spanning_forest(&model, &RngStreams::new(args.seed), 0);
    let exact_z = enumerable(&model).then(|| exact_log_z(&model)).transpose()?;
    let mut out = String::new();
    let method = args.method.to_possible_value().unwrap().get_name().to_string();
    writeln!(out, "method={method}").unwrap();
    let (iterations, converged, delta, objective) = match args.method {
        Method::MapEm | Method::TreeMap => {
            let run = if args.method == Method::MapEm {
                run_em_map(&dual, MapState::from_unaries(&dual)?, args.max_iter)?
            } else {
                let init = MapState::blocked(&dual, MapState::from_unaries(&dual)?.x, Some(&partition))?;
                run_tree_map(&dual, init, &partition, args.max_iter)?
            };
            let energy = run.state.objective(&dual);
            writeln!(out, "assignment={}", join(&run.state.x)).unwrap();
            writeln!(out, "energy={energy:?}").unwrap();
            if exact_z.is_some() {
                let best = model.energy(&exact_map(&model)?)?;
                writeln!(out, "exact_map_energy={best:?}").unwrap();
                writeln!(out, "gap={:?}", best - energy).unwrap();
            }
            (run.iterations, run.converged, run.final_delta, run.objective)
        }
        Method::MeanField | Method::TreeMf => {
            let (marginals, iterations, converged, delta, objective) = if args.method == Method::MeanField {
                let run = run_mean_field(&dual, MeanFieldState::new(&dual)?, opts)?;
                (run.state.marginals, run.iterations, run.converged, run.final_delta, run.objective)
            } else {
                let run = run_tree_mean_field(&dual, TreeMeanFieldState::new(&dual, &partition)?, &partition, opts)?;
                (run.state.marginals, run.iterations, run.converged, run.final_delta, run.objective)
            };
            let eta: Vec<f64> = marginals.iter().map(|m| m.iter().enumerate().map(|(k, p)| k as f64 * p).sum()).collect();
            writeln!(out, "eta={}", join(&eta)).unwrap();
            writeln!(out, "free_energy={:?}", objective.last().unwrap()).unwrap();
            if let Some(z) = exact_z {
                writeln!(out, "exact_log_z={z:?}").unwrap();
                writeln!(out, "joint_kl={:?}", objective.last().unwrap() + z).unwrap();
                writeln!(out, "primal_kl={:?}", product_kl(&model, &marginals, z)).unwrap();
            }
            if args.refine {
                let (refined, sweeps) = refine_naive_mean_field(&model, marginals, args.tol, args.max_iter);
                let eta: Vec<f64> = refined.iter().map(|m| m.iter().enumerate().map(|(k, p)| k as f64 * p).sum()).collect();
                writeln!(out, "refine_sweeps={sweeps}").unwrap();
                writeln!(out, "refined_eta={}", join(&eta)).unwrap();
                writeln!(out, "refined_free_energy={:?}", naive_free_energy(&model, &refined)).unwrap();
            }
            (iterations, converged, delta, objective)
        }
    };
    writeln!(out, "iterations={iterations}").unwrap();
    writeln!(out, "converged={converged}").unwrap();
    writeln!(out, "final_delta={delta:?}").unwrap();
    writeln!(out, "\n{OBJECTIVE_HEADER}").unwrap();
    for (i, o) in objective.iter().enumerate() {
        writeln!(out, "{i},{o:?}").unwrap();
    }
    Ok(out)
}

pub fn generate_model(args: &GenerateArgs) -> Result<Model> {
    let size = args.size.unwrap_or_else(|| default_size(args.experiment));
    Ok(match args.experiment {
        ExperimentKind::Grid => build_grid_ising(size, size, args.beta, None)?,
        ExperimentKind::Full => build_full_ising(size, args.beta)?,
        ExperimentKind::Random => build_random_graph(size, args.k, args.seed)?,
        ExperimentKind::File => bail!("generate does not read files"),
    })
}

/// Execute a parsed command line inside a pool of the requested size.
pub fn run(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!("{WORKERS_ENV} must be positive");
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build()?;
    pool.install(|| execute(cli.command))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Mixing(args) => {
            let config = ExperimentConfig::from_args(&args)?;
            emit(args.out.as_deref(), &mixing_csv(&mixing_rows(&config)?))
        }
        Command::Sample(args) => {
            let kind: SamplerKind = args.sampler.parse()?;
            let (trace, state) = sample_outputs(read_model(&args.model)?, kind, args.sweeps, args.seed)?;
            emit(args.out.as_deref(), &trace)?;
            if let Some(p) = &args.state_out {
                emit(Some(p), &state)?;
            }
            Ok(())
        }
        Command::Logz(args) => {
            let kind: SamplerKind = args.sampler.parse()?;
            let report = logz_report(read_model(&args.model)?, kind, args.sweeps, args.burn_in, args.seed)?;
            emit(args.out.as_deref(), &report)
        }
        Command::Infer(args) => {
            let report = infer_report(read_model(&args.model)?, &args)?;
            emit(args.out.as_deref(), &report)
        }
        Command::Generate(args) => emit(args.out.as_deref(), &write_model(&generate_model(&args)?)),
    }
}
