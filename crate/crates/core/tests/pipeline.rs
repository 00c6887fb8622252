//! End-to-end checks through the public API.

use pdgibbs::diagnostics::{run_chains, RunOptions};
use pdgibbs::duality::{dualize_model, Strategy};
use pdgibbs::io::{parse_model, write_model};
use pdgibbs::model::{build_grid_ising, build_random_graph, ising_table, potts_table};
use pdgibbs::oracle::{exact_dual_joint, exact_log_z, exact_map, exact_summary};
use pdgibbs::partition::{estimate_log_z_lower, exact_log_v_moments};
use pdgibbs::sampling::{Sampler, SamplerKind};
use pdgibbs::variational::{run_em_map, run_mean_field, MapState, MeanFieldOptions, MeanFieldState};
use pdgibbs::{DualModel, Error, Evidence, Model, RngStreams, Table, Variable};

fn marginals(sampler: &Sampler, sweeps: usize, seed: u64) -> Vec<Vec<f64>> {
    let m = sampler.model();
    let mut counts: Vec<Vec<f64>> = (0..m.num_variables()).map(|v| vec![0.0; m.cardinality(v)]).collect();
    let mut chain = sampler.init(RngStreams::new(seed));
    for _ in 0..500 {
        sampler.step(&mut chain).unwrap();
    }
    for _ in 0..sweeps {
        sampler.step(&mut chain).unwrap();
        for (c, &s) in counts.iter_mut().zip(&chain.x) {
            c[s] += 1.0;
        }
    }
    counts.iter_mut().flatten().for_each(|c| *c /= sweeps as f64);
    counts
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn file_to_samples() {
    let text = "\
# three-state chain with a binary middle variable
vars 3
unary 0 0.0 0.4 -0.3
unary 2 0.2 0.0 0.1
factor 0 0 1 1.0 2.0 0.5 1.5 2.5 0.7
factor 1 1 2 1.2 0.3 0.9 0.4 1.1 2.0
";
    let model = parse_model(text).unwrap();
    let exact = exact_summary(&model).unwrap();
    for kind in [SamplerKind::Sequential, SamplerKind::PrimalDual, SamplerKind::BlockedTree] {
        let sampler = Sampler::new(model.clone(), kind).unwrap();
        let err = max_diff(&marginals(&sampler, 100_000, 1), &exact.marginals);
        assert!(err < 0.01, "{kind}: {err}");
    }
}

#[test]
fn potts_swendsen_wang() {
    let mut model = Model::new();
    for _ in 0..4 {
        model.add_variable(Variable::new(vec![0.0; 3]).unwrap());
    }
    for (u, v) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
        model.add_factor(u, v, potts_table(0.7, 3)).unwrap();
    }
    let exact = exact_summary(&model).unwrap();
    let sw = Sampler::new(model.clone(), SamplerKind::SwendsenWang).unwrap();
    assert!(max_diff(&marginals(&sw, 100_000, 2), &exact.marginals) < 0.01);
    let pd = Sampler::new(model, SamplerKind::PrimalDual).unwrap();
    assert!(max_diff(&marginals(&pd, 100_000, 3), &exact.marginals) < 0.01);
}

#[test]
fn swendsen_wang_needs_potts_factors() {
    let mut model = Model::binary(2);
    model.add_factor(0, 1, Table::from_rows([[1.0, 2.0], [3.0, 4.0]])).unwrap();
    assert!(matches!(Sampler::new(model, SamplerKind::SwendsenWang), Err(Error::InvalidFactor { .. } | Error::NotSwendsenWang(_))));
}

#[test]
fn round_trip_preserves_dual() {
    let model = build_random_graph(12, 2, 4).unwrap();
    let back = parse_model(&write_model(&model)).unwrap();
    let (a, b) = (dualize_model(model).unwrap(), dualize_model(back).unwrap());
    let x: Vec<usize> = (0..12).map(|v| v % 2).collect();
    let theta: Vec<usize> = (0..a.factor_capacity()).map(|i| (i / 3) % 2).collect();
    assert_eq!(a.log_joint(&x, &theta), b.log_joint(&x, &theta));
}

#[test]
fn clamped_model_matches_conditioning() {
    let model = build_grid_ising(2, 3, 0.5, Some(&[0.2, -0.1, 0.3, 0.0, 0.4, -0.2])).unwrap();
    let evidence = Evidence::new().with(1, 1).with(4, 0);
    let clamped = model.clamp(&evidence).unwrap();
    let reduced = exact_summary(&clamped.model).unwrap();
    let full = exact_summary(&model).unwrap();
    let states = pdgibbs::oracle::all_states(&model).unwrap();
    let mut p0 = 0.0;
    let mut total = 0.0;
    for (x, p) in states.iter().zip(&full.joint) {
        if x[1] == 1 && x[4] == 0 {
            total += p;
            if x[0] == 1 {
                p0 += p;
            }
        }
    }
    let expanded = clamped.expand(&[1; 4], &evidence, 6);
    assert_eq!(expanded[1], 1);
    assert_eq!(expanded[4], 0);
    assert!((reduced.marginals[0][1] - p0 / total).abs() < 1e-12);
}

#[test]
fn estimator_brackets_log_z() {
    let model = build_grid_ising(3, 3, 0.4, None).unwrap();
    let log_z = exact_log_z(&model).unwrap();
    let dual = dualize_model(model.clone()).unwrap();
    let (mean, log_mean) = exact_log_v_moments(&dual).unwrap();
    assert!(mean < log_z);
    assert!((log_mean - log_z).abs() < 1e-10);
    let sampler = Sampler::with_dual(dual, SamplerKind::PrimalDual).unwrap();
    let est = estimate_log_z_lower(&sampler, 50_000, None, 0).unwrap();
    assert!((est.mean_log_v - mean).abs() < 4.0 * est.std_error + 1e-3);
}

#[test]
fn chains_converge_on_small_grid() {
    let model = build_grid_ising(6, 6, 0.2, None).unwrap();
    for kind in SamplerKind::ALL {
        let sampler = Sampler::new(model.clone(), kind).unwrap();
        let steps = if kind == SamplerKind::SequentialSingleSite { 36 * 2000 } else { 2000 };
        let run = run_chains(
            &sampler,
            RunOptions {
                chains: 6,
                max_sweeps: steps,
                stride: 10,
                seed: 3,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(run.psrf.mixing_sweeps(1.05).is_some(), "{kind}");
    }
}

#[test]
fn map_and_mean_field_on_enumerable_model() {
    let model = build_random_graph(8, 2, 6).unwrap();
    let dual = dualize_model(model.clone()).unwrap();
    let map = run_em_map(&dual, MapState::from_unaries(&dual).unwrap(), 100).unwrap();
    let best = model.energy(&exact_map(&model).unwrap()).unwrap();
    assert!(map.converged);
    assert!(map.state.objective(&dual) <= best + 1e-12);
    let mf = run_mean_field(&dual, MeanFieldState::new(&dual).unwrap(), MeanFieldOptions::default()).unwrap();
    let log_z = exact_log_z(&model).unwrap();
    assert!(mf.converged);
    assert!(mf.objective.last().unwrap() + log_z >= -1e-9);
}

#[test]
fn edits_keep_dual_consistent() {
    let mut dual = DualModel::new(build_grid_ising(2, 2, 0.3, None).unwrap(), Strategy::Generic).unwrap();
    let id = dual.add_factor(0, 3, ising_table(1.1)).unwrap();
    let fresh = dualize_model(dual.model().clone()).unwrap();
    let a = exact_dual_joint(&dual).unwrap();
    let b = exact_dual_joint(&fresh).unwrap();
    assert!((a.log_z - b.log_z).abs() < 1e-12);
    dual.remove_factor(id).unwrap();
    let c = exact_dual_joint(&dual).unwrap();
    assert!((c.log_z - exact_log_z(&build_grid_ising(2, 2, 0.3, None).unwrap()).unwrap()).abs() < 1e-12);
    assert!(matches!(dual.remove_factor(id), Err(Error::UnknownFactor(_))));
}
