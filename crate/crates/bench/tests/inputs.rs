//! The benchmark inputs build and every benchmarked sampler steps on them.

use pdgibbs::duality::dualize_model;
use pdgibbs::model::{build_grid_ising, build_random_graph};
use pdgibbs::sampling::{Sampler, SamplerKind};
use pdgibbs::RngStreams;

#[test]
fn grid_inputs_step() {
    let model = build_grid_ising(50, 50, 0.3, None).unwrap();
    for kind in [SamplerKind::Sequential, SamplerKind::PrimalDual, SamplerKind::SwendsenWang, SamplerKind::BlockedTree] {
        let sampler = Sampler::new(model.clone(), kind).unwrap();
        let mut chain = sampler.init(RngStreams::new(1));
        sampler.step(&mut chain).unwrap();
        assert_eq!(chain.steps(), 1);
    }
}

#[test]
fn random_inputs_dualize() {
    for k in [2, 8, 32] {
        let model = build_random_graph(1000, k, 7).unwrap();
        assert_eq!(model.num_factors(), 1000 * k);
        assert_eq!(dualize_model(model).unwrap().duals().count(), 1000 * k);
    }
}
