//! Criterion benchmarks for the pdgibbs samplers live in `benches/`.
