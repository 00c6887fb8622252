//! Primal-dual Gibbs sampling for discrete pairwise Markov random fields.
//!
//! Each factor of a pairwise model is augmented with a discrete dual
//! variable so that, given all dual variables, the primal variables are
//! conditionally independent, and vice versa. The resulting two-block Gibbs
//! sampler updates every variable of a half-step in parallel without a graph
//! coloring, and keeps working unchanged when factors are added or removed.
//!
//! Modules:
//!
//! * [`model`]: models, energies, generators, edits and evidence.
//! * [`duality`]: positive 2x2 factorization, dual parameters, Swendsen-Wang
//!   and Higdon splits, and the augmented [`DualModel`].
//! * [`sampling`]: sequential Gibbs, primal-dual, cluster and tree-blocked samplers.
//! * [`variational`]: parallel EM-MAP and mean-field on the dual model.
//! * [`partition`]: the `(s, r)`-transforms and the log-partition estimator.
//! * [`diagnostics`]: multi-chain runs, PSRF and mixing times.
//! * [`oracle`]: brute-force exact inference for small models.

pub mod diagnostics;
pub mod duality;
pub mod error;
pub mod forest;
pub mod io;
pub mod model;
pub mod oracle;
pub mod partition;
pub mod rng;
pub mod sampling;
pub mod union_find;
pub mod variational;

pub use duality::{DualFactor, DualModel, DualState, FactorDual, Mixture, Strategy};
pub use error::{Error, Result};
pub use model::{Evidence, Factor, FactorId, Model, State, Table, Variable};
pub use rng::RngStreams;
