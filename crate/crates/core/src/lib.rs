//! Hierarchical Bayesian analog (HBA) forecasting for count-valued
//! spatio-temporal fields.
//!
//! The pipeline factorizes a count field with nonnegative matrix
//! factorization, reduces a forcing field to coefficient series (EOFs or
//! Laplacian eigenmaps), selects analogs of the current forcing trajectory
//! via lag-embedding and Procrustes distance, fits the hierarchical
//! Poisson / truncated-normal model by Metropolis-within-Gibbs, and emits
//! posterior-predictive forecasts with uncertainty.
//!
//! Modules follow the pipeline stages:
//!
//! | Module | Stage |
//! |--------|-------|
//! | [`data`] | count/forcing fields, anomalies, time alignment |
//! | [`io`] | delimited-matrix files and coordinate sidecars |
//! | [`nmf`] | NNSVD-initialized offset NMF of the count matrix |
//! | [`dimred`] | EOF and Laplacian-eigenmap forcing coefficients |
//! | [`analog`] | embedding matrices, Procrustes distance, kernel weights |
//! | [`stochastic`] | truncated-normal kernels, bias correction, priors |
//! | [`sampler`] | Metropolis-within-Gibbs chain and forecasting |
//! | [`synthetic`] | Lorenz-63 and planted-analog-cycle generators |
//! | [`eval`] | MSPE/correlation scoring and naive baselines |
//! | [`pipeline`] | end-to-end orchestration, caching, run manifests |

pub mod analog;
pub mod data;
pub mod dimred;
pub mod error;
pub mod eval;
pub mod io;
pub mod nmf;
pub mod pipeline;
pub mod sampler;
pub mod stochastic;
pub mod synthetic;

pub use error::{Error, Result};
