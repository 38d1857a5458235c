//! Moments, simulation and method-of-moments inference for networks of
//! infinite-server queues observed at Poisson epochs.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: the parameter space (routing matrix, arrival rates, service
//!   laws, observation probabilities), validation, projection and distance.
//! - [`lst`]: Laplace–Stieltjes transforms of service times and their
//!   residual (excess-life) counterparts, plus samplers.
//! - [`moments`]: exact stationary moments and lag-one / lag-two
//!   cross-moments of the (possibly thinned) population vector.
//! - [`simulator`]: discrete-event simulation started in stationarity,
//!   Poisson sampling and binomial thinning.
//! - [`estimator`]: empirical moments, closed-form identification, the
//!   sequential scheme and constrained least-squares moment matching.
//! - [`stats`]: batch-means error bars used by the Monte Carlo checks.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod linalg;
pub mod lst;
pub mod model;
pub mod moments;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
pub use estimator::{
    empirical_moments, estimate, estimate_from_moments, estimate_least_squares, estimate_sequential,
    identify_closed_form, EstimateOptions, EstimationResult, SolverOptions,
};
pub use lst::{bundle, TransformBundle};
pub use model::{
    project_theta, validate, EstimationMode, NetworkParams, ParamLayout, ProjectionConfig,
    RoutingMatrix, ServiceFamily, ServiceModel,
};
pub use moments::{MomentSet, MomentSource, PassageMatrices};
pub use simulator::{replicate, simulate, ObservationLog, SimOptions};
