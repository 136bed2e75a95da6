//! Occupancy-detection modelling with neural-network links.
//!
//! Each site `i` has features `x_i` and a latent occupancy state `z_i ~ Bernoulli(o_i)`;
//! each visit `t` has features `w_it` and an observation
//! `y_it ~ Bernoulli(z_i * d_it)`. Two small ReLU networks map features to the logits
//! of `o_i` and `d_it`, and are fit by minibatch (sub)gradient steps, plain or Adam, on the mean
//! negative marginal log-likelihood plus an l2,1 penalty on each network's input
//! layer, which zeroes whole feature columns.
//!
//! Modules:
//!
//! - [`nn`]: dense ReLU networks, hand-written backpropagation, group norm.
//! - [`likelihood`]: probability heads, marginal site likelihood, objective and gradient.
//! - [`simulate`]: seeded synthetic datasets with linear/quadratic feature effects.
//! - [`train`]: minibatch SGD/Adam, validation snapshotting, grid search.
//! - [`metrics`]: correlation, AUROC, AUPRC, feature importance, histograms.

pub mod error;
pub mod likelihood;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
pub use likelihood::{Dataset, Objective, OccupancyModel, SiteRecord};
pub use nn::{Matrix, NetGradient, NetParams};
pub use simulate::{GroundTruth, SimConfig};
pub use train::{BatchSize, Optimizer, SelectMetric, TrainConfig, TrainResult};
