//! Multivariate time-series forecasting with jointly learned hypergraph
//! structure.
//!
//! The model couples two experts over a shared gated-linear projection of the
//! input window: a spatio-temporal hypergraph operator (learned soft
//! incidence via Gumbel-softmax sampling, hypergraph attention inside a GRU)
//! and a dual-axis transformer (temporal attention per series, spatial
//! attention per step). A gating layer fuses the experts; a linear readout
//! produces point forecasts and, optionally, a heteroscedastic log-variance
//! head trained with a Gaussian negative log-likelihood.
//!
//! Everything differentiable is built on the in-crate [`tensor`] engine, a
//! small reverse-mode tape over dense `f64` buffers, so gradients flow
//! through structure sampling, attention, recurrence, and both losses.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod guide;
pub mod hgat;
pub mod hgrl;
pub mod model;
pub mod structure;
pub mod sttn;
pub mod tensor;
pub mod train;
