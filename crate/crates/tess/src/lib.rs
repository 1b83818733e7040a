//! Multimodal time-series forecasting around a temporal evolution semantic
//! space: numerically verifiable primitives extracted from series and from
//! text, confidence-aware gating, a primitive-conditioned patch forecaster,
//! and semi-synthetic modality-gap diagnostics.

pub mod autodiff;
pub mod baseline;
pub mod bench;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod extract;
pub mod gating;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod primitives;
pub mod series;

pub use error::{Result, TessError};
