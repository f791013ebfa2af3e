//! Model-agnostic attribution for black-box generative models.
//!
//! A prompt is perturbed by dropping words, each perturbed prompt is sent to
//! the model, and the shift in its output is measured with an exact
//! Wasserstein (earth mover's) distance in an embedding space. A Gaussian
//! kernel over the input-side Word Mover's Distance weights the
//! perturbations, and a weighted linear surrogate over the word-inclusion
//! features yields one attribution coefficient per word.
//!
//! Modules, bottom-up:
//! - [`perturb`]: tokenization and mask sampling
//! - [`embed`]: embedding tables and weighted point clouds
//! - [`transport`]: EMD, WMD, 1-D Wasserstein, Gaussian kernel
//! - [`surrogate`]: weighted least squares and Bayesian ridge
//! - [`significance`]: bootstrap p-values
//! - [`metrics`]: accuracy, stability, consistency and fidelity measures
//! - [`adapters`]: HTTP, subprocess and mock backends plus a response cache
//! - [`pipeline`]: orchestration, probes, reports and heatmaps

pub mod adapters;
pub mod embed;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod significance;
pub mod surrogate;
pub mod transport;

pub use adapters::{BlackBox, MockModel, ModelKind, ModelSpec, OutputMode, ResponseCache};
pub use embed::{EmbeddingTable, WeightedPointCloud};
pub use metrics::{FidelityReport, GroundTruth};
pub use pipeline::{AttributionResult, PipelineError, RunConfig, Session};
pub use transport::NormOrder;
