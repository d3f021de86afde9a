//! Knowledge-routed region graph modules.
//!
//! The crate builds prior class-to-class graphs from annotation statistics,
//! learns region-to-region edges supervised by those priors (the explicit
//! path), learns spatial-layout edges end-to-end from box geometry (the
//! implicit path), and propagates region features over the resulting
//! adjacencies. A synthetic desk-scale harness generates long-tail scenes
//! with controllable context structure to measure what each module buys.
//!
//! Layout:
//! - [`matrix`], [`mlp`], [`optim`], [`rng`], [`checkpoint`] — the dense
//!   numerical kernel: matrices, stacked MLPs with analytic backprop,
//!   SGD with momentum, deterministic seeding, parameter containers.
//! - [`annotations`], [`graphs`] — prior-graph construction from annotation
//!   records: frequency tables, Jensen-Shannon attribute graphs,
//!   co-occurrence relationship graphs, graph serialization.
//! - [`explicit`] — edges from pairwise feature differences, supervised by
//!   prior-graph lookups, plus feature propagation.
//! - [`implicit`] — multi-graph edges from relative box geometry, learned
//!   through the task loss alone.
//! - [`world`], [`model`], [`train`], [`metrics`] — the synthetic-scene
//!   harness: world/scene generation, the composed classifier, the training
//!   loop, evaluation and ablation metrics.
//! - [`config`] — the declarative run-config file shared by the CLI.

pub mod annotations;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod explicit;
pub mod graphs;
pub mod implicit;
pub mod io_util;
pub mod matrix;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod rng;
pub mod train;
pub mod world;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
pub use mlp::{Activation, MlpStack};
pub use optim::{Sgd, SgdConfig};

/// Schema versions of every serialized artifact, surfaced by `--version`.
pub mod versions {
    pub const CHECKPOINT: u32 = crate::checkpoint::CHECKPOINT_VERSION;
    pub const GRAPH: u32 = crate::graphs::GRAPH_FORMAT_VERSION;
    pub const CONFIG: u32 = 1;
    pub const METRICS: u32 = 1;
}
