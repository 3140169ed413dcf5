//! depthhint: language-derived depth priors for monocular depth estimation.
//!
//! The crate learns a mapping from object-name word embeddings to depth
//! statistics with a small feed-forward "language-to-depth" (L2D) network,
//! evaluates how much depth information the embeddings carry with a
//! leave-one-out protocol against random-embedding controls, and renders
//! per-pixel hint planes from label rasters.
//!
//! Module map:
//!
//! - [`embedding`]: label -> vector stores, random controls, variant averaging.
//! - [`depth_data`]: frame rasters, depth histograms, instance and per-class datasets.
//! - [`l2d`]: the L2D network (forward, backward, Adam, checkpoints).
//! - [`losses`]: SILog, KL divergence and the Eigen depth metrics.
//! - [`harness`]: pretraining loops, leave-one-out runs, lookup tables, synthetic data.
//! - [`hints`]: hint-plane rendering and the plane file format.

pub mod depth_data;
pub mod embedding;
mod error;
pub mod harness;
pub mod hints;
pub mod l2d;
pub mod losses;
pub mod rng;

pub use depth_data::{BinningSpec, DepthFrame, DepthHistogram, DepthRecord};
pub use embedding::{EmbeddingStore, EmbeddingVector, Lookup};
pub use error::{Error, Result};
pub use harness::{LooReport, LookupTable, TrainSpec};
pub use hints::HintPlane;
pub use l2d::{L2DConfig, MlpParameters, Mode};
pub use losses::EigenMetrics;
pub use rng::RngSeed;

/// Label used for background and for any label missing from a vocabulary.
pub const BACKGROUND: &str = "background";
