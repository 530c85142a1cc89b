//! Online-distillation training stack for a desk-scale query-based detector.
//!
//! An EMA teacher guides the online student through matching distillation,
//! prediction distillation and auxiliary query groups. Everything runs on
//! synthetic scenes small enough for a single CPU core.

pub mod distill;
pub mod ema;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod network;
pub mod synthdata;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use matching::{CostMatrix, CostWeights, MatchResult};
pub use network::{FeatureGrid, ModelConfig, ModelParams, Prediction, QuerySet, StageOutput};
pub use synthdata::{GroundTruth, Scene};
