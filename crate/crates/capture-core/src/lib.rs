//! End-to-end weakly-supervised multi-modal instance-level retrieval at desk
//! scale: a procedural product corpus, a region proposer with controllable
//! quality, a hybrid-stream transformer pretrained with masked multi-modal
//! and cross-modal contrastive objectives, gallery retrieval, and metric
//! evaluation with ablation runners.

pub mod corpus;
pub mod error;
pub mod model;
pub mod pretrain;
pub mod proposer;
pub mod rng;
pub mod tokens;

pub use error::{CoreError, Result};
