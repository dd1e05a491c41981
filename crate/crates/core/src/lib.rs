//! Holistic knowledge distillation: a student network learns from a frozen
//! teacher by matching both its softened predictions and graph-smoothed
//! ("holistic") embeddings built over each mini-batch.

pub mod contrastive;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod models;
pub mod seed;

pub use contrastive::{BankOwner, ContrastiveBatchResult, MemoryBank};
pub use data::{load_dataset, Dataset, DatasetSpec, FeatureSet, Split};
pub use distill::{DistillConfig, EncoderMode, Objective, TrainState, Trainer};
pub use encoder::{EncoderWeights, HolisticEmbedding, PoolingMode};
pub use error::{Error, Result};
pub use graph::{AttributedGraph, GraphMode, PredictionBatch};
pub use linalg::Matrix;
pub use models::{build_backbone, Backbone, BackboneOutput};
