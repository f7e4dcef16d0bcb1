//! Cell-DETR: end-to-end instance segmentation of trapped cells with a
//! detection transformer.
//!
//! The network, losses, metrics and data handling are generic over the scalar
//! type (`f32` or `f64`); aliases for both are exported at the crate root.

pub mod boxmatch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;

pub use celldetr_tensor as tensor;
pub use celldetr_tensor::Scalar;

pub use config::{Config, LossConfig, ModelConfig, TrainConfig, Variant};
pub use data::Class;
pub use error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use data::{InstanceSet, Mask, Sample};
pub use losses::PredictionSet;
pub use metrics::EvalReport;
pub use model::CellDetr;

pub type CellDetrF32 = CellDetr<f32>;
pub type CellDetrF64 = CellDetr<f64>;
pub type SampleF32 = Sample<f32>;
pub type SampleF64 = Sample<f64>;
pub type PredictionSetF32 = PredictionSet<f32>;
pub type PredictionSetF64 = PredictionSet<f64>;
pub type BoundingBoxF32 = boxmatch::BoundingBox<f32>;
pub type BoundingBoxF64 = boxmatch::BoundingBox<f64>;
