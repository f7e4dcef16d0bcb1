//! Training, evaluation, inference, fluorescence measurement and latency
//! benchmarking on top of [`CellDetr`](crate::model::CellDetr).

mod bench;
mod infer;
mod train;

pub use bench::{benchmark_latency, LatencyReport, WARMUP_PASSES};
pub use infer::{
    evaluate, instances_from_predictions, measure_fluorescence, measure_instances, measure_labels, predict,
    render_overlay, write_measurements_csv, FluorescenceMeasurement, Prediction, PredictedInstance,
};
pub use train::{
    loss_and_gradients, train, BatchLoss, EpochRecord, StepRecord, TrainLog, TrainOptions, TrainOutcome,
};

use celldetr_tensor::{Scalar, Tensor};

use crate::data::{normalize, Sample};
use crate::error::{Error, Result};
use crate::model::CellDetr;

/// Stacks raw single-channel images into a normalized `[B, 1, S, S]` batch.
pub fn prepare_images<T: Scalar>(images: &[&[T]], size: usize) -> Result<Tensor<T>> {
    let n = size * size;
    let mut data = Vec::with_capacity(images.len() * n);
    for (i, img) in images.iter().enumerate() {
        if img.len() != n {
            return Err(Error::Shape(format!(
                "image {i} has {} pixels, expected {size}x{size}",
                img.len()
            )));
        }
        data.extend(normalize(img));
    }
    Ok(Tensor::from_vec(&[images.len(), 1, size, size], data)?)
}

/// Normalized input batch for `samples`.
pub fn prepare_batch<T: Scalar>(samples: &[Sample<T>], size: usize) -> Result<Tensor<T>> {
    let images: Vec<&[T]> = samples.iter().map(|s| s.image.as_slice()).collect();
    prepare_images(&images, size)
}

fn check_compatible<T: Scalar>(model: &CellDetr<T>, samples: &[Sample<T>]) -> Result<()> {
    let c = &model.config;
    if c.in_channels != 1 {
        return Err(Error::Config(format!(
            "model expects {} input channels, samples are single-channel",
            c.in_channels
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.size != c.input_size) {
        return Err(Error::Config(format!(
            "sample '{}' is {}x{}, model input is {}x{}",
            s.id, s.size, s.size, c.input_size, c.input_size
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.instances.len() > c.num_queries) {
        return Err(Error::Config(format!(
            "sample '{}' has {} instances, model has {} queries",
            s.id,
            s.instances.len(),
            c.num_queries
        )));
    }
    Ok(())
}

/// Derives an independent stream seed from a base seed and a counter.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
