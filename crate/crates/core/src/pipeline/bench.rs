use std::time::Instant;

use celldetr_tensor::{Graph, Scalar};

use super::prepare_images;
use crate::error::{Error, Result};
use crate::model::CellDetr;

/// Untimed passes before measurement starts.
pub const WARMUP_PASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub runs: usize,
    pub mean_ms: f64,
    /// Standard deviation of the single-pass times.
    pub std_ms: f64,
}

impl LatencyReport {
    pub fn relative_std(&self) -> f64 {
        self.std_ms / self.mean_ms
    }
}

/// Times `runs` single-image forward passes, cycling through `images`
/// (raw `S×S` intensities), after [`WARMUP_PASSES`] untimed passes.
pub fn benchmark_latency<T: Scalar>(model: &CellDetr<T>, images: &[Vec<T>], runs: usize) -> Result<LatencyReport> {
    if images.is_empty() || runs == 0 {
        return Err(Error::Config("latency benchmark needs at least one image and one run".into()));
    }
    let size = model.config.input_size;
    let inputs = images
        .iter()
        .map(|img| prepare_images(&[img.as_slice()], size))
        .collect::<Result<Vec<_>>>()?;
    let pass = |i: usize| -> Result<()> {
        let g = Graph::inference();
        let x = g.input(inputs[i % inputs.len()].clone());
        let out = model.forward(&g, x)?;
        std::hint::black_box(g.value(out.mask_probs));
        Ok(())
    };
    for i in 0..WARMUP_PASSES {
        pass(i)?;
    }
    let mut times = Vec::with_capacity(runs);
    for i in 0..runs {
        let t = Instant::now();
        pass(i)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / runs as f64;
    Ok(LatencyReport {
        runs,
        mean_ms: mean,
        std_ms: var.sqrt(),
    })
}
