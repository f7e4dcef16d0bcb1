use std::io::Write;

use celldetr_tensor::Scalar;
use image::{Rgb, RgbImage};
use serde::Serialize;

use super::{check_compatible, prepare_batch, prepare_images};
use crate::boxmatch::BoundingBox;
use crate::config::LossConfig;
use crate::data::{Class, InstanceSet, Mask, Sample};
use crate::error::{Error, Result};
use crate::losses::PredictionSet;
use crate::metrics::{binarize, EvalReport, MetricAccumulator};
use crate::model::CellDetr;

const EVAL_BATCH: usize = 8;

/// Metrics of `model` over `samples`, in inference mode.
pub fn evaluate<T: Scalar>(model: &CellDetr<T>, samples: &[Sample<T>], cfg: &LossConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    check_compatible(model, samples)?;
    if cfg.num_queries != model.config.num_queries || cfg.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "loss configuration ({} queries, {} classes) does not match the model ({}, {})",
            cfg.num_queries, cfg.num_classes, model.config.num_queries, model.config.num_classes
        )));
    }
    let mut acc = MetricAccumulator::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let preds = model.infer(prepare_batch(chunk, model.config.input_size)?)?;
        for (s, p) in chunk.iter().zip(&preds) {
            acc.add(&s.instances, p, cfg)?;
        }
    }
    Ok(acc.report())
}

/// One detected object.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance<T> {
    pub query: usize,
    pub class: Class,
    /// Largest class probability of the query.
    pub confidence: f64,
    pub bbox: BoundingBox<T>,
    pub mask: Mask,
}

/// Output of [`predict`].
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub instances: Vec<PredictedInstance<T>>,
    pub overlay: RgbImage,
    pub raw: PredictionSet<T>,
}

/// Hard instances from soft predictions: every pixel goes to the query with
/// the largest mask probability, pixels won by no-object queries are
/// background, and queries of class no-object or without pixels are dropped.
pub fn instances_from_predictions<T: Scalar>(preds: &PredictionSet<T>) -> Vec<PredictedInstance<T>> {
    let bin = binarize(preds);
    (0..preds.num_queries)
        .filter_map(|q| {
            let (class, p) = preds.argmax_class(q);
            if class == Class::NoObject {
                return None;
            }
            let mask = bin.mask(q, preds.height, preds.width);
            (!mask.is_empty()).then(|| PredictedInstance {
                query: q,
                class,
                confidence: p.to_f64_lossy(),
                bbox: preds.boxes[q],
                mask,
            })
        })
        .collect()
}

/// Detects instances in one raw `S×S` grayscale image with values in `[0, 1]`.
/// Images of any other size are rejected.
pub fn predict<T: Scalar>(model: &CellDetr<T>, image: &[T], width: usize, height: usize) -> Result<Prediction<T>> {
    let size = model.config.input_size;
    if width != size || height != size || image.len() != size * size {
        return Err(Error::Shape(format!(
            "input is {width}x{height} ({} values), the model takes {size}x{size} crops",
            image.len()
        )));
    }
    let raw = model
        .infer(prepare_images(&[image], size)?)?
        .pop()
        .expect("one prediction per image");
    let instances = instances_from_predictions(&raw);
    let overlay = render_overlay(image, size, &instances);
    Ok(Prediction { instances, overlay, raw })
}

/// Shades instances over the image: cells violet, traps grey, each instance
/// a little darker than the previous one of its class.
pub fn render_overlay<T: Scalar>(image: &[T], size: usize, instances: &[PredictedInstance<T>]) -> RgbImage {
    let vals: Vec<f64> = image.iter().map(|v| v.to_f64_lossy()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let v = ((vals[y as usize * size + x as usize] - lo) / range * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    let mut seen = [0usize; 3];
    for inst in instances {
        let k = seen[inst.class.index()];
        seen[inst.class.index()] += 1;
        let base = match inst.class {
            Class::Cell => [148.0, 64.0, 220.0],
            _ => [150.0, 150.0, 150.0],
        };
        let shade = 1.0 - 0.15 * (k % 4) as f64;
        for (p, _) in inst.mask.bits.iter().enumerate().filter(|(_, &b)| b) {
            let px = out.get_pixel_mut((p % size) as u32, (p / size) as u32);
            for c in 0..3 {
                px.0[c] = (0.45 * px.0[c] as f64 + 0.55 * base[c] * shade).round() as u8;
            }
        }
    }
    out
}

/// Area and summed fluorescence of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluorescenceMeasurement {
    pub id: String,
    pub class: Class,
    pub area_px: usize,
    pub fluorescence_au: f64,
}

/// Measures every cell among `(class, mask)` pairs; traps are skipped. Ids
/// are `<prefix>/<index of the cell>`.
pub fn measure_instances<'a, T: Scalar>(
    prefix: &str,
    instances: impl IntoIterator<Item = (Class, &'a Mask)>,
    fluorescence: &[T],
) -> Result<Vec<FluorescenceMeasurement>> {
    let mut out = Vec::new();
    for (class, mask) in instances {
        if class != Class::Cell {
            continue;
        }
        if mask.bits.len() != fluorescence.len() {
            return Err(Error::Shape(format!(
                "mask has {} pixels, fluorescence image {}",
                mask.bits.len(),
                fluorescence.len()
            )));
        }
        let total = mask
            .bits
            .iter()
            .zip(fluorescence)
            .filter(|(&b, _)| b)
            .map(|(_, v)| v.to_f64_lossy())
            .sum();
        out.push(FluorescenceMeasurement {
            id: format!("{prefix}/{}", out.len()),
            class,
            area_px: mask.area(),
            fluorescence_au: total,
        });
    }
    Ok(out)
}

/// Measures the labelled cells of `labels` directly.
pub fn measure_labels<T: Scalar>(prefix: &str, labels: &InstanceSet<T>, fluorescence: &[T]) -> Result<Vec<FluorescenceMeasurement>> {
    measure_instances(prefix, labels.classes.iter().copied().zip(&labels.masks), fluorescence)
}

/// Segments `brightfield` with the model and measures each predicted cell
/// in the registered `fluorescence` image.
pub fn measure_fluorescence<T: Scalar>(
    model: &CellDetr<T>,
    prefix: &str,
    brightfield: &[T],
    fluorescence: &[T],
    size: usize,
) -> Result<Vec<FluorescenceMeasurement>> {
    if brightfield.len() != fluorescence.len() {
        return Err(Error::Shape(format!(
            "brightfield has {} pixels, fluorescence {}",
            brightfield.len(),
            fluorescence.len()
        )));
    }
    let pred = predict(model, brightfield, size, size)?;
    measure_instances(prefix, pred.instances.iter().map(|i| (i.class, &i.mask)), fluorescence)
}

/// Writes measurements as CSV with columns `id, class, area_px, fluorescence_au`.
pub fn write_measurements_csv<W: Write>(out: W, rows: &[FluorescenceMeasurement]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<measurements>", e))
}
