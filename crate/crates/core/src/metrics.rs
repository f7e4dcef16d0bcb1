//! Segmentation, detection and classification metrics.
//!
//! Pixel metrics are pooled over all images of a split (counts are summed
//! before dividing); instance and box metrics average over all ground-truth
//! instances of the split.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use celldetr_tensor::{lit, Scalar};

use crate::boxmatch::{hungarian_assign, iou, matching_cost, BoundingBox};
use crate::config::LossConfig;
use crate::data::{Class, InstanceSet, Mask};
use crate::error::{Error, Result};
use crate::losses::PredictionSet;

/// Per-pixel class map of the ground truth; uncovered pixels are background
/// ([`Class::NoObject`]).
pub fn semantic_map<T: Scalar>(instances: &InstanceSet<T>, height: usize, width: usize) -> Vec<Class> {
    let mut map = vec![Class::NoObject; height * width];
    for (c, m) in instances.classes.iter().zip(&instances.masks) {
        for (px, &b) in map.iter_mut().zip(&m.bits) {
            if b {
                *px = *c;
            }
        }
    }
    map
}

/// Hard instance assignment derived from a prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct Binarized {
    /// Winning query of each pixel, `None` where the winner predicts no-object.
    pub query_map: Vec<Option<usize>>,
    pub semantic: Vec<Class>,
    /// Predicted class of every query.
    pub query_classes: Vec<Class>,
}

impl Binarized {
    /// Mask of a query's pixels (empty for no-object queries).
    pub fn mask(&self, query: usize, height: usize, width: usize) -> Mask {
        Mask {
            height,
            width,
            bits: self.query_map.iter().map(|&q| q == Some(query)).collect(),
        }
    }
}

/// Per-pixel argmax over all queries; pixels won by a query whose most
/// probable class is no-object become background.
pub fn binarize<T: Scalar>(preds: &PredictionSet<T>) -> Binarized {
    let hw = preds.height * preds.width;
    let query_classes: Vec<Class> = (0..preds.num_queries).map(|q| preds.argmax_class(q).0).collect();
    let mut best = vec![0usize; hw];
    let mut best_p = preds.mask(0).to_vec();
    for q in 1..preds.num_queries {
        for ((b, bp), &p) in best.iter_mut().zip(best_p.iter_mut()).zip(preds.mask(q)) {
            if p > *bp {
                *bp = p;
                *b = q;
            }
        }
    }
    let query_map: Vec<Option<usize>> = best
        .iter()
        .map(|&q| (query_classes[q] != Class::NoObject).then_some(q))
        .collect();
    let semantic = query_map
        .iter()
        .map(|q| q.map_or(Class::NoObject, |q| query_classes[q]))
        .collect();
    Binarized {
        query_map,
        semantic,
        query_classes,
    }
}

/// Pixel-level counts that pool across images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelCounts {
    pub pixels: u64,
    pub correct: u64,
    /// Foreground pixels (as `(pixel, class)` pairs) in label and prediction.
    pub fg_label: u64,
    pub fg_pred: u64,
    /// Foreground pixels with matching class on both sides.
    pub fg_inter: u64,
    /// Per class: intersection and union of the class regions.
    pub class_inter: [u64; 3],
    pub class_union: [u64; 3],
}

impl PixelCounts {
    pub fn from_maps(y: &[Class], y_hat: &[Class]) -> Self {
        assert_eq!(y.len(), y_hat.len(), "label and prediction maps differ in size");
        let mut c = PixelCounts {
            pixels: y.len() as u64,
            ..Default::default()
        };
        for (&a, &b) in y.iter().zip(y_hat) {
            c.correct += (a == b) as u64;
            c.fg_label += (a != Class::NoObject) as u64;
            c.fg_pred += (b != Class::NoObject) as u64;
            c.fg_inter += (a == b && a != Class::NoObject) as u64;
            for k in 0..3 {
                let (ia, ib) = (a.index() == k, b.index() == k);
                c.class_inter[k] += (ia && ib) as u64;
                c.class_union[k] += (ia || ib) as u64;
            }
        }
        c
    }

    pub fn merge(&mut self, o: &PixelCounts) {
        self.pixels += o.pixels;
        self.correct += o.correct;
        self.fg_label += o.fg_label;
        self.fg_pred += o.fg_pred;
        self.fg_inter += o.fg_inter;
        for k in 0..3 {
            self.class_inter[k] += o.class_inter[k];
            self.class_union[k] += o.class_union[k];
        }
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.fg_inter, self.fg_label + self.fg_pred)
    }

    pub fn foreground_jaccard(&self) -> f64 {
        ratio(self.fg_inter, self.fg_label + self.fg_pred - self.fg_inter)
    }

    pub fn class_jaccard(&self, class: Class) -> f64 {
        ratio(self.class_inter[class.index()], self.class_union[class.index()])
    }

    pub fn seg_accuracy(&self) -> f64 {
        ratio(self.correct, self.pixels)
    }
}

/// `num / den`, with the empty-vs-empty case scoring 1.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Dice coefficient of the foreground, background omitted.
pub fn dice_coefficient(y: &[Class], y_hat: &[Class]) -> f64 {
    PixelCounts::from_maps(y, y_hat).dice()
}

pub fn foreground_jaccard(y: &[Class], y_hat: &[Class]) -> f64 {
    PixelCounts::from_maps(y, y_hat).foreground_jaccard()
}

pub fn class_jaccard(y: &[Class], y_hat: &[Class], class: Class) -> f64 {
    PixelCounts::from_maps(y, y_hat).class_jaccard(class)
}

/// Fraction of pixels whose background/trap/cell label agrees.
pub fn seg_accuracy(y: &[Class], y_hat: &[Class]) -> f64 {
    PixelCounts::from_maps(y, y_hat).seg_accuracy()
}

pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    ratio(inter, union)
}

/// Unweighted mean of per-instance Jaccard indices; `None` without instances.
pub fn mean_instance_jaccard(ious: &[f64]) -> Option<f64> {
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Mean IoU over matched box pairs; `None` without pairs.
pub fn bbox_jaccard<T: Scalar>(pairs: &[(BoundingBox<T>, BoundingBox<T>)]) -> Result<Option<f64>> {
    let ious = pairs
        .iter()
        .map(|(a, b)| iou(a, b).map(|v| v.to_f64_lossy()))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_instance_jaccard(&ious))
}

/// Fraction of queries whose predicted class equals the assigned label.
pub fn classification_accuracy(predicted: &[Class], assigned: &[Class]) -> f64 {
    let correct = predicted.iter().zip(assigned).filter(|(a, b)| a == b).count();
    ratio(correct as u64, predicted.len() as u64)
}

/// Evaluation summary of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub dice: f64,
    pub foreground_jaccard: f64,
    pub class_jaccard: BTreeMap<Class, f64>,
    pub cell_jaccard: f64,
    pub mean_instance_jaccard: Option<f64>,
    pub seg_accuracy: f64,
    pub bbox_jaccard: Option<f64>,
    /// Computed over all queries, no-object assignments included.
    pub classification_accuracy: f64,
    pub counts: BTreeMap<Class, usize>,
}

impl EvalReport {
    /// Every metric, for range checks.
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![
            self.dice,
            self.foreground_jaccard,
            self.cell_jaccard,
            self.seg_accuracy,
            self.classification_accuracy,
        ];
        v.extend(self.class_jaccard.values());
        v.extend(self.mean_instance_jaccard);
        v.extend(self.bbox_jaccard);
        v
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.6}"))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "dice={:.6}", self.dice)?;
        writeln!(f, "foreground_jaccard={:.6}", self.foreground_jaccard)?;
        for (c, j) in &self.class_jaccard {
            writeln!(f, "jaccard_{}={:.6}", c.name(), j)?;
        }
        writeln!(f, "cell_jaccard={:.6}", self.cell_jaccard)?;
        writeln!(f, "mean_instance_jaccard={}", opt(self.mean_instance_jaccard))?;
        writeln!(f, "seg_accuracy={:.6}", self.seg_accuracy)?;
        writeln!(f, "bbox_jaccard={}", opt(self.bbox_jaccard))?;
        writeln!(f, "classification_accuracy={:.6}", self.classification_accuracy)?;
        writeln!(f, "classification_scope=all_queries")?;
        for (c, n) in &self.counts {
            writeln!(f, "count_{}={}", c.name(), n)?;
        }
        Ok(())
    }
}

impl FromStr for EvalReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("report line without '=': {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("report lacks '{k}'")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Config(format!("report field '{k}' is not a number")))
        };
        let optional = |k: &str| -> Result<Option<f64>> {
            match get(k)?.as_str() {
                "absent" => Ok(None),
                _ => num(k).map(Some),
            }
        };
        let mut class_jaccard = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for c in [Class::Trap, Class::Cell] {
            class_jaccard.insert(c, num(&format!("jaccard_{}", c.name()))?);
            counts.insert(c, num(&format!("count_{}", c.name()))? as usize);
        }
        Ok(EvalReport {
            samples: num("samples")? as usize,
            dice: num("dice")?,
            foreground_jaccard: num("foreground_jaccard")?,
            class_jaccard,
            cell_jaccard: num("cell_jaccard")?,
            mean_instance_jaccard: optional("mean_instance_jaccard")?,
            seg_accuracy: num("seg_accuracy")?,
            bbox_jaccard: optional("bbox_jaccard")?,
            classification_accuracy: num("classification_accuracy")?,
            counts,
        })
    }
}

/// Accumulates metrics image by image.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    samples: usize,
    pixels: PixelCounts,
    instance_ious: Vec<f64>,
    box_ious: Vec<f64>,
    queries: u64,
    queries_correct: u64,
    counts: BTreeMap<Class, usize>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image. Predictions are paired with labels by the training
    /// matching cost.
    pub fn add<T: Scalar>(&mut self, labels: &InstanceSet<T>, preds: &PredictionSet<T>, cfg: &LossConfig) -> Result<()> {
        let (h, w) = (preds.height, preds.width);
        let cost = matching_cost(labels, &preds.class_probs, &preds.boxes, cfg)?;
        let matching = hungarian_assign(&cost);
        let bin = binarize(preds);
        self.samples += 1;
        self.pixels.merge(&PixelCounts::from_maps(&semantic_map(labels, h, w), &bin.semantic));
        for (row, &q) in matching.sigma.iter().enumerate() {
            let assigned = labels.classes.get(row).copied().unwrap_or(Class::NoObject);
            self.queries += 1;
            self.queries_correct += (bin.query_classes[q] == assigned) as u64;
            if row < labels.len() {
                self.instance_ious.push(mask_iou(&labels.masks[row], &bin.mask(q, h, w)));
                self.box_ious.push(iou(&labels.boxes[row], &preds.boxes[q])?.to_f64_lossy());
                *self.counts.entry(assigned).or_default() += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.samples += other.samples;
        self.pixels.merge(&other.pixels);
        self.instance_ious.extend(&other.instance_ious);
        self.box_ious.extend(&other.box_ious);
        self.queries += other.queries;
        self.queries_correct += other.queries_correct;
        for (c, n) in &other.counts {
            *self.counts.entry(*c).or_default() += n;
        }
    }

    pub fn report(&self) -> EvalReport {
        let mut counts = BTreeMap::new();
        let mut class_jaccard = BTreeMap::new();
        for c in [Class::Trap, Class::Cell] {
            counts.insert(c, self.counts.get(&c).copied().unwrap_or(0));
            class_jaccard.insert(c, self.pixels.class_jaccard(c));
        }
        EvalReport {
            samples: self.samples,
            dice: self.pixels.dice(),
            foreground_jaccard: self.pixels.foreground_jaccard(),
            cell_jaccard: self.pixels.class_jaccard(Class::Cell),
            class_jaccard,
            mean_instance_jaccard: mean_instance_jaccard(&self.instance_ious),
            seg_accuracy: self.pixels.seg_accuracy(),
            bbox_jaccard: mean_instance_jaccard(&self.box_ious),
            classification_accuracy: ratio(self.queries_correct, self.queries),
            counts,
        }
    }
}

/// Predictions that reproduce `labels` exactly: one-hot classes, exact boxes
/// and one-hot masks, with background pixels owned by a no-object query.
pub fn oracle_predictions<T: Scalar>(labels: &InstanceSet<T>, cfg: &LossConfig, height: usize, width: usize) -> PredictionSet<T> {
    let (n, k) = (cfg.num_queries, cfg.num_classes);
    assert!(labels.len() < n, "oracle needs a spare query for the background");
    let hw = height * width;
    let mut class_probs = vec![T::zero(); n * k];
    let mut boxes = vec![BoundingBox::new(lit(0.5), lit(0.5), lit(0.1), lit(0.1)); n];
    let mut mask_probs = vec![T::zero(); n * hw];
    for q in 0..n {
        let class = labels.classes.get(q).copied().unwrap_or(Class::NoObject);
        class_probs[q * k + class.index()] = T::one();
        if q < labels.len() {
            boxes[q] = labels.boxes[q];
        }
    }
    let background = labels.len();
    for p in 0..hw {
        let owner = labels.masks.iter().position(|m| m.bits[p]).unwrap_or(background);
        mask_probs[owner * hw + p] = T::one();
    }
    PredictionSet {
        num_queries: n,
        num_classes: k,
        height,
        width,
        class_probs,
        boxes,
        mask_probs,
    }
}
