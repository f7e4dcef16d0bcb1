//! Set-prediction losses with analytic gradients with respect to the
//! predicted class probabilities, boxes and mask probabilities.

use celldetr_tensor::{lit, Scalar};

use crate::boxmatch::{giou_with_grad, hungarian_assign, matching_cost, BoundingBox, Matching};
use crate::config::LossConfig;
use crate::data::{Class, InstanceSet};
use crate::error::{Error, Result};

/// Predictions of one image over `N` queries.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet<T> {
    pub num_queries: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// `[N, K]`, each row on the simplex.
    pub class_probs: Vec<T>,
    pub boxes: Vec<BoundingBox<T>>,
    /// `[N, H, W]`, a distribution over queries at every pixel.
    pub mask_probs: Vec<T>,
}

impl<T: Scalar> PredictionSet<T> {
    pub fn probs(&self, query: usize) -> &[T] {
        &self.class_probs[query * self.num_classes..(query + 1) * self.num_classes]
    }

    pub fn mask(&self, query: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.mask_probs[query * hw..(query + 1) * hw]
    }

    /// Most probable class and its probability.
    pub fn argmax_class(&self, query: usize) -> (Class, T) {
        let p = self.probs(query);
        let mut best = 0;
        for (k, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = k;
            }
        }
        (Class::from_index(best).unwrap_or(Class::NoObject), p[best])
    }

    fn check(&self, cfg: &LossConfig) -> Result<()> {
        let (n, k) = (self.num_queries, self.num_classes);
        if n != cfg.num_queries || k != cfg.num_classes {
            return Err(Error::Shape(format!(
                "predictions have {n} queries and {k} classes, config expects {} and {}",
                cfg.num_queries, cfg.num_classes
            )));
        }
        if self.class_probs.len() != n * k
            || self.boxes.len() != n
            || self.mask_probs.len() != n * self.height * self.width
        {
            return Err(Error::Shape("prediction buffers do not match their declared sizes".into()));
        }
        Ok(())
    }
}

/// Weighted cross entropy of a one-hot label: `-β_k log p_k`, with `p_k`
/// floored. Returns the loss and its gradient with respect to `probs`.
pub fn classification_loss<T: Scalar>(label: Class, probs: &[T], cfg: &LossConfig) -> (T, Vec<T>) {
    let k = label.index();
    let beta: T = lit(cfg.class_weights[k]);
    let floor: T = lit(cfg.prob_floor);
    let p = probs[k];
    let mut grad = vec![T::zero(); probs.len()];
    if p > floor {
        grad[k] = -beta / p;
    }
    (-beta * p.max(floor).ln(), grad)
}

/// `λ_J (1 - GIoU(b, b̂)) + λ_L1 ‖b - b̂‖₁` and its gradient with respect to `b̂`.
pub fn bbox_loss<T: Scalar>(b: &BoundingBox<T>, b_hat: &BoundingBox<T>, cfg: &LossConfig) -> Result<(T, [T; 4])> {
    let (lj, ll1): (T, T) = (lit(cfg.lambda_giou), lit(cfg.lambda_l1));
    let (g, dg) = giou_with_grad(b, b_hat)?;
    let (t, p) = (b.to_array(), b_hat.to_array());
    let mut grad = [T::zero(); 4];
    for i in 0..4 {
        let sign = if p[i] > t[i] {
            T::one()
        } else if p[i] < t[i] {
            -T::one()
        } else {
            T::zero()
        };
        grad[i] = -lj * dg[i] + ll1 * sign;
    }
    Ok((lj * (T::one() - g) + ll1 * b.l1(b_hat), grad))
}

/// Mean binary focal loss `-(1 - p_t)^γ log p_t` over pixels, and its
/// gradient with respect to `prob`.
pub fn focal_loss<T: Scalar>(target: &[bool], prob: &[T], gamma: f64, floor: f64) -> (T, Vec<T>) {
    assert_eq!(target.len(), prob.len(), "focal loss: target and prob sizes differ");
    if prob.is_empty() {
        return (T::zero(), Vec::new());
    }
    let (g, fl): (T, T) = (lit(gamma), lit(floor));
    let inv_n = T::one() / T::from_usize(prob.len()).expect("pixel count");
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(prob.len());
    for (&t, &p) in target.iter().zip(prob) {
        let pt = if t { p } else { T::one() - p };
        let pc = pt.max(fl);
        let q = T::one() - pt;
        let log = pc.ln();
        let w = if gamma == 0.0 { T::one() } else { q.powf(g) };
        total += -w * log;
        let dw = if gamma == 0.0 { T::zero() } else { g * q.powf(g - T::one()) };
        let dlog = if pt > fl { T::one() / pt } else { T::zero() };
        let dpt = dw * log - w * dlog;
        grad.push(if t { dpt } else { -dpt } * inv_n);
    }
    (total * inv_n, grad)
}

/// Smoothed Dice loss `1 - (2 Σ t p + ε) / (Σ t + Σ p + ε)` and its gradient.
pub fn dice_loss<T: Scalar>(target: &[bool], prob: &[T], epsilon: f64) -> (T, Vec<T>) {
    assert_eq!(target.len(), prob.len(), "dice loss: target and prob sizes differ");
    let eps: T = lit(epsilon);
    let two: T = lit(2.0);
    let mut inter = T::zero();
    let mut sum = T::zero();
    for (&t, &p) in target.iter().zip(prob) {
        if t {
            inter += p;
            sum += T::one();
        }
        sum += p;
    }
    let num = two * inter + eps;
    let den = sum + eps;
    let grad = target
        .iter()
        .map(|&t| {
            let dnum = if t { two } else { T::zero() };
            -(dnum * den - num) / (den * den)
        })
        .collect();
    (T::one() - num / den, grad)
}

/// `λ_F focal + λ_D dice` and its gradient.
pub fn segmentation_loss<T: Scalar>(target: &[bool], prob: &[T], cfg: &LossConfig) -> (T, Vec<T>) {
    let (lf, ld): (T, T) = (lit(cfg.lambda_focal), lit(cfg.lambda_dice));
    let (f, gf) = focal_loss(target, prob, cfg.gamma, cfg.prob_floor);
    let (d, gd) = dice_loss(target, prob, cfg.epsilon);
    let grad = gf.iter().zip(&gd).map(|(&a, &b)| lf * a + ld * b).collect();
    (lf * f + ld * d, grad)
}

/// Loss decomposition for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts<T> {
    pub class: T,
    pub bbox: T,
    pub seg: T,
}

impl<T: Scalar> LossParts<T> {
    pub fn total(&self) -> T {
        self.class + self.bbox + self.seg
    }
}

/// Result of [`combined_loss`]: value, decomposition, the matching used and
/// gradients with respect to every prediction buffer.
#[derive(Debug, Clone)]
pub struct CombinedLoss<T> {
    pub total: T,
    pub parts: LossParts<T>,
    /// `sigma[r]` is the query assigned to padded label row `r`; rows at and
    /// beyond the number of real instances are no-object labels.
    pub matching: Matching<T>,
    pub grad_class_probs: Vec<T>,
    pub grad_boxes: Vec<T>,
    pub grad_mask_probs: Vec<T>,
}

/// Matches labels (padded with no-object entries) to queries with the
/// Hungarian algorithm, then sums the classification loss over all queries
/// and box and segmentation losses over queries matched to real instances.
pub fn combined_loss<T: Scalar>(
    labels: &InstanceSet<T>,
    preds: &PredictionSet<T>,
    cfg: &LossConfig,
) -> Result<CombinedLoss<T>> {
    preds.check(cfg)?;
    let (n, k) = (preds.num_queries, preds.num_classes);
    if labels.len() > n {
        return Err(Error::Shape(format!("{} instances exceed {} queries", labels.len(), n)));
    }
    let hw = preds.height * preds.width;
    if labels.masks.iter().any(|m| m.height != preds.height || m.width != preds.width) {
        return Err(Error::Shape("label masks differ in size from predicted masks".into()));
    }
    let cost = matching_cost(labels, &preds.class_probs, &preds.boxes, cfg)?;
    let matching = hungarian_assign(&cost);
    let mut parts = LossParts::default();
    let mut grad_class_probs = vec![T::zero(); n * k];
    let mut grad_boxes = vec![T::zero(); n * 4];
    let mut grad_mask_probs = vec![T::zero(); n * hw];
    for (row, &q) in matching.sigma.iter().enumerate() {
        let class = labels.classes.get(row).copied().unwrap_or(Class::NoObject);
        let (lc, gc) = classification_loss(class, preds.probs(q), cfg);
        parts.class += lc;
        grad_class_probs[q * k..(q + 1) * k].copy_from_slice(&gc);
        if row < labels.len() {
            let (lb, gb) = bbox_loss(&labels.boxes[row], &preds.boxes[q], cfg)?;
            parts.bbox += lb;
            grad_boxes[q * 4..(q + 1) * 4].copy_from_slice(&gb);
            let (ls, gs) = segmentation_loss(&labels.masks[row].bits, preds.mask(q), cfg);
            parts.seg += ls;
            grad_mask_probs[q * hw..(q + 1) * hw].copy_from_slice(&gs);
        }
    }
    Ok(CombinedLoss {
        total: parts.total(),
        parts,
        matching,
        grad_class_probs,
        grad_boxes,
        grad_mask_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_examples() {
        let cfg = LossConfig::default();
        let u = [1.0 / 3.0; 3];
        assert_eq!(classification_loss(Class::Cell, &[0.0, 0.0, 1.0], &cfg).0, 0.0);
        assert!((classification_loss(Class::Cell, &u, &cfg).0 - 1.5 * 3f64.ln()).abs() < 1e-12);
        assert!((classification_loss(Class::NoObject, &u, &cfg).0 - 0.5 * 3f64.ln()).abs() < 1e-12);
        let (l, g) = classification_loss(Class::Trap, &[1.0f64, 0.0, 0.0], &cfg);
        assert!(l.is_finite() && (l - 0.5 * 1e8f64.ln()).abs() < 1e-9);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn focal_examples() {
        let (l, _) = focal_loss(&[true], &[0.5f64], 2.0, 1e-8);
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
        let (l, _) = focal_loss(&[true, false], &[1.0f64, 0.0], 2.0, 1e-8);
        assert_eq!(l, 0.0);
        let (l, _) = focal_loss(&[false], &[1.0f64], 2.0, 1e-8);
        assert!(l.is_finite());
    }

    #[test]
    fn dice_examples() {
        let t = [true, true, true, true, false, false, false, false];
        let p = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0f64];
        assert!((dice_loss(&t, &p, 1.0).0 - 4.0 / 9.0).abs() < 1e-12);
        assert_eq!(dice_loss(&[false; 4], &[0.0f64; 4], 1.0).0, 0.0);
        assert_eq!(dice_loss(&t, &t.map(|b| if b { 1.0f64 } else { 0.0 }), 1.0).0, 0.0);
    }

    #[test]
    fn bbox_examples() {
        let cfg = LossConfig::default();
        let b = BoundingBox::new(0.25f64, 0.25, 0.5, 0.5);
        let c = BoundingBox::new(0.5f64, 0.5, 0.5, 0.5);
        assert_eq!(bbox_loss(&b, &b, &cfg).unwrap().0, 0.0);
        assert!((bbox_loss(&b, &c, &cfg).unwrap().0 - (0.4 * (1.0 + 2.0 / 9.0 - 1.0 / 7.0) + 0.3)).abs() < 1e-12);
    }
}
