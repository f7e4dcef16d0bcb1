//! Box geometry and optimal assignment of labels to query predictions.

use celldetr_tensor::{lit, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::data::{Class, InstanceSet};
use crate::error::{Error, Result};

/// Axis-aligned box in center-size form, normalized to the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        let two: T = lit(2.0);
        BoundingBox {
            cx: (x0 + x1) / two,
            cy: (y0 + y1) / two,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (T, T, T, T) {
        let half: T = lit(0.5);
        (
            self.cx - half * self.w,
            self.cy - half * self.h,
            self.cx + half * self.w,
            self.cy + half * self.h,
        )
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[T]) -> Self {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn cast<U: Scalar>(&self) -> BoundingBox<U> {
        let c = |v: T| U::from_f64_lossy(v.to_f64_lossy());
        BoundingBox::new(c(self.cx), c(self.cy), c(self.w), c(self.h))
    }

    /// Ground-truth validity: center inside the image, positive extent at most 1.
    pub fn is_valid_label(&self) -> bool {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        unit(self.cx) && unit(self.cy) && self.w > T::zero() && self.w <= T::one() && self.h > T::zero() && self.h <= T::one()
    }

    /// Sum of absolute coordinate differences.
    pub fn l1(&self, other: &Self) -> T {
        (self.cx - other.cx).abs() + (self.cy - other.cy).abs() + (self.w - other.w).abs() + (self.h - other.h).abs()
    }
}

struct Overlap<T> {
    inter: T,
    union: T,
    enclosing: T,
}

fn overlap<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> Overlap<T> {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(T::zero());
    let ih = (ay1.min(by1) - ay0.max(by0)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Overlap { inter, union, enclosing }
}

/// Intersection over union of box areas.
///
/// Returns 0 for disjoint zero-area boxes and [`Error::DegenerateBoxes`] when
/// two zero-area boxes coincide.
pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> Result<T> {
    let o = overlap(a, b);
    if o.union > T::zero() {
        Ok(o.inter / o.union)
    } else if a == b {
        Err(Error::DegenerateBoxes)
    } else {
        Ok(T::zero())
    }
}

/// Generalized IoU: `IoU - |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> Result<T> {
    let o = overlap(a, b);
    let iou = iou(a, b)?;
    if o.enclosing > T::zero() {
        // the enclosing box never has less area than the union; rounding can
        // say otherwise when the two coincide
        Ok(iou - ((o.enclosing - o.union) / o.enclosing).max(T::zero()))
    } else {
        Ok(iou)
    }
}

/// GIoU together with its gradient with respect to `b` in `(cx, cy, w, h)`.
pub fn giou_with_grad<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> Result<(T, [T; 4])> {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let z = T::zero();
    let ind = |c: bool| if c { T::one() } else { z };
    let iw = ax1.min(bx1) - ax0.max(bx0);
    let ih = ay1.min(by1) - ay0.max(by0);
    let (iw_pos, ih_pos) = (iw > z, ih > z);
    let (iw, ih) = (iw.max(z), ih.max(z));
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = ax1.max(bx1) - ax0.min(bx0);
    let ch = ay1.max(by1) - ay0.min(by0);
    let enclosing = cw * ch;
    if !(union > z) || !(enclosing > z) {
        return giou(a, b).map(|g| (g, [z; 4]));
    }
    let value = inter / union - ((enclosing - union) / enclosing).max(z);

    // partials with respect to b's corners (x0, x1, y0, y1)
    let (bw, bh) = (bx1 - bx0, by1 - by0);
    let d_inter = [
        -ih * ind(iw_pos && ih_pos && bx0 > ax0),
        ih * ind(iw_pos && ih_pos && bx1 < ax1),
        -iw * ind(iw_pos && ih_pos && by0 > ay0),
        iw * ind(iw_pos && ih_pos && by1 < ay1),
    ];
    let d_area = [-bh, bh, -bw, bw];
    let d_encl = [-ch * ind(bx0 < ax0), ch * ind(bx1 > ax1), -cw * ind(by0 < ay0), cw * ind(by1 > ay1)];
    let mut d = [z; 4];
    for k in 0..4 {
        let du = d_area[k] - d_inter[k];
        d[k] = d_inter[k] / union - inter * du / (union * union) + du / enclosing
            - union * d_encl[k] / (enclosing * enclosing);
    }
    let half: T = lit(0.5);
    Ok((
        value,
        [d[0] + d[1], d[2] + d[3], half * (d[1] - d[0]), half * (d[3] - d[2])],
    ))
}

/// Dense `rows × cols` matrix of finite assignment costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    rows: usize,
    cols: usize,
    entries: Vec<T>,
}

impl<T: Scalar> CostMatrix<T> {
    pub fn new(rows: usize, cols: usize, entries: Vec<T>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::CostMatrix(format!(
                "{} entries for a {}x{} matrix",
                entries.len(),
                rows,
                cols
            )));
        }
        if rows > cols {
            return Err(Error::CostMatrix(format!("{rows} rows exceed {cols} columns")));
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::CostMatrix(format!("non-finite entry at ({}, {})", i / cols, i % cols)));
        }
        Ok(CostMatrix { rows, cols, entries })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.entries[row * self.cols + col]
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }
}

/// Assignment of each label (row) to a distinct query (column).
#[derive(Debug, Clone, PartialEq)]
pub struct Matching<T> {
    pub sigma: Vec<usize>,
    pub total_cost: T,
}

impl<T: Scalar> Matching<T> {
    /// Inverse map: for each query, the label assigned to it.
    pub fn query_to_label(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; num_queries];
        for (label, &q) in self.sigma.iter().enumerate() {
            inv[q] = Some(label);
        }
        inv
    }
}

/// Minimum-cost injective assignment of rows to columns (Kuhn–Munkres with
/// potentials, O(rows² · cols)).
///
/// Ties resolve towards lower column indices: candidates are scanned in
/// ascending order and only a strictly smaller reduced cost replaces the
/// current choice.
pub fn hungarian_assign<T: Scalar>(cost: &CostMatrix<T>) -> Matching<T> {
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 {
        return Matching {
            sigma: Vec::new(),
            total_cost: T::zero(),
        };
    }
    // 1-based arrays; column 0 is a virtual root.
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![T::infinity(); m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = T::infinity();
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            sigma[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = sigma
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (r, &c)| acc + cost.get(r, c));
    Matching { sigma, total_cost }
}

/// Matching cost between padded labels (rows) and queries (columns).
///
/// Rows `0..labels.len()` hold the real instances; the remaining rows up to
/// `num_queries` stand for no-object labels and only carry the class term.
/// `class_probs` is `[N, K]` row-major and `boxes` has `N` entries.
pub fn matching_cost<T: Scalar>(
    labels: &InstanceSet<T>,
    class_probs: &[T],
    boxes: &[BoundingBox<T>],
    cfg: &LossConfig,
) -> Result<CostMatrix<T>> {
    let (n, k) = (cfg.num_queries, cfg.num_classes);
    if class_probs.len() != n * k || boxes.len() != n {
        return Err(Error::Shape(format!(
            "predictions hold {} class probabilities and {} boxes, expected {}x{} and {}",
            class_probs.len(),
            boxes.len(),
            n,
            k,
            n
        )));
    }
    if labels.len() > n {
        return Err(Error::Shape(format!("{} instances exceed {} queries", labels.len(), n)));
    }
    let (lj, ll1): (T, T) = (lit(cfg.lambda_giou), lit(cfg.lambda_l1));
    let mut entries = Vec::with_capacity(n * n);
    for row in 0..n {
        for q in 0..n {
            let probs = &class_probs[q * k..(q + 1) * k];
            let c = if row < labels.len() {
                let target = &labels.boxes[row];
                -probs[labels.classes[row].index()]
                    + lj * (T::one() - giou(target, &boxes[q])?)
                    + ll1 * target.l1(&boxes[q])
            } else {
                -probs[Class::NoObject.index()]
            };
            entries.push(c);
        }
    }
    CostMatrix::new(n, n, entries)
}
