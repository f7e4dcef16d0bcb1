//! Samples, annotations, disk format, splitting, augmentation and the
//! synthetic trap/cell scene generator.

mod augment;
mod io;
mod split;
mod synth;

use celldetr_tensor::{lit, Scalar};
use serde::{Deserialize, Serialize};

use crate::boxmatch::BoundingBox;
use crate::error::{Error, Result};

pub use augment::{add_noise, augment, elastic, hflip, AugmentConfig, Augmentation};
pub use io::{load_dataset, load_split, read_gray, save_dataset, save_sample, save_split, write_gray16, MAX_INSTANCES};
pub use split::{split_dataset, DatasetSplit, DEFAULT_FRACTIONS};
pub use synth::{synth_generate, synth_sample, Scenario};

/// Image side length used throughout.
pub const IMAGE_SIZE: usize = 128;

/// Instance class; index 0 is the no-object class predicted by unused queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    #[serde(rename = "none")]
    NoObject,
    Trap,
    Cell,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::NoObject, Class::Trap, Class::Cell];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::NoObject => "none",
            Class::Trap => "trap",
            Class::Cell => "cell",
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask { height, width, bits }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn overlaps(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    /// Inclusive pixel bounds `(y0, x0, y1, x1)` of the foreground.
    pub fn pixel_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        b
    }

    /// Tight normalized box around the foreground; pixel `i` spans `[i, i + 1)`.
    pub fn bounding_box<T: Scalar>(&self) -> Option<BoundingBox<T>> {
        let (y0, x0, y1, x1) = self.pixel_bounds()?;
        let (w, h) = (self.width as f64, self.height as f64);
        Some(BoundingBox::from_corners(
            lit(x0 as f64 / w),
            lit(y0 as f64 / h),
            lit((x1 + 1) as f64 / w),
            lit((y1 + 1) as f64 / h),
        ))
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }
}

/// Annotated instances of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet<T> {
    pub classes: Vec<Class>,
    pub boxes: Vec<BoundingBox<T>>,
    pub masks: Vec<Mask>,
}

impl<T: Scalar> Default for InstanceSet<T> {
    fn default() -> Self {
        InstanceSet {
            classes: Vec::new(),
            boxes: Vec::new(),
            masks: Vec::new(),
        }
    }
}

impl<T: Scalar> InstanceSet<T> {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Adds an instance whose box is the tight box of `mask`. Empty masks are
    /// rejected.
    pub fn push_mask(&mut self, class: Class, mask: Mask) -> bool {
        match mask.bounding_box() {
            Some(b) => {
                self.classes.push(class);
                self.boxes.push(b);
                self.masks.push(mask);
                true
            }
            None => false,
        }
    }

    pub fn count(&self, class: Class) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    pub fn cast<U: Scalar>(&self) -> InstanceSet<U> {
        InstanceSet {
            classes: self.classes.clone(),
            boxes: self.boxes.iter().map(|b| b.cast()).collect(),
            masks: self.masks.clone(),
        }
    }

    /// Checks the annotation invariants: real classes, valid boxes that bound
    /// their masks within one pixel, pairwise disjoint masks, at most
    /// `max_instances` entries.
    pub fn validate(&self, height: usize, width: usize, max_instances: usize) -> std::result::Result<(), String> {
        if self.boxes.len() != self.len() || self.masks.len() != self.len() {
            return Err("classes, boxes and masks differ in length".into());
        }
        if self.len() > max_instances {
            return Err(format!("{} instances exceed the limit of {}", self.len(), max_instances));
        }
        for (i, ((c, b), m)) in self.classes.iter().zip(&self.boxes).zip(&self.masks).enumerate() {
            if *c == Class::NoObject {
                return Err(format!("instance {i} has the no-object class"));
            }
            if !b.is_valid_label() {
                return Err(format!("instance {i} has an invalid box {:?}", b.to_array()));
            }
            if m.height != height || m.width != width {
                return Err(format!("instance {i} mask is {}x{}, expected {height}x{width}", m.height, m.width));
            }
            let tight: BoundingBox<T> = m.bounding_box().ok_or_else(|| format!("instance {i} has an empty mask"))?;
            let (a, t) = (b.corners(), tight.corners());
            let (w, h): (T, T) = (lit(width as f64), lit(height as f64));
            let tol: T = lit(1.0 + 1e-6);
            let diffs = [(a.0 - t.0) * w, (a.2 - t.2) * w, (a.1 - t.1) * h, (a.3 - t.3) * h];
            if diffs.iter().any(|d| d.abs() > tol) {
                return Err(format!("instance {i} box does not bound its mask within 1 px"));
            }
        }
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                if self.masks[i].overlaps(&self.masks[j]) {
                    return Err(format!("instance masks {i} and {j} overlap"));
                }
            }
        }
        Ok(())
    }
}

/// One annotated brightfield image.
///
/// `image` holds intensities in `[0, 1]`; the model normalizes on input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub size: usize,
    pub image: Vec<T>,
    pub fluorescence: Option<Vec<T>>,
    pub instances: InstanceSet<T>,
    /// Recorded per-instance fluorescence totals, when known (synthetic data).
    pub fluorescence_truth: Option<Vec<f64>>,
}

impl<T: Scalar> Sample<T> {
    pub fn validate(&self, max_instances: usize) -> Result<()> {
        let n = self.size * self.size;
        if self.image.len() != n {
            return Err(Error::sample(&self.id, format!("image has {} pixels, expected {}", self.image.len(), n)));
        }
        if self.fluorescence.as_ref().is_some_and(|f| f.len() != n) {
            return Err(Error::sample(&self.id, "fluorescence size differs from the image"));
        }
        if self.fluorescence_truth.as_ref().is_some_and(|f| f.len() != self.instances.len()) {
            return Err(Error::sample(&self.id, "fluorescence totals do not match the instances"));
        }
        self.instances
            .validate(self.size, self.size, max_instances)
            .map_err(|m| Error::sample(&self.id, m))
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        Sample {
            id: self.id.clone(),
            size: self.size,
            image: c(&self.image),
            fluorescence: self.fluorescence.as_ref().map(c),
            instances: self.instances.cast(),
            fluorescence_truth: self.fluorescence_truth.clone(),
        }
    }
}

/// Per-image standardization to zero mean and unit variance; constant images
/// map to zeros.
pub fn normalize<T: Scalar>(image: &[T]) -> Vec<T> {
    if image.is_empty() {
        return Vec::new();
    }
    let n = image.len() as f64;
    let mean = image.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    let var = image.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-24 * mean.abs().max(1.0) {
        return vec![T::zero(); image.len()];
    }
    let inv = 1.0 / var.sqrt();
    image.iter().map(|v| lit((v.to_f64_lossy() - mean) * inv)).collect()
}
