use celldetr_tensor::{lit, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{InstanceSet, Mask, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Chance that any augmentation is applied.
    pub probability: f64,
    /// Control points per side of the elastic displacement grid.
    pub elastic_grid: usize,
    /// Largest elastic displacement in pixels.
    pub elastic_max_displacement: f64,
    /// Noise standard deviation as a fraction of the image's dynamic range.
    pub noise_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probability: 0.6,
            elastic_grid: 4,
            elastic_max_displacement: 6.0,
            noise_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    Elastic,
    HorizontalFlip,
    Noise,
}

/// With probability `cfg.probability`, applies one augmentation chosen
/// uniformly among elastic deformation, horizontal flip and additive noise.
pub fn augment<T: Scalar>(sample: &Sample<T>, seed: u64, cfg: &AugmentConfig) -> (Sample<T>, Option<Augmentation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !rng.random_bool(cfg.probability.clamp(0.0, 1.0)) {
        return (sample.clone(), None);
    }
    match rng.random_range(0..3) {
        0 => (elastic(sample, &mut rng, cfg), Some(Augmentation::Elastic)),
        1 => (hflip(sample), Some(Augmentation::HorizontalFlip)),
        _ => (add_noise(sample, &mut rng, cfg.noise_fraction), Some(Augmentation::Noise)),
    }
}

fn flip_plane<T: Copy>(v: &[T], size: usize) -> Vec<T> {
    (0..size * size).map(|i| v[(i / size) * size + size - 1 - i % size]).collect()
}

/// Mirrors image, fluorescence, masks and boxes left to right.
pub fn hflip<T: Scalar>(sample: &Sample<T>) -> Sample<T> {
    let s = sample.size;
    let mut out = sample.clone();
    out.image = flip_plane(&sample.image, s);
    out.fluorescence = sample.fluorescence.as_ref().map(|f| flip_plane(f, s));
    out.instances.masks = sample.instances.masks.iter().map(Mask::flip_horizontal).collect();
    for b in &mut out.instances.boxes {
        b.cx = T::one() - b.cx;
    }
    out
}

/// Adds Gaussian noise with σ = `fraction` × (max − min) of the image.
pub fn add_noise<T: Scalar, R: Rng>(sample: &Sample<T>, rng: &mut R, fraction: f64) -> Sample<T> {
    let (lo, hi) = sample.image.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let v = v.to_f64_lossy();
        (lo.min(v), hi.max(v))
    });
    let sigma = fraction * (hi - lo).max(0.0);
    let mut out = sample.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in &mut out.image {
            *v = lit((v.to_f64_lossy() + normal.sample(rng)).clamp(0.0, 1.0));
        }
    }
    out
}

/// Smooth random displacement field `(dy, dx)` per pixel.
fn displacement_field<R: Rng>(rng: &mut R, size: usize, grid: usize, max_disp: f64) -> Vec<(f64, f64)> {
    let g = grid.max(2);
    let raw: Vec<(f64, f64)> = (0..g * g)
        .map(|_| (rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)))
        .collect();
    // 3x3 Gaussian smoothing (σ = 1 control cell) over the control grid
    let k = [0.274, 0.452, 0.274];
    let mut smooth = vec![(0.0, 0.0); g * g];
    for i in 0..g {
        for j in 0..g {
            let (mut sy, mut sx, mut wsum) = (0.0, 0.0, 0.0);
            for (di, wi) in k.iter().enumerate() {
                for (dj, wj) in k.iter().enumerate() {
                    let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    if ii < 0 || jj < 0 || ii >= g as isize || jj >= g as isize {
                        continue;
                    }
                    let w = wi * wj;
                    let (dy, dx) = raw[ii as usize * g + jj as usize];
                    sy += w * dy;
                    sx += w * dx;
                    wsum += w;
                }
            }
            smooth[i * g + j] = (sy / wsum, sx / wsum);
        }
    }
    let peak = smooth.iter().fold(0.0f64, |m, &(a, b)| m.max(a.abs()).max(b.abs()));
    let scale = if peak > 0.0 { max_disp / peak } else { 0.0 };
    let step = (size - 1) as f64 / (g - 1) as f64;
    let mut field = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (gy, gx) = (y as f64 / step, x as f64 / step);
            let (i0, j0) = ((gy.floor() as usize).min(g - 2), (gx.floor() as usize).min(g - 2));
            let (fy, fx) = (gy - i0 as f64, gx - j0 as f64);
            let at = |i: usize, j: usize| smooth[i * g + j];
            let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
            let top = lerp(at(i0, j0), at(i0, j0 + 1), fx);
            let bot = lerp(at(i0 + 1, j0), at(i0 + 1, j0 + 1), fx);
            let d = lerp(top, bot, fy);
            field.push((d.0 * scale, d.1 * scale));
        }
    }
    field
}

/// Elastic deformation: images are resampled bilinearly, masks by nearest
/// neighbour (which keeps them binary and disjoint); boxes are recomputed
/// from the deformed masks and instances that vanish are dropped.
pub fn elastic<T: Scalar, R: Rng>(sample: &Sample<T>, rng: &mut R, cfg: &AugmentConfig) -> Sample<T> {
    let s = sample.size;
    let field = displacement_field(rng, s, cfg.elastic_grid, cfg.elastic_max_displacement);
    let src = |i: usize| {
        let (dy, dx) = field[i];
        let y = ((i / s) as f64 + dy).clamp(0.0, (s - 1) as f64);
        let x = ((i % s) as f64 + dx).clamp(0.0, (s - 1) as f64);
        (y, x)
    };
    let bilinear = |plane: &[T]| -> Vec<T> {
        (0..s * s)
            .map(|i| {
                let (y, x) = src(i);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                let p = |yy: usize, xx: usize| plane[yy * s + xx].to_f64_lossy();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                lit(top * (1.0 - fy) + bot * fy)
            })
            .collect()
    };
    let nearest = |i: usize| {
        let (y, x) = src(i);
        (y.round() as usize).min(s - 1) * s + (x.round() as usize).min(s - 1)
    };
    let mut out = sample.clone();
    out.image = bilinear(&sample.image);
    out.fluorescence = sample
        .fluorescence
        .as_ref()
        .map(|f| (0..s * s).map(|i| f[nearest(i)]).collect());
    let mut instances = InstanceSet::default();
    let mut truth = Vec::new();
    for (k, (class, mask)) in sample.instances.classes.iter().zip(&sample.instances.masks).enumerate() {
        let warped = Mask {
            height: s,
            width: s,
            bits: (0..s * s).map(|i| mask.bits[nearest(i)]).collect(),
        };
        if instances.push_mask(*class, warped) {
            if let Some(f) = &out.fluorescence {
                let m = instances.masks.last().expect("just pushed");
                truth.push(m.bits.iter().zip(f).filter(|(&b, _)| b).map(|(_, v)| v.to_f64_lossy()).sum());
            }
        } else {
            log::warn!("sample '{}': elastic deformation removed instance {}", sample.id, k);
        }
    }
    out.instances = instances;
    out.fluorescence_truth = sample.fluorescence_truth.as_ref().and(out.fluorescence.as_ref()).map(|_| truth);
    out
}
