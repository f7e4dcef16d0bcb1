//! Procedural brightfield scenes of trap structures holding yeast-like cells.

use celldetr_tensor::{lit, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Class, InstanceSet, Mask, Sample, IMAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Traps without cells.
    EmptyTrap,
    /// One trapped cell.
    SingleCell,
    /// Two to four cells.
    MultipleCells,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::EmptyTrap, Scenario::SingleCell, Scenario::MultipleCells];
}

struct Trap {
    x0: i32,
    x1: i32,
    y0: i32,
    y1: i32,
    wall: i32,
}

impl Trap {
    /// U-shaped bracket open towards the top.
    fn contains(&self, y: i32, x: i32) -> bool {
        if y < self.y0 || y > self.y1 || x < self.x0 || x > self.x1 {
            return false;
        }
        x < self.x0 + self.wall || x > self.x1 - self.wall || y > self.y1 - self.wall
    }

    fn cup_floor(&self) -> i32 {
        self.y1 - self.wall
    }

    fn cx(&self) -> f64 {
        (self.x0 + self.x1) as f64 / 2.0
    }
}

struct Cell {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Cell {
    /// Elliptic distance, 1 on the boundary.
    fn radius_at(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

fn sample_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(0x2545_F491)
}

/// Generates `count` scenes; the scenario cycles through [`Scenario::ALL`].
pub fn synth_generate<T: Scalar>(count: usize, seed: u64) -> Vec<Sample<T>> {
    (0..count)
        .map(|i| {
            synth_sample(
                format!("synth_{seed}_{i:05}"),
                sample_seed(seed, i as u64),
                Scenario::ALL[i % 3],
            )
        })
        .collect()
}

/// Renders one scene.
///
/// Brightfield intensities are quantized to 16 bits so they survive a PNG
/// round trip unchanged. The fluorescence channel holds integer counts and
/// `fluorescence_truth` records each instance's total.
pub fn synth_sample<T: Scalar>(id: String, seed: u64, scenario: Scenario) -> Sample<T> {
    let n = IMAGE_SIZE as i32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two_traps = rng.random_bool(0.35);
    let centers: Vec<i32> = if two_traps {
        vec![rng.random_range(28..=36), rng.random_range(92..=100)]
    } else {
        vec![rng.random_range(44..=84)]
    };
    let traps: Vec<Trap> = centers
        .iter()
        .map(|&cx| {
            let half_w = if two_traps { rng.random_range(15..=19) } else { rng.random_range(16..=22) };
            let height = rng.random_range(28..=38);
            let bottom = rng.random_range(78..=108);
            Trap {
                x0: cx - half_w,
                x1: cx + half_w,
                y0: bottom - height,
                y1: bottom,
                wall: rng.random_range(5..=7),
            }
        })
        .collect();

    let num_cells = match scenario {
        Scenario::EmptyTrap => 0,
        Scenario::SingleCell => 1,
        Scenario::MultipleCells => rng.random_range(2..=4),
    };
    // stack cells inside the cups, round-robin over traps
    let mut cells = Vec::new();
    let mut stack_top: Vec<f64> = traps.iter().map(|t| t.cup_floor() as f64).collect();
    for k in 0..num_cells {
        let t = k % traps.len();
        let ry = rng.random_range(6.0..9.5);
        let rx = rng.random_range(6.5..10.5);
        let cy = stack_top[t] - ry + rng.random_range(0.5..1.5);
        stack_top[t] = cy - ry;
        cells.push(Cell {
            cy,
            cx: traps[t].cx() + rng.random_range(-2.5..2.5),
            ry,
            rx,
            angle: rng.random_range(-0.4..0.4),
        });
    }

    let mut owner: Vec<Option<usize>> = vec![None; IMAGE_SIZE * IMAGE_SIZE];
    let mut instances = InstanceSet::<T>::default();
    let mut kinds = Vec::new();
    for trap in &traps {
        let idx = kinds.len();
        let mask = Mask::from_fn(IMAGE_SIZE, IMAGE_SIZE, |y, x| trap.contains(y as i32, x as i32));
        for (o, &b) in owner.iter_mut().zip(&mask.bits) {
            if b {
                *o = Some(idx);
            }
        }
        instances.push_mask(Class::Trap, mask);
        kinds.push(None);
    }
    for (ci, cell) in cells.iter().enumerate() {
        let mask = Mask::from_fn(IMAGE_SIZE, IMAGE_SIZE, |y, x| {
            owner[y * IMAGE_SIZE + x].is_none() && cell.radius_at(y as f64 + 0.5, x as f64 + 0.5) <= 1.0
        });
        if mask.area() < 24 {
            continue;
        }
        let idx = kinds.len();
        for (o, &b) in owner.iter_mut().zip(&mask.bits) {
            if b {
                *o = Some(idx);
            }
        }
        instances.push_mask(Class::Cell, mask);
        kinds.push(Some(ci));
    }

    // brightfield
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let base = rng.random_range(0.5..0.6);
    let (gy, gx) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let trap_level = rng.random_range(0.18..0.28);
    let cell_levels: Vec<f64> = cells.iter().map(|_| rng.random_range(0.72..0.85)).collect();
    let mut image = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = base + gy * (fy / n as f64 - 0.5) + gx * (fx / n as f64 - 0.5);
            match owner[(y * n + x) as usize].map(|o| kinds[o]) {
                Some(None) => v = trap_level,
                Some(Some(ci)) => {
                    let r = cells[ci].radius_at(fy, fx);
                    // dark membrane ring around a bright interior
                    v = if r > 0.78 { 0.3 } else { cell_levels[ci] };
                }
                None => {}
            }
            v += noise.sample(&mut rng);
            image.push(quantize16(v));
        }
    }

    // fluorescence counts
    let cell_counts: Vec<u32> = cells.iter().map(|_| rng.random_range(100..1000)).collect();
    let mut fluor = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for o in &owner {
        let v = match o.map(|o| kinds[o]) {
            Some(Some(ci)) => cell_counts[ci] + rng.random_range(0..40),
            _ => rng.random_range(0..6),
        };
        fluor.push(v as f64);
    }
    let truth: Vec<f64> = instances
        .masks
        .iter()
        .map(|m| m.bits.iter().zip(&fluor).filter(|(&b, _)| b).map(|(_, &f)| f).sum())
        .collect();

    Sample {
        id,
        size: IMAGE_SIZE,
        image: image.into_iter().map(lit).collect(),
        fluorescence: Some(fluor.into_iter().map(lit).collect()),
        instances,
        fluorescence_truth: Some(truth),
    }
}

fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}
