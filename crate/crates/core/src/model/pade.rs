//! Initial coefficients of rational (Padé) activations.

use std::sync::OnceLock;

use celldetr_tensor::pade_eval;
use nalgebra::{DMatrix, DVector};

pub const NUMERATOR_ORDER: usize = 5;
pub const DENOMINATOR_ORDER: usize = 4;

/// Numerator `a_0..a_m` and denominator `b_1..b_n` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PadeCoefficients {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
}

impl PadeCoefficients {
    pub fn eval(&self, x: f64) -> f64 {
        pade_eval(x, &self.numerator, &self.denominator).0
    }

    /// Largest absolute deviation from `f` on an even grid over `[lo, hi]`.
    pub fn max_deviation(&self, f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> f64 {
        grid(lo, hi, points)
            .map(|x| (self.eval(x) - f(x)).abs())
            .fold(0.0, f64::max)
    }
}

fn grid(lo: f64, hi: f64, points: usize) -> impl Iterator<Item = f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(move |i| lo + step * i as f64)
}

/// Least-squares fit of `P(x) / (1 + |Σ b_j x^j|)` to `f` on `[lo, hi]`.
///
/// Starts from the linearized problem `P(x) - f(x) Σ b_j x^j = f(x)` and
/// refines the true objective with Levenberg–Marquardt.
pub fn fit(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> PadeCoefficients {
    let (m, n) = (NUMERATOR_ORDER, DENOMINATOR_ORDER);
    let xs: Vec<f64> = grid(lo, hi, 601).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let np = m + 1 + n;

    let mut lin = DMatrix::zeros(xs.len(), np);
    for (r, (&x, &y)) in xs.iter().zip(&ys).enumerate() {
        for i in 0..=m {
            lin[(r, i)] = x.powi(i as i32);
        }
        for j in 1..=n {
            lin[(r, m + j)] = -y * x.powi(j as i32);
        }
    }
    let rhs = DVector::from_column_slice(&ys);
    let mut theta = lin
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .expect("SVD with both factors");

    let residuals = |t: &DVector<f64>| -> DVector<f64> {
        let (a, b) = (&t.as_slice()[..=m], &t.as_slice()[m + 1..]);
        DVector::from_iterator(xs.len(), xs.iter().zip(&ys).map(|(&x, &y)| pade_eval(x, a, b).0 - y))
    };
    let mut lambda = 1e-3;
    let mut r = residuals(&theta);
    let mut cost = r.norm_squared();
    for _ in 0..300 {
        let (a, b) = (&theta.as_slice()[..=m], &theta.as_slice()[m + 1..]);
        let mut jac = DMatrix::zeros(xs.len(), np);
        for (row, &x) in xs.iter().enumerate() {
            let (_, _, q, p, sign) = pade_eval(x, a, b);
            for i in 0..=m {
                jac[(row, i)] = x.powi(i as i32) / q;
            }
            for j in 1..=n {
                jac[(row, m + j)] = -p * sign * x.powi(j as i32) / (q * q);
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj.clone();
            for d in 0..np {
                damped[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = &theta - step;
            let rc = residuals(&candidate);
            let c = rc.norm_squared();
            if c < cost {
                theta = candidate;
                r = rc;
                cost = c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    PadeCoefficients {
        numerator: theta.as_slice()[..=m].to_vec(),
        denominator: theta.as_slice()[m + 1..].to_vec(),
    }
}

/// Fit to leaky ReLU with slope 0.01 on `[-3, 3]`, computed once.
pub fn leaky_relu_init() -> &'static PadeCoefficients {
    static INIT: OnceLock<PadeCoefficients> = OnceLock::new();
    INIT.get_or_init(|| fit(leaky, -3.0, 3.0))
}

pub(crate) fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.01 * x
    }
}
