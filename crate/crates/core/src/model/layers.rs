//! Parameterized building blocks shared by the backbone, transformer and
//! segmentation head.

use celldetr_tensor::{lit, BatchNormStats, Graph, Group, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pade;
use crate::config::Variant;
use crate::error::Result;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

/// Registers parameters under hierarchical names while the model is built.
pub(crate) struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: ChaCha8Rng,
    pub group: Group,
    pub variant: Variant,
    pub slope: f64,
    prefix: Vec<String>,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, variant: Variant, slope: f64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: Group(1),
            variant,
            slope,
            prefix: Vec::new(),
        }
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn param(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.name(leaf);
        self.store.add_param(name, self.group, value)
    }

    pub fn randn(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.param(leaf, t)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let t = Tensor::rand_uniform(shape, lo, hi, &mut self.rng);
        self.param(leaf, t)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.param(leaf, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.param(leaf, Tensor::ones(shape))
    }
}

/// 2-D convolution with "same" padding. In variant B every 3×3 convolution
/// is a modulated deformable one whose offsets and modulation come from a
/// zero-initialized sibling convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    /// Offset/modulation predictor `(weight, bias)` with `3k²` outputs.
    pub offsets: Option<(ParamId, ParamId)>,
}

impl Conv2d {
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        let deform = b.variant == Variant::B && kernel == 3;
        b.scope(name, |b| {
            let fan_in = in_c * kernel * kernel;
            let weight = b.randn("weight", &[out_c, in_c, kernel, kernel], (2.0 / fan_in as f64).sqrt());
            let bias = bias.then(|| b.zeros("bias", &[out_c]));
            let offsets = deform.then(|| {
                let k2 = kernel * kernel;
                (
                    b.zeros("offset.weight", &[3 * k2, in_c, kernel, kernel]),
                    b.zeros("offset.bias", &[3 * k2]),
                )
            });
            Conv2d {
                weight,
                bias,
                kernel,
                offsets,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let pad = self.kernel / 2;
        let w = g.param(s, self.weight);
        let bias = self.bias.map(|id| g.param(s, id));
        match self.offsets {
            None => Ok(g.conv2d(x, w, bias, pad)?),
            Some((ow, ob)) => {
                let k2 = self.kernel * self.kernel;
                let om = g.conv2d(x, g.param(s, ow), Some(g.param(s, ob)), pad)?;
                let offset = g.narrow(om, 1, 0, 2 * k2)?;
                let mask = g.sigmoid(g.narrow(om, 1, 2 * k2, k2)?);
                Ok(g.deform_conv2d(x, offset, mask, w, bias, pad)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BatchNormStats,
}

impl BatchNorm2d {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| {
            let gamma = b.ones("weight", &[channels]);
            let beta = b.zeros("bias", &[channels]);
            let running_mean = b.store.add_buffer(b.name("running_mean"), Tensor::zeros(&[channels]));
            let running_var = b.store.add_buffer(b.name("running_var"), Tensor::ones(&[channels]));
            BatchNorm2d {
                gamma,
                beta,
                stats: BatchNormStats {
                    running_mean,
                    running_var,
                    momentum: BN_MOMENTUM,
                    eps: BN_EPS,
                },
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(g.batch_norm2d(s, x, g.param(s, self.gamma), g.param(s, self.beta), self.stats)?)
    }
}

/// Leaky ReLU (variant A) or a Padé activation unit with its own
/// coefficients (variant B).
#[derive(Debug, Clone)]
pub enum Activation {
    Leaky(f64),
    Pade { numerator: ParamId, denominator: ParamId },
}

impl Activation {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str) -> Self {
        match b.variant {
            Variant::A => Activation::Leaky(b.slope),
            Variant::B => {
                let init = pade::leaky_relu_init();
                let to_t = |v: &[f64]| Tensor::from_vec(&[v.len()], v.iter().map(|&c| lit(c)).collect());
                b.scope(name, |b| Activation::Pade {
                    numerator: b.param("numerator", to_t(&init.numerator).expect("vector")),
                    denominator: b.param("denominator", to_t(&init.denominator).expect("vector")),
                })
            }
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        match *self {
            Activation::Leaky(slope) => Ok(g.leaky_relu(x, lit(slope))),
            Activation::Pade { numerator, denominator } => {
                Ok(g.pade(x, g.param(s, numerator), g.param(s, denominator))?)
            }
        }
    }
}

/// Residual block: a basic (two 3×3) or bottleneck (1×1, 3×3, 1×1 with a
/// four-fold channel reduction) branch plus an identity or 1×1 shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock {
    branch: Vec<(Conv2d, BatchNorm2d)>,
    /// One activation after every branch stage; the last one follows the sum.
    acts: Vec<Activation>,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl ResBlock {
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        kind: BlockKind,
        in_c: usize,
        out_c: usize,
    ) -> Self {
        b.scope(name, |b| {
            let stages: Vec<(usize, usize, usize)> = match kind {
                BlockKind::Basic => vec![(in_c, out_c, 3), (out_c, out_c, 3)],
                BlockKind::Bottleneck => {
                    let mid = out_c / 4;
                    vec![(in_c, mid, 1), (mid, mid, 3), (mid, out_c, 1)]
                }
            };
            let mut branch = Vec::new();
            let mut acts = Vec::new();
            for (i, &(ci, co, k)) in stages.iter().enumerate() {
                let conv = Conv2d::new(b, &format!("conv{}", i + 1), ci, co, k, false);
                let bn = BatchNorm2d::new(b, &format!("bn{}", i + 1), co);
                branch.push((conv, bn));
                acts.push(Activation::new(b, &format!("act{}", i + 1)));
            }
            let shortcut = (in_c != out_c).then(|| {
                (
                    Conv2d::new(b, "shortcut.conv", in_c, out_c, 1, false),
                    BatchNorm2d::new(b, "shortcut.bn", out_c),
                )
            });
            ResBlock { branch, acts, shortcut }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let last = self.branch.len() - 1;
        let mut h = x;
        for (i, (conv, bn)) in self.branch.iter().enumerate() {
            h = bn.forward(g, s, conv.forward(g, s, h)?)?;
            if i < last {
                h = self.acts[i].forward(g, s, h)?;
            }
        }
        let short = match &self.shortcut {
            Some((conv, bn)) => bn.forward(g, s, conv.forward(g, s, x)?)?,
            None => x,
        };
        self.acts[last].forward(g, s, g.add(h, short)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_f: usize, out_f: usize) -> Self {
        b.scope(name, |b| {
            let limit = (6.0 / (in_f + out_f) as f64).sqrt();
            Linear {
                weight: b.uniform("weight", &[out_f, in_f], -limit, limit),
                bias: b.zeros("bias", &[out_f]),
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(g.linear(x, g.param(s, self.weight), Some(g.param(s, self.bias)))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Self {
        b.scope(name, |b| LayerNorm {
            gamma: b.ones("weight", &[dim]),
            beta: b.zeros("bias", &[dim]),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, g.param(s, self.gamma), g.param(s, self.beta), LN_EPS)?)
    }
}
