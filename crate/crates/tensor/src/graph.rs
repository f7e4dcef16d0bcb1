//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure computing the vector-Jacobian product. [`Graph::backward`] walks the
//! tape in reverse and returns parameter gradients keyed by [`ParamId`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{BufferId, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product: receives the output gradient and which parents
/// need gradients, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<Var>,
    needs_grad: bool,
    param: Option<ParamId>,
    backward: Option<BackwardFn<T>>,
}

/// Whether layers behave as in training (batch statistics, dropout) or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    mode: Mode,
    track_params: bool,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    buffer_updates: RefCell<Vec<(BufferId, Tensor<T>)>>,
    rng: RefCell<ChaCha8Rng>,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Global L2 norm over all gradients.
    pub fn norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| {
                let f = v.to_f64_lossy();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Adds another gradient set into this one.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(mine) => mine.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records gradients for parameters.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            mode,
            track_params: true,
            param_vars: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Inference-only graph: nothing requires gradients, no closures are kept.
    pub fn inference() -> Self {
        let mut g = Self::new(Mode::Eval, 0);
        g.track_params = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    pub(crate) fn push_buffer_update(&self, id: BufferId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by training-mode normalization.
    pub fn take_buffer_updates(&self) -> Vec<(BufferId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Constant input that never receives a gradient.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Leaf that receives a gradient (useful for gradient checks of inputs).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Parameter leaf; repeated calls with the same id return the same [`Var`].
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let value = store.value_arc(id);
        let var = self.push_rc(value, Vec::new(), self.track_params, Some(id), None);
        self.param_vars.borrow_mut().insert(id, var);
        var
    }

    /// Current value of a buffer (e.g. running statistics) as a constant.
    pub fn buffer(&self, store: &ParamStore<T>, id: BufferId) -> Arc<Tensor<T>> {
        store.buffer_arc(id)
    }

    fn push_leaf(&self, value: Tensor<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.push_rc(Arc::new(value), Vec::new(), needs_grad, param, None)
    }

    fn push_rc(
        &self,
        value: Arc<Tensor<T>>,
        parents: Vec<Var>,
        needs_grad: bool,
        param: Option<ParamId>,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            needs_grad,
            param,
            backward: if needs_grad { backward } else { None },
        });
        Var(nodes.len() - 1)
    }

    /// Records an operation result. `backward` is only built when some parent
    /// needs a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Var {
        let needs = parents.iter().any(|&p| self.needs_grad(p));
        let bw = if needs { Some(backward()) } else { None };
        self.push_rc(Arc::new(value), parents.to_vec(), needs, None, bw)
    }

    /// Like [`Graph::record`], but the backward closure receives the shared
    /// output value instead of keeping its own copy.
    pub(crate) fn record_out(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl FnOnce(Arc<Tensor<T>>) -> BackwardFn<T>,
    ) -> Var {
        let needs = parents.iter().any(|&p| self.needs_grad(p));
        let value = Arc::new(value);
        let bw = if needs { Some(backward(Arc::clone(&value))) } else { None };
        self.push_rc(value, parents.to_vec(), needs, None, bw)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Backpropagates the given output gradients ("seeds").
    ///
    /// Each seed must match the shape of its variable. Returns gradients for
    /// every parameter reached, plus gradients of [`Graph::leaf`] inputs via
    /// [`LeafGradients`].
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<(Gradients<T>, LeafGradients<T>)> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let mut max_seed = 0;
        for (v, g) in seeds {
            if g.shape() != nodes[v.0].value.shape() {
                return Err(TensorError::Shape(format!(
                    "seed gradient {:?} does not match value {:?}",
                    g.shape(),
                    nodes[v.0].value.shape()
                )));
            }
            accumulate(&mut grads[v.0], g.clone());
            max_seed = max_seed.max(v.0);
        }
        let mut param_grads: Vec<Option<Tensor<T>>> = Vec::new();
        let mut leaf_grads = HashMap::new();
        for i in (0..=max_seed).rev() {
            let node = &nodes[i];
            let g = match grads[i].take() {
                Some(g) if node.needs_grad => g,
                _ => continue,
            };
            if let Some(pid) = node.param {
                if param_grads.len() <= pid.0 {
                    param_grads.resize(pid.0 + 1, None);
                }
                accumulate(&mut param_grads[pid.0], g);
                continue;
            }
            match &node.backward {
                Some(bw) => {
                    let need: Vec<bool> = node.parents.iter().map(|p| nodes[p.0].needs_grad).collect();
                    let pg = bw(&g, &need);
                    debug_assert_eq!(pg.len(), node.parents.len());
                    for ((p, pgrad), &nd) in node.parents.iter().zip(pg).zip(&need) {
                        if let (Some(pgrad), true) = (pgrad, nd) {
                            debug_assert_eq!(
                                pgrad.shape(),
                                nodes[p.0].value.shape(),
                                "gradient shape mismatch"
                            );
                            accumulate(&mut grads[p.0], pgrad);
                        }
                    }
                }
                None => {
                    leaf_grads.insert(Var(i), g);
                }
            }
        }
        Ok((Gradients { grads: param_grads }, LeafGradients { grads: leaf_grads }))
    }
}

/// Gradients of non-parameter leaves created with [`Graph::leaf`].
#[derive(Debug, Default)]
pub struct LeafGradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T> LeafGradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
