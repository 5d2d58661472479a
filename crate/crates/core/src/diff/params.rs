//! Persistent parameters that outlive the per-step graphs.

use crate::array::NdArray;
use crate::diff::graph::{DiffGraph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: NdArray<T>,
    pub grad: NdArray<T>,
    pub trainable: bool,
}

/// Named parameters in insertion order. Names are dotted paths; the first
/// segment is the parameter group used for freezing.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray<T>) -> ParamId {
        let grad = NdArray::zeros(value.shape().to_vec());
        self.params.push(Param { name: name.into(), value, grad, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdArray<T> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Sets `trainable` on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

/// Maps parameters to leaf nodes of one graph, creating each leaf at most once
/// so that gradients from every use accumulate on the same node.
#[derive(Debug, Default)]
pub struct Binding {
    nodes: Vec<Option<NodeId>>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node<T: Real>(&mut self, g: &mut DiffGraph<T>, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if self.nodes.len() <= id.0 {
            self.nodes.resize(id.0 + 1, None);
        }
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let p = store.get(id);
        let n = g.leaf(p.value.clone(), p.trainable);
        self.nodes[id.0] = Some(n);
        n
    }

    /// Uses an existing node for `id` instead of creating a leaf from the store.
    pub fn bind(&mut self, id: ParamId, node: NodeId) {
        if self.nodes.len() <= id.0 {
            self.nodes.resize(id.0 + 1, None);
        }
        self.nodes[id.0] = Some(node);
    }

    /// Adds the graph gradients of bound trainable parameters into the store.
    pub fn pull_grads<T: Real>(&self, g: &DiffGraph<T>, store: &mut ParamStore<T>) {
        for (i, n) in self.nodes.iter().enumerate() {
            let Some(n) = n else { continue };
            let p = &mut store.params[i];
            if !p.trainable {
                continue;
            }
            if let Some(gr) = g.grad_ref(*n) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(gr.data()) {
                    *a += b;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        Self { lr, beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8) }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    m: Vec<NdArray<T>>,
    v: Vec<NdArray<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_params(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| NdArray::zeros(p.value.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every trainable parameter, then zeroes
/// all gradients.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig<T>) -> Result<()> {
    if state.m.len() != store.len() || state.m.iter().zip(store.iter()).any(|(m, p)| m.shape() != p.value.shape()) {
        return Err(Error::UninitializedState);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - cfg.beta1.powi(t);
    let bc2 = T::one() - cfg.beta2.powi(t);
    for (i, p) in store.params.iter_mut().enumerate() {
        if p.trainable {
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for ((w, &g), (mk, vk)) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mk = cfg.beta1 * *mk + (T::one() - cfg.beta1) * g;
                *vk = cfg.beta2 * *vk + (T::one() - cfg.beta2) * g * g;
                let mhat = *mk / bc1;
                let vhat = *vk / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_step(store: &mut ParamStore<f64>, state: &mut AdamState<f64>, id: ParamId, target: f64, lr: f64) {
        let mut g = DiffGraph::new(0);
        let mut b = Binding::new();
        let w = b.node(&mut g, store, id);
        let t = g.constant(NdArray::vector(vec![target]));
        let d = g.sub(w, t).unwrap();
        let l = g.frobenius_sq(d).unwrap();
        g.backpropagate(l).unwrap();
        b.pull_grads(&g, store);
        adam_step(store, state, &AdamConfig::with_lr(lr)).unwrap();
    }

    #[test]
    fn one_step_descends() {
        let mut store = ParamStore::new();
        let id = store.add("w", NdArray::vector(vec![1.0]));
        let mut st = AdamState::for_params(&store);
        quadratic_step(&mut store, &mut st, id, 0.0, 0.1);
        assert!(store.value(id).item() < 1.0);
        assert_eq!(store.get(id).grad.item(), 0.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", NdArray::vector(vec![1.5, -2.0]));
        let mut st = AdamState::for_params(&store);
        adam_step(&mut store, &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(store.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        // Oracle: the scalar Adam recurrence written out by hand.
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w - 3.0).abs() < 0.05, "oracle ended at {w}");

        let mut store = ParamStore::new();
        let id = store.add("w", NdArray::vector(vec![0.0]));
        let mut st = AdamState::for_params(&store);
        for _ in 0..200 {
            quadratic_step(&mut store, &mut st, id, 3.0, 0.1);
        }
        let got = store.value(id).item();
        assert!((got - w).abs() < 1e-12);
        assert!((got - 3.0).abs() < 0.05);
    }

    #[test]
    fn missing_state_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", NdArray::vector(vec![1.0]));
        let mut st = AdamState::default();
        assert!(matches!(adam_step(&mut store, &mut st, &AdamConfig::with_lr(0.1)), Err(Error::UninitializedState)));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("backbone.w", NdArray::vector(vec![1.0]));
        let b = store.add("adapter.w", NdArray::vector(vec![1.0]));
        store.set_trainable_prefix("backbone", false);
        let mut st = AdamState::for_params(&store);
        store.get_mut(a).grad = NdArray::vector(vec![5.0]);
        store.get_mut(b).grad = NdArray::vector(vec![5.0]);
        adam_step(&mut store, &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(store.value(a).item(), 1.0);
        assert!(store.value(b).item() < 1.0);
        assert_eq!(store.trainable_scalar_count(), 1);
    }
}
