//! Parameter storage, layer handles, and the Adam optimizer.
//!
//! Parameters live outside any graph in a [`ParamStore`]; each training step
//! binds them into a fresh tape as leaves, runs forward/backward, and applies
//! the resulting gradients. Adam state (m, v) sits next to each parameter so
//! checkpointing one store captures the whole optimizer.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Flt, Grads, Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub(crate) struct ParamEntry<F: Flt> {
    pub name: String,
    pub value: ArrayD<F>,
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
}

/// Named parameter tensors plus their Adam moments.
pub struct ParamStore<F: Flt> {
    pub(crate) entries: Vec<ParamEntry<F>>,
}

impl<F: Flt> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Flt> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        self.entries.push(ParamEntry { name: name.into(), value, m, v });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Inserts every parameter into `graph` as a leaf. Trainable bindings
    /// request gradients; frozen bindings participate in the forward pass
    /// only (e.g. discriminators during the generator step).
    pub fn bind(&self, graph: &mut Graph<F>, trainable: bool) -> ParamBinding {
        let nodes = self
            .entries
            .iter()
            .map(|e| graph.leaf(e.value.clone(), trainable))
            .collect();
        ParamBinding { nodes }
    }
}

/// Node ids of one store's parameters inside one graph.
pub struct ParamBinding {
    nodes: Vec<NodeId>,
}

impl ParamBinding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum WeightInit {
    /// N(0, 0.02) — the DCGAN/CycleGAN convention.
    Normal002,
    /// Kaiming normal, N(0, sqrt(2 / fan_in)).
    KaimingNormal,
    Zeros,
}

fn sample_normal<F: Flt>(rng: &mut ChaCha8Rng, std: f64) -> F {
    // Box-Muller on two uniform draws; deterministic given the rng stream.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    F::from_f64(z * std)
}

fn init_tensor<F: Flt>(shape: &[usize], fan_in: usize, init: WeightInit, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    match init {
        WeightInit::Zeros => ArrayD::zeros(IxDyn(shape)),
        WeightInit::Normal002 => {
            let mut a = ArrayD::zeros(IxDyn(shape));
            for v in a.iter_mut() {
                *v = sample_normal(rng, 0.02);
            }
            a
        }
        WeightInit::KaimingNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            let mut a = ArrayD::zeros(IxDyn(shape));
            for v in a.iter_mut() {
                *v = sample_normal(rng, std);
            }
            a
        }
    }
}

/// Convolution layer handle. Weight [Cout, Cin, k, k], optional bias [Cout].
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Flt>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: WeightInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[cout, cin, k, k], cin * k * k, init, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<F: Flt>(&self, g: &mut Graph<F>, bind: &ParamBinding, x: NodeId) -> NodeId {
        g.conv2d(x, bind.node(self.w), self.b.map(|b| bind.node(b)), self.stride, self.pad)
    }
}

/// Transposed convolution layer handle. Weight [Cin, Cout, k, k].
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub outpad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Flt>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        outpad: usize,
        bias: bool,
        init: WeightInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[cin, cout, k, k], cin * k * k, init, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))));
        ConvTranspose2d { w, b, stride, pad, outpad }
    }

    pub fn forward<F: Flt>(&self, g: &mut Graph<F>, bind: &ParamBinding, x: NodeId) -> NodeId {
        g.conv_transpose2d(
            x,
            bind.node(self.w),
            self.b.map(|b| bind.node(b)),
            self.stride,
            self.pad,
            self.outpad,
        )
    }
}

/// Parameter-free instance normalization.
pub struct InstanceNorm {
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new() -> Self {
        InstanceNorm { eps: 1e-5 }
    }

    pub fn forward<F: Flt>(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        g.instance_norm(x, F::from_f64(self.eps))
    }
}

impl Default for InstanceNorm {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam with bias correction. One optimizer instance may own several stores
/// (e.g. both generators); `t` advances once per call to [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0 }
    }

    /// Applies one update to every bound parameter. Parameters without a
    /// gradient in `grads` are treated as having zero gradient so the moment
    /// decay stays in lockstep across configurations.
    pub fn step<F: Flt>(
        &mut self,
        grads: &Grads<F>,
        targets: &mut [(&mut ParamStore<F>, &ParamBinding)],
    ) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        for (store, binding) in targets.iter_mut() {
            for (i, entry) in store.entries.iter_mut().enumerate() {
                let gopt = grads.get(binding.nodes[i]);
                let ms = entry.m.as_slice_mut().unwrap();
                let vs = entry.v.as_slice_mut().unwrap();
                let ps = entry.value.as_slice_mut().unwrap();
                match gopt {
                    Some(gr) => {
                        let gs = gr.as_slice().unwrap();
                        for j in 0..ps.len() {
                            let g = gs[j];
                            ms[j] = b1 * ms[j] + (one - b1) * g;
                            vs[j] = b2 * vs[j] + (one - b2) * g * g;
                            let mhat = ms[j] / corr1;
                            let vhat = vs[j] / corr2;
                            ps[j] = ps[j] - lr * mhat / (vhat.sqrt() + eps);
                        }
                    }
                    None => {
                        for j in 0..ps.len() {
                            ms[j] = b1 * ms[j];
                            vs[j] = b2 * vs[j];
                            let mhat = ms[j] / corr1;
                            let vhat = vs[j] / corr2;
                            ps[j] = ps[j] - lr * mhat / (vhat.sqrt() + eps);
                        }
                    }
                }
            }
        }
    }
}
