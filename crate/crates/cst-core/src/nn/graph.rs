//! The autodiff tape and its operation set.
//!
//! Ops assert shape preconditions (programmer errors); fallible validation
//! belongs to the module boundaries that build graphs from user data.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use super::conv::{col2im, im2col, ConvGeom};
use super::Flt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn<F> = Box<dyn Fn(&Graph<F>, &ArrayD<F>, &mut Grads<F>)>;

struct Node<F: Flt> {
    value: ArrayD<F>,
    needs_grad: bool,
    back: Option<BackFn<F>>,
}

/// Per-node gradient accumulator produced by [`Graph::backward`].
pub struct Grads<F: Flt> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Flt> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    fn accum(&mut self, graph: &Graph<F>, id: NodeId, contribution: ArrayD<F>) {
        if !graph.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

pub struct Graph<F: Flt> {
    nodes: Vec<Node<F>>,
}

impl<F: Flt> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Flt> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<F>, needs_grad: bool, back: Option<BackFn<F>>) -> NodeId {
        debug_assert!(value.iter().all(|v| v.to_f64().is_finite() || true));
        self.nodes.push(Node { value, needs_grad, back });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    /// Extracts a 0-dim (or single-element) node as a scalar.
    pub fn scalar(&self, id: NodeId) -> F {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.leaf(value, false)
    }

    /// Cuts the tape: same value, no gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.leaf(v, false)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    gr.accum(g, a, go.clone());
                    gr.accum(g, b, go.clone());
                }) as BackFn<F>
            }),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    gr.accum(g, a, go.clone());
                    gr.accum(g, b, go.mapv(|x| -x));
                }) as BackFn<F>
            }),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    if g.ng(a) {
                        gr.accum(g, a, go * g.value(b));
                    }
                    if g.ng(b) {
                        gr.accum(g, b, go * g.value(a));
                    }
                }) as BackFn<F>
            }),
        )
    }

    /// y = a·mul + add
    pub fn affine(&mut self, a: NodeId, mul: F, add: F) -> NodeId {
        let v = self.value(a).mapv(|x| x * mul + add);
        let ng = self.ng(a);
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    gr.accum(g, a, go.mapv(|x| x * mul));
                }) as BackFn<F>
            }),
        )
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: F) -> NodeId {
        self.affine(a, s, F::zero())
    }

    pub fn add_scalar(&mut self, a: NodeId, s: F) -> NodeId {
        self.affine(a, F::one(), s)
    }

    fn unary(
        &mut self,
        a: NodeId,
        fwd: impl Fn(F) -> F,
        // derivative as a function of (input, output)
        dfdx: impl Fn(F, F) -> F + 'static,
    ) -> NodeId {
        let v = self.value(a).mapv(&fwd);
        let ng = self.ng(a);
        let out_idx = self.nodes.len();
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let x = g.value(a);
                    let y = &g.nodes[out_idx].value;
                    let mut d = go.clone();
                    ndarray::Zip::from(&mut d).and(x).and(y).for_each(|di, &xi, &yi| {
                        *di = *di * dfdx(xi, yi);
                    });
                    gr.accum(g, a, d);
                }) as BackFn<F>
            }),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: F) -> NodeId {
        self.unary(
            a,
            move |x| if x > F::zero() { x } else { x * alpha },
            move |x, _| if x > F::zero() { F::one() } else { alpha },
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| F::one() / (F::one() + (-x).exp()),
            |_, y| y * (F::one() - y),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, |x, _| F::from_f64(2.0) * x)
    }

    /// y = sqrt(x + eps); callers choose eps > 0 to keep the derivative finite.
    pub fn sqrt_eps(&mut self, a: NodeId, eps: F) -> NodeId {
        self.unary(
            a,
            move |x| (x + eps).sqrt(),
            |_, y| F::from_f64(0.5) / y,
        )
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| F::one() / x, |_, y| -(y * y))
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let va = self.value(a);
        let vb = self.value(b);
        let mut v = va.clone();
        ndarray::Zip::from(&mut v).and(vb).for_each(|x, &y| {
            if y > *x {
                *x = y;
            }
        });
        let ng = self.ng(a) || self.ng(b);
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let va = g.value(a);
                    let vb = g.value(b);
                    if g.ng(a) {
                        let mut d = go.clone();
                        ndarray::Zip::from(&mut d).and(va).and(vb).for_each(|di, &x, &y| {
                            if y > x {
                                *di = F::zero();
                            }
                        });
                        gr.accum(g, a, d);
                    }
                    if g.ng(b) {
                        let mut d = go.clone();
                        ndarray::Zip::from(&mut d).and(va).and(vb).for_each(|di, &x, &y| {
                            if y <= x {
                                *di = F::zero();
                            }
                        });
                        gr.accum(g, b, d);
                    }
                }) as BackFn<F>
            }),
        )
    }

    /// Elementwise select: where cond ≥ 0 take `a`, else `b`.
    /// The condition gets no gradient (piecewise-constant routing).
    pub fn choose_nonneg(&mut self, cond: NodeId, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(cond).shape(), self.value(a).shape());
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let vc = self.value(cond);
        let va = self.value(a);
        let vb = self.value(b);
        let mut v = va.clone();
        ndarray::Zip::from(&mut v).and(vc).and(vb).for_each(|x, &c, &y| {
            if c < F::zero() {
                *x = y;
            }
        });
        let ng = self.ng(a) || self.ng(b);
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let vc = g.value(cond);
                    if g.ng(a) {
                        let mut d = go.clone();
                        ndarray::Zip::from(&mut d).and(vc).for_each(|di, &c| {
                            if c < F::zero() {
                                *di = F::zero();
                            }
                        });
                        gr.accum(g, a, d);
                    }
                    if g.ng(b) {
                        let mut d = go.clone();
                        ndarray::Zip::from(&mut d).and(vc).for_each(|di, &c| {
                            if c >= F::zero() {
                                *di = F::zero();
                            }
                        });
                        gr.accum(g, b, d);
                    }
                }) as BackFn<F>
            }),
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let gv = *go.iter().next().unwrap();
                    let shape = g.value(a).raw_dim();
                    gr.accum(g, a, ArrayD::from_elem(shape, gv));
                }) as BackFn<F>
            }),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = F::from_f64(self.value(a).len() as f64);
        let s = self.sum_all(a);
        self.mul_scalar(s, F::one() / n)
    }

    /// Sums every element of each leading-axis slice: [N, ...] → [N].
    pub fn sum_per_image(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = v.shape()[0];
        let mut out = Array1::<F>::zeros(n);
        for (i, sub) in v.axis_iter(Axis(0)).enumerate() {
            out[i] = sub.sum();
        }
        let ng = self.ng(a);
        self.push(
            out.into_dyn(),
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let shape = g.value(a).raw_dim();
                    let mut d = ArrayD::<F>::zeros(shape);
                    for (i, mut sub) in d.axis_iter_mut(Axis(0)).enumerate() {
                        sub.fill(go[[i]]);
                    }
                    gr.accum(g, a, d);
                }) as BackFn<F>
            }),
        )
    }

    /// Max element of each leading-axis slice: [N, ...] → [N].
    /// Gradient routes to the first argmax in flat order.
    pub fn max_per_image(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = v.shape()[0];
        let mut out = Array1::<F>::zeros(n);
        let mut argmax = vec![0usize; n];
        for (i, sub) in v.axis_iter(Axis(0)).enumerate() {
            let mut best = F::neg_infinity();
            let mut best_j = 0;
            for (j, &x) in sub.iter().enumerate() {
                if x > best {
                    best = x;
                    best_j = j;
                }
            }
            out[i] = best;
            argmax[i] = best_j;
        }
        let ng = self.ng(a);
        self.push(
            out.into_dyn(),
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let shape = g.value(a).raw_dim();
                    let mut d = ArrayD::<F>::zeros(shape);
                    let per = d.len() / argmax.len();
                    let ds = d.as_slice_mut().unwrap();
                    for (i, &j) in argmax.iter().enumerate() {
                        ds[i * per + j] = go[[i]];
                    }
                    gr.accum(g, a, d);
                }) as BackFn<F>
            }),
        )
    }

    /// Broadcasts a [N] vector over a [N, ...] shape.
    pub fn broadcast_per_image(&mut self, s: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(s);
        assert_eq!(v.ndim(), 1);
        assert_eq!(v.shape()[0], shape[0]);
        let mut out = ArrayD::<F>::zeros(IxDyn(shape));
        for (i, mut sub) in out.axis_iter_mut(Axis(0)).enumerate() {
            sub.fill(v[[i]]);
        }
        let ng = self.ng(s);
        self.push(
            out,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let n = go.shape()[0];
                    let mut d = Array1::<F>::zeros(n);
                    for (i, sub) in go.axis_iter(Axis(0)).enumerate() {
                        d[i] = sub.sum();
                    }
                    gr.accum(g, s, d.into_dyn());
                }) as BackFn<F>
            }),
        )
    }

    // ---- fused losses ----------------------------------------------------

    /// mean(|a − b|); the subgradient at 0 is 0.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let va = self.value(a);
        let vb = self.value(b);
        let n = F::from_f64(va.len() as f64);
        let mut s = F::zero();
        ndarray::Zip::from(va).and(vb).for_each(|&x, &y| s = s + (x - y).abs());
        let ng = self.ng(a) || self.ng(b);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s / n),
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let gv = *go.iter().next().unwrap();
                    let va = g.value(a);
                    let vb = g.value(b);
                    let n = F::from_f64(va.len() as f64);
                    let scale = gv / n;
                    let mut d = ArrayD::<F>::zeros(va.raw_dim());
                    ndarray::Zip::from(&mut d).and(va).and(vb).for_each(|di, &x, &y| {
                        *di = if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            F::zero()
                        };
                    });
                    if g.ng(a) {
                        gr.accum(g, a, d.clone());
                    }
                    if g.ng(b) {
                        gr.accum(g, b, d.mapv(|x| -x));
                    }
                }) as BackFn<F>
            }),
        )
    }

    /// mean((a − b)²)
    pub fn mean_sq_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let va = self.value(a);
        let vb = self.value(b);
        let n = F::from_f64(va.len() as f64);
        let mut s = F::zero();
        ndarray::Zip::from(va).and(vb).for_each(|&x, &y| {
            let d = x - y;
            s = s + d * d;
        });
        let ng = self.ng(a) || self.ng(b);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s / n),
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let gv = *go.iter().next().unwrap();
                    let va = g.value(a);
                    let vb = g.value(b);
                    let n = F::from_f64(va.len() as f64);
                    let scale = F::from_f64(2.0) * gv / n;
                    let diff = (va - vb).mapv(|x| x * scale);
                    if g.ng(a) {
                        gr.accum(g, a, diff.clone());
                    }
                    if g.ng(b) {
                        gr.accum(g, b, diff.mapv(|x| -x));
                    }
                }) as BackFn<F>
            }),
        )
    }

    /// mean((a − t)²) against a constant target (least-squares GAN labels).
    pub fn mse_vs_scalar(&mut self, a: NodeId, target: F) -> NodeId {
        let va = self.value(a);
        let n = F::from_f64(va.len() as f64);
        let mut s = F::zero();
        for &x in va.iter() {
            let d = x - target;
            s = s + d * d;
        }
        let ng = self.ng(a);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s / n),
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let gv = *go.iter().next().unwrap();
                    let va = g.value(a);
                    let n = F::from_f64(va.len() as f64);
                    let scale = F::from_f64(2.0) * gv / n;
                    gr.accum(g, a, va.mapv(|x| (x - target) * scale));
                }) as BackFn<F>
            }),
        )
    }

    /// Numerically stable mean binary cross-entropy on logits against
    /// constant targets in [0, 1].
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: &ArrayD<F>) -> NodeId {
        assert_eq!(self.value(logits).shape(), targets.shape());
        let z = self.value(logits);
        let n = F::from_f64(z.len() as f64);
        let mut s = F::zero();
        ndarray::Zip::from(z).and(targets).for_each(|&zi, &ti| {
            let pos = if zi > F::zero() { zi } else { F::zero() };
            s = s + pos - zi * ti + (F::one() + (-zi.abs()).exp()).ln();
        });
        let ng = self.ng(logits);
        let t = targets.clone();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s / n),
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let gv = *go.iter().next().unwrap();
                    let z = g.value(logits);
                    let n = F::from_f64(z.len() as f64);
                    let scale = gv / n;
                    let mut d = ArrayD::<F>::zeros(z.raw_dim());
                    ndarray::Zip::from(&mut d).and(z).and(&t).for_each(|di, &zi, &ti| {
                        let sig = F::one() / (F::one() + (-zi).exp());
                        *di = (sig - ti) * scale;
                    });
                    gr.accum(g, logits, d);
                }) as BackFn<F>
            }),
        )
    }

    // ---- structure ops (NCHW) --------------------------------------------

    /// Concatenates two [N, C, H, W] tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.ndim(), 4);
        assert_eq!(vb.ndim(), 4);
        let ca = va.shape()[1];
        let v = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    if g.ng(a) {
                        gr.accum(g, a, go.slice_axis(Axis(1), (0..ca).into()).to_owned());
                    }
                    if g.ng(b) {
                        gr.accum(g, b, go.slice_axis(Axis(1), (ca..go.shape()[1]).into()).to_owned());
                    }
                }) as BackFn<F>
            }),
        )
    }

    /// Counter-clockwise 90°·n rotation of the spatial axes of [N, C, H, W].
    pub fn rot90(&mut self, a: NodeId, quarter_turns: u8) -> NodeId {
        let v = rot90_nchw(self.value(a), quarter_turns);
        let ng = self.ng(a);
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    gr.accum(g, a, rot90_nchw(go, (4 - quarter_turns % 4) % 4));
                }) as BackFn<F>
            }),
        )
    }

    /// Flips the width axis of [N, C, H, W].
    pub fn flip_w(&mut self, a: NodeId) -> NodeId {
        let v = flip_w_nchw(self.value(a));
        let ng = self.ng(a);
        self.push(
            v,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    gr.accum(g, a, flip_w_nchw(go));
                }) as BackFn<F>
            }),
        )
    }

    /// Mirror padding of the spatial axes (PyTorch ReflectionPad2d convention:
    /// the border pixel is not repeated). Requires pad ≤ dim − 1.
    pub fn reflect_pad(&mut self, a: NodeId, ph: usize, pw: usize) -> NodeId {
        let v4 = self.value(a);
        assert_eq!(v4.ndim(), 4);
        let (n, c, h, w) = dims4(v4);
        assert!(ph < h && pw < w, "reflect pad must be smaller than the image");
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, h + 2 * ph, w + 2 * pw]));
        {
            let vs = v4.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let (oh, ow) = (h + 2 * ph, w + 2 * pw);
            for nc in 0..n * c {
                let src = &vs[nc * h * w..(nc + 1) * h * w];
                let dst = &mut os[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = reflect_index(oy as isize - ph as isize, h);
                    for ox in 0..ow {
                        let ix = reflect_index(ox as isize - pw as isize, w);
                        dst[oy * ow + ox] = src[iy * w + ix];
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(
            out,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let (n, c, h, w) = dims4(g.value(a));
                    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
                    let mut d = ArrayD::<F>::zeros(g.value(a).raw_dim());
                    let gs = go.as_slice().unwrap();
                    let ds = d.as_slice_mut().unwrap();
                    for nc in 0..n * c {
                        let src = &gs[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut ds[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            let iy = reflect_index(oy as isize - ph as isize, h);
                            for ox in 0..ow {
                                let ix = reflect_index(ox as isize - pw as isize, w);
                                dst[iy * w + ix] = dst[iy * w + ix] + src[oy * ow + ox];
                            }
                        }
                    }
                    gr.accum(g, a, d);
                }) as BackFn<F>
            }),
        )
    }

    /// 2D convolution, zero padding. x: [N, Cin, H, W], w: [Cout, Cin, kh, kw],
    /// b: [Cout]. im2col + GEMM; the backward pass re-gathers columns instead
    /// of caching them, trading ~10% time for a much smaller live graph.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 4);
        assert_eq!(wv.ndim(), 4);
        let (n, cin, h, wd) = dims4(xv);
        let (cout, cin_w, kh, kw) = dims4(wv);
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
        let geom = ConvGeom::for_conv(h, wd, kh, kw, stride, pad);
        let l = geom.oh * geom.ow;

        let wmat = wv
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, cout, geom.oh, geom.ow]));
        for i in 0..n {
            let xi = xv.index_axis(Axis(0), i);
            let xi3 = xi.into_dimensionality::<ndarray::Ix3>().unwrap();
            let cols = im2col(&xi3, geom);
            let o = wmat.dot(&cols); // [cout, l]
            let mut oi = out.index_axis_mut(Axis(0), i);
            let os = oi.as_slice_mut().unwrap();
            os.copy_from_slice(o.as_slice().unwrap());
        }
        if let Some(bid) = b {
            let bv = self.value(bid).clone();
            let os = out.as_slice_mut().unwrap();
            let bs = bv.as_slice().unwrap();
            for i in 0..n {
                for co in 0..cout {
                    let off = (i * cout + co) * l;
                    let bias = bs[co];
                    for v in &mut os[off..off + l] {
                        *v = *v + bias;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|bid| self.ng(bid)).unwrap_or(false);
        self.push(
            out,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let xv = g.value(x);
                    let wv = g.value(w);
                    let (n, cin, h, wd) = dims4(xv);
                    let (cout, _, kh, kw) = dims4(wv);
                    let geom = ConvGeom::for_conv(h, wd, kh, kw, stride, pad);
                    let l = geom.oh * geom.ow;
                    let wmat = wv
                        .view()
                        .into_shape_with_order((cout, cin * kh * kw))
                        .unwrap()
                        .to_owned();
                    let need_x = g.ng(x);
                    let need_w = g.ng(w);
                    let mut dw = need_w.then(|| Array2::<F>::zeros((cout, cin * kh * kw)));
                    let mut dx = need_x.then(|| ArrayD::<F>::zeros(xv.raw_dim()));
                    for i in 0..n {
                        let goi = go.index_axis(Axis(0), i);
                        let go_mat = goi.into_shape_with_order((cout, l)).unwrap();
                        if let Some(dw) = dw.as_mut() {
                            let xi = xv.index_axis(Axis(0), i);
                            let xi3 = xi.into_dimensionality::<ndarray::Ix3>().unwrap();
                            let cols = im2col(&xi3, geom);
                            *dw += &go_mat.dot(&cols.t());
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dcols = wmat.t().dot(&go_mat);
                            let dxi = col2im(&dcols, cin, h, wd, geom);
                            dx.index_axis_mut(Axis(0), i).assign(&dxi);
                        }
                    }
                    if let Some(dw) = dw {
                        gr.accum(g, w, dw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap());
                    }
                    if let Some(dx) = dx {
                        gr.accum(g, x, dx);
                    }
                    if let Some(bid) = b {
                        if g.ng(bid) {
                            let mut db = Array1::<F>::zeros(cout);
                            for i in 0..n {
                                for co in 0..cout {
                                    db[co] = db[co] + go.index_axis(Axis(0), i).index_axis(Axis(0), co).sum();
                                }
                            }
                            gr.accum(g, bid, db.into_dyn());
                        }
                    }
                }) as BackFn<F>
            }),
        )
    }

    /// Transposed 2D convolution (fractionally strided). x: [N, Cin, H, W],
    /// w: [Cin, Cout, kh, kw], output H = (H−1)·stride − 2·pad + kh + outpad.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        outpad: usize,
    ) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 4);
        assert_eq!(wv.ndim(), 4);
        let (n, cin, h, wd) = dims4(xv);
        let (cin_w, cout, kh, kw) = dims4(wv);
        assert_eq!(cin, cin_w, "conv_transpose2d channel mismatch");
        assert!(outpad < stride, "output padding must be smaller than stride");
        let oh = (h - 1) * stride + kh - 2 * pad + outpad;
        let ow = (wd - 1) * stride + kw - 2 * pad + outpad;
        // the input grid is the window grid over the output image
        let geom = ConvGeom { kh, kw, stride, pad, oh: h, ow: wd };
        let wmat = wv
            .view()
            .into_shape_with_order((cin, cout * kh * kw))
            .unwrap()
            .to_owned();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, cout, oh, ow]));
        for i in 0..n {
            let xi = xv.index_axis(Axis(0), i);
            let x_mat = xi.into_shape_with_order((cin, h * wd)).unwrap();
            let cols = wmat.t().dot(&x_mat); // [cout·k², h·wd]
            let oi = col2im(&cols, cout, oh, ow, geom);
            out.index_axis_mut(Axis(0), i).assign(&oi);
        }
        if let Some(bid) = b {
            let bv = self.value(bid).clone();
            let os = out.as_slice_mut().unwrap();
            let bs = bv.as_slice().unwrap();
            let l = oh * ow;
            for i in 0..n {
                for co in 0..cout {
                    let off = (i * cout + co) * l;
                    let bias = bs[co];
                    for v in &mut os[off..off + l] {
                        *v = *v + bias;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|bid| self.ng(bid)).unwrap_or(false);
        self.push(
            out,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let xv = g.value(x);
                    let wv = g.value(w);
                    let (n, cin, h, wd) = dims4(xv);
                    let (_, cout, kh, kw) = dims4(wv);
                    let (oh, ow) = (go.shape()[2], go.shape()[3]);
                    let geom = ConvGeom { kh, kw, stride, pad, oh: h, ow: wd };
                    let wmat = wv
                        .view()
                        .into_shape_with_order((cin, cout * kh * kw))
                        .unwrap()
                        .to_owned();
                    let need_x = g.ng(x);
                    let need_w = g.ng(w);
                    let mut dw = need_w.then(|| Array2::<F>::zeros((cin, cout * kh * kw)));
                    let mut dx = need_x.then(|| ArrayD::<F>::zeros(xv.raw_dim()));
                    for i in 0..n {
                        let goi = go.index_axis(Axis(0), i);
                        let go3 = goi.into_dimensionality::<ndarray::Ix3>().unwrap();
                        let gcols = im2col(&go3, geom); // [cout·k², h·wd]
                        if let Some(dx) = dx.as_mut() {
                            let dxi = wmat.dot(&gcols); // [cin, h·wd]
                            let dxi = dxi.into_shape_with_order((cin, h, wd)).unwrap();
                            dx.index_axis_mut(Axis(0), i).assign(&dxi);
                        }
                        if let Some(dw) = dw.as_mut() {
                            let xi = xv.index_axis(Axis(0), i);
                            let x_mat = xi.into_shape_with_order((cin, h * wd)).unwrap();
                            *dw += &x_mat.dot(&gcols.t());
                        }
                    }
                    if let Some(dw) = dw {
                        gr.accum(g, w, dw.into_shape_with_order(IxDyn(&[cin, cout, kh, kw])).unwrap());
                    }
                    if let Some(dx) = dx {
                        gr.accum(g, x, dx);
                    }
                    if let Some(bid) = b {
                        if g.ng(bid) {
                            let mut db = Array1::<F>::zeros(cout);
                            for i in 0..n {
                                for co in 0..cout {
                                    db[co] = db[co] + go.index_axis(Axis(0), i).index_axis(Axis(0), co).sum();
                                }
                            }
                            gr.accum(g, bid, db.into_dyn());
                        }
                    }
                }) as BackFn<F>
            }),
        )
    }

    /// Per-(instance, channel) normalization over the spatial extent, no
    /// learnable affine (the CycleGAN convention; convolution biases carry
    /// the shift).
    pub fn instance_norm(&mut self, x: NodeId, eps: F) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4);
        let (n, c, h, w) = dims4(xv);
        let hw = h * w;
        let hw_f = F::from_f64(hw as f64);
        let mut out = ArrayD::<F>::zeros(xv.raw_dim());
        let mut inv_std = Array2::<F>::zeros((n, c));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let src = &xs[nc * hw..(nc + 1) * hw];
                let mut mean = F::zero();
                for &v in src {
                    mean = mean + v;
                }
                mean = mean / hw_f;
                let mut var = F::zero();
                for &v in src {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / hw_f;
                let istd = F::one() / (var + eps).sqrt();
                inv_std[[nc / c, nc % c]] = istd;
                let dst = &mut os[nc * hw..(nc + 1) * hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - mean) * istd;
                }
            }
        }
        let ng = self.ng(x);
        let out_idx = self.nodes.len();
        self.push(
            out,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let y = &g.nodes[out_idx].value;
                    let (n, c, h, w) = dims4(y);
                    let hw = h * w;
                    let hw_f = F::from_f64(hw as f64);
                    let mut d = ArrayD::<F>::zeros(y.raw_dim());
                    let ys = y.as_slice().unwrap();
                    let gs = go.as_slice().unwrap();
                    let ds = d.as_slice_mut().unwrap();
                    for nc in 0..n * c {
                        let yb = &ys[nc * hw..(nc + 1) * hw];
                        let gb = &gs[nc * hw..(nc + 1) * hw];
                        let istd = inv_std[[nc / c, nc % c]];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for (&gi, &yi) in gb.iter().zip(yb) {
                            m1 = m1 + gi;
                            m2 = m2 + gi * yi;
                        }
                        m1 = m1 / hw_f;
                        m2 = m2 / hw_f;
                        let db = &mut ds[nc * hw..(nc + 1) * hw];
                        for ((di, &gi), &yi) in db.iter_mut().zip(gb).zip(yb) {
                            *di = istd * (gi - m1 - yi * m2);
                        }
                    }
                    gr.accum(g, x, d);
                }) as BackFn<F>
            }),
        )
    }

    /// L2-normalizes the channel vector at every (n, h, w) position:
    /// y = x / sqrt(Σ_c x² + eps). The LPIPS-style feature normalization.
    pub fn unit_normalize_channels(&mut self, x: NodeId, eps: F) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4);
        let (n, c, h, w) = dims4(xv);
        let hw = h * w;
        let mut out = ArrayD::<F>::zeros(xv.raw_dim());
        let mut norm = Array3::<F>::zeros((n, h, w));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let ns = norm.as_slice_mut().unwrap();
            for i in 0..n {
                for p in 0..hw {
                    let mut s = eps;
                    for ch in 0..c {
                        let v = xs[(i * c + ch) * hw + p];
                        s = s + v * v;
                    }
                    let sr = s.sqrt();
                    ns[i * hw + p] = sr;
                    for ch in 0..c {
                        let idx = (i * c + ch) * hw + p;
                        os[idx] = xs[idx] / sr;
                    }
                }
            }
        }
        let ng = self.ng(x);
        let out_idx = self.nodes.len();
        self.push(
            out,
            ng,
            ng.then(|| {
                Box::new(move |g: &Graph<F>, go: &ArrayD<F>, gr: &mut Grads<F>| {
                    let y = &g.nodes[out_idx].value;
                    let (n, c, h, w) = dims4(y);
                    let hw = h * w;
                    let mut d = ArrayD::<F>::zeros(y.raw_dim());
                    let ys = y.as_slice().unwrap();
                    let gs = go.as_slice().unwrap();
                    let ds = d.as_slice_mut().unwrap();
                    let nrm = norm.as_slice().unwrap();
                    for i in 0..n {
                        for p in 0..hw {
                            let mut dot = F::zero();
                            for ch in 0..c {
                                let idx = (i * c + ch) * hw + p;
                                dot = dot + gs[idx] * ys[idx];
                            }
                            let s = nrm[i * hw + p];
                            for ch in 0..c {
                                let idx = (i * c + ch) * hw + p;
                                ds[idx] = (gs[idx] - ys[idx] * dot) / s;
                            }
                        }
                    }
                    gr.accum(g, x, d);
                }) as BackFn<F>
            }),
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// that required them (leaves keep theirs; interior grads are freed as
    /// soon as they have been propagated).
    pub fn backward(&self, root: NodeId) -> Grads<F> {
        let rv = self.value(root);
        assert_eq!(rv.len(), 1, "backward root must be scalar");
        let mut grads = Grads { slots: (0..self.nodes.len()).map(|_| None).collect() };
        grads.slots[root.0] = Some(ArrayD::from_elem(rv.raw_dim(), F::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(back) = node.back.as_ref() else { continue };
            let Some(g) = grads.slots[id].take() else { continue };
            back(self, &g, &mut grads);
        }
        grads
    }
}

fn dims4<F: Flt>(v: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = v.shape();
    (s[0], s[1], s[2], s[3])
}

fn reflect_index(t: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if t < 0 {
        -t
    } else if t >= n {
        2 * n - 2 - t
    } else {
        t
    };
    debug_assert!((0..n).contains(&r));
    r as usize
}

/// CCW rotation of the two trailing spatial axes of [N, C, H, W].
fn rot90_nchw<F: Flt>(v: &ArrayD<F>, quarter_turns: u8) -> ArrayD<F> {
    let (n, c, h, w) = dims4(v);
    let q = quarter_turns % 4;
    if q == 0 {
        return v.clone();
    }
    let (oh, ow) = if q % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, oh, ow]));
    let vs = v.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let src = &vs[nc * h * w..(nc + 1) * h * w];
        let dst = &mut os[nc * oh * ow..(nc + 1) * oh * ow];
        match q {
            1 => {
                for i in 0..oh {
                    for j in 0..ow {
                        dst[i * ow + j] = src[j * w + (w - 1 - i)];
                    }
                }
            }
            2 => {
                for i in 0..oh {
                    for j in 0..ow {
                        dst[i * ow + j] = src[(h - 1 - i) * w + (w - 1 - j)];
                    }
                }
            }
            3 => {
                for i in 0..oh {
                    for j in 0..ow {
                        dst[i * ow + j] = src[(h - 1 - j) * w + i];
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    out
}

fn flip_w_nchw<F: Flt>(v: &ArrayD<F>) -> ArrayD<F> {
    let (n, c, h, w) = dims4(v);
    let mut out = ArrayD::<F>::zeros(v.raw_dim());
    let vs = v.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for nc in 0..n * c {
        for y in 0..h {
            let off = nc * h * w + y * w;
            for x in 0..w {
                os[off + x] = vs[off + (w - 1 - x)];
            }
        }
    }
    out
}
