//! A small tape-based reverse-mode autodiff engine over `f64` tensors.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Parameters are read from a [`ParamStore`] and their
//! gradients are reported by name.

pub(crate) mod kernels;

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::ParamStore;
use crate::tensor::Tensor;
use kernels::ConvDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    LayerNorm { x: Var, gain: Var, bias: Var, axis: usize },
    Softmax(Var),
    L2Normalize(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    ScaleAxis { x: Var, v: Var, axis: usize },
    AddBroadcast { a: Var, b: Var },
    SumLast(Var),
    MeanLast(Var),
    MeanAll(Var),
    AdaptivePool { x: Var, oh: usize, ow: usize },
    Crop { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Vec<f64>>>,
    params: HashMap<String, Vec<f64>>,
}

impl Grads {
    /// Gradient of a parameter, or `None` when it did not influence the loss.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn params(&self) -> &HashMap<String, Vec<f64>> {
        &self.params
    }

    pub fn var(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
    frozen: Option<&'a dyn Fn(&str) -> bool>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new(), frozen: None }
    }

    /// Parameters matching `frozen` enter the graph as constants.
    pub fn with_frozen(store: &'a ParamStore, frozen: &'a dyn Fn(&str) -> bool) -> Self {
        Self { frozen: Some(frozen), ..Self::new(store) }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input leaf (not stored in the parameter store).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Looks up a parameter by name.
    ///
    /// # Panics
    /// When the store has no such parameter; model constructors validate names.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let trainable = self.frozen.is_none_or(|f| !f(name));
        let v = self.push(t, Op::Leaf, trainable);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    /// Copies a value into a fresh constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape element count");
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        assert_eq!(perm.len(), self.shape(a).len(), "permute rank");
        let (data, shape) = kernels::permute(self.data(a), self.shape(a), perm);
        let t = Tensor::new(shape, data).expect("permute");
        let ng = self.ng(a);
        self.push(t, Op::Permute(a, perm.to_vec()), ng)
    }

    /// `x[..., k] · wᵀ + b` with `w` shaped `[out, k]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (out, k) = (self.shape(w)[0], self.shape(w)[1]);
        let xs = self.shape(x);
        assert_eq!(*xs.last().expect("rank ≥ 1"), k, "linear: input width");
        let rows = self.value(x).numel() / k;
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("rank ≥ 1") = out;
        let mut y = vec![0.0; rows * out];
        kernels::gemm(rows, k, out, self.data(x), false, self.data(w), true, &mut y, 0.0);
        if let Some(b) = b {
            let bd = self.data(b);
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bd).for_each(|(v, bv)| *v += bv);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(shape, y).expect("linear"), Op::Linear { x, w, b }, ng)
    }

    /// Batched matrix product over a leading batch axis.
    ///
    /// `a` is `[B, M, K]` (or `[B, K, M]` when `ta`), `b` is `[B, K, N]`
    /// (or `[B, N, K]` when `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: batch shapes");
        let (bsz, m, k) = if ta { (sa[0], sa[2], sa[1]) } else { (sa[0], sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm: inner dimensions");
        let mut y = vec![0.0; bsz * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bsz {
            kernels::gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                ta,
                &bd[i * k * n..(i + 1) * k * n],
                tb,
                &mut y[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![bsz, m, n], y).expect("bmm"), Op::Bmm { a, b, ta, tb }, ng)
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `w` is `[cout, cin, k, k]` (dense, `k ∈ {1, 3}`) or `[c, 1, 3, 3]`
    /// with `depthwise`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, depthwise: bool) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d: expects NCHW input and OIHW weight");
        let k = ws[2];
        assert!(ws[3] == k && (k == 1 || k == 3), "conv2d: kernel must be 1x1 or 3x3");
        if depthwise {
            assert!(ws[0] == xs[1] && ws[1] == 1 && k == 3, "conv2d: depthwise weight shape");
        } else {
            assert_eq!(ws[1], xs[1], "conv2d: input channels");
        }
        let dims = ConvDims { n: xs[0], cin: xs[1], cout: ws[0], h: xs[2], w: xs[3], k, depthwise };
        let y = kernels::conv2d_forward(dims, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(vec![dims.n, dims.cout, dims.h, dims.w], y).expect("conv2d");
        self.push(t, Op::Conv2d { x, w, b, dims }, ng)
    }

    fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Layer normalization over `axis` (channel axis 1 for NCHW maps,
    /// last axis for token matrices).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Var {
        let (outer, c, inner) = Self::axis_view(self.shape(x), axis);
        assert_eq!(self.value(gain).numel(), c, "layer_norm: gain width");
        let y = kernels::layer_norm_forward(
            self.data(x),
            outer,
            c,
            inner,
            self.data(gain),
            self.data(bias),
        );
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let t = Tensor::new(self.shape(x).to_vec(), y).expect("layer_norm");
        self.push(t, Op::LayerNorm { x, gain, bias, axis }, ng)
    }

    /// Softmax over the last axis.
    ///
    /// With a mask, `mask` is `[groups, n]` and row `r` uses group
    /// `r / rows_per_group`; masked entries are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<(Rc<Vec<bool>>, usize)>) -> Var {
        let n = *self.shape(x).last().expect("rank ≥ 1");
        let y = kernels::softmax_forward(
            self.data(x),
            n,
            mask.as_ref().map(|(m, per)| (m.as_slice(), *per)),
        );
        let ng = self.ng(x);
        let t = Tensor::new(self.shape(x).to_vec(), y).expect("softmax");
        self.push(t, Op::Softmax(x), ng)
    }

    /// `x / max(‖x‖₂, ε)` along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().expect("rank ≥ 1");
        let mut y = self.data(x).to_vec();
        for row in y.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(kernels::L2_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let ng = self.ng(x);
        let t = Tensor::new(self.shape(x).to_vec(), y).expect("l2_normalize");
        self.push(t, Op::L2Normalize(x), ng)
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat: shapes {sa:?} vs {sb:?}");
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut y = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        for n in 0..sa[0] {
            y.extend_from_slice(&self.data(a)[n * ca..(n + 1) * ca]);
            y.extend_from_slice(&self.data(b)[n * cb..(n + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, y).expect("concat"), Op::Concat(a, b), ng)
    }

    /// `x[:, start..start+len]` along axis 1.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[1], "slice out of range");
        let inner: usize = s[2..].iter().product();
        let mut y = Vec::with_capacity(s[0] * len * inner);
        for n in 0..s[0] {
            let base = (n * s[1] + start) * inner;
            y.extend_from_slice(&self.data(x)[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, y).expect("slice"), Op::Slice { x, start }, ng)
    }

    /// Multiplies every slice along `axis` by the matching entry of `v`.
    pub fn scale_axis(&mut self, x: Var, v: Var, axis: usize) -> Var {
        let (outer, c, inner) = Self::axis_view(self.shape(x), axis);
        assert_eq!(self.value(v).numel(), c, "scale_axis: width");
        let vd = self.data(v);
        let mut y = self.data(x).to_vec();
        for o in 0..outer {
            for (ci, s) in vd.iter().enumerate() {
                let off = (o * c + ci) * inner;
                y[off..off + inner].iter_mut().for_each(|e| *e *= s);
            }
        }
        let ng = self.ng(x) || self.ng(v);
        let t = Tensor::new(self.shape(x).to_vec(), y).expect("scale_axis");
        self.push(t, Op::ScaleAxis { x, v, axis }, ng)
    }

    /// `a + b` where `b`'s shape is a prefix of `a`'s (broadcast over trailing axes).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.starts_with(sb), "add_broadcast: {sb:?} is not a prefix of {sa:?}");
        let inner = self.value(a).numel() / self.value(b).numel();
        let mut y = self.data(a).to_vec();
        for (chunk, bv) in y.chunks_mut(inner).zip(self.data(b)) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let ng = self.ng(a) || self.ng(b);
        let t = Tensor::new(sa.to_vec(), y).expect("add_broadcast");
        self.push(t, Op::AddBroadcast { a, b }, ng)
    }

    fn reduce_last(&mut self, x: Var, mean: bool) -> Var {
        let s = self.shape(x).to_vec();
        let n = *s.last().expect("rank ≥ 1");
        let div = if mean { n as f64 } else { 1.0 };
        let y: Vec<f64> = self.data(x).chunks(n).map(|c| c.iter().sum::<f64>() / div).collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let op = if mean { Op::MeanLast(x) } else { Op::SumLast(x) };
        let ng = self.ng(x);
        self.push(Tensor::new(shape, y).expect("reduce"), op, ng)
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        self.reduce_last(x, false)
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        self.reduce_last(x, true)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.data(x).iter().sum::<f64>() / self.value(x).numel() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), ng)
    }

    /// Adaptive average pooling of an NCHW map onto an `oh×ow` grid.
    pub fn adaptive_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (rows, cols) = (kernels::pool_bins(h, oh), kernels::pool_bins(w, ow));
        let mut y = vec![0.0; nc * oh * ow];
        let xd = self.data(x);
        for p in 0..nc {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    y[(p * oh + i) * ow + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let ng = self.ng(x);
        let t = Tensor::new(vec![s[0], s[1], oh, ow], y).expect("pool");
        self.push(t, Op::AdaptivePool { x, oh, ow }, ng)
    }

    /// Keeps the top-left `h×w` window of an NCHW map.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(h <= s[2] && w <= s[3], "crop larger than input");
        let xd = self.data(x);
        let mut y = Vec::with_capacity(s[0] * s[1] * h * w);
        for p in 0..s[0] * s[1] {
            for r in 0..h {
                let off = (p * s[2] + r) * s[3];
                y.extend_from_slice(&xd[off..off + w]);
            }
        }
        let ng = self.ng(x);
        let t = Tensor::new(vec![s[0], s[1], h, w], y).expect("crop");
        self.push(t, Op::Crop { x }, ng)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &gy, &mut grads);
            }
            // Interior gradients are dropped as soon as they are consumed.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(name, v)| grads[v.0].take().map(|g| (name.clone(), g)))
            .collect();
        Grads { nodes: grads, params }
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        macro_rules! acc {
            ($v:expr, $f:expr) => {{
                let v: Var = $v;
                if self.ng(v) {
                    let len = self.value(v).numel();
                    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(slot.as_mut_slice());
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |g: &mut [f64]| add_into(g, gy));
                acc!(*b, |g: &mut [f64]| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc!(*a, |g: &mut [f64]| add_into(g, gy));
                acc!(*b, |g: &mut [f64]| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |g: &mut [f64]| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * bd[k];
                    }
                });
                acc!(*b, |g: &mut [f64]| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * ad[k];
                    }
                });
            }
            Op::Scale(a, s) => {
                acc!(*a, |g: &mut [f64]| g.iter_mut().zip(gy).for_each(|(g, d)| *g += s * d));
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc!(*a, |g: &mut [f64]| add_into(g, gy)),
            Op::Relu(a) => acc!(*a, |g: &mut [f64]| {
                for k in 0..g.len() {
                    if y[k] > 0.0 {
                        g[k] += gy[k];
                    }
                }
            }),
            Op::Gelu(a) => {
                let xd = self.data(*a);
                acc!(*a, |g: &mut [f64]| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * kernels::gelu_grad(xd[k]);
                    }
                });
            }
            Op::Sigmoid(a) => acc!(*a, |g: &mut [f64]| {
                for k in 0..g.len() {
                    g[k] += gy[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Abs(a) => {
                let xd = self.data(*a);
                acc!(*a, |g: &mut [f64]| {
                    for k in 0..g.len() {
                        let s = if xd[k] > 0.0 {
                            1.0
                        } else if xd[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[k] += s * gy[k];
                    }
                });
            }
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (back, _) = kernels::permute(gy, node.value.shape(), &inv);
                acc!(*a, |g: &mut [f64]| add_into(g, &back));
            }
            Op::Linear { x, w, b } => {
                let (out, k) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = gy.len() / out;
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc!(*x, |g: &mut [f64]| kernels::gemm(rows, out, k, gy, false, wd, false, g, 1.0));
                acc!(*w, |g: &mut [f64]| kernels::gemm(out, rows, k, gy, true, xd, false, g, 1.0));
                if let Some(b) = b {
                    acc!(*b, |g: &mut [f64]| {
                        for row in gy.chunks(out) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let sa = self.shape(*a);
                let (bsz, m, k) = if ta { (sa[0], sa[2], sa[1]) } else { (sa[0], sa[1], sa[2]) };
                let n = node.value.shape()[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |g: &mut [f64]| {
                    for i in 0..bsz {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let gi = &mut g[i * m * k..(i + 1) * m * k];
                        if ta {
                            kernels::gemm(k, n, m, bi, tb, gyi, true, gi, 1.0);
                        } else {
                            kernels::gemm(m, n, k, gyi, false, bi, !tb, gi, 1.0);
                        }
                    }
                });
                acc!(*b, |g: &mut [f64]| {
                    for i in 0..bsz {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let gi = &mut g[i * k * n..(i + 1) * k * n];
                        if tb {
                            kernels::gemm(n, m, k, gyi, true, ai, ta, gi, 1.0);
                        } else {
                            kernels::gemm(k, m, n, ai, !ta, gyi, false, gi, 1.0);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, dims } => {
                let mut gx = self.ng(*x).then(|| take_or_zero(grads, *x, self));
                let mut gw = self.ng(*w).then(|| take_or_zero(grads, *w, self));
                let mut gb = b.filter(|b| self.ng(*b)).map(|b| take_or_zero(grads, b, self));
                kernels::conv2d_backward(
                    *dims,
                    self.data(*x),
                    self.data(*w),
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                restore(grads, *x, gx);
                restore(grads, *w, gw);
                if let Some(b) = b {
                    restore(grads, *b, gb);
                }
            }
            Op::LayerNorm { x, gain, bias, axis } => {
                let (outer, c, inner) = Self::axis_view(self.shape(*x), *axis);
                let mut gx = self.ng(*x).then(|| take_or_zero(grads, *x, self));
                let mut gg = self.ng(*gain).then(|| take_or_zero(grads, *gain, self));
                let mut gb = self.ng(*bias).then(|| take_or_zero(grads, *bias, self));
                kernels::layer_norm_backward(
                    self.data(*x),
                    outer,
                    c,
                    inner,
                    self.data(*gain),
                    gy,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                restore(grads, *x, gx);
                restore(grads, *gain, gg);
                restore(grads, *bias, gb);
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().expect("rank ≥ 1");
                acc!(*x, |g: &mut [f64]| kernels::softmax_backward(y, gy, n, g));
            }
            Op::L2Normalize(x) => {
                let n = *node.value.shape().last().expect("rank ≥ 1");
                let xd = self.data(*x);
                acc!(*x, |g: &mut [f64]| {
                    for r in 0..g.len() / n {
                        let xr = &xd[r * n..(r + 1) * n];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &gy[r * n..(r + 1) * n]);
                        if norm > kernels::L2_EPS {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                g[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..n {
                                g[r * n + j] += gr[j] / kernels::L2_EPS;
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let inner: usize = sa[2..].iter().product();
                let ca = sa[1] * inner;
                let cb = self.shape(*b)[1] * inner;
                acc!(*a, |g: &mut [f64]| {
                    for n in 0..sa[0] {
                        add_into(&mut g[n * ca..(n + 1) * ca], &gy[n * (ca + cb)..n * (ca + cb) + ca]);
                    }
                });
                acc!(*b, |g: &mut [f64]| {
                    for n in 0..sa[0] {
                        let src = &gy[n * (ca + cb) + ca..(n + 1) * (ca + cb)];
                        add_into(&mut g[n * cb..(n + 1) * cb], src);
                    }
                });
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                let len = node.value.shape()[1];
                let (c, n0) = (s[1], s[0]);
                acc!(*x, |g: &mut [f64]| {
                    for n in 0..n0 {
                        let dst = (n * c + start) * inner;
                        let src = n * len * inner;
                        add_into(&mut g[dst..dst + len * inner], &gy[src..src + len * inner]);
                    }
                });
            }
            Op::ScaleAxis { x, v, axis } => {
                let (outer, c, inner) = Self::axis_view(self.shape(*x), *axis);
                let (xd, vd) = (self.data(*x), self.data(*v));
                acc!(*x, |g: &mut [f64]| {
                    for o in 0..outer {
                        for (ci, s) in vd.iter().enumerate() {
                            let off = (o * c + ci) * inner;
                            for k in off..off + inner {
                                g[k] += gy[k] * s;
                            }
                        }
                    }
                });
                acc!(*v, |g: &mut [f64]| {
                    for o in 0..outer {
                        for (ci, gv) in g.iter_mut().enumerate() {
                            let off = (o * c + ci) * inner;
                            *gv += (off..off + inner).map(|k| gy[k] * xd[k]).sum::<f64>();
                        }
                    }
                });
            }
            Op::AddBroadcast { a, b } => {
                let inner = gy.len() / self.value(*b).numel();
                acc!(*a, |g: &mut [f64]| add_into(g, gy));
                acc!(*b, |g: &mut [f64]| {
                    for (gv, chunk) in g.iter_mut().zip(gy.chunks(inner)) {
                        *gv += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::SumLast(x) | Op::MeanLast(x) => {
                let n = *self.shape(*x).last().expect("rank ≥ 1");
                let div = if matches!(node.op, Op::MeanLast(_)) { n as f64 } else { 1.0 };
                acc!(*x, |g: &mut [f64]| {
                    for (chunk, d) in g.chunks_mut(n).zip(gy) {
                        chunk.iter_mut().for_each(|v| *v += d / div);
                    }
                });
            }
            Op::MeanAll(x) => {
                let d = gy[0] / self.value(*x).numel() as f64;
                acc!(*x, |g: &mut [f64]| g.iter_mut().for_each(|v| *v += d));
            }
            Op::AdaptivePool { x, oh, ow } => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (rows, cols) = (kernels::pool_bins(h, *oh), kernels::pool_bins(w, *ow));
                acc!(*x, |g: &mut [f64]| {
                    for p in 0..nc {
                        for (i, &(r0, r1)) in rows.iter().enumerate() {
                            for (j, &(c0, c1)) in cols.iter().enumerate() {
                                let d = gy[(p * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for r in r0..r1 {
                                    let off = p * h * w + r * w;
                                    g[off + c0..off + c1].iter_mut().for_each(|v| *v += d);
                                }
                            }
                        }
                    }
                });
            }
            Op::Crop { x } => {
                let s = self.shape(*x);
                let (h, w) = (node.value.shape()[2], node.value.shape()[3]);
                let (sh, sw, planes) = (s[2], s[3], s[0] * s[1]);
                acc!(*x, |g: &mut [f64]| {
                    for p in 0..planes {
                        for r in 0..h {
                            let dst = (p * sh + r) * sw;
                            add_into(&mut g[dst..dst + w], &gy[(p * h + r) * w..(p * h + r + 1) * w]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], v: Var, g: &Graph<'_>) -> Vec<f64> {
    grads[v.0].take().unwrap_or_else(|| vec![0.0; g.value(v).numel()])
}

fn restore(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        grads[v.0] = Some(g);
    }
}
