//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks
//! the tape in reverse and returns gradients for the parameter leaves. Loss
//! nodes reduce to a `[1,1,1,1]` scalar and average over the batch.

use std::collections::BTreeMap;

use crate::losses;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{conv2d_backward, conv2d_forward, Tensor};
use crate::warp::{self, BorderPolicy};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool(Var),
    Upsample(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Scale(Var, f32),
    /// Per `(n, c)` mean and inverse standard deviation.
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f32, f32)> },
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Warp { x: Var, field: Var, border: BorderPolicy },
    SoftDice(Var, Var),
    Gncc(Var, Var),
    Smoothness(Var),
    Mse(Var, Var),
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = (max_norm / norm) as f32;
            for t in self.by_param.values_mut() {
                t.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A trainable leaf holding a copy of the parameter's current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), &[])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv { x, w, b, stride, pad }, &inputs)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial size, got {h}x{w}");
        let data = warp::avg_pool2_channels(t.data(), n * c, h, w);
        let out = Tensor::from_vec([n, c, h / 2, w / 2], data).expect("pool shape");
        self.push(out, Op::AvgPool(x), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let data = warp::upsample2_channels(t.data(), n * c, h, w);
        let out = Tensor::from_vec([n, c, 2 * h, 2 * w], data).expect("upsample shape");
        self.push(out, Op::Upsample(x), &[x])
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.shape();
        let [nb, cb, hb, wb] = tb.shape();
        assert!(n == nb && h == hb && w == wb, "concat shape mismatch {:?} vs {:?}", ta.shape(), tb.shape());
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(ta.sample(i));
            data.extend_from_slice(tb.sample(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data).expect("concat shape");
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Instance normalization with per-channel affine `gamma`, `beta` of shape `[C,1,1,1]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gm.len(), c, "instance norm gamma has {} entries for {c} channels", gm.len());
        let mut out = Tensor::zeros(t.shape());
        let mut stats = Vec::with_capacity(n * c);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let src = &t.data()[off..off + hw];
                let mean = src.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
                let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
                let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
                let (mean, inv) = (mean as f32, inv as f32);
                stats.push((mean, inv));
                let dst = &mut out.data_mut()[off..off + hw];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = gm[ch] * (v - mean) * inv + bt[ch];
                }
            }
        }
        self.push(out, Op::InstanceNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope
            }
        });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Warps every channel of `x` by the per-sample field `[N,2,H,W]` (dy, dx).
    pub fn warp(&mut self, x: Var, field: Var, border: BorderPolicy) -> Var {
        let (t, f) = (self.value(x), self.value(field));
        let [n, c, h, w] = t.shape();
        assert_eq!(f.shape(), [n, 2, h, w], "warp field shape {:?} for input {:?}", f.shape(), t.shape());
        let mut out = Tensor::zeros(t.shape());
        let len = c * h * w;
        for i in 0..n {
            let (dy, dx) = f.sample(i).split_at(h * w);
            warp::warp_channels(t.sample(i), c, h, w, dy, dx, border, &mut out.data_mut()[i * len..(i + 1) * len]);
        }
        self.push(out, Op::Warp { x, field, border }, &[x, field])
    }

    fn batch_loss(&mut self, a: Var, b: Var, op: Op, f: impl Fn(&[f64], &[f64]) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "loss operands differ in shape");
        let n = ta.batch();
        let total: f64 = (0..n).map(|i| f(&to_f64(ta.sample(i)), &to_f64(tb.sample(i)))).sum();
        self.push(Tensor::scalar((total / n as f64) as f32), op, &[a, b])
    }

    /// Batch mean of the squared-denominator soft Dice loss.
    pub fn soft_dice(&mut self, pred: Var, target: Var) -> Var {
        self.batch_loss(pred, target, Op::SoftDice(pred, target), |p, t| losses::soft_dice_slice(p, t).value)
    }

    /// Batch mean of the global normalized cross-correlation loss.
    pub fn gncc(&mut self, x: Var, y: Var) -> Var {
        self.batch_loss(x, y, Op::Gncc(x, y), |a, b| losses::gncc_slice(a, b).value)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        self.batch_loss(a, b, Op::Mse(a, b), |x, y| {
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64
        })
    }

    /// Batch mean of the smoothness penalty of `[N,2,H,W]` fields.
    pub fn smoothness(&mut self, field: Var) -> Var {
        let f = self.value(field);
        let [n, c, h, w] = f.shape();
        assert_eq!(c, 2, "smoothness expects 2-channel fields");
        let total: f64 = (0..n)
            .map(|i| {
                let s = to_f64(f.sample(i));
                losses::smoothness_slice(&s[..h * w], &s[h * w..], h, w).value
            })
            .sum();
        self.push(Tensor::scalar((total / n as f64) as f32), Op::Smoothness(field), &[field])
    }

    /// `Σ w_i · term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let total: f32 = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                match out.by_param.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert(id, g);
                    }
                }
            }
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Conv { x, w, b, stride, pad } => {
                let mut gx = self.wants(x).then(|| take_or_zero(grads, x, self.value(x).shape()));
                let mut gw = self.wants(w).then(|| take_or_zero(grads, w, self.value(w).shape()));
                let mut gb = b.filter(|&b| self.wants(b)).map(|b| take_or_zero(grads, b, self.value(b).shape()));
                conv2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    gx.as_mut(),
                    gw.as_mut(),
                    gb.as_mut(),
                );
                restore(grads, x, gx);
                restore(grads, w, gw);
                if let Some(b) = b {
                    restore(grads, b, gb);
                }
            }
            &Op::AvgPool(x) => {
                if self.wants(x) {
                    let [n, c, h, w] = self.value(x).shape();
                    let acc = slot(grads, x, self.value(x).shape());
                    warp::avg_pool2_channels_backward(g.data(), n * c, h, w, acc.data_mut());
                }
            }
            &Op::Upsample(x) => {
                if self.wants(x) {
                    let [n, c, h, w] = self.value(x).shape();
                    let acc = slot(grads, x, self.value(x).shape());
                    warp::upsample2_channels_backward(g.data(), n * c, h, w, acc.data_mut());
                }
            }
            &Op::Concat(a, b) => {
                let ca = self.value(a).sample_len();
                let cb = self.value(b).sample_len();
                for (v, off, len) in [(a, 0, ca), (b, ca, cb)] {
                    if self.wants(v) {
                        let acc = slot(grads, v, self.value(v).shape());
                        for i in 0..g.batch() {
                            let src = &g.sample(i)[off..off + len];
                            for (d, s) in acc.data_mut()[i * len..(i + 1) * len].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if self.wants(x) {
                    let acc = slot(grads, x, g.shape());
                    for (d, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *d += s * v;
                    }
                }
            }
            Op::InstanceNorm { x, gamma, beta, stats } => self.instance_norm_backward(*x, *gamma, *beta, stats, g, grads),
            &Op::LeakyRelu(x, slope) => {
                if self.wants(x) {
                    let input = self.value(x);
                    let acc = slot(grads, x, g.shape());
                    for ((d, &gv), &xv) in acc.data_mut().iter_mut().zip(g.data()).zip(input.data()) {
                        *d += if xv < 0.0 { slope * gv } else { gv };
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if self.wants(x) {
                    let acc = slot(grads, x, g.shape());
                    for ((d, &gv), &y) in acc.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            &Op::Warp { x, field, border } => {
                let (t, f) = (self.value(x), self.value(field));
                let [n, c, h, w] = t.shape();
                let len = c * h * w;
                let mut gx = self.wants(x).then(|| take_or_zero(grads, x, t.shape()));
                let mut gf = self.wants(field).then(|| take_or_zero(grads, field, f.shape()));
                for i in 0..n {
                    let (dy, dx) = f.sample(i).split_at(h * w);
                    let gsrc = gx.as_mut().map(|gx| &mut gx.data_mut()[i * len..(i + 1) * len]);
                    let gfield = gf.as_mut().map(|gf| {
                        let s = &mut gf.data_mut()[i * 2 * h * w..(i + 1) * 2 * h * w];
                        s.split_at_mut(h * w)
                    });
                    warp::warp_channels_backward(
                        t.sample(i),
                        c,
                        h,
                        w,
                        dy,
                        dx,
                        border,
                        &g.data()[i * len..(i + 1) * len],
                        gsrc,
                        gfield,
                    );
                }
                restore(grads, x, gx);
                restore(grads, field, gf);
            }
            &Op::SoftDice(a, b) => {
                self.symmetric_loss_backward(a, b, g.item(), grads, losses::soft_dice_grad_slice::<f64>)
            }
            &Op::Gncc(a, b) => self.symmetric_loss_backward(a, b, g.item(), grads, losses::gncc_grad_slice::<f64>),
            &Op::Mse(a, b) => {
                let n = self.value(a).batch();
                let len = self.value(a).sample_len();
                let k = 2.0 * g.item() / (n * len) as f32;
                let diff: Vec<f32> =
                    self.value(a).data().iter().zip(self.value(b).data()).map(|(p, q)| k * (p - q)).collect();
                for (v, sign) in [(a, 1.0f32), (b, -1.0)] {
                    if self.wants(v) {
                        let acc = slot(grads, v, self.value(v).shape());
                        for (d, df) in acc.data_mut().iter_mut().zip(&diff) {
                            *d += sign * df;
                        }
                    }
                }
            }
            &Op::Smoothness(field) => {
                if self.wants(field) {
                    let f = self.value(field);
                    let [n, _, h, w] = f.shape();
                    let scale = g.item() as f64 / n as f64;
                    let acc = slot(grads, field, f.shape());
                    for i in 0..n {
                        let s = to_f64(f.sample(i));
                        let mut gd = vec![0.0f64; 2 * h * w];
                        let (gdy, gdx) = gd.split_at_mut(h * w);
                        losses::smoothness_grad_slice(&s[..h * w], &s[h * w..], h, w, scale, gdy, gdx);
                        for (d, v) in acc.data_mut()[i * 2 * h * w..(i + 1) * 2 * h * w].iter_mut().zip(gd) {
                            *d += v as f32;
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        slot(grads, v, [1, 1, 1, 1]).data_mut()[0] += w * g.item();
                    }
                }
            }
        }
    }

    fn symmetric_loss_backward(
        &self,
        a: Var,
        b: Var,
        upstream: f32,
        grads: &mut [Option<Tensor>],
        grad_fn: fn(&[f64], &[f64], f64, &mut [f64]),
    ) {
        let n = self.value(a).batch();
        let scale = upstream as f64 / n as f64;
        for (v, other) in [(a, b), (b, a)] {
            if !self.wants(v) {
                continue;
            }
            let (tv, to) = (self.value(v), self.value(other));
            let len = tv.sample_len();
            let acc = slot(grads, v, tv.shape());
            for i in 0..n {
                let mut gi = vec![0.0f64; len];
                grad_fn(&to_f64(tv.sample(i)), &to_f64(to.sample(i)), scale, &mut gi);
                for (d, s) in acc.data_mut()[i * len..(i + 1) * len].iter_mut().zip(gi) {
                    *d += s as f32;
                }
            }
        }
    }

    fn instance_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &[(f32, f32)],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let gm = self.value(gamma).data().to_vec();
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        let mut gx = self.wants(x).then(|| take_or_zero(grads, x, t.shape()));
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let (mean, inv) = stats[i * c + ch];
                let xs = &t.data()[off..off + hw];
                let gs = &g.data()[off..off + hw];
                let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
                for (&gv, &xv) in gs.iter().zip(xs) {
                    let xhat = (xv - mean) * inv;
                    sum_g += gv as f64;
                    sum_gx += (gv * xhat) as f64;
                }
                dgamma[ch] += sum_gx as f32;
                dbeta[ch] += sum_g as f32;
                if let Some(gx) = gx.as_mut() {
                    let mg = (sum_g / hw as f64) as f32;
                    let mgx = (sum_gx / hw as f64) as f32;
                    let k = gm[ch] * inv;
                    for ((d, &gv), &xv) in gx.data_mut()[off..off + hw].iter_mut().zip(gs).zip(xs) {
                        let xhat = (xv - mean) * inv;
                        *d += k * (gv - mg - xhat * mgx);
                    }
                }
            }
        }
        restore(grads, x, gx);
        for (v, d) in [(gamma, dgamma), (beta, dbeta)] {
            if self.wants(v) {
                let acc = slot(grads, v, self.value(v).shape());
                for (a, b) in acc.data_mut().iter_mut().zip(d) {
                    *a += b;
                }
            }
        }
    }
}

fn to_f64(s: &[f32]) -> Vec<f64> {
    s.iter().map(|&v| v as f64).collect()
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: [usize; 4]) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn take_or_zero(grads: &mut [Option<Tensor>], v: Var, shape: [usize; 4]) -> Tensor {
    grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape))
}

fn restore(grads: &mut [Option<Tensor>], v: Var, t: Option<Tensor>) {
    if let Some(t) = t {
        grads[v.0] = Some(t);
    }
}
