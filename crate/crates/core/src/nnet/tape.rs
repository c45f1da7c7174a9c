//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! whatever the backward pass needs. Nodes are appended in evaluation order,
//! so a reverse sweep from the root visits each node after all of its
//! consumers.

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{contract, Result};

pub const BN_EPS: f64 = 1e-5;
/// Probabilities entering binary cross-entropy are clamped to `[EPS, 1-EPS]`.
pub const PROB_EPS: f64 = 1e-7;
const PENALTY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var },
    Concat { xs: Vec<Var> },
    Add(Var, Var),
    Sigmoid(Var),
    Bce { p: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
    SoftplusMean { x: Var, mask: Vec<bool>, count: usize },
    Penalty { p: Var, v: Vec<f64>, mask: Vec<bool>, z: f64 },
    Dot { x: Var, c: Vec<f64> },
    WeightedSum { xs: Vec<Var>, coef: Vec<f64> },
    Uncertainty { losses: Vec<Var>, log_sigma: Vec<Var>, lambda: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    /// `None` when `v` does not influence the root or does not require grad.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &str, shapes: &[&[usize]]) -> crate::Error {
    contract(format!("{op}: incompatible shapes {shapes:?}"))
}

fn dims4(op: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    t.dims4().ok_or_else(|| shape_err(op, &[t.shape()]))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![0.0; cin * k * k * hw];
    for ci in 0..cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (sy as usize) * w + (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [f64]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d0 = ci * hw + (sy as usize) * w + (x0 as isize + dx) as usize;
                    let dst = &mut dx_out[d0..d0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Source index pairs and weights for 2x bilinear upsampling with
/// half-pixel centres (`align_corners = false`).
fn upsample_table(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.push_scalar(value, op, requires_grad)
    }

    // Loss reductions skip the finiteness assertion: callers check the value
    // and report which term went bad.
    fn push_scalar(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf; parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that is cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// 2-D convolution with an odd square kernel, stride 1 and "same" zero
    /// padding. `x: (B, Cin, H, W)`, `w: (Cout, Cin, k, k)`, `b: (Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (bs, cin, h, wd) = dims4("conv2d", xt)?;
        let (cout, wcin, k, k2) = dims4("conv2d", wt)?;
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(shape_err("conv2d", &[xt.shape(), wt.shape()]));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv2d", &[xt.shape(), wt.shape(), self.value(b).shape()]));
            }
        }
        let hw = h * wd;
        let kk = cin * k * k;
        let mut out = vec![0.0; bs * cout * hw];
        for bi in 0..bs {
            let xb = &xt.data()[bi * cin * hw..(bi + 1) * cin * hw];
            let ob = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            if k == 1 {
                gemm(cout, kk, hw, wt.data(), false, xb, false, 0.0, ob);
            } else {
                let cols = im2col(xb, cin, h, wd, k);
                gemm(cout, kk, hw, wt.data(), false, &cols, false, 0.0, ob);
            }
            if let Some(b) = b {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    for v in &mut ob[co * hw..(co + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[bs, cout, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }, rg))
    }

    fn bn_common(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xt = self.value(x);
        let (bs, c, h, w) = dims4("batch_norm", xt)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch_norm", &[xt.shape(), self.value(gamma).shape()]));
        }
        let hw = h * w;
        let n = (bs * hw) as f64;
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err("batch_norm", &[xt.shape(), &[m.len()]]));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..bs {
                        s += xt.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    mean[ch] = s / n;
                    let mut ss = 0.0;
                    for bi in 0..bs {
                        for v in &xt.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            ss += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = ss / n;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        for bi in 0..bs {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xt.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::from_vec(xt.shape(), out)?;
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: stats.is_none() }, rg);
        Ok((v, mean, var))
    }

    /// Batch normalization with batch statistics (biased variance). Also
    /// returns the batch mean and variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.bn_common(x, gamma, beta, None)
    }

    /// Batch normalization with frozen statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        Ok(self.bn_common(x, gamma, beta, Some((mean, var)))?.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let out: Vec<f64> = xt.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_vec(xt.shape(), out).unwrap();
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let out: Vec<f64> = xt.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_vec(xt.shape(), out).unwrap();
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// 2x2 max pooling, stride 2. Ties go to the first element in row-major
    /// window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (bs, c, h, w) = dims4("maxpool2", xt)?;
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(shape_err("maxpool2", &[xt.shape()]));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; bs * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        let d = xt.data();
        for plane in 0..bs * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = d[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::from_vec(&[bs, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// 2x bilinear upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (bs, c, h, w) = dims4("upsample2", xt)?;
        let (ty, tx) = (upsample_table(h), upsample_table(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; bs * c * oh * ow];
        let d = xt.data();
        for plane in 0..bs * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::from_vec(&[bs, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample2 { x }, rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(contract("concat: no inputs"));
        }
        let (bs, _, h, w) = dims4("concat", self.value(xs[0]))?;
        let mut ctot = 0;
        for &x in xs {
            let (b2, c2, h2, w2) = dims4("concat", self.value(x))?;
            if (b2, h2, w2) != (bs, h, w) {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.value(v).shape()).collect();
                return Err(shape_err("concat", &shapes));
            }
            ctot += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(bs * ctot * hw);
        for bi in 0..bs {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        let value = Tensor::from_vec(&[bs, ctot, h, w], out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("add", &[at.shape(), bt.shape()]));
        }
        let out: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(at.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target` over
    /// the elements where `mask` is set. Zero when the mask is empty.
    pub fn bce(&mut self, p: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let pt = self.value(p);
        if target.len() != pt.len() || mask.len() != pt.len() {
            return Err(shape_err("bce", &[pt.shape(), &[target.len()], &[mask.len()]]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut sum = 0.0;
        for ((&pv, &t), &m) in pt.data().iter().zip(target).zip(mask) {
            if m {
                let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
                sum -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            }
        }
        let value = if count == 0 { 0.0 } else { sum / count as f64 };
        let rg = self.rg(p) && count > 0;
        Ok(self.push_scalar(
            Tensor::scalar(value),
            Op::Bce { p, target: target.to_vec(), mask: mask.to_vec(), count },
            rg,
        ))
    }

    /// Mean of `softplus(x)` over masked elements: BCE-with-logits against a
    /// zero target.
    pub fn softplus_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xt = self.value(x);
        if mask.len() != xt.len() {
            return Err(shape_err("softplus_mean", &[xt.shape(), &[mask.len()]]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let sum: f64 = xt.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| softplus(v)).sum();
        let value = if count == 0 { 0.0 } else { sum / count as f64 };
        let rg = self.rg(x) && count > 0;
        Ok(self.push_scalar(Tensor::scalar(value), Op::SoftplusMean { x, mask: mask.to_vec(), count }, rg))
    }

    /// `sum(p * v) / sum(p)` over masked elements: the mean of `v` weighted by
    /// predicted mass.
    pub fn weighted_mean(&mut self, p: Var, v: &[f64], mask: &[bool]) -> Result<Var> {
        let pt = self.value(p);
        if v.len() != pt.len() || mask.len() != pt.len() {
            return Err(shape_err("weighted_mean", &[pt.shape(), &[v.len()], &[mask.len()]]));
        }
        let (mut s, mut z) = (0.0, PENALTY_EPS);
        for ((&pv, &vv), &m) in pt.data().iter().zip(v).zip(mask) {
            if m {
                s += pv * vv;
                z += pv;
            }
        }
        let rg = self.rg(p);
        Ok(self.push_scalar(Tensor::scalar(s / z), Op::Penalty { p, v: v.to_vec(), mask: mask.to_vec(), z }, rg))
    }

    /// `sum(c * x)`, a scalar.
    pub fn dot(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let xt = self.value(x);
        if c.len() != xt.len() {
            return Err(shape_err("dot", &[xt.shape(), &[c.len()]]));
        }
        let s = xt.data().iter().zip(c).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push_scalar(Tensor::scalar(s), Op::Dot { x, c: c.to_vec() }, rg))
    }

    /// `sum(coef_i * x_i)` over scalars.
    pub fn weighted_sum(&mut self, xs: &[Var], coef: &[f64]) -> Result<Var> {
        if xs.len() != coef.len() || xs.iter().any(|&x| self.value(x).len() != 1) {
            return Err(contract("weighted_sum: needs one coefficient per scalar input"));
        }
        let s = xs.iter().zip(coef).map(|(&x, c)| c * self.value(x).item()).sum();
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push_scalar(Tensor::scalar(s), Op::WeightedSum { xs: xs.to_vec(), coef: coef.to_vec() }, rg))
    }

    /// `sum_i lambda_i * (L_i / (2 exp(s_i)) + s_i / 2)`; terms with
    /// `lambda_i == 0` are left out entirely.
    pub fn uncertainty_weighted(&mut self, losses: &[Var], log_sigma: &[Var], lambda: &[f64]) -> Result<Var> {
        if losses.len() != log_sigma.len() || losses.len() != lambda.len() {
            return Err(contract("uncertainty_weighted: length mismatch"));
        }
        let mut total = 0.0;
        for i in 0..losses.len() {
            if lambda[i] != 0.0 {
                let l = self.value(losses[i]).item();
                let s = self.value(log_sigma[i]).item();
                total += lambda[i] * (l / (2.0 * s.exp()) + s / 2.0);
            }
        }
        let rg = (0..losses.len()).any(|i| lambda[i] != 0.0 && (self.rg(losses[i]) || self.rg(log_sigma[i])));
        Ok(self.push_scalar(
            Tensor::scalar(total),
            Op::Uncertainty { losses: losses.to_vec(), log_sigma: log_sigma.to_vec(), lambda: lambda.to_vec() },
            rg,
        ))
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires them.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward (root must be scalar)", &[self.value(root).shape()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Grads(grads));
        }
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backprop(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Grads(grads))
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (bs, cin, h, wd) = xt.dims4().unwrap();
                let (cout, _, k, _) = wt.dims4().unwrap();
                let hw = h * wd;
                let kk = cin * k * k;
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for bi in 0..bs {
                            for co in 0..cout {
                                gb[co] += g[(bi * cout + co) * hw..(bi * cout + co + 1) * hw].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if self.rg(*w) {
                    let gw = self.acc(grads, *w).unwrap();
                    for bi in 0..bs {
                        let xb = &xt.data()[bi * cin * hw..(bi + 1) * cin * hw];
                        let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        if k == 1 {
                            gemm(cout, hw, kk, gb, false, xb, true, 1.0, gw);
                        } else {
                            let cols = im2col(xb, cin, h, wd, k);
                            gemm(cout, hw, kk, gb, false, &cols, true, 1.0, gw);
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = self.acc(grads, *x).unwrap();
                    let mut dcols = vec![0.0; kk * hw];
                    for bi in 0..bs {
                        let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        let dxb = &mut gx[bi * cin * hw..(bi + 1) * cin * hw];
                        if k == 1 {
                            gemm(kk, cout, hw, wt.data(), true, gb, false, 1.0, dxb);
                        } else {
                            gemm(kk, cout, hw, wt.data(), true, gb, false, 0.0, &mut dcols);
                            col2im_add(&dcols, cin, h, wd, k, dxb);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (bs, c, h, w) = node.value.dims4().unwrap();
                let hw = h * w;
                let n = (bs * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..bs {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for ch in 0..c {
                        gb[ch] += sum_g[ch];
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..bs {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let s = gam[ch] * inv_std[ch];
                            for i in base..base + hw {
                                gx[i] += if *batch_stats {
                                    s / n * (n * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    s * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::Upsample2 { x } => {
                let (bs, c, h, w) = self.value(*x).dims4().unwrap();
                let (ty, tx) = (upsample_table(h), upsample_table(w));
                let (oh, ow) = (2 * h, 2 * w);
                if let Some(gx) = self.acc(grads, *x) {
                    for plane in 0..bs * c {
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let go = src[oy * ow + ox];
                                dst[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                                dst[y0 * w + x1] += go * (1.0 - fy) * fx;
                                dst[y1 * w + x0] += go * fy * (1.0 - fx);
                                dst[y1 * w + x1] += go * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let (bs, ctot, h, w) = node.value.dims4().unwrap();
                let hw = h * w;
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if let Some(gx) = self.acc(grads, x) {
                        for bi in 0..bs {
                            let src = &g[(bi * ctot + off) * hw..(bi * ctot + off + c) * hw];
                            for (d, s) in gx[bi * c * hw..(bi + 1) * c * hw].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        for (d, s) in gv.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Bce { p, target, mask, count } => {
                let pd = self.value(*p).data();
                let scale = g[0] / *count as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for i in 0..pd.len() {
                        if mask[i] && pd[i] > PROB_EPS && pd[i] < 1.0 - PROB_EPS {
                            let t = target[i];
                            gp[i] += scale * (-t / pd[i] + (1.0 - t) / (1.0 - pd[i]));
                        }
                    }
                }
            }
            Op::SoftplusMean { x, mask, count } => {
                let xd = self.value(*x).data();
                let scale = g[0] / *count as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..xd.len() {
                        if mask[i] {
                            gx[i] += scale * sigmoid(xd[i]);
                        }
                    }
                }
            }
            Op::Penalty { p, v, mask, z } => {
                let value = node.value.item();
                if let Some(gp) = self.acc(grads, *p) {
                    for i in 0..v.len() {
                        if mask[i] {
                            gp[i] += g[0] * (v[i] - value) / z;
                        }
                    }
                }
            }
            Op::Dot { x, c } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, cv) in gx.iter_mut().zip(c) {
                        *d += g[0] * cv;
                    }
                }
            }
            Op::WeightedSum { xs, coef } => {
                for (&x, c) in xs.iter().zip(coef) {
                    if let Some(gx) = self.acc(grads, x) {
                        gx[0] += g[0] * c;
                    }
                }
            }
            Op::Uncertainty { losses, log_sigma, lambda } => {
                for i in 0..losses.len() {
                    if lambda[i] == 0.0 {
                        continue;
                    }
                    let l = self.value(losses[i]).item();
                    let s = self.value(log_sigma[i]).item();
                    let inv = 0.5 * (-s).exp();
                    if let Some(gl) = self.acc(grads, losses[i]) {
                        gl[0] += g[0] * lambda[i] * inv;
                    }
                    if let Some(gs) = self.acc(grads, log_sigma[i]) {
                        gs[0] += g[0] * lambda[i] * (0.5 - l * inv);
                    }
                }
            }
        }
    }
}
