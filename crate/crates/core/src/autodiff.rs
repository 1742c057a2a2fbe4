//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a Wengert list: every op appends a node holding its value and
//! the ids of its parents, so node order is already a topological order and
//! [`Graph::backward`] simply walks the list in reverse.

use crate::error::{Error, Result};
use crate::kernels::{col2im_add, gemm, im2col, ConvGeom, Strides};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Silu,
    ScaleByConstant,
}

/// Second operand of [`Graph::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Node(Var),
    Scalar(f32),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Down2Avg,
    Up2Nearest,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Down2(Var),
    Up2(Var),
    Concat(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-owner computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Row-major strides of `shape`, with zero stride on axes where `bshape` is 1.
fn broadcast_strides(shape: &[usize], bshape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if bshape[d] == 1 { 0 } else { acc };
        acc *= bshape[d];
    }
    strides
}

/// For every flat index of `shape`, the flat index of the broadcast operand.
fn broadcast_map(shape: &[usize], bshape: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, bshape);
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcastable(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let ok = a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| y == x || y == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f32]) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("grad shape"));
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, `None` if backward never reached the node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Operand) -> Result<Var> {
        match (kind, b) {
            (ElementwiseOp::Add, Operand::Node(b)) => self.add(a, b),
            (ElementwiseOp::Mul, Operand::Node(b)) => self.mul(a, b),
            (ElementwiseOp::Add, Operand::Scalar(c)) => {
                let c = self.constant(Tensor::full(vec![1; self.value(a).rank()], c));
                self.add(a, c)
            }
            (ElementwiseOp::Mul | ElementwiseOp::ScaleByConstant, Operand::Scalar(c)) => {
                self.scale(a, c)
            }
            (ElementwiseOp::Silu, Operand::None) => self.silu(a),
            (kind, b) => Err(Error::invalid(
                "elementwise",
                format!("{kind:?} does not accept operand {b:?}"),
            )),
        }
    }

    /// `a + b`, with `b` broadcast over any of `a`'s axes where it has extent 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        broadcastable("add", va.shape(), vb.shape())?;
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x + y)?
        } else {
            let map = broadcast_map(va.shape(), vb.shape());
            let bd = vb.data();
            let data = va.data().iter().zip(&map).map(|(x, &j)| x + bd[j]).collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(check_finite("add", out)?, Op::Add(a, b), rg))
    }

    /// `a ⊙ b`, broadcasting `b` like [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        broadcastable("mul", va.shape(), vb.shape())?;
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x * y)?
        } else {
            let map = broadcast_map(va.shape(), vb.shape());
            let bd = vb.data();
            let data = va.data().iter().zip(&map).map(|(x, &j)| x * bd[j]).collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(check_finite("mul", out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        Ok(self.push(check_finite("scale", out)?, Op::Scale(a, c), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.any_grad(&[a]);
        Ok(self.push(check_finite("silu", out)?, Op::Silu(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// 2D cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, k, k]` plus bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let geom = conv_geom(x.shape(), w.shape(), b.shape(), stride, padding)?;
        let [n, _, _, _] = x.dims4()?;
        let c_out = w.shape()[0];
        let (kk, p) = (geom.patch_len(), geom.out_plane());
        let in_len = geom.c_in * geom.h * geom.w;
        let mut out = vec![0.0f32; n * c_out * p];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0f32; kk * p]
        };
        for s in 0..n {
            let dst = &mut out[s * c_out * p..(s + 1) * c_out * p];
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[o]);
            }
            let sample = &x.data()[s * in_len..(s + 1) * in_len];
            let rhs: &[f32] = if geom.is_pointwise() {
                sample
            } else {
                im2col(sample, &geom, &mut cols);
                &cols
            };
            gemm(
                c_out,
                kk,
                p,
                w.data(),
                Strides::row_major(kk),
                rhs,
                Strides::row_major(p),
                1.0,
                dst,
            );
        }
        let out = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            check_finite("conv2d", out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// `[N, in] x [out, in]^T + [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, d_in, d_out) = match (x.shape(), w.shape(), b.shape()) {
            (&[n, i], &[o, i2], &[o2]) if i == i2 && o == o2 => (n, i, o),
            _ => return Err(Error::shape("linear", x.shape(), w.shape())),
        };
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        gemm(
            n,
            d_in,
            d_out,
            x.data(),
            Strides::row_major(d_in),
            w.data(),
            Strides::transposed(d_in),
            1.0,
            &mut out,
        );
        let out = Tensor::new(vec![n, d_out], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            check_finite("linear", out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        let (g, bt) = (self.value(gamma), self.value(beta));
        if g.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape("group_norm", x.shape(), g.shape()));
        }
        let cg = c / groups;
        let len = cg * h * w;
        let mut out = vec![0.0f32; x.numel()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for s in 0..n {
            for gi in 0..groups {
                let off = (s * c + gi * cg) * h * w;
                let seg = &x.data()[off..off + len];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
                let var = seg
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>()
                    / len as f64;
                let rstd = 1.0 / (var + eps as f64).sqrt();
                let (mean, rstd) = (mean as f32, rstd as f32);
                means.push(mean);
                rstds.push(rstd);
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let (ga, be) = (g.data()[ch], bt.data()[ch]);
                    let base = ci * h * w;
                    for i in 0..h * w {
                        out[off + base + i] = (seg[base + i] - mean) * rstd * ga + be;
                    }
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            check_finite("group_norm", out)?,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    pub fn resample(&mut self, input: Var, mode: Resample) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        let d = x.data();
        let out = match mode {
            Resample::Down2Avg => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::invalid(
                        "down2_avg",
                        format!("extents {h}x{w} must be even"),
                    ));
                }
                let (ho, wo) = (h / 2, w / 2);
                let mut out = vec![0.0f32; n * c * ho * wo];
                for p in 0..n * c {
                    let src = &d[p * h * w..(p + 1) * h * w];
                    let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                    for y in 0..ho {
                        for xx in 0..wo {
                            let i = 2 * y * w + 2 * xx;
                            dst[y * wo + xx] =
                                (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * 0.25;
                        }
                    }
                }
                Tensor::new(vec![n, c, ho, wo], out)?
            }
            Resample::Up2Nearest => {
                let (ho, wo) = (h * 2, w * 2);
                let mut out = vec![0.0f32; n * c * ho * wo];
                for p in 0..n * c {
                    let src = &d[p * h * w..(p + 1) * h * w];
                    let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                    for y in 0..ho {
                        for xx in 0..wo {
                            dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                        }
                    }
                }
                Tensor::new(vec![n, c, ho, wo], out)?
            }
        };
        let op = match mode {
            Resample::Down2Avg => Op::Down2(input),
            Resample::Up2Nearest => Op::Up2(input),
        };
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, op, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum() as f32;
        let rg = self.any_grad(&[a]);
        Ok(self.push(check_finite("sum", Tensor::scalar(s))?, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).mean() as f32;
        let rg = self.any_grad(&[a]);
        Ok(self.push(check_finite("mean", Tensor::scalar(s))?, Op::Mean(a), rg))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", p.shape(), t.shape()));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let v = (s / p.numel() as f64) as f32;
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(check_finite("mse", Tensor::scalar(v))?, Op::Mse(pred, target), rg))
    }

    /// Accumulates `∂loss/∂v` into every node that requires grad.
    ///
    /// Intermediate gradients are released once propagated; leaf gradients are kept.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let shape = lv.shape().to_vec();
        accumulate(&mut self.nodes[loss.0].grad, &shape, &[1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            propagate(before, &node.op, &node.value, &grad)?;
        }
        Ok(())
    }
}

fn conv_geom(
    x: &[usize],
    w: &[usize],
    b: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (&[_, c_in, h, wd], &[c_out, c_in_w, k, k2]) = (x, w) else {
        return Err(Error::shape("conv2d", x, w));
    };
    if c_in != c_in_w || k != k2 || b != [c_out] {
        return Err(Error::shape("conv2d", x, w));
    }
    if k % 2 == 0 || stride == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {k} must be odd and stride {stride} positive"),
        ));
    }
    let span_h = h + 2 * padding;
    let span_w = wd + 2 * padding;
    if span_h < k || span_w < k || !(span_h - k).is_multiple_of(stride) || !(span_w - k).is_multiple_of(stride) {
        return Err(Error::shape("conv2d", x, w));
    }
    Ok(ConvGeom {
        c_in,
        h,
        w: wd,
        k,
        stride,
        pad: padding,
        h_out: (span_h - k) / stride + 1,
        w_out: (span_w - k) / stride + 1,
    })
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn add_grad(nodes: &mut [Node], v: Var, delta: &[f32]) {
    let node = &mut nodes[v.0];
    if node.requires_grad {
        let shape = node.value.shape().to_vec();
        accumulate(&mut node.grad, &shape, delta);
    }
}

/// Reduces a full-shape gradient onto a broadcast operand shape.
fn reduce_broadcast(full: &[usize], bshape: &[usize], grad: &[f32]) -> Vec<f32> {
    if full == bshape {
        return grad.to_vec();
    }
    let map = broadcast_map(full, bshape);
    let mut out = vec![0.0f32; bshape.iter().product()];
    for (g, &j) in grad.iter().zip(&map) {
        out[j] += g;
    }
    out
}

fn propagate(nodes: &mut [Node], op: &Op, value: &Tensor, grad: &Tensor) -> Result<()> {
    let g = grad.data();
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_grad(nodes, a, g);
            if wants(nodes, b) {
                let bs = nodes[b.0].value.shape().to_vec();
                let red = reduce_broadcast(value.shape(), &bs, g);
                add_grad(nodes, b, &red);
            }
        }
        Op::Mul(a, b) => {
            let bs = nodes[b.0].value.shape().to_vec();
            let same = bs == value.shape();
            let map = (!same).then(|| broadcast_map(value.shape(), &bs));
            let bidx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
            if wants(nodes, a) {
                let bd = nodes[b.0].value.data();
                let da: Vec<f32> = g.iter().enumerate().map(|(i, &gi)| gi * bd[bidx(i)]).collect();
                add_grad(nodes, a, &da);
            }
            if wants(nodes, b) {
                let ad = nodes[a.0].value.data();
                let mut db = vec![0.0f32; bs.iter().product()];
                for (i, &gi) in g.iter().enumerate() {
                    db[bidx(i)] += gi * ad[i];
                }
                add_grad(nodes, b, &db);
            }
        }
        Op::Scale(a, c) => {
            let da: Vec<f32> = g.iter().map(|&x| x * c).collect();
            add_grad(nodes, a, &da);
        }
        Op::Silu(a) => {
            let x = nodes[a.0].value.data();
            let da: Vec<f32> = g
                .iter()
                .zip(x)
                .map(|(&gi, &xi)| {
                    let s = sigmoid(xi);
                    gi * (s * (1.0 + xi * (1.0 - s)))
                })
                .collect();
            add_grad(nodes, a, &da);
        }
        Op::Reshape(a) => add_grad(nodes, a, g),
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => conv2d_backward(nodes, input, weight, bias, stride, padding, grad)?,
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let n = value.shape()[0];
            let d_out = value.shape()[1];
            let d_in = nodes[input.0].value.shape()[1];
            if wants(nodes, input) {
                let mut dx = vec![0.0f32; n * d_in];
                let w = nodes[weight.0].value.data();
                gemm(
                    n,
                    d_out,
                    d_in,
                    g,
                    Strides::row_major(d_out),
                    w,
                    Strides::row_major(d_in),
                    0.0,
                    &mut dx,
                );
                add_grad(nodes, input, &dx);
            }
            if wants(nodes, weight) {
                let mut dw = vec![0.0f32; d_out * d_in];
                let x = nodes[input.0].value.data();
                gemm(
                    d_out,
                    n,
                    d_in,
                    g,
                    Strides::transposed(d_out),
                    x,
                    Strides::row_major(d_in),
                    0.0,
                    &mut dw,
                );
                add_grad(nodes, weight, &dw);
            }
            if wants(nodes, bias) {
                let mut db = vec![0.0f32; d_out];
                for row in g.chunks(d_out) {
                    for (a, b) in db.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                add_grad(nodes, bias, &db);
            }
        }
        Op::GroupNorm {
            input,
            gamma,
            beta,
            groups,
            ref mean,
            ref rstd,
        } => {
            let [n, c, h, w] = value.dims4()?;
            let cg = c / groups;
            let plane = h * w;
            let x = nodes[input.0].value.data();
            let ga = nodes[gamma.0].value.data();
            let mut dx = vec![0.0f32; x.len()];
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for s in 0..n {
                for gi in 0..groups {
                    let k = s * groups + gi;
                    let (mu, rs) = (mean[k], rstd[k]);
                    let off = (s * c + gi * cg) * plane;
                    let len = cg * plane;
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for i in 0..len {
                        let ch = gi * cg + i / plane;
                        let xhat = (x[off + i] - mu) * rs;
                        let dxhat = g[off + i] * ga[ch];
                        sum_dxhat += dxhat as f64;
                        sum_dxhat_xhat += (dxhat * xhat) as f64;
                        dgamma[ch] += g[off + i] * xhat;
                        dbeta[ch] += g[off + i];
                    }
                    let m1 = (sum_dxhat / len as f64) as f32;
                    let m2 = (sum_dxhat_xhat / len as f64) as f32;
                    for i in 0..len {
                        let ch = gi * cg + i / plane;
                        let xhat = (x[off + i] - mu) * rs;
                        let dxhat = g[off + i] * ga[ch];
                        dx[off + i] = rs * (dxhat - m1 - xhat * m2);
                    }
                }
            }
            add_grad(nodes, input, &dx);
            add_grad(nodes, gamma, &dgamma);
            add_grad(nodes, beta, &dbeta);
        }
        Op::Down2(a) => {
            let [n, c, h, w] = nodes[a.0].value.dims4()?;
            let (ho, wo) = (h / 2, w / 2);
            let mut da = vec![0.0f32; n * c * h * w];
            for p in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        da[p * h * w + y * w + x] = g[p * ho * wo + (y / 2) * wo + x / 2] * 0.25;
                    }
                }
            }
            add_grad(nodes, a, &da);
        }
        Op::Up2(a) => {
            let [n, c, h, w] = nodes[a.0].value.dims4()?;
            let (ho, wo) = (h * 2, w * 2);
            let mut da = vec![0.0f32; n * c * h * w];
            for p in 0..n * c {
                for y in 0..ho {
                    for x in 0..wo {
                        da[p * h * w + (y / 2) * w + x / 2] += g[p * ho * wo + y * wo + x];
                    }
                }
            }
            add_grad(nodes, a, &da);
        }
        Op::Concat(a, b) => {
            let [n, c, h, w] = value.dims4()?;
            let ca = nodes[a.0].value.shape()[1];
            let plane = h * w;
            let (mut ga, mut gb) = (Vec::new(), Vec::new());
            for s in 0..n {
                let base = s * c * plane;
                ga.extend_from_slice(&g[base..base + ca * plane]);
                gb.extend_from_slice(&g[base + ca * plane..base + c * plane]);
            }
            add_grad(nodes, a, &ga);
            add_grad(nodes, b, &gb);
        }
        Op::Sum(a) => {
            let da = vec![g[0]; nodes[a.0].value.numel()];
            add_grad(nodes, a, &da);
        }
        Op::Mean(a) => {
            let numel = nodes[a.0].value.numel();
            let da = vec![g[0] / numel as f32; numel];
            add_grad(nodes, a, &da);
        }
        Op::Mse(p, t) => {
            let numel = nodes[p.0].value.numel();
            let k = 2.0 * g[0] / numel as f32;
            let diff: Vec<f32> = nodes[p.0]
                .value
                .data()
                .iter()
                .zip(nodes[t.0].value.data())
                .map(|(&a, &b)| k * (a - b))
                .collect();
            add_grad(nodes, p, &diff);
            if wants(nodes, t) {
                let neg: Vec<f32> = diff.iter().map(|v| -v).collect();
                add_grad(nodes, t, &neg);
            }
        }
    }
    Ok(())
}

fn conv2d_backward(
    nodes: &mut [Node],
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    grad: &Tensor,
) -> Result<()> {
    let geom = conv_geom(
        nodes[input.0].value.shape(),
        nodes[weight.0].value.shape(),
        nodes[bias.0].value.shape(),
        stride,
        padding,
    )?;
    let n = grad.shape()[0];
    let c_out = grad.shape()[1];
    let (kk, p) = (geom.patch_len(), geom.out_plane());
    let in_len = geom.c_in * geom.h * geom.w;
    let g = grad.data();

    if wants(nodes, bias) {
        let mut db = vec![0.0f32; c_out];
        for s in 0..n {
            for (o, v) in db.iter_mut().enumerate() {
                let off = (s * c_out + o) * p;
                *v += g[off..off + p].iter().sum::<f32>();
            }
        }
        add_grad(nodes, bias, &db);
    }

    let need_w = wants(nodes, weight);
    let need_x = wants(nodes, input);
    let mut dw = vec![0.0f32; if need_w { c_out * kk } else { 0 }];
    let mut dx = vec![0.0f32; if need_x { n * in_len } else { 0 }];
    let mut cols = vec![0.0f32; if geom.is_pointwise() { 0 } else { kk * p }];
    let mut dcols = vec![0.0f32; if need_x && !geom.is_pointwise() { kk * p } else { 0 }];
    {
        let x = nodes[input.0].value.data();
        let w = nodes[weight.0].value.data();
        for s in 0..n {
            let gs = &g[s * c_out * p..(s + 1) * c_out * p];
            if need_w {
                let sample = &x[s * in_len..(s + 1) * in_len];
                let rhs: &[f32] = if geom.is_pointwise() {
                    sample
                } else {
                    im2col(sample, &geom, &mut cols);
                    &cols
                };
                // dW[c_out, kk] += dOut[c_out, p] · cols[kk, p]^T
                gemm(
                    c_out,
                    p,
                    kk,
                    gs,
                    Strides::row_major(p),
                    rhs,
                    Strides::transposed(p),
                    1.0,
                    &mut dw,
                );
            }
            if need_x {
                let dst = &mut dx[s * in_len..(s + 1) * in_len];
                if geom.is_pointwise() {
                    gemm(
                        kk,
                        c_out,
                        p,
                        w,
                        Strides::transposed(kk),
                        gs,
                        Strides::row_major(p),
                        0.0,
                        dst,
                    );
                } else {
                    gemm(
                        kk,
                        c_out,
                        p,
                        w,
                        Strides::transposed(kk),
                        gs,
                        Strides::row_major(p),
                        0.0,
                        &mut dcols,
                    );
                    col2im_add(&dcols, &geom, dst);
                }
            }
        }
    }
    if need_w {
        add_grad(nodes, weight, &dw);
    }
    if need_x {
        add_grad(nodes, input, &dx);
    }
    Ok(())
}
