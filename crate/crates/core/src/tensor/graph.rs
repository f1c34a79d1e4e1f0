use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{conv_backward, conv_forward, ConvGeom};
use super::{gemm, Element, Mat, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
///
/// A `Var` is only meaningful for the tape that produced it; using it after
/// [`Graph::clear`] or on another graph is rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// Multiply by a constant.
    Scale(f64),
    Silu,
    Relu,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleDir {
    /// 2x nearest-neighbour decimation (top-left of each 2x2 block).
    Down,
    /// 2x nearest-neighbour replication.
    Up,
}

enum Op<T> {
    Leaf,
    Binary { kind: ElementwiseOp, a: Var, b: Var, scalar_b: bool },
    Unary { kind: ElementwiseOp, a: Var },
    AddChannel { x: Var, b: Var, per_sample: bool },
    Conv { x: Var, k: Var, b: Option<Var>, geom: ConvGeom, batch: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gain: Var, bias: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Resample { x: Var, dir: ResampleDir },
    Concat { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    MeanSpatial { x: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-owner tape of differentiable operations.
///
/// Gradients of grad-enabled leaves accumulate across repeated
/// [`backward`](Graph::backward) calls until [`zero_grad`](Graph::zero_grad)
/// or [`clear`](Graph::clear).
pub struct Graph<T> {
    tape: u64,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { tape: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    /// Drop every recorded node. Vars from before the clear become invalid.
    pub fn clear(&mut self) {
        self.tape = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
        self.nodes.clear();
        self.leaf_grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.tape || v.idx >= self.nodes.len() {
            return Err(Error::invalid("variable does not belong to this tape"));
        }
        Ok(&self.nodes[v.idx])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { idx: self.nodes.len() - 1, tape: self.tape }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A grad-enabled leaf.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor<T>, grad_enabled: bool) -> Var {
        self.push(t, Op::Leaf, grad_enabled)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.check(v).expect("valid var").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.check(v)?.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a grad-enabled leaf, if any backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = self.check(v).ok()?;
        let g = self.leaf_grads.get(v.idx)?.as_ref()?;
        Some(Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ----- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let av = self.check(a)?.value.clone();
        match kind {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => {
                let b = b.ok_or_else(|| Error::invalid(format!("{kind:?} needs two operands")))?;
                let bv = self.check(b)?.value.clone();
                let scalar_b = bv.numel() == 1 && bv.rank() == 0 && av.rank() != 0;
                if !scalar_b && av.shape() != bv.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "elementwise",
                        lhs: av.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    });
                }
                let f = |x: T, y: T| match kind {
                    ElementwiseOp::Add => x + y,
                    ElementwiseOp::Sub => x - y,
                    _ => x * y,
                };
                let out: Vec<T> = if scalar_b {
                    let s = bv.data()[0];
                    av.data().iter().map(|&x| f(x, s)).collect()
                } else {
                    av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
                };
                let rg = self.rg(a) || self.rg(b);
                let t = Tensor::new(av.shape().to_vec(), out)?;
                Ok(self.push(t, Op::Binary { kind, a, b, scalar_b }, rg))
            }
            _ => {
                if b.is_some() {
                    return Err(Error::invalid(format!("{kind:?} takes one operand")));
                }
                let out = match kind {
                    ElementwiseOp::Scale(c) => av.scale(T::from_f64_lossy(c)),
                    ElementwiseOp::Silu => av.map(|x| x * sigmoid(x)),
                    ElementwiseOp::Relu => av.map(|x| if x > T::zero() { x } else { T::zero() }),
                    ElementwiseOp::Square => av.map(|x| x * x),
                    _ => unreachable!(),
                };
                let rg = self.rg(a);
                Ok(self.push(out, Op::Unary { kind, a }, rg))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.elementwise(ElementwiseOp::Scale(c), a, None)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Silu, a, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Relu, a, None)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Square, a, None)
    }

    /// Add `b` of shape `[C]` or `[B, C]` to every spatial position of `x: [B, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.check(x)?.value.clone();
        let bv = self.check(b)?.value.clone();
        let (n, c, h, w) = xv.dims4()?;
        let per_sample = match bv.shape() {
            [cc] if *cc == c => false,
            [bb, cc] if *bb == n && *cc == c => true,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "add_channel",
                    lhs: xv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                })
            }
        };
        let hw = h * w;
        let mut out = xv.to_vec();
        for bi in 0..n {
            for ci in 0..c {
                let add = if per_sample { bv.data()[bi * c + ci] } else { bv.data()[ci] };
                for v in &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    *v = *v + add;
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(xv.shape().to_vec(), out)?, Op::AddChannel { x, b, per_sample }, rg))
    }

    // ----- layers ------------------------------------------------------

    /// Cross-correlation of `input: [B, Cin, H, W]` with `kernel: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xv = self.check(input)?.value.clone();
        let kv = self.check(kernel)?.value.clone();
        let (batch, cin, h, w) = xv.dims4()?;
        let (cout, kcin, kh, kw) = kv.dims4()?;
        if kcin != cin {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xv.shape().to_vec(), rhs: kv.shape().to_vec() });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: kv.shape().to_vec(),
                reason: "kernel must be square with odd extent".into(),
            });
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!("conv2d stride {stride} not in {{1, 2}}")));
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh || span_w < kw || !(span_h - kh).is_multiple_of(stride) || !(span_w - kw).is_multiple_of(stride)
        {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: xv.shape().to_vec(),
                reason: format!("output extent not integral for k={kh}, stride={stride}, padding={padding}"),
            });
        }
        let bv = match bias {
            Some(b) => {
                let bv = self.check(b)?.value.clone();
                if bv.shape() != [cout] {
                    return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: vec![cout], rhs: bv.shape().to_vec() });
                }
                Some(bv)
            }
            None => None,
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad: padding,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        };
        let out = conv_forward(xv.data(), kv.data(), bv.as_ref().map(|b| b.data()), batch, &geom);
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![batch, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv { x: input, k: kernel, b: bias, geom, batch }, rg))
    }

    /// `input: [B, N] @ weight[M, N]^T + bias[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xv = self.check(input)?.value.clone();
        let wv = self.check(weight)?.value.clone();
        let (b, n, m) = match (xv.shape(), wv.shape()) {
            ([b, n], [m, n2]) if n == n2 => (*b, *n, *m),
            _ => return Err(Error::ShapeMismatch { op: "linear", lhs: xv.shape().to_vec(), rhs: wv.shape().to_vec() }),
        };
        let mut out = vec![T::zero(); b * m];
        gemm(Mat::new(xv.data(), b, n), Mat::new(wv.data(), m, n).t(), &mut out, false);
        if let Some(bias) = bias {
            let bv = self.check(bias)?.value.clone();
            if bv.shape() != [m] {
                return Err(Error::ShapeMismatch { op: "linear bias", lhs: vec![m], rhs: bv.shape().to_vec() });
            }
            for row in out.chunks_mut(m) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o = *o + bb;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![b, m], out)?, Op::Linear { x: input, w: weight, b: bias }, rg))
    }

    /// Group normalization over `(channels in group, H, W)` per sample, then a
    /// per-channel affine map.
    pub fn normalize_channels(&mut self, input: Var, gain: Var, bias: Var, groups: usize, eps: f64) -> Result<Var> {
        let xv = self.check(input)?.value.clone();
        let gv = self.check(gain)?.value.clone();
        let bv = self.check(bias)?.value.clone();
        let (n, c, h, w) = xv.dims4()?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::ShapeMismatch { op: "normalize_channels", lhs: vec![c], rhs: gv.shape().to_vec() });
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!("{c} channels not divisible into {groups} groups")));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("normalize_channels eps must be > 0"));
        }
        let cpg = c / groups;
        let len = cpg * h * w;
        let hw = h * w;
        let eps = T::from_f64_lossy(eps);
        let inv_len = T::one() / T::from_usize(len).expect("len");
        let x = xv.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..n {
            for gi in 0..groups {
                let start = (bi * c + gi * cpg) * hw;
                let seg = &x[start..start + len];
                let mean = seg.iter().copied().sum::<T>() * inv_len;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
                let r = T::one() / (var + eps).sqrt();
                rstd[bi * groups + gi] = r;
                for j in 0..len {
                    let ch = gi * cpg + j / hw;
                    let xh = (seg[j] - mean) * r;
                    xhat[start + j] = xh;
                    out[start + j] = xh * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gain) || self.rg(bias);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::GroupNorm { x: input, gain, bias, groups, xhat, rstd }, rg))
    }

    pub fn resample(&mut self, input: Var, dir: ResampleDir) -> Result<Var> {
        let xv = self.check(input)?.value.clone();
        let (n, c, h, w) = xv.dims4()?;
        let x = xv.data();
        let (shape, out) = match dir {
            ResampleDir::Down => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::InvalidShape {
                        op: "resample(down)",
                        shape: xv.shape().to_vec(),
                        reason: "spatial extents must be even".into(),
                    });
                }
                let (ho, wo) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(n * c * ho * wo);
                for plane in x.chunks(h * w) {
                    for i in 0..ho {
                        for j in 0..wo {
                            out.push(plane[2 * i * w + 2 * j]);
                        }
                    }
                }
                (vec![n, c, ho, wo], out)
            }
            ResampleDir::Up => {
                let (ho, wo) = (h * 2, w * 2);
                let mut out = Vec::with_capacity(n * c * ho * wo);
                for plane in x.chunks(h * w) {
                    for i in 0..ho {
                        for j in 0..wo {
                            out.push(plane[(i / 2) * w + j / 2]);
                        }
                    }
                }
                (vec![n, c, ho, wo], out)
            }
        };
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::Resample { x: input, dir }, rg))
    }

    /// Concatenate two `[B, C*, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.check(a)?.value.clone();
        let bv = self.check(b)?.value.clone();
        let (n, ca, h, w) = av.dims4()?;
        let (nb, cb, hb, wb) = bv.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for bi in 0..n {
            out.extend_from_slice(&av.data()[bi * pa..(bi + 1) * pa]);
            out.extend_from_slice(&bv.data()[bi * pb..(bi + 1) * pb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, ca + cb, h, w], out)?, Op::Concat { a, b }, rg))
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?.value.clone();
        let s = T::from_f64_lossy(xv.sum_f64());
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?.value.clone();
        let s = T::from_f64_lossy(xv.sum_f64() / xv.numel() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x }, rg))
    }

    /// `[B, C, H, W] -> [B, C]` global average pool.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?.value.clone();
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).expect("hw");
        let out: Vec<T> = xv.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::MeanSpatial { x }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.check(logits)?.value.clone();
        let (b, k) = match lv.shape() {
            [b, k] if *b == labels.len() => (*b, *k),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: lv.shape().to_vec(),
                    rhs: vec![labels.len()],
                })
            }
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![T::zero(); b * k];
        let mut loss = 0.0f64;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z: T = exps.iter().copied().sum();
            for j in 0..k {
                probs[i * k + j] = exps[j] / z;
            }
            loss += (z.ln() + mx - row[labels[i]]).as_f64();
        }
        let rg = self.rg(logits);
        let t = Tensor::scalar(T::from_f64_lossy(loss / b as f64));
        Ok(self.push(t, Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, rg))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`, accumulating into
    /// every grad-enabled leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.check(loss)?.value;
        if lv.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: lv.shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let n = loss.idx + 1;
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.idx] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let acc = |grads: &mut Vec<Option<Vec<T>>>, v: Var, g: Vec<T>| {
            if !nodes[v.idx].requires_grad {
                return;
            }
            match &mut grads[v.idx] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e = *e + x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(existing) => {
                        for (e, x) in existing.iter_mut().zip(g) {
                            *e = *e + x;
                        }
                    }
                    slot @ None => *slot = Some(g),
                },
                Op::Binary { kind, a, b, scalar_b } => {
                    let av = nodes[a.idx].value.data();
                    let bv = nodes[b.idx].value.data();
                    let (ga, gb): (Vec<T>, Vec<T>) = match kind {
                        ElementwiseOp::Add => (g.clone(), g),
                        ElementwiseOp::Sub => (g.clone(), g.iter().map(|&x| -x).collect()),
                        ElementwiseOp::Mul => {
                            if *scalar_b {
                                let s = bv[0];
                                (g.iter().map(|&x| x * s).collect(), g.iter().zip(av).map(|(&x, &y)| x * y).collect())
                            } else {
                                (
                                    g.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
                                    g.iter().zip(av).map(|(&x, &y)| x * y).collect(),
                                )
                            }
                        }
                        _ => unreachable!("unary kind in binary node"),
                    };
                    acc(&mut grads, *a, ga);
                    if *scalar_b {
                        let s: T = gb.iter().copied().sum();
                        acc(&mut grads, *b, vec![s]);
                    } else {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Unary { kind, a } => {
                    let x = nodes[a.idx].value.data();
                    let two = T::one() + T::one();
                    let ga: Vec<T> = match kind {
                        ElementwiseOp::Scale(c) => {
                            let c = T::from_f64_lossy(*c);
                            g.iter().map(|&v| v * c).collect()
                        }
                        ElementwiseOp::Silu => g
                            .iter()
                            .zip(x)
                            .map(|(&v, &xi)| {
                                let s = sigmoid(xi);
                                v * s * (T::one() + xi * (T::one() - s))
                            })
                            .collect(),
                        ElementwiseOp::Relu => {
                            g.iter().zip(x).map(|(&v, &xi)| if xi > T::zero() { v } else { T::zero() }).collect()
                        }
                        ElementwiseOp::Square => g.iter().zip(x).map(|(&v, &xi)| v * two * xi).collect(),
                        _ => unreachable!("binary kind in unary node"),
                    };
                    acc(&mut grads, *a, ga);
                }
                Op::AddChannel { x, b, per_sample } => {
                    let (nb, c, h, w) = nodes[x.idx].value.dims4()?;
                    let hw = h * w;
                    if nodes[b.idx].requires_grad {
                        let mut gb = vec![T::zero(); if *per_sample { nb * c } else { c }];
                        for bi in 0..nb {
                            for ci in 0..c {
                                let s: T = g[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().copied().sum();
                                let slot = if *per_sample { bi * c + ci } else { ci };
                                gb[slot] = gb[slot] + s;
                            }
                        }
                        acc(&mut grads, *b, gb);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Conv { x, k, b, geom, batch } => {
                    let want = (
                        nodes[x.idx].requires_grad,
                        nodes[k.idx].requires_grad,
                        b.is_some_and(|b| nodes[b.idx].requires_grad),
                    );
                    let cg =
                        conv_backward(nodes[x.idx].value.data(), nodes[k.idx].value.data(), &g, *batch, geom, want);
                    if let Some(dx) = cg.dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dk) = cg.dk {
                        acc(&mut grads, *k, dk);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &nodes[x.idx].value;
                    let wv = &nodes[w.idx].value;
                    let (bsz, nin) = (xv.shape()[0], xv.shape()[1]);
                    let m = wv.shape()[0];
                    let gm = Mat::new(&g, bsz, m);
                    if nodes[x.idx].requires_grad {
                        let mut dx = vec![T::zero(); bsz * nin];
                        gemm(gm, Mat::new(wv.data(), m, nin), &mut dx, false);
                        acc(&mut grads, *x, dx);
                    }
                    if nodes[w.idx].requires_grad {
                        let mut dw = vec![T::zero(); m * nin];
                        gemm(gm.t(), Mat::new(xv.data(), bsz, nin), &mut dw, false);
                        acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); m];
                        for row in g.chunks(m) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        acc(&mut grads, *b, db);
                    }
                }
                Op::GroupNorm { x, gain, bias, groups, xhat, rstd } => {
                    let (nb, c, h, w) = nodes[x.idx].value.dims4()?;
                    let gv = nodes[gain.idx].value.data();
                    let hw = h * w;
                    let cpg = c / groups;
                    let len = cpg * hw;
                    let lenf = T::from_usize(len).expect("len");
                    let mut dgain = vec![T::zero(); c];
                    let mut dbias = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); g.len()];
                    for bi in 0..nb {
                        for gi in 0..*groups {
                            let start = (bi * c + gi * cpg) * hw;
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for j in 0..len {
                                let ch = gi * cpg + j / hw;
                                let gy = g[start + j];
                                let xh = xhat[start + j];
                                dgain[ch] = dgain[ch] + gy * xh;
                                dbias[ch] = dbias[ch] + gy;
                                let d = gy * gv[ch];
                                sum_d = sum_d + d;
                                sum_dx = sum_dx + d * xh;
                            }
                            let r = rstd[bi * groups + gi];
                            for j in 0..len {
                                let ch = gi * cpg + j / hw;
                                let d = g[start + j] * gv[ch];
                                dx[start + j] = r / lenf * (lenf * d - sum_d - xhat[start + j] * sum_dx);
                            }
                        }
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                    acc(&mut grads, *x, dx);
                }
                Op::Resample { x, dir } => {
                    let (nb, c, h, w) = nodes[x.idx].value.dims4()?;
                    let mut dx = vec![T::zero(); nb * c * h * w];
                    match dir {
                        ResampleDir::Down => {
                            let (ho, wo) = (h / 2, w / 2);
                            for p in 0..nb * c {
                                for i in 0..ho {
                                    for j in 0..wo {
                                        dx[p * h * w + 2 * i * w + 2 * j] = g[p * ho * wo + i * wo + j];
                                    }
                                }
                            }
                        }
                        ResampleDir::Up => {
                            let (ho, wo) = (h * 2, w * 2);
                            for p in 0..nb * c {
                                for i in 0..ho {
                                    for j in 0..wo {
                                        let d = &mut dx[p * h * w + (i / 2) * w + j / 2];
                                        *d = *d + g[p * ho * wo + i * wo + j];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let (nb, ca, h, w) = nodes[a.idx].value.dims4()?;
                    let cb = nodes[b.idx].value.shape()[1];
                    let (pa, pb) = (ca * h * w, cb * h * w);
                    let mut ga = Vec::with_capacity(nb * pa);
                    let mut gb = Vec::with_capacity(nb * pb);
                    for chunk in g.chunks(pa + pb) {
                        ga.extend_from_slice(&chunk[..pa]);
                        gb.extend_from_slice(&chunk[pa..]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sum { x } => {
                    let n = nodes[x.idx].value.numel();
                    acc(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean { x } => {
                    let n = nodes[x.idx].value.numel();
                    let v = g[0] / T::from_usize(n).expect("n");
                    acc(&mut grads, *x, vec![v; n]);
                }
                Op::MeanSpatial { x } => {
                    let (nb, c, h, w) = nodes[x.idx].value.dims4()?;
                    let hw = h * w;
                    let inv = T::one() / T::from_usize(hw).expect("hw");
                    let mut dx = Vec::with_capacity(nb * c * hw);
                    for &gv in &g {
                        dx.extend(std::iter::repeat_n(gv * inv, hw));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, probs, labels } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / T::from_usize(b).expect("b");
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dl[i * k + l] = dl[i * k + l] - scale;
                    }
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        Ok(())
    }
}
