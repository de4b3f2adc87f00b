//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients into each node that requires them.

use super::tensor::{gemm, Real, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour: batch statistics or stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel statistics of the batch a train-mode normalization saw.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    UpConv2 {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: NormMode,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    GateMul {
        x: NodeId,
        u: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    MaskedMse {
        pred: NodeId,
        target: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
    WeightPenalty {
        ws: Vec<NodeId>,
        lambda: T,
    },
    Dot {
        x: NodeId,
        probe: Vec<T>,
    },
}

/// One value on the tape: forward value, gradient (after backward) and
/// whether gradients flow into it.
#[derive(Debug)]
pub struct Node<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.take()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[Option<NodeId>]) -> bool {
        ids.iter()
            .flatten()
            .any(|id| self.nodes[id.0].requires_grad)
    }

    /// Cross-correlation of `N x Cin x H x W` with a `Cout x Cin x k x k` kernel.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(shape_err!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            ));
        }
        if kh != kw || stride == 0 {
            return Err(shape_err!("conv2d: only square kernels with stride >= 1"));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(shape_err!(
                    "conv2d: bias length {} != {cout}",
                    self.value(b).len()
                ));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err!("conv2d: kernel larger than padded input"));
        }
        let geo = ConvGeom::new(cin, h, wd, kh, stride, pad);
        let (ho, wo) = (geo.ho, geo.wo);
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let mut cols = vec![T::zero(); geo.rows() * ho * wo];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            let os = &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            if geo.is_pointwise() {
                gemm(false, false, cout, cin, ho * wo, wv, xs, T::zero(), os);
            } else {
                geo.im2col(xs, &mut cols);
                gemm(
                    false,
                    false,
                    cout,
                    geo.rows(),
                    ho * wo,
                    wv,
                    &cols,
                    T::zero(),
                    os,
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, plane) in os.chunks_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        let rg = self.rg(&[Some(x), Some(w), b]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Stride-2 transposed convolution with a `Cin x Cout x 2 x 2` kernel.
    pub fn up_conv2(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != 2 || kw != 2 {
            return Err(shape_err!(
                "up_conv2: input has {cin} channels, kernel is {:?}",
                self.value(w).shape()
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(shape_err!("up_conv2: bias length mismatch"));
            }
        }
        let hw = h * wd;
        let mut tmp = vec![T::zero(); cout * 4 * hw];
        let mut out = vec![T::zero(); n * cout * 4 * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        for s in 0..n {
            let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
            // (Cout*4 x Cin) = W^T, W stored Cin x (Cout*4)
            gemm(true, false, cout * 4, cin, hw, wv, xs, T::zero(), &mut tmp);
            let os = &mut out[s * cout * 4 * hw..(s + 1) * cout * 4 * hw];
            for co in 0..cout {
                let bias = bv.map_or(T::zero(), |b| b[co]);
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &tmp[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                        for i in 0..h {
                            let orow = (co * 2 * h + 2 * i + a) * 2 * wd;
                            for j in 0..wd {
                                os[orow + 2 * j + bb] = src[i * wd + j] + bias;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, cout, 2 * h, 2 * wd], out)?;
        let rg = self.rg(&[Some(x), Some(w), b]);
        Ok(self.push(value, Op::UpConv2 { x, w, b }, rg))
    }

    /// Batch normalization over (N, H, W) per channel. In train mode the
    /// returned statistics are the batch moments used.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: NormMode,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err!(
                "batch_norm: affine parameters must have {c} entries"
            ));
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::Config(
                        "batch_norm in train mode needs a batch of at least 2".into(),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for smp in 0..n {
                        let off = (smp * c + ch) * hw;
                        s += xv[off..off + hw]
                            .iter()
                            .map(|v| v.to_f64().unwrap())
                            .sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0f64;
                    for smp in 0..n {
                        let off = (smp * c + ch) * hw;
                        q += xv[off..off + hw]
                            .iter()
                            .map(|v| (v.to_f64().unwrap() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::c(mu);
                    var[ch] = T::c(q / m as f64);
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::Config("batch_norm eval mode needs running statistics".into())
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err!(
                        "batch_norm: running statistics must have {c} entries"
                    ));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for smp in 0..n {
            for ch in 0..c {
                let off = (smp * c + ch) * hw;
                for i in off..off + hw {
                    let z = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = gv[ch] * z + bv[ch];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(&[Some(x), Some(gamma), Some(beta)]);
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            rg,
        );
        Ok((id, stats))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element of
    /// the block in row-major order.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("max_pool2: spatial size {h}x{w} must be even"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Affine map `x @ w + b` for `x: N x M`, `w: M x K`, `b: K`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, m) = self.value(x).dims2()?;
        let (wm, k) = self.value(w).dims2()?;
        if wm != m {
            return Err(shape_err!("linear: input width {m} != weight rows {wm}"));
        }
        let mut out = vec![T::zero(); n * k];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != k {
                return Err(shape_err!("linear: bias length {} != {k}", bv.len()));
            }
            for row in out.chunks_mut(k) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            false,
            false,
            n,
            m,
            k,
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut out,
        );
        let value = Tensor::from_vec(&[n, k], out)?;
        let rg = self.rg(&[Some(x), Some(w), b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Channel concatenation of two `N x C x H x W` tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err!(
                "concat: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// `x * u` with a single-channel `u` broadcast over the channels of `x`.
    pub fn gate_mul(&mut self, x: NodeId, u: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (un, uc, uh, uw) = self.value(u).dims4()?;
        if (un, uc, uh, uw) != (n, 1, h, w) {
            return Err(shape_err!(
                "gate_mul: coefficient {:?} does not match features {:?}",
                self.value(u).shape(),
                self.value(x).shape()
            ));
        }
        let hw = h * w;
        let (xv, uv) = (self.value(x).data(), self.value(u).data());
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            let us = &uv[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in 0..hw {
                    out[off + i] = xv[off + i] * us[i];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(&[Some(x), Some(u)]);
        Ok(self.push(value, Op::GateMul { x, u }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Mean squared error over the entries where `mask` is set. Unmasked
    /// entries contribute nothing to the value and receive exactly zero
    /// gradient.
    pub fn masked_mse(&mut self, pred: NodeId, target: &[T], mask: &[bool]) -> Result<NodeId> {
        let pv = self.value(pred).data();
        if target.len() != pv.len() || mask.len() != pv.len() {
            return Err(shape_err!(
                "masked_mse: prediction, target and mask lengths differ"
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Config(
                "masked_mse: no labeled pixels in batch".into(),
            ));
        }
        let mut s = T::zero();
        for i in 0..pv.len() {
            if mask[i] {
                let d = pv[i] - target[i];
                s += d * d;
            }
        }
        let value = Tensor::scalar(s / T::c(count as f64));
        let rg = self.rg(&[Some(pred)]);
        Ok(self.push(
            value,
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// `lambda * sum_i ||w_i||^2`.
    pub fn weight_penalty(&mut self, ws: &[NodeId], lambda: T) -> NodeId {
        let s: T = ws.iter().map(|&w| self.value(w).sum_sq()).sum();
        let rg = self.rg(&ws.iter().copied().map(Some).collect::<Vec<_>>());
        self.push(
            Tensor::scalar(lambda * s),
            Op::WeightPenalty {
                ws: ws.to_vec(),
                lambda,
            },
            rg,
        )
    }

    /// `sum(x * probe)`, a scalar projection used to check gradients of
    /// tensor-valued operations.
    pub fn dot(&mut self, x: NodeId, probe: &[T]) -> Result<NodeId> {
        if probe.len() != self.value(x).len() {
            return Err(shape_err!("dot: probe length mismatch"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(probe)
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                probe: probe.to_vec(),
            },
            rg,
        ))
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Reverse pass from a scalar node. Gradients of earlier backward calls
    /// are discarded.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.needs(root) {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let res = self.backward_op(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
            res?;
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, gout: &Tensor<T>) -> Result<()> {
        let g = gout.data();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let (cout, _, k, _) = self.value(*w).dims4()?;
                let geo = ConvGeom::new(cin, h, wd, k, *stride, *pad);
                let howo = geo.ho * geo.wo;
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut gw = vec![T::zero(); cout * geo.rows()];
                let mut gx = if need_x {
                    vec![T::zero(); n * cin * h * wd]
                } else {
                    Vec::new()
                };
                let mut cols = vec![T::zero(); geo.rows() * howo];
                let mut gcols = vec![T::zero(); geo.rows() * howo];
                {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    for s in 0..n {
                        let gs = &g[s * cout * howo..(s + 1) * cout * howo];
                        let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                        if need_w {
                            if geo.is_pointwise() {
                                gemm(false, true, cout, howo, cin, gs, xs, T::one(), &mut gw);
                            } else {
                                geo.im2col(xs, &mut cols);
                                gemm(
                                    false,
                                    true,
                                    cout,
                                    howo,
                                    geo.rows(),
                                    gs,
                                    &cols,
                                    T::one(),
                                    &mut gw,
                                );
                            }
                        }
                        if need_x {
                            let gxs = &mut gx[s * cin * h * wd..(s + 1) * cin * h * wd];
                            if geo.is_pointwise() {
                                gemm(true, false, cin, cout, howo, wv, gs, T::zero(), gxs);
                            } else {
                                gemm(
                                    true,
                                    false,
                                    geo.rows(),
                                    cout,
                                    howo,
                                    wv,
                                    gs,
                                    T::zero(),
                                    &mut gcols,
                                );
                                geo.col2im(&gcols, gxs);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); cout];
                        for s in 0..n {
                            for (co, gbv) in gb.iter_mut().enumerate() {
                                let off = (s * cout + co) * howo;
                                *gbv += g[off..off + howo].iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(*b, Tensor::from_vec(&[cout], gb)?);
                    }
                }
                if need_w {
                    let shape = self.value(*w).shape().to_vec();
                    self.accumulate(*w, Tensor::from_vec(&shape, gw)?);
                }
                if need_x {
                    self.accumulate(*x, Tensor::from_vec(&[n, cin, h, wd], gx)?);
                }
            }
            Op::UpConv2 { x, w, b } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let (_, cout, _, _) = self.value(*w).dims4()?;
                let hw = h * wd;
                let mut gtmp = vec![T::zero(); cout * 4 * hw];
                let mut gw = vec![T::zero(); cin * cout * 4];
                let mut gx = vec![T::zero(); n * cin * hw];
                let mut gb = vec![T::zero(); cout];
                {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    for s in 0..n {
                        let gs = &g[s * cout * 4 * hw..(s + 1) * cout * 4 * hw];
                        for co in 0..cout {
                            for a in 0..2 {
                                for bb in 0..2 {
                                    let dst = &mut gtmp[(co * 4 + a * 2 + bb) * hw
                                        ..(co * 4 + a * 2 + bb + 1) * hw];
                                    for ii in 0..h {
                                        let orow = (co * 2 * h + 2 * ii + a) * 2 * wd;
                                        for j in 0..wd {
                                            let v = gs[orow + 2 * j + bb];
                                            dst[ii * wd + j] = v;
                                            gb[co] += v;
                                        }
                                    }
                                }
                            }
                        }
                        let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
                        // dW (Cin x Cout*4) += X (Cin x HW) @ dY^T
                        gemm(false, true, cin, hw, cout * 4, xs, &gtmp, T::one(), &mut gw);
                        // dX (Cin x HW) = W (Cin x Cout*4) @ dY
                        gemm(
                            false,
                            false,
                            cin,
                            cout * 4,
                            hw,
                            wv,
                            &gtmp,
                            T::zero(),
                            &mut gx[s * cin * hw..(s + 1) * cin * hw],
                        );
                    }
                }
                if let Some(b) = b {
                    self.accumulate(*b, Tensor::from_vec(&[cout], gb)?);
                }
                let shape = self.value(*w).shape().to_vec();
                self.accumulate(*w, Tensor::from_vec(&shape, gw)?);
                self.accumulate(*x, Tensor::from_vec(&[n, cin, h, wd], gx)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let m = T::c((n * hw) as f64);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for idx in off..off + hw {
                            ggamma[ch] += g[idx] * xhat[idx];
                            gbeta[ch] += g[idx];
                        }
                    }
                }
                if self.needs(*x) {
                    let gv = self.value(*gamma).data();
                    let mut gx = vec![T::zero(); n * c * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let scale = gv[ch] * inv_std[ch];
                            for idx in off..off + hw {
                                gx[idx] = match mode {
                                    NormMode::Eval => g[idx] * scale,
                                    // dx = gamma*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
                                    NormMode::Train => {
                                        scale / m
                                            * (m * g[idx] - gbeta[ch] - xhat[idx] * ggamma[ch])
                                    }
                                };
                            }
                        }
                    }
                    self.accumulate(*x, Tensor::from_vec(&[n, c, h, w], gx)?);
                }
                self.accumulate(*gamma, Tensor::from_vec(&[c], ggamma)?);
                self.accumulate(*beta, Tensor::from_vec(&[c], gbeta)?);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, Tensor::from_vec(&shape, gx)?);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let gx = y
                    .iter()
                    .zip(g)
                    .map(|(&s, &gi)| gi * s * (T::one() - s))
                    .collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, Tensor::from_vec(&shape, gx)?);
            }
            Op::MaxPool2 { x, argmax } => {
                let shape = self.value(*x).shape().to_vec();
                let mut gx = Tensor::zeros(&shape);
                let d = gx.data_mut();
                for (&src, &gi) in argmax.iter().zip(g) {
                    d[src] += gi;
                }
                self.accumulate(*x, gx);
            }
            Op::Linear { x, w, b } => {
                let (n, m) = self.value(*x).dims2()?;
                let (_, k) = self.value(*w).dims2()?;
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); k];
                    for row in g.chunks(k) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(*b, Tensor::from_vec(&[k], gb)?);
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); m * k];
                    gemm(
                        true,
                        false,
                        m,
                        n,
                        k,
                        self.value(*x).data(),
                        g,
                        T::zero(),
                        &mut gw,
                    );
                    self.accumulate(*w, Tensor::from_vec(&[m, k], gw)?);
                }
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * m];
                    gemm(
                        false,
                        true,
                        n,
                        k,
                        m,
                        g,
                        self.value(*w).data(),
                        T::zero(),
                        &mut gx,
                    );
                    self.accumulate(*x, Tensor::from_vec(&[n, m], gx)?);
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let (_, cb, _, _) = self.value(*b).dims4()?;
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let off = s * (ca + cb) * hw;
                    ga.extend_from_slice(&g[off..off + ca * hw]);
                    gb.extend_from_slice(&g[off + ca * hw..off + (ca + cb) * hw]);
                }
                self.accumulate(*a, Tensor::from_vec(&[n, ca, h, w], ga)?);
                self.accumulate(*b, Tensor::from_vec(&[n, cb, h, w], gb)?);
            }
            Op::GateMul { x, u } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xv = self.value(*x).data();
                let uv = self.value(*u).data();
                let mut gx = vec![T::zero(); xv.len()];
                let mut gu = vec![T::zero(); n * hw];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for p in 0..hw {
                            gx[off + p] = g[off + p] * uv[s * hw + p];
                            gu[s * hw + p] += g[off + p] * xv[off + p];
                        }
                    }
                }
                self.accumulate(*x, Tensor::from_vec(&[n, c, h, w], gx)?);
                self.accumulate(*u, Tensor::from_vec(&[n, 1, h, w], gu)?);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, gout.clone());
                self.accumulate(*b, gout.clone());
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(*x, gout.clone().reshaped(&shape)?);
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                let pv = self.value(*pred).data();
                let scale = g[0] * T::c(2.0) / T::c(*count as f64);
                let gp = pv
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((&p, &t), &m)| if m { scale * (p - t) } else { T::zero() })
                    .collect();
                let shape = self.value(*pred).shape().to_vec();
                self.accumulate(*pred, Tensor::from_vec(&shape, gp)?);
            }
            Op::WeightPenalty { ws, lambda } => {
                let scale = g[0] * T::c(2.0) * *lambda;
                for &w in ws {
                    let gw = self.value(w).map(|v| v * scale);
                    self.accumulate(w, gw);
                }
            }
            Op::Dot { x, probe } => {
                let shape = self.value(*x).shape().to_vec();
                let gx = probe.iter().map(|&p| p * g[0]).collect();
                self.accumulate(*x, Tensor::from_vec(&shape, gx)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Geometry of an im2col lowering for one sample.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output-column range for kernel offset `kj` (stride 1).
    fn span(&self, kj: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(out);
        let hi = (extent + self.pad).saturating_sub(kj).min(out);
        (lo, hi.max(lo))
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    if self.stride == 1 {
                        let (c0, c1) = self.span(kj, self.w, wo);
                        for oy in 0..ho {
                            let d = &mut dst[oy * wo..(oy + 1) * wo];
                            let iy = oy + ki;
                            if iy < self.pad || iy - self.pad >= self.h || c0 == c1 {
                                d.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let src = &x[(c * self.h + iy - self.pad) * self.w..];
                            d[..c0].iter_mut().for_each(|v| *v = T::zero());
                            d[c1..].iter_mut().for_each(|v| *v = T::zero());
                            let ix0 = c0 + kj - self.pad;
                            d[c0..c1].copy_from_slice(&src[ix0..ix0 + (c1 - c0)]);
                        }
                    } else {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                dst[oy * wo + ox] = if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < self.h
                                    && (ix as usize) < self.w
                                {
                                    x[(c * self.h + iy as usize) * self.w + ix as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        x.iter_mut().for_each(|v| *v = T::zero());
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    if self.stride == 1 {
                        let (c0, c1) = self.span(kj, self.w, wo);
                        if c0 == c1 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = oy + ki;
                            if iy < self.pad || iy - self.pad >= self.h {
                                continue;
                            }
                            let base = (c * self.h + iy - self.pad) * self.w + c0 + kj - self.pad;
                            let dst = &mut x[base..base + (c1 - c0)];
                            for (d, &v) in dst.iter_mut().zip(&src[oy * wo + c0..oy * wo + c1]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                x[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                    src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
#[path = "graph_tests.rs"]
mod tests;
