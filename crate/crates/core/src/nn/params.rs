use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BatchStats, Graph, NodeId, NormMode};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Running statistics; never trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameters in a fixed insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        kind: ParamKind,
    ) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, kind });
        Ok(())
    }

    /// Weight drawn from U(-b, b) with `b = sqrt(3 / fan_in)`, i.e. unit
    /// variance gain on a fan-in basis.
    pub fn init_weight(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::c(rng.random_range(-bound..bound)));
        self.insert(name, t, ParamKind::Weight)
    }

    pub fn init_const(
        &mut self,
        name: &str,
        shape: &[usize],
        v: f64,
        kind: ParamKind,
    ) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::c(v)), kind)
    }

    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn init_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.init_const(
            &format!("{prefix}.gamma"),
            &[channels],
            1.0,
            ParamKind::NormScale,
        )?;
        self.init_const(
            &format!("{prefix}.beta"),
            &[channels],
            0.0,
            ParamKind::NormShift,
        )?;
        self.init_const(
            &format!("{prefix}.running_mean"),
            &[channels],
            0.0,
            ParamKind::Buffer,
        )?;
        self.init_const(
            &format!("{prefix}.running_var"),
            &[channels],
            1.0,
            ParamKind::Buffer,
        )
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Name of the first parameter holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|(_, p)| !p.value.is_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Fold batch statistics into running statistics:
    /// `r <- (1 - m) r + m s`, with the variance made unbiased first.
    pub fn update_running(
        &mut self,
        prefix: &str,
        stats: &BatchStats<T>,
        momentum: f64,
    ) -> Result<()> {
        let m = T::c(momentum);
        let keep = T::one() - m;
        let unbias = if stats.count > 1 {
            T::c(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        let rm = self
            .get_mut(&format!("{prefix}.running_mean"))?
            .value
            .data_mut();
        for (r, &s) in rm.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        let rv = self
            .get_mut(&format!("{prefix}.running_var"))?
            .value
            .data_mut();
        for (r, &s) in rv.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * s * unbias;
        }
        Ok(())
    }
}

/// One forward (and optionally backward) evaluation against a parameter
/// store. Parameters are placed on the tape the first time they are used.
pub struct Session<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: IndexMap<String, NodeId>,
    mode: NormMode,
    requires_grad: bool,
    norm_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: NormMode, requires_grad: bool) -> Self {
        Self::with_graph(Graph::new(), store, mode, requires_grad)
    }

    pub fn with_graph(
        graph: Graph<T>,
        store: &'a ParamStore<T>,
        mode: NormMode,
        requires_grad: bool,
    ) -> Self {
        Self {
            graph,
            store,
            bound: IndexMap::new(),
            mode,
            requires_grad,
            norm_stats: Vec::new(),
        }
    }

    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Use an existing tape node in place of the stored value of `name`.
    pub fn bind(&mut self, name: &str, id: NodeId) {
        self.bound.insert(name.to_string(), id);
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = self.store.get(name)?;
        let id = self
            .graph
            .leaf(p.value.clone(), self.requires_grad && p.kind.trainable());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.graph.leaf(t, false)
    }

    /// Convolution with `{prefix}.w` and, when present, `{prefix}.b`.
    pub fn conv(&mut self, x: NodeId, prefix: &str, pad: usize) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.optional(&format!("{prefix}.b"))?;
        self.graph.conv2d(x, w, b, 1, pad)
    }

    pub fn up_conv(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.optional(&format!("{prefix}.b"))?;
        self.graph.up_conv2(x, w, b)
    }

    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.optional(&format!("{prefix}.b"))?;
        self.graph.linear(x, w, b)
    }

    fn optional(&mut self, name: &str) -> Result<Option<NodeId>> {
        if self.store.contains(name) || self.bound.contains_key(name) {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn batch_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let store = self.store;
        let running = match self.mode {
            NormMode::Eval => Some((
                store.value(&format!("{prefix}.running_mean"))?.data(),
                store.value(&format!("{prefix}.running_var"))?.data(),
            )),
            NormMode::Train => None,
        };
        let (y, stats) = self
            .graph
            .batch_norm(x, gamma, beta, self.mode, running, T::c(BN_EPS))?;
        if let Some(s) = stats {
            self.norm_stats.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    /// Batch statistics gathered by train-mode normalization, by layer.
    pub fn take_norm_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.norm_stats)
    }

    /// `lambda * sum ||W||^2` over weights, or over every trainable tensor
    /// when `include_all` is set.
    pub fn weight_penalty(&mut self, lambda: f64, include_all: bool) -> Result<NodeId> {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, p)| {
                if include_all {
                    p.kind.trainable()
                } else {
                    p.kind == ParamKind::Weight
                }
            })
            .map(|(n, _)| n.clone())
            .collect();
        let mut ids = Vec::with_capacity(names.len());
        for n in &names {
            ids.push(self.param(n)?);
        }
        Ok(self.graph.weight_penalty(&ids, T::c(lambda)))
    }

    /// Mean squared error over labeled pixels plus the weight penalty.
    pub fn masked_mse_l2_loss(
        &mut self,
        pred: NodeId,
        target: &[T],
        mask: &[bool],
        lambda: f64,
        include_all: bool,
    ) -> Result<(NodeId, NodeId)> {
        let mse = self.graph.masked_mse(pred, target, mask)?;
        if lambda == 0.0 {
            return Ok((mse, mse));
        }
        let pen = self.weight_penalty(lambda, include_all)?;
        Ok((self.graph.add(mse, pen)?, mse))
    }

    /// Gradients of every bound trainable parameter after `backward`, in
    /// store order.
    pub fn grads(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, _) in self.store.iter() {
            if let Some(&id) = self.bound.get(name) {
                if let Some(g) = self.graph.take_grad(id) {
                    out.push((name.clone(), g));
                }
            }
        }
        out
    }
}

/// Additive attention gate on a skip connection:
/// `u = sigmoid(psi(relu(Wx x + bx + Wg g + bg)) + bpsi)`, `x_hat = u * x`.
/// `g` must already be at the resolution of `x`. Returns `(x_hat, u)`.
pub fn attention_gate<T: Real>(
    s: &mut Session<'_, T>,
    x: NodeId,
    g: NodeId,
    prefix: &str,
) -> Result<(NodeId, NodeId)> {
    let (xn, _, xh, xw) = s.graph.value(x).dims4()?;
    let (gn, _, gh, gw) = s.graph.value(g).dims4()?;
    if (xn, xh, xw) != (gn, gh, gw) {
        return Err(Error::Shape(format!(
            "attention gate: skip {:?} and gating signal {:?} are not aligned",
            s.graph.value(x).shape(),
            s.graph.value(g).shape()
        )));
    }
    let wx = s.param(&format!("{prefix}.wx"))?;
    let bx = s.param(&format!("{prefix}.bx"))?;
    let wg = s.param(&format!("{prefix}.wg"))?;
    let bg = s.param(&format!("{prefix}.bg"))?;
    let psi = s.param(&format!("{prefix}.psi"))?;
    let bpsi = s.param(&format!("{prefix}.bpsi"))?;
    let a = s.graph.conv2d(x, wx, Some(bx), 1, 0)?;
    let b = s.graph.conv2d(g, wg, Some(bg), 1, 0)?;
    let sum = s.graph.add(a, b)?;
    let act = s.graph.relu(sum);
    let q = s.graph.conv2d(act, psi, Some(bpsi), 1, 0)?;
    let u = s.graph.sigmoid(q);
    let xhat = s.graph.gate_mul(x, u)?;
    Ok((xhat, u))
}

/// Register the six gate tensors for skip width `f_l`, gating width `f_g`
/// and intermediate width `f_int`.
pub fn init_gate<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    f_l: usize,
    f_g: usize,
    f_int: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init_weight(&format!("{prefix}.wx"), &[f_int, f_l, 1, 1], f_l, rng)?;
    store.init_const(&format!("{prefix}.bx"), &[f_int], 0.0, ParamKind::Bias)?;
    store.init_weight(&format!("{prefix}.wg"), &[f_int, f_g, 1, 1], f_g, rng)?;
    store.init_const(&format!("{prefix}.bg"), &[f_int], 0.0, ParamKind::Bias)?;
    store.init_weight(&format!("{prefix}.psi"), &[1, f_int, 1, 1], f_int, rng)?;
    store.init_const(&format!("{prefix}.bpsi"), &[1], 0.0, ParamKind::Bias)
}
