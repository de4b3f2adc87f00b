//! Attention UNet, plain UNet and the fully connected AU-FC variant.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::init_gate;
use crate::nn::{
    attention_gate, grad_check, GradCheckReport, NodeId, NormMode, ParamKind, ParamStore, Real,
    Session, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "AU")]
    Au,
    #[serde(rename = "UNet")]
    UNet,
    #[serde(rename = "AU_FC")]
    AuFc,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Au => "AU",
            ModelKind::UNet => "UNet",
            ModelKind::AuFc => "AU_FC",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "au" => Ok(ModelKind::Au),
            "unet" => Ok(ModelKind::UNet),
            "au_fc" | "aufc" => Ok(ModelKind::AuFc),
            _ => Err(Error::Config(format!(
                "unknown model kind `{s}` (expected AU, UNet or AU_FC)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub kind: ModelKind,
    /// Number of encoder blocks.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub patch_size: usize,
}

impl ArchitectureDescriptor {
    pub fn new(kind: ModelKind, depth: usize, base_channels: usize) -> Self {
        Self {
            kind,
            depth,
            base_channels,
            in_channels: 29,
            patch_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.depth) {
            return Err(Error::Config(format!("depth {} outside 2..=5", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.patch_size == 0 {
            return Err(Error::Config(
                "channel counts and patch size must be positive".into(),
            ));
        }
        if !self.patch_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "patch size {} is not divisible by 2^{}",
                self.patch_size, self.depth
            )));
        }
        Ok(())
    }

    /// Feature width at encoder level `l`; level `depth` is the bottleneck.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn gated(&self) -> bool {
        self.kind != ModelKind::UNet
    }

    /// Width of the AU-FC embedding layer.
    pub fn fc_hidden(&self) -> usize {
        (self.patch_size * self.patch_size / 2).max(1)
    }
}

/// Network weights together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub desc: ArchitectureDescriptor,
    pub params: ParamStore<f32>,
}

/// Output node plus the attention coefficient maps, shallowest level first.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub out: NodeId,
    pub gates: Vec<NodeId>,
}

impl Model {
    /// AU, UNet or AU-FC with seeded initialization.
    pub fn build(desc: ArchitectureDescriptor, seed: u64) -> Result<Self> {
        Ok(Self {
            desc,
            params: init_params(&desc, seed)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.trainable_count()
    }

    /// Single-pass inference in f32 with running normalization statistics.
    /// `x` is `N x C x H x W` for the convolutional models, `N x C` for AU-FC.
    pub fn predict(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut s = Session::new(&self.params, NormMode::Eval, false);
        let xi = s.input(x);
        let out = forward(&self.desc, &mut s, xi)?.out;
        Ok(s.graph.value(out).clone())
    }
}

pub fn build_model(desc: ArchitectureDescriptor, seed: u64) -> Result<Model> {
    if desc.kind == ModelKind::AuFc {
        return Err(Error::Config("AU_FC is built with build_au_fc".into()));
    }
    Model::build(desc, seed)
}

pub fn build_au_fc(desc: ArchitectureDescriptor, seed: u64) -> Result<Model> {
    Model::build(
        ArchitectureDescriptor {
            kind: ModelKind::AuFc,
            ..desc
        },
        seed,
    )
}

fn init_params(desc: &ArchitectureDescriptor, seed: u64) -> Result<ParamStore<f32>> {
    desc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let n_pix = desc.patch_size * desc.patch_size;
    let unet_in = if desc.kind == ModelKind::AuFc {
        p.init_weight(
            "fc_in.w",
            &[desc.in_channels, n_pix],
            desc.in_channels,
            &mut rng,
        )?;
        p.init_const("fc_in.b", &[n_pix], 0.0, ParamKind::Bias)?;
        1
    } else {
        desc.in_channels
    };
    let conv_bn =
        |p: &mut ParamStore<f32>, prefix: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            p.init_weight(&format!("{prefix}.c1.w"), &[cout, cin, 3, 3], cin * 9, rng)?;
            p.init_norm(&format!("{prefix}.bn1"), cout)?;
            p.init_weight(
                &format!("{prefix}.c2.w"),
                &[cout, cout, 3, 3],
                cout * 9,
                rng,
            )?;
            p.init_norm(&format!("{prefix}.bn2"), cout)
        };
    let mut cin = unet_in;
    for l in 0..desc.depth {
        conv_bn(&mut p, &format!("enc{l}"), cin, desc.width(l), &mut rng)?;
        cin = desc.width(l);
    }
    conv_bn(&mut p, "bott", cin, desc.width(desc.depth), &mut rng)?;
    for l in (0..desc.depth).rev() {
        let (c_up, c) = (desc.width(l + 1), desc.width(l));
        p.init_weight(
            &format!("dec{l}.up.w"),
            &[c_up, c, 2, 2],
            c_up * 4,
            &mut rng,
        )?;
        p.init_const(&format!("dec{l}.up.b"), &[c], 0.0, ParamKind::Bias)?;
        if desc.gated() {
            init_gate(
                &mut p,
                &format!("dec{l}.gate"),
                c,
                c,
                (c / 2).max(1),
                &mut rng,
            )?;
        }
        conv_bn(&mut p, &format!("dec{l}"), 2 * c, c, &mut rng)?;
    }
    p.init_weight("head.w", &[1, desc.width(0), 1, 1], desc.width(0), &mut rng)?;
    p.init_const("head.b", &[1], 0.0, ParamKind::Bias)?;
    if desc.kind == ModelKind::AuFc {
        let h = desc.fc_hidden();
        p.init_weight("fc_mid.w", &[n_pix, h], n_pix, &mut rng)?;
        p.init_const("fc_mid.b", &[h], 0.0, ParamKind::Bias)?;
        p.init_weight("fc_out.w", &[h, 1], h, &mut rng)?;
        p.init_const("fc_out.b", &[1], 0.0, ParamKind::Bias)?;
    }
    Ok(p)
}

fn conv_bn_relu<T: Real>(s: &mut Session<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let mut h = x;
    for k in 1..=2 {
        h = s.conv(h, &format!("{prefix}.c{k}"), 1)?;
        h = s.batch_norm(h, &format!("{prefix}.bn{k}"))?;
        h = s.graph.relu(h);
    }
    Ok(h)
}

/// Encoder, bottleneck and decoder with optional attention gates on the
/// skip connections. Maps `N x C x H x W` to `N x 1 x H x W`.
pub fn forward_unet<T: Real>(
    desc: &ArchitectureDescriptor,
    s: &mut Session<'_, T>,
    x: NodeId,
) -> Result<ForwardOutput> {
    let (_, _, h, w) = s.graph.value(x).dims4()?;
    let f = 1 << desc.depth;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not divisible by 2^{}",
            desc.depth
        )));
    }
    let mut skips = Vec::with_capacity(desc.depth);
    let mut cur = x;
    for l in 0..desc.depth {
        let e = conv_bn_relu(s, cur, &format!("enc{l}"))?;
        skips.push(e);
        cur = s.graph.max_pool2(e)?;
    }
    cur = conv_bn_relu(s, cur, "bott")?;
    let mut gates = vec![None; desc.depth];
    for l in (0..desc.depth).rev() {
        let up = s.up_conv(cur, &format!("dec{l}.up"))?;
        let skip = if desc.gated() {
            let (xhat, u) = attention_gate(s, skips[l], up, &format!("dec{l}.gate"))?;
            gates[l] = Some(u);
            xhat
        } else {
            skips[l]
        };
        let cat = s.graph.concat(skip, up)?;
        cur = conv_bn_relu(s, cat, &format!("dec{l}"))?;
    }
    let out = s.conv(cur, "head", 0)?;
    Ok(ForwardOutput {
        out,
        gates: gates.into_iter().flatten().collect(),
    })
}

/// AU-FC: `N x C` feature vectors to `N x 1` estimates.
pub fn forward_au_fc<T: Real>(
    desc: &ArchitectureDescriptor,
    s: &mut Session<'_, T>,
    x: NodeId,
) -> Result<ForwardOutput> {
    let (n, _) = s.graph.value(x).dims2()?;
    let p = desc.patch_size;
    let h = s.linear(x, "fc_in")?;
    let img = s.graph.reshape(h, &[n, 1, p, p])?;
    let inner = forward_unet(desc, s, img)?;
    let flat = s.graph.reshape(inner.out, &[n, p * p])?;
    let mid = s.linear(flat, "fc_mid")?;
    let out = s.linear(mid, "fc_out")?;
    Ok(ForwardOutput {
        out,
        gates: inner.gates,
    })
}

pub fn forward<T: Real>(
    desc: &ArchitectureDescriptor,
    s: &mut Session<'_, T>,
    x: NodeId,
) -> Result<ForwardOutput> {
    match desc.kind {
        ModelKind::AuFc => forward_au_fc(desc, s, x),
        _ => forward_unet(desc, s, x),
    }
}

/// Finite-difference check of a whole network in train mode: the scalar
/// is `sum(out * probe)` and every trainable tensor plus the input is
/// perturbed.
pub fn model_grad_check(
    desc: &ArchitectureDescriptor,
    params: &ParamStore<f64>,
    x: &Tensor<f64>,
    probe_seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .map(|(n, _)| n.clone())
        .collect();
    let mut inputs = vec![("input".to_string(), x.clone())];
    for n in &names {
        inputs.push((n.clone(), params.value(n)?.clone()));
    }
    let probe = {
        let mut s = Session::new(params, NormMode::Train, false);
        let xi = s.input(x.clone());
        let out = forward(desc, &mut s, xi)?.out;
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
        (0..s.graph.value(out).len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    grad_check(&inputs, step, |graph, ids| {
        let mut s = Session::with_graph(std::mem::take(graph), params, NormMode::Train, true);
        for (k, n) in names.iter().enumerate() {
            s.bind(n, ids[k + 1]);
        }
        let out = forward(desc, &mut s, ids[0])?.out;
        let l = s.graph.dot(out, &probe)?;
        *graph = s.into_graph();
        Ok(l)
    })
}
