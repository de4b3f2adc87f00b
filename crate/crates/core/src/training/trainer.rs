use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::models::{forward, ArchitectureDescriptor, Model, ModelKind};
use crate::nn::params::BN_MOMENTUM;
use crate::nn::{Adam, AdamConfig, NormMode, ParamStore, Session, Tensor};
use crate::preprocess::{PatchSample, StandardizationStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// L2 coefficient on weights inside the loss.
    pub weight_decay: f64,
    pub split_ratio: [usize; 3],
    pub folds: usize,
    pub seed: u64,
    /// Extend the L2 penalty to biases and normalization parameters.
    pub penalize_all_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_every: 40,
            max_epochs: 120,
            batch_size: 128,
            weight_decay: 1e-5,
            split_ratio: [7, 2, 1],
            folds: 5,
            seed: 0,
            penalize_all_params: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.initial_lr > 0.0
            && self.lr_decay_factor > 0.0
            && self.lr_decay_every > 0
            && self.max_epochs > 0
            && self.batch_size > 0
            && self.weight_decay >= 0.0
            && self.folds > 0;
        if !positive {
            return Err(Error::Config(format!(
                "training parameters must be positive: {self:?}"
            )));
        }
        if self.split_ratio.iter().sum::<usize>() != 10 || self.split_ratio.contains(&0) {
            return Err(Error::Config(format!(
                "split ratio {:?} must have three positive parts summing to 10",
                self.split_ratio
            )));
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch.saturating_sub(1) / self.lr_decay_every;
        self.initial_lr * self.lr_decay_factor.powi(steps as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochRecord>,
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Internal(e.to_string()))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Internal(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Standardized samples ready for batching.
struct Prepared {
    x: Vec<Vec<f32>>,
    y: Vec<Vec<f32>>,
    mask: Vec<Vec<bool>>,
    channels: usize,
    size: usize,
}

impl Prepared {
    fn new(samples: &[PatchSample], stats: &StandardizationStats, nodata: f32) -> Self {
        let mut out = Prepared {
            x: Vec::with_capacity(samples.len()),
            y: Vec::with_capacity(samples.len()),
            mask: Vec::with_capacity(samples.len()),
            channels: stats.channels(),
            size: samples.first().map_or(1, |p| p.size),
        };
        for p in samples {
            let mut x = p.features.clone();
            stats.apply_features(&mut x, nodata);
            out.x.push(x);
            out.mask.push(p.labels.iter().map(|&v| v >= 0.0).collect());
            out.y.push(
                p.labels
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 {
                            stats.apply_label(v as f64) as f32
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
        }
        out
    }

    fn len(&self) -> usize {
        self.x.len()
    }

    fn batch(&self, idx: &[usize], kind: ModelKind) -> Result<(Tensor<f32>, Vec<f32>, Vec<bool>)> {
        let mut x = Vec::with_capacity(idx.len() * self.x[0].len());
        let mut y = Vec::with_capacity(idx.len() * self.y[0].len());
        let mut m = Vec::with_capacity(y.capacity());
        for &i in idx {
            x.extend_from_slice(&self.x[i]);
            y.extend_from_slice(&self.y[i]);
            m.extend_from_slice(&self.mask[i]);
        }
        let shape = if kind == ModelKind::AuFc {
            vec![idx.len(), self.channels * self.size * self.size]
        } else {
            vec![idx.len(), self.channels, self.size, self.size]
        };
        Ok((Tensor::from_vec(&shape, x)?, y, m))
    }
}

/// Contiguous batches over `order`; a trailing singleton joins the previous
/// batch because train-mode normalization needs two samples.
fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(last);
        }
    }
    out
}

/// Masked MSE in standardized units over all labeled pixels of `data`.
fn eval_loss(
    desc: &ArchitectureDescriptor,
    params: &ParamStore<f32>,
    data: &Prepared,
    batch_size: usize,
) -> Result<f64> {
    let (mut sse, mut n) = (0.0f64, 0usize);
    let order: Vec<usize> = (0..data.len()).collect();
    for b in order.chunks(batch_size.clamp(1, 16)) {
        let (x, y, m) = data.batch(b, desc.kind)?;
        let mut s = Session::new(params, NormMode::Eval, false);
        let xi = s.input(x);
        let out = forward(desc, &mut s, xi)?.out;
        for ((&p, &t), &k) in s.graph.value(out).data().iter().zip(&y).zip(&m) {
            if k {
                sse += (p as f64 - t as f64).powi(2);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { f64::NAN } else { sse / n as f64 })
}

/// Fit standardization on `train`, then minimise masked MSE plus the weight
/// penalty with Adam and the step schedule. Returns the parameters of the
/// epoch with the best validation loss (training loss when `val` is empty).
pub fn train(
    train: &[PatchSample],
    val: &[PatchSample],
    desc: ArchitectureDescriptor,
    config: &TrainConfig,
    roster: &[String],
    nodata: f32,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 samples for batch normalization, got {}",
            train.len()
        )));
    }
    let stats = StandardizationStats::fit(train, roster, nodata)?;
    let expected_in = if desc.kind == ModelKind::AuFc {
        train[0].channels * train[0].size * train[0].size
    } else {
        train[0].channels
    };
    if desc.in_channels != expected_in {
        return Err(Error::Config(format!(
            "architecture expects {} input channels, data has {expected_in}",
            desc.in_channels
        )));
    }
    let tr = Prepared::new(train, &stats, nodata);
    let va = Prepared::new(val, &stats, nodata);
    let mut params = Model::build(desc, config.seed)?.params;
    let mut adam = Adam::<f32>::new(AdamConfig {
        lr: config.initial_lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0fb_a7c4);
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=config.max_epochs {
        let lr = config.lr_at(epoch);
        adam.set_lr(lr);
        let mut order: Vec<usize> = (0..tr.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut nb) = (0.0, 0usize);
        for (bi, b) in batches(&order, config.batch_size).iter().enumerate() {
            let (x, y, m) = tr.batch(b, desc.kind)?;
            if !m.iter().any(|&v| v) {
                continue;
            }
            let (grads, norm_stats, lv) = {
                let mut s = Session::new(&params, NormMode::Train, true);
                let xi = s.input(x);
                let out = forward(&desc, &mut s, xi)?.out;
                let (loss, _) = s.masked_mse_l2_loss(
                    out,
                    &y,
                    &m,
                    config.weight_decay,
                    config.penalize_all_params,
                )?;
                let lv = s.graph.value(loss).item() as f64;
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, batch {}",
                        bi + 1
                    )));
                }
                s.graph.backward(loss)?;
                (s.grads(), s.take_norm_stats(), lv)
            };
            adam.step(&mut params, &grads).map_err(|e| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("{m} at epoch {epoch}, batch {}", bi + 1))
                }
                e => e,
            })?;
            for (prefix, st) in &norm_stats {
                params.update_running(prefix, st, BN_MOMENTUM)?;
            }
            loss_sum += lv;
            nb += 1;
        }
        let train_loss = loss_sum / nb.max(1) as f64;
        let val_loss = if va.len() > 0 {
            eval_loss(&desc, &params, &va, config.batch_size)?
        } else {
            train_loss
        };
        log::info!("epoch {epoch:>3}  lr {lr:.1e}  train {train_loss:.5}  val {val_loss:.5}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (val_loss, epoch, params) =
        best.ok_or_else(|| Error::Internal("no epoch completed".into()))?;
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            desc,
            roster: roster.to_vec(),
            stats,
            seed: config.seed,
            epoch,
            val_loss,
            params,
        },
        history,
    })
}
