//! Per-channel z-scoring with statistics taken from the training set only.

use serde::{Deserialize, Serialize};

use super::patches::PatchSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Population moments.
    fn finish(&self) -> Option<(f64, f64)> {
        (self.n > 0).then(|| (self.mean, (self.m2 / self.n as f64).sqrt()))
    }
}

/// Population mean and standard deviation of a value stream.
pub fn channel_moments(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    let mut w = Welford::default();
    values.into_iter().for_each(|v| w.push(v));
    w.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub channel_names: Vec<String>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

impl StandardizationStats {
    /// Fit on training patches. Feature nodata and the label sentinel are
    /// excluded from the moments.
    pub fn fit(patches: &[PatchSample], channel_names: &[String], nodata: f32) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::Config("cannot fit standardization on zero patches".into()))?;
        let c = first.channels;
        if channel_names.len() != c {
            return Err(Error::Config(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                c
            )));
        }
        let mut acc = vec![Welford::default(); c];
        let mut label = Welford::default();
        for p in patches {
            if p.channels != c {
                return Err(Error::Shape("patches disagree on channel count".into()));
            }
            for (k, w) in acc.iter_mut().enumerate() {
                for &v in p.channel(k) {
                    if v != nodata && !v.is_nan() {
                        w.push(v as f64);
                    }
                }
            }
            for &v in &p.labels {
                if v >= 0.0 {
                    label.push(v as f64);
                }
            }
        }
        let mut channel_mean = Vec::with_capacity(c);
        let mut channel_std = Vec::with_capacity(c);
        for (k, w) in acc.iter().enumerate() {
            let (m, s) = w.finish().ok_or_else(|| {
                Error::Config(format!(
                    "channel `{}` has no valid pixels",
                    channel_names[k]
                ))
            })?;
            if !(s > 0.0) {
                return Err(Error::Config(format!(
                    "channel `{}` has zero standard deviation",
                    channel_names[k]
                )));
            }
            channel_mean.push(m);
            channel_std.push(s);
        }
        let (label_mean, label_std) = label
            .finish()
            .ok_or_else(|| Error::Config("no labeled pixels in the training patches".into()))?;
        // constant labels are only centred
        let label_std = if label_std > 0.0 { label_std } else { 1.0 };
        Ok(Self {
            channel_names: channel_names.to_vec(),
            channel_mean,
            channel_std,
            label_mean,
            label_std,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel_mean.len()
    }

    pub fn apply_channel(&self, k: usize, v: f64) -> f64 {
        (v - self.channel_mean[k]) / self.channel_std[k]
    }

    pub fn invert_channel(&self, k: usize, z: f64) -> f64 {
        z * self.channel_std[k] + self.channel_mean[k]
    }

    pub fn apply_label(&self, v: f64) -> f64 {
        (v - self.label_mean) / self.label_std
    }

    pub fn invert_label(&self, z: f64) -> f64 {
        z * self.label_std + self.label_mean
    }

    /// Standardize a channel-major `C x H x W` block in place. Nodata maps
    /// to 0, the training mean.
    pub fn apply_features(&self, data: &mut [f32], nodata: f32) {
        let plane = data.len() / self.channels();
        for (k, chunk) in data.chunks_mut(plane).enumerate() {
            let (m, s) = (self.channel_mean[k], self.channel_std[k]);
            for v in chunk {
                *v = if *v == nodata || v.is_nan() {
                    0.0
                } else {
                    ((*v as f64 - m) / s) as f32
                };
            }
        }
    }

    pub fn invert_features(&self, data: &mut [f32]) {
        let plane = data.len() / self.channels();
        for (k, chunk) in data.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = self.invert_channel(k, *v as f64) as f32;
            }
        }
    }
}
