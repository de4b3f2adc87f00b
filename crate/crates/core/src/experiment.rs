//! The synthetic benchmark: one seeded scene, a fixed patch split, and
//! helpers that train a model on it and score the held-out test patches.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ArchitectureDescriptor, ModelKind};
use crate::pipeline::{prepare_scene, PreprocessConfig, Scene};
use crate::preprocess::{agb_from_rh80, footprint_mean, patchify, PatchSample};
use crate::raster::{FootprintRecord, RasterGrid, LABEL_SENTINEL};
use crate::synth::{generate_landscape, sample_footprints, SynthSpec};
use crate::training::{
    evaluate_footprints, evaluate_pixels, predict_samples, regression_metrics, split_dataset,
    train, EvalLevel, MetricsReport, Split, TrainConfig, TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub patch_size: usize,
    /// Seed of the train/val/test partition, independent of model seeds.
    pub split_seed: u64,
    /// Schedule for the convolutional models.
    pub train: TrainConfig,
    /// Schedule for the per-footprint model.
    pub au_fc_train: TrainConfig,
    /// Side of the single-channel image the per-footprint model reshapes to.
    pub au_fc_patch_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            patch_size: 64,
            split_seed: 0,
            train: TrainConfig {
                max_epochs: 50,
                batch_size: 4,
                lr_decay_every: 20,
                ..TrainConfig::default()
            },
            au_fc_train: TrainConfig {
                max_epochs: 50,
                batch_size: 32,
                lr_decay_every: 20,
                ..TrainConfig::default()
            },
            au_fc_patch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub kind: ModelKind,
    pub depth: usize,
    pub seed: u64,
    pub footprint: MetricsReport,
    /// Labeled-pixel metrics; absent for the per-footprint model.
    pub pixel: Option<MetricsReport>,
    pub best_epoch: usize,
    pub seconds: f64,
}

pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub truth: RasterGrid,
    pub scene: Scene,
    pub patches: Vec<PatchSample>,
    pub split: Split,
    nodata: f32,
}

impl Benchmark {
    pub fn build(config: BenchmarkConfig) -> Result<Self> {
        let land = generate_landscape(&config.synth)?;
        let raw = sample_footprints(&land.truth, &config.synth)?;
        let scene = prepare_scene(&land.sources, &raw, &config.preprocess)?;
        let patches = patchify(&scene.stack, &scene.labels, config.patch_size)?;
        let split = split_dataset(patches.len(), config.train.split_ratio, config.split_seed)?;
        let nodata = scene.stack.nodata_f32();
        Ok(Self {
            config,
            truth: land.truth,
            scene,
            patches,
            split,
            nodata,
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<PatchSample> {
        idx.iter().map(|&i| self.patches[i].clone()).collect()
    }

    /// Screened footprints whose center falls inside one of the patches.
    pub fn footprints_in(&self, idx: &[usize]) -> Vec<FootprintRecord> {
        let spec = &self.scene.stack.spec;
        self.scene
            .footprints
            .iter()
            .filter(|fp| {
                let (r, c) = spec.to_pixel(fp.center_x, fp.center_y);
                idx.iter().any(|&i| {
                    let p = &self.patches[i];
                    let (r0, c0, s) = (p.origin_row as f64, p.origin_col as f64, p.size as f64);
                    r >= r0 && r < r0 + s && c >= c0 && c < c0 + s
                })
            })
            .cloned()
            .collect()
    }

    /// A scene-sized map holding predictions over the given patches and
    /// nodata elsewhere.
    pub fn prediction_raster(&self, outcome: &TrainOutcome, idx: &[usize]) -> Result<RasterGrid> {
        let samples = self.subset(idx);
        let preds = predict_samples(&outcome.checkpoint, &samples, self.nodata)?;
        let spec = self.scene.stack.spec.clone();
        let mut map = RasterGrid::filled(
            spec,
            vec!["agb".into()],
            self.scene.stack.nodata,
            self.nodata,
        );
        for (p, plane) in samples.iter().zip(&preds) {
            for r in 0..p.size {
                for c in 0..p.size {
                    map.set(0, p.origin_row + r, p.origin_col + c, plane[r * p.size + c]);
                }
            }
        }
        Ok(map)
    }

    /// AU or UNet on the patch split, scored on the test patches.
    pub fn run_spatial(
        &self,
        desc: ArchitectureDescriptor,
        seed: u64,
    ) -> Result<(TrainOutcome, RunSummary)> {
        if desc.kind == ModelKind::AuFc {
            return Err(Error::Config(
                "use run_au_fc for the per-footprint model".into(),
            ));
        }
        let start = Instant::now();
        let config = TrainConfig {
            seed,
            ..self.config.train.clone()
        };
        let roster = &self.scene.stack.band_names;
        let out = train(
            &self.subset(&self.split.train),
            &self.subset(&self.split.val),
            desc,
            &config,
            roster,
            self.nodata,
        )?;
        let map = self.prediction_raster(&out, &self.split.test)?;
        let footprint = evaluate_footprints(&map, &self.footprints_in(&self.split.test))?;
        let pixel = evaluate_pixels(&out.checkpoint, &self.subset(&self.split.test), self.nodata)?;
        let summary = RunSummary {
            kind: desc.kind,
            depth: desc.depth,
            seed,
            footprint,
            pixel: Some(pixel),
            best_epoch: out.checkpoint.epoch,
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok((out, summary))
    }

    /// One single-pixel sample per footprint: the area-weighted feature mean
    /// under the disc, labeled with the footprint biomass.
    pub fn footprint_samples(&self, footprints: &[FootprintRecord]) -> Result<Vec<PatchSample>> {
        let stack = &self.scene.stack;
        let mut out = Vec::with_capacity(footprints.len());
        for fp in footprints {
            let features = match footprint_mean(stack, fp) {
                Ok(v) => v.into_iter().map(|x| x as f32).collect(),
                Err(Error::Domain(_)) => continue,
                Err(e) => return Err(e),
            };
            let agb = agb_from_rh80(fp.rh80)?;
            out.push(PatchSample {
                features,
                labels: vec![if agb >= 0.0 {
                    agb as f32
                } else {
                    LABEL_SENTINEL
                }],
                channels: stack.bands(),
                size: 1,
                origin_row: 0,
                origin_col: 0,
                fold_id: 0,
            });
        }
        Ok(out)
    }

    /// The pixel-independent model trained on footprints of the training and
    /// validation patches, scored on footprints of the test patches.
    pub fn run_au_fc(
        &self,
        depth: usize,
        base_channels: usize,
        seed: u64,
    ) -> Result<(TrainOutcome, RunSummary)> {
        let start = Instant::now();
        let desc = ArchitectureDescriptor {
            in_channels: self.scene.stack.bands(),
            patch_size: self.config.au_fc_patch_size,
            ..ArchitectureDescriptor::new(ModelKind::AuFc, depth, base_channels)
        };
        let config = TrainConfig {
            seed,
            ..self.config.au_fc_train.clone()
        };
        let tr = self.footprint_samples(&self.footprints_in(&self.split.train))?;
        let va = self.footprint_samples(&self.footprints_in(&self.split.val))?;
        let te = self.footprint_samples(&self.footprints_in(&self.split.test))?;
        let out = train(
            &tr,
            &va,
            desc,
            &config,
            &self.scene.stack.band_names,
            self.nodata,
        )?;
        let preds = predict_samples(&out.checkpoint, &te, self.nodata)?;
        let p: Vec<f64> = preds.iter().map(|v| v[0] as f64).collect();
        let t: Vec<f64> = te.iter().map(|s| s.labels[0] as f64).collect();
        let summary = RunSummary {
            kind: ModelKind::AuFc,
            depth,
            seed,
            footprint: regression_metrics(&p, &t, EvalLevel::Footprint)?,
            pixel: None,
            best_epoch: out.checkpoint.epoch,
            seconds: start.elapsed().as_secs_f64(),
        };
        Ok((out, summary))
    }
}
