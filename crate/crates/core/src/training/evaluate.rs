use super::checkpoint::ModelCheckpoint;
use super::metrics::{regression_metrics, EvalLevel, MetricsReport};
use crate::error::{Error, Result};
use crate::models::{forward, ModelKind};
use crate::nn::{NormMode, Session, Tensor};
use crate::preprocess::{agb_from_rh80, footprint_mean, PatchSample};
use crate::raster::{FootprintRecord, RasterGrid};

const EVAL_BATCH: usize = 8;

/// Eval-mode predictions in Mg/ha, one `size x size` plane per sample
/// (a single value for the pixel-independent model).
pub fn predict_samples(
    ckpt: &ModelCheckpoint,
    samples: &[PatchSample],
    nodata: f32,
) -> Result<Vec<Vec<f32>>> {
    let desc = &ckpt.desc;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let first = &chunk[0];
        let mut x = Vec::with_capacity(chunk.len() * first.features.len());
        for p in chunk {
            if p.channels != first.channels || p.size != first.size {
                return Err(Error::Shape("samples differ in shape".into()));
            }
            let mut f = p.features.clone();
            ckpt.stats.apply_features(&mut f, nodata);
            x.extend(f);
        }
        let shape = if desc.kind == ModelKind::AuFc {
            vec![chunk.len(), first.channels * first.size * first.size]
        } else {
            vec![chunk.len(), first.channels, first.size, first.size]
        };
        let mut s = Session::new(&ckpt.params, NormMode::Eval, false);
        let xi = s.input(Tensor::from_vec(&shape, x)?);
        let y = forward(desc, &mut s, xi)?.out;
        let plane = s.graph.value(y).len() / chunk.len();
        for z in s.graph.value(y).data().chunks(plane) {
            out.push(
                z.iter()
                    .map(|&v| ckpt.stats.invert_label(v as f64) as f32)
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Metrics over every labeled pixel of `samples`.
pub fn evaluate_pixels(
    ckpt: &ModelCheckpoint,
    samples: &[PatchSample],
    nodata: f32,
) -> Result<MetricsReport> {
    let preds = predict_samples(ckpt, samples, nodata)?;
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for (s, pr) in samples.iter().zip(&preds) {
        for (&l, &v) in s.labels.iter().zip(pr) {
            if l >= 0.0 {
                p.push(v as f64);
                t.push(l as f64);
            }
        }
    }
    regression_metrics(&p, &t, EvalLevel::Pixel)
}

/// Area-weighted mean prediction inside each footprint against the
/// footprint's reference biomass. Footprints with no predicted pixel under
/// them are skipped.
pub fn evaluate_footprints(
    pred: &RasterGrid,
    footprints: &[FootprintRecord],
) -> Result<MetricsReport> {
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for fp in footprints {
        match footprint_mean(pred, fp) {
            Ok(m) => {
                p.push(m[0]);
                t.push(agb_from_rh80(fp.rh80)?);
            }
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    regression_metrics(&p, &t, EvalLevel::Footprint)
}
