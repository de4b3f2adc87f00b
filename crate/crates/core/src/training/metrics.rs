use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalLevel {
    Pixel,
    Footprint,
}

impl fmt::Display for EvalLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalLevel::Pixel => "pixel",
            EvalLevel::Footprint => "footprint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the reference values have zero variance.
    pub r2: Option<f64>,
    pub r2_undefined: bool,
    pub rmse: f64,
    pub bias: f64,
    pub n: usize,
    pub level: EvalLevel,
}

impl MetricsReport {
    /// R² with the undefined case mapped to NaN.
    pub fn r2_or_nan(&self) -> f64 {
        self.r2.unwrap_or(f64::NAN)
    }
}

/// R² = 1 - SS_res / SS_tot, RMSE and mean signed error `mean(pred - truth)`.
pub fn regression_metrics(pred: &[f64], truth: &[f64], level: EvalLevel) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} references",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::Config(format!(
            "no {level}-level samples to evaluate"
        )));
    }
    let nf = n as f64;
    let mean = truth.iter().sum::<f64>() / nf;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, y)| (y - p).powi(2)).sum();
    let bias = pred.iter().zip(truth).map(|(p, y)| p - y).sum::<f64>() / nf;
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(MetricsReport {
        r2,
        r2_undefined: r2.is_none(),
        rmse: (ss_res / nf).sqrt(),
        bias,
        n,
        level,
    })
}
