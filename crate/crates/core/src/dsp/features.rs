use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dsp::stft::Spectrogram;
use crate::error::{Error, Result};

/// Floor applied before every logarithm in the pipeline.
pub const LOG_FLOOR: f64 = 1e-12;

/// Lower bound for per-bin standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-bin mean and standard deviation of log-magnitude features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Global per-bin statistics over all rows of all matrices.
    pub fn from_features<'a>(mats: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Option<Array1<f64>> = None;
        let mut mats_vec = Vec::new();
        for m in mats {
            let s = m.sum_axis(Axis(0));
            sum = Some(match sum {
                None => s,
                Some(acc) => {
                    if acc.len() != s.len() {
                        return Err(Error::ShapeMismatch {
                            expected: format!("{} bins", acc.len()),
                            actual: format!("{} bins", s.len()),
                        });
                    }
                    acc + s
                }
            });
            count += m.nrows();
            mats_vec.push(m);
        }
        let sum = sum.ok_or_else(|| Error::Empty("no feature frames for statistics".into()))?;
        if count == 0 {
            return Err(Error::Empty("no feature frames for statistics".into()));
        }
        let mean = sum / count as f64;
        let mut var = Array1::<f64>::zeros(mean.len());
        for m in mats_vec {
            for row in m.rows() {
                for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - mu) * (x - mu);
                }
            }
        }
        let std = var.mapv(|v| (v / count as f64).sqrt().max(STD_FLOOR));
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn bins(&self) -> usize {
        self.mean.len()
    }
}

/// `T × 205` log-magnitude features, optionally normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    /// Present once the values have been normalized with these statistics.
    pub stats: Option<NormStats>,
}

/// Natural log of floored magnitudes over the processed bins.
pub fn log_magnitude(spec: &Spectrogram, floor_eps: f64) -> Result<FeatureMatrix> {
    if !(floor_eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "log floor must be positive, got {floor_eps}"
        )));
    }
    let values = spec
        .processed_magnitudes()
        .mapv(|m| m.max(floor_eps).ln());
    Ok(FeatureMatrix {
        values,
        stats: None,
    })
}

/// `(x - mean_k) / std_k` per bin.
pub fn normalize(features: &FeatureMatrix, stats: Option<&NormStats>) -> Result<FeatureMatrix> {
    let stats = stats.ok_or(Error::MissingStats)?;
    check_bins(features, stats)?;
    let mut values = features.values.clone();
    for mut row in values.rows_mut() {
        for ((x, mu), sd) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *x = (*x - mu) / sd;
        }
    }
    Ok(FeatureMatrix {
        values,
        stats: Some(stats.clone()),
    })
}

/// Inverse of [`normalize`], using the attached statistics.
pub fn denormalize(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    let stats = features.stats.as_ref().ok_or(Error::MissingStats)?;
    check_bins(features, stats)?;
    let mut values = features.values.clone();
    for mut row in values.rows_mut() {
        for ((x, mu), sd) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *x = *x * sd + mu;
        }
    }
    Ok(FeatureMatrix {
        values,
        stats: None,
    })
}

fn check_bins(features: &FeatureMatrix, stats: &NormStats) -> Result<()> {
    if features.values.ncols() != stats.bins() || stats.std.len() != stats.bins() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bins", stats.bins()),
            actual: format!("{} bins", features.values.ncols()),
        });
    }
    Ok(())
}
