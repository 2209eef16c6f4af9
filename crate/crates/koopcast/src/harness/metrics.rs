//! Evaluation protocol and aggregate metrics.
//!
//! Test error is measured by anchored long-horizon forecasting: predictions
//! start from the final training observation and roll over the entire test
//! horizon, so errors compound exactly as they would in deployment.

use serde::{Deserialize, Serialize};

use crate::baselines::{continuous_spectrum, DmdModel};
use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::model::KoopmanModel;
use crate::spectral::KoopmanSpectrum;
use crate::training::{split_series, DEFAULT_SPLIT_FRACTIONS};

/// One model evaluated on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean over test indices of the squared forecast error norm, anchored
    /// at the last training point.
    pub test_mse: f64,
    /// Mean absolute error of estimated vs known frequencies (greedy
    /// nearest matching); absent when no ground truth is known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<KoopmanSpectrum>,
    pub n_test: usize,
    pub anchor_time: f64,
}

/// Greedy nearest-angle assignment between estimated and true frequency
/// sets; mean absolute error over the matched modes.
pub fn frequency_mae(estimated: &[f64], truth: &[f64]) -> Option<f64> {
    if estimated.is_empty() || truth.is_empty() {
        return None;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        for (j, e) in estimated.iter().enumerate() {
            pairs.push(((t - e).abs(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_t = vec![false; truth.len()];
    let mut used_e = vec![false; estimated.len()];
    let mut total = 0.0;
    let mut count = 0;
    for (d, i, j) in pairs {
        if !used_t[i] && !used_e[j] {
            used_t[i] = true;
            used_e[j] = true;
            total += d;
            count += 1;
        }
    }
    Some(total / count as f64)
}

/// Anchored test MSE and frequency error for the spectral model.
pub fn evaluate_koopman(
    model: &KoopmanModel,
    series: &TimeSeries,
    true_freqs: Option<&[f64]>,
) -> Result<EvalMetrics> {
    if series.measurement_dim() != model.measurement_dim {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: format!("series with M={}", series.measurement_dim()),
            rhs: format!("model with M={}", model.measurement_dim),
        });
    }
    let (train_split, _val, test_split) = split_series(series, DEFAULT_SPLIT_FRACTIONS)?;
    let anchor_idx = train_split.len() - 1;
    let anchor_y = train_split.row(anchor_idx).to_vec();
    let anchor_time = train_split.times[anchor_idx];
    let taus: Vec<f64> = test_split.times.iter().map(|t| t - anchor_time).collect();
    let mut eval = model.evaluator()?;
    let predictions = eval.forecast_horizons(&anchor_y, &taus)?;
    let mut mse = 0.0;
    for (pred, i) in predictions.iter().zip(0..test_split.len()) {
        mse += pred
            .iter()
            .zip(test_split.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    mse /= test_split.len() as f64;

    let spectrum = model.spectrum()?;
    let estimated: Vec<f64> = spectrum.freqs.iter().map(|w| w.abs()).collect();
    let mae = true_freqs.and_then(|t| frequency_mae(&estimated, t));
    Ok(EvalMetrics {
        test_mse: mse,
        frequency_mae: mae,
        spectrum: Some(spectrum),
        n_test: test_split.len(),
        anchor_time,
    })
}

/// Anchored test MSE for a DMD baseline by rolling the one-step operator
/// (requires regular sampling).
pub fn evaluate_dmd(
    model: &DmdModel,
    series: &TimeSeries,
    true_freqs: Option<&[f64]>,
) -> Result<EvalMetrics> {
    if series.measurement_dim() != model.dim() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: format!("series with M={}", series.measurement_dim()),
            rhs: format!("operator with M={}", model.dim()),
        });
    }
    let gaps: Vec<f64> = series.times.windows(2).map(|w| w[1] - w[0]).collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    if gaps.iter().any(|g| (g - mean_gap).abs() > 1e-6 * mean_gap) {
        return Err(Error::DegenerateData(
            "DMD evaluation requires regular sampling".into(),
        ));
    }
    let (train_split, val_split, test_split) = split_series(series, DEFAULT_SPLIT_FRACTIONS)?;
    let anchor_time = *train_split.times.last().unwrap();
    let mut y = train_split.row(train_split.len() - 1).to_vec();
    // Roll through the validation gap, then across the test horizon.
    for _ in 0..val_split.len() {
        y = model.step(&y);
    }
    let mut mse = 0.0;
    for i in 0..test_split.len() {
        y = model.step(&y);
        mse += y
            .iter()
            .zip(test_split.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    mse /= test_split.len() as f64;

    let spectrum = continuous_spectrum(model).ok();
    let estimated: Vec<f64> = spectrum
        .as_ref()
        .map(|s| {
            s.iter()
                .filter(|(_, w)| *w > 0.0)
                .map(|(_, w)| *w)
                .collect()
        })
        .unwrap_or_default();
    let mae = true_freqs.and_then(|t| frequency_mae(&estimated, t));
    Ok(EvalMetrics {
        test_mse: mse,
        frequency_mae: mae,
        spectrum: None,
        n_test: test_split.len(),
        anchor_time,
    })
}

/// Aggregate over completed seeds: mean, standard error (sample standard
/// deviation over the square root of the seed count), and median.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_seed_mse: Vec<f64>,
    pub mse_mean: f64,
    pub mse_stderr: f64,
    pub mse_median: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freq_mae_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freq_mae_stderr: Option<f64>,
    pub n_ok: usize,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

impl MetricsReport {
    pub fn from_evals(evals: &[EvalMetrics]) -> MetricsReport {
        let per_seed_mse: Vec<f64> = evals.iter().map(|e| e.test_mse).collect();
        let (mse_mean, mse_stderr) = if per_seed_mse.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_stderr(&per_seed_mse)
        };
        let maes: Vec<f64> = evals.iter().filter_map(|e| e.frequency_mae).collect();
        let (freq_mae_mean, freq_mae_stderr) = if maes.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_stderr(&maes);
            (Some(m), Some(s))
        };
        MetricsReport {
            mse_median: if per_seed_mse.is_empty() {
                f64::NAN
            } else {
                median(&per_seed_mse)
            },
            mse_mean,
            mse_stderr,
            freq_mae_mean,
            freq_mae_stderr,
            n_ok: per_seed_mse.len(),
            per_seed_mse,
        }
    }
}
