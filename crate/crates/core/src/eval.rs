//! Posterior-predictive sampling, NRMSE and result export.
//!
//! Angular targets use circular statistics. Their NRMSE divides the RMS of
//! wrapped residuals by the full period (2π for `p_phi`, π for `p_psi`)
//! rather than by the observed range.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_periodic;
use crate::graph::GraphSeries;
use crate::layers::Sampling;
use crate::rng::StageRng;
use crate::tensor::RngNoise;
use crate::training::{sample_window_start, Localizer};

/// Period of each target; zero for the linear `p_L`.
pub const TARGET_PERIODS: [f64; 3] = [TAU, 0.0, PI];
pub const TARGET_NAMES: [&str; 3] = ["p_phi", "p_l", "p_psi"];
/// Recorded in summaries so readers know how angular errors were scaled.
pub const ANGULAR_DENOMINATOR: &str = "p_phi and p_psi: wrapped residuals over the full period (2pi, pi); p_l: range of actuals";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSample {
    pub index: usize,
    pub window_start: usize,
    pub prediction: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    /// Sample mean, circular for angles.
    pub mean: [f64; 3],
    /// Sample standard deviation (circular deviations for angles); absent
    /// for a single sample.
    pub std: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPrediction {
    pub samples: Vec<PredictionSample>,
    pub truth: Option<[f64; 3]>,
    pub summary: PredictionSummary,
    pub warnings: Vec<String>,
}

/// Circular mean of angles with the given period, in `[0, period)`.
pub fn circular_mean(values: &[f64], period: f64) -> f64 {
    let k = TAU / period;
    let (s, c) = values
        .iter()
        .fold((0.0, 0.0), |(s, c), v| (s + (k * v).sin(), c + (k * v).cos()));
    (s.atan2(c) / k).rem_euclid(period)
}

fn target_mean(values: &[f64], period: f64) -> f64 {
    if period > 0.0 {
        circular_mean(values, period)
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn deviation(x: f64, center: f64, period: f64) -> f64 {
    if period > 0.0 {
        wrap_periodic(x - center, period)
    } else {
        x - center
    }
}

pub fn summarize(predictions: &[[f64; 3]]) -> Result<PredictionSummary> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to summarize".into()));
    }
    let n = predictions.len();
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for d in 0..3 {
        let column: Vec<f64> = predictions.iter().map(|p| p[d]).collect();
        mean[d] = target_mean(&column, TARGET_PERIODS[d]);
        if n > 1 {
            let ss: f64 = column
                .iter()
                .map(|&x| deviation(x, mean[d], TARGET_PERIODS[d]).powi(2))
                .sum();
            std[d] = (ss / (n - 1) as f64).sqrt();
        }
    }
    Ok(PredictionSummary {
        mean,
        std: (n > 1).then_some(std),
    })
}

/// `n_samples` forward passes, each on a random window of `window` steps
/// with fresh layer noise.
pub fn posterior_predict(
    localizer: &Localizer,
    series: &GraphSeries,
    n_samples: usize,
    window: usize,
    rng: &mut impl Rng,
) -> Result<PosteriorPrediction> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    if window > series.n_timesteps() {
        return Err(Error::InvalidArgument(format!(
            "window {window} longer than the {} recorded steps",
            series.n_timesteps()
        )));
    }
    let mut warnings = Vec::new();
    if localizer.model.config.deterministic && n_samples > 1 {
        warnings.push("deterministic model: samples differ only through their windows".to_string());
    }
    let mut samples = Vec::with_capacity(n_samples);
    for index in 0..n_samples {
        let window_start = sample_window_start(rng, series.n_timesteps(), window);
        let mut noise = RngNoise(StageRng::seed_from_u64(rng.next_u64()));
        let prediction = localizer.predict_window(series, window_start, window, &mut Sampling::Sample(&mut noise))?;
        samples.push(PredictionSample {
            index,
            window_start,
            prediction,
        });
    }
    let preds: Vec<[f64; 3]> = samples.iter().map(|s| s.prediction).collect();
    Ok(PosteriorPrediction {
        summary: summarize(&preds)?,
        samples,
        truth: series.target(),
        warnings,
    })
}

/// Root-mean-squared error divided by the range of `actual`.
pub fn nrmse(predictions: &[f64], actual: &[f64]) -> Result<f64> {
    if predictions.len() != actual.len() || actual.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "nrmse needs equal, non-empty inputs (got {} and {})",
            predictions.len(),
            actual.len()
        )));
    }
    let (lo, hi) = actual
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    if hi <= lo {
        return Err(Error::ZeroRange);
    }
    Ok(rmse(predictions, actual, 0.0) / (hi - lo))
}

/// RMS of wrapped residuals divided by the period.
pub fn circular_nrmse(predictions: &[f64], actual: &[f64], period: f64) -> Result<f64> {
    if predictions.len() != actual.len() || actual.is_empty() {
        return Err(Error::InvalidArgument("circular_nrmse needs equal, non-empty inputs".into()));
    }
    Ok(rmse(predictions, actual, period) / period)
}

fn rmse(predictions: &[f64], actual: &[f64], period: f64) -> f64 {
    let ss: f64 = predictions
        .iter()
        .zip(actual)
        .map(|(&p, &a)| deviation(p, a, period).powi(2))
        .sum();
    (ss / actual.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetNrmse {
    pub p_phi: f64,
    pub p_l: f64,
    pub p_psi: f64,
}

/// Per-target NRMSE of point predictions against truths.
pub fn target_nrmse(points: &[[f64; 3]], truths: &[[f64; 3]]) -> Result<TargetNrmse> {
    let col = |v: &[[f64; 3]], d: usize| -> Vec<f64> { v.iter().map(|p| p[d]).collect() };
    Ok(TargetNrmse {
        p_phi: circular_nrmse(&col(points, 0), &col(truths, 0), TAU)?,
        p_l: nrmse(&col(points, 1), &col(truths, 1))?,
        p_psi: circular_nrmse(&col(points, 2), &col(truths, 2), PI)?,
    })
}

/// NRMSE of posterior means over a set of labelled predictions.
pub fn prediction_nrmse(predictions: &[PosteriorPrediction]) -> Result<TargetNrmse> {
    let mut points = Vec::with_capacity(predictions.len());
    let mut truths = Vec::with_capacity(predictions.len());
    for p in predictions {
        let truth = p
            .truth
            .ok_or_else(|| Error::InvalidArgument("prediction has no true label".into()))?;
        points.push(p.summary.mean);
        truths.push(truth);
    }
    target_nrmse(&points, &truths)
}

/// NRMSE of always predicting the (circular) mean of `train` targets.
pub fn constant_mean_nrmse(train: &[[f64; 3]], test: &[[f64; 3]]) -> Result<TargetNrmse> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training targets".into()));
    }
    let mean: [f64; 3] = std::array::from_fn(|d| {
        let column: Vec<f64> = train.iter().map(|t| t[d]).collect();
        target_mean(&column, TARGET_PERIODS[d])
    });
    target_nrmse(&vec![mean; test.len()], test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_samples: usize,
    pub window: usize,
    pub train: Option<TargetNrmse>,
    pub test: TargetNrmse,
    pub constant_mean_baseline: Option<TargetNrmse>,
    pub angular_denominator: String,
}

/// One labelled test case for export.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub id: String,
    pub prediction: PosteriorPrediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub sample: usize,
    pub window_start: usize,
    pub pred_phi: f64,
    pub pred_l: f64,
    pub pred_psi: f64,
    pub true_phi: f64,
    pub true_l: f64,
    pub true_psi: f64,
}

fn case_rows(p: &PosteriorPrediction) -> Result<Vec<CaseRow>> {
    let t = p
        .truth
        .ok_or_else(|| Error::InvalidArgument("cannot export a case without a true label".into()))?;
    Ok(p.samples
        .iter()
        .map(|s| CaseRow {
            sample: s.index,
            window_start: s.window_start,
            pred_phi: s.prediction[0],
            pred_l: s.prediction[1],
            pred_psi: s.prediction[2],
            true_phi: t[0],
            true_l: t[1],
            true_psi: t[2],
        })
        .collect())
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One CSV per case (`{id}.csv`) and `summary.json` under `dir`. Nothing is
/// written unless every case can be serialized.
pub fn export_results(dir: &Path, cases: &[CaseResult], summary: &EvalSummary) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no predictions to export".into()));
    }
    let mut files = Vec::with_capacity(cases.len() + 1);
    for case in cases {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in case_rows(&case.prediction)? {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        files.push((dir.join(format!("{}.csv", case.id)), bytes));
    }
    let mut json = serde_json::to_vec_pretty(summary)?;
    json.push(b'\n');
    files.push((dir.join("summary.json"), json));
    fs::create_dir_all(dir)?;
    for (path, bytes) in files {
        write_atomic(&path, &bytes)?;
    }
    Ok(())
}

pub fn read_case_csv(path: &Path) -> Result<Vec<CaseRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
