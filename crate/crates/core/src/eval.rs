//! Counting metrics and evaluation reports.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{CountingModel, PreparedSample};
use crate::tensor::{pairwise_sum, Tensor};

/// Mean absolute error and root mean squared error of `(predicted, true)`
/// pairs. Terms are sorted before a pairwise sum, so the result does not
/// depend on sample order.
pub fn count_errors(pairs: &[(f64, f64)]) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let n = pairs.len() as f64;
    let mut abs: Vec<f64> = pairs.iter().map(|(p, t)| (p - t).abs()).collect();
    let mut sq: Vec<f64> = pairs.iter().map(|(p, t)| (p - t) * (p - t)).collect();
    abs.sort_by(f64::total_cmp);
    sq.sort_by(f64::total_cmp);
    (pairwise_sum(&abs) / n, (pairwise_sum(&sq) / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleCount {
    pub predicted: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mae: f64,
    pub rmse: f64,
    pub samples: Vec<SampleCount>,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn from_pairs(split: impl Into<String>, pairs: &[(f64, f64)], wall_clock_secs: f64) -> Self {
        let (mae, rmse) = count_errors(pairs);
        let report = EvalReport {
            split: split.into(),
            mae,
            rmse,
            samples: pairs
                .iter()
                .map(|&(predicted, truth)| SampleCount { predicted, truth })
                .collect(),
            wall_clock_secs,
        };
        // sqrt(mean(e^2)) >= mean(|e|); the slack covers rounding.
        assert!(
            report.rmse >= report.mae * (1.0 - 1e-12),
            "RMSE {} below MAE {}",
            report.rmse,
            report.mae
        );
        report
    }

    /// Equality of everything except the timing.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        self.split == other.split
            && self.mae.to_bits() == other.mae.to_bits()
            && self.rmse.to_bits() == other.rmse.to_bits()
            && self.samples == other.samples
    }
}

/// Evaluates on already prepared samples.
pub fn evaluate_prepared(model: &CountingModel, data: &[PreparedSample], split: &str) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Input(format!("the {split} split is empty")));
    }
    let start = Instant::now();
    let pairs = data
        .iter()
        .map(|p| Ok((model.predict_prepared(p, false)?.count, p.true_count)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(split, &pairs, start.elapsed().as_secs_f64()))
}

pub fn evaluate(model: &CountingModel, manifest: &DatasetManifest, split: Split) -> Result<EvalReport> {
    let data = crate::train::prepare_split(model, manifest, split)?;
    evaluate_prepared(model, &data, &split.to_string())
}

/// Baseline that always predicts the mean training count.
pub fn constant_predictor_report(train_counts: &[f64], eval_counts: &[f64], split: &str) -> EvalReport {
    let mean = pairwise_sum(train_counts) / train_counts.len().max(1) as f64;
    let pairs: Vec<(f64, f64)> = eval_counts.iter().map(|&t| (mean, t)).collect();
    EvalReport::from_pairs(split, &pairs, 0.0)
}

/// Mean correlation at object centers, split by targets and distractors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionScore {
    pub target_mean: f64,
    pub distractor_mean: f64,
}

impl SuppressionScore {
    pub fn suppressed(&self) -> bool {
        self.distractor_mean < self.target_mean
    }
}

/// Mean of a `[K,H,W]` correlation stack at the feature cells containing
/// each center (image coordinates), averaged over exemplars.
pub fn mean_at_centers(correlation: &Tensor, centers: &[(f64, f64)], image_hw: (usize, usize)) -> f64 {
    let (k, h, w) = (correlation.shape()[0], correlation.shape()[1], correlation.shape()[2]);
    let values: Vec<f64> = centers
        .iter()
        .flat_map(|&(r, c)| {
            let y = ((r * h as f64 / image_hw.0 as f64) as usize).min(h - 1);
            let x = ((c * w as f64 / image_hw.1 as f64) as usize).min(w - 1);
            (0..k).map(move |e| (e, y, x))
        })
        .map(|(e, y, x)| correlation.get(&[e, y, x]))
        .collect();
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(&values) / values.len() as f64
}

/// Compares the final-iteration correlation at target and distractor
/// centers.
pub fn suppression_score(
    model: &CountingModel,
    prepared: &PreparedSample,
    targets: &[(f64, f64)],
    distractors: &[(f64, f64)],
) -> Result<SuppressionScore> {
    let a_n = model.final_correlation(prepared)?;
    let size = model.config().backbone.image_size;
    Ok(SuppressionScore {
        target_mean: mean_at_centers(&a_n, targets, (size, size)),
        distractor_mean: mean_at_centers(&a_n, distractors, (size, size)),
    })
}
