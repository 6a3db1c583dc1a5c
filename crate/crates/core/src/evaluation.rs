//! Micro-F1, global threshold calibration and multi-run aggregation.

use serde::{Deserialize, Serialize};

use crate::data::Clip;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::training::ensemble_predict;

/// Counts pooled over every clip–class pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn tally(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut c = ConfusionCounts::default();
        for (p, l) in predictions.iter().zip(labels) {
            match (*p != 0, *l != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    /// `2TP / (2TP + FP + FN)`, and 1 when all three are zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

fn binary(m: &Tensor) -> Result<Vec<u8>> {
    m.data()
        .iter()
        .map(|v| match *v {
            0.0 => Ok(0),
            1.0 => Ok(1),
            other => Err(Error::data(format!("expected a 0/1 matrix, found {other}"))),
        })
        .collect()
}

/// Micro-averaged F1 of two binary `B × C` matrices.
pub fn micro_f1(predictions: &Tensor, labels: &Tensor) -> Result<f64> {
    if predictions.shape() != labels.shape() {
        return Err(Error::dim(format!(
            "predictions {:?} vs labels {:?}",
            predictions.shape(),
            labels.shape()
        )));
    }
    Ok(ConfusionCounts::tally(&binary(predictions)?, &binary(labels)?)?.f1())
}

/// Marks every probability at or above `threshold` as positive.
pub fn apply_threshold(probs: &Tensor, threshold: f64) -> Tensor {
    probs.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

/// `{0.01, 0.02, …, 0.99}`.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|k| f64::from(k) / 100.0).collect()
}

/// Grid threshold with the best micro-F1; ties go to the lowest threshold.
pub fn calibrate_threshold(val_probs: &Tensor, val_labels: &Tensor, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::param("threshold grid must be non-empty and inside (0, 1)"));
    }
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for &t in grid {
        let f1 = micro_f1(&apply_threshold(val_probs, t), val_labels)?;
        if f1 > best.0 || (f1 == best.0 && t < best.1) {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub micro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl EvalReport {
    /// Scores already-computed clip probabilities.
    pub fn from_probs(probs: &Tensor, labels: &Tensor, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::param(format!("threshold {threshold} outside (0, 1)")));
        }
        if probs.shape() != labels.shape() {
            return Err(Error::dim(format!(
                "probs {:?} vs labels {:?}",
                probs.shape(),
                labels.shape()
            )));
        }
        let pred = binary(&apply_threshold(probs, threshold))?;
        let lab = binary(labels)?;
        let counts = ConfusionCounts::tally(&pred, &lab)?;
        let (b, c) = probs.matrix_dims();
        let per_class_f1 = (0..c)
            .map(|k| {
                let col = |m: &[u8]| (0..b).map(|i| m[i * c + k]).collect::<Vec<_>>();
                ConfusionCounts::tally(&col(&pred), &col(&lab)).map(|cc| cc.f1())
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            threshold,
            micro_f1: counts.f1(),
            per_class_f1,
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable report")
    }
}

/// `B × C` label matrix of a clip list.
pub fn label_matrix(clips: &[Clip]) -> Result<Tensor> {
    let c = clips.first().map_or(0, |cl| cl.labels.len());
    let data = clips
        .iter()
        .flat_map(|cl| cl.labels.iter().map(|l| f64::from(*l)))
        .collect();
    Tensor::new(&[clips.len(), c], data)
}

/// Ensemble prediction, thresholding and scoring of a clip split.
pub fn evaluate(snapshots: &[&ParamSet], config: &ModelConfig, clips: &[Clip], threshold: f64) -> Result<EvalReport> {
    let probs = ensemble_predict(snapshots, config, clips)?;
    EvalReport::from_probs(&probs, &label_matrix(clips)?, threshold)
}

/// Arithmetic mean and sample standard deviation (0 for a single score).
pub fn multi_run_mean(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::contract("no scores to aggregate"));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
