//! Weighted blend of the tree and LSTM probabilities, with grid calibration
//! of the blend weight (maximising AUC) and of the offer threshold
//! (maximising F-score).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, ConfusionCounts, MetricsError};

pub const DEFAULT_WEIGHT_STEP: f64 = 0.01;
pub const DEFAULT_THRESHOLD_STEP: f64 = 0.001;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("grid step {0} must be in (0, 1] and divide 1 evenly")]
    BadGridStep(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Calibrated blend weight and threshold, as persisted in the snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    /// Weight on the tree-model probability.
    pub w: f64,
    pub tau: f64,
    pub grid_step_w: f64,
    pub grid_step_tau: f64,
    /// `None` when calibration was skipped.
    pub auc: Option<f64>,
    pub fscore: Option<f64>,
}

impl Default for EnsembleModel {
    fn default() -> Self {
        Self {
            w: 0.5,
            tau: 0.5,
            grid_step_w: DEFAULT_WEIGHT_STEP,
            grid_step_tau: DEFAULT_THRESHOLD_STEP,
            auc: None,
            fscore: None,
        }
    }
}

impl EnsembleModel {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        unit("w", self.w)?;
        unit("tau", self.tau)?;
        Ok(())
    }

    pub fn score(&self, p_gbdt: f64, p_lstm: f64) -> Result<f64, EnsembleError> {
        ensemble_score(p_gbdt, p_lstm, self.w)
    }

    pub fn decide(&self, score: f64) -> bool {
        decide(score, self.tau)
    }
}

fn unit(name: &'static str, value: f64) -> Result<f64, EnsembleError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(EnsembleError::OutOfRange { name, value })
    }
}

/// `w * p_gbdt + (1 - w) * p_lstm`, clamped to the inputs' range so rounding
/// can never leave `[min, max]`.
pub fn ensemble_score(p_gbdt: f64, p_lstm: f64, w: f64) -> Result<f64, EnsembleError> {
    unit("p_gbdt", p_gbdt)?;
    unit("p_lstm", p_lstm)?;
    unit("w", w)?;
    let blended = w * p_gbdt + (1.0 - w) * p_lstm;
    Ok(blended.clamp(p_gbdt.min(p_lstm), p_gbdt.max(p_lstm)))
}

/// Offer iff `score >= tau`.
pub fn decide(score: f64, tau: f64) -> bool {
    score >= tau
}

/// Grid points `k / K` for `k = 0..=K`, where `K = 1 / step`.
pub fn grid(step: f64) -> Result<Vec<f64>, EnsembleError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(EnsembleError::BadGridStep(step));
    }
    let k = (1.0 / step).round();
    if (k * step - 1.0).abs() > 1e-9 {
        return Err(EnsembleError::BadGridStep(step));
    }
    let k = k as u64;
    Ok((0..=k).map(|i| i as f64 / k as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightCalibration {
    pub w: f64,
    pub auc: f64,
}

/// Exhaustive search over the weight grid for the blend with the highest
/// AUC. Ties go to the smallest weight.
pub fn calibrate_weight(
    p_gbdt: &[f64],
    p_lstm: &[f64],
    labels: &[bool],
    grid_step: f64,
) -> Result<WeightCalibration, EnsembleError> {
    if p_gbdt.len() != p_lstm.len() || p_gbdt.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: p_gbdt.len(),
            right: p_lstm.len().max(labels.len()),
        }
        .into());
    }
    let weights = grid(grid_step)?;
    let mut blended = vec![0.0; p_gbdt.len()];
    let mut best: Option<WeightCalibration> = None;
    for w in weights {
        for (out, (&g, &l)) in blended.iter_mut().zip(p_gbdt.iter().zip(p_lstm)) {
            *out = ensemble_score(g, l, w)?;
        }
        let a = metrics::auc(&blended, labels)?;
        if best.map_or(true, |b| a > b.auc) {
            best = Some(WeightCalibration { w, auc: a });
        }
    }
    Ok(best.expect("grid is never empty"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdCalibration {
    pub tau: f64,
    pub fscore: f64,
}

/// Exhaustive search over the threshold grid for the highest F-score of the
/// rule `score >= tau`. Ties go to the largest threshold.
pub fn calibrate_threshold(
    scores: &[f64],
    labels: &[bool],
    grid_step: f64,
) -> Result<ThresholdCalibration, EnsembleError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        }
        .into());
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricsError::NanScore(i).into());
    }
    let taus = grid(grid_step)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN rejected above"));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    // positives_from[i] = number of positive labels among sorted[i..]
    let mut positives_from = vec![0u64; sorted.len() + 1];
    for i in (0..sorted.len()).rev() {
        positives_from[i] = positives_from[i + 1] + u64::from(labels[order[i]]);
    }
    let total_pos = positives_from[0];
    let n = sorted.len() as u64;

    let mut best = ThresholdCalibration {
        tau: f64::NAN,
        fscore: f64::NEG_INFINITY,
    };
    for tau in taus {
        let first = sorted.partition_point(|&s| !decide(s, tau));
        let predicted = n - first as u64;
        let tp = positives_from[first];
        let counts = ConfusionCounts {
            tp,
            fp: predicted - tp,
            fn_: total_pos - tp,
            tn: n - predicted - (total_pos - tp),
        };
        let f = counts.f1();
        if f >= best.fscore {
            best = ThresholdCalibration { tau, fscore: f };
        }
    }
    Ok(best)
}

/// Weight first, then the threshold on the blended scores.
pub fn calibrate(
    p_gbdt: &[f64],
    p_lstm: &[f64],
    labels: &[bool],
    grid_step_w: f64,
    grid_step_tau: f64,
) -> Result<EnsembleModel, EnsembleError> {
    let wc = calibrate_weight(p_gbdt, p_lstm, labels, grid_step_w)?;
    let blended = p_gbdt
        .iter()
        .zip(p_lstm)
        .map(|(&g, &l)| ensemble_score(g, l, wc.w))
        .collect::<Result<Vec<_>, _>>()?;
    let tc = calibrate_threshold(&blended, labels, grid_step_tau)?;
    Ok(EnsembleModel {
        w: wc.w,
        tau: tc.tau,
        grid_step_w,
        grid_step_tau,
        auc: Some(wc.auc),
        fscore: Some(tc.fscore),
    })
}
