//! Evaluation and performance math: AUC, F-score, latency percentiles and
//! the analytic throughput models for the two real-time interfaces.

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC undefined: need at least one positive and one negative label")]
    AucUndefined,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("NaN score at index {0}")]
    NanScore(usize),
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

fn check_lengths(left: usize, right: usize) -> Result<(), MetricsError> {
    if left != right {
        return Err(MetricsError::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney rank statistic:
/// `(concordant + 0.5 * tied) / (P * N)` over all positive/negative pairs.
///
/// Ties are handled with mid-ranks. The numerator is carried as an integer
/// count of half-pairs, so the result is the exact ratio rounded once.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricsError::NanScore(i));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::AucUndefined);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN rejected above"));

    // Twice the rank sum of the positives; a tie group occupying 1-based
    // ranks lo..=hi gives each member rank (lo + hi) / 2.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let lo = start as u64 + 1;
        let hi = end as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        twice_rank_sum += (lo + hi) * pos_in_group;
        start = end;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(preds: &[bool], labels: &[bool]) -> Result<Self, MetricsError> {
        check_lengths(preds.len(), labels.len())?;
        let mut c = ConfusionCounts::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn f_score(&self) -> FScore {
        FScore {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f_score(preds: &[bool], labels: &[bool]) -> Result<FScore, MetricsError> {
    Ok(ConfusionCounts::from_predictions(preds, labels)?.f_score())
}

/// Nearest-rank percentiles: sort ascending and take the element at 1-based
/// index `ceil(p / 100 * N)` (index 1 for `p = 0`).
pub fn percentiles<T: Copy + PartialOrd>(values: &[T], ps: &[f64]) -> Result<Vec<T>, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    ps.iter()
        .map(|&p| {
            if !(0.0..=100.0).contains(&p) {
                return Err(MetricsError::BadPercentile(p));
            }
            let rank = (p * n as f64 / 100.0).ceil() as usize;
            Ok(sorted[rank.clamp(1, n) - 1])
        })
        .collect()
}

/// Recommend-interface capacity in messages per second:
/// `min(cores_msg / (T7 + T8), cores_infr / T10)`.
pub fn recommend_throughput_model(
    cores_msg: u32,
    cores_infr: u32,
    t7: Duration,
    t8: Duration,
    t10: Duration,
) -> Result<f64, MetricsError> {
    if cores_msg == 0 {
        return Err(MetricsError::NonPositive("cores_msg"));
    }
    if cores_infr == 0 {
        return Err(MetricsError::NonPositive("cores_infr"));
    }
    let msg_stage = (t7 + t8).as_secs_f64();
    if msg_stage == 0.0 {
        return Err(MetricsError::NonPositive("T7 + T8"));
    }
    let infr_stage = t10.as_secs_f64();
    if infr_stage == 0.0 {
        return Err(MetricsError::NonPositive("T10"));
    }
    Ok((cores_msg as f64 / msg_stage).min(cores_infr as f64 / infr_stage))
}

/// FeatureUpdate capacity in messages per second: `numcores / process_time`.
pub fn featureupdate_throughput_model(process_time: Duration, numcores: u32) -> Result<f64, MetricsError> {
    if numcores == 0 {
        return Err(MetricsError::NonPositive("numcores"));
    }
    let secs = process_time.as_secs_f64();
    if secs == 0.0 {
        return Err(MetricsError::NonPositive("process_time"));
    }
    Ok(numcores as f64 / secs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut half_pairs = 0u64;
        let mut pairs = 0u64;
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1;
                if si > sj {
                    half_pairs += 2;
                } else if si == sj {
                    half_pairs += 1;
                }
            }
        }
        half_pairs as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_small_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_undefined() {
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), Err(MetricsError::AucUndefined));
        assert_eq!(auc(&[0.1], &[false]), Err(MetricsError::AucUndefined));
    }

    #[test]
    fn auc_rejects_nan() {
        assert_eq!(
            auc(&[0.1, f64::NAN], &[true, false]),
            Err(MetricsError::NanScore(1))
        );
    }

    #[test]
    fn f_score_cases() {
        let perfect = f_score(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));

        // tp=1, fp=1, fn=1
        let half = f_score(&[true, true, false], &[true, false, true]).unwrap();
        assert_eq!((half.precision, half.recall, half.f1), (0.5, 0.5, 0.5));

        let none = f_score(&[false, false], &[true, false]).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f_score_length_checks() {
        assert!(f_score(&[], &[]).is_err());
        assert!(f_score(&[true], &[true, false]).is_err());
    }

    #[test]
    fn percentile_cases() {
        let ms: Vec<Duration> = (1..=10).map(Duration::from_millis).collect();
        assert_eq!(percentiles(&ms, &[90.0]).unwrap(), vec![Duration::from_millis(9)]);
        assert_eq!(percentiles(&[7.0], &[0.0, 50.0, 100.0]).unwrap(), vec![7.0; 3]);
        assert_eq!(percentiles(&[3u32; 5], &[1.0, 99.0]).unwrap(), vec![3, 3]);
        assert_eq!(percentiles::<f64>(&[], &[50.0]), Err(MetricsError::Empty));
        assert!(percentiles(&[1.0], &[101.0]).is_err());
    }

    #[test]
    fn recommend_model_table_values() {
        let rate = recommend_throughput_model(
            4,
            2,
            Duration::from_micros(14_000),
            Duration::from_micros(500),
            Duration::from_micros(10_520),
        )
        .unwrap();
        assert!((rate - 190.11).abs() / 190.11 < 1e-3, "{rate}");
        let msg_bound = 4.0 / 0.0145;
        assert!((msg_bound - 275.86_f64).abs() < 0.01);
    }

    #[test]
    fn recommend_model_symmetry_and_linearity() {
        let t = Duration::from_millis(10);
        let sym = recommend_throughput_model(2, 2, t / 2, t / 2, t).unwrap();
        assert!((sym - 200.0).abs() < 1e-9);
        let slow_infr = Duration::from_millis(50);
        let one = recommend_throughput_model(8, 1, t, t, slow_infr).unwrap();
        let two = recommend_throughput_model(8, 2, t, t, slow_infr).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-9);
        assert!(recommend_throughput_model(1, 1, Duration::ZERO, Duration::ZERO, t).is_err());
        assert!(recommend_throughput_model(1, 1, t, t, Duration::ZERO).is_err());
    }

    #[test]
    fn featureupdate_model_values() {
        let r = featureupdate_throughput_model(Duration::from_micros(7_300), 8).unwrap();
        assert!((r - 1095.9).abs() / 1095.9 < 1e-3, "{r}");
        assert_eq!(featureupdate_throughput_model(Duration::from_secs(1), 1).unwrap(), 1.0);
        let a = featureupdate_throughput_model(Duration::from_millis(3), 3).unwrap();
        let b = featureupdate_throughput_model(Duration::from_millis(3), 6).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-9);
        assert!(featureupdate_throughput_model(Duration::ZERO, 1).is_err());
    }

    fn labelled(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2..max).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..20).prop_map(|v| v as f64 / 10.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_equals_all_pairs((scores, labels) in labelled(60)) {
            let has_both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
            prop_assume!(has_both);
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }

        #[test]
        fn auc_is_rank_only((scores, labels) in labelled(60)) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&transformed, &labels).unwrap());
        }

        #[test]
        fn auc_reversal_complements(n in 2usize..80, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // distinct scores, so no ties
            let mut scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
            for i in (1..n).rev() {
                scores.swap(i, rng.gen_range(0..=i));
            }
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let reversed: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = auc(&scores, &labels).unwrap() + auc(&reversed, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn percentile_monotone_and_max(values in prop::collection::vec(0u32..1000, 1..200)) {
            let ps: Vec<f64> = (0..=100).map(f64::from).collect();
            let out = percentiles(&values, &ps).unwrap();
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*out.last().unwrap(), *values.iter().max().unwrap());
        }
    }
}
