//! Evaluation metrics: ranking metrics for classification, overlap metrics
//! for segmentation, and wall-clock inference timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Float;

/// Area under the ROC curve via the Mann-Whitney statistic with midranks,
/// so ties contribute half credit.
pub fn auroc<S: Float>(scores: &[S], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "auroc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied entries share the midrank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve.
///
/// Operating points sit after each group of tied scores that contains a
/// positive; the curve is anchored at recall zero with the first point's
/// precision and integrated with the trapezoid rule. Constant scores
/// therefore give the positive prevalence and a perfect ranking gives 1.
pub fn auprc<S: Float>(scores: &[S], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(Error::Degenerate("auprc needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..=j].iter().filter(|&&idx| labels[idx]).count();
        seen += j - i + 1;
        tp += group_pos;
        if group_pos > 0 {
            let recall = tp as f64 / total_pos as f64;
            let precision = tp as f64 / seen as f64;
            points.push((recall, precision));
        }
        i = j + 1;
    }
    let mut area = 0.0;
    let mut prev = (0.0, points[0].1);
    for &(r, p) in &points {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    Ok(area)
}

/// Dice and Jaccard overlap of two boolean masks. Two empty masks count as
/// a perfect match.
pub fn dice_jaccard(pred: &[bool], truth: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            expected: truth.len().to_string(),
            got: pred.len().to_string(),
        });
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * inter as f64 / (a + b) as f64;
    let union = a + b - inter;
    let jaccard = inter as f64 / union as f64;
    Ok((dice, jaccard))
}

/// Wall-clock statistics over repeated runs of `f`, in milliseconds.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct TimingStats {
    pub runs: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Time `f` over `runs` repetitions after `warmup` unmeasured calls.
pub fn time_inference<F: FnMut()>(mut f: F, warmup: usize, runs: usize) -> Result<TimingStats> {
    if runs == 0 {
        return Err(Error::Config("timing needs at least one measured run".into()));
    }
    for _ in 0..warmup {
        f();
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f();
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / runs as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / runs as f64;
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(0.0f64, f64::max);
    Ok(TimingStats {
        runs,
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: min,
        max_ms: max,
    })
}

fn check_lengths<S, T>(scores: &[S], labels: &[T]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: labels.len().to_string(),
            got: scores.len().to_string(),
        });
    }
    if scores.is_empty() {
        return Err(Error::Degenerate("empty score list".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn auroc_hand_value() {
        let scores = [0.1f64, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        assert_abs_diff_eq!(auroc(&scores, &labels).unwrap(), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn auroc_ties_get_half_credit() {
        let scores = [0.5f64, 0.5];
        let labels = [false, true];
        assert_abs_diff_eq!(auroc(&scores, &labels).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn auroc_perfect_and_inverted() {
        let scores = [0.1f32, 0.2, 0.8, 0.9];
        let labels = [false, false, true, true];
        assert_abs_diff_eq!(auroc(&scores, &labels).unwrap(), 1.0, epsilon = 1e-15);
        let labels = [true, true, false, false];
        assert_abs_diff_eq!(auroc(&scores, &labels).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn auroc_rejects_single_class() {
        let scores = [0.1f64, 0.2];
        assert!(auroc(&scores, &[true, true]).is_err());
        assert!(auroc(&scores, &[false, false]).is_err());
    }

    #[test]
    fn auprc_hand_value() {
        let scores = [0.9f64, 0.8, 0.7];
        let labels = [true, false, true];
        assert_abs_diff_eq!(auprc(&scores, &labels).unwrap(), 11.0 / 12.0, epsilon = 1e-15);
    }

    #[test]
    fn auprc_constant_scores_give_prevalence() {
        let scores = [0.4f64; 10];
        let mut labels = [false; 10];
        labels[0] = true;
        labels[5] = true;
        labels[7] = true;
        assert_abs_diff_eq!(auprc(&scores, &labels).unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn auprc_perfect_ranking_is_one() {
        let scores = [0.9f64, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_abs_diff_eq!(auprc(&scores, &labels).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dice_jaccard_hand_values() {
        let pred = [true, true, false, false];
        let truth = [true, false, true, false];
        let (d, j) = dice_jaccard(&pred, &truth).unwrap();
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(j, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d, 2.0 * j / (1.0 + j), epsilon = 1e-15);
        let (d, j) = dice_jaccard(&[false; 3], &[false; 3]).unwrap();
        assert_eq!((d, j), (1.0, 1.0));
    }

    #[test]
    fn timing_reports_positive_durations() {
        let stats = time_inference(
            || {
                std::hint::black_box((0..1000).sum::<u64>());
            },
            2,
            5,
        )
        .unwrap();
        assert_eq!(stats.runs, 5);
        assert!(stats.mean_ms >= 0.0);
        assert!(stats.min_ms <= stats.mean_ms && stats.mean_ms <= stats.max_ms);
    }
}
