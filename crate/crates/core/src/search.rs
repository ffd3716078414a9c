//! Cutoff searches: the hierarchical block-then-layer search, incremental
//! layer-wise selection, and the low-cost correlation-overlap detector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HeadSpec, TruncationPoint};
use crate::graph::LayerGraph;
use crate::nn::Model;
use crate::scalar::Float;
use crate::surgery::{build_ftl, build_ttl, lwft_groups};
use crate::svcca::{correlation_report, ActivationMatrix, SvccaOptions};
use crate::training::{
    extract_activations, finetune, DataSplit, Dataset, ExperimentRecord, TrainConfig,
};

/// Scores and outcome of the hierarchical cutoff search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    /// (block-boundary cutoff, validation AUPRC), ascending by depth.
    pub stage1_scores: Vec<(usize, f64)>,
    /// (refined cutoff, validation AUPRC) inside the winning neighborhood.
    pub stage2_scores: Vec<(usize, f64)>,
    pub chosen: TruncationPoint,
    pub total_trainings: usize,
    /// Candidates whose evaluation failed, with the failure text.
    pub skipped: Vec<(usize, String)>,
}

/// Largest score with ties resolved to the smallest cutoff; assumes the
/// slice is ascending by cutoff.
fn argmax(scores: &[(usize, f64)]) -> Option<(usize, f64)> {
    scores
        .iter()
        .copied()
        .reduce(|best, next| if next.1 > best.1 { next } else { best })
}

/// Two-stage cutoff search: score every block boundary, then every valid
/// cutoff strictly between the boundaries adjacent to the winner. The
/// refinement replaces the stage-1 winner only on a strict improvement, so
/// ties always resolve to the shallower cutoff. `eval_fn` maps a cutoff to a
/// validation AUPRC; failures skip that candidate.
pub fn two_stage_search(
    graph: &LayerGraph,
    mut eval_fn: impl FnMut(usize) -> Result<f64>,
) -> Result<SearchResult> {
    let points = graph.enumerate_truncation_points();
    let boundaries: Vec<usize> = graph
        .blocks
        .iter()
        .copied()
        .filter(|&b| graph.is_valid_cutoff(b))
        .collect();
    if boundaries.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut total = 0;
    let mut skipped = Vec::new();
    let mut stage1 = Vec::new();
    for &b in &boundaries {
        total += 1;
        match eval_fn(b) {
            Ok(score) => stage1.push((b, score)),
            Err(e) => skipped.push((b, e.to_string())),
        }
    }
    let Some((winner, winner_score)) = argmax(&stage1) else {
        return Err(Error::NoCandidates);
    };
    let pos = boundaries.iter().position(|&b| b == winner).unwrap();
    let lo = if pos == 0 { 0 } else { boundaries[pos - 1] };
    let hi = boundaries
        .get(pos + 1)
        .copied()
        .unwrap_or(graph.len() + 1);
    let mut stage2 = Vec::new();
    for p in &points {
        let k = p.index;
        if k > lo && k < hi && !boundaries.contains(&k) {
            total += 1;
            match eval_fn(k) {
                Ok(score) => stage2.push((k, score)),
                Err(e) => skipped.push((k, e.to_string())),
            }
        }
    }
    let mut best = (winner, winner_score);
    if let Some(refined) = argmax(&stage2) {
        if refined.1 > best.1 {
            best = refined;
        }
    }
    let chosen = points
        .iter()
        .find(|p| p.index == best.0)
        .cloned()
        .ok_or(Error::NoCandidates)?;
    Ok(SearchResult {
        stage1_scores: stage1,
        stage2_scores: stage2,
        chosen,
        total_trainings: total,
        skipped,
    })
}

/// Stop rule for incremental layer-wise unfreezing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopRule {
    /// Gains at or below this level don't count as improvement.
    pub min_improve: f64,
    /// Stop after this many consecutive non-improving increments.
    pub patience: usize,
    /// Stop as soon as a score reaches this level, if set.
    pub target: Option<f64>,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            min_improve: 0.002,
            patience: 2,
            target: None,
        }
    }
}

/// Trace of the incremental unfreeze search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementalResult {
    pub chosen_k: usize,
    pub trace: Vec<(usize, f64)>,
}

/// Unfreeze one more layer group at a time. `eval_fn(k)` must finetune the
/// top `k` layers starting from the original pretrained weights; the walk
/// stops when the rule fires or every group is unfrozen, and the best-seen k
/// wins (ties to the smallest).
pub fn lwft_incremental(
    graph: &LayerGraph,
    mut eval_fn: impl FnMut(usize) -> Result<f64>,
    rule: &StopRule,
) -> Result<IncrementalResult> {
    let max_k = lwft_groups(graph).len() + 1;
    let mut trace = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut chosen_k = 0;
    let mut stale = 0;
    for k in 1..=max_k {
        let score = eval_fn(k)?;
        trace.push((k, score));
        if score > best + rule.min_improve {
            stale = 0;
        } else {
            stale += 1;
        }
        if score > best {
            best = score;
            chosen_k = k;
        }
        if rule.target.is_some_and(|t| score >= t) {
            break;
        }
        if stale >= rule.patience {
            break;
        }
    }
    Ok(IncrementalResult { chosen_k, trace })
}

/// Knobs of the correlation-overlap detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Overlap threshold: a candidate whose curve-to-baseline gap is at or
    /// below it counts as re-learned.
    pub tau: f64,
    pub svcca: SvccaOptions,
    pub baseline_reps: usize,
    pub baseline_seed: u64,
    /// Probe images per activation matrix.
    pub probe: usize,
    /// Extraction batch size.
    pub batch: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            tau: 0.05,
            svcca: SvccaOptions::default(),
            baseline_reps: 5,
            baseline_seed: 0,
            probe: 128,
            batch: 32,
        }
    }
}

/// Outcome of the correlation-overlap detector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionResult {
    /// (cutoff index, auc_gap), ascending by depth.
    pub gaps: Vec<(usize, f64)>,
    /// (cutoff index, feature channels): deep coefficient rises can reflect
    /// dimensionality rather than reuse, so the report keeps the dimensions
    /// visible.
    pub dims: Vec<(usize, usize)>,
    pub tau: f64,
    pub detected: TruncationPoint,
    pub fallback_used: bool,
    /// Finetuning runs spent; the full pipeline always spends exactly 2.
    pub finetunes: usize,
    /// Record of the confirming truncated finetune, when one ran.
    pub confirm: Option<ExperimentRecord>,
}

/// Index into `gaps` of the detected cutoff: the last candidate before the
/// gap first dips to `tau` or below, i.e. the deepest layer whose features
/// the adapted model still reuses. Overlap at the very first candidate
/// detects that candidate; no overlap anywhere falls back to the deepest.
pub fn pick_cutoff(gaps: &[f64], tau: f64) -> (usize, bool) {
    match gaps.iter().position(|&g| g <= tau) {
        Some(0) => (0, false),
        Some(i) => (i - 1, false),
        None => (gaps.len() - 1, true),
    }
}

/// The detection core: per-candidate overlap gaps from paired before/after
/// activation matrices, then the cutoff pick.
pub fn detect_from_activations<S: Float>(
    before: &[ActivationMatrix<S>],
    after: &[ActivationMatrix<S>],
    points: &[TruncationPoint],
    det: &DetectorConfig,
) -> Result<DetectionResult> {
    if before.len() != after.len() || before.len() != points.len() || points.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut gaps = Vec::with_capacity(points.len());
    let mut dims = Vec::with_capacity(points.len());
    for ((b, a), p) in before.iter().zip(after).zip(points) {
        let report = correlation_report(
            &b.data,
            &a.data,
            &det.svcca,
            det.baseline_reps,
            det.baseline_seed,
        )?;
        gaps.push((p.index, report.auc_gap));
        dims.push((p.index, b.cols()));
    }
    let raw: Vec<f64> = gaps.iter().map(|g| g.1).collect();
    let (idx, fallback_used) = pick_cutoff(&raw, det.tau);
    Ok(DetectionResult {
        gaps,
        dims,
        tau: det.tau,
        detected: points[idx].clone(),
        fallback_used,
        finetunes: 0,
        confirm: None,
    })
}

/// The two finetuning runs the detector spends: one full adaptation pass
/// that returns the adapted model, then one truncated run at the detected
/// point.
pub trait FinetuneRunner<S: Float> {
    fn adapt(&mut self, pretrained: &Model<S>) -> Result<Model<S>>;
    fn confirm(&mut self, pretrained: &Model<S>, cutoff: usize) -> Result<ExperimentRecord>;

    /// Feature matrices of `model` at each cutoff in `points`. The default
    /// extracts raw activations; override to pool, align resolutions, or
    /// substitute constructed matrices in correlation fixtures.
    fn probe(
        &mut self,
        model: &mut Model<S>,
        points: &[usize],
        data: &Dataset<S>,
        indices: &[usize],
        batch: usize,
    ) -> Result<Vec<ActivationMatrix<S>>> {
        extract_activations(model, points, data, indices, batch, None)
    }
}

/// Finetune-backed runner over one dataset and split.
pub struct TrainingRunner<'a, S: Float> {
    pub data: &'a Dataset<S>,
    pub split: &'a DataSplit,
    pub cfg: TrainConfig,
    pub head: HeadSpec,
    pub seed: u64,
}

impl<S: Float> FinetuneRunner<S> for TrainingRunner<'_, S> {
    fn adapt(&mut self, pretrained: &Model<S>) -> Result<Model<S>> {
        let plan = build_ftl(&pretrained.graph, self.head.clone())?;
        let mut model = Model::from_plan(&plan, self.seed)?;
        model.transfer_from(pretrained, plan.fresh_above);
        finetune(&mut model, self.data, self.split, &self.cfg, |_| {})?;
        Ok(model)
    }

    fn confirm(&mut self, pretrained: &Model<S>, cutoff: usize) -> Result<ExperimentRecord> {
        let plan = build_ttl(&pretrained.graph, cutoff, self.head.clone())?;
        let mut model = Model::from_plan(&plan, self.seed ^ 0x5bd1e995)?;
        model.transfer_from(pretrained, plan.fresh_above);
        finetune(&mut model, self.data, self.split, &self.cfg, |_| {})
    }
}

/// The low-cost detector: one full adaptation finetune, correlation gaps at
/// every valid cutoff, the pick, then one confirming truncated finetune:
/// two finetuning runs regardless of how many candidates exist.
pub fn detect_truncation<S: Float>(
    pretrained: &mut Model<S>,
    probe: &Dataset<S>,
    probe_indices: &[usize],
    runner: &mut impl FinetuneRunner<S>,
    det: &DetectorConfig,
) -> Result<DetectionResult> {
    let points = pretrained.graph.enumerate_truncation_points();
    if points.is_empty() {
        return Err(Error::NoCandidates);
    }
    let idx: Vec<usize> = points.iter().map(|p| p.index).collect();
    let take: Vec<usize> = probe_indices.iter().copied().take(det.probe).collect();
    let mut adapted = runner.adapt(pretrained)?;
    let before = runner.probe(pretrained, &idx, probe, &take, det.batch)?;
    let after = runner.probe(&mut adapted, &idx, probe, &take, det.batch)?;
    let mut result = detect_from_activations(&before, &after, &points, det)?;
    result.confirm = Some(runner.confirm(pretrained, result.detected.index)?);
    result.finetunes = 2;
    Ok(result)
}
