//! Online cluster scoring and thresholded retrieval.
//!
//! A query is scored against a level's centroids with a size-weighted
//! softmax: `S_i = exp(q·C_i) / sum_j N_j exp(q·C_j)`, where `N_j` counts the
//! keys under cluster j, so `S_i` estimates the average attention score a
//! member key of cluster i would receive. Clusters with `S_i` above a single
//! global threshold are retrieved. Hierarchical lookup scores a coarse level
//! first, prunes, expands survivors to their children, and rescores with the
//! denominator restricted to the surviving children.
//!
//! Thresholding never divides: a cluster passes iff
//! `exp(logit - m) > D * T`, with the running max `m` folded into both
//! sides. That makes the cached-state generation path and the plain path
//! agree decision-for-decision at any logit magnitude.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterIndex, HeadIndex, HierarchicalIndex};
use crate::error::{Error, Result};
use crate::store::KeyStore;
use crate::tensor::{dot, Matrix};

/// Retrieval settings shared by all lookup entry points.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LookupConfig {
    /// Global threshold applied at the finest level, in softmax-score units.
    pub threshold: f64,
    /// Thresholds for the coarse levels of a hierarchy, coarsest first; must
    /// have exactly one entry per non-finest level.
    pub level_thresholds: Vec<f64>,
    /// Scale logits by 1/sqrt(d), matching the attention kernel's scaling.
    pub scale_logits: bool,
    /// Number of trailing-position calibration queries to use.
    pub calib_window: usize,
    /// Fraction of keys calibration aims to exclude.
    pub target_sparsity: f64,
}

impl Default for LookupConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            level_thresholds: Vec::new(),
            scale_logits: true,
            calib_window: 100,
            target_sparsity: 0.9,
        }
    }
}

impl LookupConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(Error::Config(format!(
                "threshold {} must be finite and non-negative",
                self.threshold
            )));
        }
        if let Some(t) = self
            .level_thresholds
            .iter()
            .find(|t| !t.is_finite() || **t < 0.0)
        {
            return Err(Error::Config(format!(
                "level threshold {t} must be finite and non-negative"
            )));
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!(
                "target_sparsity {} outside [0, 1)",
                self.target_sparsity
            )));
        }
        if self.calib_window == 0 {
            return Err(Error::Config("calib_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-cluster scores with the key counts that weighted the denominator;
/// `sum_i weights[i] * scores[i] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub weights: Vec<u32>,
}

impl ScoreVector {
    /// The weighted total, equal to 1 up to rounding.
    pub fn weighted_sum(&self) -> f64 {
        self.scores
            .iter()
            .zip(&self.weights)
            .map(|(s, &w)| s * f64::from(w))
            .sum()
    }
}

/// Cached first-pass state for one generated token: running max `m`,
/// weighted denominator `d`, and per-cluster `exp(logit - m)`. Thresholding
/// reuses `cached` against `d * T` without recomputing any score.
#[derive(Debug, Clone)]
pub struct GenerationLookupState {
    pub m: f64,
    pub d: f64,
    pub cached: Vec<f64>,
}

/// Outcome of one selection for one (layer, head): the retrieved key
/// indices, per-finest-cluster decisions, and the number of query-centroid
/// plus query-key dot products the retrieval implies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionResult {
    /// Retrieved key indices, ascending, duplicate-free.
    pub selected: Vec<u32>,
    /// Decision per finest-level cluster.
    pub cluster_selected: Vec<bool>,
    /// Centroid comparisons performed plus one comparison per retrieved key.
    pub comparisons: u64,
}

impl SelectionResult {
    pub fn k(&self) -> usize {
        self.selected.len()
    }
}

fn check_dim(q: &[f32], level: &ClusterIndex) -> Result<()> {
    if q.len() != level.centroids.cols() {
        return Err(Error::Dimension(format!(
            "query dim {} != centroid dim {}",
            q.len(),
            level.centroids.cols()
        )));
    }
    Ok(())
}

fn scaled_logit(q: &[f32], centroid: &[f32], scale: bool) -> f64 {
    let l = dot(q, centroid);
    if scale {
        l / (q.len() as f64).sqrt()
    } else {
        l
    }
}

/// Size-weighted softmax over raw logits: `scores[i] = e_i / sum_j w_j e_j`
/// with max subtraction.
pub fn weighted_softmax(logits: &[f64], weights: &[u32]) -> ScoreVector {
    assert_eq!(logits.len(), weights.len());
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let d: f64 = exps
        .iter()
        .zip(weights)
        .map(|(&e, &w)| f64::from(w) * e)
        .sum();
    ScoreVector {
        scores: exps.iter().map(|&e| e / d).collect(),
        weights: weights.to_vec(),
    }
}

fn state_from_logits(logits: &[f64], weights: &[u32]) -> GenerationLookupState {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cached: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let d: f64 = cached
        .iter()
        .zip(weights)
        .map(|(&e, &w)| f64::from(w) * e)
        .sum();
    GenerationLookupState { m, d, cached }
}

/// Division-free threshold decisions: keep iff `exp(logit - m) > d * t`.
fn decisions(state: &GenerationLookupState, t: f64) -> Vec<bool> {
    let cut = state.d * t;
    state.cached.iter().map(|&e| e > cut).collect()
}

fn gather_selected(
    level: &ClusterIndex,
    keep: impl Iterator<Item = usize>,
) -> (Vec<u32>, Vec<bool>) {
    let mut cluster_selected = vec![false; level.num_clusters()];
    let mut selected = Vec::new();
    for j in keep {
        cluster_selected[j] = true;
        selected.extend_from_slice(&level.members[j]);
    }
    selected.sort_unstable();
    (selected, cluster_selected)
}

/// Scores every cluster of one level against `q` (full weighted
/// denominator).
pub fn score_clusters(q: &[f32], level: &ClusterIndex, cfg: &LookupConfig) -> Result<ScoreVector> {
    check_dim(q, level)?;
    let logits: Vec<f64> = level
        .centroids
        .iter_rows()
        .map(|c| scaled_logit(q, c, cfg.scale_logits))
        .collect();
    Ok(weighted_softmax(&logits, &level.key_weights))
}

/// Retrieves the members of every cluster whose score exceeds `t`.
pub fn select_single_level(
    q: &[f32],
    level: &ClusterIndex,
    t: f64,
    scale_logits: bool,
) -> Result<SelectionResult> {
    check_dim(q, level)?;
    let sv = score_clusters(
        q,
        level,
        &LookupConfig {
            scale_logits,
            ..Default::default()
        },
    )?;
    let keep = (0..sv.scores.len()).filter(|&i| sv.scores[i] > t);
    let (selected, cluster_selected) = gather_selected(level, keep);
    let comparisons = level.num_clusters() as u64 + selected.len() as u64;
    Ok(SelectionResult {
        selected,
        cluster_selected,
        comparisons,
    })
}

/// First pass of the generation path: one sweep over the centroids caching
/// `exp(logit - m)` and the weighted denominator.
pub fn generation_state(
    q: &[f32],
    level: &ClusterIndex,
    scale_logits: bool,
) -> Result<GenerationLookupState> {
    check_dim(q, level)?;
    let logits: Vec<f64> = level
        .centroids
        .iter_rows()
        .map(|c| scaled_logit(q, c, scale_logits))
        .collect();
    Ok(state_from_logits(&logits, &level.key_weights))
}

/// Second pass: compares the cached exponentials against `d * t`. Reusable
/// across thresholds without touching the centroids again.
pub fn select_from_state(
    state: &GenerationLookupState,
    level: &ClusterIndex,
    t: f64,
) -> SelectionResult {
    let keep = decisions(state, t);
    let (selected, cluster_selected) = gather_selected(level, (0..keep.len()).filter(|&i| keep[i]));
    let comparisons = level.num_clusters() as u64 + selected.len() as u64;
    SelectionResult {
        selected,
        cluster_selected,
        comparisons,
    }
}

/// Per-token selection for generation: identical decisions to
/// [`select_single_level`], but the normalized scores are never
/// materialized.
pub fn select_generation_singlepass(
    q: &[f32],
    level: &ClusterIndex,
    t: f64,
    scale_logits: bool,
) -> Result<SelectionResult> {
    let state = generation_state(q, level, scale_logits)?;
    Ok(select_from_state(&state, level, t))
}

/// Coarse-to-fine retrieval. Each level scores only the children of the
/// previous level's survivors, with the weighted denominator restricted to
/// those candidates; survivors of the finest level contribute their keys.
pub fn select_hierarchical(
    q: &[f32],
    head: &HeadIndex,
    cfg: &LookupConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    let levels = &head.levels;
    if levels.len() < 2 {
        return Err(Error::Config(format!(
            "hierarchical selection needs at least 2 levels, index has {}",
            levels.len()
        )));
    }
    if cfg.level_thresholds.len() != levels.len() - 1 {
        return Err(Error::Config(format!(
            "{} level thresholds for {} levels",
            cfg.level_thresholds.len(),
            levels.len()
        )));
    }

    let mut comparisons = 0u64;
    let mut candidates: Vec<u32> = (0..levels[0].num_clusters() as u32).collect();
    for (lv, level) in levels.iter().enumerate() {
        check_dim(q, level)?;
        let last = lv + 1 == levels.len();
        let logits: Vec<f64> = candidates
            .iter()
            .map(|&j| scaled_logit(q, level.centroids.row(j as usize), cfg.scale_logits))
            .collect();
        let weights: Vec<u32> = candidates
            .iter()
            .map(|&j| level.key_weights[j as usize])
            .collect();
        comparisons += candidates.len() as u64;

        let t = if last {
            cfg.threshold
        } else {
            cfg.level_thresholds[lv]
        };
        let keep = decisions(&state_from_logits(&logits, &weights), t);
        let survivors: Vec<u32> = candidates
            .iter()
            .zip(&keep)
            .filter_map(|(&j, &k)| k.then_some(j))
            .collect();

        if last {
            let (selected, cluster_selected) =
                gather_selected(level, survivors.iter().map(|&j| j as usize));
            comparisons += selected.len() as u64;
            return Ok(SelectionResult {
                selected,
                cluster_selected,
                comparisons,
            });
        }
        if survivors.is_empty() {
            return Ok(SelectionResult {
                selected: Vec::new(),
                cluster_selected: vec![false; levels.last().unwrap().num_clusters()],
                comparisons,
            });
        }
        let mut next: Vec<u32> = survivors
            .iter()
            .flat_map(|&j| level.members[j as usize].iter().copied())
            .collect();
        next.sort_unstable();
        candidates = next;
    }
    unreachable!("loop returns at the finest level");
}

/// Batch selection for prefill: per-cluster scores are averaged across all
/// query rows at each level before thresholding, so the whole batch shares
/// one retrieved set. A single-row batch reduces to the per-token paths.
pub fn select_prefill(
    queries: &Matrix,
    head: &HeadIndex,
    cfg: &LookupConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    if queries.rows() == 0 {
        return Err(Error::Config("prefill needs at least one query row".into()));
    }
    let levels = &head.levels;
    if cfg.level_thresholds.len() != levels.len() - 1 {
        return Err(Error::Config(format!(
            "{} level thresholds for {} levels",
            cfg.level_thresholds.len(),
            levels.len()
        )));
    }
    if queries.rows() == 1 {
        let q = queries.row(0);
        return if levels.len() == 1 {
            select_single_level(q, &levels[0], cfg.threshold, cfg.scale_logits)
        } else {
            select_hierarchical(q, head, cfg)
        };
    }

    let rows = queries.rows();
    let mut comparisons = 0u64;
    let mut candidates: Vec<u32> = (0..levels[0].num_clusters() as u32).collect();
    for (lv, level) in levels.iter().enumerate() {
        check_dim(queries.row(0), level)?;
        let last = lv + 1 == levels.len();
        let weights: Vec<u32> = candidates
            .iter()
            .map(|&j| level.key_weights[j as usize])
            .collect();

        let mut mean_scores = vec![0.0f64; candidates.len()];
        for r in 0..rows {
            let q = queries.row(r);
            let logits: Vec<f64> = candidates
                .iter()
                .map(|&j| scaled_logit(q, level.centroids.row(j as usize), cfg.scale_logits))
                .collect();
            let sv = weighted_softmax(&logits, &weights);
            for (acc, s) in mean_scores.iter_mut().zip(&sv.scores) {
                *acc += s;
            }
        }
        for s in &mut mean_scores {
            *s /= rows as f64;
        }
        comparisons += (rows * candidates.len()) as u64;

        let t = if last {
            cfg.threshold
        } else {
            cfg.level_thresholds[lv]
        };
        let survivors: Vec<u32> = candidates
            .iter()
            .zip(&mean_scores)
            .filter_map(|(&j, &s)| (s > t).then_some(j))
            .collect();

        if last {
            let (selected, cluster_selected) =
                gather_selected(level, survivors.iter().map(|&j| j as usize));
            comparisons += selected.len() as u64;
            return Ok(SelectionResult {
                selected,
                cluster_selected,
                comparisons,
            });
        }
        if survivors.is_empty() {
            return Ok(SelectionResult {
                selected: Vec::new(),
                cluster_selected: vec![false; levels.last().unwrap().num_clusters()],
                comparisons,
            });
        }
        let mut next: Vec<u32> = survivors
            .iter()
            .flat_map(|&j| level.members[j as usize].iter().copied())
            .collect();
        next.sort_unstable();
        candidates = next;
    }
    unreachable!("loop returns at the finest level");
}

/// Window-averaged scores for one level of every head, computed exactly the
/// way the prefill cascade computes them: levels above `level_idx` prune
/// with `coarse_thresholds`, and the target level's denominator is
/// restricted to the surviving candidates. Pruned clusters appear with
/// score 0 so quantiles stay relative to the total key weight. Returns
/// pooled (mean score, key weight) pairs in deterministic (head, cluster)
/// order.
fn pooled_level_scores(
    store: &KeyStore,
    index: &HierarchicalIndex,
    level_idx: usize,
    coarse_thresholds: &[f64],
    cfg: &LookupConfig,
) -> Result<Vec<(f64, u32)>> {
    if !store.has_calib_queries() {
        return Err(Error::Config(
            "store has no calibration queries; regenerate the tensor pair with a calib_queries tensor".into(),
        ));
    }
    if store.calib_window() < cfg.calib_window {
        return Err(Error::Config(format!(
            "store provides {} calibration queries, config wants {}",
            store.calib_window(),
            cfg.calib_window
        )));
    }
    if store.seq_len <= cfg.calib_window {
        return Err(Error::Config(format!(
            "calibration window {} must be smaller than the context length {}",
            cfg.calib_window, store.seq_len
        )));
    }
    if coarse_thresholds.len() < level_idx {
        return Err(Error::Config(format!(
            "level {level_idx} needs {level_idx} coarse thresholds, got {}",
            coarse_thresholds.len()
        )));
    }

    let per_head: Vec<Result<Vec<(f64, u32)>>> = (0..store.heads_total())
        .into_par_iter()
        .map(|h| {
            let levels = &index.heads[h].levels;
            let queries = store.calib_queries_flat(h).expect("checked above");
            let skip = queries.rows() - cfg.calib_window;
            let rows = cfg.calib_window;
            let target = &levels[level_idx];
            let zeros = || {
                target
                    .key_weights
                    .iter()
                    .map(|&w| (0.0, w))
                    .collect::<Vec<_>>()
            };

            let mut candidates: Vec<u32> = (0..levels[0].num_clusters() as u32).collect();
            for (lv, level) in levels.iter().enumerate().take(level_idx + 1) {
                let weights: Vec<u32> = candidates
                    .iter()
                    .map(|&j| level.key_weights[j as usize])
                    .collect();
                let mut mean_scores = vec![0.0f64; candidates.len()];
                for r in skip..skip + rows {
                    let q = queries.row(r);
                    let logits: Vec<f64> = candidates
                        .iter()
                        .map(|&j| {
                            scaled_logit(q, level.centroids.row(j as usize), cfg.scale_logits)
                        })
                        .collect();
                    let sv = weighted_softmax(&logits, &weights);
                    for (acc, s) in mean_scores.iter_mut().zip(&sv.scores) {
                        *acc += s;
                    }
                }
                for s in &mut mean_scores {
                    *s /= rows as f64;
                }

                if lv == level_idx {
                    let mut out = zeros();
                    for (&j, &s) in candidates.iter().zip(&mean_scores) {
                        out[j as usize] = (s, level.key_weights[j as usize]);
                    }
                    return Ok(out);
                }
                let survivors: Vec<u32> = candidates
                    .iter()
                    .zip(&mean_scores)
                    .filter_map(|(&j, &s)| (s > coarse_thresholds[lv]).then_some(j))
                    .collect();
                if survivors.is_empty() {
                    return Ok(zeros());
                }
                let mut next: Vec<u32> = survivors
                    .iter()
                    .flat_map(|&j| level.members[j as usize].iter().copied())
                    .collect();
                next.sort_unstable();
                candidates = next;
            }
            unreachable!("loop returns at level_idx");
        })
        .collect();

    let mut pooled = Vec::new();
    for head_scores in per_head {
        pooled.extend(head_scores?);
    }
    Ok(pooled)
}

/// Weighted quantile with midpoint tie-breaking: returns the threshold T
/// such that clusters with score strictly above T hold approximately
/// `keep_fraction` of the pooled key weight. T sits at the midpoint between
/// the two adjacent distinct scores straddling the cut (or at half the
/// minimum score when everything is kept).
fn weighted_quantile_threshold(pairs: &[(f64, u32)], keep_fraction: f64) -> f64 {
    let mut sorted: Vec<(f64, u32)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total: f64 = sorted.iter().map(|&(_, w)| f64::from(w)).sum();
    let target = keep_fraction * total;

    // walk distinct score groups from the top; place the cut on whichever
    // side of the straddling group lands closer to the target
    let mut cum = 0.0f64;
    let mut i = 0usize;
    while i < sorted.len() {
        let v = sorted[i].0;
        let mut group_w = 0.0f64;
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == v {
            group_w += f64::from(sorted[j].1);
            j += 1;
        }
        if cum + group_w >= target {
            let include = (cum + group_w - target) <= (target - cum);
            return if include {
                match sorted.get(j) {
                    Some(&(next, _)) => (v + next) / 2.0,
                    None => v / 2.0,
                }
            } else {
                // exclude the group: cut between it and the previous value
                match i.checked_sub(1) {
                    Some(p) => (sorted[p].0 + v) / 2.0,
                    None => v, // keep nothing above the maximum
                }
            };
        }
        cum += group_w;
        i = j;
    }
    // keep everything
    sorted.last().map_or(0.0, |&(v, _)| v / 2.0)
}

/// Chooses the single global fine-level threshold from the calibration
/// queries: per-head scores are averaged over the window, pooled across all
/// heads, and T is the weighted quantile retaining `1 - target_sparsity` of
/// the keys. For hierarchical indexes the coarse thresholds must already be
/// set in `cfg.level_thresholds` (see [`calibrate_level_thresholds`]) so
/// the pooled fine scores match what the cascade will actually compute.
pub fn calibrate_threshold(
    store: &KeyStore,
    index: &HierarchicalIndex,
    cfg: &LookupConfig,
) -> Result<f64> {
    cfg.validate()?;
    let fine = index.num_levels() - 1;
    if cfg.level_thresholds.len() != fine {
        return Err(Error::Config(format!(
            "index has {} coarse levels but cfg carries {} level thresholds; calibrate the coarse levels first",
            fine,
            cfg.level_thresholds.len()
        )));
    }
    let pooled = pooled_level_scores(store, index, fine, &cfg.level_thresholds, cfg)?;
    Ok(weighted_quantile_threshold(
        &pooled,
        1.0 - cfg.target_sparsity,
    ))
}

/// Chooses one threshold per coarse level, coarsest first, such that after
/// each level the surviving key fraction is `(1 - prune_fraction)^(level+1)`
/// of the total (each level prunes `prune_fraction` of what the previous
/// levels let through, measured on window-averaged scores).
pub fn calibrate_level_thresholds(
    store: &KeyStore,
    index: &HierarchicalIndex,
    cfg: &LookupConfig,
    prune_fraction: f64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(0.0..1.0).contains(&prune_fraction) {
        return Err(Error::Config(format!(
            "prune_fraction {prune_fraction} outside [0, 1)"
        )));
    }
    let coarse_levels = index.num_levels() - 1;
    let mut thresholds = Vec::with_capacity(coarse_levels);
    for lv in 0..coarse_levels {
        let pooled = pooled_level_scores(store, index, lv, &thresholds, cfg)?;
        let keep = (1.0 - prune_fraction).powi(lv as i32 + 1);
        thresholds.push(weighted_quantile_threshold(&pooled, keep));
    }
    Ok(thresholds)
}

/// KV-load accounting for one head's selection, relative to attending all
/// `seq_len` keys densely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub selected_keys: usize,
    pub centroid_count: usize,
    pub seq_len: usize,
    /// Fraction of key+value rows loaded.
    pub key_fraction: f64,
    /// Centroid loads at half weight (key-only vectors, no values).
    pub centroid_overhead: f64,
    /// `(selected_keys + centroid_count / 2) / seq_len`.
    pub budget: f64,
    pub comparisons: u64,
}

/// Computes the relative KV budget of a selection: retrieved keys count
/// full weight, centroids (loaded once per level, key-side only) count
/// half. The division happens once on integer-derived operands so round
/// fractions come out exact.
pub fn kv_budget(sel: &SelectionResult, centroid_count: usize, seq_len: usize) -> BudgetReport {
    let k = sel.selected.len();
    let l = seq_len as f64;
    BudgetReport {
        selected_keys: k,
        centroid_count,
        seq_len,
        key_fraction: k as f64 / l,
        centroid_overhead: centroid_count as f64 / 2.0 / l,
        budget: (k as f64 + centroid_count as f64 / 2.0) / l,
        comparisons: sel.comparisons,
    }
}

/// Planning estimate of the budget for a target sparsity and per-level
/// centroid fractions (approximate; realized budgets come from
/// [`kv_budget`]).
pub fn expected_budget(target_sparsity: f64, level_fractions: &[f64]) -> f64 {
    (1.0 - target_sparsity) + level_fractions.iter().sum::<f64>() / 2.0
}
