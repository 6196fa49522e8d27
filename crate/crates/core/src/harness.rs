//! Measurement harness: score-concentration analysis, retrieval-vs-ideal
//! comparison, comparison-count scaling sweeps, and report emission.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;
use std::time::Instant;

use crate::attention::{dense_attention_head, ideal_top_k, sparse_attention_head};
use crate::cluster::{ClusterIndex, HeadIndex, HierarchicalIndex};
use crate::error::{Error, Result};
use crate::lookup::{
    kv_budget, select_hierarchical, select_single_level, LookupConfig, SelectionResult,
};
use crate::store::KeyStore;
use crate::tensor::{dot, stable_softmax, Matrix};

pub const SCHEMA_VERSION: u32 = 1;

/// Envelope for machine-readable run output. `data` holds the verb-specific
/// rows; everything except `elapsed_ms` is reproducible bit-for-bit under a
/// fixed seed.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport<T: Serialize> {
    pub schema_version: u32,
    pub verb: String,
    pub seed: u64,
    pub elapsed_ms: f64,
    pub config: serde_json::Value,
    pub data: T,
}

impl<T: Serialize> RunReport<T> {
    pub fn new(verb: &str, seed: u64, config: serde_json::Value, data: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            verb: verb.to_string(),
            seed,
            elapsed_ms: 0.0,
            config,
            data,
        }
    }
}

pub fn write_json_report<T: Serialize>(report: &RunReport<T>, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// A row type that knows how to flatten itself for CSV emission.
pub trait CsvRecord {
    const HEADER: &'static [&'static str];
    fn record(&self) -> Vec<String>;
}

pub fn write_csv_records<R: CsvRecord>(rows: &[R], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(R::HEADER)
        .map_err(|e| Error::Format(e.to_string()))?;
    for row in rows {
        w.write_record(row.record())
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.12e}")
}

// ---------------------------------------------------------------------------
// Score concentration
// ---------------------------------------------------------------------------

/// Fraction of total attention probability captured by the highest-scoring
/// `ceil(top_frac * L)` keys for one query.
pub fn top_mass(q: &[f32], keys: &Matrix, top_frac: f64) -> Result<f64> {
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(Error::Config(format!(
            "top_frac {top_frac} must be in (0, 1]"
        )));
    }
    if keys.rows() == 0 {
        return Err(Error::Config("no keys".into()));
    }
    let s = 1.0 / (keys.cols() as f64).sqrt();
    let logits: Vec<f64> = keys.iter_rows().map(|k| dot(q, k) * s).collect();
    let mut scores = stable_softmax(&logits);
    let count = (top_frac * keys.rows() as f64).ceil() as usize;
    scores.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(scores[..count.min(scores.len())].iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkewRow {
    pub layer: usize,
    pub head: usize,
    pub top_frac: f64,
    /// Top-fraction attention mass, averaged over the calibration window.
    pub mass: f64,
}

impl CsvRecord for SkewRow {
    const HEADER: &'static [&'static str] = &["layer", "head", "top_frac", "mass"];
    fn record(&self) -> Vec<String> {
        vec![
            self.layer.to_string(),
            self.head.to_string(),
            fmt_f64(self.top_frac),
            fmt_f64(self.mass),
        ]
    }
}

/// Per-head concentration of true attention scores, averaged over the
/// calibration queries.
pub fn skewness(store: &KeyStore, top_frac: f64) -> Result<Vec<SkewRow>> {
    (0..store.heads_total())
        .into_par_iter()
        .map(|h| {
            let queries = store
                .calib_queries_flat(h)
                .ok_or_else(|| Error::Config("store has no calibration queries".into()))?;
            let keys = store.keys_flat(h);
            let mut acc = 0.0;
            for r in 0..queries.rows() {
                acc += top_mass(queries.row(r), keys, top_frac)?;
            }
            Ok(SkewRow {
                layer: h / store.num_heads,
                head: h % store.num_heads,
                top_frac,
                mass: acc / queries.rows() as f64,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Retrieval vs. the ideal oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    /// Keys retrieved by centroid lookup.
    pub k: usize,
    /// |retrieved ∩ ideal-top-k| / k.
    pub set_recall: f64,
    /// True attention mass captured by the retrieved keys.
    pub mass_recall: f64,
    /// Mass captured by the ideal top-k at the same k (upper bound).
    pub ideal_mass: f64,
    /// Max |sparse - dense| output coordinate, absent when nothing was
    /// retrieved.
    pub max_abs_err: Option<f64>,
    pub budget: f64,
    pub comparisons: u64,
}

impl CsvRecord for OracleRow {
    const HEADER: &'static [&'static str] = &[
        "layer",
        "head",
        "query",
        "k",
        "set_recall",
        "mass_recall",
        "ideal_mass",
        "max_abs_err",
        "budget",
        "comparisons",
    ];
    fn record(&self) -> Vec<String> {
        vec![
            self.layer.to_string(),
            self.head.to_string(),
            self.query.to_string(),
            self.k.to_string(),
            fmt_f64(self.set_recall),
            fmt_f64(self.mass_recall),
            fmt_f64(self.ideal_mass),
            self.max_abs_err.map(fmt_f64).unwrap_or_default(),
            fmt_f64(self.budget),
            self.comparisons.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSummary {
    pub rows: usize,
    pub mean_set_recall: f64,
    pub mean_mass_recall: f64,
    pub mean_ideal_mass: f64,
    pub max_abs_err: f64,
    pub mean_budget: f64,
}

pub fn summarize_oracle(rows: &[OracleRow]) -> OracleSummary {
    let n = rows.len().max(1) as f64;
    OracleSummary {
        rows: rows.len(),
        mean_set_recall: rows.iter().map(|r| r.set_recall).sum::<f64>() / n,
        mean_mass_recall: rows.iter().map(|r| r.mass_recall).sum::<f64>() / n,
        mean_ideal_mass: rows.iter().map(|r| r.ideal_mass).sum::<f64>() / n,
        max_abs_err: rows
            .iter()
            .filter_map(|r| r.max_abs_err)
            .fold(0.0, f64::max),
        mean_budget: rows.iter().map(|r| r.budget).sum::<f64>() / n,
    }
}

fn head_selection(q: &[f32], head: &HeadIndex, cfg: &LookupConfig) -> Result<SelectionResult> {
    if head.levels.len() >= 2 {
        select_hierarchical(q, head, cfg)
    } else {
        select_single_level(q, head.finest(), cfg.threshold, cfg.scale_logits)
    }
}

/// Runs centroid lookup on every calibration query and measures it against
/// the ideal oracle at matched k: index-set recall, attention-mass recall,
/// and exact output error of the resulting sparse attention.
pub fn oracle_compare(
    store: &KeyStore,
    index: &HierarchicalIndex,
    cfg: &LookupConfig,
) -> Result<Vec<OracleRow>> {
    cfg.validate()?;
    if store.seq_len != index.seq_len || store.head_dim != index.head_dim {
        return Err(Error::Dimension(format!(
            "store is {}x{}, index was built for {}x{}",
            store.seq_len, store.head_dim, index.seq_len, index.head_dim
        )));
    }
    let per_head: Vec<Vec<OracleRow>> = (0..store.heads_total())
        .into_par_iter()
        .map(|h| {
            let queries = store
                .calib_queries_flat(h)
                .ok_or_else(|| Error::Config("store has no calibration queries".into()))?;
            let keys = store.keys_flat(h);
            let values = store.values_flat(h);
            let layer = h / store.num_heads;
            let head = h % store.num_heads;
            let head_index = index.head(layer, head);
            let centroids = index.centroid_count(layer, head);
            let s = 1.0 / (store.head_dim as f64).sqrt();

            let mut rows = Vec::with_capacity(queries.rows());
            for r in 0..queries.rows() {
                let q = queries.row(r);
                let sel = head_selection(q, head_index, cfg)?;
                let k = sel.k();
                let budget = kv_budget(&sel, centroids, store.seq_len).budget;

                let logits: Vec<f64> = keys.iter_rows().map(|key| dot(q, key) * s).collect();
                let scores = stable_softmax(&logits);
                let mass_recall: f64 = sel.selected.iter().map(|&i| scores[i as usize]).sum();

                let (set_recall, ideal_mass) = if k == 0 {
                    (0.0, 0.0)
                } else {
                    let ideal = ideal_top_k(q, keys, k)?;
                    let mut hits = 0usize;
                    for i in &sel.selected {
                        if ideal.binary_search(i).is_ok() {
                            hits += 1;
                        }
                    }
                    let im: f64 = ideal.iter().map(|&i| scores[i as usize]).sum();
                    (hits as f64 / k as f64, im)
                };
                if mass_recall > ideal_mass + 1e-9 {
                    return Err(Error::Invariant(format!(
                        "retrieved mass {mass_recall} exceeds ideal top-{k} mass {ideal_mass}"
                    )));
                }

                let max_abs_err = if k == 0 {
                    None
                } else {
                    let (dense, _) = dense_attention_head(q, keys, values)?;
                    let (sparse, _) =
                        sparse_attention_head(q, keys, values, &sel.selected, 128, None)?;
                    Some(
                        dense
                            .iter()
                            .zip(&sparse)
                            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
                            .fold(0.0, f64::max),
                    )
                };

                rows.push(OracleRow {
                    layer,
                    head,
                    query: r,
                    k,
                    set_recall,
                    mass_recall,
                    ideal_mass,
                    max_abs_err,
                    budget,
                    comparisons: sel.comparisons,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_head.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Comparison-count scaling
// ---------------------------------------------------------------------------

/// Parameters for the scaling sweep. The hierarchical structure is a
/// synthetic uniform index: `c_prime` clusters at the coarsest level, each
/// level doubling until clusters hold `base / c_prime` keys, so context
/// length only changes the level count. Traversal keeps the best half of
/// each level's candidates and exactly `k` keys at the bottom, making the
/// comparison count `c_prime * levels + k` by construction.
#[derive(Debug, Clone, Serialize)]
pub struct ComplexityParams {
    pub c_prime: usize,
    pub k: usize,
    pub head_dim: usize,
    /// Context length handled by a 1-level index; levels(L) = log2(L / base) + 1.
    pub base: usize,
    /// Cluster fraction for the single-level reference point.
    pub single_cluster_fraction: f64,
    /// Key fraction retrieved by the single-level reference point.
    pub single_key_fraction: f64,
    pub seed: u64,
}

impl Default for ComplexityParams {
    fn default() -> Self {
        Self {
            c_prime: 256,
            k: 512,
            head_dim: 64,
            base: 1024,
            single_cluster_fraction: 0.05,
            single_key_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ComplexityParams {
    fn validate(&self) -> Result<()> {
        if self.c_prime == 0 || !self.c_prime.is_multiple_of(2) {
            return Err(Error::Config("c_prime must be positive and even".into()));
        }
        if self.base == 0 || !self.base.is_multiple_of(self.c_prime) {
            return Err(Error::Config(
                "base must be a positive multiple of c_prime".into(),
            ));
        }
        let keys_per_cluster = self.base / self.c_prime;
        if self.k == 0
            || !self.k.is_multiple_of(keys_per_cluster)
            || self.k / keys_per_cluster > self.c_prime
        {
            return Err(Error::Config(format!(
                "k must be a multiple of {keys_per_cluster} selecting at most c_prime clusters"
            )));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be at least 1".into()));
        }
        for f in [self.single_cluster_fraction, self.single_key_fraction] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "single-level fractions must be in (0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }

    fn levels_for(&self, seq_len: usize) -> Result<usize> {
        if seq_len < 2 * self.base
            || !seq_len.is_multiple_of(self.base)
            || !(seq_len / self.base).is_power_of_two()
        {
            return Err(Error::Config(format!(
                "seq_len {} must be base * 2^i with i >= 1 (base {})",
                seq_len, self.base
            )));
        }
        Ok((seq_len / self.base).trailing_zeros() as usize + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityPoint {
    pub seq_len: usize,
    pub levels: usize,
    /// One comparison per key.
    pub dense: u64,
    /// ceil(f_c * L) centroids plus ceil(f_k * L) retrieved keys.
    pub single_level: u64,
    /// c_prime per level plus k retrieved keys.
    pub hierarchical: u64,
    pub hier_selected_keys: usize,
    pub dense_ms: f64,
    pub hier_ms: f64,
}

impl CsvRecord for ComplexityPoint {
    const HEADER: &'static [&'static str] = &[
        "seq_len",
        "levels",
        "dense",
        "single_level",
        "hierarchical",
        "hier_selected_keys",
        "dense_ms",
        "hier_ms",
    ];
    fn record(&self) -> Vec<String> {
        vec![
            self.seq_len.to_string(),
            self.levels.to_string(),
            self.dense.to_string(),
            self.single_level.to_string(),
            self.hierarchical.to_string(),
            self.hier_selected_keys.to_string(),
            format!("{:.3}", self.dense_ms),
            format!("{:.3}", self.hier_ms),
        ]
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x as f32
        })
        .collect();
    Matrix::new(rows, cols, data).expect("gaussian draws are finite")
}

/// mean of the given rows of `items`, accumulated in f64
fn mean_rows(items: &Matrix, members: &[u32]) -> Vec<f32> {
    let mut acc = vec![0.0f64; items.cols()];
    for &m in members {
        for (a, &x) in acc.iter_mut().zip(items.row(m as usize)) {
            *a += f64::from(x);
        }
    }
    let inv = 1.0 / members.len() as f64;
    acc.iter().map(|&a| (a * inv) as f32).collect()
}

fn uniform_chunk_level(items: &Matrix, clusters: usize, weight_per_item: u32) -> ClusterIndex {
    let n = items.rows();
    let chunk = n / clusters;
    let mut centroids = Vec::with_capacity(clusters * items.cols());
    let mut members = Vec::with_capacity(clusters);
    for c in 0..clusters {
        let ms: Vec<u32> = ((c * chunk) as u32..((c + 1) * chunk) as u32).collect();
        centroids.extend(mean_rows(items, &ms));
        members.push(ms);
    }
    ClusterIndex {
        centroids: Matrix::new(clusters, items.cols(), centroids).expect("means are finite"),
        sizes: vec![chunk as u32; clusters],
        key_weights: vec![chunk as u32 * weight_per_item; clusters],
        members,
        parents: None,
    }
}

/// Uniform contiguous-chunk hierarchy over random keys: coarsest-first
/// levels with cluster counts c_prime, 2 c_prime, ... doubling down to
/// `base / c_prime` keys per finest cluster.
fn uniform_index(keys: &Matrix, levels: usize, c_prime: usize) -> HeadIndex {
    let mut built = Vec::with_capacity(levels);
    let finest_clusters = c_prime << (levels - 1);
    let mut level = uniform_chunk_level(keys, finest_clusters, 1);
    for _ in 1..levels {
        let weight = level.key_weights[0];
        let coarser = uniform_chunk_level(&level.centroids, level.num_clusters() / 2, weight);
        let parents: Vec<u32> = (0..level.num_clusters() as u32).map(|j| j / 2).collect();
        level.parents = Some(parents);
        built.push(level);
        level = coarser;
    }
    built.push(level);
    built.reverse();
    HeadIndex { levels: built }
}

fn top_ids_by_logit(q: &[f32], level: &ClusterIndex, candidates: &[u32], keep: usize) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = candidates
        .iter()
        .map(|&id| (dot(q, level.centroids.row(id as usize)), id))
        .collect();
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut ids: Vec<u32> = scored[..keep.min(scored.len())]
        .iter()
        .map(|&(_, id)| id)
        .collect();
    ids.sort_unstable();
    ids
}

/// Instrumented fixed-budget traversal of the uniform hierarchy. Returns
/// (comparisons, selected key ids).
fn traverse_uniform(q: &[f32], head: &HeadIndex, c_prime: usize, k: usize) -> (u64, Vec<u32>) {
    let levels = &head.levels;
    let mut comparisons = 0u64;
    let mut candidates: Vec<u32> = (0..levels[0].num_clusters() as u32).collect();
    for (li, level) in levels.iter().enumerate() {
        comparisons += candidates.len() as u64;
        let last = li + 1 == levels.len();
        let keep = if last {
            k / (level.members[0].len())
        } else {
            c_prime / 2
        };
        let kept = top_ids_by_logit(q, level, &candidates, keep);
        candidates = kept
            .iter()
            .flat_map(|&id| level.members[id as usize].iter().copied())
            .collect();
    }
    comparisons += candidates.len() as u64;
    (comparisons, candidates)
}

fn single_level_point(q: &[f32], keys: &Matrix, f_c: f64, f_k: f64) -> u64 {
    let l = keys.rows();
    let c = ((f_c * l as f64).ceil() as usize).clamp(1, l);
    let k = ((f_k * l as f64).ceil() as usize).clamp(1, l);
    let level = uniform_chunk_level(keys, c, 1); // uneven tail folded below
    let extra = l - (l / c) * c;
    let mut order: Vec<usize> = (0..c).collect();
    let logits: Vec<f64> = (0..c).map(|i| dot(q, level.centroids.row(i))).collect();
    order.sort_unstable_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let mut gathered = 0usize;
    for (rank, &id) in order.iter().enumerate() {
        let mut size = level.members[id].len();
        if rank == 0 {
            size += extra; // leftover keys ride with the best chunk
        }
        gathered += size;
        if gathered >= k {
            break;
        }
    }
    (c + k.min(gathered)) as u64
}

/// Sweeps comparison counts across context lengths: dense scoring, a
/// single-level index with length-proportional cluster and key fractions,
/// and the fixed-budget hierarchical traversal.
pub fn complexity_sweep(
    seq_lens: &[usize],
    params: &ComplexityParams,
) -> Result<Vec<ComplexityPoint>> {
    params.validate()?;
    if seq_lens.is_empty() {
        return Err(Error::Config("no context lengths given".into()));
    }
    let mut points = Vec::with_capacity(seq_lens.len());
    for &l in seq_lens {
        let levels = params.levels_for(l)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ (l as u64).wrapping_mul(0x9e37_79b9));
        let keys = random_matrix(&mut rng, l, params.head_dim);
        let q_mat = random_matrix(&mut rng, 1, params.head_dim);
        let q = q_mat.row(0);

        let t0 = Instant::now();
        let mut dense = 0u64;
        let mut sink = 0.0f64;
        for key in keys.iter_rows() {
            sink += dot(q, key);
            dense += 1;
        }
        std::hint::black_box(sink);
        let dense_ms = t0.elapsed().as_secs_f64() * 1e3;

        let head = uniform_index(&keys, levels, params.c_prime);
        let t1 = Instant::now();
        let (hier, selected) = traverse_uniform(q, &head, params.c_prime, params.k);
        let mut sink = 0.0f64;
        for &id in &selected {
            sink += dot(q, keys.row(id as usize));
        }
        std::hint::black_box(sink);
        let hier_ms = t1.elapsed().as_secs_f64() * 1e3;

        let single_level = single_level_point(
            q,
            &keys,
            params.single_cluster_fraction,
            params.single_key_fraction,
        );

        points.push(ComplexityPoint {
            seq_len: l,
            levels,
            dense,
            single_level,
            hierarchical: hier,
            hier_selected_keys: selected.len(),
            dense_ms,
            hier_ms,
        });
    }
    Ok(points)
}
