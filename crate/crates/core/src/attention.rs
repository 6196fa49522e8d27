//! Exact attention engines.
//!
//! Three paths over the same data: a dense oracle (full softmax over every
//! key, straight f64 accumulation), sparse attention that gathers only the
//! selected key/value rows and processes them in fixed-size blocks merged
//! through [`SoftmaxPartial`], and an ideal-lookup oracle that picks keys by
//! their true attention scores — the accuracy ceiling for any retrieval at
//! the same key budget.
//!
//! Keys appended after the fixed context (decoded tokens) are attended
//! exactly via the request's `appended` pairs; they never enter an index or
//! the loaded-key accounting.
//!
//! Logits are always scaled by 1/sqrt(d), matching the lookup side's
//! default.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lookup::SelectionResult;
use crate::store::KeyStore;
use crate::tensor::{dot, stable_softmax, Matrix, SoftmaxPartial};

pub const DEFAULT_BLOCK_SIZE: usize = 128;

/// One attention call over a store: per-(layer, head) query rows and
/// selected key indices (sorted ascending). `appended` optionally carries
/// per-head (keys, values) generated after the fixed context; those rows are
/// always attended.
#[derive(Debug, Clone)]
pub struct AttentionRequest {
    pub queries: Vec<Matrix>,
    pub selected: Vec<Vec<u32>>,
    pub block_size: usize,
    pub appended: Option<Vec<(Matrix, Matrix)>>,
}

impl AttentionRequest {
    pub fn new(queries: Vec<Matrix>, selected: Vec<Vec<u32>>) -> Self {
        Self {
            queries,
            selected,
            block_size: DEFAULT_BLOCK_SIZE,
            appended: None,
        }
    }
}

/// Final softmax statistics of one attention row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialStats {
    pub max_logit: f64,
    pub denominator: f64,
}

/// Attention results per (layer, head): one output row per query row, the
/// finalized softmax statistics, and how many fixed-context keys were
/// loaded.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Vec<Matrix>,
    pub stats: Vec<Vec<PartialStats>>,
    pub loaded_key_count: Vec<usize>,
}

fn scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// Full attention for one query against one head, straight-line f64: the
/// reference the block-partitioned path is tested against.
pub fn dense_attention_head(
    q: &[f32],
    keys: &Matrix,
    values: &Matrix,
) -> Result<(Vec<f32>, PartialStats)> {
    if q.len() != keys.cols() {
        return Err(Error::Dimension(format!(
            "query dim {} != key dim {}",
            q.len(),
            keys.cols()
        )));
    }
    if keys.rows() != values.rows() {
        return Err(Error::Dimension(format!(
            "{} keys vs {} values",
            keys.rows(),
            values.rows()
        )));
    }
    let s = scale(q.len());
    let logits: Vec<f64> = keys.iter_rows().map(|k| dot(q, k) * s).collect();
    let weights = stable_softmax(&logits);
    let mut out = vec![0.0f64; values.cols()];
    for (w, v) in weights.iter().zip(values.iter_rows()) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * f64::from(x);
        }
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let d: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    Ok((
        out.iter().map(|&o| o as f32).collect(),
        PartialStats {
            max_logit: m,
            denominator: d,
        },
    ))
}

/// Block-partitioned attention over a chosen subset of one head's keys,
/// optionally followed by appended (generated-token) rows.
pub fn sparse_attention_head(
    q: &[f32],
    keys: &Matrix,
    values: &Matrix,
    selected: &[u32],
    block_size: usize,
    appended: Option<(&Matrix, &Matrix)>,
) -> Result<(Vec<f32>, PartialStats)> {
    if block_size == 0 {
        return Err(Error::Config("block_size must be at least 1".into()));
    }
    if q.len() != keys.cols() {
        return Err(Error::Dimension(format!(
            "query dim {} != key dim {}",
            q.len(),
            keys.cols()
        )));
    }
    let tail_rows = appended.map_or(0, |(k, _)| k.rows());
    if selected.is_empty() && tail_rows == 0 {
        return Err(Error::EmptySelection("no keys attended".into()));
    }
    for w in selected.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Invariant(
                "selected indices must be ascending and duplicate-free".into(),
            ));
        }
    }
    if let Some(&last) = selected.last() {
        if last as usize >= keys.rows() {
            return Err(Error::Invariant(format!(
                "selected index {last} out of range for {} keys",
                keys.rows()
            )));
        }
    }

    let s = scale(q.len());
    let dim = values.cols();
    let partials: Vec<SoftmaxPartial> = selected
        .par_chunks(block_size)
        .map(|block| {
            let mut p = SoftmaxPartial::empty(dim);
            for &i in block {
                let i = i as usize;
                p.absorb(dot(q, keys.row(i)) * s, values.row(i));
            }
            p
        })
        .collect();

    let mut acc = SoftmaxPartial::empty(dim);
    for p in &partials {
        acc.merge(p);
    }
    if let Some((tk, tv)) = appended {
        for i in 0..tk.rows() {
            acc.absorb(dot(q, tk.row(i)) * s, tv.row(i));
        }
    }
    let out = acc.finalize()?;
    Ok((
        out,
        PartialStats {
            max_logit: acc.max_logit(),
            denominator: acc.denominator(),
        },
    ))
}

fn run_over_heads<F>(store: &KeyStore, queries: &[Matrix], f: F) -> Result<AttentionOutput>
where
    F: Fn(usize, &[f32]) -> Result<(Vec<f32>, PartialStats)> + Sync,
{
    if queries.len() != store.heads_total() {
        return Err(Error::Dimension(format!(
            "{} query matrices for {} heads",
            queries.len(),
            store.heads_total()
        )));
    }
    let per_head: Vec<Result<(Matrix, Vec<PartialStats>)>> = queries
        .par_iter()
        .enumerate()
        .map(|(h, qs)| {
            let mut rows = Vec::with_capacity(qs.rows());
            let mut stats = Vec::with_capacity(qs.rows());
            for r in 0..qs.rows() {
                let (out, st) = f(h, qs.row(r))?;
                rows.push(out);
                stats.push(st);
            }
            Ok((Matrix::from_rows(&rows)?, stats))
        })
        .collect();

    let mut out = Vec::with_capacity(per_head.len());
    let mut stats = Vec::with_capacity(per_head.len());
    for r in per_head {
        let (o, s) = r?;
        out.push(o);
        stats.push(s);
    }
    Ok(AttentionOutput {
        out,
        stats,
        loaded_key_count: vec![store.seq_len; store.heads_total()],
    })
}

/// Dense oracle over every head of a store; `queries[h]` holds the query
/// rows for flat head index h.
pub fn dense_attention(store: &KeyStore, queries: &[Matrix]) -> Result<AttentionOutput> {
    run_over_heads(store, queries, |h, q| {
        dense_attention_head(q, store.keys_flat(h), store.values_flat(h))
    })
}

/// Sparse attention over every head of a store per the request's selections.
pub fn sparse_attention(store: &KeyStore, req: &AttentionRequest) -> Result<AttentionOutput> {
    if req.selected.len() != store.heads_total() {
        return Err(Error::Dimension(format!(
            "{} selections for {} heads",
            req.selected.len(),
            store.heads_total()
        )));
    }
    if let Some(appended) = &req.appended {
        if appended.len() != store.heads_total() {
            return Err(Error::Dimension(format!(
                "{} appended pairs for {} heads",
                appended.len(),
                store.heads_total()
            )));
        }
    }
    let mut output = run_over_heads(store, &req.queries, |h, q| {
        let tail = req.appended.as_ref().map(|a| (&a[h].0, &a[h].1));
        sparse_attention_head(
            q,
            store.keys_flat(h),
            store.values_flat(h),
            &req.selected[h],
            req.block_size,
            tail,
        )
    })?;
    output.loaded_key_count = req.selected.iter().map(Vec::len).collect();
    Ok(output)
}

/// Oracle retrieval: computes the true attention scores over all keys and
/// keeps those above `t`. Upper-bounds what any centroid lookup can recall
/// at the same budget.
pub fn ideal_lookup(q: &[f32], keys: &Matrix, t: f64) -> Result<SelectionResult> {
    if q.len() != keys.cols() {
        return Err(Error::Dimension(format!(
            "query dim {} != key dim {}",
            q.len(),
            keys.cols()
        )));
    }
    let s = scale(q.len());
    let logits: Vec<f64> = keys.iter_rows().map(|k| dot(q, k) * s).collect();
    let scores = stable_softmax(&logits);
    let selected: Vec<u32> = (0..keys.rows() as u32)
        .filter(|&i| scores[i as usize] > t)
        .collect();
    Ok(SelectionResult {
        selected,
        cluster_selected: Vec::new(),
        comparisons: keys.rows() as u64,
    })
}

/// The `k` keys with the highest true attention scores (ties broken toward
/// lower indices), returned ascending.
pub fn ideal_top_k(q: &[f32], keys: &Matrix, k: usize) -> Result<Vec<u32>> {
    if q.len() != keys.cols() {
        return Err(Error::Dimension(format!(
            "query dim {} != key dim {}",
            q.len(),
            keys.cols()
        )));
    }
    let s = scale(q.len());
    let logits: Vec<f64> = keys.iter_rows().map(|kr| dot(q, kr) * s).collect();
    let scores = stable_softmax(&logits);
    let mut order: Vec<u32> = (0..keys.rows() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    let mut top: Vec<u32> = order.into_iter().take(k).collect();
    top.sort_unstable();
    Ok(top)
}

/// How far sparse attention can drift from dense, versus the mass it
/// dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    /// Max absolute elementwise difference, sparse vs dense.
    pub max_abs_err: f64,
    /// Total true attention score of the keys the selection dropped.
    pub dropped_mass: f64,
    /// `2 * dropped_mass * max |v|`: the triangle-inequality ceiling.
    pub bound: f64,
    pub holds: bool,
}

/// Quantifies the output error of attending only `selected` and checks it
/// against the analytic bound (which is verified, not assumed).
pub fn output_error_bound_check(
    q: &[f32],
    keys: &Matrix,
    values: &Matrix,
    selected: &[u32],
) -> Result<ErrorBoundReport> {
    if selected.is_empty() {
        return Err(Error::EmptySelection("no keys attended".into()));
    }
    let s = scale(q.len());
    let logits: Vec<f64> = keys.iter_rows().map(|k| dot(q, k) * s).collect();
    let scores = stable_softmax(&logits);

    let mut is_selected = vec![false; keys.rows()];
    for &i in selected {
        is_selected[i as usize] = true;
    }
    let dropped_mass: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| !is_selected[i])
        .map(|(_, &a)| a)
        .sum();

    let mut dense = vec![0.0f64; values.cols()];
    for (a, v) in scores.iter().zip(values.iter_rows()) {
        for (o, &x) in dense.iter_mut().zip(v) {
            *o += a * f64::from(x);
        }
    }
    let kept: f64 = 1.0 - dropped_mass;
    let mut sparse = vec![0.0f64; values.cols()];
    for &i in selected {
        let i = i as usize;
        for (o, &x) in sparse.iter_mut().zip(values.row(i)) {
            *o += scores[i] / kept * f64::from(x);
        }
    }

    let max_abs_err = dense
        .iter()
        .zip(&sparse)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let vmax = values
        .data()
        .iter()
        .map(|&x| f64::from(x).abs())
        .fold(0.0f64, f64::max);
    let bound = 2.0 * dropped_mass * vmax;
    Ok(ErrorBoundReport {
        max_abs_err,
        dropped_mass,
        bound,
        holds: max_abs_err <= bound + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    /// Isolated reimplementation: no shared softmax code with the paths
    /// under test.
    fn brute_force(q: &[f32], keys: &Matrix, values: &Matrix, subset: &[u32]) -> Vec<f64> {
        let s = 1.0 / (q.len() as f64).sqrt();
        let logits: Vec<f64> = subset
            .iter()
            .map(|&i| {
                let k = keys.row(i as usize);
                q.iter()
                    .zip(k)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum::<f64>()
                    * s
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut out = vec![0.0f64; values.cols()];
        for (e, &i) in exps.iter().zip(subset) {
            for (o, &x) in out.iter_mut().zip(values.row(i as usize)) {
                *o += e / z * f64::from(x);
            }
        }
        out
    }

    #[test]
    fn single_key_returns_its_value() {
        let keys = Matrix::from_rows(&[vec![0.3, -0.8]]).unwrap();
        let values = Matrix::from_rows(&[vec![5.0, -2.0]]).unwrap();
        let (out, stats) = dense_attention_head(&[1.0, 1.0], &keys, &values).unwrap();
        assert_eq!(out, vec![5.0, -2.0]);
        assert!((stats.denominator - 1.0).abs() < 1e-12);

        let (out, _) = sparse_attention_head(&[1.0, 1.0], &keys, &values, &[0], 128, None).unwrap();
        assert_eq!(out, vec![5.0, -2.0]);
    }

    #[test]
    fn identical_keys_average_the_values() {
        let keys = Matrix::from_rows(&vec![vec![0.5, 0.5]; 4]).unwrap();
        let values = Matrix::from_rows(&[
            vec![4.0, 0.0],
            vec![0.0, 4.0],
            vec![2.0, 2.0],
            vec![-2.0, 6.0],
        ])
        .unwrap();
        let (out, _) = dense_attention_head(&[3.0, -1.0], &keys, &values).unwrap();
        assert!((f64::from(out[0]) - 1.0).abs() < 1e-6);
        assert!((f64::from(out[1]) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn dense_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let keys = random_matrix(64, 8, &mut rng);
        let values = random_matrix(64, 8, &mut rng);
        let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, _) = dense_attention_head(&q, &keys, &values).unwrap();
        let want = brute_force(&q, &keys, &values, &(0..64u32).collect::<Vec<_>>());
        for (o, w) in out.iter().zip(&want) {
            assert!((f64::from(*o) - w).abs() < 1e-6);
        }
    }

    #[test]
    fn full_selection_equals_dense_even_with_ragged_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in [1usize, 5, 127, 128, 129, 1000] {
            let keys = random_matrix(l, 6, &mut rng);
            let values = random_matrix(l, 6, &mut rng);
            let q: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let all: Vec<u32> = (0..l as u32).collect();
            let (dense, dstats) = dense_attention_head(&q, &keys, &values).unwrap();
            let (sparse, sstats) =
                sparse_attention_head(&q, &keys, &values, &all, 128, None).unwrap();
            for (a, b) in dense.iter().zip(&sparse) {
                assert!((f64::from(*a) - f64::from(*b)).abs() < 1e-5, "L={l}");
            }
            assert!((dstats.max_logit - sstats.max_logit).abs() < 1e-12);
            let rel = (dstats.denominator - sstats.denominator).abs() / dstats.denominator;
            assert!(rel < 1e-12);
        }
    }

    #[test]
    fn block_size_invariance_on_partial_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let l = 333;
        let keys = random_matrix(l, 8, &mut rng);
        let values = random_matrix(l, 8, &mut rng);
        let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let selected: Vec<u32> = (0..l as u32).filter(|_| rng.gen_bool(0.3)).collect();

        let reference = brute_force(&q, &keys, &values, &selected);
        let mut outputs = Vec::new();
        for bs in [1usize, 7, 128] {
            let (out, _) = sparse_attention_head(&q, &keys, &values, &selected, bs, None).unwrap();
            for (o, w) in out.iter().zip(&reference) {
                assert!((f64::from(*o) - w).abs() < 1e-5, "block size {bs}");
            }
            outputs.push(out);
        }
        for other in &outputs[1..] {
            for (a, b) in outputs[0].iter().zip(other) {
                assert!((f64::from(*a) - f64::from(*b)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn merge_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = 200;
        let keys = random_matrix(l, 4, &mut rng);
        let values = random_matrix(l, 4, &mut rng);
        let q: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = 1.0 / 2.0;

        let indices: Vec<u32> = (0..l as u32).collect();
        let blocks: Vec<SoftmaxPartial> = indices
            .chunks(13)
            .map(|block| {
                let mut p = SoftmaxPartial::empty(4);
                for &i in block {
                    p.absorb(dot(&q, keys.row(i as usize)) * s, values.row(i as usize));
                }
                p
            })
            .collect();

        let merge_in = |order: Vec<usize>| {
            let mut acc = SoftmaxPartial::empty(4);
            for i in order {
                acc.merge(&blocks[i]);
            }
            acc.finalize().unwrap()
        };
        let forward = merge_in((0..blocks.len()).collect());
        let backward = merge_in((0..blocks.len()).rev().collect());
        let mut shuffled: Vec<usize> = (0..blocks.len()).collect();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let scrambled = merge_in(shuffled);
        for other in [&backward, &scrambled] {
            for (a, b) in forward.iter().zip(other.iter()) {
                assert!((f64::from(*a) - f64::from(*b)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_selection_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let keys = random_matrix(4, 3, &mut rng);
        let values = random_matrix(4, 3, &mut rng);
        let err =
            sparse_attention_head(&[1.0, 0.0, 0.0], &keys, &values, &[], 128, None).unwrap_err();
        assert!(matches!(err, Error::EmptySelection(_)));
        assert!(err.to_string().contains("no keys attended"));

        let err = sparse_attention_head(&[1.0, 0.0, 0.0], &keys, &values, &[2, 2], 128, None)
            .unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn appended_rows_match_concatenated_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let keys = random_matrix(20, 5, &mut rng);
        let values = random_matrix(20, 5, &mut rng);
        let tail_k = random_matrix(3, 5, &mut rng);
        let tail_v = random_matrix(3, 5, &mut rng);
        let q: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let all: Vec<u32> = (0..20).collect();
        let (got, _) =
            sparse_attention_head(&q, &keys, &values, &all, 7, Some((&tail_k, &tail_v))).unwrap();

        let cat = |a: &Matrix, b: &Matrix| {
            let rows: Vec<Vec<f32>> = a
                .iter_rows()
                .chain(b.iter_rows())
                .map(<[f32]>::to_vec)
                .collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let (want, _) =
            dense_attention_head(&q, &cat(&keys, &tail_k), &cat(&values, &tail_v)).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((f64::from(*a) - f64::from(*b)).abs() < 1e-6);
        }

        // tail alone is attendable even with nothing selected
        let (only_tail, _) =
            sparse_attention_head(&q, &keys, &values, &[], 7, Some((&tail_k, &tail_v))).unwrap();
        let (want_tail, _) = dense_attention_head(&q, &tail_k, &tail_v).unwrap();
        assert_eq!(only_tail, want_tail);
    }

    #[test]
    fn ideal_lookup_thresholds_true_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let keys = random_matrix(50, 4, &mut rng);
        let q: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let all = ideal_lookup(&q, &keys, 0.0).unwrap();
        assert_eq!(all.selected.len(), 50);
        assert_eq!(all.comparisons, 50);

        // one dominant key: logit margin >= 20 after scaling
        let mut rows: Vec<Vec<f32>> = (0..32).map(|_| vec![0.0, 0.0]).collect();
        rows[17] = vec![40.0, 0.0];
        let keys = Matrix::from_rows(&rows).unwrap();
        let sel = ideal_lookup(&[1.0, 0.0], &keys, 0.5).unwrap();
        assert_eq!(sel.selected, vec![17]);
    }

    #[test]
    fn top_k_is_the_best_subset_on_small_instances() {
        // axis-aligned values make the restricted error enumerable exactly
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for trial in 0..5 {
            let l = 10;
            let k = 3;
            let mut rows = Vec::with_capacity(l);
            for _ in 0..l {
                rows.push(vec![rng.gen_range(0.0..8.0f32), 0.0]);
            }
            let keys = Matrix::from_rows(&rows).unwrap();
            let values = {
                let mut v = vec![vec![0.0f32; l]; l];
                for (i, row) in v.iter_mut().enumerate() {
                    row[i] = 1.0;
                }
                Matrix::from_rows(&v).unwrap()
            };
            let q = [2.0f32, 0.0];
            let top = ideal_top_k(&q, &keys, k).unwrap();
            let err_of = |subset: &[u32]| {
                output_error_bound_check(&q, &keys, &values, subset)
                    .unwrap()
                    .max_abs_err
            };
            let top_err = err_of(&top);

            let scores = {
                let s = 1.0 / (2.0f64).sqrt();
                let logits: Vec<f64> = keys.iter_rows().map(|kr| dot(&q, kr) * s).collect();
                stable_softmax(&logits)
            };
            // enumerate all k-subsets
            let mut subset = vec![0u32, 1, 2];
            loop {
                let excludes_higher_mass = subset.iter().any(|&i| {
                    (0..l as u32)
                        .filter(|j| !subset.contains(j))
                        .any(|j| scores[j as usize] > scores[i as usize])
                });
                if excludes_higher_mass {
                    let e = err_of(&subset);
                    assert!(
                        top_err <= e + 1e-12,
                        "trial {trial}: top-k err {top_err} > subset {subset:?} err {e}"
                    );
                }
                // next combination
                let mut advanced = false;
                for pos in (0..k).rev() {
                    if subset[pos] < (l - k + pos) as u32 {
                        subset[pos] += 1;
                        for p in pos + 1..k {
                            subset[p] = subset[p - 1] + 1;
                        }
                        advanced = true;
                        break;
                    }
                }
                if !advanced {
                    break;
                }
            }
        }
    }

    #[test]
    fn error_bound_holds_across_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let keys = random_matrix(64, 6, &mut rng);
        let values = random_matrix(64, 6, &mut rng);
        let q: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // full selection: zero dropped mass, zero error
        let all: Vec<u32> = (0..64).collect();
        let r = output_error_bound_check(&q, &keys, &values, &all).unwrap();
        assert!(r.dropped_mass < 1e-12);
        assert!(r.max_abs_err < 1e-5);
        assert!(r.holds);

        // drop the lowest-score key
        let scores = {
            let s = 1.0 / (6.0f64).sqrt();
            let logits: Vec<f64> = keys.iter_rows().map(|k| dot(&q, k) * s).collect();
            stable_softmax(&logits)
        };
        let worst = (0..64u32)
            .min_by(|&a, &b| scores[a as usize].total_cmp(&scores[b as usize]))
            .unwrap();
        let partial: Vec<u32> = (0..64u32).filter(|&i| i != worst).collect();
        let r = output_error_bound_check(&q, &keys, &values, &partial).unwrap();
        assert!(r.holds);
        assert!(r.dropped_mass > 0.0);

        // adversarial: keep only the single lowest-score key
        let r = output_error_bound_check(&q, &keys, &values, &[worst]).unwrap();
        assert!(r.holds, "err {} bound {}", r.max_abs_err, r.bound);
        assert!(r.dropped_mass > 0.9);
    }

    #[test]
    fn store_level_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (layers, heads, d, l) = (1, 2, 4, 30);
        let keys: Vec<Matrix> = (0..2).map(|_| random_matrix(l, d, &mut rng)).collect();
        let values: Vec<Matrix> = (0..2).map(|_| random_matrix(l, d, &mut rng)).collect();
        let store = KeyStore::new(layers, heads, d, l, keys, values, None, 0).unwrap();
        let queries: Vec<Matrix> = (0..2).map(|_| random_matrix(3, d, &mut rng)).collect();

        let dense = dense_attention(&store, &queries).unwrap();
        let req = AttentionRequest::new(
            queries.clone(),
            vec![(0..l as u32).collect(), (0..l as u32).collect()],
        );
        let sparse = sparse_attention(&store, &req).unwrap();
        assert_eq!(sparse.loaded_key_count, vec![l, l]);
        for h in 0..2 {
            assert!(sparse.out[h].data().iter().all(|x| x.is_finite()));
            for (a, b) in dense.out[h].data().iter().zip(sparse.out[h].data()) {
                assert!((f64::from(*a) - f64::from(*b)).abs() < 1e-5);
            }
        }
    }
}
