//! Offline K-means over key vectors and the coarse-to-fine centroid
//! hierarchy built on top of it.
//!
//! Grouping is by cosine similarity: assignment runs on unit-normalized
//! copies of the items, while the reported centroid of a cluster is the mean
//! of the *raw* member vectors, so that a query's dot product with the
//! centroid equals its mean dot product over the members. A hierarchy is
//! built bottom-up — the finest level clusters the keys themselves, each
//! coarser level clusters the centroids of the level below.

use log::warn;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::KeyStore;
use crate::tensor::{dot, l2_norm, Matrix};

/// One clustering level: centroids with member lists into the level below
/// (raw keys at the finest level).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex {
    /// Mean of the raw member vectors, one row per cluster.
    pub centroids: Matrix,
    /// Direct member counts.
    pub sizes: Vec<u32>,
    /// Number of raw keys under each cluster, counted through all deeper
    /// levels. Equals `sizes` at the finest level; this is the N used to
    /// weight scoring denominators.
    pub key_weights: Vec<u32>,
    /// Member indices into the level below (sorted ascending per cluster).
    pub members: Vec<Vec<u32>>,
    /// Parent cluster id at the next-coarser level; `None` at the coarsest.
    pub parents: Option<Vec<u32>>,
}

impl ClusterIndex {
    pub fn num_clusters(&self) -> usize {
        self.centroids.rows()
    }
}

/// All levels for one (layer, head), ordered coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadIndex {
    pub levels: Vec<ClusterIndex>,
}

impl HeadIndex {
    pub fn finest(&self) -> &ClusterIndex {
        self.levels
            .last()
            .expect("head index has at least one level")
    }
}

/// Per-(layer, head) hierarchies for a whole store, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalIndex {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub heads: Vec<HeadIndex>,
}

impl HierarchicalIndex {
    pub fn head(&self, layer: usize, head: usize) -> &HeadIndex {
        &self.heads[layer * self.num_heads + head]
    }

    pub fn num_levels(&self) -> usize {
        self.heads.first().map_or(0, |h| h.levels.len())
    }

    /// Total centroid count across all levels of one head (budget
    /// accounting charges every level).
    pub fn centroid_count(&self, layer: usize, head: usize) -> usize {
        self.head(layer, head)
            .levels
            .iter()
            .map(ClusterIndex::num_clusters)
            .sum()
    }

    /// Structural self-check: every level partitions the level below, parent
    /// maps agree with member lists, key weights aggregate to the sequence
    /// length, centroid shapes match, and no cluster is empty.
    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != self.num_layers * self.num_heads {
            return Err(Error::Invariant(format!(
                "index has {} head entries, expected {}",
                self.heads.len(),
                self.num_layers * self.num_heads
            )));
        }
        for (h, head) in self.heads.iter().enumerate() {
            if head.levels.is_empty() {
                return Err(Error::Invariant(format!("head {h} has no levels")));
            }
            for (lv, level) in head.levels.iter().enumerate() {
                let c = level.num_clusters();
                let item_count = if lv + 1 < head.levels.len() {
                    head.levels[lv + 1].num_clusters()
                } else {
                    self.seq_len
                };
                if c == 0 || c > item_count {
                    return Err(Error::Invariant(format!(
                        "head {h} level {lv}: {c} clusters over {item_count} items"
                    )));
                }
                if level.centroids.cols() != self.head_dim {
                    return Err(Error::Invariant(format!(
                        "head {h} level {lv}: centroid dim {} != {}",
                        level.centroids.cols(),
                        self.head_dim
                    )));
                }
                if level.sizes.len() != c
                    || level.key_weights.len() != c
                    || level.members.len() != c
                {
                    return Err(Error::Invariant(format!(
                        "head {h} level {lv}: per-cluster array length mismatch"
                    )));
                }
                // members partition [0, item_count)
                let mut seen = vec![false; item_count];
                for (j, m) in level.members.iter().enumerate() {
                    if m.is_empty() {
                        return Err(Error::Invariant(format!(
                            "head {h} level {lv}: cluster {j} is empty"
                        )));
                    }
                    if m.len() != level.sizes[j] as usize {
                        return Err(Error::Invariant(format!(
                            "head {h} level {lv}: cluster {j} size {} != member count {}",
                            level.sizes[j],
                            m.len()
                        )));
                    }
                    for &i in m {
                        let i = i as usize;
                        if i >= item_count || seen[i] {
                            return Err(Error::Invariant(format!(
                                "head {h} level {lv}: member {i} out of range or repeated"
                            )));
                        }
                        seen[i] = true;
                    }
                }
                if seen.iter().any(|&s| !s) {
                    return Err(Error::Invariant(format!(
                        "head {h} level {lv}: members do not cover all {item_count} items"
                    )));
                }
                // key weights aggregate through the hierarchy
                let expected_weights: Vec<u32> = if lv + 1 < head.levels.len() {
                    let below = &head.levels[lv + 1].key_weights;
                    level
                        .members
                        .iter()
                        .map(|m| m.iter().map(|&i| below[i as usize]).sum())
                        .collect()
                } else {
                    level.sizes.clone()
                };
                if level.key_weights != expected_weights {
                    return Err(Error::Invariant(format!(
                        "head {h} level {lv}: key weights disagree with aggregated member counts"
                    )));
                }
                let total: u64 = level.key_weights.iter().map(|&w| u64::from(w)).sum();
                if total != self.seq_len as u64 {
                    return Err(Error::Invariant(format!(
                        "head {h} level {lv}: key weights sum to {total}, expected {}",
                        self.seq_len
                    )));
                }
                // parent maps: present exactly below the coarsest level and
                // consistent with the coarser level's member lists
                if lv == 0 {
                    if level.parents.is_some() {
                        return Err(Error::Invariant(format!(
                            "head {h}: coarsest level carries a parent map"
                        )));
                    }
                } else {
                    let parents = level.parents.as_ref().ok_or_else(|| {
                        Error::Invariant(format!("head {h} level {lv}: missing parent map"))
                    })?;
                    if parents.len() != c {
                        return Err(Error::Invariant(format!(
                            "head {h} level {lv}: parent map length mismatch"
                        )));
                    }
                    let coarser = &head.levels[lv - 1];
                    for (child, &p) in parents.iter().enumerate() {
                        let ok = coarser
                            .members
                            .get(p as usize)
                            .is_some_and(|m| m.binary_search(&(child as u32)).is_ok());
                        if !ok {
                            return Err(Error::Invariant(format!(
                                "head {h} level {lv}: cluster {child} not a member of its parent {p}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Settings for [`build_index`]. `level_fractions` are per-level centroid
/// counts as fractions of the sequence length, ordered coarsest first (e.g.
/// `[0.01, 0.05]` for a two-level hierarchy, `[0.05]` for single-level).
#[derive(Debug, Clone)]
pub struct IndexParams {
    pub level_fractions: Vec<f64>,
    pub seed: u64,
    /// Report unit-normalized mean-of-normalized-members centroids instead
    /// of raw means (comparison mode; scoring quality differs).
    pub normalized_centroids: bool,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            level_fractions: vec![0.05],
            seed: 0,
            normalized_centroids: false,
        }
    }
}

impl IndexParams {
    pub fn validate(&self) -> Result<()> {
        if self.level_fractions.is_empty() {
            return Err(Error::Config("level_fractions is empty".into()));
        }
        for &f in &self.level_fractions {
            if !(f > 0.0 && f <= 1.0) || !f.is_finite() {
                return Err(Error::Config(format!("level fraction {f} outside (0, 1]")));
            }
        }
        if self.level_fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "level fractions must increase strictly from coarsest to finest".into(),
            ));
        }
        Ok(())
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, layer: usize, head: usize, level: usize) -> u64 {
    let mut s = seed ^ 0x5851_f42d_4c95_7f2d;
    s = s.wrapping_add((layer as u64) << 40 | (head as u64) << 20 | level as u64);
    splitmix64(&mut s)
}

fn normalized_rows(items: &Matrix) -> Matrix {
    let mut out = items.clone();
    for i in 0..out.rows() {
        let n = l2_norm(out.row(i));
        if n == 0.0 {
            warn!("zero-norm item at row {i}; normalized as zero vector");
            continue;
        }
        for x in out.row_mut(i) {
            *x = (f64::from(*x) / n) as f32;
        }
    }
    out
}

/// K-means++ seeding on unit vectors: sampling weight is the cosine distance
/// to the nearest already-chosen center.
fn seed_centers(unit: &Matrix, c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = unit.rows();
    let mut chosen = Vec::with_capacity(c);
    let first = rng.gen_range(0..n);
    chosen.push(first);
    let mut dist: Vec<f64> = (0..n)
        .map(|i| (1.0 - dot(unit.row(i), unit.row(first))).max(0.0))
        .collect();
    while chosen.len() < c {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // all remaining distances zero (duplicate points): fall back to
            // an arbitrary not-yet-chosen row
            Err(_) => (0..n).find(|i| !chosen.contains(i)).unwrap_or(0),
        };
        chosen.push(next);
        for (i, slot) in dist.iter_mut().enumerate() {
            let d = (1.0 - dot(unit.row(i), unit.row(next))).max(0.0);
            if d < *slot {
                *slot = d;
            }
        }
    }
    chosen
}

const MAX_ITERS: usize = 50;
const SHIFT_TOLERANCE: f64 = 1e-4;

/// Clusters the rows of `items` into `c` groups by cosine similarity and
/// returns the converged assignment with per-cluster raw-mean centroids.
/// Also returns the per-iteration objective (mean cosine distance of each
/// item to its assigned working centroid), which never increases.
pub fn kmeans_with_trace(
    items: &Matrix,
    c: usize,
    seed: u64,
    normalized_centroids: bool,
) -> Result<(ClusterIndex, Vec<f64>)> {
    let n = items.rows();
    let d = items.cols();
    if c == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    if c > n {
        return Err(Error::Config(format!(
            "cluster count {c} exceeds item count {n}"
        )));
    }

    let unit = normalized_rows(items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // working centroids: unit-normalized means of unit member vectors
    let mut work = Matrix::zeros(c, d);
    for (j, &row) in seed_centers(&unit, c, &mut rng).iter().enumerate() {
        work.row_mut(j).copy_from_slice(unit.row(row));
    }

    let mut assign = vec![0usize; n];
    let mut trace = Vec::new();
    let mut first = true;

    for _ in 0..MAX_ITERS {
        // assignment step
        let mut changed = 0usize;
        for (i, slot) in assign.iter_mut().enumerate() {
            let x = unit.row(i);
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for j in 0..c {
                let sim = dot(x, work.row(j));
                if sim > best_sim {
                    best_sim = sim;
                    best = j;
                }
            }
            if *slot != best || first {
                *slot = best;
                changed += 1;
            }
        }
        first = false;

        // empty-cluster repair: move the globally farthest item (from its
        // assigned centroid) into the empty cluster; donors must have at
        // least two members so no new empty cluster appears
        loop {
            let mut counts = vec![0usize; c];
            for &a in &assign {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&k| k == 0) else {
                break;
            };
            let farthest = (0..n)
                .filter(|&i| counts[assign[i]] >= 2)
                .max_by(|&a, &b| {
                    let da = 1.0 - dot(unit.row(a), work.row(assign[a]));
                    let db = 1.0 - dot(unit.row(b), work.row(assign[b]));
                    da.total_cmp(&db)
                })
                .ok_or_else(|| Error::Invariant("no donor for empty cluster".into()))?;
            assign[farthest] = empty;
            work.row_mut(empty).copy_from_slice(unit.row(farthest));
            changed += 1;
        }

        // update step: normalized mean of unit members
        let mut sums = vec![vec![0.0f64; d]; c];
        let mut counts = vec![0usize; c];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(unit.row(i)) {
                *s += f64::from(x);
            }
        }
        let mut shift = 0.0f64;
        for (j, sum) in sums.iter().enumerate() {
            let norm = sum.iter().map(|s| s * s).sum::<f64>().sqrt();
            let new: Vec<f32> = if norm == 0.0 {
                sum.iter().map(|&s| s as f32).collect()
            } else {
                sum.iter().map(|&s| (s / norm) as f32).collect()
            };
            shift += new
                .iter()
                .zip(work.row(j))
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum::<f64>()
                .sqrt();
            work.row_mut(j).copy_from_slice(&new);
        }
        shift /= c as f64;

        let objective: f64 = (0..n)
            .map(|i| 1.0 - dot(unit.row(i), work.row(assign[i])))
            .sum::<f64>()
            / n as f64;
        if let Some(&prev) = trace.last() {
            if objective > prev + 1e-9 {
                return Err(Error::Invariant(format!(
                    "clustering objective increased: {prev} -> {objective}"
                )));
            }
        }
        trace.push(objective);

        if changed == 0 || shift < SHIFT_TOLERANCE {
            break;
        }
    }

    // reported centroids and membership
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); c];
    for (i, &a) in assign.iter().enumerate() {
        members[a].push(i as u32);
    }
    let mut centroids = Matrix::zeros(c, d);
    for (j, m) in members.iter().enumerate() {
        if normalized_centroids {
            centroids.row_mut(j).copy_from_slice(work.row(j));
            continue;
        }
        let mut sum = vec![0.0f64; d];
        for &i in m {
            for (s, &x) in sum.iter_mut().zip(items.row(i as usize)) {
                *s += f64::from(x);
            }
        }
        for (out, s) in centroids.row_mut(j).iter_mut().zip(&sum) {
            *out = (s / m.len() as f64) as f32;
        }
    }
    let sizes: Vec<u32> = members.iter().map(|m| m.len() as u32).collect();
    Ok((
        ClusterIndex {
            centroids,
            key_weights: sizes.clone(),
            sizes,
            members,
            parents: None,
        },
        trace,
    ))
}

pub fn kmeans(items: &Matrix, c: usize, seed: u64) -> Result<ClusterIndex> {
    kmeans_with_trace(items, c, seed, false).map(|(idx, _)| idx)
}

/// Builds the per-(layer, head) hierarchy for a whole store. The finest
/// level clusters the raw keys; each coarser level clusters the centroids of
/// the level below, with cluster count `ceil(fraction * seq_len)` per level.
pub fn build_index(store: &KeyStore, params: &IndexParams) -> Result<HierarchicalIndex> {
    params.validate()?;
    let num_levels = params.level_fractions.len();
    let l = store.seq_len;

    let heads: Vec<HeadIndex> = (0..store.num_layers * store.num_heads)
        .into_par_iter()
        .map(|idx| {
            let (layer, head) = (idx / store.num_heads, idx % store.num_heads);
            // finest level first, then cluster centroids upward
            let mut levels_fine_first: Vec<ClusterIndex> = Vec::with_capacity(num_levels);
            for (depth, &frac) in params.level_fractions.iter().rev().enumerate() {
                let items = if depth == 0 {
                    store.keys(layer, head).clone()
                } else {
                    levels_fine_first[depth - 1].centroids.clone()
                };
                let mut c = (frac * l as f64).ceil() as usize;
                if c > items.rows() {
                    warn!(
                        "layer {layer} head {head}: clamping cluster count {c} to {} items",
                        items.rows()
                    );
                    c = items.rows();
                }
                let seed = derive_seed(params.seed, layer, head, depth);
                let mut level = kmeans_with_trace(&items, c, seed, params.normalized_centroids)?.0;
                if depth > 0 {
                    let below = &levels_fine_first[depth - 1];
                    level.key_weights = level
                        .members
                        .iter()
                        .map(|m| m.iter().map(|&i| below.key_weights[i as usize]).sum())
                        .collect();
                }
                levels_fine_first.push(level);
            }

            let mut levels: Vec<ClusterIndex> = levels_fine_first.into_iter().rev().collect();
            for lv in 1..levels.len() {
                let c_child = levels[lv].num_clusters();
                let mut parents = vec![0u32; c_child];
                for (p, m) in levels[lv - 1].members.iter().enumerate() {
                    for &child in m {
                        parents[child as usize] = p as u32;
                    }
                }
                levels[lv].parents = Some(parents);
            }
            Ok(HeadIndex { levels })
        })
        .collect::<Result<_>>()?;

    let index = HierarchicalIndex {
        num_layers: store.num_layers,
        num_heads: store.num_heads,
        head_dim: store.head_dim,
        seq_len: l,
        heads,
    };
    index.validate()?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::KeyStore;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn distinct_points_get_own_clusters() {
        let items = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![-1.0, 0.0, 0.0],
        ])
        .unwrap();
        let idx = kmeans(&items, 4, 7).unwrap();
        assert_eq!(idx.sizes, vec![1, 1, 1, 1]);
        // each centroid equals its single member exactly
        for (j, m) in idx.members.iter().enumerate() {
            assert_eq!(idx.centroids.row(j), items.row(m[0] as usize));
        }
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let items = random_matrix(40, 6, 3);
        let idx = kmeans(&items, 1, 0).unwrap();
        assert_eq!(idx.sizes, vec![40]);
        assert_eq!(idx.key_weights, vec![40]);
        for col in 0..6 {
            let mean: f64 = (0..40).map(|i| f64::from(items.row(i)[col])).sum::<f64>() / 40.0;
            assert!((f64::from(idx.centroids.row(0)[col]) - mean).abs() < 1e-6);
        }
        assert_eq!(idx.members[0], (0..40u32).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_cluster_counts() {
        let items = random_matrix(5, 3, 1);
        assert!(matches!(kmeans(&items, 0, 0), Err(Error::Config(_))));
        assert!(matches!(kmeans(&items, 6, 0), Err(Error::Config(_))));
    }

    #[test]
    fn well_separated_mixture_is_recovered() {
        // 8 orthogonal means, pairwise distance 10*sqrt(2) with sigma 1
        let g = 8;
        let d = 16;
        let n = 512;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let comp = i % g;
            let mut v: Vec<f32> = (0..d)
                .map(|_| {
                    let u: f32 = rng.gen_range(-1.0..1.0);
                    u
                })
                .collect();
            v[comp] += 10.0;
            rows.push(v);
            labels.push(comp);
        }
        let items = Matrix::from_rows(&rows).unwrap();
        let idx = kmeans(&items, g, 5).unwrap();

        // purity: fraction of items agreeing with their cluster's majority label
        let mut agree = 0usize;
        for m in &idx.members {
            let mut counts = vec![0usize; g];
            for &i in m {
                counts[labels[i as usize]] += 1;
            }
            agree += counts.iter().max().unwrap();
        }
        assert!(
            agree as f64 / n as f64 >= 0.99,
            "purity {} below 0.99",
            agree as f64 / n as f64
        );
    }

    #[test]
    fn objective_trace_never_increases() {
        let items = random_matrix(300, 8, 42);
        let (_, trace) = kmeans_with_trace(&items, 12, 9, false).unwrap();
        assert!(trace.len() >= 2, "expected multiple iterations");
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    fn store_with_random_keys(l: usize, d: usize, seed: u64) -> KeyStore {
        KeyStore::new(
            1,
            2,
            d,
            l,
            vec![random_matrix(l, d, seed), random_matrix(l, d, seed + 1)],
            vec![random_matrix(l, d, seed + 2), random_matrix(l, d, seed + 3)],
            None,
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_level_cluster_count() {
        let store = store_with_random_keys(1000, 4, 21);
        let params = IndexParams {
            level_fractions: vec![0.05],
            ..Default::default()
        };
        let index = build_index(&store, &params).unwrap();
        assert_eq!(index.num_levels(), 1);
        for head in &index.heads {
            assert_eq!(head.finest().num_clusters(), 50);
        }
    }

    #[test]
    fn two_level_cluster_counts_and_weights() {
        let store = store_with_random_keys(1000, 4, 22);
        let params = IndexParams {
            level_fractions: vec![0.01, 0.05],
            ..Default::default()
        };
        let index = build_index(&store, &params).unwrap();
        assert_eq!(index.num_levels(), 2);
        for head in &index.heads {
            assert_eq!(head.levels[0].num_clusters(), 10);
            assert_eq!(head.levels[1].num_clusters(), 50);
            let coarse_total: u32 = head.levels[0].key_weights.iter().sum();
            assert_eq!(coarse_total, 1000);
            // coarse sizes count child clusters, not keys
            let coarse_children: u32 = head.levels[0].sizes.iter().sum();
            assert_eq!(coarse_children, 50);
        }
        index.validate().unwrap();
    }

    #[test]
    fn same_seed_same_index() {
        let store = store_with_random_keys(256, 4, 23);
        let params = IndexParams {
            level_fractions: vec![0.02, 0.1],
            seed: 99,
            ..Default::default()
        };
        let a = build_index(&store, &params).unwrap();
        let b = build_index(&store, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_fractions() {
        let p = |fr: Vec<f64>| IndexParams {
            level_fractions: fr,
            ..Default::default()
        };
        assert!(p(vec![]).validate().is_err());
        assert!(p(vec![0.05, 0.01]).validate().is_err());
        assert!(p(vec![0.05, 0.05]).validate().is_err());
        assert!(p(vec![0.0, 0.05]).validate().is_err());
        assert!(p(vec![0.01, 1.5]).validate().is_err());
        assert!(p(vec![0.01, 0.05]).validate().is_ok());
    }

    #[test]
    fn validate_catches_corruption() {
        let store = store_with_random_keys(128, 4, 24);
        let params = IndexParams {
            level_fractions: vec![0.05, 0.2],
            ..Default::default()
        };
        let good = build_index(&store, &params).unwrap();

        let mut broken = good.clone();
        broken.heads[0].levels.last_mut().unwrap().members[0].push(0);
        assert!(matches!(broken.validate(), Err(Error::Invariant(_))));

        let mut broken = good.clone();
        broken.heads[0].levels[0].key_weights[0] += 1;
        assert!(matches!(broken.validate(), Err(Error::Invariant(_))));

        let mut broken = good;
        if let Some(p) = broken.heads[0].levels[1].parents.as_mut() {
            p[0] = u32::MAX;
        }
        assert!(matches!(broken.validate(), Err(Error::Invariant(_))));
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn kmeans_output_is_a_partition(
                n in 4usize..60,
                d in 2usize..6,
                c in 1usize..8,
                seed in 0u64..1000,
            ) {
                let c = c.min(n);
                let items = random_matrix(n, d, seed);
                let idx = kmeans(&items, c, seed).unwrap();
                prop_assert_eq!(idx.num_clusters(), c);
                let total: u32 = idx.sizes.iter().sum();
                prop_assert_eq!(total as usize, n);
                let mut seen = vec![false; n];
                for m in &idx.members {
                    prop_assert!(!m.is_empty());
                    for &i in m {
                        prop_assert!(!seen[i as usize]);
                        seen[i as usize] = true;
                    }
                }
                prop_assert!(seen.iter().all(|&s| s));
            }

            #[test]
            fn hierarchy_reaches_every_key_once(
                l in 16usize..120,
                seed in 0u64..500,
            ) {
                let store = store_with_random_keys(l, 3, seed);
                let params = IndexParams {
                    level_fractions: vec![0.04, 0.2],
                    seed,
                    ..Default::default()
                };
                let index = build_index(&store, &params).unwrap();
                prop_assert!(index.validate().is_ok());
                for head in &index.heads {
                    // walk coarse -> fine and collect reachable keys
                    let coarse = &head.levels[0];
                    let fine = &head.levels[1];
                    let mut reached = vec![0usize; l];
                    for m in &coarse.members {
                        for &child in m {
                            for &key in &fine.members[child as usize] {
                                reached[key as usize] += 1;
                            }
                        }
                    }
                    prop_assert!(reached.iter().all(|&r| r == 1));
                }
            }
        }
    }
}
