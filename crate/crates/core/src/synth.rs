//! Gaussian-mixture test data with known structure.
//!
//! Keys are drawn around `components` orthogonal mean vectors with exact
//! pairwise separation `separation` and per-coordinate noise `sigma`, so
//! ground-truth cluster labels are known and the ratio
//! `separation / sigma` directly controls how recoverable the structure is.
//! Values are standard normal. Calibration queries either align with a
//! mixture component (cycling through them) or point in a uniformly random
//! direction, with their own noise level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::{save_tensors, KeyStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Query r points along component (r mod components).
    Aligned,
    /// Uniformly random unit direction.
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    /// Mixture component count G; requires G <= head_dim so the means can
    /// be mutually orthogonal.
    pub components: usize,
    /// Exact pairwise distance between component means.
    pub separation: f32,
    /// Per-coordinate key noise.
    pub sigma: f32,
    /// Norm of the deterministic part of each calibration query.
    pub query_scale: f32,
    /// Per-coordinate query noise.
    pub query_noise: f32,
    pub calib_window: usize,
    pub query_mode: QueryMode,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_layers: 1,
            num_heads: 2,
            head_dim: 32,
            seq_len: 4096,
            components: 8,
            separation: 10.0,
            sigma: 1.0,
            query_scale: 4.0,
            query_noise: 0.25,
            calib_window: 100,
            query_mode: QueryMode::Random,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("all dimensions must be at least 1".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("components must be at least 1".into()));
        }
        if self.components > self.head_dim {
            return Err(Error::Config(format!(
                "components {} exceed head_dim {}: orthogonal means impossible",
                self.components, self.head_dim
            )));
        }
        if self.separation.partial_cmp(&0.0) != Some(Ordering::Greater)
            || self.sigma.partial_cmp(&0.0) != Some(Ordering::Greater)
        {
            return Err(Error::Config(
                "separation and sigma must be positive".into(),
            ));
        }
        if self.query_scale.partial_cmp(&0.0) != Some(Ordering::Greater) || self.query_noise < 0.0 {
            return Err(Error::Config(
                "query_scale must be positive and query_noise non-negative".into(),
            ));
        }
        if self.calib_window == 0 || self.calib_window >= self.seq_len {
            return Err(Error::Config(format!(
                "calib_window {} must be in [1, seq_len)",
                self.calib_window
            )));
        }
        Ok(())
    }
}

/// Generated tensors plus the ground truth behind them.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub store: KeyStore,
    /// Component label per key, per (layer, head) flat index.
    pub labels: Vec<Vec<u32>>,
    /// Unit component directions, one (components x head_dim) matrix per
    /// head.
    pub directions: Vec<Matrix>,
    /// Component each calibration query aligns with (aligned mode only).
    pub query_components: Option<Vec<Vec<u32>>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Mutually orthogonal unit directions via Gram-Schmidt on Gaussian draws.
fn orthonormal_directions(rng: &mut ChaCha8Rng, g: usize, d: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(g);
    while dirs.len() < g {
        let mut v = normal_vec(rng, d);
        for u in &dirs {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially collinear draw; retry
        }
        for x in &mut v {
            *x /= norm;
        }
        dirs.push(v);
    }
    dirs
}

/// Builds the mixture store in memory.
pub fn synth_store(spec: &SyntheticSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.head_dim;
    let g = spec.components;
    let mean_norm = f64::from(spec.separation) / 2.0f64.sqrt();

    let heads_total = spec.num_layers * spec.num_heads;
    let mut keys = Vec::with_capacity(heads_total);
    let mut values = Vec::with_capacity(heads_total);
    let mut calib = Vec::with_capacity(heads_total);
    let mut labels = Vec::with_capacity(heads_total);
    let mut directions = Vec::with_capacity(heads_total);
    let mut query_components = Vec::with_capacity(heads_total);

    for _ in 0..heads_total {
        let dirs = orthonormal_directions(&mut rng, g, d);
        let mut key_data = Vec::with_capacity(spec.seq_len * d);
        let mut head_labels = Vec::with_capacity(spec.seq_len);
        for _ in 0..spec.seq_len {
            let comp = rng.gen_range(0..g);
            head_labels.push(comp as u32);
            for (i, n) in normal_vec(&mut rng, d).into_iter().enumerate() {
                key_data.push((mean_norm * dirs[comp][i] + f64::from(spec.sigma) * n) as f32);
            }
        }
        keys.push(Matrix::new(spec.seq_len, d, key_data)?);

        let value_data: Vec<f32> = normal_vec(&mut rng, spec.seq_len * d)
            .into_iter()
            .map(|x| x as f32)
            .collect();
        values.push(Matrix::new(spec.seq_len, d, value_data)?);

        let mut q_data = Vec::with_capacity(spec.calib_window * d);
        let mut q_comps = Vec::with_capacity(spec.calib_window);
        for r in 0..spec.calib_window {
            let dir: Vec<f64> = match spec.query_mode {
                QueryMode::Aligned => {
                    q_comps.push((r % g) as u32);
                    dirs[r % g].clone()
                }
                QueryMode::Random => {
                    let v = normal_vec(&mut rng, d);
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|x| x / norm).collect()
                }
            };
            for (i, n) in normal_vec(&mut rng, d).into_iter().enumerate() {
                q_data.push(
                    (f64::from(spec.query_scale) * dir[i] + f64::from(spec.query_noise) * n) as f32,
                );
            }
        }
        calib.push(Matrix::new(spec.calib_window, d, q_data)?);
        labels.push(head_labels);
        directions.push(Matrix::new(
            g,
            d,
            dirs.iter().flatten().map(|&x| x as f32).collect(),
        )?);
        query_components.push(q_comps);
    }

    let store = KeyStore::new(
        spec.num_layers,
        spec.num_heads,
        d,
        spec.seq_len,
        keys,
        values,
        Some(calib),
        spec.calib_window,
    )?;
    Ok(SynthData {
        store,
        labels,
        directions,
        query_components: matches!(spec.query_mode, QueryMode::Aligned).then_some(query_components),
    })
}

/// Generates the mixture and writes it as a tensor file pair.
pub fn gen_synthetic(
    spec: &SyntheticSpec,
    header_path: &Path,
    blob_path: &Path,
) -> Result<SynthData> {
    let data = synth_store(spec)?;
    save_tensors(&data.store, header_path, blob_path)?;
    Ok(data)
}
