//! Shared fixture builders for the pipeline benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqz_core::cluster::{build_index, HierarchicalIndex, IndexParams};
use sqz_core::store::KeyStore;
use sqz_core::tensor::Matrix;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).expect("finite random data")
}

pub fn random_query(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn single_head_store(seq_len: usize, head_dim: usize, seed: u64) -> KeyStore {
    let keys = random_matrix(seq_len, head_dim, seed);
    let values = random_matrix(seq_len, head_dim, seed.wrapping_add(1));
    KeyStore::new(1, 1, head_dim, seq_len, vec![keys], vec![values], None, 0)
        .expect("consistent shapes")
}

pub fn indexed_store(
    seq_len: usize,
    head_dim: usize,
    level_fractions: Vec<f64>,
    seed: u64,
) -> (KeyStore, HierarchicalIndex) {
    let store = single_head_store(seq_len, head_dim, seed);
    let index = build_index(
        &store,
        &IndexParams {
            level_fractions,
            seed,
            normalized_centroids: false,
        },
    )
    .expect("index builds");
    (store, index)
}

/// Every `stride`-th key index, ascending — a fixed-fraction selection.
pub fn strided_selection(seq_len: usize, stride: usize) -> Vec<u32> {
    (0..seq_len as u32).step_by(stride).collect()
}
