//! Sparse attention over a fixed context via offline key clustering and
//! online centroid lookup.
//!
//! The pipeline has an offline and an online half. Offline, the keys of a
//! fixed context are grouped by cosine similarity into clusters, each
//! represented by a centroid; clustering can be repeated on the centroids to
//! form a coarse-to-fine hierarchy ([`cluster`]). Online, incoming query
//! vectors are scored against the centroids with a size-weighted softmax and
//! only clusters above a global threshold are retrieved ([`lookup`]); exact
//! attention then runs over the retrieved keys alone, using block-partitioned
//! streaming softmax ([`attention`]).
//!
//! Supporting pieces: [`tensor`] holds the numeric primitives (stable
//! softmax, mergeable streaming-softmax partials), [`store`] the on-disk
//! tensor and index formats, [`synth`] a Gaussian-mixture data generator, and
//! [`harness`] the oracle comparisons, skewness analysis, and
//! operation-counting complexity sweeps used to validate the method.

pub mod attention;
pub mod cluster;
pub mod error;
pub mod harness;
pub mod lookup;
pub mod store;
pub mod synth;
pub mod tensor;

pub use attention::{
    dense_attention, ideal_lookup, output_error_bound_check, sparse_attention, AttentionOutput,
    AttentionRequest, ErrorBoundReport,
};
pub use cluster::{build_index, kmeans, ClusterIndex, HeadIndex, HierarchicalIndex, IndexParams};
pub use error::{Error, Result};
pub use harness::{
    complexity_sweep, oracle_compare, skewness, summarize_oracle, top_mass, write_csv_records,
    write_json_report, ComplexityParams, ComplexityPoint, CsvRecord, OracleRow, OracleSummary,
    RunReport, SkewRow, SCHEMA_VERSION,
};
pub use lookup::{
    calibrate_level_thresholds, calibrate_threshold, expected_budget, kv_budget, score_clusters,
    select_generation_singlepass, select_hierarchical, select_prefill, select_single_level,
    BudgetReport, GenerationLookupState, LookupConfig, ScoreVector, SelectionResult,
};
pub use store::{load_index, load_tensors, save_index, save_tensors, KeyStore, TensorHeader};
pub use synth::{gen_synthetic, synth_store, QueryMode, SyntheticSpec};
pub use tensor::{stable_softmax, Matrix, SoftmaxPartial};
