//! `sqz` — command-line driver for the centroid-indexed sparse attention
//! library: synthetic data generation, index construction, threshold
//! calibration, retrieval, attention, and the measurement harness.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 unreadable or
//! malformed data, 4 violated runtime invariant (including empty
//! selections reaching the attention stage).

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use sqz_core::attention::{dense_attention_head, sparse_attention_head};
use sqz_core::cluster::{build_index, HierarchicalIndex, IndexParams};
use sqz_core::harness::{
    complexity_sweep, oracle_compare, skewness, summarize_oracle, write_csv_records,
    write_json_report, ComplexityParams, CsvRecord, OracleRow, OracleSummary, RunReport,
};
use sqz_core::lookup::{
    calibrate_level_thresholds, calibrate_threshold, kv_budget, select_generation_singlepass,
    select_hierarchical, select_prefill, LookupConfig, SelectionResult,
};
use sqz_core::store::{load_index, load_tensors, save_index, KeyStore};
use sqz_core::synth::{gen_synthetic, QueryMode, SyntheticSpec};
use sqz_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sqz",
    version,
    about = "Sparse attention over clustered fixed contexts"
)]
struct Cli {
    /// Seed for anything randomized (data generation, clustering).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Rayon worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DataArgs {
    /// Tensor header (JSON).
    #[arg(long)]
    header: PathBuf,
    /// Tensor blob (little-endian f32).
    #[arg(long)]
    blob: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Write the full run report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the per-row results as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// Score threshold at the finest level.
    #[arg(long)]
    threshold: Option<f64>,
    /// Comma-separated thresholds for the coarse levels, coarsest first.
    #[arg(long, value_delimiter = ',')]
    level_thresholds: Option<Vec<f64>>,
    /// Average scores over the whole calibration window and share one
    /// retrieved set (prefill); default scores one query at a time.
    #[arg(long)]
    prefill: bool,
    /// Calibration-window row to use in per-query mode (default: last).
    #[arg(long)]
    query_row: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryModeArg {
    Aligned,
    Random,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a Gaussian-mixture tensor pair with calibration queries.
    GenSynthetic {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        num_layers: Option<usize>,
        #[arg(long)]
        num_heads: Option<usize>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        /// Mixture components per head.
        #[arg(long)]
        components: Option<usize>,
        /// Pairwise distance between component means.
        #[arg(long)]
        separation: Option<f32>,
        /// Per-coordinate key noise.
        #[arg(long)]
        sigma: Option<f32>,
        #[arg(long)]
        query_scale: Option<f32>,
        #[arg(long)]
        query_noise: Option<f32>,
        #[arg(long)]
        calib_window: Option<usize>,
        #[arg(long, value_enum)]
        query_mode: Option<QueryModeArg>,
    },
    /// Cluster the keys and write the hierarchical index.
    BuildIndex {
        #[command(flatten)]
        data: DataArgs,
        /// Output index file.
        #[arg(long)]
        out: PathBuf,
        /// Cluster-count fractions of seq_len, coarsest first (one entry
        /// builds a single-level index).
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        /// Store spherical (normalized) centroids instead of raw key means.
        #[arg(long)]
        normalized_centroids: bool,
    },
    /// Pick score thresholds from the calibration queries.
    Calibrate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        index: PathBuf,
        /// Fraction of keys the finest threshold should drop.
        #[arg(long)]
        target_sparsity: Option<f64>,
        /// Fraction of keys each coarse level should prune.
        #[arg(long, default_value_t = 0.5)]
        prune_fraction: f64,
        #[arg(long)]
        calib_window: Option<usize>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Retrieve keys per head and report sizes, budgets, comparisons.
    Lookup {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        index: PathBuf,
        #[command(flatten)]
        select: SelectArgs,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Run sparse attention over the retrieved keys and compare against
    /// the dense reference.
    Attend {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        index: PathBuf,
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, default_value_t = 128)]
        block_size: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Compare centroid retrieval against the ideal top-k oracle.
    OracleCompare {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        level_thresholds: Option<Vec<f64>>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Measure how concentrated the true attention scores are.
    AnalyzeSkew {
        #[command(flatten)]
        data: DataArgs,
        /// Fraction of keys counted as the top slice.
        #[arg(long, default_value_t = 0.01)]
        top_frac: f64,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Count score comparisons across context lengths.
    BenchComplexity {
        /// Context lengths, each base * 2^i.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "65536,131072,262144,524288"
        )]
        lens: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        c_prime: usize,
        #[arg(long, default_value_t = 512)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        head_dim: usize,
        #[arg(long, default_value_t = 1024)]
        base: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
}

/// Optional JSON config: `{"lookup": {...}, "index": {...}, "synthetic":
/// {...}}`, each section partial. Flags win over file values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    lookup: Option<LookupConfig>,
    index: Option<IndexSection>,
    synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct IndexSection {
    level_fractions: Option<Vec<f64>>,
    normalized_centroids: Option<bool>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("config file: {e}")))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Dimension(_) => 3,
        Error::Invariant(_) | Error::EmptySelection(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let file_cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.cmd {
        Cmd::GenSynthetic {
            data,
            num_layers,
            num_heads,
            head_dim,
            seq_len,
            components,
            separation,
            sigma,
            query_scale,
            query_noise,
            calib_window,
            query_mode,
        } => {
            let mut spec = file_cfg.synthetic.unwrap_or_default();
            spec.seed = seed;
            set(&mut spec.num_layers, num_layers);
            set(&mut spec.num_heads, num_heads);
            set(&mut spec.head_dim, head_dim);
            set(&mut spec.seq_len, seq_len);
            set(&mut spec.components, components);
            set(&mut spec.separation, separation);
            set(&mut spec.sigma, sigma);
            set(&mut spec.query_scale, query_scale);
            set(&mut spec.query_noise, query_noise);
            set(&mut spec.calib_window, calib_window);
            if let Some(mode) = query_mode {
                spec.query_mode = match mode {
                    QueryModeArg::Aligned => QueryMode::Aligned,
                    QueryModeArg::Random => QueryMode::Random,
                };
            }
            cmd_gen_synthetic(&spec, &data)
        }
        Cmd::BuildIndex {
            data,
            out,
            levels,
            normalized_centroids,
        } => {
            let section = file_cfg.index.unwrap_or_default();
            let params = IndexParams {
                level_fractions: levels
                    .or(section.level_fractions)
                    .unwrap_or_else(|| IndexParams::default().level_fractions),
                seed,
                normalized_centroids: normalized_centroids
                    || section.normalized_centroids.unwrap_or(false),
            };
            cmd_build_index(&data, &out, &params)
        }
        Cmd::Calibrate {
            data,
            index,
            target_sparsity,
            prune_fraction,
            calib_window,
            report,
        } => {
            let mut cfg = file_cfg.lookup.unwrap_or_default();
            set(&mut cfg.target_sparsity, target_sparsity);
            set(&mut cfg.calib_window, calib_window);
            cmd_calibrate(&data, &index, cfg, prune_fraction, seed, &report)
        }
        Cmd::Lookup {
            data,
            index,
            select,
            report,
        } => {
            let cfg = select_config(file_cfg.lookup, &select)?;
            cmd_lookup(&data, &index, &cfg, &select, seed, &report)
        }
        Cmd::Attend {
            data,
            index,
            select,
            block_size,
            report,
        } => {
            let cfg = select_config(file_cfg.lookup, &select)?;
            cmd_attend(&data, &index, &cfg, &select, block_size, seed, &report)
        }
        Cmd::OracleCompare {
            data,
            index,
            threshold,
            level_thresholds,
            report,
        } => {
            let mut cfg = file_cfg.lookup.unwrap_or_default();
            set(&mut cfg.threshold, threshold);
            if let Some(ts) = level_thresholds {
                cfg.level_thresholds = ts;
            }
            cmd_oracle_compare(&data, &index, &cfg, seed, &report)
        }
        Cmd::AnalyzeSkew {
            data,
            top_frac,
            report,
        } => cmd_analyze_skew(&data, top_frac, seed, &report),
        Cmd::BenchComplexity {
            lens,
            c_prime,
            k,
            head_dim,
            base,
            report,
        } => {
            let params = ComplexityParams {
                c_prime,
                k,
                head_dim,
                base,
                seed,
                ..Default::default()
            };
            cmd_bench_complexity(&lens, &params, seed, &report)
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn select_config(file: Option<LookupConfig>, select: &SelectArgs) -> Result<LookupConfig> {
    let mut cfg = file.unwrap_or_default();
    set(&mut cfg.threshold, select.threshold);
    if let Some(ts) = &select.level_thresholds {
        cfg.level_thresholds = ts.clone();
    }
    Ok(cfg)
}

fn load_pair(data: &DataArgs) -> Result<KeyStore> {
    load_tensors(&data.header, &data.blob)
}

fn emit<T: Serialize, R: CsvRecord>(
    verb: &str,
    seed: u64,
    config: serde_json::Value,
    data: T,
    rows: &[R],
    started: Instant,
    report: &ReportArgs,
) -> Result<()> {
    if let Some(path) = &report.json {
        let mut rep = RunReport::new(verb, seed, config, data);
        rep.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        write_json_report(&rep, path)?;
    }
    if let Some(path) = &report.csv {
        write_csv_records(rows, path)?;
    }
    Ok(())
}

fn cmd_gen_synthetic(spec: &SyntheticSpec, data: &DataArgs) -> Result<()> {
    let started = Instant::now();
    gen_synthetic(spec, &data.header, &data.blob)?;
    let bytes = std::fs::metadata(&data.blob)?.len();
    println!(
        "wrote {} layers x {} heads, {} keys x {} dims, window {} ({} mixture components, separation {}, sigma {})",
        spec.num_layers,
        spec.num_heads,
        spec.seq_len,
        spec.head_dim,
        spec.calib_window,
        spec.components,
        spec.separation,
        spec.sigma
    );
    println!(
        "{} + {} ({bytes} bytes) in {:.0} ms",
        data.header.display(),
        data.blob.display(),
        started.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn cmd_build_index(data: &DataArgs, out: &Path, params: &IndexParams) -> Result<()> {
    let started = Instant::now();
    let store = load_pair(data)?;
    let index = build_index(&store, params)?;
    save_index(&index, out)?;
    let counts: Vec<usize> = index.heads[0]
        .levels
        .iter()
        .map(|l| l.num_clusters())
        .collect();
    println!(
        "built {}-level index (clusters per head, coarse to fine: {:?}) over {} keys x {} heads in {:.0} ms",
        counts.len(),
        counts,
        store.seq_len,
        store.heads_total(),
        started.elapsed().as_secs_f64() * 1e3
    );
    println!("{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct CalibrationOutput {
    threshold: f64,
    level_thresholds: Vec<f64>,
    target_keep_fraction: f64,
    achieved_keep_fraction: f64,
}

/// Re-runs window-averaged selection with the calibrated thresholds and
/// counts the kept key fraction.
fn achieved_retention(
    store: &KeyStore,
    index: &HierarchicalIndex,
    cfg: &LookupConfig,
) -> Result<f64> {
    let mut kept = 0usize;
    for h in 0..store.heads_total() {
        let queries = store
            .calib_queries_flat(h)
            .ok_or_else(|| Error::Config("store has no calibration queries".into()))?;
        let first = queries.rows() - cfg.calib_window.min(queries.rows());
        let window = sqz_core::tensor::Matrix::from_rows(
            &(first..queries.rows())
                .map(|r| queries.row(r).to_vec())
                .collect::<Vec<_>>(),
        )?;
        kept += select_prefill(&window, &index.heads[h], cfg)?.k();
    }
    Ok(kept as f64 / (store.heads_total() * store.seq_len) as f64)
}

fn cmd_calibrate(
    data: &DataArgs,
    index_path: &Path,
    mut cfg: LookupConfig,
    prune_fraction: f64,
    seed: u64,
    report: &ReportArgs,
) -> Result<()> {
    let started = Instant::now();
    let store = load_pair(data)?;
    let index = load_index(index_path)?;
    let level_thresholds = if index.num_levels() >= 2 {
        calibrate_level_thresholds(&store, &index, &cfg, prune_fraction)?
    } else {
        Vec::new()
    };
    cfg.level_thresholds = level_thresholds.clone();
    let threshold = calibrate_threshold(&store, &index, &cfg)?;
    cfg.threshold = threshold;
    let out = CalibrationOutput {
        threshold,
        level_thresholds,
        target_keep_fraction: 1.0 - cfg.target_sparsity,
        achieved_keep_fraction: achieved_retention(&store, &index, &cfg)?,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    emit(
        "calibrate",
        seed,
        serde_json::to_value(&cfg)?,
        &out,
        &[] as &[OracleRow],
        started,
        report,
    )
}

#[derive(Debug, Clone, Serialize)]
struct SelectionRow {
    layer: usize,
    head: usize,
    k: usize,
    key_fraction: f64,
    comparisons: u64,
    budget: f64,
}

impl CsvRecord for SelectionRow {
    const HEADER: &'static [&'static str] = &[
        "layer",
        "head",
        "k",
        "key_fraction",
        "comparisons",
        "budget",
    ];
    fn record(&self) -> Vec<String> {
        vec![
            self.layer.to_string(),
            self.head.to_string(),
            self.k.to_string(),
            format!("{:.6}", self.key_fraction),
            self.comparisons.to_string(),
            format!("{:.6}", self.budget),
        ]
    }
}

fn head_selection(
    store: &KeyStore,
    index: &HierarchicalIndex,
    cfg: &LookupConfig,
    select: &SelectArgs,
    h: usize,
) -> Result<SelectionResult> {
    let queries = store
        .calib_queries_flat(h)
        .ok_or_else(|| Error::Config("store has no calibration queries".into()))?;
    let head = &index.heads[h];
    if select.prefill {
        return select_prefill(queries, head, cfg);
    }
    let row = select.query_row.unwrap_or(queries.rows() - 1);
    if row >= queries.rows() {
        return Err(Error::Config(format!(
            "--query-row {row} out of range ({} calibration rows)",
            queries.rows()
        )));
    }
    let q = queries.row(row);
    if head.levels.len() == 1 {
        select_generation_singlepass(q, head.finest(), cfg.threshold, cfg.scale_logits)
    } else {
        select_hierarchical(q, head, cfg)
    }
}

fn cmd_lookup(
    data: &DataArgs,
    index_path: &Path,
    cfg: &LookupConfig,
    select: &SelectArgs,
    seed: u64,
    report: &ReportArgs,
) -> Result<()> {
    let started = Instant::now();
    let store = load_pair(data)?;
    let index = load_index(index_path)?;
    let mut rows = Vec::with_capacity(store.heads_total());
    for h in 0..store.heads_total() {
        let sel = head_selection(&store, &index, cfg, select, h)?;
        let (layer, head) = (h / store.num_heads, h % store.num_heads);
        let budget = kv_budget(&sel, index.centroid_count(layer, head), store.seq_len);
        rows.push(SelectionRow {
            layer,
            head,
            k: sel.k(),
            key_fraction: budget.key_fraction,
            comparisons: sel.comparisons,
            budget: budget.budget,
        });
    }
    let mean_frac = rows.iter().map(|r| r.key_fraction).sum::<f64>() / rows.len() as f64;
    let mean_budget = rows.iter().map(|r| r.budget).sum::<f64>() / rows.len() as f64;
    let comparisons: u64 = rows.iter().map(|r| r.comparisons).sum();
    println!(
        "retrieved {:.2}% of keys per head on average (KV budget {:.4}, {} comparisons across {} heads)",
        100.0 * mean_frac,
        mean_budget,
        comparisons,
        rows.len()
    );
    emit(
        "lookup",
        seed,
        serde_json::to_value(cfg)?,
        &rows,
        &rows,
        started,
        report,
    )
}

#[derive(Debug, Clone, Serialize)]
struct AttendRow {
    layer: usize,
    head: usize,
    k: usize,
    budget: f64,
    max_abs_err: f64,
    max_logit: f64,
    denominator: f64,
}

impl CsvRecord for AttendRow {
    const HEADER: &'static [&'static str] = &[
        "layer",
        "head",
        "k",
        "budget",
        "max_abs_err",
        "max_logit",
        "denominator",
    ];
    fn record(&self) -> Vec<String> {
        vec![
            self.layer.to_string(),
            self.head.to_string(),
            self.k.to_string(),
            format!("{:.6}", self.budget),
            format!("{:.6e}", self.max_abs_err),
            format!("{:.6e}", self.max_logit),
            format!("{:.6e}", self.denominator),
        ]
    }
}

fn cmd_attend(
    data: &DataArgs,
    index_path: &Path,
    cfg: &LookupConfig,
    select: &SelectArgs,
    block_size: usize,
    seed: u64,
    report: &ReportArgs,
) -> Result<()> {
    let started = Instant::now();
    let store = load_pair(data)?;
    let index = load_index(index_path)?;
    let mut rows = Vec::with_capacity(store.heads_total());
    for h in 0..store.heads_total() {
        let sel = head_selection(&store, &index, cfg, select, h)?;
        let queries = store.calib_queries_flat(h).expect("checked in selection");
        let query_rows: Vec<usize> = if select.prefill {
            (0..queries.rows()).collect()
        } else {
            vec![select.query_row.unwrap_or(queries.rows() - 1)]
        };
        let keys = store.keys_flat(h);
        let values = store.values_flat(h);
        let (layer, head) = (h / store.num_heads, h % store.num_heads);
        let mut max_abs_err = 0.0f64;
        let mut stats = None;
        for &r in &query_rows {
            let q = queries.row(r);
            let (sparse, st) =
                sparse_attention_head(q, keys, values, &sel.selected, block_size, None)?;
            let (dense, _) = dense_attention_head(q, keys, values)?;
            let err = sparse
                .iter()
                .zip(&dense)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
                .fold(0.0, f64::max);
            max_abs_err = max_abs_err.max(err);
            stats = Some(st);
        }
        let stats = stats.expect("at least one query row");
        rows.push(AttendRow {
            layer,
            head,
            k: sel.k(),
            budget: kv_budget(&sel, index.centroid_count(layer, head), store.seq_len).budget,
            max_abs_err,
            max_logit: stats.max_logit,
            denominator: stats.denominator,
        });
    }
    let worst = rows.iter().map(|r| r.max_abs_err).fold(0.0, f64::max);
    println!(
        "sparse attention over {} heads, block size {}: max |sparse - dense| = {:.3e}",
        rows.len(),
        block_size,
        worst
    );
    emit(
        "attend",
        seed,
        serde_json::to_value(cfg)?,
        &rows,
        &rows,
        started,
        report,
    )
}

#[derive(Serialize)]
struct OracleData {
    summary: OracleSummary,
    rows: Vec<OracleRow>,
}

fn cmd_oracle_compare(
    data: &DataArgs,
    index_path: &Path,
    cfg: &LookupConfig,
    seed: u64,
    report: &ReportArgs,
) -> Result<()> {
    let started = Instant::now();
    let store = load_pair(data)?;
    let index = load_index(index_path)?;
    let rows = oracle_compare(&store, &index, cfg)?;
    let summary = summarize_oracle(&rows);
    println!(
        "{} queries: set recall {:.4}, mass recall {:.4} (ideal {:.4}), max output err {:.3e}, mean budget {:.4}",
        summary.rows,
        summary.mean_set_recall,
        summary.mean_mass_recall,
        summary.mean_ideal_mass,
        summary.max_abs_err,
        summary.mean_budget
    );
    let data_out = OracleData { summary, rows };
    emit(
        "oracle-compare",
        seed,
        serde_json::to_value(cfg)?,
        &data_out,
        &data_out.rows,
        started,
        report,
    )
}

fn cmd_analyze_skew(data: &DataArgs, top_frac: f64, seed: u64, report: &ReportArgs) -> Result<()> {
    let started = Instant::now();
    let store = load_pair(data)?;
    let rows = skewness(&store, top_frac)?;
    let mean = rows.iter().map(|r| r.mass).sum::<f64>() / rows.len() as f64;
    for row in &rows {
        println!(
            "layer {} head {}: top {:.2}% of keys hold {:.4} of attention mass",
            row.layer,
            row.head,
            100.0 * top_frac,
            row.mass
        );
    }
    println!("mean over {} heads: {mean:.4}", rows.len());
    emit(
        "analyze-skew",
        seed,
        serde_json::json!({ "top_frac": top_frac }),
        &rows,
        &rows,
        started,
        report,
    )
}

fn cmd_bench_complexity(
    lens: &[usize],
    params: &ComplexityParams,
    seed: u64,
    report: &ReportArgs,
) -> Result<()> {
    let started = Instant::now();
    let points = complexity_sweep(lens, params)?;
    println!(
        "{:>10} {:>7} {:>12} {:>12} {:>12}",
        "seq_len", "levels", "dense", "single", "hier"
    );
    for p in &points {
        println!(
            "{:>10} {:>7} {:>12} {:>12} {:>12}",
            p.seq_len, p.levels, p.dense, p.single_level, p.hierarchical
        );
    }
    if points.len() >= 2 {
        let last = &points[points.len() - 1];
        let prev = &points[points.len() - 2];
        println!(
            "doubling {} -> {}: dense x{:.2}, hierarchical x{:.3}",
            prev.seq_len,
            last.seq_len,
            last.dense as f64 / prev.dense as f64,
            last.hierarchical as f64 / prev.hierarchical as f64
        );
    }
    emit(
        "bench-complexity",
        seed,
        serde_json::to_value(params)?,
        &points,
        &points,
        started,
        report,
    )
}
