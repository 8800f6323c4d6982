use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Geometric KV-cache eviction: score key dumps, compress caches, and run
/// seeded synthetic retention experiments.
///
/// Options may also come from a JSON object passed with --config, keyed by
/// option name in snake_case (e.g. {"rho": 0.2, "k_grid": [1, 4]}). Flags on
/// the command line take precedence. KVM_SEED (comma-separated) replaces the
/// default seed list.
#[derive(Debug, Parser)]
#[command(name = "manifoldkv", version)]
pub struct Cli {
    /// Report format
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv, display_order = 900)]
    pub format: Format,

    /// Worker threads for parallel jobs [default: all cores]
    #[arg(long, global = true, display_order = 901)]
    pub jobs: Option<usize>,

    /// JSON file with option values; command-line flags take precedence
    #[arg(long, global = true, value_name = "FILE", display_order = 902)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every token of a KVT1 key tensor
    Score(ScoreArgs),
    /// Evict low-scoring tokens and write the compressed cache
    Compress(CompressArgs),
    /// Generate a synthetic scenario (keys plus needle sidecar)
    Gen(GenArgs),
    /// Sweep cluster counts: global vs windowed vs KeyDiff needle recall
    Dilution(DilutionArgs),
    /// Sweep window sizes on a cluster mixture
    Ablation(AblationArgs),
    /// Estimate intrinsic dimension (PCA, Two-NN, MLE) of key tensors
    DimEstimate(DimArgs),
    /// Needles sharing one direction at different magnitudes: manifold vs KeyDiff
    CollisionDemo(CollisionArgs),
    /// Check that every outlier survives a budget equal to the outlier count
    Separation(SeparationArgs),
    /// Score correlation and selection overlap between scorers
    Compare(CompareArgs),
    /// Paired two-sided t-test on two numeric CSV columns
    Ttest(TtestArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreArgs {
    /// Input key tensor (KVT1)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Scoring method: manifold, windowed, keydiff, knorm, l1, linf, hybrid, normalized, obs_attention [default: manifold]
    #[arg(long)]
    pub method: Option<String>,
    /// Window size in tokens (windowed only)
    #[arg(long)]
    pub window: Option<usize>,
    /// Weight of the manifold term in [0, 1] (hybrid only)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of trailing queries to aggregate (obs_attention only)
    #[arg(long)]
    pub obs_window: Option<usize>,
    /// Query tensor (KVT1) for obs_attention
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressArgs {
    /// Input key tensor (KVT1)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Value tensor (KVT1) [default: compress the keys only]
    #[arg(long)]
    pub values: Option<PathBuf>,
    /// Scoring method: manifold, windowed, keydiff, knorm, l1, linf, hybrid, normalized, obs_attention [default: manifold]
    #[arg(long)]
    pub method: Option<String>,
    /// Window size in tokens (windowed only)
    #[arg(long)]
    pub window: Option<usize>,
    /// Weight of the manifold term in [0, 1] (hybrid only)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of trailing queries to aggregate (obs_attention only)
    #[arg(long)]
    pub obs_window: Option<usize>,
    /// Query tensor (KVT1) for obs_attention
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Compression ratio: fraction of tokens evicted, in [0, 1) [default: 0.2]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Head budget allocation: uniform or proportional [default: uniform]
    #[arg(long)]
    pub budget_mode: Option<String>,
    /// Compressed key tensor (KVT1, padded per head)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compressed value tensor (KVT1); requires --values
    #[arg(long)]
    pub values_out: Option<PathBuf>,
    /// Validity mask sidecar [default: <out>.mask.json]
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    /// Retained indices as JSON
    #[arg(long)]
    pub retention_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArgs {
    /// Scenario kind: subspace, radial, clusters, collision [default: subspace]
    #[arg(long)]
    pub scenario: Option<String>,
    /// Regenerate from an existing scenario sidecar instead of flags
    #[arg(long)]
    pub from_sidecar: Option<PathBuf>,
    /// Tokens [default: subspace 4096, radial 64, clusters 16384, collision 256]
    #[arg(long)]
    pub n: Option<usize>,
    /// Head dimension [default: radial 8, otherwise 128]
    #[arg(long)]
    pub d: Option<usize>,
    /// Subspace dimension (subspace) [default: 9]
    #[arg(long)]
    pub k: Option<usize>,
    /// Per-coordinate spread inside the subspace (subspace) [default: 1.0]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Number of outliers (subspace) [default: 16]
    #[arg(long)]
    pub n_out: Option<usize>,
    /// Outlier offset (subspace) or angular jitter (radial, collision) [default: subspace 1.0, otherwise 0.1]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Raise the outlier offset above three common-cloud diameters (subspace) [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub strict_separation: Option<bool>,
    /// Needle magnitude along e1 (radial) [default: 100]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of clusters (clusters) [default: 16]
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Cluster standard deviation (clusters) [default: 1.0]
    #[arg(long)]
    pub spread: Option<f64>,
    /// Radius of the sphere holding cluster means (clusters) [default: 10.0]
    #[arg(long)]
    pub separation: Option<f64>,
    /// Randomly permute token order (clusters) [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shuffle: Option<bool>,
    /// Needle magnitudes, comma-separated (collision) [default: 2,5,10]
    #[arg(long, value_delimiter = ',')]
    pub magnitudes: Option<Vec<f64>>,
    /// Generator seed [default: first seed of KVM_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output key tensor (KVT1)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scenario sidecar JSON [default: <out>.json]
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Also write a query tensor (KVT1)
    #[arg(long)]
    pub queries_out: Option<PathBuf>,
    /// Queries to generate [default: 32]
    #[arg(long)]
    pub n_queries: Option<usize>,
    /// Query mode: random or needle_probing [default: needle_probing]
    #[arg(long)]
    pub query_mode: Option<String>,
    /// Gaussian noise added to needle-probing queries [default: 0.0]
    #[arg(long)]
    pub query_noise: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DilutionArgs {
    /// Cluster counts, comma-separated [default: 1,4,16,32]
    #[arg(long, value_delimiter = ',')]
    pub k_grid: Option<Vec<usize>>,
    /// Tokens per scenario [default: 16384]
    #[arg(long)]
    pub n: Option<usize>,
    /// Head dimension [default: 128]
    #[arg(long)]
    pub d: Option<usize>,
    /// Compression ratio in [0, 1) [default: 0.25]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Window size in tokens [default: n / K per grid point]
    #[arg(long)]
    pub window: Option<usize>,
    /// Cluster standard deviation [default: 1.0]
    #[arg(long)]
    pub spread: Option<f64>,
    /// Radius of the sphere holding cluster means [default: 10.0]
    #[arg(long)]
    pub separation: Option<f64>,
    /// Randomly permute token order [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shuffle: Option<bool>,
    /// Seeds, comma-separated [default: KVM_SEED, else 0,1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationArgs {
    /// Window sizes, comma-separated [default: 256,512,1024,2048,4096,16384]
    #[arg(long, value_delimiter = ',')]
    pub w_grid: Option<Vec<usize>>,
    /// Tokens per scenario [default: 16384]
    #[arg(long)]
    pub n: Option<usize>,
    /// Head dimension [default: 128]
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of clusters [default: 16]
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Cluster standard deviation [default: 1.0]
    #[arg(long)]
    pub spread: Option<f64>,
    /// Radius of the sphere holding cluster means [default: 10.0]
    #[arg(long)]
    pub separation: Option<f64>,
    /// Randomly permute token order [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shuffle: Option<bool>,
    /// Compression ratio in [0, 1) [default: 0.25]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Seeds, comma-separated [default: KVM_SEED, else 0,1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimArgs {
    /// Input tensor (KVT1)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Variance share for the PCA effective dimension [default: 0.95]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Neighbors for the MLE estimate [default: 10]
    #[arg(long)]
    pub k_neighbors: Option<usize>,
    /// Pool all (batch, head) slices into one point cloud [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub pooled: Option<bool>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionArgs {
    /// Needle magnitudes, comma-separated [default: 2,5,10]
    #[arg(long, value_delimiter = ',')]
    pub magnitudes: Option<Vec<f64>>,
    /// Angular jitter of common tokens [default: 0.1]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Tokens [default: 256]
    #[arg(long)]
    pub n: Option<usize>,
    /// Head dimension [default: 128]
    #[arg(long)]
    pub d: Option<usize>,
    /// Compression ratio in [0, 1) [default: 0.5]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Seeds, comma-separated [default: KVM_SEED, else 0,1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationArgs {
    /// Outlier family: subspace (orthogonal offsets) or radial (parallel, large magnitude) [default: subspace]
    #[arg(long)]
    pub family: Option<String>,
    /// Scoring method: manifold, windowed, keydiff, knorm, l1, linf, hybrid, normalized, obs_attention [default: manifold]
    #[arg(long)]
    pub method: Option<String>,
    /// Window size in tokens (windowed only)
    #[arg(long)]
    pub window: Option<usize>,
    /// Weight of the manifold term in [0, 1] (hybrid only)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of trailing queries to aggregate (obs_attention only)
    #[arg(long)]
    pub obs_window: Option<usize>,
    /// Subspace dimension [default: 9]
    #[arg(long)]
    pub k: Option<usize>,
    /// Head dimension [default: 128]
    #[arg(long)]
    pub d: Option<usize>,
    /// Per-coordinate spread inside the subspace [default: 1.0]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Minimum outlier offset (subspace) or jitter (radial) [default: 1.0]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Token counts, comma-separated [default: 4096]
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    /// Outliers per scenario; also the retention budget [default: 16]
    #[arg(long)]
    pub n_out: Option<usize>,
    /// Seeds, comma-separated [default: KVM_SEED, else 0,1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareArgs {
    /// Input key tensor (KVT1); no needle recall is reported
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Scenario sidecar; keys are regenerated and needle recall reported
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Scorers, comma-separated, parameters after a colon (windowed:512, hybrid:0.3, obs_attention:32) [default: manifold,keydiff]
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Query tensor (KVT1) for obs_attention
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Compression ratio in [0, 1) [default: 0.2]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtestArgs {
    /// First sample (CSV)
    #[arg(long)]
    pub a: Option<PathBuf>,
    /// Second sample (CSV), paired row by row with --a
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// Column to read, by header name [default: first column]
    #[arg(long)]
    pub column: Option<String>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}
