//! Geometric KV-cache compression.
//!
//! Scores cached key vectors by their geometry (L2 distance from a global or
//! windowed centroid, plus cosine, norm and attention baselines), evicts the
//! low scorers under a memory budget, and ships the tooling needed to check
//! the behaviour of those scorers on seeded synthetic key clouds:
//! intrinsic-dimension estimators, scenario generators and a small
//! experiment harness.
//!
//! Module map:
//!
//! - [`tensor`]: `(batch, head, seq, dim)` key tensors and the KVT1 file format.
//! - [`scorers`]: per-token importance scores.
//! - [`eviction`]: budgets, TopK retention, compressed caches, head budgets.
//! - [`attention`]: reference softmax attention, quality and agreement metrics.
//! - [`manifold`]: PCA, Two-NN and MLE intrinsic-dimension estimates.
//! - [`synth`]: seeded scenario generators with ground-truth needles.
//! - [`eval`]: retention metrics, sweeps and the paired t-test.
//! - [`report`]: tabular CSV/JSON experiment output.

pub mod attention;
pub mod error;
pub mod eval;
pub mod eviction;
pub mod manifold;
pub mod report;
pub mod scorers;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use eviction::{BudgetMode, BudgetPlan, RetentionSet};
pub use report::{Cell, Report};
pub use scorers::ScorerSpec;
pub use synth::{Scenario, ScenarioParams};
pub use tensor::{KeyTensor, MatrixView, ScoreTensor, Shape};
