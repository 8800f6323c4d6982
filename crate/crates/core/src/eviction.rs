//! Budgets, TopK retention and compressed-cache assembly.
//!
//! The budget for `N` tokens at compression ratio `ρ` is `⌊(1−ρ)N⌋`,
//! clamped to at least one token. Retention keeps the highest-scoring
//! tokens; equal scores go to the lower index. Retained rows keep their
//! original sequence order.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::tensor::{KeyTensor, MatrixView, ScoreTensor, Shape};

/// `⌊x⌋` that tolerates the rounding error of a product like `(1−ρ)·N`
/// landing just below an integer.
fn tolerant_floor(x: f64) -> usize {
    (x + 1e-12 * x.abs().max(1.0)).floor().max(0.0) as usize
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(param(format!("compression ratio rho must lie in [0, 1), got {rho}")));
    }
    Ok(())
}

/// Tokens to retain out of `n` at compression ratio `rho`: `max(1, ⌊(1−ρ)n⌋)`.
pub fn budget(n: usize, rho: f64) -> Result<usize> {
    check_rho(rho)?;
    if n == 0 {
        return Err(param("budget of an empty sequence"));
    }
    Ok(tolerant_floor((1.0 - rho) * n as f64).clamp(1, n))
}

/// Descending by score, then ascending by index.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `m` highest scores, returned in ascending index order.
pub fn topk_select(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > scores.len() {
        return Err(param(format!("topk size {m} out of range 1..={}", scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Data(format!("non-finite score at token {i}")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(m);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Retained token indices for every `(batch, head)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetentionSet {
    batch: usize,
    heads: usize,
    seq_len: usize,
    indices: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub batch: usize,
    pub head: usize,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionFile {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub rows: Vec<RetentionRow>,
}

impl RetentionSet {
    /// Validates and sorts per-pair index lists (pairs in `(batch, head)` order).
    pub fn from_indices(batch: usize, heads: usize, seq_len: usize, mut indices: Vec<Vec<usize>>) -> Result<Self> {
        if indices.len() != batch * heads {
            return Err(Error::Validation(format!("{} index lists for {} pairs", indices.len(), batch * heads)));
        }
        for (p, list) in indices.iter_mut().enumerate() {
            list.sort_unstable();
            if list.is_empty() {
                return Err(Error::Validation(format!("pair {p} retains no tokens")));
            }
            if let Some(&bad) = list.iter().find(|&&i| i >= seq_len) {
                return Err(Error::Validation(format!("pair {p}: index {bad} out of range for seq_len {seq_len}")));
            }
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Validation(format!("pair {p}: duplicate indices")));
            }
        }
        Ok(Self { batch, heads, seq_len, indices })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn pairs(&self) -> usize {
        self.indices.len()
    }

    pub fn pair(&self, p: usize) -> &[usize] {
        &self.indices[p]
    }

    pub fn head(&self, b: usize, h: usize) -> &[usize] {
        &self.indices[b * self.heads + h]
    }

    pub fn budgets(&self) -> Vec<usize> {
        self.indices.iter().map(Vec::len).collect()
    }

    pub fn max_budget(&self) -> usize {
        self.indices.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub(crate) fn check_frame(&self, batch: usize, heads: usize, seq_len: usize) -> Result<()> {
        if (self.batch, self.heads, self.seq_len) != (batch, heads, seq_len) {
            return Err(Error::Validation(format!(
                "retention frame ({}, {}, {}) does not match tensor ({batch}, {heads}, {seq_len})",
                self.batch, self.heads, self.seq_len
            )));
        }
        Ok(())
    }

    pub fn to_file(&self) -> RetentionFile {
        let rows = self
            .indices
            .iter()
            .enumerate()
            .map(|(p, list)| RetentionRow { batch: p / self.heads, head: p % self.heads, indices: list.clone() })
            .collect();
        RetentionFile { batch: self.batch, heads: self.heads, seq_len: self.seq_len, rows }
    }

    pub fn from_file(f: &RetentionFile) -> Result<Self> {
        let mut lists = vec![None; f.batch * f.heads];
        for row in &f.rows {
            if row.batch >= f.batch || row.head >= f.heads {
                return Err(Error::Validation(format!("row ({}, {}) outside frame", row.batch, row.head)));
            }
            let slot = &mut lists[row.batch * f.heads + row.head];
            if slot.is_some() {
                return Err(Error::Validation(format!("pair ({}, {}) listed twice", row.batch, row.head)));
            }
            *slot = Some(row.indices.clone());
        }
        let lists = lists
            .into_iter()
            .enumerate()
            .map(|(p, l)| l.ok_or_else(|| Error::Validation(format!("pair {p} missing"))))
            .collect::<Result<_>>()?;
        Self::from_indices(f.batch, f.heads, f.seq_len, lists)
    }
}

/// Retains the top `⌊(1−ρ)N⌋` tokens of every pair.
pub fn select_uniform(scores: &ScoreTensor, rho: f64) -> Result<RetentionSet> {
    let m = budget(scores.seq_len(), rho)?;
    select_with_budgets(scores, &vec![m; scores.batch() * scores.heads()])
}

pub fn select_with_budgets(scores: &ScoreTensor, budgets: &[usize]) -> Result<RetentionSet> {
    let pairs = scores.batch() * scores.heads();
    if budgets.len() != pairs {
        return Err(param(format!("{} budgets for {pairs} pairs", budgets.len())));
    }
    let lists = (0..pairs).into_par_iter().map(|p| topk_select(scores.pair(p), budgets[p])).collect::<Result<_>>()?;
    RetentionSet::from_indices(scores.batch(), scores.heads(), scores.seq_len(), lists)
}

pub fn select_with_plan(scores: &ScoreTensor, plan: &BudgetPlan) -> Result<RetentionSet> {
    if (plan.batch, plan.heads, plan.seq_len) != (scores.batch(), scores.heads(), scores.seq_len()) {
        return Err(param("budget plan was built for a different score tensor"));
    }
    select_with_budgets(scores, &plan.per_head)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    Uniform,
    Proportional,
}

impl std::str::FromStr for BudgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BudgetMode::Uniform),
            "proportional" => Ok(BudgetMode::Proportional),
            other => Err(param(format!("unknown budget mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub mode: BudgetMode,
    pub global_ratio: f64,
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    /// One budget per `(batch, head)` pair.
    pub per_head: Vec<usize>,
}

impl BudgetPlan {
    /// Total retained tokens for batch element `b`.
    pub fn total(&self, b: usize) -> usize {
        self.per_head[b * self.heads..(b + 1) * self.heads].iter().sum()
    }
}

/// Splits the retention budget of each batch element across its heads.
///
/// `Uniform` gives every head `⌊(1−ρ)N⌋`. `Proportional` distributes
/// `⌊H·(1−ρ)·N⌋` tokens in proportion to each head's total score mass with
/// largest-remainder rounding, every head clamped to `[1, N]`, so the total
/// is conserved exactly.
pub fn allocate_head_budgets(scores: &ScoreTensor, rho: f64, mode: BudgetMode) -> Result<BudgetPlan> {
    check_rho(rho)?;
    let (batch, heads, n) = (scores.batch(), scores.heads(), scores.seq_len());
    let per_head = match mode {
        BudgetMode::Uniform => vec![budget(n, rho)?; batch * heads],
        BudgetMode::Proportional => {
            let total = tolerant_floor(heads as f64 * (1.0 - rho) * n as f64).clamp(heads, heads * n);
            let mut out = Vec::with_capacity(batch * heads);
            for b in 0..batch {
                let masses: Vec<f64> = (0..heads).map(|h| scores.head(b, h).iter().map(|s| s.max(0.0)).sum()).collect();
                out.extend(largest_remainder(&masses, total, 1, n));
            }
            out
        }
    };
    Ok(BudgetPlan { mode, global_ratio: rho, batch, heads, seq_len: n, per_head })
}

/// Integer split of `total` proportional to `weights`, each share in
/// `[lo, hi]`. Requires `len·lo ≤ total ≤ len·hi`.
fn largest_remainder(weights: &[f64], total: usize, lo: usize, hi: usize) -> Vec<usize> {
    let k = weights.len();
    let mass: f64 = weights.iter().sum();
    let quotas: Vec<f64> = if mass > 0.0 {
        weights.iter().map(|w| total as f64 * w / mass).collect()
    } else {
        vec![total as f64 / k as f64; k]
    };
    let mut shares: Vec<usize> = quotas.iter().map(|q| (q.floor() as usize).clamp(lo, hi)).collect();
    let mut assigned: usize = shares.iter().sum();
    // Hand out (or claw back) one token at a time to the head whose share is
    // furthest below (above) its quota; ties go to the lower head index.
    while assigned < total {
        let pick = (0..k)
            .filter(|&i| shares[i] < hi)
            .max_by(|&a, &b| (quotas[a] - shares[a] as f64).total_cmp(&(quotas[b] - shares[b] as f64)).then(b.cmp(&a)))
            .expect("total exceeds capacity");
        shares[pick] += 1;
        assigned += 1;
    }
    while assigned > total {
        let pick = (0..k)
            .filter(|&i| shares[i] > lo)
            .max_by(|&a, &b| (shares[a] as f64 - quotas[a]).total_cmp(&(shares[b] as f64 - quotas[b])).then(b.cmp(&a)))
            .expect("total below floor");
        shares[pick] -= 1;
        assigned -= 1;
    }
    shares
}

/// Validity mask for a padded compressed cache: head `p` holds
/// `rows[p].retained.len()` valid rows followed by zero padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMask {
    pub batch: usize,
    pub heads: usize,
    pub padded_len: usize,
    pub source_seq_len: usize,
    pub rows: Vec<MaskRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRow {
    pub batch: usize,
    pub head: usize,
    pub valid: usize,
    /// Source token index of each valid row.
    pub retained: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    pub keys: KeyTensor,
    pub values: KeyTensor,
    pub mask: CacheMask,
}

impl CompressedCache {
    /// Valid key and value rows of pair `p`.
    pub fn pair(&self, p: usize) -> (MatrixView<'_>, MatrixView<'_>) {
        let valid = self.mask.rows[p].valid;
        (self.keys.pair(p).slice_rows(0, valid), self.values.pair(p).slice_rows(0, valid))
    }
}

/// Gathers retained rows of `k` and `v`, padding each head to the largest
/// budget.
pub fn compress_cache(k: &KeyTensor, v: &KeyTensor, r: &RetentionSet) -> Result<CompressedCache> {
    if k.shape() != v.shape() {
        return Err(Error::Shape(format!("keys {:?} and values {:?} differ", k.shape(), v.shape())));
    }
    r.check_frame(k.batch(), k.heads(), k.seq_len())?;
    let d = k.head_dim();
    let padded = r.max_budget();
    let gather = |t: &KeyTensor| -> Vec<f32> {
        let mut out = Vec::with_capacity(r.pairs() * padded * d);
        for p in 0..r.pairs() {
            let m = t.pair(p);
            for &i in r.pair(p) {
                out.extend_from_slice(m.row(i));
            }
            out.resize(out.len() + (padded - r.pair(p).len()) * d, 0.0);
        }
        out
    };
    let shape = Shape { seq_len: padded, ..k.shape() };
    let rows = (0..r.pairs())
        .map(|p| MaskRow { batch: p / r.heads(), head: p % r.heads(), valid: r.pair(p).len(), retained: r.pair(p).to_vec() })
        .collect();
    Ok(CompressedCache {
        keys: KeyTensor::new(shape, gather(k))?,
        values: KeyTensor::new(shape, gather(v))?,
        mask: CacheMask { batch: k.batch(), heads: k.heads(), padded_len: padded, source_seq_len: k.seq_len(), rows },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        assert_eq!(budget(100, 0.20).unwrap(), 80);
        assert_eq!(budget(10, 0.25).unwrap(), 7);
        assert_eq!(budget(5, 0.0).unwrap(), 5);
        assert_eq!(budget(10, 0.7).unwrap(), 3);
        assert_eq!(budget(3, 0.9).unwrap(), 1, "clamped to one token");
        assert!(budget(10, 1.0).is_err());
        assert!(budget(10, -0.1).is_err());
        assert!(budget(0, 0.5).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_select(&[0.3, 0.1, 0.2], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(topk_select(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(topk_select(&[1.0; 5], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(topk_select(&[0.0, 2.0, 1.0, 2.0, 1.0], 3).unwrap(), vec![1, 2, 3]);
        assert!(topk_select(&[1.0, 2.0], 0).is_err());
        assert!(topk_select(&[1.0, 2.0], 3).is_err());
        assert!(topk_select(&[1.0, f64::NAN], 1).is_err());
    }

    fn scores(heads: usize, n: usize, mass: &[f64]) -> ScoreTensor {
        let mut data = Vec::new();
        for &m in &mass[..heads] {
            data.extend(std::iter::repeat_n(m / n as f64, n));
        }
        ScoreTensor::new(1, heads, n, data).unwrap()
    }

    #[test]
    fn uniform_allocation() {
        let plan = allocate_head_budgets(&scores(4, 100, &[1.0, 2.0, 3.0, 4.0]), 0.2, BudgetMode::Uniform).unwrap();
        assert_eq!(plan.per_head, vec![80, 80, 80, 80]);
    }

    #[test]
    fn proportional_allocation() {
        let plan = allocate_head_budgets(&scores(2, 100, &[3.0, 1.0]), 0.5, BudgetMode::Proportional).unwrap();
        assert_eq!(plan.per_head, vec![75, 25]);
        let plan = allocate_head_budgets(&scores(4, 100, &[2.0; 4]), 0.2, BudgetMode::Proportional).unwrap();
        assert_eq!(plan.per_head, vec![80; 4]);
    }

    #[test]
    fn proportional_clamps_and_conserves() {
        // one head holds nearly all mass: capped at N, the rest spread out
        let plan = allocate_head_budgets(&scores(3, 10, &[1000.0, 1.0, 0.0]), 0.1, BudgetMode::Proportional).unwrap();
        assert_eq!(plan.total(0), 27);
        assert!(plan.per_head.iter().all(|&m| (1..=10).contains(&m)));
        assert_eq!(plan.per_head[0], 10);
        // largest remainder: quotas (10/3, 10/3, 10/3) of 10 -> (4, 3, 3)
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10, 1, 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 5, 1, 5), vec![3, 2]);
    }

    #[test]
    fn compress_keeps_original_order_and_pads() {
        let k = KeyTensor::from_f64(Shape::new(1, 2, 4, 1), &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]).unwrap();
        let r = RetentionSet::from_indices(1, 2, 4, vec![vec![2, 0], vec![3]]).unwrap();
        let c = compress_cache(&k, &k, &r).unwrap();
        assert_eq!(c.keys.shape(), Shape::new(1, 2, 2, 1));
        assert_eq!(c.keys.data(), &[0.0, 2.0, 13.0, 0.0]);
        assert_eq!(c.mask.rows[1].valid, 1);
        assert_eq!(c.pair(1).0.rows(), 1);

        let all = RetentionSet::from_indices(1, 2, 4, vec![vec![0, 1, 2, 3]; 2]).unwrap();
        assert_eq!(compress_cache(&k, &k, &all).unwrap().keys, k);

        let one = RetentionSet::from_indices(1, 2, 4, vec![vec![0]; 2]).unwrap();
        assert_eq!(compress_cache(&k, &k, &one).unwrap().keys.data(), &[0.0, 10.0]);
    }

    #[test]
    fn retention_validation() {
        assert!(RetentionSet::from_indices(1, 1, 3, vec![vec![3]]).is_err());
        assert!(RetentionSet::from_indices(1, 1, 3, vec![vec![1, 1]]).is_err());
        assert!(RetentionSet::from_indices(1, 1, 3, vec![vec![]]).is_err());
        assert!(RetentionSet::from_indices(1, 2, 3, vec![vec![0]]).is_err());
        let r = RetentionSet::from_indices(2, 1, 5, vec![vec![4, 0], vec![2]]).unwrap();
        let json = serde_json::to_string(&r.to_file()).unwrap();
        assert_eq!(
            json,
            r#"{"batch":2,"heads":1,"seq_len":5,"rows":[{"batch":0,"head":0,"indices":[0,4]},{"batch":1,"head":0,"indices":[2]}]}"#
        );
        let back: RetentionFile = serde_json::from_str(&json).unwrap();
        assert_eq!(RetentionSet::from_file(&back).unwrap(), r);
    }
}
