//! Per-token importance scores for KV-cache eviction.
//!
//! Higher score = more worth keeping. Every scorer works on one
//! `(batch, head)` matrix at a time; the tensor-level entry points fan the
//! pairs out in parallel through [`ScoreTensor::from_pairs`].
//!
//! | method          | score for token i                                        |
//! |-----------------|----------------------------------------------------------|
//! | `manifold`      | `‖k_i − μ‖₂`, μ = mean key                               |
//! | `windowed`      | `‖k_i − μ_w‖₂`, μ_w = mean of the window holding i       |
//! | `keydiff`       | `1 − cos(k_i, mean of unit-normalised keys)`             |
//! | `knorm`         | `‖k_i‖₂`                                                 |
//! | `l1` / `linf`   | `‖k_i − μ‖₁` / `‖k_i − μ‖∞`                              |
//! | `normalized`    | `‖k̂_i − mean(k̂)‖₂` on unit-normalised keys              |
//! | `hybrid`        | `λ·minmax(manifold) + (1−λ)·minmax(keydiff)`             |
//! | `obs_attention` | softmax attention mass from the last `w` queries         |
//!
//! All reductions accumulate in f64 in a fixed order.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::tensor::{KeyTensor, MatrixView, ScoreTensor};

/// Guard for unit normalisation of (near) zero vectors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerSpec {
    Manifold,
    Windowed { window_size: usize },
    Keydiff,
    Knorm,
    L1,
    Linf,
    Hybrid { lambda: f64 },
    Normalized,
    ObsAttention { obs_window: usize },
}

impl ScorerSpec {
    pub const METHODS: [&'static str; 9] =
        ["manifold", "windowed", "keydiff", "knorm", "l1", "linf", "hybrid", "normalized", "obs_attention"];

    /// Assembles a spec from a method name and its optional parameters.
    /// A parameter that does not belong to the method is rejected, as is a
    /// missing one that does.
    pub fn from_parts(
        method: &str,
        window_size: Option<usize>,
        lambda: Option<f64>,
        obs_window: Option<usize>,
    ) -> Result<Self> {
        let spec = match method {
            "manifold" => ScorerSpec::Manifold,
            "windowed" => ScorerSpec::Windowed {
                window_size: window_size.ok_or_else(|| param("method windowed requires window_size"))?,
            },
            "keydiff" => ScorerSpec::Keydiff,
            "knorm" => ScorerSpec::Knorm,
            "l1" => ScorerSpec::L1,
            "linf" => ScorerSpec::Linf,
            "hybrid" => ScorerSpec::Hybrid { lambda: lambda.ok_or_else(|| param("method hybrid requires lambda"))? },
            "normalized" => ScorerSpec::Normalized,
            "obs_attention" => ScorerSpec::ObsAttention {
                obs_window: obs_window.ok_or_else(|| param("method obs_attention requires obs_window"))?,
            },
            other => return Err(param(format!("unknown method {other:?}"))),
        };
        if window_size.is_some() && !matches!(spec, ScorerSpec::Windowed { .. }) {
            return Err(param("window_size only applies to method windowed"));
        }
        if lambda.is_some() && !matches!(spec, ScorerSpec::Hybrid { .. }) {
            return Err(param("lambda only applies to method hybrid"));
        }
        if obs_window.is_some() && !matches!(spec, ScorerSpec::ObsAttention { .. }) {
            return Err(param("obs_window only applies to method obs_attention"));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScorerSpec::Windowed { window_size: 0 } => Err(param("window_size must be >= 1")),
            ScorerSpec::ObsAttention { obs_window: 0 } => Err(param("obs_window must be >= 1")),
            ScorerSpec::Hybrid { lambda } if !(0.0..=1.0).contains(&lambda) => {
                Err(param(format!("lambda must lie in [0, 1], got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    pub fn method(&self) -> &'static str {
        match self {
            ScorerSpec::Manifold => "manifold",
            ScorerSpec::Windowed { .. } => "windowed",
            ScorerSpec::Keydiff => "keydiff",
            ScorerSpec::Knorm => "knorm",
            ScorerSpec::L1 => "l1",
            ScorerSpec::Linf => "linf",
            ScorerSpec::Hybrid { .. } => "hybrid",
            ScorerSpec::Normalized => "normalized",
            ScorerSpec::ObsAttention { .. } => "obs_attention",
        }
    }

    /// Method name with parameters, e.g. `windowed(512)`.
    pub fn label(&self) -> String {
        match self {
            ScorerSpec::Windowed { window_size } => format!("windowed({window_size})"),
            ScorerSpec::Hybrid { lambda } => format!("hybrid({lambda})"),
            ScorerSpec::ObsAttention { obs_window } => format!("obs_attention({obs_window})"),
            other => other.method().to_string(),
        }
    }

    pub fn needs_queries(&self) -> bool {
        matches!(self, ScorerSpec::ObsAttention { .. })
    }
}

/// Reference point for distance-based scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub vector: Vec<f64>,
}

impl Anchor {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpNorm {
    L1,
    Linf,
}

// ---------------------------------------------------------------------------
// per-matrix kernels

pub fn centroid(keys: MatrixView<'_>) -> Result<Anchor> {
    if keys.is_empty() {
        return Err(Error::EmptyInput("centroid of zero keys".into()));
    }
    let mut acc = vec![0.0f64; keys.cols()];
    for row in keys.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let n = keys.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Anchor { vector: acc })
}

pub fn l2_from_anchor(keys: MatrixView<'_>, anchor: &Anchor) -> Result<Vec<f64>> {
    check_anchor(keys, anchor)?;
    Ok(keys
        .iter_rows()
        .map(|row| {
            row.iter()
                .zip(&anchor.vector)
                .map(|(&k, &m)| {
                    let d = k as f64 - m;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

pub fn lp_from_anchor(keys: MatrixView<'_>, anchor: &Anchor, p: LpNorm) -> Result<Vec<f64>> {
    check_anchor(keys, anchor)?;
    Ok(keys
        .iter_rows()
        .map(|row| {
            let dev = row.iter().zip(&anchor.vector).map(|(&k, &m)| (f64::from(k) - m).abs());
            match p {
                LpNorm::L1 => dev.sum(),
                LpNorm::Linf => dev.fold(0.0, f64::max),
            }
        })
        .collect())
}

fn check_anchor(keys: MatrixView<'_>, anchor: &Anchor) -> Result<()> {
    if anchor.dim() != keys.cols() {
        return Err(Error::Shape(format!("anchor has dim {}, keys have dim {}", anchor.dim(), keys.cols())));
    }
    Ok(())
}

/// L2 distance of every key from the mean key.
pub fn manifold_head(keys: MatrixView<'_>) -> Result<Vec<f64>> {
    l2_from_anchor(keys, &centroid(keys)?)
}

/// Local-centroid scores over consecutive windows `[t, min(t+W, N))`.
/// Window scores are written side by side without rescaling.
pub fn windowed_head(keys: MatrixView<'_>, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(param("window size must be >= 1"));
    }
    let n = keys.rows();
    let mut scores = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + window).min(n);
        scores.extend(manifold_head(keys.slice_rows(start, end))?);
        start = end;
    }
    Ok(scores)
}

fn unit(row: &[f32]) -> Vec<f64> {
    let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let denom = norm.max(NORM_EPS);
    row.iter().map(|&v| v as f64 / denom).collect()
}

fn unit_rows(keys: MatrixView<'_>) -> Vec<Vec<f64>> {
    keys.iter_rows().map(unit).collect()
}

fn mean_of(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = rows.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// `1 − cos(k_i, a)` with `a` the mean of the unit-normalised keys.
/// The raw key enters the cosine; the result is clamped to `[0, 2]`.
pub fn keydiff_head(keys: MatrixView<'_>) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::EmptyInput("keydiff of zero keys".into()));
    }
    let units = unit_rows(keys);
    let anchor = mean_of(&units, keys.cols());
    let anchor_norm = anchor.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    Ok(units
        .iter()
        .map(|u| {
            let cos = u.iter().zip(&anchor).map(|(a, b)| a * b).sum::<f64>() / anchor_norm;
            1.0 - cos.clamp(-1.0, 1.0)
        })
        .collect())
}

pub fn knorm_head(keys: MatrixView<'_>) -> Vec<f64> {
    keys.iter_rows().map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()).collect()
}

pub fn lp_head(keys: MatrixView<'_>, p: LpNorm) -> Result<Vec<f64>> {
    lp_from_anchor(keys, &centroid(keys)?, p)
}

/// L2 distance of each unit-normalised key from the mean unit key.
pub fn normalized_head(keys: MatrixView<'_>) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::EmptyInput("normalized score of zero keys".into()));
    }
    let units = unit_rows(keys);
    let anchor = mean_of(&units, keys.cols());
    Ok(units
        .iter()
        .map(|u| u.iter().zip(&anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect())
}

/// Rescales to `[0, 1]`; a constant vector maps to all zeros.
pub fn minmax(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / range).collect()
}

pub fn hybrid_head(keys: MatrixView<'_>, lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(param(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let m = minmax(&manifold_head(keys)?);
    let k = minmax(&keydiff_head(keys)?);
    Ok(m.iter().zip(&k).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
}

/// Attention mass each key receives from the last `w` queries, with
/// logits `q·k/√d` and no causal mask.
pub fn obs_attention_head(keys: MatrixView<'_>, queries: MatrixView<'_>, w: usize) -> Result<Vec<f64>> {
    if w == 0 {
        return Err(param("observation window must be >= 1"));
    }
    if w > queries.rows() {
        return Err(param(format!("observation window {w} exceeds {} queries", queries.rows())));
    }
    if queries.cols() != keys.cols() {
        return Err(Error::Shape(format!("query dim {} != key dim {}", queries.cols(), keys.cols())));
    }
    let scale = 1.0 / (keys.cols() as f64).sqrt();
    let mut scores = vec![0.0; keys.rows()];
    let mut logits = vec![0.0; keys.rows()];
    for qi in queries.rows() - w..queries.rows() {
        let q = queries.row(qi);
        for (l, k) in logits.iter_mut().zip(keys.iter_rows()) {
            *l = q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
        }
        crate::attention::softmax_in_place(&mut logits);
        for (s, p) in scores.iter_mut().zip(&logits) {
            *s += p;
        }
    }
    Ok(scores)
}

// ---------------------------------------------------------------------------
// tensor-level entry points

pub fn manifold_score(t: &KeyTensor) -> Result<ScoreTensor> {
    ScoreTensor::from_pairs(t.shape(), |b, h| manifold_head(t.head(b, h)))
}

pub fn windowed_manifold_score(t: &KeyTensor, window: usize) -> Result<ScoreTensor> {
    if window == 0 {
        return Err(param("window size must be >= 1"));
    }
    ScoreTensor::from_pairs(t.shape(), |b, h| windowed_head(t.head(b, h), window))
}

pub fn keydiff_score(t: &KeyTensor) -> Result<ScoreTensor> {
    ScoreTensor::from_pairs(t.shape(), |b, h| keydiff_head(t.head(b, h)))
}

pub fn knorm_score(t: &KeyTensor) -> Result<ScoreTensor> {
    ScoreTensor::from_pairs(t.shape(), |b, h| Ok(knorm_head(t.head(b, h))))
}

pub fn lp_score(t: &KeyTensor, p: LpNorm) -> Result<ScoreTensor> {
    ScoreTensor::from_pairs(t.shape(), |b, h| lp_head(t.head(b, h), p))
}

pub fn normalized_manifold_score(t: &KeyTensor) -> Result<ScoreTensor> {
    ScoreTensor::from_pairs(t.shape(), |b, h| normalized_head(t.head(b, h)))
}

pub fn hybrid_score(t: &KeyTensor, lambda: f64) -> Result<ScoreTensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(param(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    ScoreTensor::from_pairs(t.shape(), |b, h| hybrid_head(t.head(b, h), lambda))
}

pub fn obs_attention_score(keys: &KeyTensor, queries: &KeyTensor, w: usize) -> Result<ScoreTensor> {
    if w == 0 {
        return Err(param("observation window must be >= 1"));
    }
    let (ks, qs) = (keys.shape(), queries.shape());
    if ks.batch != qs.batch || ks.heads != qs.heads || ks.head_dim != qs.head_dim {
        return Err(Error::Shape(format!("queries {qs:?} incompatible with keys {ks:?}")));
    }
    ScoreTensor::from_pairs(ks, |b, h| obs_attention_head(keys.head(b, h), queries.head(b, h), w))
}

/// Dispatches on `spec`. `queries` is required only for `obs_attention`.
pub fn score(keys: &KeyTensor, spec: &ScorerSpec, queries: Option<&KeyTensor>) -> Result<ScoreTensor> {
    spec.validate()?;
    match *spec {
        ScorerSpec::Manifold => manifold_score(keys),
        ScorerSpec::Windowed { window_size } => windowed_manifold_score(keys, window_size),
        ScorerSpec::Keydiff => keydiff_score(keys),
        ScorerSpec::Knorm => knorm_score(keys),
        ScorerSpec::L1 => lp_score(keys, LpNorm::L1),
        ScorerSpec::Linf => lp_score(keys, LpNorm::Linf),
        ScorerSpec::Hybrid { lambda } => hybrid_score(keys, lambda),
        ScorerSpec::Normalized => normalized_manifold_score(keys),
        ScorerSpec::ObsAttention { obs_window } => {
            let q = queries.ok_or_else(|| param("obs_attention needs a query tensor"))?;
            obs_attention_score(keys, q, obs_window)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> KeyTensor {
        KeyTensor::from_rows(rows).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(x, y, epsilon = tol);
        }
    }

    #[test]
    fn centroid_examples() {
        let t = mat(&[&[1.5, -2.0, 3.0]]);
        assert_eq!(centroid(t.head(0, 0)).unwrap().vector, vec![1.5, -2.0, 3.0]);
        let t = mat(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert_eq!(centroid(t.head(0, 0)).unwrap().vector, vec![0.0, 0.0]);
        let t = mat(&[&[0.0, 0.0], &[2.0, 4.0], &[4.0, 2.0]]);
        assert_eq!(centroid(t.head(0, 0)).unwrap().vector, vec![2.0, 2.0]);
        let empty = MatrixView::new(&[], 2).unwrap();
        assert!(matches!(centroid(empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn l2_from_anchor_examples() {
        // unit anchor mu; 10 mu scores 9, 0.1 mu scores 0.9
        let mu = [0.6, 0.8];
        let t = mat(&[&[6.0, 8.0], &[0.06, 0.08], &[0.6, 0.8]]);
        let s = l2_from_anchor(t.head(0, 0), &Anchor { vector: mu.to_vec() }).unwrap();
        close(&s, &[9.0, 0.9, 0.0], 1e-6);

        let circle: Vec<Vec<f64>> =
            (0..8).map(|i| i as f64 * std::f64::consts::PI / 4.0).map(|a| vec![a.cos(), a.sin()]).collect();
        let t = KeyTensor::from_rows(&circle).unwrap();
        let s = l2_from_anchor(t.head(0, 0), &Anchor { vector: vec![0.0, 0.0] }).unwrap();
        close(&s, &[1.0; 8], 1e-6);

        let bad = Anchor { vector: vec![0.0; 3] };
        assert!(matches!(l2_from_anchor(t.head(0, 0), &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn manifold_examples() {
        let t = mat(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(manifold_score(&t).unwrap().data(), &[0.0, 0.0, 0.0]);
        // {e1, -e1, 2e2, 0}: centroid (0, 0.5)
        let t = mat(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]);
        let s = manifold_score(&t).unwrap();
        close(s.data(), &[1.25f64.sqrt(), 1.25f64.sqrt(), 1.5, 0.5], 1e-12);
    }

    #[test]
    fn windowed_examples() {
        let t = mat(&[&[0.0], &[2.0], &[10.0], &[14.0]]);
        let s = windowed_manifold_score(&t, 2).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(windowed_manifold_score(&t, 1).unwrap().data(), &[0.0; 4]);
        assert_eq!(windowed_manifold_score(&t, 4).unwrap(), manifold_score(&t).unwrap());
        assert_eq!(windowed_manifold_score(&t, 99).unwrap(), manifold_score(&t).unwrap());
        assert!(matches!(windowed_manifold_score(&t, 0), Err(Error::Parameter(_))));
        // ragged last window [3, 4) is a single token -> 0
        let s = windowed_manifold_score(&t, 3).unwrap();
        assert_eq!(s.data()[3], 0.0);
    }

    #[test]
    fn keydiff_examples() {
        let t = mat(&[&[0.3, -1.0], &[0.3, -1.0], &[0.3, -1.0]]);
        close(keydiff_score(&t).unwrap().data(), &[0.0; 3], 1e-12);

        // common e1 tokens plus one 100 e1 outlier: both score 0
        let t = mat(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[100.0, 0.0]]);
        close(keydiff_score(&t).unwrap().data(), &[0.0; 4], 1e-12);

        // e2 is orthogonal to the anchor of {e1, e1, e1, e1, e2, -e2}
        let t = mat(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let s = keydiff_score(&t).unwrap();
        assert_abs_diff_eq!(s.data()[4], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[5], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_keys_stay_finite() {
        let t = mat(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]]);
        for spec in [ScorerSpec::Keydiff, ScorerSpec::Normalized, ScorerSpec::Hybrid { lambda: 0.5 }] {
            let s = score(&t, &spec, None).unwrap();
            assert!(s.data().iter().all(|v| v.is_finite()), "{spec:?}");
        }
        let all_zero = mat(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(keydiff_score(&all_zero).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn knorm_examples() {
        let t = mat(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, -1.0], &[3.0, 4.0]]);
        assert_eq!(knorm_score(&t).unwrap().data(), &[0.0, 1.0, 1.0, 5.0]);
    }

    #[test]
    fn lp_examples() {
        // centroid is (0, 0); deviation (3, -4)
        let t = mat(&[&[3.0, -4.0], &[-3.0, 4.0], &[0.0, 0.0]]);
        assert_eq!(lp_score(&t, LpNorm::L1).unwrap().data(), &[7.0, 7.0, 0.0]);
        assert_eq!(lp_score(&t, LpNorm::Linf).unwrap().data(), &[4.0, 4.0, 0.0]);
    }

    #[test]
    fn normalized_examples() {
        let t = mat(&[&[1.0, 1.0], &[2.0, 2.0], &[10.0, 10.0]]);
        close(normalized_manifold_score(&t).unwrap().data(), &[0.0; 3], 1e-12);
        let t = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        close(normalized_manifold_score(&t).unwrap().data(), &[0.5f64.sqrt(); 2], 1e-12);
    }

    #[test]
    fn hybrid_half_weight_hand_case() {
        // 1-D keys {1, 2, 6}: centroid 3, manifold (2, 1, 3) -> minmax (0.5, 0, 1)
        // all keys point along +x, keydiff is all zeros -> minmax all zeros
        let t = mat(&[&[1.0], &[2.0], &[6.0]]);
        close(hybrid_score(&t, 0.5).unwrap().data(), &[0.25, 0.0, 0.5], 1e-12);
        assert!(matches!(hybrid_score(&t, 1.5), Err(Error::Parameter(_))));
        assert!(matches!(hybrid_score(&t, -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn obs_attention_examples() {
        let keys = mat(&[&[0.5, 0.5]]);
        let queries = mat(&[&[1.0, 0.0], &[0.0, 1.0], &[3.0, 3.0]]);
        assert_abs_diff_eq!(obs_attention_score(&keys, &queries, 3).unwrap().data()[0], 3.0, epsilon = 1e-12);

        // 2 keys, d = 1, one query q = 1: logits (0, ln 4), weights (0.2, 0.8)
        let keys = mat(&[&[0.0], &[4f64.ln()]]);
        let queries = mat(&[&[1.0]]);
        close(obs_attention_score(&keys, &queries, 1).unwrap().data(), &[0.2, 0.8], 1e-7);

        assert!(matches!(obs_attention_score(&keys, &queries, 0), Err(Error::Parameter(_))));
        assert!(matches!(obs_attention_score(&keys, &queries, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn obs_attention_mass_equals_window() {
        let keys = KeyTensor::from_f64(Shape::new(1, 2, 5, 3), &(0..30).map(|i| (i as f64).sin()).collect::<Vec<_>>())
            .unwrap();
        let queries =
            KeyTensor::from_f64(Shape::new(1, 2, 4, 3), &(0..24).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>())
                .unwrap();
        let s = obs_attention_score(&keys, &queries, 3).unwrap();
        for h in 0..2 {
            assert_abs_diff_eq!(s.head(0, h).iter().sum::<f64>(), 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn spec_parts() {
        assert_eq!(ScorerSpec::from_parts("windowed", Some(8), None, None).unwrap(), ScorerSpec::Windowed { window_size: 8 });
        assert!(ScorerSpec::from_parts("windowed", None, None, None).is_err());
        assert!(ScorerSpec::from_parts("manifold", Some(8), None, None).is_err());
        assert!(ScorerSpec::from_parts("hybrid", None, Some(2.0), None).is_err());
        assert!(ScorerSpec::from_parts("snapkv", None, None, None).is_err());
        let json = serde_json::to_string(&ScorerSpec::Hybrid { lambda: 0.3 }).unwrap();
        assert_eq!(json, r#"{"method":"hybrid","lambda":0.3}"#);
        let back: ScorerSpec = serde_json::from_str(r#"{"method":"windowed","window_size":4096}"#).unwrap();
        assert_eq!(back, ScorerSpec::Windowed { window_size: 4096 });
    }
}
