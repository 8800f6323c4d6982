//! Reference softmax attention plus the metrics used to judge a compressed
//! cache: output preservation, score correlation and selection overlap.
//!
//! Everything here is prefill-style: no causal mask.

use rayon::prelude::*;

use crate::error::{param, Error, Result};
use crate::eviction::{CompressedCache, RetentionSet};
use crate::tensor::{KeyTensor, MatrixView};

/// Numerically stable in-place softmax (max subtraction).
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
}

/// Attention for a single `(batch, head)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    pub n_queries: usize,
    pub n_keys: usize,
    pub dim: usize,
    /// `n_queries x dim`
    pub values: Vec<f64>,
    /// `n_queries x n_keys`
    pub weights: Vec<f64>,
}

pub fn attend_head(q: MatrixView<'_>, k: MatrixView<'_>, v: MatrixView<'_>) -> Result<HeadAttention> {
    if q.cols() != k.cols() || k.cols() != v.cols() {
        return Err(Error::Shape(format!("head dims differ: q {}, k {}, v {}", q.cols(), k.cols(), v.cols())));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!("{} keys but {} values", k.rows(), v.rows())));
    }
    if k.is_empty() {
        return Err(Error::EmptyInput("attention over an empty cache".into()));
    }
    let (nq, nk, d) = (q.rows(), k.rows(), k.cols());
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; nq * nk];
    let mut values = vec![0.0; nq * d];
    for (i, qrow) in q.iter_rows().enumerate() {
        let w = &mut weights[i * nk..(i + 1) * nk];
        for (wj, krow) in w.iter_mut().zip(k.iter_rows()) {
            *wj = qrow.iter().zip(krow).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
        }
        softmax_in_place(w);
        let out = &mut values[i * d..(i + 1) * d];
        for (&wj, vrow) in w.iter().zip(v.iter_rows()) {
            for (o, &x) in out.iter_mut().zip(vrow) {
                *o += wj * x as f64;
            }
        }
    }
    Ok(HeadAttention { n_queries: nq, n_keys: nk, dim: d, values, weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub batch: usize,
    pub heads: usize,
    pub n_queries: usize,
    pub n_keys: usize,
    pub head_dim: usize,
    /// `(batch, heads, queries, head_dim)`
    pub values: Vec<f64>,
    /// `(batch, heads, queries, keys)`
    pub weights: Vec<f64>,
}

impl AttentionOutput {
    pub fn weight_row(&self, b: usize, h: usize, qi: usize) -> &[f64] {
        let start = ((b * self.heads + h) * self.n_queries + qi) * self.n_keys;
        &self.weights[start..start + self.n_keys]
    }

    pub fn value_row(&self, b: usize, h: usize, qi: usize) -> &[f64] {
        let start = ((b * self.heads + h) * self.n_queries + qi) * self.head_dim;
        &self.values[start..start + self.head_dim]
    }
}

fn check_qkv(q: &KeyTensor, k: &KeyTensor, v: &KeyTensor) -> Result<()> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.batch != ks.batch || qs.heads != ks.heads || qs.head_dim != ks.head_dim {
        return Err(Error::Shape(format!("queries {qs:?} incompatible with keys {ks:?}")));
    }
    if ks != vs {
        return Err(Error::Shape(format!("keys {ks:?} and values {vs:?} differ")));
    }
    Ok(())
}

/// `softmax(QKᵀ/√d)·V` for every `(batch, head)` pair.
pub fn attention(q: &KeyTensor, k: &KeyTensor, v: &KeyTensor) -> Result<AttentionOutput> {
    check_qkv(q, k, v)?;
    let heads: Vec<HeadAttention> =
        (0..q.shape().pairs()).into_par_iter().map(|p| attend_head(q.pair(p), k.pair(p), v.pair(p))).collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(heads.iter().map(|h| h.values.len()).sum());
    let mut weights = Vec::with_capacity(heads.iter().map(|h| h.weights.len()).sum());
    for h in heads {
        values.extend(h.values);
        weights.extend(h.weights);
    }
    Ok(AttentionOutput {
        batch: q.batch(),
        heads: q.heads(),
        n_queries: q.seq_len(),
        n_keys: k.seq_len(),
        head_dim: k.head_dim(),
        values,
        weights,
    })
}

/// Attention over a compressed cache, reading only the valid (unpadded)
/// rows of each head.
pub fn attention_compressed(q: &KeyTensor, cache: &CompressedCache) -> Result<Vec<HeadAttention>> {
    let ks = cache.keys.shape();
    let qs = q.shape();
    if qs.batch != ks.batch || qs.heads != ks.heads || qs.head_dim != ks.head_dim {
        return Err(Error::Shape(format!("queries {qs:?} incompatible with cache {ks:?}")));
    }
    (0..qs.pairs())
        .into_par_iter()
        .map(|p| {
            let (k, v) = cache.pair(p);
            attend_head(q.pair(p), k, v)
        })
        .collect()
}

/// Relative Frobenius error between full attention outputs and outputs over
/// the retained tokens only. Zero when everything is retained.
pub fn preservation_error(q: &KeyTensor, k: &KeyTensor, v: &KeyTensor, r: &RetentionSet) -> Result<f64> {
    check_qkv(q, k, v)?;
    r.check_frame(k.batch(), k.heads(), k.seq_len())?;
    let d = k.head_dim();
    let parts: Vec<(f64, f64)> = (0..q.shape().pairs())
        .into_par_iter()
        .map(|p| {
            let full = attend_head(q.pair(p), k.pair(p), v.pair(p))?;
            let kept = r.pair(p);
            let gather = |m: MatrixView<'_>| -> Vec<f32> { kept.iter().flat_map(|&i| m.row(i).iter().copied()).collect() };
            let (kk, vv) = (gather(k.pair(p)), gather(v.pair(p)));
            let comp = attend_head(q.pair(p), MatrixView::new(&kk, d)?, MatrixView::new(&vv, d)?)?;
            let diff: f64 = full.values.iter().zip(&comp.values).map(|(a, b)| (a - b) * (a - b)).sum();
            let base: f64 = full.values.iter().map(|a| a * a).sum();
            Ok((diff, base))
        })
        .collect::<Result<_>>()?;
    let diff: f64 = parts.iter().map(|p| p.0).sum();
    let base: f64 = parts.iter().map(|p| p.1).sum();
    if base == 0.0 {
        // zero reference output: report the absolute error instead
        return Ok(diff.sqrt());
    }
    Ok((diff / base).sqrt())
}

/// Correlation coefficient with a flag for the constant-input case, where
/// the value is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(param(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(param("correlation needs at least 2 points"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation { value: 0.0, degenerate: true });
    }
    Ok(Correlation { value: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0), degenerate: false })
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(param(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Mean over heads of `|A ∩ B| / budget`.
pub fn selection_overlap(a: &RetentionSet, b: &RetentionSet) -> Result<f64> {
    if (a.batch(), a.heads(), a.seq_len()) != (b.batch(), b.heads(), b.seq_len()) {
        return Err(param("retention sets cover different (batch, head, seq) frames"));
    }
    let mut total = 0.0;
    for p in 0..a.pairs() {
        let (x, y) = (a.pair(p), b.pair(p));
        if x.len() != y.len() {
            return Err(param(format!("pair {p}: budgets differ ({} vs {})", x.len(), y.len())));
        }
        // both sorted ascending
        let (mut i, mut j, mut common) = (0, 0, 0usize);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    common += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        total += common as f64 / x.len() as f64;
    }
    Ok(total / a.pairs() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> KeyTensor {
        KeyTensor::from_rows(rows).unwrap()
    }

    #[test]
    fn singleton_cache_returns_its_value() {
        let k = mat(&[&[0.3, -0.2]]);
        let v = mat(&[&[5.0, -7.0]]);
        let q = mat(&[&[1.0, 2.0], &[-4.0, 0.5]]);
        let out = attention(&q, &k, &v).unwrap();
        for qi in 0..2 {
            assert_eq!(out.weight_row(0, 0, qi), &[1.0]);
            assert_eq!(out.value_row(0, 0, qi), &[5.0, -7.0]);
        }
    }

    #[test]
    fn identical_keys_average_to_shared_value() {
        let k = mat(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let v = mat(&[&[2.0, 3.0], &[2.0, 3.0]]);
        let q = mat(&[&[0.7, -0.1]]);
        let out = attention(&q, &k, &v).unwrap();
        assert_abs_diff_eq!(out.value_row(0, 0, 0)[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.value_row(0, 0, 0)[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn hand_softmax_two_keys() {
        // d = 1 so the scale is 1; logits (0, ln 4) -> (1/5, 4/5)
        let k = mat(&[&[0.0], &[4f64.ln()]]);
        let v = mat(&[&[10.0], &[20.0]]);
        let q = mat(&[&[1.0]]);
        let out = attention(&q, &k, &v).unwrap();
        assert_abs_diff_eq!(out.weight_row(0, 0, 0)[0], 0.2, epsilon = 1e-7);
        assert_abs_diff_eq!(out.weight_row(0, 0, 0)[1], 0.8, epsilon = 1e-7);
        assert_abs_diff_eq!(out.value_row(0, 0, 0)[0], 18.0, epsilon = 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut a = vec![0.1, -2.0, 3.0, 700.0];
        let mut b: Vec<f64> = a.iter().map(|x| x - 123.0).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        assert_abs_diff_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let k = mat(&[&[1.0, 0.0]]);
        let v = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = mat(&[&[1.0, 0.0]]);
        assert!(matches!(attention(&q, &k, &v), Err(Error::Shape(_))));
        let q3 = mat(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(attention(&q3, &k, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn preservation_error_cases() {
        let k = mat(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let v = mat(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
        let q = mat(&[&[0.4, -0.3], &[1.0, 1.0]]);
        let all = RetentionSet::from_indices(1, 1, 3, vec![vec![0, 1, 2]]).unwrap();
        assert_eq!(preservation_error(&q, &k, &v, &all).unwrap(), 0.0);

        // logit gap 20: keeping the dominant key alone barely moves the output
        let k = mat(&[&[20.0], &[0.0]]);
        let v = mat(&[&[1.0], &[-1.0]]);
        let q = mat(&[&[1.0]]);
        let keep = RetentionSet::from_indices(1, 1, 2, vec![vec![0]]).unwrap();
        // oracle: full output = (e^20 - 1)/(e^20 + 1) = tanh(10); kept output = 1
        let full = 10f64.tanh();
        let expect = (1.0 - full).abs() / full.abs();
        let got = preservation_error(&q, &k, &v, &keep).unwrap();
        assert!(got < 0.01);
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);

        // keep only the zero-weight key: output jumps to its value
        let drop = RetentionSet::from_indices(1, 1, 2, vec![vec![1]]).unwrap();
        let expect = (-1.0 - full).abs() / full.abs();
        assert_abs_diff_eq!(preservation_error(&q, &k, &v, &drop).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 4.0, 8.0];
        assert_abs_diff_eq!(pearson(&x, &x).unwrap().value, 1.0, epsilon = 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pearson(&x, &neg).unwrap().value, -1.0, epsilon = 1e-12);

        // a = (1,2,3), b = (2,4,7): sab = 5, saa = 2, sbb = 38/3*... computed directly
        // means 2 and 13/3; dx = (-1,0,1); dy = (-7/3,-1/3,8/3)
        // sab = 7/3 + 8/3 = 5; saa = 2; sbb = (49 + 1 + 64)/9 = 114/9
        let r = 5.0 / (2f64.sqrt() * (114.0f64 / 9.0).sqrt());
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap().value, r, epsilon = 1e-12);

        let c = pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c, Correlation { value: 0.0, degenerate: true });
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [0.5, 1.5, 2.0, 9.0, -3.0];
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v + 1.0).collect();
        assert_abs_diff_eq!(spearman(&x, &cubed).unwrap().value, 1.0, epsilon = 1e-12);
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(spearman(&x, &rev).unwrap().value, -1.0, epsilon = 1e-12);

        // (1,1,2) -> ranks (1.5,1.5,3); (3,5,4) -> ranks (1,3,2)
        // pearson of those: means 2, 2; dx = (-.5,-.5,1), dy = (-1,1,0)
        // sab = 0.5 - 0.5 + 0 = 0 -> rho = 0
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_abs_diff_eq!(spearman(&[1.0, 1.0, 2.0], &[3.0, 5.0, 4.0]).unwrap().value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn overlap_examples() {
        let a = RetentionSet::from_indices(1, 1, 6, vec![vec![0, 1, 2]]).unwrap();
        let b = RetentionSet::from_indices(1, 1, 6, vec![vec![2, 3, 4]]).unwrap();
        let c = RetentionSet::from_indices(1, 1, 6, vec![vec![3, 4, 5]]).unwrap();
        assert_eq!(selection_overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(selection_overlap(&a, &c).unwrap(), 0.0);
        assert_abs_diff_eq!(selection_overlap(&a, &b).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        let short = RetentionSet::from_indices(1, 1, 6, vec![vec![0, 1]]).unwrap();
        assert!(matches!(selection_overlap(&a, &short), Err(Error::Parameter(_))));
    }

    #[test]
    fn multi_head_attention_is_per_pair() {
        let shape = Shape::new(2, 2, 3, 2);
        let k = KeyTensor::from_f64(shape, &(0..24).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>()).unwrap();
        let q = KeyTensor::from_f64(Shape::new(2, 2, 1, 2), &(0..8).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let out = attention(&q, &k, &k).unwrap();
        for b in 0..2 {
            for h in 0..2 {
                let single = attend_head(q.head(b, h), k.head(b, h), k.head(b, h)).unwrap();
                assert_eq!(out.weight_row(b, h, 0), &single.weights[..]);
            }
        }
    }
}
