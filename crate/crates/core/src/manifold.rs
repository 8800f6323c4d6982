//! Intrinsic-dimension estimators: PCA effective dimension, Two-NN and
//! Levina-Bickel k-NN maximum likelihood.
//!
//! Points are passed as a row-major `n × d` slice of `f64`. Neighbor search is
//! exact and brute force; every distance is computed in 64-bit.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::tensor::MatrixView;

/// Neighbor distances below this are treated as duplicates.
pub const DUPLICATE_EPS: f64 = 1e-12;

pub fn view_to_f64(view: MatrixView<'_>) -> Vec<f64> {
    view.as_slice().iter().map(|&x| f64::from(x)).collect()
}

fn check_points(points: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("{} values do not form rows of width {dim}", points.len())));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite coordinate".into()));
    }
    Ok(points.len() / dim)
}

/// Covariance eigenvalues in descending order (negatives from round-off clamp to 0).
pub fn pca_spectrum(points: &[f64], dim: usize) -> Result<Vec<f64>> {
    let n = check_points(points, dim)?;
    if n < 2 {
        return Err(param(format!("PCA needs at least 2 points, got {n}")));
    }
    let mut x = DMatrix::from_row_slice(n, dim, points);
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// Smallest number of leading components whose variance share reaches `threshold`.
///
/// A cloud with zero variance reports 1.
pub fn pca_effective_dim(points: &[f64], dim: usize, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(param(format!("variance threshold must lie in (0, 1], got {threshold}")));
    }
    Ok(effective_dim(&pca_spectrum(points, dim)?, threshold))
}

fn effective_dim(spectrum: &[f64], threshold: f64) -> usize {
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let mut cum = 0.0;
    for (i, v) in spectrum.iter().enumerate() {
        cum += v;
        if cum / total >= threshold * (1.0 - 1e-12) {
            return i + 1;
        }
    }
    spectrum.len()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            let t = x[l] - y[l];
            acc[l] += t * t;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let t = x - y;
        s += t * t;
    }
    s
}

/// What one pass over a point's neighbors yields.
struct Neighborhood {
    /// Nearest and second-nearest neighbor distances, counting coincident
    /// neighbors once.
    two: Option<(f64, f64)>,
    /// Duplicates of this point (distance below [`DUPLICATE_EPS`]).
    duplicates: usize,
    /// `k` nearest distances, ascending, duplicates included.
    knn: Vec<f64>,
}

fn neighborhoods(points: &[f64], dim: usize, k: usize) -> Vec<Neighborhood> {
    let n = points.len() / dim;
    (0..n)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n),
            |buf, i| {
                let xi = &points[i * dim..(i + 1) * dim];
                buf.clear();
                buf.extend(
                    (0..n).filter(|&j| j != i).map(|j| sq_dist(xi, &points[j * dim..(j + 1) * dim]).sqrt()),
                );
                let mut r1 = f64::INFINITY;
                let mut r2 = f64::INFINITY;
                let mut duplicates = 0;
                for &r in buf.iter() {
                    if r < DUPLICATE_EPS {
                        duplicates += 1;
                    } else if r < r1 - DUPLICATE_EPS {
                        r2 = r1;
                        r1 = r;
                    } else if r > r1 + DUPLICATE_EPS && r < r2 {
                        r2 = r;
                    }
                }
                let two = r2.is_finite().then_some((r1, r2));
                let knn = if k > 0 {
                    buf.select_nth_unstable_by(k - 1, f64::total_cmp);
                    let mut v = buf[..k].to_vec();
                    v.sort_by(f64::total_cmp);
                    v
                } else {
                    Vec::new()
                };
                Neighborhood { two, duplicates, knn }
            },
        )
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoNnEstimate {
    pub dimension: f64,
    pub n_valid: usize,
    /// Zero-distance neighbor pairs skipped (each duplicate pair counted from both ends).
    pub discarded_pairs: usize,
}

fn twonn_from(hoods: &[Neighborhood]) -> Result<TwoNnEstimate> {
    let mut sum = 0.0;
    let mut n_valid = 0;
    let mut discarded_pairs = 0;
    for h in hoods {
        discarded_pairs += h.duplicates;
        if let Some((r1, r2)) = h.two {
            sum += (r2 / r1).ln();
            n_valid += 1;
        }
    }
    if n_valid == 0 || sum <= 0.0 {
        return Err(Error::Estimation("Two-NN: no point has distinct first and second neighbors".into()));
    }
    Ok(TwoNnEstimate { dimension: n_valid as f64 / sum, n_valid, discarded_pairs })
}

/// Two-NN estimate `n_valid / Σ log(r₂/r₁)` over nearest distinct neighbors.
pub fn twonn_dim(points: &[f64], dim: usize) -> Result<TwoNnEstimate> {
    let n = check_points(points, dim)?;
    if n < 3 {
        return Err(param(format!("Two-NN needs at least 3 points, got {n}")));
    }
    twonn_from(&neighborhoods(points, dim, 0))
}

fn mle_from(hoods: &[Neighborhood], k: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut valid = 0usize;
    for h in hoods {
        let rk = h.knn[k - 1];
        if h.knn[0] < DUPLICATE_EPS {
            continue;
        }
        let s: f64 = h.knn[..k - 1].iter().map(|rj| (rk / rj).ln()).sum::<f64>() / (k - 1) as f64;
        if s > 0.0 {
            sum += 1.0 / s;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Estimation("MLE: every point has duplicate or equidistant neighbors".into()));
    }
    Ok(sum / valid as f64)
}

/// Mean of per-point Levina-Bickel estimates over `k` nearest neighbors.
pub fn mle_dim(points: &[f64], dim: usize, k: usize) -> Result<f64> {
    let n = check_points(points, dim)?;
    check_mle_k(n, k)?;
    mle_from(&neighborhoods(points, dim, k), k)
}

fn check_mle_k(n: usize, k: usize) -> Result<()> {
    if k < 2 || n <= k {
        return Err(param(format!("MLE needs 2 <= k < n, got k={k}, n={n}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub pca_d95: usize,
    /// `pca_d95 / ambient_dim`.
    pub pca_ratio: f64,
    pub twonn: f64,
    pub mle: f64,
    pub mle_k: usize,
    pub n_points: usize,
    pub ambient_dim: usize,
    pub discarded_pairs: usize,
}

/// All three estimates from one neighbor pass.
pub fn estimate_dimensions(points: &[f64], dim: usize, threshold: f64, k: usize) -> Result<DimensionReport> {
    let n = check_points(points, dim)?;
    check_mle_k(n, k)?;
    let pca_d95 = pca_effective_dim(points, dim, threshold)?;
    let hoods = neighborhoods(points, dim, k);
    let two = twonn_from(&hoods)?;
    let mle = mle_from(&hoods, k)?;
    Ok(DimensionReport {
        pca_d95,
        pca_ratio: pca_d95 as f64 / dim as f64,
        twonn: two.dimension,
        mle,
        mle_k: k,
        n_points: n,
        ambient_dim: dim,
        discarded_pairs: two.discarded_pairs,
    })
}
