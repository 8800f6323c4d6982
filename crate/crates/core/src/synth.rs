//! Seeded synthetic key clouds with planted needles.
//!
//! Every generator is a pure function of its parameters: the random stream is
//! ChaCha8 seeded from the `seed` field via `seed_from_u64`, so reruns are
//! bit-identical. Scenarios are single-head (`batch = heads = 1`).
//!
//! Where a construction calls for common tokens scattered around a reference
//! point, the perturbation directions are drawn in zero-sum groups (antipodal
//! pairs, plus one 120° triple when the count is odd). The common tokens'
//! centroid is then the reference point itself rather than an estimate of it.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::scorers;
use crate::tensor::{KeyTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Subspace,
    Radial,
    Clusters,
    Collision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioParams {
    /// Commons inside a random `k`-dimensional subspace, needles offset orthogonally.
    Subspace {
        n: usize,
        d: usize,
        k: usize,
        sigma: f64,
        n_out: usize,
        epsilon: f64,
        #[serde(default)]
        strict_separation: bool,
        seed: u64,
    },
    /// Commons near `e₁`, one needle at `α·e₁`.
    Radial { alpha: f64, epsilon: f64, n: usize, d: usize, seed: u64 },
    /// `clusters` Gaussian blobs with one needle each.
    Clusters {
        n: usize,
        d: usize,
        clusters: usize,
        spread: f64,
        separation: f64,
        #[serde(default)]
        shuffle: bool,
        seed: u64,
    },
    /// Commons near a unit direction `û`, needles at `m·û`.
    Collision { magnitudes: Vec<f64>, epsilon: f64, n: usize, d: usize, seed: u64 },
}

impl ScenarioParams {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            ScenarioParams::Subspace { .. } => ScenarioKind::Subspace,
            ScenarioParams::Radial { .. } => ScenarioKind::Radial,
            ScenarioParams::Clusters { .. } => ScenarioKind::Clusters,
            ScenarioParams::Collision { .. } => ScenarioKind::Collision,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ScenarioParams::Subspace { seed, .. }
            | ScenarioParams::Radial { seed, .. }
            | ScenarioParams::Clusters { seed, .. }
            | ScenarioParams::Collision { seed, .. } => *seed,
        }
    }

    pub fn with_seed(&self, s: u64) -> Self {
        let mut p = self.clone();
        match &mut p {
            ScenarioParams::Subspace { seed, .. }
            | ScenarioParams::Radial { seed, .. }
            | ScenarioParams::Clusters { seed, .. }
            | ScenarioParams::Collision { seed, .. } => *seed = s,
        }
        p
    }

    pub fn n(&self) -> usize {
        match self {
            ScenarioParams::Subspace { n, .. }
            | ScenarioParams::Radial { n, .. }
            | ScenarioParams::Clusters { n, .. }
            | ScenarioParams::Collision { n, .. } => *n,
        }
    }

    pub fn generate(&self) -> Result<Scenario> {
        match *self {
            ScenarioParams::Subspace { n, d, k, sigma, n_out, epsilon, strict_separation, seed } => {
                gen_subspace_scenario(n, d, k, sigma, n_out, epsilon, strict_separation, seed)
            }
            ScenarioParams::Radial { alpha, epsilon, n, d, seed } => gen_radial_failure(alpha, epsilon, n, d, seed),
            ScenarioParams::Clusters { n, d, clusters, spread, separation, shuffle, seed } => {
                gen_cluster_mixture(n, d, clusters, spread, separation, shuffle, seed)
            }
            ScenarioParams::Collision { ref magnitudes, epsilon, n, d, seed } => {
                gen_collision_scenario(magnitudes, epsilon, n, d, seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub keys: KeyTensor,
    /// Ground-truth important tokens, ascending.
    pub needles: Vec<usize>,
    pub params: ScenarioParams,
    /// Orthogonal offset actually used for subspace needles (raised under strict separation).
    pub effective_epsilon: Option<f64>,
    /// Orthonormal basis of the planted subspace, one row per direction.
    pub basis: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub kind: ScenarioKind,
    pub params: ScenarioParams,
    pub needles: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_epsilon: Option<f64>,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.keys.seq_len()
    }

    pub fn d(&self) -> usize {
        self.keys.head_dim()
    }

    pub fn common_indices(&self) -> Vec<usize> {
        let mut is_needle = vec![false; self.n()];
        for &i in &self.needles {
            is_needle[i] = true;
        }
        (0..self.n()).filter(|&i| !is_needle[i]).collect()
    }

    /// Mean of the non-needle tokens.
    pub fn common_centroid(&self) -> scorers::Anchor {
        let d = self.d();
        let commons = self.common_indices();
        let mut mean = vec![0.0f64; d];
        for &i in &commons {
            for (m, &x) in mean.iter_mut().zip(self.keys.row(0, 0, i)) {
                *m += f64::from(x);
            }
        }
        for m in &mut mean {
            *m /= commons.len() as f64;
        }
        scorers::Anchor { vector: mean }
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            kind: self.kind,
            params: self.params.clone(),
            needles: self.needles.clone(),
            effective_epsilon: self.effective_epsilon,
        }
    }

    /// Rebuilds a scenario from its sidecar and checks the needles agree.
    pub fn from_sidecar(s: &Sidecar) -> Result<Scenario> {
        if s.kind != s.params.kind() {
            return Err(Error::Validation(format!("sidecar kind {:?} does not match params", s.kind)));
        }
        let sc = s.params.generate()?;
        if sc.needles != s.needles {
            return Err(Error::Validation("sidecar needles differ from regenerated scenario".into()));
        }
        Ok(sc)
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Random unit vector orthogonal to the (orthonormal) rows of `against`.
fn unit_orthogonal(rng: &mut ChaCha8Rng, d: usize, against: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, d);
        for _ in 0..2 {
            for b in against {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let len = norm(&v);
        if len > 1e-8 {
            v.iter_mut().for_each(|x| *x /= len);
            return v;
        }
    }
}

fn orthonormal_rows(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Vec<Vec<f64>> {
    let mut basis = Vec::with_capacity(k);
    for _ in 0..k {
        let v = unit_orthogonal(rng, d, &basis);
        basis.push(v);
    }
    basis
}

/// `count` unit vectors orthogonal to `against` that sum to zero, grouped:
/// returns `(vector, group id)` in shuffled order.
fn zero_sum_directions(
    rng: &mut ChaCha8Rng,
    count: usize,
    d: usize,
    against: &[Vec<f64>],
) -> Result<Vec<(Vec<f64>, usize)>> {
    let free = d - against.len();
    if count == 0 {
        return Ok(Vec::new());
    }
    if count == 1 || (count % 2 == 1 && free < 2) || free < 1 {
        return Err(param(format!(
            "cannot balance {count} perturbations with {free} free dimensions (need an even count, or at least 2 free dimensions and count >= 2)"
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut group = 0;
    let mut remaining = count;
    if count % 2 == 1 {
        let u = unit_orthogonal(rng, d, against);
        let mut ext = against.to_vec();
        ext.push(u.clone());
        let w = unit_orthogonal(rng, d, &ext);
        let s = 3f64.sqrt() / 2.0;
        out.push((u.clone(), group));
        out.push((u.iter().zip(&w).map(|(a, b)| -0.5 * a + s * b).collect(), group));
        out.push((u.iter().zip(&w).map(|(a, b)| -0.5 * a - s * b).collect(), group));
        group += 1;
        remaining -= 3;
    }
    while remaining > 0 {
        let v = unit_orthogonal(rng, d, against);
        out.push((v.iter().map(|x| -x).collect(), group));
        out.push((v, group));
        group += 1;
        remaining -= 2;
    }
    out.shuffle(rng);
    Ok(out)
}

/// `count` distinct positions in `[1, n−2]`, ascending.
fn needle_positions(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Result<Vec<usize>> {
    if count > n.saturating_sub(2) {
        return Err(param(format!("cannot place {count} needles strictly inside {n} tokens")));
    }
    let mut pos: Vec<usize> = sample(rng, n - 2, count).into_iter().map(|i| i + 1).collect();
    pos.sort_unstable();
    Ok(pos)
}

/// Interleaves needle rows at `positions` among common rows.
fn assemble(d: usize, commons: Vec<Vec<f64>>, needles: Vec<Vec<f64>>, positions: &[usize]) -> Result<KeyTensor> {
    let n = commons.len() + needles.len();
    let mut data = Vec::with_capacity(n * d);
    let mut c = commons.into_iter();
    let mut nd = needles.into_iter();
    let mut next = positions.iter().peekable();
    for i in 0..n {
        let row = if next.peek() == Some(&&i) {
            next.next();
            nd.next()
        } else {
            c.next()
        }
        .expect("row counts match");
        data.extend(row.into_iter().map(|x| x as f32));
    }
    KeyTensor::new(Shape::new(1, 1, n, d), data)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(param(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

/// Commons spread within a random `k`-dimensional subspace, needles pushed
/// off it by at least `epsilon`.
///
/// With `strict_separation`, the orthogonal offset is raised to exceed three
/// times the common cloud's diameter and the generator verifies that every
/// needle scores above every common token.
#[allow(clippy::too_many_arguments)]
pub fn gen_subspace_scenario(
    n: usize,
    d: usize,
    k: usize,
    sigma: f64,
    n_out: usize,
    epsilon: f64,
    strict_separation: bool,
    seed: u64,
) -> Result<Scenario> {
    if k == 0 || k >= d {
        return Err(param(format!("subspace dimension k={k} must satisfy 1 <= k < d={d}")));
    }
    if n_out >= n {
        return Err(param(format!("n_out={n_out} must be below n={n}")));
    }
    positive("sigma", sigma)?;
    positive("epsilon", epsilon)?;
    let params = ScenarioParams::Subspace { n, d, k, sigma, n_out, epsilon, strict_separation, seed };
    let mut rng = rng_for(seed);
    let basis = orthonormal_rows(&mut rng, d, k);
    let coeffs: Vec<Vec<f64>> = (0..n - n_out).map(|_| gaussian(&mut rng, k).into_iter().map(|c| c * sigma).collect()).collect();
    let eps = if strict_separation { epsilon.max(3.0 * diameter(&coeffs) * (1.0 + 1e-6)) } else { epsilon };
    let embed = |c: &[f64]| -> Vec<f64> {
        let mut v = vec![0.0; d];
        for (ci, b) in c.iter().zip(&basis) {
            v.iter_mut().zip(b).for_each(|(x, y)| *x += ci * y);
        }
        v
    };
    let positions = needle_positions(&mut rng, n, n_out)?;
    let mut needles = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        let anchor = &coeffs[rng.random_range(0..coeffs.len())];
        let u = unit_orthogonal(&mut rng, d, &basis);
        let len = eps * (1.0 + 0.5 * rng.random::<f64>());
        let mut v = embed(anchor);
        v.iter_mut().zip(&u).for_each(|(x, y)| *x += len * y);
        needles.push(v);
    }
    let commons = coeffs.iter().map(|c| embed(c)).collect();
    let keys = assemble(d, commons, needles, &positions)?;
    let sc = Scenario {
        kind: ScenarioKind::Subspace,
        keys,
        needles: positions,
        params,
        effective_epsilon: Some(eps),
        basis: Some(basis),
    };
    if strict_separation && n_out > 0 {
        let s = scorers::manifold_head(sc.keys.pair(0))?;
        let min_needle = sc.needles.iter().map(|&i| s[i]).fold(f64::INFINITY, f64::min);
        let max_common = sc.common_indices().iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
        if min_needle <= max_common {
            return Err(Error::Estimation(format!(
                "separation check failed: min needle score {min_needle} <= max common score {max_common}"
            )));
        }
    }
    Ok(sc)
}

fn diameter(points: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.max(s);
        }
    }
    best.sqrt()
}

/// `n−1` commons at `e₁ + ε·v` with unit `v ⟂ e₁`, one needle at `α·e₁`.
///
/// The commons' centroid is exactly `e₁`.
pub fn gen_radial_failure(alpha: f64, epsilon: f64, n: usize, d: usize, seed: u64) -> Result<Scenario> {
    if !(alpha.is_finite() && alpha > 1.0) {
        return Err(param(format!("alpha must exceed 1, got {alpha}")));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(param(format!("epsilon must be non-negative, got {epsilon}")));
    }
    if n < 3 || d < 2 {
        return Err(param(format!("radial scenario needs n >= 3 and d >= 2, got n={n}, d={d}")));
    }
    let params = ScenarioParams::Radial { alpha, epsilon, n, d, seed };
    let (keys, needles) = directional(&[alpha], &params, n, d, seed, |_, _| epsilon)?;
    Ok(Scenario { kind: ScenarioKind::Radial, keys, needles, params, effective_epsilon: None, basis: None })
}

/// Commons at `û + a·v` with unit `v ⟂ û` and jitter `a ∈ [ε/2, ε]`, one
/// needle at `m·û` per magnitude.
pub fn gen_collision_scenario(magnitudes: &[f64], epsilon: f64, n: usize, d: usize, seed: u64) -> Result<Scenario> {
    if magnitudes.is_empty() || magnitudes.iter().any(|m| !(m.is_finite() && *m > 1.0)) {
        return Err(param("magnitudes must be a non-empty list of values above 1"));
    }
    positive("epsilon", epsilon)?;
    if n <= magnitudes.len() + 2 || d < 2 {
        return Err(param(format!(
            "collision scenario needs n > {} and d >= 2, got n={n}, d={d}",
            magnitudes.len() + 2
        )));
    }
    let params = ScenarioParams::Collision { magnitudes: magnitudes.to_vec(), epsilon, n, d, seed };
    let (keys, needles) =
        directional(magnitudes, &params, n, d, seed, |rng, _| epsilon * rng.random_range(0.5..=1.0))?;
    Ok(Scenario { kind: ScenarioKind::Collision, keys, needles, params, effective_epsilon: None, basis: None })
}

/// Shared construction of the radial and collision scenarios. The radial
/// direction is `e₁`; collision draws a random one. `jitter` gives the
/// perturbation length of each zero-sum group.
fn directional(
    magnitudes: &[f64],
    params: &ScenarioParams,
    n: usize,
    d: usize,
    seed: u64,
    jitter: impl Fn(&mut ChaCha8Rng, usize) -> f64,
) -> Result<(KeyTensor, Vec<usize>)> {
    let mut rng = rng_for(seed);
    let dir = match params {
        ScenarioParams::Radial { .. } => {
            let mut e1 = vec![0.0; d];
            e1[0] = 1.0;
            e1
        }
        _ => unit_orthogonal(&mut rng, d, &[]),
    };
    let n_common = n - magnitudes.len();
    let perturb = zero_sum_directions(&mut rng, n_common, d, std::slice::from_ref(&dir))?;
    let groups = perturb.iter().map(|(_, g)| g + 1).max().unwrap_or(0);
    let lengths: Vec<f64> = (0..groups).map(|g| jitter(&mut rng, g)).collect();
    let commons = perturb
        .into_iter()
        .map(|(v, g)| dir.iter().zip(&v).map(|(u, x)| u + lengths[g] * x).collect())
        .collect();
    let positions = needle_positions(&mut rng, n, magnitudes.len())?;
    // needle order along the sequence is shuffled so magnitude and position are unrelated
    let mut mags = magnitudes.to_vec();
    mags.shuffle(&mut rng);
    let needles = mags.iter().map(|m| dir.iter().map(|u| m * u).collect()).collect();
    Ok((assemble(d, commons, needles, &positions)?, positions))
}

/// `clusters` Gaussian blobs (std `spread`) with means on a sphere of radius
/// `separation`, laid out contiguously: cluster `i` owns tokens
/// `[i·n/K, (i+1)·n/K)`.
///
/// Each cluster carries one needle at distance `spread·(√d + 3)` from its
/// mean, displaced toward the mean of the cluster means (a random direction
/// when `clusters = 1`). Locally the needle stands out from the blob; against
/// the grand mean it sits closer than the blob does. With `shuffle`, tokens
/// are randomly permuted after generation.
pub fn gen_cluster_mixture(
    n: usize,
    d: usize,
    clusters: usize,
    spread: f64,
    separation: f64,
    shuffle: bool,
    seed: u64,
) -> Result<Scenario> {
    if clusters == 0 {
        return Err(param("clusters must be at least 1"));
    }
    if n < 2 * clusters || n < 3 {
        return Err(param(format!("n={n} too small for {clusters} clusters (need 2 tokens per cluster and n >= 3)")));
    }
    if d == 0 {
        return Err(param("d must be at least 1"));
    }
    positive("spread", spread)?;
    positive("separation", separation)?;
    let params = ScenarioParams::Clusters { n, d, clusters, spread, separation, shuffle, seed };
    let mut rng = rng_for(seed);
    let means: Vec<Vec<f64>> =
        (0..clusters).map(|_| unit_orthogonal(&mut rng, d, &[]).into_iter().map(|x| x * separation).collect()).collect();
    let mut grand = vec![0.0; d];
    for m in &means {
        grand.iter_mut().zip(m).for_each(|(g, x)| *g += x / clusters as f64);
    }
    let offset = spread * ((d as f64).sqrt() + 3.0);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut needles = Vec::with_capacity(clusters);
    for (i, mean) in means.iter().enumerate() {
        let (start, end) = (i * n / clusters, (i + 1) * n / clusters);
        let lo = start.max(1);
        let hi = end.min(n - 1);
        let pos = if lo < hi { rng.random_range(lo..hi) } else { start };
        let toward: Vec<f64> = grand.iter().zip(mean).map(|(g, m)| g - m).collect();
        let len = norm(&toward);
        let u = if clusters > 1 && len > 1e-9 * separation {
            toward.iter().map(|x| x / len).collect()
        } else {
            unit_orthogonal(&mut rng, d, &[])
        };
        for t in start..end {
            if t == pos {
                rows.push(mean.iter().zip(&u).map(|(m, x)| m + offset * x).collect());
            } else {
                rows.push(mean.iter().map(|m| m + spread * rng.sample::<f64, _>(StandardNormal)).collect());
            }
        }
        needles.push(pos);
    }
    if shuffle {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // new position j holds old token perm[j]
        let mut inverse = vec![0; n];
        for (j, &old) in perm.iter().enumerate() {
            inverse[old] = j;
        }
        rows = perm.iter().map(|&old| std::mem::take(&mut rows[old])).collect();
        needles = needles.iter().map(|&old| inverse[old]).collect();
        needles.sort_unstable();
    }
    let data: Vec<f32> = rows.into_iter().flatten().map(|x| x as f32).collect();
    let keys = KeyTensor::new(Shape::new(1, 1, n, d), data)?;
    Ok(Scenario { kind: ScenarioKind::Clusters, keys, needles, params, effective_epsilon: None, basis: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Random,
    NeedleProbing,
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(QueryMode::Random),
            "needle_probing" | "needle-probing" => Ok(QueryMode::NeedleProbing),
            other => Err(param(format!("unknown query mode {other:?}"))),
        }
    }
}

/// Query vectors for a scenario. `NeedleProbing` cycles through the needles,
/// adding `noise`-scaled Gaussian jitter to each needle key.
pub fn gen_queries(n_queries: usize, mode: QueryMode, noise: f64, scenario: &Scenario, seed: u64) -> Result<KeyTensor> {
    if n_queries == 0 {
        return Err(param("n_queries must be at least 1"));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(param(format!("noise must be non-negative, got {noise}")));
    }
    let d = scenario.d();
    let mut rng = rng_for(seed);
    let mut data = Vec::with_capacity(n_queries * d);
    match mode {
        QueryMode::Random => {
            data.extend((0..n_queries * d).map(|_| rng.sample::<f64, _>(StandardNormal) as f32));
        }
        QueryMode::NeedleProbing => {
            if scenario.needles.is_empty() {
                return Err(param("needle-probing queries need a scenario with needles"));
            }
            for q in 0..n_queries {
                let needle = scenario.keys.row(0, 0, scenario.needles[q % scenario.needles.len()]);
                data.extend(needle.iter().map(|&x| (f64::from(x) + noise * rng.sample::<f64, _>(StandardNormal)) as f32));
            }
        }
    }
    KeyTensor::new(Shape::new(1, 1, n_queries, d), data)
}
