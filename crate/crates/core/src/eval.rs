//! Retention metrics, sweeps and the paired t-test.
//!
//! Needle recall after eviction (retention rate) is the quality proxy used
//! throughout: the fraction of planted needles that survive TopK. Sweeps run
//! one job per `(grid point, seed)` in parallel and emit one row per job plus
//! one seed-mean row per grid point (seed column `mean`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::attention::{pearson, preservation_error, selection_overlap, spearman};
use crate::error::{param, Error, Result};
use crate::eviction::{budget, select_uniform, select_with_budgets, RetentionSet};
use crate::report::{Cell, Report};
use crate::scorers::{self, ScorerSpec};
use crate::synth::{gen_cluster_mixture, gen_collision_scenario, gen_subspace_scenario, Scenario, ScenarioParams};
use crate::tensor::{KeyTensor, ScoreTensor};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Fraction of `needles` retained, averaged over `(batch, head)` pairs.
pub fn retention_rate(r: &RetentionSet, needles: &[usize]) -> Result<f64> {
    Ok(retained_count(r, needles)? as f64 / (needles.len() * r.pairs()) as f64)
}

fn retained_count(r: &RetentionSet, needles: &[usize]) -> Result<usize> {
    if needles.is_empty() {
        return Err(param("retention rate of an empty needle set"));
    }
    Ok((0..r.pairs()).map(|p| needles.iter().filter(|i| r.pair(p).binary_search(i).is_ok()).count()).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionResult {
    pub method: ScorerSpec,
    pub rho: f64,
    pub retained_needles: usize,
    pub total_needles: usize,
    pub retention_rate: f64,
    /// Relative attention-output error with values taken equal to keys.
    pub preservation_error: Option<f64>,
    pub seed: u64,
}

/// Score, apply the uniform budget, select, and measure needle recall.
pub fn run_retention(scenario: &Scenario, spec: &ScorerSpec, rho: f64) -> Result<RetentionResult> {
    run_retention_with(scenario, spec, rho, None)
}

/// As [`run_retention`]; `queries` feed attention-based scorers and, when
/// given, the output-preservation error.
pub fn run_retention_with(
    scenario: &Scenario,
    spec: &ScorerSpec,
    rho: f64,
    queries: Option<&KeyTensor>,
) -> Result<RetentionResult> {
    let scores = scorers::score(&scenario.keys, spec, queries)?;
    let r = select_uniform(&scores, rho)?;
    let retained = retained_count(&r, &scenario.needles)?;
    let total = scenario.needles.len() * r.pairs();
    let preservation_error = match queries {
        Some(q) => Some(preservation_error(q, &scenario.keys, &scenario.keys, &r)?),
        None => None,
    };
    Ok(RetentionResult {
        method: spec.clone(),
        rho,
        retained_needles: retained,
        total_needles: total,
        retention_rate: retained as f64 / total as f64,
        preservation_error,
        seed: scenario.params.seed(),
    })
}

/// Needle recall when exactly `m` tokens are kept.
pub fn retention_at_budget(scores: &ScoreTensor, needles: &[usize], m: usize) -> Result<f64> {
    let r = select_with_budgets(scores, &vec![m; scores.batch() * scores.heads()])?;
    retention_rate(&r, needles)
}

fn seed_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(param("at least one seed is required"));
    }
    Ok(())
}

fn seeds_meta(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierFamily {
    /// Needles offset orthogonally from a planted subspace.
    Subspace,
    /// Needles parallel to the common direction with large magnitudes.
    Radial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationConfig {
    pub family: OutlierFamily,
    pub scorer: ScorerSpec,
    pub k: usize,
    pub d: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub n_grid: Vec<usize>,
    pub n_out: usize,
    pub seeds: Vec<u64>,
}

fn separation_scenario(cfg: &SeparationConfig, n: usize, seed: u64) -> Result<Scenario> {
    match cfg.family {
        OutlierFamily::Subspace => gen_subspace_scenario(n, cfg.d, cfg.k, cfg.sigma, cfg.n_out, cfg.epsilon, true, seed),
        OutlierFamily::Radial => {
            let magnitudes: Vec<f64> = (0..cfg.n_out).map(|j| 2.0 + j as f64).collect();
            gen_collision_scenario(&magnitudes, cfg.epsilon, n, cfg.d, seed)
        }
    }
}

/// For each `n` and seed: generate, keep exactly `n_out` tokens, record
/// whether every needle survived. Mean rows carry the success fraction.
pub fn separation_test(cfg: &SeparationConfig) -> Result<Report> {
    check_seeds(&cfg.seeds)?;
    cfg.scorer.validate()?;
    if cfg.scorer.needs_queries() {
        return Err(param("separation test needs a key-only scorer"));
    }
    if cfg.n_out == 0 {
        return Err(param("separation test needs n_out >= 1"));
    }
    if cfg.n_grid.is_empty() {
        return Err(param("n_grid is empty"));
    }
    if let Some(&n) = cfg.n_grid.iter().find(|&&n| n <= cfg.n_out) {
        return Err(param(format!("n={n} must exceed n_out={}", cfg.n_out)));
    }
    let jobs: Vec<(usize, u64)> = cfg.n_grid.iter().flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(n, seed)| -> Result<(f64, f64, f64)> {
            let sc = separation_scenario(cfg, n, seed)?;
            let scores = scorers::score(&sc.keys, &cfg.scorer, None)?;
            let s = scores.pair(0);
            let min_needle = sc.needles.iter().map(|&i| s[i]).fold(f64::INFINITY, f64::min);
            let max_common = sc.common_indices().iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
            Ok((retention_at_budget(&scores, &sc.needles, cfg.n_out)?, min_needle, max_common))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rep = Report::new(
        "separation",
        &["n", "seed", "method", "retention", "success", "min_needle_score", "max_common_score", "separated"],
        2,
    );
    rep.set_meta("seeds", seeds_meta(&cfg.seeds));
    rep.set_meta("family", format!("{:?}", cfg.family).to_lowercase());
    let label = cfg.scorer.label();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let block = &results[ni * cfg.seeds.len()..(ni + 1) * cfg.seeds.len()];
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        for (&seed, &(ret, lo, hi)) in cfg.seeds.iter().zip(block) {
            rep.push(vec![
                n.into(),
                seed.into(),
                label.clone().into(),
                ret.into(),
                flag(ret == 1.0).into(),
                lo.into(),
                hi.into(),
                flag(lo > hi).into(),
            ])?;
        }
        let rets: Vec<f64> = block.iter().map(|r| r.0).collect();
        let succ: Vec<f64> = block.iter().map(|r| flag(r.0 == 1.0)).collect();
        let sep: Vec<f64> = block.iter().map(|r| flag(r.1 > r.2)).collect();
        rep.push(vec![
            n.into(),
            "mean".into(),
            label.clone().into(),
            seed_mean(&rets).into(),
            seed_mean(&succ).into(),
            block.iter().map(|r| r.1).fold(f64::INFINITY, f64::min).into(),
            block.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max).into(),
            seed_mean(&sep).into(),
        ])?;
    }
    rep.sort_rows();
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DilutionConfig {
    pub k_grid: Vec<usize>,
    pub n: usize,
    pub d: usize,
    pub rho: f64,
    /// Window size; `None` uses `n / K` for each grid point.
    pub window: Option<usize>,
    pub spread: f64,
    pub separation: f64,
    pub shuffle: bool,
    pub seeds: Vec<u64>,
}

impl Default for DilutionConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![1, 4, 16, 32],
            n: 16384,
            d: 128,
            rho: 0.25,
            window: None,
            spread: 1.0,
            separation: 10.0,
            shuffle: false,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

/// Global, windowed and KeyDiff needle recall on cluster mixtures across a
/// grid of cluster counts. `global_nonincreasing` compares each row's global
/// recall with the next smaller `K` of the same seed (true on the first `K`).
pub fn dilution_sweep(cfg: &DilutionConfig) -> Result<Report> {
    check_seeds(&cfg.seeds)?;
    budget(cfg.n, cfg.rho)?;
    if cfg.k_grid.is_empty() {
        return Err(param("k_grid is empty"));
    }
    let mut grid = cfg.k_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let jobs: Vec<(usize, u64)> = grid.iter().flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(k, seed)| -> Result<(usize, [f64; 3])> {
            let w = cfg.window.unwrap_or((cfg.n / k).max(1));
            let sc = gen_cluster_mixture(cfg.n, cfg.d, k, cfg.spread, cfg.separation, cfg.shuffle, seed)?;
            let mut out = [0.0; 3];
            for (slot, spec) in out.iter_mut().zip([
                ScorerSpec::Manifold,
                ScorerSpec::Windowed { window_size: w },
                ScorerSpec::Keydiff,
            ]) {
                *slot = run_retention(&sc, &spec, cfg.rho)?.retention_rate;
            }
            Ok((w, out))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rep = Report::new(
        "dilution",
        &["clusters", "seed", "window", "global", "windowed", "keydiff", "gap", "global_nonincreasing"],
        2,
    );
    rep.set_meta("seeds", seeds_meta(&cfg.seeds));
    rep.set_meta("n", cfg.n.to_string());
    rep.set_meta("d", cfg.d.to_string());
    rep.set_meta("rho", cfg.rho.to_string());
    let s = cfg.seeds.len();
    let mut prev_mean: Option<f64> = None;
    for (ki, &k) in grid.iter().enumerate() {
        let block = &results[ki * s..(ki + 1) * s];
        let w = block[0].0;
        for (si, (&seed, (_, r))) in cfg.seeds.iter().zip(block).enumerate() {
            let nonincreasing = ki == 0 || r[0] <= results[(ki - 1) * s + si].1[0];
            rep.push(vec![
                k.into(),
                seed.into(),
                w.into(),
                r[0].into(),
                r[1].into(),
                r[2].into(),
                (r[1] - r[0]).into(),
                nonincreasing.into(),
            ])?;
        }
        let mean = |j: usize| seed_mean(&block.iter().map(|(_, r)| r[j]).collect::<Vec<_>>());
        let (g, wv, kd) = (mean(0), mean(1), mean(2));
        rep.push(vec![
            k.into(),
            "mean".into(),
            w.into(),
            g.into(),
            wv.into(),
            kd.into(),
            (wv - g).into(),
            prev_mean.is_none_or(|p| g <= p).into(),
        ])?;
        prev_mean = Some(g);
    }
    rep.sort_rows();
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub w_grid: Vec<usize>,
    /// Cluster-mixture parameters; the seed field is replaced per job.
    pub scenario: ScenarioParams,
    pub rho: f64,
    pub seeds: Vec<u64>,
}

/// Windowed needle recall across window sizes on one cluster-mixture
/// family. `best` marks, per seed and for the seed mean, the largest window
/// attaining the highest recall; `global` is the single-centroid recall.
pub fn window_ablation(cfg: &AblationConfig) -> Result<Report> {
    check_seeds(&cfg.seeds)?;
    let (n, clusters) = match cfg.scenario {
        ScenarioParams::Clusters { n, clusters, .. } => (n, clusters),
        _ => return Err(param("window ablation runs on cluster scenarios")),
    };
    budget(n, cfg.rho)?;
    let mut grid = cfg.w_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid[0] == 0 {
        return Err(param("w_grid must be non-empty with windows >= 1"));
    }
    // per seed: global recall, then one recall per window
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(f64, Vec<f64>)> {
            let sc = cfg.scenario.with_seed(seed).generate()?;
            let global = run_retention(&sc, &ScorerSpec::Manifold, cfg.rho)?.retention_rate;
            let rets = grid
                .iter()
                .map(|&w| Ok(run_retention(&sc, &ScorerSpec::Windowed { window_size: w }, cfg.rho)?.retention_rate))
                .collect::<Result<Vec<_>>>()?;
            Ok((global, rets))
        })
        .collect::<Result<Vec<_>>>()?;

    let best_of = |rets: &[f64]| -> usize {
        let top = rets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        rets.iter().rposition(|&r| r == top).expect("non-empty grid")
    };
    let mut rep = Report::new("ablation", &["window", "seed", "retention", "global", "best"], 2);
    rep.set_meta("seeds", seeds_meta(&cfg.seeds));
    rep.set_meta("cluster_extent", (n / clusters).to_string());
    rep.set_meta("rho", cfg.rho.to_string());
    for (&seed, (global, rets)) in cfg.seeds.iter().zip(&per_seed) {
        let best = best_of(rets);
        for (wi, &w) in grid.iter().enumerate() {
            rep.push(vec![w.into(), seed.into(), rets[wi].into(), (*global).into(), (wi == best).into()])?;
        }
    }
    let means: Vec<f64> =
        (0..grid.len()).map(|wi| seed_mean(&per_seed.iter().map(|(_, r)| r[wi]).collect::<Vec<_>>())).collect();
    let global_mean = seed_mean(&per_seed.iter().map(|(g, _)| *g).collect::<Vec<_>>());
    let best = best_of(&means);
    for (wi, &w) in grid.iter().enumerate() {
        rep.push(vec![w.into(), "mean".into(), means[wi].into(), global_mean.into(), (wi == best).into()])?;
    }
    rep.sort_rows();
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean_diff: f64,
    pub std_err: f64,
    pub t_stat: f64,
    /// Two-sided.
    pub p_value: f64,
    pub df: usize,
    /// Zero standard error with a nonzero mean difference.
    pub degenerate: bool,
}

/// Paired two-sided Student t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(param(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(param(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite sample".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = seed_mean(&diffs);
    let df = n - 1;
    if diffs.iter().all(|&x| x == diffs[0]) {
        let mean = diffs[0];
        let (t, p, degenerate) = if mean == 0.0 { (0.0, 1.0, false) } else { (mean.signum() * f64::INFINITY, 0.0, true) };
        return Ok(TTestResult { n, mean_diff: mean, std_err: 0.0, t_stat: t, p_value: p, df, degenerate });
    }
    let var = diffs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / df as f64;
    let std_err = (var / n as f64).sqrt();
    let t = mean / std_err;
    let nu = df as f64;
    let p = beta_reg(nu / 2.0, 0.5, nu / (nu + t * t)).clamp(0.0, 1.0);
    Ok(TTestResult { n, mean_diff: mean, std_err, t_stat: t, p_value: p, df, degenerate: false })
}

/// Pairwise score correlation and selection overlap between scorers on one
/// scenario, plus each scorer's needle recall. Rows with `method_a ==
/// method_b` compare a scorer with itself.
pub fn compare_methods(
    scenario: &Scenario,
    specs: &[ScorerSpec],
    rho: f64,
    queries: Option<&KeyTensor>,
) -> Result<Report> {
    if specs.len() < 2 {
        return Err(param("compare needs at least two scorers"));
    }
    let scored = specs
        .par_iter()
        .map(|spec| -> Result<(ScoreTensor, RetentionSet)> {
            let s = scorers::score(&scenario.keys, spec, queries)?;
            let r = select_uniform(&s, rho)?;
            Ok((s, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let recall = |r: &RetentionSet| -> Result<Cell> {
        if scenario.needles.is_empty() {
            Ok(Cell::Text(String::new()))
        } else {
            Ok(retention_rate(r, &scenario.needles)?.into())
        }
    };
    let mut rep = Report::new(
        "compare",
        &["method_a", "method_b", "pearson", "spearman", "overlap", "retention_a", "retention_b"],
        2,
    );
    rep.set_meta("rho", rho.to_string());
    rep.set_meta("seed", scenario.params.seed().to_string());
    for i in 0..specs.len() {
        for j in i..specs.len() {
            let (sa, ra) = &scored[i];
            let (sb, rb) = &scored[j];
            rep.push(vec![
                specs[i].label().into(),
                specs[j].label().into(),
                pearson(sa.data(), sb.data())?.value.into(),
                spearman(sa.data(), sb.data())?.value.into(),
                selection_overlap(ra, rb)?.into(),
                recall(ra)?,
                recall(rb)?,
            ])?;
        }
    }
    rep.sort_rows();
    Ok(rep)
}
