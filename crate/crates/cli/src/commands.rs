use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use manifoldkv::eval::{
    compare_methods, dilution_sweep, paired_ttest, run_retention, separation_test, window_ablation,
    AblationConfig, DilutionConfig, OutlierFamily, SeparationConfig, DEFAULT_SEEDS,
};
use manifoldkv::eviction::{allocate_head_budgets, compress_cache, select_with_plan, BudgetMode};
use manifoldkv::manifold::{estimate_dimensions, view_to_f64};
use manifoldkv::synth::{gen_collision_scenario, gen_queries, QueryMode, Scenario, ScenarioParams, Sidecar};
use manifoldkv::{scorers, Cell, KeyTensor, Report, ScorerSpec};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::args::*;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

struct Ctx {
    format: Format,
    config: Option<Value>,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| usage(format!("--jobs: {e}")))?;
    }
    let config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| usage(format!("malformed config {}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(usage(format!("config {} must hold a JSON object", path.display())));
            }
            Some(v)
        }
        None => None,
    };
    let ctx = Ctx { format: cli.format, config };
    match cli.command {
        Command::Score(a) => score(&ctx, resolve(&a, &ctx)?),
        Command::Compress(a) => compress(&ctx, resolve(&a, &ctx)?),
        Command::Gen(a) => gen(&ctx, resolve(&a, &ctx)?),
        Command::Dilution(a) => dilution(&ctx, resolve(&a, &ctx)?),
        Command::Ablation(a) => ablation(&ctx, resolve(&a, &ctx)?),
        Command::DimEstimate(a) => dim_estimate(&ctx, resolve(&a, &ctx)?),
        Command::CollisionDemo(a) => collision_demo(&ctx, resolve(&a, &ctx)?),
        Command::Separation(a) => separation(&ctx, resolve(&a, &ctx)?),
        Command::Compare(a) => compare(&ctx, resolve(&a, &ctx)?),
        Command::Ttest(a) => ttest(&ctx, resolve(&a, &ctx)?),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Overlays flags that were given onto the JSON config.
fn resolve<T: Serialize + DeserializeOwned>(flags: &T, ctx: &Ctx) -> Result<T> {
    let mut merged = Map::new();
    if let Some(cfg) = &ctx.config {
        serde_json::from_value::<T>(cfg.clone()).map_err(|e| usage(format!("config: {e}")))?;
        merged = cfg.as_object().cloned().unwrap_or_default();
    }
    if let Value::Object(given) = serde_json::to_value(flags).map_err(|e| usage(e.to_string()))? {
        for (k, v) in given {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn default_seeds() -> Result<Vec<u64>> {
    match std::env::var("KVM_SEED") {
        Ok(s) if !s.trim().is_empty() => s
            .split(',')
            .map(|t| t.trim().parse::<u64>().map_err(|_| usage(format!("KVM_SEED: invalid seed {t:?}"))))
            .collect(),
        _ => Ok(DEFAULT_SEEDS.to_vec()),
    }
}

fn seeds_or_default(seeds: &Option<Vec<u64>>) -> Result<Vec<u64>> {
    match seeds {
        Some(s) if s.is_empty() => Err(usage("--seeds is empty")),
        Some(s) => Ok(s.clone()),
        None => default_seeds(),
    }
}

fn scorer_spec(method: &Option<String>, window: Option<usize>, lambda: Option<f64>, obs: Option<usize>) -> Result<ScorerSpec> {
    let method = method.as_deref().unwrap_or("manifold");
    let missing = |flag: &str| usage(format!("--method {method} requires --{flag}"));
    match method {
        "windowed" if window.is_none() => return Err(missing("window")),
        "hybrid" if lambda.is_none() => return Err(missing("lambda")),
        "obs_attention" if obs.is_none() => return Err(missing("obs-window")),
        _ => {}
    }
    for (given, flag, owner) in [
        (window.is_some(), "window", "windowed"),
        (lambda.is_some(), "lambda", "hybrid"),
        (obs.is_some(), "obs-window", "obs_attention"),
    ] {
        if given && method != owner {
            return Err(usage(format!("--{flag} only applies to --method {owner}")));
        }
    }
    ScorerSpec::from_parts(method, window, lambda, obs).map_err(|e| usage(e.to_string()))
}

/// `name:param` list entries, e.g. `windowed:512`.
fn parse_method_item(item: &str) -> Result<ScorerSpec> {
    let (name, arg) = match item.split_once(':') {
        Some((n, a)) => (n.trim(), Some(a.trim())),
        None => (item.trim(), None),
    };
    let bad = |e: String| usage(format!("--methods entry {item:?}: {e}"));
    let int = |a: Option<&str>| a.map(|s| s.parse::<usize>().map_err(|e| bad(e.to_string()))).transpose();
    match name {
        "windowed" => scorer_spec(&Some(name.into()), int(arg)?, None, None),
        "obs_attention" => scorer_spec(&Some(name.into()), None, None, int(arg)?),
        "hybrid" => {
            let l = arg.map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string()))).transpose()?;
            scorer_spec(&Some(name.into()), None, l, None)
        }
        _ if arg.is_some() => Err(bad("method takes no parameter".into())),
        _ => scorer_spec(&Some(name.into()), None, None, None),
    }
    .map_err(|e| match e {
        CliError::Usage(m) if !m.starts_with("--methods") => bad(m),
        other => other,
    })
}

fn check_rho(rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(usage(format!("--rho must lie in [0, 1), got {rho}")));
    }
    Ok(rho)
}

fn config_hash(command: &str, resolved: &impl Serialize) -> String {
    let mut v = serde_json::to_value(resolved).unwrap_or(Value::Null);
    if let Value::Object(m) = &mut v {
        m.retain(|k, _| !k.ends_with("out"));
    }
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\n");
    h.update(v.to_string().as_bytes());
    hex::encode(h.finalize())
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn emit(ctx: &Ctx, mut rep: Report, command: &str, resolved: &impl Serialize, out: Option<&Path>) -> Result<()> {
    rep.set_meta("tool", format!("manifoldkv {}", env!("CARGO_PKG_VERSION")));
    rep.set_meta("command", command);
    rep.set_meta("config_hash", config_hash(command, resolved));
    let bytes = match ctx.format {
        Format::Csv => {
            let mut buf = Vec::new();
            rep.write_csv(&mut buf)?;
            buf
        }
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&rep.to_json()).map_err(manifoldkv::Error::from)?;
            s.push('\n');
            s.into_bytes()
        }
    };
    write_output(out, &bytes)?;
    let dest = out.map_or("stdout".to_string(), |p| p.display().to_string());
    eprintln!("{command}: {} rows -> {dest}", rep.rows.len());
    Ok(())
}

fn load(path: &Path) -> Result<KeyTensor> {
    Ok(KeyTensor::load_kvt(path)?)
}

fn load_queries(spec: &ScorerSpec, path: &Option<PathBuf>) -> Result<Option<KeyTensor>> {
    match path {
        Some(p) => Ok(Some(load(p)?)),
        None if spec.needs_queries() => Err(usage(format!("--method {} requires --queries", spec.method()))),
        None => Ok(None),
    }
}

fn score(ctx: &Ctx, a: ScoreArgs) -> Result<()> {
    let input = required(&a.input, "input")?;
    let spec = scorer_spec(&a.method, a.window, a.lambda, a.obs_window)?;
    let queries = load_queries(&spec, &a.queries)?;
    let keys = load(&input)?;
    let scores = scorers::score(&keys, &spec, queries.as_ref())?;
    let bytes = match ctx.format {
        Format::Csv => {
            let mut buf = Vec::new();
            scores.write_csv(&mut buf)?;
            buf
        }
        Format::Json => {
            let v = serde_json::json!({
                "method": spec.label(),
                "batch": scores.batch(),
                "heads": scores.heads(),
                "seq_len": scores.seq_len(),
                "scores": scores.data(),
            });
            format!("{v}\n").into_bytes()
        }
    };
    write_output(a.out.as_deref(), &bytes)?;
    eprintln!("score: {} scores ({}) for {}", scores.data().len(), spec.label(), input.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(manifoldkv::Error::from)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn compress(_ctx: &Ctx, a: CompressArgs) -> Result<()> {
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let spec = scorer_spec(&a.method, a.window, a.lambda, a.obs_window)?;
    let rho = check_rho(a.rho.unwrap_or(0.2))?;
    let mode: BudgetMode = a.budget_mode.as_deref().unwrap_or("uniform").parse().map_err(|e: manifoldkv::Error| usage(e.to_string()))?;
    if a.values_out.is_some() && a.values.is_none() {
        return Err(usage("--values-out requires --values"));
    }
    let queries = load_queries(&spec, &a.queries)?;
    let keys = load(&input)?;
    let values = match &a.values {
        Some(p) => load(p)?,
        None => keys.clone(),
    };
    let scores = scorers::score(&keys, &spec, queries.as_ref())?;
    let plan = allocate_head_budgets(&scores, rho, mode)?;
    let r = select_with_plan(&scores, &plan)?;
    let cache = compress_cache(&keys, &values, &r)?;
    cache.keys.save_kvt(&out)?;
    if let Some(p) = &a.values_out {
        cache.values.save_kvt(p)?;
    }
    let mask_path = a.mask_out.clone().unwrap_or_else(|| with_suffix(&out, ".mask.json"));
    write_json(&mask_path, &cache.mask)?;
    if let Some(p) = &a.retention_out {
        write_json(p, &r.to_file())?;
    }
    let total: usize = plan.per_head.iter().sum();
    eprintln!(
        "compress: kept {total} of {} tokens ({}, rho {rho}, {:?} budgets) -> {}",
        keys.seq_len() * plan.per_head.len(),
        spec.label(),
        mode,
        out.display()
    );
    Ok(())
}

fn gen(_ctx: &Ctx, a: GenArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let scenario = match &a.from_sidecar {
        Some(path) => {
            let given = gen_param_flags(&a);
            if let Some((flag, _)) = given.iter().find(|(_, set)| *set) {
                return Err(usage(format!("--{flag} cannot be combined with --from-sidecar")));
            }
            let text = fs::read_to_string(path)?;
            let side: Sidecar = serde_json::from_str(&text).map_err(|e| usage(format!("sidecar {}: {e}", path.display())))?;
            Scenario::from_sidecar(&side)?
        }
        None => gen_params(&a)?.generate()?,
    };
    scenario.keys.save_kvt(&out)?;
    let side_path = a.sidecar.clone().unwrap_or_else(|| with_suffix(&out, ".json"));
    write_json(&side_path, &scenario.sidecar())?;
    if let Some(qp) = &a.queries_out {
        let mode: QueryMode = a.query_mode.as_deref().unwrap_or("needle_probing").parse().map_err(|e: manifoldkv::Error| usage(e.to_string()))?;
        let q = gen_queries(a.n_queries.unwrap_or(32), mode, a.query_noise.unwrap_or(0.0), &scenario, scenario.params.seed())?;
        q.save_kvt(qp)?;
    }
    eprintln!(
        "gen: {:?} scenario, n={} d={}, {} needles -> {}",
        scenario.kind,
        scenario.n(),
        scenario.d(),
        scenario.needles.len(),
        out.display()
    );
    Ok(())
}

fn gen_param_flags(a: &GenArgs) -> Vec<(&'static str, bool)> {
    vec![
        ("scenario", a.scenario.is_some()),
        ("n", a.n.is_some()),
        ("d", a.d.is_some()),
        ("k", a.k.is_some()),
        ("sigma", a.sigma.is_some()),
        ("n-out", a.n_out.is_some()),
        ("epsilon", a.epsilon.is_some()),
        ("strict-separation", a.strict_separation.is_some()),
        ("alpha", a.alpha.is_some()),
        ("clusters", a.clusters.is_some()),
        ("spread", a.spread.is_some()),
        ("separation", a.separation.is_some()),
        ("shuffle", a.shuffle.is_some()),
        ("magnitudes", a.magnitudes.is_some()),
        ("seed", a.seed.is_some()),
    ]
}

fn gen_params(a: &GenArgs) -> Result<ScenarioParams> {
    let kind = a.scenario.as_deref().unwrap_or("subspace");
    let allowed: &[&str] = match kind {
        "subspace" => &["n", "d", "k", "sigma", "n-out", "epsilon", "strict-separation"],
        "radial" => &["alpha", "epsilon", "n", "d"],
        "clusters" => &["n", "d", "clusters", "spread", "separation", "shuffle"],
        "collision" => &["magnitudes", "epsilon", "n", "d"],
        other => return Err(usage(format!("--scenario: unknown kind {other:?}"))),
    };
    for (flag, set) in gen_param_flags(a) {
        if set && !matches!(flag, "scenario" | "seed") && !allowed.contains(&flag) {
            return Err(usage(format!("--{flag} does not apply to --scenario {kind}")));
        }
    }
    let seed = match a.seed {
        Some(s) => s,
        None => default_seeds()?[0],
    };
    Ok(match kind {
        "subspace" => ScenarioParams::Subspace {
            n: a.n.unwrap_or(4096),
            d: a.d.unwrap_or(128),
            k: a.k.unwrap_or(9),
            sigma: a.sigma.unwrap_or(1.0),
            n_out: a.n_out.unwrap_or(16),
            epsilon: a.epsilon.unwrap_or(1.0),
            strict_separation: a.strict_separation.unwrap_or(false),
            seed,
        },
        "radial" => ScenarioParams::Radial {
            alpha: a.alpha.unwrap_or(100.0),
            epsilon: a.epsilon.unwrap_or(0.1),
            n: a.n.unwrap_or(64),
            d: a.d.unwrap_or(8),
            seed,
        },
        "clusters" => ScenarioParams::Clusters {
            n: a.n.unwrap_or(16384),
            d: a.d.unwrap_or(128),
            clusters: a.clusters.unwrap_or(16),
            spread: a.spread.unwrap_or(1.0),
            separation: a.separation.unwrap_or(10.0),
            shuffle: a.shuffle.unwrap_or(false),
            seed,
        },
        _ => ScenarioParams::Collision {
            magnitudes: a.magnitudes.clone().unwrap_or_else(|| vec![2.0, 5.0, 10.0]),
            epsilon: a.epsilon.unwrap_or(0.1),
            n: a.n.unwrap_or(256),
            d: a.d.unwrap_or(128),
            seed,
        },
    })
}

fn dilution(ctx: &Ctx, a: DilutionArgs) -> Result<()> {
    let cfg = DilutionConfig {
        k_grid: a.k_grid.clone().unwrap_or_else(|| vec![1, 4, 16, 32]),
        n: a.n.unwrap_or(16384),
        d: a.d.unwrap_or(128),
        rho: check_rho(a.rho.unwrap_or(0.25))?,
        window: a.window,
        spread: a.spread.unwrap_or(1.0),
        separation: a.separation.unwrap_or(10.0),
        shuffle: a.shuffle.unwrap_or(false),
        seeds: seeds_or_default(&a.seeds)?,
    };
    let rep = dilution_sweep(&cfg)?;
    emit(ctx, rep, "dilution", &cfg, a.out.as_deref())
}

fn ablation(ctx: &Ctx, a: AblationArgs) -> Result<()> {
    let n = a.n.unwrap_or(16384);
    let cfg = AblationConfig {
        w_grid: a.w_grid.clone().unwrap_or_else(|| vec![256, 512, 1024, 2048, 4096, 16384]),
        scenario: ScenarioParams::Clusters {
            n,
            d: a.d.unwrap_or(128),
            clusters: a.clusters.unwrap_or(16),
            spread: a.spread.unwrap_or(1.0),
            separation: a.separation.unwrap_or(10.0),
            shuffle: a.shuffle.unwrap_or(false),
            seed: 0,
        },
        rho: check_rho(a.rho.unwrap_or(0.25))?,
        seeds: seeds_or_default(&a.seeds)?,
    };
    let rep = window_ablation(&cfg)?;
    emit(ctx, rep, "ablation", &cfg, a.out.as_deref())
}

fn dim_estimate(ctx: &Ctx, a: DimArgs) -> Result<()> {
    let input = required(&a.input, "input")?;
    let threshold = a.threshold.unwrap_or(0.95);
    let k = a.k_neighbors.unwrap_or(10);
    let pooled = a.pooled.unwrap_or(false);
    let t = load(&input)?;
    let d = t.head_dim();
    let mut rep = Report::new(
        "dim_estimate",
        &["batch", "head", "n_points", "ambient_dim", "pca_d95", "pca_ratio", "twonn", "mle", "mle_k", "discarded_pairs"],
        2,
    );
    let mut push = |b: Cell, h: Cell, pts: &[f64]| -> Result<()> {
        let r = estimate_dimensions(pts, d, threshold, k)?;
        rep.push(vec![
            b,
            h,
            r.n_points.into(),
            r.ambient_dim.into(),
            r.pca_d95.into(),
            r.pca_ratio.into(),
            r.twonn.into(),
            r.mle.into(),
            r.mle_k.into(),
            r.discarded_pairs.into(),
        ])?;
        Ok(())
    };
    if pooled {
        let pts: Vec<f64> = t.data().iter().map(|&x| f64::from(x)).collect();
        push("all".into(), "all".into(), &pts)?;
    } else {
        for b in 0..t.batch() {
            for h in 0..t.heads() {
                push(b.into(), h.into(), &view_to_f64(t.head(b, h)))?;
            }
        }
    }
    rep.set_meta("input", input.display().to_string());
    let resolved = serde_json::json!({ "input": input, "threshold": threshold, "k_neighbors": k, "pooled": pooled });
    emit(ctx, rep, "dim-estimate", &resolved, a.out.as_deref())
}

fn collision_demo(ctx: &Ctx, a: CollisionArgs) -> Result<()> {
    let magnitudes = a.magnitudes.clone().unwrap_or_else(|| vec![2.0, 5.0, 10.0]);
    let epsilon = a.epsilon.unwrap_or(0.1);
    let n = a.n.unwrap_or(256);
    let d = a.d.unwrap_or(128);
    let rho = check_rho(a.rho.unwrap_or(0.5))?;
    let seeds = seeds_or_default(&a.seeds)?;
    let mut rep = Report::new("collision_demo", &["method", "seed", "retained", "needles", "retention"], 2);
    for spec in [ScorerSpec::Manifold, ScorerSpec::Keydiff] {
        let mut rates = Vec::new();
        let (mut kept, mut total) = (0, 0);
        for &seed in &seeds {
            let sc = gen_collision_scenario(&magnitudes, epsilon, n, d, seed)?;
            let r = run_retention(&sc, &spec, rho)?;
            rep.push(vec![spec.label().into(), seed.into(), r.retained_needles.into(), r.total_needles.into(), r.retention_rate.into()])?;
            rates.push(r.retention_rate);
            kept += r.retained_needles;
            total += r.total_needles;
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        rep.push(vec![spec.label().into(), "mean".into(), kept.into(), total.into(), mean.into()])?;
        eprintln!("collision-demo: {} retained {kept}/{total} needles", spec.label());
    }
    rep.set_meta("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    let resolved = serde_json::json!({ "magnitudes": magnitudes, "epsilon": epsilon, "n": n, "d": d, "rho": rho, "seeds": seeds });
    emit(ctx, rep, "collision-demo", &resolved, a.out.as_deref())
}

fn separation(ctx: &Ctx, a: SeparationArgs) -> Result<()> {
    let family = match a.family.as_deref().unwrap_or("subspace") {
        "subspace" => OutlierFamily::Subspace,
        "radial" => OutlierFamily::Radial,
        other => return Err(usage(format!("--family: unknown family {other:?}"))),
    };
    let cfg = SeparationConfig {
        family,
        scorer: scorer_spec(&a.method, a.window, a.lambda, a.obs_window)?,
        k: a.k.unwrap_or(9),
        d: a.d.unwrap_or(128),
        sigma: a.sigma.unwrap_or(1.0),
        epsilon: a.epsilon.unwrap_or(1.0),
        n_grid: a.n_grid.clone().unwrap_or_else(|| vec![4096]),
        n_out: a.n_out.unwrap_or(16),
        seeds: seeds_or_default(&a.seeds)?,
    };
    let rep = separation_test(&cfg)?;
    emit(ctx, rep, "separation", &cfg, a.out.as_deref())
}

fn compare(ctx: &Ctx, a: CompareArgs) -> Result<()> {
    let rho = check_rho(a.rho.unwrap_or(0.2))?;
    let items = a.methods.clone().unwrap_or_else(|| vec!["manifold".into(), "keydiff".into()]);
    let specs = items.iter().map(|m| parse_method_item(m)).collect::<Result<Vec<_>>>()?;
    let queries = match &a.queries {
        Some(p) => Some(load(p)?),
        None => {
            if let Some(s) = specs.iter().find(|s| s.needs_queries()) {
                return Err(usage(format!("{} requires --queries", s.label())));
            }
            None
        }
    };
    let scenario = match (&a.input, &a.sidecar) {
        (Some(_), Some(_)) => return Err(usage("give either --input or --sidecar, not both")),
        (None, None) => return Err(usage("missing required flag --input or --sidecar")),
        (None, Some(p)) => {
            let text = fs::read_to_string(p)?;
            let side: Sidecar = serde_json::from_str(&text).map_err(|e| usage(format!("sidecar {}: {e}", p.display())))?;
            Scenario::from_sidecar(&side)?
        }
        (Some(p), None) => {
            let keys = load(p)?;
            let (n, d) = (keys.seq_len(), keys.head_dim());
            Scenario {
                kind: manifoldkv::synth::ScenarioKind::Subspace,
                keys,
                needles: Vec::new(),
                params: ScenarioParams::Subspace { n, d, k: 1, sigma: 1.0, n_out: 0, epsilon: 1.0, strict_separation: false, seed: 0 },
                effective_epsilon: None,
                basis: None,
            }
        }
    };
    let rep = compare_methods(&scenario, &specs, rho, queries.as_ref())?;
    let resolved = serde_json::json!({
        "input": a.input, "sidecar": a.sidecar, "methods": items, "queries": a.queries, "rho": rho
    });
    emit(ctx, rep, "compare", &resolved, a.out.as_deref())
}

/// One numeric column from a CSV file; `#` lines are comments and a
/// non-numeric first row is a header.
fn read_column(path: &Path, column: Option<&str>) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>().map_err(|e| csv_error(path, e))?;
    let rows: Vec<_> = rows.into_iter().filter(|r| !(r.len() == 1 && r[0].is_empty())).collect();
    let Some(first) = rows.first() else {
        return Err(CliError::Core(manifoldkv::Error::EmptyInput(format!("{} holds no rows", path.display()))));
    };
    let (idx, skip) = match column {
        Some(name) => {
            let idx = first
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| usage(format!("--column {name:?} not found in {}", path.display())))?;
            (idx, 1)
        }
        None => (0, usize::from(first.get(0).is_some_and(|v| v.parse::<f64>().is_err()))),
    };
    rows.iter()
        .skip(skip)
        .enumerate()
        .map(|(i, r)| {
            let cell = r.get(idx).unwrap_or("");
            cell.parse::<f64>().map_err(|_| {
                CliError::Core(manifoldkv::Error::Format(format!(
                    "{}: row {} column {idx}: {cell:?} is not a number",
                    path.display(),
                    i + 1 + skip
                )))
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::Core(io.into()),
            _ => unreachable!("checked io kind"),
        }
    } else {
        CliError::Core(manifoldkv::Error::Format(format!("{}: {e}", path.display())))
    }
}

fn ttest(ctx: &Ctx, a: TtestArgs) -> Result<()> {
    let pa = required(&a.a, "a")?;
    let pb = required(&a.b, "b")?;
    let xa = read_column(&pa, a.column.as_deref())?;
    let xb = read_column(&pb, a.column.as_deref())?;
    let t = paired_ttest(&xa, &xb)?;
    let mut rep =
        Report::new("ttest", &["n", "df", "mean_diff", "std_err", "t_stat", "p_value", "degenerate"], 0);
    rep.push(vec![
        t.n.into(),
        t.df.into(),
        t.mean_diff.into(),
        t.std_err.into(),
        t.t_stat.into(),
        t.p_value.into(),
        t.degenerate.into(),
    ])?;
    let resolved = serde_json::json!({ "a": pa, "b": pb, "column": a.column });
    emit(ctx, rep, "ttest", &resolved, a.out.as_deref())
}
