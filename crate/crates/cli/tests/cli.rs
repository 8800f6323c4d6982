use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_manifoldkv"));
    c.env_remove("KVM_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_json(o: &Output) -> Value {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    serde_json::from_str(err.lines().last().unwrap()).expect("machine-readable error")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Header and body rows of a report, comments dropped.
fn csv_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

fn check_schema(report: &str, text: &str) {
    let schema: Value =
        serde_json::from_str(&fs::read_to_string(repo_root().join("schemas").join(format!("{report}.json"))).unwrap())
            .unwrap();
    let cols = schema["columns"].as_array().unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_owned).collect();
    let names: Vec<&str> = cols.iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(header, names, "{report} header");
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        assert_eq!(rec.len(), cols.len());
        for (cell, col) in rec.iter().zip(cols) {
            let is_int = cell.parse::<i64>().is_ok();
            let is_float = cell.parse::<f64>().is_ok();
            let ok = match col["type"].as_str().unwrap() {
                "int" => is_int,
                "float" => is_float,
                "bool" => cell == "true" || cell == "false",
                "text" => true,
                "seed" => is_int || cell == "mean",
                "int_or_all" => is_int || cell == "all",
                "float_or_empty" => is_float || cell.is_empty(),
                other => panic!("unknown schema type {other}"),
            };
            assert!(ok, "{report}: cell {cell:?} violates {}", col);
        }
        n += 1;
    }
    assert!(n > 0, "{report} has no rows");
}

#[test]
fn help_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let commands = [
        "", "score", "compress", "gen", "dilution", "ablation", "dim-estimate", "collision-demo", "separation", "compare",
        "ttest",
    ];
    for cmd in commands {
        let mut args: Vec<&str> = Vec::new();
        if !cmd.is_empty() {
            args.push(cmd);
        }
        args.push("--help");
        let out = run(&args);
        assert!(out.status.success());
        let name = if cmd.is_empty() { "manifoldkv".to_owned() } else { cmd.to_owned() };
        let path = golden.join(format!("{name}.txt"));
        if update {
            fs::write(&path, &out.stdout).unwrap();
        }
        let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
        assert_eq!(stdout(&out), expected, "help for {name} drifted; rerun with UPDATE_GOLDEN=1");
    }
}

#[test]
fn every_flag_documents_its_default() {
    for cmd in ["dilution", "ablation", "collision-demo", "separation", "compress", "compare", "dim-estimate"] {
        let help = stdout(&run(&[cmd, "--help"]));
        for line in help.lines().filter(|l| l.trim_start().starts_with("--")) {
            let optional_input = ["--out", "--input", "--values", "--queries", "--sidecar", "--window", "--lambda",
                "--obs-window", "--values-out", "--retention-out", "--config"];
            let flag = line.split_whitespace().next().unwrap();
            if optional_input.contains(&flag) {
                continue;
            }
            assert!(line.contains("[default:"), "{cmd}: {line}");
        }
    }
}

#[test]
fn score_writes_csv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let keys = p(dir.path(), "k.kvt");
    assert!(run(&["gen", "--scenario", "radial", "--out", &keys]).status.success());
    let scores = p(dir.path(), "s.csv");
    let out = run(&["score", "--input", &keys, "--method", "manifold", "--out", &scores]);
    assert!(out.status.success());
    let text = fs::read_to_string(&scores).unwrap();
    assert_eq!(text.lines().next().unwrap(), "batch,head,token,score");
    assert_eq!(text.lines().count(), 65);
    check_schema("scores", &text);
}

#[test]
fn validation_errors_exit_2_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let keys = p(dir.path(), "k.kvt");
    assert!(run(&["gen", "--scenario", "radial", "--out", &keys]).status.success());

    let o = run(&["score", "--input", &keys, "--method", "windowed"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"]["message"].as_str().unwrap().contains("--window"));

    let o = run(&["dilution", "--rho", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"]["message"].as_str().unwrap().contains("rho"));

    let o = run(&["dilution", "--frobnicate", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"]["message"].as_str().unwrap().contains("--frobnicate"));

    let cfg = p(dir.path(), "bad.json");
    fs::write(&cfg, "{\"rho\": 0.2, \"bogus\": 1}").unwrap();
    let o = run(&["dilution", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"]["message"].as_str().unwrap().contains("bogus"));

    fs::write(&cfg, "{\"rho\": ").unwrap();
    assert_eq!(run(&["dilution", "--config", &cfg]).status.code(), Some(2));

    let o = run(&["gen", "--scenario", "clusters", "--alpha", "3", "--out", &keys]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn io_and_numeric_failures_have_their_own_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["score", "--input", &p(dir.path(), "missing.kvt")]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"]["kind"], "io");

    let bad = p(dir.path(), "bad.kvt");
    fs::write(&bad, b"XXXX0000000000000000").unwrap();
    assert_eq!(run(&["score", "--input", &bad]).status.code(), Some(3));

    // every point identical: Two-NN has nothing to measure
    let mut bytes = b"KVT1".to_vec();
    for dim in [1u32, 1, 20, 2] {
        bytes.extend(dim.to_le_bytes());
    }
    for _ in 0..40 {
        bytes.extend(1.5f32.to_le_bytes());
    }
    let same = p(dir.path(), "same.kvt");
    fs::write(&same, bytes).unwrap();
    let o = run(&["dim-estimate", "--input", &same]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_json(&o)["error"]["kind"], "estimation");
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "c.json");
    fs::write(&cfg, r#"{"rho": 0.2, "n": 1024, "k_grid": [1, 2], "seeds": [0]}"#).unwrap();
    let o = run(&["dilution", "--config", &cfg, "--rho", "0.5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("# rho: 0.5"), "{text}");
    assert!(text.contains("# n: 1024"));
}

#[test]
fn seed_env_sets_default_seeds() {
    let o = bin().args(["collision-demo", "--n", "64"]).env("KVM_SEED", "7,8").output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("# seeds: 7,8"));
    assert!(text.contains("manifold,7,3,3,1"));
}

#[test]
fn collision_demo_manifold_keeps_all_needles() {
    let o = run(&["collision-demo", "--magnitudes", "2,5,10"]);
    assert!(o.status.success());
    let text = stdout(&o);
    check_schema("collision_demo", &text);
    assert!(text.contains("manifold,mean,15,15,1"));
}

#[test]
fn ttest_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = p(dir.path(), "a.csv");
    fs::write(&a, "value\n0.5\n0.7\n0.2\n").unwrap();
    let o = run(&["ttest", "--a", &a, "--b", &a]);
    assert!(o.status.success());
    let text = stdout(&o);
    check_schema("ttest", &text);
    assert_eq!(csv_lines(&text)[1], "3,2,0,0,0,1,false");
}

#[test]
fn compress_roundtrip_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let keys = p(dir.path(), "k.kvt");
    assert!(run(&["gen", "--scenario", "collision", "--n", "40", "--d", "8", "--out", &keys]).status.success());
    let out = p(dir.path(), "c.kvt");
    let ret = p(dir.path(), "r.json");
    let o = run(&["compress", "--input", &keys, "--rho", "0.5", "--out", &out, "--retention-out", &ret]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mask: Value = serde_json::from_str(&fs::read_to_string(format!("{out}.mask.json")).unwrap()).unwrap();
    assert_eq!(mask["padded_len"], 20);
    let side: Value = serde_json::from_str(&fs::read_to_string(format!("{keys}.json")).unwrap()).unwrap();
    let r: Value = serde_json::from_str(&fs::read_to_string(&ret).unwrap()).unwrap();
    for needle in side["needles"].as_array().unwrap() {
        assert!(r["rows"][0]["indices"].as_array().unwrap().contains(needle));
    }
}

#[test]
fn gen_regenerates_from_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let a = p(dir.path(), "a.kvt");
    let b = p(dir.path(), "b.kvt");
    assert!(run(&["gen", "--scenario", "clusters", "--n", "512", "--d", "16", "--clusters", "4", "--seed", "3", "--out", &a])
        .status
        .success());
    assert!(run(&["gen", "--from-sidecar", &format!("{a}.json"), "--out", &b]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn reports_match_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let keys = p(dir.path(), "k.kvt");
    assert!(run(&["gen", "--scenario", "subspace", "--n", "300", "--d", "16", "--k", "3", "--n-out", "4", "--out", &keys])
        .status
        .success());
    let cases: Vec<(&str, Vec<String>)> = vec![
        ("dilution", vec!["dilution".into(), "--n".into(), "1024".into(), "--d".into(), "16".into(), "--k-grid".into(), "1,2".into(), "--seeds".into(), "0,1".into()]),
        ("ablation", vec!["ablation".into(), "--n".into(), "1024".into(), "--d".into(), "16".into(), "--clusters".into(), "4".into(), "--w-grid".into(), "64,256,1024".into(), "--seeds".into(), "0".into()]),
        ("separation", vec!["separation".into(), "--n-grid".into(), "256".into(), "--d".into(), "32".into(), "--k".into(), "3".into(), "--n-out".into(), "4".into(), "--seeds".into(), "0,1".into()]),
        ("compare", vec!["compare".into(), "--sidecar".into(), format!("{keys}.json"), "--methods".into(), "manifold,keydiff,windowed:64,hybrid:0.3".into()]),
        ("compare", vec!["compare".into(), "--input".into(), keys.clone()]),
        ("dim_estimate", vec!["dim-estimate".into(), "--input".into(), keys.clone()]),
        ("dim_estimate", vec!["dim-estimate".into(), "--input".into(), keys.clone(), "--pooled".into()]),
    ];
    for (schema, args) in cases {
        let o = bin().args(&args).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        check_schema(schema, &stdout(&o));
    }
}

#[test]
fn json_format_nests_rows_by_key() {
    let o = run(&["collision-demo", "--n", "64", "--seeds", "0", "--format", "json"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["rows"]["manifold"]["0"]["retention"], 1.0);
    assert!(v["metadata"]["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn job_count_does_not_change_output() {
    let args = ["dilution", "--n", "2048", "--d", "32", "--k-grid", "1,4,8", "--seeds", "0,1,2"];
    let one = run(&[&args[..], &["--jobs", "1"]].concat());
    let two = run(&[&args[..], &["--jobs", "3"]].concat());
    assert!(one.status.success() && two.status.success());
    assert_eq!(one.stdout, two.stdout);
}
