use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn vbl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbl"))
        .args(args)
        .env_remove("VBL_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vbl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &TempDir, preset: &str, seed: &str) -> PathBuf {
    let out = path(dir, &format!("{preset}-{seed}.json"));
    ok(&["gen", "--preset", preset, "--seed", seed, "--out", s(&out)]);
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn without_timing(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("wall_ms");
    v
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut reader = csv::Reader::from_path(p).unwrap();
    let header = reader.headers().unwrap().iter().map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn gen_prints_dimensions_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "paper.json");
    let stdout = ok(&["gen", "--preset", "paper", "--seed", "4", "--out", s(&out)]);
    assert!(stdout.contains("D=710"), "{stdout}");
    assert!(stdout.contains("fim=225x225"), "{stdout}");
    let again = path(&dir, "paper-again.json");
    ok(&["gen", "--preset", "paper", "--seed", "4", "--out", s(&again)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());

    let toy = path(&dir, "toy.json");
    let stdout = ok(&["gen", "--preset", "toy", "--out", s(&toy)]);
    assert!(stdout.contains("D=13"), "{stdout}");
    let doc = read_json(&toy);
    for key in ["vehicles", "features", "intrinsics", "noise", "ranges", "seed"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    assert_eq!(doc["vehicles"][0]["rotation"].as_array().unwrap().len(), 9);
}

#[test]
fn gen_to_unwritable_path_fails_with_input_status() {
    let out = vbl(&["gen", "--out", "/nonexistent-dir/x/scenario.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[io]"));
}

#[test]
fn uniform_allocation_of_one_bit_each() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(&dir, "paper", "0");
    let out = path(&dir, "alloc.json");
    ok(&[
        "allocate", "--scenario", s(&scenario), "--budget", "710", "--algo", "uniform", "--out", s(&out),
    ]);
    let doc = read_json(&out);
    let bits = doc["bits"].as_array().unwrap();
    assert_eq!(bits.len(), 710);
    assert!(bits.iter().all(|b| b.as_f64() == Some(1.0)));
    assert_eq!(doc["algorithm"], "uniform");
    assert_eq!(doc["budget"], 710);
}

#[test]
fn vgd_is_reproducible_and_beats_uniform() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(&dir, "paper", "0");
    let run = |name: &str, algo: &str| {
        let out = path(&dir, name);
        ok(&[
            "allocate", "--scenario", s(&scenario), "--budget", "2000", "--algo", algo, "--seed", "3", "--out",
            s(&out),
        ]);
        read_json(&out)
    };
    let a = run("a.json", "vgd");
    let b = run("b.json", "vgd");
    assert_eq!(without_timing(a.clone()), without_timing(b));
    let total: f64 = a["bits"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert_eq!(total, 2000.0);
    let uniform = run("u.json", "uniform");
    assert!(a["rel_speb_root_m"].as_f64().unwrap() < uniform["rel_speb_root_m"].as_f64().unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(&dir, "toy", "0");
    let run = |name: &str, env_seed: Option<&str>, flag: Option<&str>| {
        let out = path(&dir, name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vbl"));
        cmd.args(["allocate", "--scenario", s(&scenario), "--budget", "30", "--algo", "sa", "--out", s(&out)]);
        cmd.env_remove("VBL_SEED");
        if let Some(v) = env_seed {
            cmd.env("VBL_SEED", v);
        }
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        assert!(cmd.output().unwrap().status.success());
        read_json(&out)
    };
    let from_env = run("env.json", Some("9"), None);
    let from_flag = run("flag.json", None, Some("9"));
    assert_eq!(from_env["seed"], 9);
    assert_eq!(without_timing(from_env), without_timing(from_flag));
}

#[test]
fn unobservable_budget_exits_with_numerical_status() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(&dir, "toy", "0");
    let out = vbl(&[
        "allocate", "--scenario", s(&scenario), "--budget", "1", "--algo", "uniform", "--out",
        s(&path(&dir, "a.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[unobservable]"));
}

#[test]
fn malformed_inputs_exit_with_input_status() {
    let dir = TempDir::new().unwrap();
    let missing = vbl(&["allocate", "--scenario", "/nonexistent.json", "--budget", "10", "--out", "x.json"]);
    assert_eq!(missing.status.code(), Some(2));

    let bad = path(&dir, "bad.json");
    fs::write(&bad, "{\"vehicles\": 3}").unwrap();
    let out = vbl(&["allocate", "--scenario", s(&bad), "--budget", "10", "--out", s(&path(&dir, "a.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[parse]"));

    let scenario = gen(&dir, "toy", "0");
    let out = vbl(&["allocate", "--scenario", s(&scenario), "--budget", "10", "--algo", "greedy", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    // a paper-sized allocation against the toy scenario
    let paper = gen(&dir, "paper", "0");
    let alloc = path(&dir, "paper-alloc.json");
    ok(&["allocate", "--scenario", s(&paper), "--budget", "710", "--algo", "uniform", "--out", s(&alloc)]);
    let out = vbl(&[
        "validate", "--scenario", s(&scenario), "--allocation", s(&alloc), "--trials", "1", "--out",
        s(&path(&dir, "v.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[dimension_mismatch]"));
}

#[test]
fn sweep_rows_header_and_monotonicity() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(&dir, "toy", "1");
    let out = path(&dir, "sweep.csv");
    ok(&[
        "sweep", "--scenario", s(&scenario), "--budgets", "700:2700:200", "--jobs", "2", "--seed", "5", "--out",
        s(&out),
    ]);
    let (header, rows) = read_csv(&out);
    assert_eq!(header.join(","), "budget,algorithm,seed,rel_speb_root_m,wall_ms,m_star,iterations");
    assert_eq!(rows.len(), 44);
    // deterministic (budget, algorithm) order
    assert_eq!(rows[0][..2], ["700".to_string(), "uniform".to_string()]);
    assert_eq!(rows[3][..2], ["700".to_string(), "sa".to_string()]);
    assert_eq!(rows[43][..2], ["2700".to_string(), "sa".to_string()]);
    for algo in ["uniform", "vgd", "decouple", "sa"] {
        let roots: Vec<f64> = rows
            .iter()
            .filter(|r| r[1] == algo)
            .map(|r| r[3].parse().unwrap())
            .collect();
        assert!(roots.iter().all(|r| *r > 0.0));
        for w in roots.windows(2) {
            assert!(w[1] <= w[0] * 1.02, "{algo}: {roots:?}");
        }
    }
    let mean_wall = |algo: &str| {
        let v: Vec<f64> = rows.iter().filter(|r| r[1] == algo).map(|r| r[4].parse().unwrap()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean_wall("vgd") < mean_wall("sa"));
}

#[test]
fn sweep_records_failed_cells() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(&dir, "toy", "0");
    let out = path(&dir, "sweep.csv");
    ok(&[
        "sweep", "--scenario", s(&scenario), "--budgets", "1:21:20", "--algos", "uniform", "--out", s(&out),
    ]);
    let (header, rows) = read_csv(&out);
    assert_eq!(header.last().unwrap(), "error");
    assert_eq!(rows.len(), 2);
    assert!(rows[0][3].is_empty() && rows[0][7].starts_with("unobservable"));
    assert!(!rows[1][3].is_empty() && rows[1][7].is_empty());
}

fn write_allocation(dir: &TempDir, bits: &[f64]) -> PathBuf {
    let p = path(dir, "sixteen.json");
    let doc = serde_json::json!({
        "algorithm": "manual", "budget": bits.iter().sum::<f64>() as u64, "seed": 0, "m_star": 0.0,
        "speb": 0.0, "rel_speb_root_m": 0.0, "iterations": 0, "wall_ms": 0.0, "bits": bits,
    });
    fs::write(&p, doc.to_string()).unwrap();
    p
}

#[test]
fn validate_single_trial_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(&dir, "toy", "0");
    let alloc = write_allocation(&dir, &[16.0; 13]);
    let run = |name: &str| {
        let out = path(&dir, name);
        ok(&[
            "validate", "--scenario", s(&scenario), "--allocation", s(&alloc), "--trials", "1", "--seed", "2",
            "--out", s(&out),
        ]);
        fs::read_to_string(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    assert_eq!(a.lines().count(), 3);
}

#[test]
fn validate_bound_holds_at_sixteen_bits() {
    let dir = TempDir::new().unwrap();
    let scenario = gen(&dir, "toy", "0");
    let alloc = write_allocation(&dir, &[16.0; 13]);
    let out = path(&dir, "mc.csv");
    ok(&[
        "validate", "--scenario", s(&scenario), "--allocation", s(&alloc), "--trials", "200", "--seed", "1",
        "--out", s(&out),
    ]);
    let (header, rows) = read_csv(&out);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert_eq!(rows.len(), 201);
    let summary = rows.last().unwrap();
    assert_eq!(summary[col("kind")], "summary");
    assert!(summary[col("ratio")].parse::<f64>().unwrap() >= 0.9);
    assert_eq!(summary[col("failures")], "0");
}
