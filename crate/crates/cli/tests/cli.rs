use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use radner_core::pde_solver::{read_container, write_container};
use serde_json::Value;
use tempfile::TempDir;

fn radner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radner"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr is json: {}", String::from_utf8_lossy(&o.stderr)))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn config(dir: &Path, name: &str, agents: &str, sim: &str) -> PathBuf {
    let text = format!(
        r#"[state]
dim = 1
diffusion = "constant:1.0"
K = 2.0
x0 = [0.0]
T = 1.0

{agents}

[grid]
t_steps = 400
x_min = [-8.0]
x_max = [8.0]
x_steps = [80]

[simulation]
{sim}
"#
    );
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const ONE_AGENT_ZERO: &str = r#"[[agents]]
alpha = 1.0
endowment = "zero"
pi0 = 1.0"#;

const SMALL_SIM: &str = "n_paths = 400\nn_steps = 200\nseed = 5\nkeep_paths = 3\noptimality_paths = 20";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn solve(cfg: &Path, out: &Path) {
    let o = radner(&["solve", s(cfg), "--out", s(out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

/// Column index by header name.
fn column(csv: &str, name: &str) -> usize {
    csv.lines().next().unwrap().split(',').position(|h| h == name).unwrap()
}

fn rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn shipped_configs_parse() {
    for entry in fs::read_dir(shipped("")).unwrap() {
        let p = entry.unwrap().path();
        let text = fs::read_to_string(&p).unwrap();
        let cfg = radner_cli::RunConfig::parse(&text, &p).unwrap_or_else(|e| panic!("{e}"));
        cfg.model().unwrap_or_else(|(k, m)| panic!("{}: {k}: {m}", p.display()));
    }
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "bad.toml", ONE_AGENT_ZERO, "bogus = 1");
    let out = dir.path().join("out");
    let o = radner(&["solve", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let err = stderr_json(&o);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("bad.toml:"));
    assert!(!out.exists() || fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn shares_must_sum_to_one() {
    let dir = TempDir::new().unwrap();
    let agents = "[[agents]]\nalpha = 1.0\nendowment = \"zero\"\npi0 = 0.6\n\n[[agents]]\nalpha = 1.0\nendowment = \"zero\"\npi0 = 0.6";
    let cfg = config(dir.path(), "c.toml", agents, SMALL_SIM);
    let o = radner(&["solve", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let err = stderr_json(&o);
    assert_eq!(err["error"]["line"], 11);
    assert!(err["error"]["message"].as_str().unwrap().contains("sum to 1"));
}

#[test]
fn zero_endowment_solve_and_verify() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "z.toml", ONE_AGENT_ZERO, SMALL_SIM);
    let out = dir.path().join("out");
    solve(&cfg, &out);
    let summary = read_json(&out.join("summary.json"));
    let a0 = summary["A0"].as_f64().unwrap();
    assert!((a0 - 2.0).abs() < 5e-3, "A0 = {a0}");
    assert!(out.join("slice_n0.csv").exists());

    let o = radner(&["verify", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let diag = read_json(&out.join("diagnostics_verify.json"));
    assert!(diag["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn tampered_terminal_slice_fails_verify() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "z.toml", ONE_AGENT_ZERO, SMALL_SIM);
    let out = dir.path().join("out");
    solve(&cfg, &out);
    let path = out.join("solution.bin");
    let mut sol = read_container(&path).unwrap();
    let n = sol.t_steps();
    let mid = sol.n_nodes() / 2;
    sol.values[[n, mid, 1]] += 1e-3;
    write_container(&sol, &path).unwrap();

    let o = radner(&["verify", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let failed = stderr_json(&o)["error"]["failed"].clone();
    assert!(failed.as_array().unwrap().iter().any(|f| f == "terminal_exact"), "{failed}");
}

#[test]
fn fingerprint_mismatch_exits_4() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "z.toml", ONE_AGENT_ZERO, SMALL_SIM);
    let out = dir.path().join("out");
    solve(&cfg, &out);
    let other = dir.path().join("k.toml");
    fs::write(&other, fs::read_to_string(&cfg).unwrap().replace("K = 2.0", "K = 2.5")).unwrap();
    let o = radner(&["verify", s(&other), "--out", s(&out), "--solution", s(&out.join("solution.bin"))]);
    assert_eq!(code(&o), 4);
    assert_eq!(stderr_json(&o)["error"]["kind"], "fingerprint");
}

#[test]
fn divergent_grid_exits_3_with_location() {
    let dir = TempDir::new().unwrap();
    let o = radner(&["solve", s(&shipped("divergent.toml")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
    let err = stderr_json(&o);
    assert!(err["error"]["location"]["node"].is_u64());
    assert!(!dir.path().join("solution.bin").exists());
}

#[test]
fn oracle_agrees_on_zero_endowment() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "z.toml", ONE_AGENT_ZERO, SMALL_SIM);
    let out = dir.path().join("out");
    let o = radner(&["oracle", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = read_json(&out.join("oracle.json"));
    let diff = rep["max_diff"].as_f64().unwrap();
    assert!(diff <= 2e-3, "oracle discrepancy {diff}");
}

#[test]
fn oracle_rejects_variable_diffusion() {
    let dir = TempDir::new().unwrap();
    let o = radner(&["oracle", s(&shipped("variable_sigma.toml")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 5);
    assert_eq!(stderr_json(&o)["error"]["kind"], "unsupported");
}

#[test]
fn oracle_reports_non_contraction_for_small_beta() {
    let dir = TempDir::new().unwrap();
    let o = radner(&["oracle", s(&shipped("small_beta.toml")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
    let c = &stderr_json(&o)["error"]["contraction"];
    assert!(c["factor"].as_f64().unwrap() >= 1.0);
    assert!(c["suggested_beta"].as_f64().unwrap() > c["beta"].as_f64().unwrap());
}

#[test]
fn truncated_small_n_reports_first_disagreement() {
    let dir = TempDir::new().unwrap();
    let cfg = shipped("truncated_small_n.toml");
    solve(&cfg, dir.path());
    let o = radner(&["verify", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    let diag = read_json(&dir.path().join("diagnostics_verify.json"));
    let check = diag["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "truncation_consistency")
        .unwrap()
        .clone();
    assert_eq!(check["pass"], false);
    assert!(check["detail"].as_str().unwrap().contains("first disagreement at time index"));
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "z.toml", ONE_AGENT_ZERO, SMALL_SIM);
    let out = dir.path().join("out");
    solve(&cfg, &out);
    let run = |tag: &str| {
        let o = radner(&["simulate", s(&cfg), "--out", s(&out), "--seed", "42"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let d = out.join(tag);
        fs::create_dir_all(&d).unwrap();
        for f in ["diagnostics.json", "paths.csv"] {
            fs::rename(out.join(f), d.join(f)).unwrap();
        }
        d
    };
    let a = run("a");
    let b = run("b");
    for f in ["diagnostics.json", "paths.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(read_json(&a.join("diagnostics.json"))["seed"], 42);
}

#[test]
fn symmetric_agents_have_identical_paths() {
    let dir = TempDir::new().unwrap();
    let agent = "[[agents]]\nalpha = 1.5\nendowment = \"gaussian_bump:0.0,1.5,0.6\"\npi0 = 0.5\n";
    let cfg = config(dir.path(), "sym.toml", &format!("{agent}\n{agent}"), SMALL_SIM);
    let out = dir.path().join("out");
    solve(&cfg, &out);
    let o = radner(&["simulate", s(&cfg), "--out", s(&out)]);
    assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("paths.csv")).unwrap();
    for (l, r) in [("X1", "X2"), ("pi1", "pi2"), ("c1", "c2")] {
        let (i, j) = (column(&csv, l), column(&csv, r));
        for row in rows(&csv) {
            assert_eq!(row[i], row[j], "{l} vs {r}");
        }
    }
}

#[test]
fn constant_endowment_consumption_offset() {
    let dir = TempDir::new().unwrap();
    let agents = "[[agents]]\nalpha = 1.0\nendowment = \"constant:0.5\"\npi0 = 0.3\n\n[[agents]]\nalpha = 2.5\nendowment = \"constant:0.8\"\npi0 = 0.7";
    let cfg = config(dir.path(), "c.toml", agents, SMALL_SIM);
    let out = dir.path().join("out");
    solve(&cfg, &out);
    let o = radner(&["simulate", s(&cfg), "--out", s(&out)]);
    assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("paths.csv")).unwrap();
    let ia = column(&csv, "A");
    for (k, c) in [(1, 0.5), (2, 0.8)] {
        let (ic, ix) = (column(&csv, &format!("c{k}")), column(&csv, &format!("X{k}")));
        for row in rows(&csv) {
            let gap = row[ic] - row[ix] / row[ia];
            assert!((gap - c).abs() < 1e-2, "agent {k}: c - X/A = {gap}");
        }
    }
}
