use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const PROTOTYPE: &str = r#"{
  "problem": {
    "phi": {"affine": {"slope": 0.6, "intercept": "alpha", "at": 0.4}},
    "abar": 0.4
  },
  "solver": {"n_cells": 100, "dt": 1e-4, "t_end": 0.01},
  "seed": 7
}"#;

fn run(kind: &str, config: &str, dir: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_hystereact"))
        .arg(kind)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    (o, out)
}

fn manifest(dir: &Path) -> Vec<(String, String)> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(' ').unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn get<'a>(m: &'a [(String, String)], key: &str) -> &'a str {
    &m.iter()
        .find(|(k, _)| k == key)
        .unwrap_or_else(|| panic!("missing {key}"))
        .1
}

#[test]
fn simulate_prototype_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run("simulate", PROTOTYPE, tmp.path(), &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let traj = fs::read_to_string(out.join("traj.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "t,x,u,v,config");
    assert_eq!(traj.lines().count(), 1 + 101 * 101);
    let track = fs::read_to_string(out.join("track.csv")).unwrap();
    assert_eq!(track.lines().next().unwrap(), "t,a,b,status");
    let m = manifest(&out);
    assert_eq!(get(&m, "status"), "completed");
    assert_eq!(get(&m, "tracking"), "true");
}

#[test]
fn manifest_hashes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run("simulate", PROTOTYPE, tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let m = manifest(&out);
    let cfg = fs::read(tmp.path().join("config.json")).unwrap();
    assert_eq!(get(&m, "config_sha256"), hex::encode(Sha256::digest(&cfg)));
    assert_eq!(get(&m, "library_version"), env!("CARGO_PKG_VERSION"));
    assert_eq!(get(&m, "seed"), "7");
    let files: Vec<&str> = m
        .iter()
        .filter(|(k, _)| k == "file")
        .map(|(_, v)| v.as_str())
        .collect();
    let mut listed: Vec<&str> = files.iter().map(|f| f.split(' ').next().unwrap()).collect();
    listed.sort();
    let mut on_disk: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.txt")
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    for f in files {
        let (name, hash) = f.split_once(' ').unwrap();
        assert_eq!(
            hash,
            hex::encode(Sha256::digest(fs::read(out.join(name)).unwrap()))
        );
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, oa) = run("simulate", PROTOTYPE, a.path(), &[]);
    let (_, ob) = run("simulate", PROTOTYPE, b.path(), &["--jobs", "3"]);
    for name in ["traj.csv", "track.csv", "manifest.txt"] {
        assert_eq!(
            fs::read(oa.join(name)).unwrap(),
            fs::read(ob.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn bad_dt_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = run(
        "simulate",
        &PROTOTYPE.replace("\"dt\": 1e-4", "\"dt\": 0"),
        tmp.path(),
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("solver.dt"));
    assert!(!out.exists());
}

#[test]
fn unknown_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, _) = run(
        "simulate",
        &PROTOTYPE.replace("\"seed\"", "\"sede\""),
        tmp.path(),
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sede"));
}

#[test]
fn verify_branch_reports_finite_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"problem": {}, "verify": {"sigma": 0.5}}"#;
    let (o, out) = run("verify-branch", cfg, tmp.path(), &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let m = manifest(&out);
    for b in ["h1", "h2"] {
        let v: f64 = get(&m, &format!("{b}_m_estimate")).parse().unwrap();
        assert!(v.is_finite() && v > 0.0);
        assert_eq!(get(&m, &format!("{b}_violated")), "false");
    }
}

#[test]
fn perturbation_sweep_satisfies_free_boundary_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PROTOTYPE.replace(
        "\"seed\": 7",
        "\"sweep\": {\"axis\": \"perturbation\", \"values\": [1e-3, 1e-4, 1e-5]}, \"seed\": 7",
    );
    let (o, out) = run("sweep", &cfg, tmp.path(), &["--jobs", "2"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let mut r = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let holds = h.iter().position(|c| c == "lemma_holds").unwrap();
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|row| &row[holds] == "true"));
}

#[test]
fn jobs_env_default_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, PROTOTYPE).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hystereact"))
        .args(["kernel-check", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("k"))
        .env("HYSTEREACT_JOBS", "2")
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(tmp.path().join("k/kernel.csv").exists());
}

#[test]
fn kind_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PROTOTYPE.replacen('{', "{\"kind\": \"slowfast\",", 1);
    let (o, _) = run("simulate", &cfg, tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kind"));
}

#[test]
fn lost_transversality_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PROTOTYPE.replace(
        "\"dt\": 1e-4, \"t_end\": 0.01",
        "\"dt\": 1e-3, \"t_end\": 1.0",
    );
    let (o, out) = run("simulate", &cfg, tmp.path(), &[]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(get(&manifest(&out), "status"), "transversality_lost");
}

#[test]
fn leaving_the_branch_table_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{
      "problem": {
        "branches": {"type": "nullcline", "u_range": [-0.5, 0.5], "resolution": 100},
        "phi": {"affine": {"slope": 0, "intercept": 0.49, "at": 0}},
        "xi0": {"uniform": 2}
      },
      "solver": {"n_cells": 20, "dt": 0.01, "t_end": 1}
    }"#;
    let (o, out) = run("simulate", cfg, tmp.path(), &[]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(get(&manifest(&out), "status"), "domain_violation");
    assert!(out.join("traj.csv").exists());
}

#[test]
fn shipped_configs_validate() {
    use hystereact_cli::config::ExperimentConfig;
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let (cfg, _) = ExperimentConfig::load(&path).unwrap();
        let kind = cfg.kind.unwrap_or_else(|| panic!("{} has no kind", path.display()));
        cfg.validate(kind).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 6);
}
