//! End-to-end behaviour of the `causalgrid` binary on the toy inputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy/config.json")
}

fn causalgrid(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causalgrid"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Toy config with `edit` applied, written next to a copy of the inputs.
fn edited_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let src = toy_config();
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&src).unwrap()).unwrap();
    for name in ["crashes.csv", "images.csv", "tracts.geojson"] {
        std::fs::copy(src.with_file_name(name), dir.join(name)).unwrap();
    }
    edit(&mut cfg);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn missing_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |c| c["inputs"]["crashes"] = "nowhere.csv".into());
    let o = causalgrid(&["grid-build"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere.csv"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn hetero_without_forest_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = causalgrid(&["grid-build"], &toy_config(), &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(causalgrid(&["screen"], &toy_config(), &out).status.code(), Some(0));
    let o = causalgrid(&["hetero"], &toy_config(), &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cforest"), "{}", stderr(&o));
}

#[test]
fn unreadable_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, "{ \"seed\": ").unwrap();
    assert_eq!(causalgrid(&["run"], &cfg, dir.path()).status.code(), Some(2));
}

#[test]
fn full_run_writes_every_artifact_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = causalgrid(&["run"], &toy_config(), &a);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let report = String::from_utf8(first.stdout).unwrap();
    assert!(report.contains("Robustness screen"));
    assert!(report.contains("Simulation scores"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("run_manifest.json")).unwrap()).unwrap();
    assert!(manifest["failure"].is_null());
    let stages = manifest["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 8);
    let mut files = Vec::new();
    for s in stages {
        assert_eq!(s["status"], "ok");
        for art in s["artifacts"].as_array().unwrap() {
            files.push(art["path"].as_str().unwrap().to_string());
        }
    }
    for f in &files {
        let text = std::fs::read_to_string(a.join(f)).unwrap();
        if f.ends_with(".json") || f.ends_with(".geojson") {
            serde_json::from_str::<serde_json::Value>(&text).unwrap_or_else(|e| panic!("{f}: {e}"));
        } else if f.ends_with(".csv") {
            let mut rdr = csv::Reader::from_reader(text.as_bytes());
            let width = rdr.headers().unwrap().len();
            for rec in rdr.records() {
                assert_eq!(rec.unwrap().len(), width, "{f}");
            }
        }
    }

    let second = causalgrid(&["run"], &toy_config(), &b);
    assert_eq!(second.status.code(), Some(0));
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
}

#[test]
fn seed_override_changes_the_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, seed) in [(&a, "1"), (&b, "2")] {
        let o = causalgrid(&["run", "--seed", seed], &toy_config(), out);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let est = |d: &Path| std::fs::read(d.join("estimates.json")).unwrap();
    assert_ne!(est(&a), est(&b));
}

#[test]
fn simulate_scores_each_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let o = causalgrid(&["simulate"], &toy_config(), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(dir.path().join("scores.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "coverage").expect("coverage column");
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let c: f64 = r[col].parse().unwrap();
        assert!((0.0..=1.0).contains(&c));
    }
}

#[test]
fn report_recomputes_delta_from_stored_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for stage in ["grid-build", "screen", "dml"] {
        assert_eq!(causalgrid(&[stage], &toy_config(), out).status.code(), Some(0));
    }
    std::fs::write(
        out.join("semi_elasticity.csv"),
        "outcome,ate,se,ci_low,ci_high,p_value,y_mean,y_q1,treatment_q1_cut,delta_pct\n\
         crashes,-1.5,0.5,-2.48,-0.52,0.0027,8.0,10.0,0.25,0\n\
         crashes_angle,0.4,0.3,-0.19,0.99,0.18,2.0,0.0,0.25,0\n",
    )
    .unwrap();
    let o = causalgrid(&["report"], &toy_config(), out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let line = |name: &str| text.lines().find(|l| l.starts_with(&format!("{name} "))).unwrap().to_string();
    assert!(line("crashes").trim_end().ends_with("-15%"), "{text}");
    assert!(line("crashes_angle").trim_end().ends_with("NA"), "{text}");
    assert!(text.contains("<= 0.2500 (Q1)"));
}
