use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
samples = 400

[train]
source_steps = 200
adapt_steps = 200
eval_interval = 50
"#;

fn apa(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apa")).args(args).env("APA_OUT_DIR", root).output().expect("spawn apa")
}

fn ok(root: &Path, args: &[&str]) {
    let out = apa(root, args);
    assert!(
        out.status.success(),
        "apa {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn gen_data_writes_two_default_files_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("out");
    ok(&root, &["gen-data"]);
    let data = root.join("data");
    assert_eq!(rows(&data.join("source.csv")), 2000);
    assert_eq!(rows(&data.join("target.csv")), 2000);
    let first = files(&root);
    ok(&root, &["gen-data", "--force"]);
    assert_eq!(first, files(&root));
}

#[test]
fn existing_outputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let root = tmp.path().join("out");
    ok(&root, &["gen-data", "-c", cfg.to_str().unwrap()]);
    let out = apa(&root, &["gen-data", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
}

#[test]
fn malformed_config_reports_line_and_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbeta = 0.1\nbeta_typo = 2\n").unwrap();
    let out = apa(tmp.path(), &["gen-data", "-c", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("beta_typo"), "{err}");

    std::fs::write(&bad, "[train\n").unwrap();
    let out = apa(tmp.path(), &["gen-data", "-c", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = apa(tmp.path(), &["train", "--stage", "adapt", "--loss", "nope"]);
    assert_eq!(out.status.code(), Some(3));
    let out = apa(tmp.path(), &["verify", "--level", "medium"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_artifacts_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let c = cfg.to_str().unwrap();
    let root = tmp.path().join("out");
    assert_eq!(apa(&root, &["train", "--stage", "source", "-c", c]).status.code(), Some(2));
    ok(&root, &["gen-data", "-c", c]);
    let out = apa(&root, &["train", "--stage", "adapt", "-c", c]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.json"));
    assert_eq!(apa(&root, &["probe", "--kind", "shrink", "-c", c]).status.code(), Some(2));
    // datasets from a different task are not silently reused
    assert_eq!(apa(&root, &["train", "--stage", "source"]).status.code(), Some(2));
    assert_eq!(apa(&root, &["gen-data", "-c", "/nonexistent/cfg.toml"]).status.code(), Some(2));
}

fn pipeline(root: &Path, cfg: &str) {
    ok(root, &["gen-data", "-c", cfg]);
    ok(root, &["train", "--stage", "source", "-c", cfg]);
    ok(root, &["train", "--stage", "adapt", "-c", cfg]);
    ok(root, &["train", "--stage", "adapt", "--loss", "vat", "-c", cfg]);
    ok(root, &["train", "--stage", "adapt-sf", "--loss", "apa_u", "-c", cfg]);
    ok(root, &["probe", "--kind", "drift", "-c", cfg]);
    ok(root, &["probe", "--kind", "corr", "-c", cfg]);
    ok(root, &["probe", "--kind", "shrink", "-c", cfg]);
    ok(root, &["sweep", "--param", "beta", "--values", "0,0.1", "--jobs", "2", "-c", cfg]);
    ok(root, &["sweep", "--param", "eps", "--values", "30,100", "--loss", "apa_u,apa_u_comp", "-c", cfg]);
}

#[test]
fn pipeline_outputs_are_byte_identical_across_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let c = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, c);
    pipeline(&b, c);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs between repeats", k.display());
    }
    for ext in ["csv", "json", "svg", "toml"] {
        assert!(fa.keys().any(|k| k.extension().is_some_and(|e| e == ext)), "no .{ext} output");
    }

    let vat = String::from_utf8(fa[Path::new("adapt/vat/records.csv")].clone()).unwrap();
    assert!(vat.lines().next().unwrap().contains("vat*"));
    let summary: serde_json::Value = serde_json::from_slice(&fa[Path::new("adapt/vat/summary.json")]).unwrap();
    assert_eq!(summary["effective_config"]["loss"]["kind"], "vat");
    assert_eq!(summary["run"]["config"]["loss"]["kind"], "vat");
    let sf: serde_json::Value = serde_json::from_slice(&fa[Path::new("adapt-sf/apa_u/summary.json")]).unwrap();
    assert_eq!(sf["effective_config"]["run"]["setting"], "source-free");
    assert_eq!(sf["effective_config"]["loss"]["epsilon"], 30.0);

    // one drift row per evaluation step: 0, 50, ..., 200
    assert_eq!(rows(&a.join("probe/drift/drift.csv")), 5);
    let eps = String::from_utf8(fa[Path::new("sweep/eps/sweep.csv")].clone()).unwrap();
    assert!(eps.starts_with("eps,apa_u_class_acc,apa_u_acc,apa_u_comp_class_acc,apa_u_comp_acc\n"));
    assert_eq!(eps.lines().count(), 3);
    let echoed = String::from_utf8(fa[Path::new("probe/shrink/config.toml")].clone()).unwrap();
    assert!(echoed.contains("samples = 400"));

    // plots are a pure function of the table next to them
    let svg = &fa[Path::new("probe/shrink/shrink.svg")];
    let table = String::from_utf8(fa[Path::new("probe/shrink/shrink.csv")].clone()).unwrap();
    let again = apa_core::plot::Plot::new("gradient-norm ratio vs perturbation size", "epsilon", "ratio", apa_core::plot::Style::Line)
        .log_x()
        .with_csv_columns(&table, "epsilon", &["ratio_mean", "ratio_min", "ratio_max"])
        .unwrap()
        .to_svg();
    assert_eq!(svg, again.as_bytes());
}

#[test]
fn out_flag_overrides_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let env_root = tmp.path().join("env");
    let flag_root = tmp.path().join("flag");
    ok(&env_root, &["gen-data", "-c", cfg.to_str().unwrap(), "--out", flag_root.to_str().unwrap()]);
    assert!(flag_root.join("data/source.csv").is_file());
    assert!(!env_root.exists());
}

#[test]
fn fast_verification_passes_and_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["verify", "--level", "fast"]);
    let path = root.join("verify/fast/report.json");
    let first = std::fs::read(&path).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["passed"], true);
    let names: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for want in ["identity.loss_n_to_u", "identity.loss_u_to_n", "identity.grad_n_to_u", "identity.grad_u_to_n"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    ok(root, &["verify", "--level", "fast", "--force"]);
    assert_eq!(first, std::fs::read(&path).unwrap());
}
