use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 11
variants = ["vanilla", "whitened"]

[system]
H = 12

[dataset]
N = 8

[charfn]
steps = 3
n_eval_rollouts = 6

[valuation]
M = 12

[analysis]
n_boot = 120

[curation]
n_seeds = 2

[saddle]
n_paths = 200
sigma2_grid = [0.1, 0.2, 0.4]
"#;

fn tvl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvl"))
        .args(args)
        .current_dir(dir)
        .env_remove("TVL_WORKERS")
        .output()
        .expect("tvl runs")
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("tiny.toml"), TINY).unwrap();
    d
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_run_in_sequence() {
    let d = setup();
    for stage in [
        "generate", "metrics", "value", "analyze", "curate", "saddle",
    ] {
        let o = tvl(&[stage, "--config", "tiny.toml", "--out", "run"], d.path());
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("run/manifest.json")).unwrap())
            .unwrap();
    let arts = m["artifacts"].as_object().unwrap();
    for f in [
        "dataset.json",
        "metrics.csv",
        "valuation.json",
        "mechanism.json",
        "curation.csv",
        "saddle.csv",
    ] {
        assert!(arts.contains_key(f), "{f} missing from manifest");
        assert!(d.path().join("run").join(f).exists());
    }
    // every file in the directory except the manifest is listed
    for entry in std::fs::read_dir(d.path().join("run")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        assert!(
            name == "manifest.json" || arts.contains_key(&name),
            "{name} unlisted"
        );
    }
    // later stages may omit the flags and pick the configuration up from the manifest
    let o = tvl(&["analyze", "--out", "run"], d.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn tampered_dataset_is_refused() {
    let d = setup();
    assert_eq!(
        code(&tvl(
            &["generate", "--config", "tiny.toml", "--out", "run"],
            d.path()
        )),
        0
    );
    let p = d.path().join("run/dataset.json");
    let text = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, text.replacen("\"seed\"", "\"seed\" ", 1)).unwrap();
    let o = tvl(
        &["value", "--config", "tiny.toml", "--out", "run"],
        d.path(),
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("dataset.json"), "{}", stderr(&o));
}

#[test]
fn missing_input_and_foreign_config_are_refused() {
    let d = setup();
    let o = tvl(
        &["value", "--config", "tiny.toml", "--out", "run"],
        d.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = tvl(
        &[
            "generate",
            "--config",
            "tiny.toml",
            "--seed",
            "5",
            "--out",
            "run",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("configuration"));
}

#[test]
fn config_errors_exit_two() {
    let d = setup();
    std::fs::write(d.path().join("bad.toml"), "[dataset]\nN = 1\n").unwrap();
    assert_eq!(
        code(&tvl(
            &["generate", "--config", "bad.toml", "--out", "r"],
            d.path()
        )),
        2
    );
    assert_eq!(
        code(&tvl(
            &["generate", "--config", "absent.toml", "--out", "r"],
            d.path()
        )),
        2
    );
    let o = Command::new(env!("CARGO_BIN_EXE_tvl"))
        .args(["saddle", "--config", "tiny.toml", "--out", "r"])
        .current_dir(d.path())
        .env("TVL_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn reproduce_is_deterministic_and_resumable() {
    let d = setup();
    let a = tvl(
        &["reproduce-paper", "--config", "tiny.toml", "--out", "a"],
        d.path(),
    );
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = tvl(
        &[
            "reproduce-paper",
            "--config",
            "tiny.toml",
            "--out",
            "b",
            "--workers",
            "1",
        ],
        d.path(),
    );
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    let read = |run: &str, f: &str| std::fs::read(d.path().join(run).join(f)).unwrap();
    for f in [
        "dataset.json",
        "valuation.json",
        "mechanism.json",
        "curation.json",
        "saddle.json",
    ] {
        assert_eq!(read("a", f), read("b", f), "{f} differs");
    }

    let before = read("a", "mechanism.json");
    std::fs::remove_file(d.path().join("a/mechanism.json")).unwrap();
    let again = tvl(&["reproduce-paper", "--out", "a"], d.path());
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    let log = String::from_utf8_lossy(&again.stdout);
    assert!(log.contains("value: up to date, skipped"), "{log}");
    assert!(log.contains("analyze:"), "{log}");
    assert_eq!(read("a", "mechanism.json"), before);
}

#[test]
fn paper_scale_echoes_settings() {
    let d = setup();
    let o = tvl(&["generate", "--paper-scale", "--out", "p"], d.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("p/manifest.json")).unwrap())
            .unwrap();
    let h = &m["hyperparameters"];
    assert_eq!(m["scale"], "paper");
    assert_eq!(h["H"], 100);
    assert_eq!(h["sigma_a"], 0.5);
    assert_eq!(h["lr"], 1e-4);
    assert_eq!(h["M"], 2500);
    assert_eq!(h["T"], 50);
    assert_eq!(h["N"], 50);
    assert_eq!(h["eval_rollouts"], 50);
    assert_eq!(h["proxy_fraction"], 0.8);
    assert_eq!(m["config"]["charfn"]["grad_clip"], 0.01);
}
