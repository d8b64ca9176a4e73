use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"
prior = { weights = [0.5, 0.5], means = [[-1.0], [1.0]], covariances = [[[0.5]], [[0.5]]] }
rewards = [{ kind = "linear", a = [1.0] }, { kind = "linear", a = [-1.0] }]
methods = ["morl_oracle", "db_mpa", "pretrained"]
w_grid = [0.25, 0.75]
seeds = [0, 1]
lambda_grid = [0.5, 1.0]

[sampler]
steps = 50
samples = 500
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffblend"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pareto_writes_table_plot_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = run(&["pareto", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["pareto.csv", "pareto_summary.csv", "pareto.svg", "run.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("pareto.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 2);
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(rec["config_hash"].as_str().unwrap().len(), 64);
    assert!(!rec["version"].as_str().unwrap().is_empty());
    assert_eq!(rec["methods"].as_array().unwrap().len(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let read = |sub: &str, cmd: &str, file: &str| {
        let out = dir.path().join(sub);
        let o = run(&[cmd, cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--no-plots"]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join(file)).unwrap()
    };
    assert_eq!(read("a", "pareto", "pareto.csv"), read("b", "pareto", "pareto.csv"));
    assert_eq!(read("c", "sample", "samples_db_mpa.csv"), read("d", "sample", "samples_db_mpa.csv"));
}

#[test]
fn missing_config_names_the_path() {
    let o = run(&["pareto", "/nonexistent/where.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/where.toml"), "{}", stderr(&o));
}

#[test]
fn zero_alpha_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&["pareto", cfg.to_str().unwrap(), "--override", "alpha=0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha > 0"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_and_subcommands_print_usage() {
    for args in [&["pareto", "x.toml", "--bogus"][..], &["frobnicate"][..]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = bin()
        .args(["validate", cfg.to_str().unwrap()])
        .env("DIFFBLEND_OUT_DIR", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("root/small/validate.csv").is_file());
}

#[test]
fn kla_jensen_and_fit_subcommands_run() {
    let dir = tempfile::tempdir().unwrap();
    let one = SMALL.replace(r#", { kind = "linear", a = [-1.0] }"#, "");
    let cfg = write_config(dir.path(), &one);
    let small_jensen = ["--override", "jensen.draws=2000", "--override", "jensen.xs=[0.0]"];
    let cases: [(&str, &[&str], &str); 3] = [
        ("kla", &[], "kla_summary.csv"),
        ("jensen", &small_jensen, "jensen.csv"),
        (
            "fit",
            &["--override", "rs.train_samples=2000", "--override", "score_fit.family={kind=\"polynomial\",degree=1}"],
            "score_r1.json",
        ),
    ];
    for (cmd, extra, file) in cases {
        let out = dir.path().join(cmd);
        let mut args = vec![cmd, cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        assert!(out.join(file).is_file(), "{cmd}: missing {file}");
    }
    let o = run(&["kla", write_config(dir.path(), SMALL).to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "two rewards are rejected by kla");
}
