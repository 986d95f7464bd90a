use std::fs;
use std::path::Path;
use std::process::Command;

use aoept_cli::pipeline::{self, Run, Variant};
use aoept_cli::{MissingArtifact, RunConfig};
use aoept_core::mcp::McpMethod;

fn tiny(dir: &Path) -> RunConfig {
    let text = "\
[data]
n_train = 48
n_val = 16
n_test = 24
n_pretrain = 96
seq_len = 3, 3
vocab = 8, 8
[backbone]
layers = 2
d = 8
heads = 2
mlp_ratio = 2
pretrain_epochs = 2
[collections]
n_proto = 4
kmeans_iters = 20
[prompt]
prompt_len = 2
depth = 1
reduction = 2
[train]
epochs = 2
batch_size = 16
seeds = 1
[missing]
table_seeds = 7
[sweep]
sweep_train_etas = 70, 30
sweep_tables = 1
";
    let mut cfg = RunConfig::parse(text).unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn aoept(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_aoept"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("AOEPT_THREADS", "1")
        .output()
        .unwrap()
}

#[test]
fn stages_name_the_missing_upstream_command() {
    let tmp = tempfile::tempdir().unwrap();
    let out = aoept(&["pretrain"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));

    let run = Run::create(tmp.path(), tiny(tmp.path())).unwrap();
    pipeline::gen_data(&run).unwrap();
    let err = pipeline::build_collections(&run, 70.0, "text", None).unwrap_err();
    assert!(err.downcast_ref::<MissingArtifact>().unwrap().command == "pretrain");

    pipeline::pretrain(&run).unwrap();
    let err = pipeline::train_variant(&run, Variant::Aoept(McpMethod::Attention), &run.scenario(), None).unwrap_err();
    let missing = err.downcast_ref::<MissingArtifact>().unwrap();
    assert!(missing.command.starts_with("build-collections"), "{err}");
    let err = pipeline::eval(&run, &run.scenario()).unwrap_err();
    assert!(err.to_string().contains("aoept train"), "{err}");
}

#[test]
fn binary_runs_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.ini");
    let dir = tmp.path().join("run");
    fs::write(&cfg_path, tiny(&dir).to_ini()).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let steps: &[&[&str]] = &[
        &["gen-data", "--config", cfg],
        &["pretrain"],
        &["build-collections"],
        &["train"],
        &["train", "--variant", "no-inst"],
        &["train-baseline"],
        &["train-baseline", "--variant", "lower-bound"],
        &["eval"],
        &["nm2i"],
        &["report"],
    ];
    for step in steps {
        let out = aoept(step, &dir);
        assert!(
            out.status.success(),
            "{step:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let summary = fs::read_to_string(dir.join("summary.md")).unwrap();
    for tag in ["aoept-attention", "noinst-attention", "random", "lower-bound"] {
        assert!(summary.contains(tag), "{tag} missing from summary");
    }
    assert!(dir.join("summary.csv").exists());
    let bad = aoept(&["eval", "--eta-test", "170"], &dir);
    assert!(!bad.status.success());
}

#[test]
fn run_directory_reproduces_eval_and_nm2i() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::create(tmp.path(), tiny(tmp.path())).unwrap();
    pipeline::gen_data(&run).unwrap();
    pipeline::pretrain(&run).unwrap();
    let sc = run.scenario();
    pipeline::build_collections(&run, sc.eta_train, &sc.kind, None).unwrap();
    pipeline::train_variant(&run, Variant::Aoept(McpMethod::Attention), &sc, None).unwrap();
    pipeline::train_variant(&run, Variant::Random, &sc, None).unwrap();
    let e1 = pipeline::eval(&run, &sc).unwrap();
    let n1 = pipeline::nm2i(&run, &sc).unwrap();
    let report = fs::read(tmp.path().join("report.json")).unwrap();
    let nm2i = fs::read(tmp.path().join("nm2i_report.json")).unwrap();

    let reopened = Run::open(tmp.path()).unwrap();
    assert_eq!(reopened.cfg, run.cfg);
    assert_eq!(pipeline::eval(&reopened, &sc).unwrap(), e1);
    assert_eq!(pipeline::nm2i(&reopened, &sc).unwrap(), n1);
    assert_eq!(fs::read(tmp.path().join("report.json")).unwrap(), report);
    assert_eq!(fs::read(tmp.path().join("nm2i_report.json")).unwrap(), nm2i);
}

#[test]
fn sweep_writes_one_row_per_model() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::create(tmp.path(), tiny(tmp.path())).unwrap();
    pipeline::gen_data(&run).unwrap();
    pipeline::pretrain(&run).unwrap();
    let rows = pipeline::scaling_sweep(&run).unwrap();
    assert_eq!(rows.len(), 2 * 2);
    assert_eq!(pipeline::read_sweep(&run).unwrap(), rows);
    let means = pipeline::sweep_means(&rows);
    assert_eq!(means["random"].iter().map(|p| p.0).collect::<Vec<_>>(), vec![70.0, 30.0]);
}
