//! End-to-end tests of the binary: exit codes, config resolution, the full
//! mini pipeline, rerun determinism, and published-scale accounting.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use learngene_core::checkpoint::Archive;

fn learngene(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_learngene"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = learngene(dir, args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

/// Generates data and trains all three models with the cheapest knobs.
fn train_prefix(dir: &Path) {
    ok(dir, &["gen-data", "--count", "16"]);
    ok(dir, &["distill-aux", "--aux", "ancestry", "--pretrain-epochs", "1"]);
    ok(dir, &["distill-aux", "--aux", "low", "--distill-epochs", "1"]);
    ok(dir, &["distill-aux", "--aux", "high", "--distill-epochs", "1"]);
}

#[test]
fn account_at_published_scale_pins_table_costs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(
        tmp.path(),
        &["account", "--profile", "deit", "--pool", "12", "--mode", "table"],
    );
    let rows: Vec<&str> = out
        .lines()
        .skip_while(|l| *l != "path,k,m,params,flops")
        .skip(1)
        .take_while(|l| !l.is_empty())
        .collect();
    assert_eq!(rows.len(), 7, "table mode over a 12-instance pool:\n{out}");
    assert!(rows.contains(&"k6m7,6,7,3047080,641388288"), "{rows:?}");
    assert!(rows.contains(&"k5m6,5,6,10414888,2022918528"), "{rows:?}");
    assert!(rows.contains(&"k0m1,0,1,44035816,8840100864"), "{rows:?}");
    assert!(tmp.path().join("runs/account.csv").exists());
}

#[test]
fn mini_pipeline_runs_end_to_end_and_reruns_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    train_prefix(dir);
    ok(dir, &["build-pool"]);
    ok(dir, &["finetune-pool", "--finetune-epochs", "1"]);
    ok(dir, &["assemble", "--path", "k1m2"]);
    let eval_out = ok(dir, &["eval", "--path", "k1m2"]);
    assert!(eval_out.contains("k1m2,16,"), "eval row missing:\n{eval_out}");

    for name in [
        "data.lgds",
        "ancestry.lgpk",
        "aux_low.lgpk",
        "aux_high.lgpk",
        "pool.lgpk",
        "pool_tuned.lgpk",
        "descendant_k1m2.lgpk",
        "eval.csv",
        "finetune.csv",
    ] {
        let artifact = dir.join("runs").join(name);
        assert!(artifact.exists(), "missing {name}");
        let sidecar = dir.join("runs").join(format!("{name}.manifest.json"));
        let side = fs::read_to_string(&sidecar).unwrap_or_else(|_| panic!("missing sidecar for {name}"));
        assert!(side.contains("\"config_hash\""), "sidecar for {name} lacks a hash");
    }

    // The checkpoint itself carries the resolved configuration.
    let pool = Archive::load(&dir.join("runs/pool.lgpk")).unwrap();
    assert!(pool.manifest.metadata.contains_key("config"));
    assert!(pool.manifest.metadata.contains_key("config_hash"));

    // Same configuration and seed, same bytes.
    let pool_before = fs::read(dir.join("runs/pool.lgpk")).unwrap();
    let eval_before = fs::read(dir.join("runs/eval.csv")).unwrap();
    ok(dir, &["build-pool"]);
    ok(dir, &["eval", "--path", "k1m2"]);
    assert_eq!(pool_before, fs::read(dir.join("runs/pool.lgpk")).unwrap());
    assert_eq!(eval_before, fs::read(dir.join("runs/eval.csv")).unwrap());
}

#[test]
fn stitch_init_modes_all_build() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    train_prefix(dir);
    ok(dir, &["build-pool", "--stitch-init", "tm", "--orientation", "pseudo-inverse"]);
    let ls = ok(dir, &["build-pool", "--stitch-init", "ls"]);
    assert!(ls.contains("rank"), "least squares reports per-stitch rank:\n{ls}");
    ok(dir, &["build-pool", "--stitch-init", "random"]);
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("learngene.toml"), "[hyper]\nbogus = 3\n").unwrap();
    let o = learngene(tmp.path(), &["enumerate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn constraint_violations_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = learngene(tmp.path(), &["enumerate", "--alpha", "1.5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hyper.alpha"), "{}", stderr(&o));
}

#[test]
fn flags_override_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("learngene.toml"), "[hyper]\nalpha = 0.9\n").unwrap();
    let from_file = ok(tmp.path(), &["enumerate"]);
    assert!(from_file.contains("alpha = 0.9"), "{from_file}");
    let overridden = ok(tmp.path(), &["enumerate", "--alpha", "0.3"]);
    assert!(overridden.contains("alpha = 0.3"), "{overridden}");
}

#[test]
fn empty_config_resolves_to_mini_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("learngene.toml"), "").unwrap();
    let out = ok(tmp.path(), &["enumerate"]);
    assert!(out.contains("profile = \"mini\""), "{out}");
    assert!(out.contains("alpha = 0.5"), "{out}");
    assert!(out.contains("tau = 1.0"), "{out}");
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = learngene(tmp.path(), &["--nope"]);
    assert_eq!(code(&o), 1);
    let o = learngene(tmp.path(), &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_prerequisite_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let o = learngene(tmp.path(), &["finetune-pool"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("pool.lgpk"), "{}", stderr(&o));
    let o = learngene(tmp.path(), &["distill-aux", "--aux", "low"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.lgds"), "{}", stderr(&o));
}

#[test]
fn explicit_config_file_must_exist() {
    let tmp = tempfile::tempdir().unwrap();
    let o = learngene(tmp.path(), &["--config", "nowhere.toml", "enumerate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.toml"), "{}", stderr(&o));
}

#[test]
fn accounting_profile_refuses_training_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let o = learngene(tmp.path(), &["gen-data", "--profile", "deit"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("profile"), "{}", stderr(&o));
    // Accounting itself stays available.
    ok(tmp.path(), &["enumerate", "--profile", "deit", "--pool", "18"]);
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck"]);
    assert!(out.contains("op,max_rel_err"), "{out}");
    assert!(out.contains("within"), "{out}");
    assert!(tmp.path().join("runs/gradcheck.csv").exists());
}

#[test]
fn budget_filter_ranks_feasible_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["account", "--max-params", "60000"]);
    let rows: Vec<&str> = out
        .lines()
        .skip_while(|l| *l != "path,k,m,params,flops")
        .skip(1)
        .take_while(|l| !l.is_empty())
        .collect();
    assert!(!rows.is_empty());
    let params: Vec<u64> = rows
        .iter()
        .map(|r| r.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(params.iter().all(|&p| p <= 60_000), "{params:?}");
    assert!(params.windows(2).all(|w| w[0] >= w[1]), "descending: {params:?}");
}
