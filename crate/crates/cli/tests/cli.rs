use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rsdh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsdh")).args(args).output().expect("spawn rsdh")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 4] = ["--c", "4", "--blocks", "1,1,1"];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", p(out), "--pairs", "2", "--size", "16", "--batch", "1", "--patch", "8"];
    args.extend(TINY);
    args.extend(extra);
    rsdh(&args)
}

#[test]
fn help_and_bad_flags() {
    let help = rsdh(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("train"));
    assert_eq!(rsdh(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(rsdh(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(rsdh(&["params", "--blocks", "1,2"]).status.code(), Some(1));
    assert_eq!(rsdh(&["params", "--variant", "v9"]).status.code(), Some(1));
}

#[test]
fn config_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = rsdh(&["train", "--config", p(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.cfg"), "{}", stderr(&o));

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# run\nsteps = 3\nlearning_rate = 1\n").unwrap();
    let o = rsdh(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("run.cfg:3") && err.contains("learning_rate"), "{err}");
}

#[test]
fn config_file_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("run.cfg");
    let text = format!("steps = 4\nc = 4\nblocks = 1,1,1\npairs = 2\nsize = 16\nbatch = 1\npatch = 8\nout = {}\n", out.display());
    fs::write(&cfg, text).unwrap();
    let o = rsdh(&["train", "--config", p(&cfg), "--steps", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
}

#[test]
fn train_writes_one_log_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--steps", "500", "--checkpoint-interval", "250"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,lr,loss,wallclock_s"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 500);
    assert!(rows[0].starts_with("0,0.0002,") || rows[0].starts_with("0,2e-4,"), "{}", rows[0]);
    assert!(rows[499].starts_with("499,"));
    for name in ["step_000250.rsdh", "final.rsdh", "metrics.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        let o = train(out, &["--steps", "4", "--seed", seed, "--holdout", "0"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &Path| fs::read(d.join("final.rsdh")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert!(train(&full, &["--steps", "6", "--holdout", "0"]).status.success());
    assert!(train(&split, &["--steps", "6", "--holdout", "0", "--checkpoint-interval", "3"]).status.success());
    let again = dir.path().join("again");
    let ck = split.join("step_000003.rsdh");
    let o = train(&again, &["--steps", "6", "--holdout", "0", "--resume", p(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(again.join("final.rsdh")).unwrap(), fs::read(full.join("final.rsdh")).unwrap());
    let rows = fs::read_to_string(again.join("train_log.csv")).unwrap();
    assert_eq!(rows.lines().nth(1).unwrap().split(',').next(), Some("3"));
}

/// Writes a checkpoint whose refine conv is zero, so the model is the identity.
fn identity_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = dehamba::ModelConfig::tiny(4);
    let mut model = dehamba::build_model(&cfg, 0).unwrap();
    model.zero_residual();
    let path = dir.join("identity.rsdh");
    dehamba::checkpoint::Checkpoint::from_model(&model).save(&path).unwrap();
    path
}

#[test]
fn infer_with_identity_model_preserves_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(rsdh(&["synth", "--out", p(&data), "--count", "1", "--size", "24"]).status.success());
    let ck = identity_checkpoint(dir.path());
    let input = data.join("input/0000.png");
    let output = dir.path().join("out.png");
    let o = rsdh(&["infer", "--checkpoint", p(&ck), "--input", p(&input), "--output", p(&output)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = dehamba::data::read_png(&input).unwrap();
    let b = dehamba::data::read_png(&output).unwrap();
    assert_eq!(a, b);

    let o = rsdh(&["infer", "--checkpoint", p(&ck), "--input", p(&input), "--output", p(&output), "--gt", p(&data.join("gt/0000.png"))]);
    assert!(stdout(&o).contains("psnr_db="), "{}", stdout(&o));
}

#[test]
fn infer_rejects_sizes_not_divisible_by_four() {
    let dir = tempfile::tempdir().unwrap();
    let ck = identity_checkpoint(dir.path());
    let input = dir.path().join("odd.png");
    let img = dehamba::Tensor::from_fn(vec![3, 63, 64], |i| (i % 7) as f32 / 7.0).unwrap();
    dehamba::data::write_png(&input, &img).unwrap();
    let o = rsdh(&["infer", "--checkpoint", p(&ck), "--input", p(&input), "--output", p(&dir.path().join("o.png"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("divisible by 4"), "{}", stderr(&o));
}

#[test]
fn eval_scores_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(rsdh(&["synth", "--out", p(&data), "--count", "2", "--size", "16"]).status.success());
    let o = rsdh(&["eval", "--checkpoint", p(&identity_checkpoint(dir.path())), "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let field = |prefix: &str| text.lines().find(|l| l.starts_with(prefix)).unwrap().split_once(',').unwrap().1.to_string();
    // the identity model scores exactly like the hazy input
    assert_eq!(field("mean,"), field("hazy,"));
}

#[test]
fn params_reports_the_default_budget() {
    let o = rsdh(&["params"]);
    assert!(o.status.success());
    let n: usize = stdout(&o).trim().parse().unwrap();
    assert!((1_600_000..=2_000_000).contains(&n), "{n}");
    let tiny: usize = stdout(&rsdh(&["params", "--c", "4", "--blocks", "1,1,1"])).trim().parse().unwrap();
    assert!(tiny < n);
    let v1: usize = stdout(&rsdh(&["params", "--c", "4", "--blocks", "1,1,1", "--variant", "v1"])).trim().parse().unwrap();
    assert!(v1 < tiny);
}

#[test]
fn gradcheck_passes_on_a_small_model() {
    let o = rsdh(&["gradcheck", "--size", "8", "--max-entries", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn benchscan_routes_agree() {
    let o = rsdh(&["benchscan", "--len", "16,256", "--reps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("len,seq_ms,par_ms,max_abs_dev"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let dev: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(dev < 1e-5, "{row}");
    }
}

#[test]
fn thread_count_must_be_numeric() {
    let o = Command::new(env!("CARGO_BIN_EXE_rsdh")).args(["params"]).env("RSDH_THREADS", "many").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_rsdh")).args(["params"]).env("RSDH_THREADS", "1").output().unwrap();
    assert!(o.status.success());
}

#[test]
fn divergence_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--steps", "20", "--lr-init", "1e30", "--holdout", "0", "--checkpoint-interval", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    assert!(out.join("step_000001.rsdh").exists());
}
