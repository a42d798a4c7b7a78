use std::fs;

use dehamba::checkpoint::Checkpoint;
use dehamba::data::{synth_pairs, HazeSpec, Pair};
use dehamba::train::{
    checkpoint_path, cosine_lr, train_loop, TrainConfig, TrainOutput, TrainState, FINAL_CHECKPOINT, LOG_FILE, LOG_HEADER,
};
use dehamba::{build_model, Error, ModelConfig};

fn pairs() -> Vec<Pair> {
    synth_pairs(3, 16, 16, &HazeSpec::default(), 21).unwrap()
}

fn cfg(total_steps: usize) -> TrainConfig {
    TrainConfig { total_steps, batch: 2, patch: 8, seed: 5, lr_init: 1e-3, lr_min: 1e-5, ..Default::default() }
}

fn fresh() -> TrainState {
    TrainState::new(build_model(&ModelConfig::tiny(4), 2).unwrap())
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = pairs();
    let mut full = fresh();
    let log_full = train_loop(&mut full, &data, &cfg(6), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let mut saver = fresh();
    train_loop(&mut saver, &data, &TrainConfig { checkpoint_interval: 2, ..cfg(6) }, Some(&out)).unwrap();
    let ck = Checkpoint::load(&checkpoint_path(dir.path(), 2)).unwrap();
    let mut first = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(first.opt.step, 2);
    let log_rest = train_loop(&mut first, &data, &cfg(6), None).unwrap();

    assert_eq!(first.model.params, full.model.params);
    assert_eq!(first.opt, full.opt);
    assert_eq!(log_rest, log_full[2..]);
    assert_eq!(first.to_checkpoint().to_bytes(), full.to_checkpoint().to_bytes());
}

#[test]
fn writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().join("run") };
    let mut st = fresh();
    let c = TrainConfig { checkpoint_interval: 2, ..cfg(5) };
    let log = train_loop(&mut st, &pairs(), &c, Some(&out)).unwrap();
    assert_eq!(log.len(), 5);
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    for r in &log {
        assert_eq!(r.lr, cosine_lr(r.step, &c).unwrap());
    }
    let text = fs::read_to_string(out.dir.join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,"));
    assert_eq!(lines[5].split(',').count(), 4);
    assert!(checkpoint_path(&out.dir, 2).exists());
    assert!(checkpoint_path(&out.dir, 4).exists());
    assert!(!checkpoint_path(&out.dir, 5).exists());
    let fin = TrainState::from_checkpoint(&Checkpoint::load(&out.dir.join(FINAL_CHECKPOINT)).unwrap()).unwrap();
    assert_eq!(fin.opt.step, 5);
    assert_eq!(fin.model.params, st.model.params);
}

#[test]
fn resumed_log_appends() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let mut st = fresh();
    train_loop(&mut st, &pairs(), &cfg(2), Some(&out)).unwrap();
    train_loop(&mut st, &pairs(), &cfg(4), Some(&out)).unwrap();
    let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let steps: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, vec!["0", "1", "2", "3"]);
}

#[test]
fn seeded_runs_are_identical() {
    let run = || {
        let mut st = fresh();
        train_loop(&mut st, &pairs(), &cfg(3), None).unwrap();
        st.to_checkpoint().to_bytes()
    };
    assert_eq!(run(), run());
    let mut other = fresh();
    train_loop(&mut other, &pairs(), &TrainConfig { seed: 6, ..cfg(3) }, None).unwrap();
    assert_ne!(other.to_checkpoint().to_bytes(), run());
}

#[test]
fn training_reduces_loss_on_average() {
    let mut st = fresh();
    let log = train_loop(&mut st, &pairs(), &TrainConfig { lr_init: 2e-3, ..cfg(40) }, None).unwrap();
    let head: f64 = log[..5].iter().map(|r| r.loss).sum();
    let tail: f64 = log[35..].iter().map(|r| r.loss).sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn non_finite_loss_aborts_and_keeps_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let mut st = fresh();
    train_loop(&mut st, &pairs(), &TrainConfig { checkpoint_interval: 1, ..cfg(2) }, Some(&out)).unwrap();
    let before = fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let params = st.model.params.clone();

    let mut poisoned = pairs();
    for p in &mut poisoned {
        p.hazy.data_mut().fill(f32::NAN);
    }
    let err = train_loop(&mut st, &poisoned, &TrainConfig { checkpoint_interval: 1, ..cfg(4) }, Some(&out)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(err.to_string().contains("step 2"), "{err}");
    assert_eq!(st.model.params, params);
    assert_eq!(fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap(), before);
    assert!(checkpoint_path(dir.path(), 2).exists());
    assert!(!checkpoint_path(dir.path(), 3).exists());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut st = fresh();
    for bad in [
        TrainConfig { total_steps: 0, ..cfg(1) },
        TrainConfig { lr_min: 1.0, ..cfg(1) },
        TrainConfig { patch: 10, ..cfg(1) },
        TrainConfig { batch: 0, ..cfg(1) },
    ] {
        let r = train_loop(&mut st, &pairs(), &bad, None);
        assert!(matches!(r, Err(Error::InvalidConfig(_))), "{bad:?}: {r:?}");
    }
    assert!(matches!(train_loop(&mut st, &pairs(), &TrainConfig { patch: 32, ..cfg(1) }, None), Err(Error::InvalidArgument(_))));
}

#[test]
fn schedule_is_monotone_with_exact_endpoints() {
    for total in [1, 2, 3, 7, 500, 12345] {
        let c = TrainConfig { total_steps: total, ..Default::default() };
        assert_eq!(cosine_lr(0, &c).unwrap(), 2e-4);
        assert_eq!(cosine_lr(total, &c).unwrap(), 1e-6);
        let mut prev = f64::INFINITY;
        for s in 0..=total.min(600) {
            let lr = cosine_lr(s, &c).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
