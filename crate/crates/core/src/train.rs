//! Adam with a cosine-annealed learning rate, the L1 training loop, and
//! resumable checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data::{derive_seed, sample_patches, Pair};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Save every this many steps; 0 saves only the final checkpoint.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            lr_min: 1e-6,
            total_steps: 1000,
            batch: 4,
            patch: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr_min.is_finite() && self.lr_init.is_finite() && self.lr_min >= 0.0) {
            return bad(format!("learning rates must be finite and non-negative, got {} and {}", self.lr_init, self.lr_min));
        }
        // equality admits the frozen lr_init = lr_min = 0 run
        if self.lr_min > self.lr_init {
            return bad(format!("lr_min {} exceeds lr_init {}", self.lr_min, self.lr_init));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.patch == 0 || self.patch % 4 != 0 {
            return bad(format!("patch {} must be a positive multiple of 4", self.patch));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// `lr_min + (lr_init - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps || cfg.total_steps == 0 {
        return Err(Error::InvalidArgument(format!("step {step} outside [0, {}]", cfg.total_steps)));
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.total_steps as f64).cos());
    // convex form keeps both endpoints exact
    Ok(cfg.lr_min * (1.0 - w) + cfg.lr_init * w)
}

/// Adam moments, one pair per parameter tensor, and the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.numel()])).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Option<Tensor<f32>>],
    opt: &mut OptimState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), opt.m.len()),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            let p = params.get(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", format!("{}: gradient {:?} vs {:?}", params.name(id), g.shape(), p.shape())));
            }
            if let Some(i) = g.first_non_finite() {
                return Err(Error::NonFinite { what: format!("gradient of {}", params.name(id)), index: i });
            }
        }
    }
    let t = opt.step + 1;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let bc1 = (1.0 - cfg.beta1.powf(t as f64)) as f32;
    let bc2 = (1.0 - cfg.beta2.powf(t as f64)) as f32;
    let (lr, eps) = (lr as f32, cfg.eps as f32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        let g = grads[i].as_ref().map(|g| g.data());
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    opt.step = t;
    Ok(())
}

/// Model plus optimizer state: everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub opt: OptimState,
}

pub const ADAM_STEP_KEY: &str = "__adam.step";
const ADAM_M_PREFIX: &str = "__adam.m.";
const ADAM_V_PREFIX: &str = "__adam.v.";

impl TrainState {
    pub fn new(model: Model<f32>) -> Self {
        let opt = OptimState::new(&model.params);
        Self { model, opt }
    }

    /// Step counter stored as two 24-bit halves so every f32 is exact.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        let s = self.opt.step;
        ck.push(ADAM_STEP_KEY, Tensor::from_parts(vec![2], vec![(s >> 24) as f32, (s & 0xFF_FFFF) as f32]));
        for (i, (name, _)) in self.model.params.iter().enumerate() {
            ck.push(format!("{ADAM_M_PREFIX}{name}"), self.opt.m[i].clone());
        }
        for (i, (name, _)) in self.model.params.iter().enumerate() {
            ck.push(format!("{ADAM_V_PREFIX}{name}"), self.opt.v[i].clone());
        }
        ck
    }

    /// Restores a state; a plain model checkpoint starts with fresh moments.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.to_model()?;
        let Some(step) = ck.get(ADAM_STEP_KEY) else {
            return Ok(Self::new(model));
        };
        let s = step.data();
        if s.len() != 2 || s.iter().any(|v| *v < 0.0 || v.fract() != 0.0 || *v > 0xFF_FFFF as f32) {
            return Err(Error::Checkpoint(format!("malformed {ADAM_STEP_KEY}")));
        }
        let step = ((s[0] as u64) << 24) | s[1] as u64;
        let moment = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            model
                .params
                .iter()
                .map(|(name, p)| {
                    let t = ck
                        .get(&format!("{prefix}{name}"))
                        .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{name}")))?;
                    if t.shape() != p.shape() {
                        return Err(Error::Checkpoint(format!("{prefix}{name}: shape {:?} vs {:?}", t.shape(), p.shape())));
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        let opt = OptimState { m: moment(ADAM_M_PREFIX)?, v: moment(ADAM_V_PREFIX)?, step };
        Ok(Self { model, opt })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,lr,loss,wallclock_s";
pub const FINAL_CHECKPOINT: &str = "final.rsdh";

/// Path of the periodic checkpoint written after `step` updates.
pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.rsdh"))
}

/// Where the loop writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    fn prepare(&self) -> Result<fs::File> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(LOG_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let empty = f.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
        if empty {
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(f)
    }
}

/// Mean L1 loss and its gradients for one batch.
pub fn loss_and_grads(model: &Model<f32>, hazy: &Tensor<f32>, clear: &Tensor<f32>) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let x = tape.constant(hazy.clone());
    let gt = tape.constant(clear.clone());
    let y = model.forward(&mut tape, &bound, x)?;
    let loss = tape.l1_loss(y, gt)?;
    let value = tape.value(loss).item()? as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Runs updates from `state.opt.step` up to `cfg.total_steps`.
///
/// Step `k` trains on patches drawn with a seed derived from `(seed, k)`, so
/// a resumed run sees the same batches as an uninterrupted one. A non-finite
/// loss aborts before the update, leaving earlier checkpoints in place.
pub fn train_loop(
    state: &mut TrainState,
    pairs: &[Pair],
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let start = state.opt.step as usize;
    if start > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "state is at step {start}, beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let mut log = match out {
        Some(o) => Some(o.prepare()?),
        None => None,
    };
    let clock = Instant::now();
    let mut records = Vec::with_capacity(cfg.total_steps - start);
    for step in start..cfg.total_steps {
        let lr = cosine_lr(step, cfg)?;
        let batch = sample_patches(pairs, cfg.patch, cfg.batch, derive_seed(cfg.seed, step as u64))?;
        let (loss, grads) = loss_and_grads(&state.model, &batch.hazy, &batch.clear).map_err(|e| match e {
            Error::NonFinite { what, index } => Error::NonFinite { what: format!("step {step}: {what}"), index },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: format!("step {step}: training loss"), index: step });
        }
        adam_step(&mut state.model.params, &grads, &mut state.opt, lr, cfg).map_err(|e| match e {
            Error::NonFinite { what, index } => Error::NonFinite { what: format!("step {step}: {what}"), index },
            other => other,
        })?;
        records.push(StepRecord { step, lr, loss });
        if let (Some(o), Some(f)) = (out, log.as_mut()) {
            let path = o.dir.join(LOG_FILE);
            writeln!(f, "{step},{lr:e},{loss:.8},{:.3}", clock.elapsed().as_secs_f64()).map_err(|e| Error::io(&path, e))?;
            let done = step + 1;
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 {
                state.to_checkpoint().save(&checkpoint_path(&o.dir, done))?;
            }
        }
    }
    if let Some(o) = out {
        state.to_checkpoint().save(&o.dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(records)
}
