//! Timing of the sequential and associative scans, always reported together
//! with their max-abs deviation.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::{selective_scan_par, selective_scan_seq, SsmParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch: usize,
    pub dinner: usize,
    pub nstate: usize,
    /// Timings are the minimum over this many runs.
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch: 1, dinner: 16, nstate: 16, reps: 3, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub seq: Duration,
    pub par: Duration,
    pub max_abs_dev: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "len,seq_ms,par_ms,max_abs_dev";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:e}",
            self.len,
            self.seq.as_secs_f64() * 1e3,
            self.par.as_secs_f64() * 1e3,
            self.max_abs_dev
        )
    }
}

fn min_time<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(Duration, T)> {
    let mut best = Duration::MAX;
    let mut out = None;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        let v = f()?;
        best = best.min(t0.elapsed());
        out = Some(v);
    }
    Ok((best, out.expect("at least one repetition")))
}

/// Random `[batch, len, dinner]` input and scan parameters.
pub fn bench_inputs(len: usize, cfg: &BenchConfig) -> Result<(Tensor<f32>, SsmParams<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ len as u64);
    let params = SsmParams::init(cfg.dinner, cfg.nstate, &mut rng)?;
    let x = Tensor::uniform(vec![cfg.batch, len, cfg.dinner], -1.0, 1.0, &mut rng)?;
    Ok((x, params))
}

pub fn bench_scan(lengths: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("no sequence lengths given".into()));
    }
    lengths
        .iter()
        .map(|&len| {
            let (x, p) = bench_inputs(len, cfg)?;
            let (seq, ys) = min_time(cfg.reps, || selective_scan_seq(&x, &p))?;
            let (par, yp) = min_time(cfg.reps, || selective_scan_par(&x, &p))?;
            let max_abs_dev = ys.max_abs_diff(&yp)? as f64;
            Ok(BenchRow { len, seq, par, max_abs_dev })
        })
        .collect()
}
