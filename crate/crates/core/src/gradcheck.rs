//! Central finite-difference check of tape gradients in 64-bit precision.

use rayon::prelude::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Floor of the relative-error denominator. Central differences at
    /// `step = 1e-4` cannot resolve gradients much below this on O(1) to
    /// O(10) losses, so smaller entries are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter;
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    /// Entries whose two-point estimate is off by more than this relative
    /// error are re-estimated with the fourth-order stencil at `h` and `2h`,
    /// which cancels the `h^2` truncation term on sharply curved losses.
    /// `None` keeps the two-point estimate.
    pub refine_above: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, floor: 1e-6, max_entries_per_param: None, refine_above: Some(1e-4) }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_autodiff: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval_loss<F>(f: &F, params: &[(String, Tensor<f64>)], what: &str) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { what: format!("loss while perturbing {what}"), index: 0 });
    }
    Ok(v)
}

fn entries(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares the tape gradient of the scalar `f(params)` against central
/// differences, returning the largest relative error over checked entries.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite { what: "loss".into(), index: 0 });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = params
        .iter()
        .zip(&vars)
        .map(|((_, t), &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()).unwrap()))
        .collect();
    for ((name, _), g) in params.iter().zip(&analytic) {
        if let Some(i) = g.first_non_finite() {
            return Err(Error::NonFinite { what: format!("gradient of {name}"), index: i });
        }
    }
    drop(tape);

    let work: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, (_, t))| entries(t.numel(), opts.max_entries_per_param).into_iter().map(move |i| (p, i)))
        .collect();

    let results: Vec<(usize, usize, f64, f64)> = work
        .par_iter()
        .map(|&(p, i)| -> Result<(usize, usize, f64, f64)> {
            let mut local = params.to_vec();
            let base = local[p].1.data()[i];
            let what = format!("{}[{i}]", params[p].0);
            local[p].1.data_mut()[i] = base + opts.step;
            let plus = eval_loss(&f, &local, &what)?;
            local[p].1.data_mut()[i] = base - opts.step;
            let minus = eval_loss(&f, &local, &what)?;
            let mut numeric = (plus - minus) / (2.0 * opts.step);
            let ad = analytic[p].data()[i];
            if opts.refine_above.is_some_and(|t| relative_error(ad, numeric, opts.floor) > t) {
                local[p].1.data_mut()[i] = base + 2.0 * opts.step;
                let plus2 = eval_loss(&f, &local, &what)?;
                local[p].1.data_mut()[i] = base - 2.0 * opts.step;
                let minus2 = eval_loss(&f, &local, &what)?;
                numeric = (8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * opts.step);
            }
            Ok((p, i, ad, numeric))
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_autodiff: 0.0,
        worst_numeric: 0.0,
        entries_checked: results.len(),
    };
    for (p, i, ad, fd) in results {
        let err = relative_error(ad, fd, opts.floor);
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((params[p].0.clone(), i));
            report.worst_autodiff = ad;
            report.worst_numeric = fd;
        }
    }
    Ok(report)
}

/// Gradient check of a whole model on one `h x w` image. The scalar is a
/// fixed random weighting of the output, so no parameter sits at a
/// symmetric zero of the loss.
pub fn model_grad_check(
    cfg: &ModelConfig,
    seed: u64,
    h: usize,
    w: usize,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let model = Model::<f64>::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE);
    let x = Tensor::uniform(vec![1, 3, h, w], 0.0, 1.0, &mut rng)?;
    let r = Tensor::uniform(vec![1, 3, h, w], -1.0, 1.0, &mut rng)?;
    let params: Vec<(String, Tensor<f64>)> = model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let xv = tape.constant(x.clone());
            let y = model.forward(tape, &bound, xv)?;
            let rv = tape.constant(r.clone());
            let weighted = tape.mul(y, rv)?;
            Ok(tape.sum(weighted))
        },
        &params,
        opts,
    )
}
