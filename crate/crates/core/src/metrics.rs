//! L1 loss, PSNR and SSIM.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(gt, "l1_loss")?;
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(sum / pred.numel() as f64)
}

pub fn mse<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(gt, "mse")?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, max_val: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..n).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..n).map(|i| k[i] * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) and data
/// range 1, computed per channel plane over valid windows and averaged.
/// Any tensor of rank >= 2 is treated as a stack of `H x W` planes.
pub fn ssim<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(gt, "ssim")?;
    let r = pred.rank();
    if r < 2 {
        return Err(Error::shape("ssim", format!("need at least 2 dims, got {:?}", pred.shape())));
    }
    let (h, w) = (pred.dim(r - 2), pred.dim(r - 1));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim: image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let k = gaussian_window();
    let planes = pred.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let x: Vec<f64> = pred.data()[p * h * w..][..h * w].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = gt.data()[p * h * w..][..h * w].iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / planes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub l1: f64,
}

impl MetricReport {
    pub fn evaluate<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Self> {
        Ok(Self { psnr_db: psnr(pred, gt, 1.0)?, ssim: ssim(pred, gt)?, l1: l1_loss(pred, gt)? })
    }

    pub const CSV_HEADER: &'static str = "psnr_db,ssim,l1";

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6}", self.psnr_db, self.ssim, self.l1)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psnr_db={:.4} ssim={:.6} l1={:.6}", self.psnr_db, self.ssim, self.l1)
    }
}
