//! Forward and backward kernels over raw row-major buffers.
//!
//! Each output element is produced by exactly one task and accumulated in a
//! fixed order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::Real;

/// Below this many elements per task the kernels stay on the calling thread.
const PAR_MIN: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Output columns `ow` whose input column `ow*stride + kw - padding`
    /// falls inside `[0, w)`.
    fn valid_range(&self, kx: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // last valid: ow*s + kx - p <= in_len - 1
        let hi = if in_len + p > kx { ((in_len - 1 + p - kx) / s + 1).min(out_len) } else { 0 };
        (lo, hi.max(lo))
    }
}

fn maybe_par_chunks<T: Send>(
    buf: &mut [T],
    chunk: usize,
    total_work: usize,
    f: impl Fn(usize, &mut [T]) + Send + Sync,
) {
    if total_work >= PAR_MIN && buf.len() > chunk {
        buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * g.cout * plane];
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.k);
    let work = g.batch * g.cout * plane * cin_g * k * k;
    maybe_par_chunks(&mut out, plane, work, |idx, dst| {
        let (b, co) = (idx / g.cout, idx % g.cout);
        let grp = co / cout_g;
        if let Some(bias) = bias {
            dst.fill(bias[co]);
        }
        for cig in 0..cin_g {
            let ci = grp * cin_g + cig;
            let src = &input[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            let wbase = (co * cin_g + cig) * k * k;
            for kh in 0..k {
                let (oh_lo, oh_hi) = g.valid_range(kh, g.ho, g.h);
                for kw in 0..k {
                    let wv = weight[wbase + kh * k + kw];
                    let (ow_lo, ow_hi) = g.valid_range(kw, g.wo, g.w);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.padding;
                        let srow = &src[ih * g.w..][..g.w];
                        let drow = &mut dst[oh * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let off = kw as isize - g.padding as isize;
                            for ow in ow_lo..ow_hi {
                                drow[ow] += wv * srow[(ow as isize + off) as usize];
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                drow[ow] += wv * srow[ow * g.stride + kw - g.padding];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input<T: Real>(g: &ConvGeom, gout: &[T], weight: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gin = vec![T::zero(); g.batch * g.cin * plane_in];
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.k);
    let work = g.batch * g.cout * plane_out * cin_g * k * k;
    maybe_par_chunks(&mut gin, plane_in, work, |idx, dst| {
        let (b, ci) = (idx / g.cin, idx % g.cin);
        let grp = ci / cin_g;
        let cig = ci % cin_g;
        for cog in 0..cout_g {
            let co = grp * cout_g + cog;
            let src = &gout[(b * g.cout + co) * plane_out..][..plane_out];
            let wbase = (co * cin_g + cig) * k * k;
            for kh in 0..k {
                let (oh_lo, oh_hi) = g.valid_range(kh, g.ho, g.h);
                for kw in 0..k {
                    let wv = weight[wbase + kh * k + kw];
                    let (ow_lo, ow_hi) = g.valid_range(kw, g.wo, g.w);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.padding;
                        let srow = &src[oh * g.wo..][..g.wo];
                        let drow = &mut dst[ih * g.w..][..g.w];
                        for ow in ow_lo..ow_hi {
                            drow[ow * g.stride + kw - g.padding] += wv * srow[ow];
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Gradients with respect to weight and bias.
pub fn conv2d_backward_params<T: Real>(g: &ConvGeom, gout: &[T], input: &[T]) -> (Vec<T>, Vec<T>) {
    let (cin_g, k) = (g.cin_g(), g.k);
    let cout_g = g.cout_g();
    let plane_out = g.ho * g.wo;
    let per_co = cin_g * k * k;
    let mut gw = vec![T::zero(); g.cout * per_co];
    let work = g.batch * g.cout * plane_out * per_co;
    maybe_par_chunks(&mut gw, per_co, work, |co, dst| {
        let grp = co / cout_g;
        for b in 0..g.batch {
            let go = &gout[(b * g.cout + co) * plane_out..][..plane_out];
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let src = &input[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = g.valid_range(kh, g.ho, g.h);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = g.valid_range(kw, g.wo, g.w);
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.padding;
                            let srow = &src[ih * g.w..][..g.w];
                            let grow = &go[oh * g.wo..][..g.wo];
                            for ow in ow_lo..ow_hi {
                                acc += grow[ow] * srow[ow * g.stride + kw - g.padding];
                            }
                        }
                        dst[(cig * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });
    let mut gb = vec![T::zero(); g.cout];
    for (co, slot) in gb.iter_mut().enumerate() {
        for b in 0..g.batch {
            for &v in &gout[(b * g.cout + co) * plane_out..][..plane_out] {
                *slot += v;
            }
        }
    }
    (gw, gb)
}

/// `y[o, co, i] = sum_ci w[co, ci] * x[o, ci, i] + b[co]` on the view
/// `[outer, cin, inner]`.
pub fn linear_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    outer: usize,
    cin: usize,
    inner: usize,
    cout: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); outer * cout * inner];
    let work = outer * cout * cin * inner;
    maybe_par_chunks(&mut y, cout * inner, work, |o, dst| {
        let xo = &x[o * cin * inner..][..cin * inner];
        for co in 0..cout {
            let d = &mut dst[co * inner..][..inner];
            if let Some(b) = b {
                d.fill(b[co]);
            }
            let wrow = &w[co * cin..][..cin];
            if inner == 1 {
                let mut acc = d[0];
                for ci in 0..cin {
                    acc += wrow[ci] * xo[ci];
                }
                d[0] = acc;
            } else {
                for ci in 0..cin {
                    let wv = wrow[ci];
                    let xs = &xo[ci * inner..][..inner];
                    for (dv, &xv) in d.iter_mut().zip(xs) {
                        *dv += wv * xv;
                    }
                }
            }
        }
    });
    y
}

pub fn linear_backward_input<T: Real>(
    gy: &[T],
    w: &[T],
    outer: usize,
    cin: usize,
    inner: usize,
    cout: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); outer * cin * inner];
    let work = outer * cout * cin * inner;
    maybe_par_chunks(&mut gx, cin * inner, work, |o, dst| {
        let go = &gy[o * cout * inner..][..cout * inner];
        for ci in 0..cin {
            let d = &mut dst[ci * inner..][..inner];
            if inner == 1 {
                let mut acc = T::zero();
                for co in 0..cout {
                    acc += w[co * cin + ci] * go[co];
                }
                d[0] = acc;
            } else {
                for co in 0..cout {
                    let wv = w[co * cin + ci];
                    let gs = &go[co * inner..][..inner];
                    for (dv, &gv) in d.iter_mut().zip(gs) {
                        *dv += wv * gv;
                    }
                }
            }
        }
    });
    gx
}

pub fn linear_backward_params<T: Real>(
    gy: &[T],
    x: &[T],
    outer: usize,
    cin: usize,
    inner: usize,
    cout: usize,
) -> (Vec<T>, Vec<T>) {
    let mut gw = vec![T::zero(); cout * cin];
    let work = outer * cout * cin * inner;
    maybe_par_chunks(&mut gw, cin, work, |co, dst| {
        for o in 0..outer {
            let gs = &gy[(o * cout + co) * inner..][..inner];
            let xo = &x[o * cin * inner..][..cin * inner];
            for (ci, slot) in dst.iter_mut().enumerate() {
                let xs = &xo[ci * inner..][..inner];
                let mut acc = T::zero();
                for (&gv, &xv) in gs.iter().zip(xs) {
                    acc += gv * xv;
                }
                *slot += acc;
            }
        }
    });
    let mut gb = vec![T::zero(); cout];
    for o in 0..outer {
        for (co, slot) in gb.iter_mut().enumerate() {
            for &v in &gy[(o * cout + co) * inner..][..inner] {
                *slot += v;
            }
        }
    }
    (gw, gb)
}

/// Layer normalization over the middle axis of `[outer, c, inner]`.
/// Returns the output together with per-position mean and reciprocal std.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    outer: usize,
    c: usize,
    inner: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); outer * inner];
    let mut rstd = vec![T::zero(); outer * inner];
    let inv_c = T::one() / T::lit(c as f64);
    for o in 0..outer {
        let xo = &x[o * c * inner..][..c * inner];
        let m = &mut mean[o * inner..][..inner];
        let r = &mut rstd[o * inner..][..inner];
        for ci in 0..c {
            for (mv, &xv) in m.iter_mut().zip(&xo[ci * inner..][..inner]) {
                *mv += xv;
            }
        }
        for mv in m.iter_mut() {
            *mv *= inv_c;
        }
        for ci in 0..c {
            for ((rv, &mv), &xv) in r.iter_mut().zip(m.iter()).zip(&xo[ci * inner..][..inner]) {
                let d = xv - mv;
                *rv += d * d;
            }
        }
        for rv in r.iter_mut() {
            *rv = T::one() / (*rv * inv_c + eps).sqrt();
        }
        let yo = &mut y[o * c * inner..][..c * inner];
        for ci in 0..c {
            let (gm, bt) = (gamma[ci], beta[ci]);
            let xs = &xo[ci * inner..][..inner];
            let ys = &mut yo[ci * inner..][..inner];
            for i in 0..inner {
                ys[i] = (xs[i] - m[i]) * r[i] * gm + bt;
            }
        }
    }
    (y, mean, rstd)
}

/// Returns `(gx, ggamma, gbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    gy: &[T],
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    outer: usize,
    c: usize,
    inner: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let inv_c = T::one() / T::lit(c as f64);
    let mut s1 = vec![T::zero(); inner];
    let mut s2 = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * c * inner;
        let m = &mean[o * inner..][..inner];
        let r = &rstd[o * inner..][..inner];
        s1.fill(T::zero());
        s2.fill(T::zero());
        for ci in 0..c {
            let xs = &x[base + ci * inner..][..inner];
            let gs = &gy[base + ci * inner..][..inner];
            let mut gg = T::zero();
            let mut gb = T::zero();
            for i in 0..inner {
                let xhat = (xs[i] - m[i]) * r[i];
                let gxhat = gs[i] * gamma[ci];
                s1[i] += gxhat;
                s2[i] += gxhat * xhat;
                gg += gs[i] * xhat;
                gb += gs[i];
            }
            ggamma[ci] += gg;
            gbeta[ci] += gb;
        }
        for ci in 0..c {
            let xs = &x[base + ci * inner..][..inner];
            let gs = &gy[base + ci * inner..][..inner];
            let d = &mut gx[base + ci * inner..][..inner];
            for i in 0..inner {
                let xhat = (xs[i] - m[i]) * r[i];
                let gxhat = gs[i] * gamma[ci];
                d[i] = r[i] * (gxhat - s1[i] * inv_c - xhat * s2[i] * inv_c);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Nearest-neighbour 2x upsampling of `[bc, h, w]` planes.
pub fn upsample2x_forward<T: Real>(x: &[T], bc: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); bc * h2 * w2];
    for p in 0..bc {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut y[p * h2 * w2..][..h2 * w2];
        for oh in 0..h2 {
            for ow in 0..w2 {
                dst[oh * w2 + ow] = src[(oh / 2) * w + ow / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(gy: &[T], bc: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); bc * h * w];
    for p in 0..bc {
        let src = &gy[p * h2 * w2..][..h2 * w2];
        let dst = &mut gx[p * h * w..][..h * w];
        for ih in 0..h {
            for iw in 0..w {
                let r0 = 2 * ih * w2 + 2 * iw;
                let r1 = r0 + w2;
                dst[ih * w + iw] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
            }
        }
    }
    gx
}

/// `seq[b, t, c] = map[b, c, perm[t]]` for a `[batch, c, l]` map.
pub fn gather_tokens<T: Real>(map: &[T], perm: &[usize], batch: usize, c: usize) -> Vec<T> {
    let l = perm.len();
    let mut seq = vec![T::zero(); batch * l * c];
    for b in 0..batch {
        let src = &map[b * c * l..][..c * l];
        let dst = &mut seq[b * l * c..][..l * c];
        for (t, &p) in perm.iter().enumerate() {
            let row = &mut dst[t * c..][..c];
            for (ci, v) in row.iter_mut().enumerate() {
                *v = src[ci * l + p];
            }
        }
    }
    seq
}

/// Adjoint of [`gather_tokens`]: `map[b, c, perm[t]] = seq[b, t, c]`.
pub fn scatter_tokens<T: Real>(seq: &[T], perm: &[usize], batch: usize, c: usize) -> Vec<T> {
    let l = perm.len();
    let mut map = vec![T::zero(); batch * c * l];
    for b in 0..batch {
        let src = &seq[b * l * c..][..l * c];
        let dst = &mut map[b * c * l..][..c * l];
        for (t, &p) in perm.iter().enumerate() {
            let row = &src[t * c..][..c];
            for (ci, &v) in row.iter().enumerate() {
                dst[ci * l + p] = v;
            }
        }
    }
    map
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else if x < T::lit(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
