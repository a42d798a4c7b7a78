//! Selective state-space scan.
//!
//! Per token `t`, channel `c` and state `n`:
//!
//! ```text
//! Abar = exp(delta[t,c] * A[c,n])
//! Bbar = delta[t,c] * B[t,n]
//! h[t,c,n] = Abar * h[t-1,c,n] + Bbar * x[t,c]        (h[-1] = 0)
//! y[t,c]   = sum_n C[t,n] * h[t,c,n] + D[c] * x[t,c]
//! ```
//!
//! `A = -exp(A_log)` is strictly negative, so `Abar` lies in `(0, 1)` for
//! positive `delta`. Two evaluation routes exist: a token-by-token reference
//! ([`selective_scan_seq`]) and an associative prefix scan over `(Abar, Bbar*x)`
//! pairs ([`selective_scan_par`]). They agree up to float reassociation.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{linear_forward, softplus};
use crate::tensor::{Real, Tensor};

/// Default state dimension.
pub const DEFAULT_STATE_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub dinner: usize,
    pub nstate: usize,
}

/// Borrowed scan inputs in `[batch, len, *]` layout. `a` holds the realized
/// (negative) state matrix `[dinner, nstate]`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub dims: ScanDims,
    pub x: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
}

impl<T: Real> ScanInputs<'_, T> {
    fn validate(&self) -> Result<()> {
        let ScanDims { batch, len, dinner, nstate } = self.dims;
        let checks: [(&'static str, usize, usize); 6] = [
            ("x", batch * len * dinner, self.x.len()),
            ("delta", batch * len * dinner, self.delta.len()),
            ("A", dinner * nstate, self.a.len()),
            ("B", batch * len * nstate, self.b.len()),
            ("C", batch * len * nstate, self.c.len()),
            ("D", dinner, self.d.len()),
        ];
        for (axis, expected, actual) in checks {
            if expected != actual {
                return Err(Error::Dim { op: "selective_scan", axis, expected, actual });
            }
        }
        if batch == 0 || len == 0 || dinner == 0 || nstate == 0 {
            return Err(Error::shape("selective_scan", format!("empty dims {:?}", self.dims)));
        }
        Ok(())
    }
}

/// Discretizes per-token step sizes against the state matrix.
///
/// Returns `(Abar, Bbar)`, both `[batch, len, dinner, nstate]`:
/// `Abar = exp(delta * A)` and `Bbar = delta * B` (Euler rule for `B`).
pub fn discretize<T: Real>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b_tok: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [batch, len, dinner] = delta.dims::<3>("discretize")?;
    let [ad, nstate] = a.dims::<2>("discretize")?;
    let [bb, bl, bn] = b_tok.dims::<3>("discretize")?;
    if ad != dinner {
        return Err(Error::Dim { op: "discretize", axis: "A channels", expected: dinner, actual: ad });
    }
    if (bb, bl) != (batch, len) || bn != nstate {
        return Err(Error::shape(
            "discretize",
            format!("B tokens {:?} do not match delta {:?} / A {:?}", b_tok.shape(), delta.shape(), a.shape()),
        ));
    }
    if let Some(i) = delta.data().iter().position(|&v| !(v > T::zero())) {
        return Err(Error::InvalidArgument(format!("discretize: delta[{i}] is not positive")));
    }
    let shape = vec![batch, len, dinner, nstate];
    let mut abar = Vec::with_capacity(batch * len * dinner * nstate);
    let mut bbar = Vec::with_capacity(abar.capacity());
    for bt in 0..batch * len {
        for c in 0..dinner {
            let dt = delta.data()[bt * dinner + c];
            for n in 0..nstate {
                abar.push((dt * a.data()[c * nstate + n]).exp());
                bbar.push(dt * b_tok.data()[bt * nstate + n]);
            }
        }
    }
    Ok((Tensor::from_parts(shape.clone(), abar), Tensor::from_parts(shape, bbar)))
}

/// Hidden state of one sequence, `[dinner, nstate]`, after `t` tokens.
#[derive(Clone, Debug)]
pub struct ScanState<T> {
    pub h: Vec<T>,
    pub t: usize,
    dinner: usize,
    nstate: usize,
}

impl<T: Real> ScanState<T> {
    pub fn new(dinner: usize, nstate: usize) -> Self {
        Self { h: vec![T::zero(); dinner * nstate], t: 0, dinner, nstate }
    }

    /// Advances by one token and writes `y_t` into `y`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        x: &[T],
        delta: &[T],
        a: &[T],
        b: &[T],
        c: &[T],
        d: &[T],
        y: &mut [T],
    ) -> Result<()> {
        let ns = self.nstate;
        let mut finite = true;
        for ch in 0..self.dinner {
            let dt = delta[ch];
            let u = dt * x[ch];
            let hrow = &mut self.h[ch * ns..][..ns];
            let arow = &a[ch * ns..][..ns];
            let mut acc = T::zero();
            for n in 0..ns {
                let hv = (dt * arow[n]).exp() * hrow[n] + b[n] * u;
                finite &= hv.is_finite();
                hrow[n] = hv;
                acc += c[n] * hv;
            }
            y[ch] = acc + d[ch] * x[ch];
        }
        if !finite {
            return Err(Error::NonFinite { what: "scan state".into(), index: self.t });
        }
        self.t += 1;
        Ok(())
    }
}

/// Token-by-token reference scan. When `keep_states` is set the second
/// return value holds every `h_t` as `[batch, len, dinner, nstate]`.
pub fn scan_seq_raw<T: Real>(inp: &ScanInputs<'_, T>, keep_states: bool) -> Result<(Vec<T>, Vec<T>)> {
    inp.validate()?;
    let ScanDims { batch, len, dinner, nstate } = inp.dims;
    let mut y = vec![T::zero(); batch * len * dinner];
    let mut hs = if keep_states { vec![T::zero(); batch * len * dinner * nstate] } else { Vec::new() };
    let per_b = |b: usize, yb: &mut [T], hb: &mut [T]| -> Result<()> {
        let mut st = ScanState::new(dinner, nstate);
        for t in 0..len {
            let tok = b * len + t;
            st.step(
                &inp.x[tok * dinner..][..dinner],
                &inp.delta[tok * dinner..][..dinner],
                inp.a,
                &inp.b[tok * nstate..][..nstate],
                &inp.c[tok * nstate..][..nstate],
                inp.d,
                &mut yb[t * dinner..][..dinner],
            )?;
            if !hb.is_empty() {
                hb[t * dinner * nstate..][..dinner * nstate].copy_from_slice(&st.h);
            }
        }
        Ok(())
    };
    if keep_states {
        y.par_chunks_mut(len * dinner)
            .zip(hs.par_chunks_mut(len * dinner * nstate))
            .enumerate()
            .try_for_each(|(b, (yb, hb))| per_b(b, yb, hb))?;
    } else {
        y.par_chunks_mut(len * dinner)
            .enumerate()
            .try_for_each(|(b, yb)| per_b(b, yb, &mut []))?;
    }
    Ok((y, hs))
}

/// Element of the linear recurrence `h -> a*h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElem<T> {
    pub a: T,
    pub b: T,
}

impl<T: Real> ScanElem<T> {
    /// Applies `earlier` then `later`: `(a2*a1, a2*b1 + b2)`.
    #[inline]
    pub fn combine(earlier: Self, later: Self) -> Self {
        Self { a: later.a * earlier.a, b: later.a * earlier.b + later.b }
    }
}

/// In-place inclusive prefix scan (Brent-Kung up-sweep / down-sweep).
/// `combine(earlier, later)` must be associative.
pub fn inclusive_scan<E: Copy>(elems: &mut [E], combine: impl Fn(E, E) -> E) {
    let n = elems.len();
    if n < 2 {
        return;
    }
    let mut stride = 1;
    while 2 * stride <= n {
        let mut i = 2 * stride - 1;
        while i < n {
            elems[i] = combine(elems[i - stride], elems[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    stride /= 2;
    while stride >= 1 {
        let mut i = 3 * stride - 1;
        while i < n {
            elems[i] = combine(elems[i - stride], elems[i]);
            i += 2 * stride;
        }
        stride /= 2;
    }
}

/// Associative-scan route: every `(batch, channel, state)` lane is scanned
/// independently with [`inclusive_scan`], lanes run in parallel.
pub fn scan_par_raw<T: Real>(inp: &ScanInputs<'_, T>) -> Result<Vec<T>> {
    inp.validate()?;
    let ScanDims { batch, len, dinner, nstate } = inp.dims;
    let lanes: Vec<(usize, usize)> = (0..batch).flat_map(|b| (0..dinner).map(move |c| (b, c))).collect();
    // per (b, c): y over t
    let cols: Vec<Vec<T>> = lanes
        .par_iter()
        .map(|&(b, ch)| -> Result<Vec<T>> {
            let mut ycol = vec![T::zero(); len];
            let mut elems = vec![ScanElem { a: T::zero(), b: T::zero() }; len];
            for n in 0..nstate {
                let an = inp.a[ch * nstate + n];
                for (t, e) in elems.iter_mut().enumerate() {
                    let tok = b * len + t;
                    let dt = inp.delta[tok * dinner + ch];
                    *e = ScanElem {
                        a: (dt * an).exp(),
                        b: dt * inp.b[tok * nstate + n] * inp.x[tok * dinner + ch],
                    };
                }
                inclusive_scan(&mut elems, ScanElem::combine);
                for (t, e) in elems.iter().enumerate() {
                    if !e.b.is_finite() {
                        return Err(Error::NonFinite { what: "scan state".into(), index: t });
                    }
                    ycol[t] += inp.c[(b * len + t) * nstate + n] * e.b;
                }
            }
            for (t, yv) in ycol.iter_mut().enumerate() {
                *yv += inp.d[ch] * inp.x[(b * len + t) * dinner + ch];
            }
            Ok(ycol)
        })
        .collect::<Result<_>>()?;
    let mut y = vec![T::zero(); batch * len * dinner];
    for ((b, ch), col) in lanes.into_iter().zip(cols) {
        for (t, v) in col.into_iter().enumerate() {
            y[(b * len + t) * dinner + ch] = v;
        }
    }
    Ok(y)
}

/// Gradients of the scan with respect to each input.
pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    /// With respect to the realized `A`.
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

/// Reverse pass through the recurrence using states saved by
/// [`scan_seq_raw`].
pub fn scan_backward_raw<T: Real>(inp: &ScanInputs<'_, T>, hs: &[T], gy: &[T]) -> ScanGrads<T> {
    let ScanDims { batch, len, dinner, nstate } = inp.dims;
    let per_b: Vec<ScanGrads<T>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut g = ScanGrads {
                x: vec![T::zero(); len * dinner],
                delta: vec![T::zero(); len * dinner],
                a: vec![T::zero(); dinner * nstate],
                b: vec![T::zero(); len * nstate],
                c: vec![T::zero(); len * nstate],
                d: vec![T::zero(); dinner],
            };
            let mut gh = vec![T::zero(); dinner * nstate];
            let hb = &hs[b * len * dinner * nstate..][..len * dinner * nstate];
            for t in (0..len).rev() {
                let tok = b * len + t;
                let bt = &inp.b[tok * nstate..][..nstate];
                let ct = &inp.c[tok * nstate..][..nstate];
                for ch in 0..dinner {
                    let gyv = gy[tok * dinner + ch];
                    let xv = inp.x[tok * dinner + ch];
                    let dt = inp.delta[tok * dinner + ch];
                    g.d[ch] += gyv * xv;
                    let mut gx = gyv * inp.d[ch];
                    let mut gdt = T::zero();
                    for n in 0..nstate {
                        let hcur = hb[(t * dinner + ch) * nstate + n];
                        let hprev = if t > 0 { hb[((t - 1) * dinner + ch) * nstate + n] } else { T::zero() };
                        let an = inp.a[ch * nstate + n];
                        let abar = (dt * an).exp();
                        g.c[t * nstate + n] += gyv * hcur;
                        let ghn = gh[ch * nstate + n] + gyv * ct[n];
                        let gabar = ghn * hprev * abar;
                        gdt += gabar * an + ghn * bt[n] * xv;
                        g.a[ch * nstate + n] += gabar * dt;
                        g.b[t * nstate + n] += ghn * dt * xv;
                        gx += ghn * dt * bt[n];
                        gh[ch * nstate + n] = ghn * abar;
                    }
                    g.x[t * dinner + ch] = gx;
                    g.delta[t * dinner + ch] = gdt;
                }
            }
            g
        })
        .collect();
    let mut out = ScanGrads {
        x: Vec::with_capacity(batch * len * dinner),
        delta: Vec::with_capacity(batch * len * dinner),
        a: vec![T::zero(); dinner * nstate],
        b: Vec::with_capacity(batch * len * nstate),
        c: Vec::with_capacity(batch * len * nstate),
        d: vec![T::zero(); dinner],
    };
    for g in per_b {
        out.x.extend(g.x);
        out.delta.extend(g.delta);
        out.b.extend(g.b);
        out.c.extend(g.c);
        for (o, v) in out.a.iter_mut().zip(g.a) {
            *o += v;
        }
        for (o, v) in out.d.iter_mut().zip(g.d) {
            *o += v;
        }
    }
    out
}

/// Learnable parameters of one selective scan over `dinner` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T = f32> {
    /// `[dinner, nstate]`, realized `A = -exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `[dinner]` skip gain.
    pub d: Tensor<T>,
    /// `[dinner, dinner]` step-size projection.
    pub dt_weight: Tensor<T>,
    /// `[dinner]`
    pub dt_bias: Tensor<T>,
    /// `[nstate, dinner]`
    pub b_proj: Tensor<T>,
    /// `[nstate, dinner]`
    pub c_proj: Tensor<T>,
}

/// Range of the initial step size `softplus(dt_bias)`.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

/// Inverse of softplus: `x + ln(1 - e^-x)`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Real> SsmParams<T> {
    /// S4D-real style init: realized `-A[c, n] = n + 1`, step sizes
    /// log-uniform in [`DT_INIT_RANGE`], `D = 1`, projections fan-in uniform.
    pub fn init<R: Rng + ?Sized>(dinner: usize, nstate: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (dinner as f64).sqrt();
        let a_log = Tensor::from_fn(vec![dinner, nstate], |i| T::lit(((i % nstate) as f64 + 1.0).ln()))?;
        let d = Tensor::ones(vec![dinner])?;
        let dt_weight = Tensor::uniform(vec![dinner, dinner], -bound, bound, rng)?;
        let (lo, hi) = (DT_INIT_RANGE.0.ln(), DT_INIT_RANGE.1.ln());
        let dt_bias = Tensor::from_fn(vec![dinner], |_| T::lit(inverse_softplus(rng.gen_range(lo..hi).exp())))?;
        let b_proj = Tensor::uniform(vec![nstate, dinner], -bound, bound, rng)?;
        let c_proj = Tensor::uniform(vec![nstate, dinner], -bound, bound, rng)?;
        Ok(Self { a_log, d, dt_weight, dt_bias, b_proj, c_proj })
    }

    pub fn dinner(&self) -> usize {
        self.d.numel()
    }

    pub fn nstate(&self) -> usize {
        self.a_log.dim(1)
    }

    pub fn realized_a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    /// Per-token `(delta, B, C)` for `x: [batch, len, dinner]`.
    pub fn project(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let [batch, len, dinner] = x.dims::<3>("ssm project")?;
        if dinner != self.dinner() {
            return Err(Error::Dim { op: "ssm project", axis: "channels", expected: self.dinner(), actual: dinner });
        }
        let ns = self.nstate();
        let rows = batch * len;
        let pre = linear_forward(x.data(), self.dt_weight.data(), Some(self.dt_bias.data()), rows, dinner, 1, dinner);
        let delta: Vec<T> = pre.into_iter().map(softplus).collect();
        let b = linear_forward(x.data(), self.b_proj.data(), None, rows, dinner, 1, ns);
        let c = linear_forward(x.data(), self.c_proj.data(), None, rows, dinner, 1, ns);
        Ok((
            Tensor::from_parts(vec![batch, len, dinner], delta),
            Tensor::from_parts(vec![batch, len, ns], b),
            Tensor::from_parts(vec![batch, len, ns], c),
        ))
    }

    fn run(&self, x: &Tensor<T>, parallel: bool) -> Result<Tensor<T>> {
        let (delta, b, c) = self.project(x)?;
        let a = self.realized_a();
        let [batch, len, dinner] = x.dims::<3>("selective_scan")?;
        let inp = ScanInputs {
            dims: ScanDims { batch, len, dinner, nstate: self.nstate() },
            x: x.data(),
            delta: delta.data(),
            a: a.data(),
            b: b.data(),
            c: c.data(),
            d: self.d.data(),
        };
        let y = if parallel { scan_par_raw(&inp)? } else { scan_seq_raw(&inp, false)?.0 };
        Ok(Tensor::from_parts(x.shape().to_vec(), y))
    }
}

/// Sequential selective scan of `x: [batch, len, dinner]`.
pub fn selective_scan_seq<T: Real>(x: &Tensor<T>, params: &SsmParams<T>) -> Result<Tensor<T>> {
    params.run(x, false)
}

/// Associative-scan evaluation of the same map as [`selective_scan_seq`].
pub fn selective_scan_par<T: Real>(x: &Tensor<T>, params: &SsmParams<T>) -> Result<Tensor<T>> {
    params.run(x, true)
}
