//! Reverse-mode differentiation by recording a linear tape.
//!
//! Every primitive evaluates eagerly, pushes a node holding its value and
//! whatever it needs for the reverse pass, and returns a [`Var`] handle.
//! [`Tape::backward`] walks the nodes in exact reverse recording order.
//! Nodes that do not depend on any [`Tape::param`] leaf are never given a
//! gradient.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::ssm::{self, ScanDims, ScanInputs};
use crate::tensor::{split_axis, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, zero padding that preserves spatial size for kernel `k`.
    pub fn same(k: usize) -> Self {
        Self { stride: 1, padding: (k - 1) / 2, groups: 1 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var>, outer: usize, cin: usize, inner: usize, cout: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, outer: usize, c: usize, inner: usize, mean: Vec<T>, rstd: Vec<T> },
    Silu(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    L1Loss { pred: Var, gt: Var },
    Upsample2x { x: Var, bc: usize, h: usize, w: usize },
    ConcatChannels { a: Var, b: Var, batch: usize, ca: usize, cb: usize, plane: usize },
    GatherTokens { x: Var, perm: Arc<[usize]>, batch: usize, c: usize },
    ScatterTokens { seq: Var, perm: Arc<[usize]>, batch: usize, c: usize },
    Scan { x: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var, dims: ScanDims, a: Vec<T>, hs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Single-owner operation record.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked var; `None` for vars that do not depend on a
    /// parameter.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], g: Vec<T>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), g)),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    /// 2D convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        let [batch, cin, h, wd] = self.value(x).dims::<4>(OP)?;
        let [cout, cin_g, k, k2] = self.value(w).dims::<4>(OP)?;
        if spec.groups == 0 || spec.stride == 0 {
            return Err(Error::shape(OP, "groups and stride must be positive"));
        }
        if cin % spec.groups != 0 {
            return Err(Error::shape(OP, format!("input channels {cin} not divisible by groups {}", spec.groups)));
        }
        if cout % spec.groups != 0 {
            return Err(Error::shape(OP, format!("output channels {cout} not divisible by groups {}", spec.groups)));
        }
        if cin_g != cin / spec.groups {
            return Err(Error::Dim { op: OP, axis: "weight in-channels", expected: cin / spec.groups, actual: cin_g });
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape(OP, format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if let Some(b) = b {
            let n = self.value(b).numel();
            if n != cout {
                return Err(Error::Dim { op: OP, axis: "bias", expected: cout, actual: n });
            }
        }
        if h + 2 * spec.padding < k {
            return Err(Error::Dim { op: OP, axis: "height", expected: k, actual: h + 2 * spec.padding });
        }
        if wd + 2 * spec.padding < k {
            return Err(Error::Dim { op: OP, axis: "width", expected: k, actual: wd + 2 * spec.padding });
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
            ho: (h + 2 * spec.padding - k) / spec.stride + 1,
            wo: (wd + 2 * spec.padding - k) / spec.stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts(vec![batch, cout, geom.ho, geom.wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Linear map over `axis`: `w: [Cout, Cin]`, `b: [Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, axis: usize) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(OP, format!("axis {axis} out of range for {xs:?}")));
        }
        let [cout, cin] = self.value(w).dims::<2>(OP)?;
        let (outer, c, inner) = split_axis(&xs, axis);
        if c != cin {
            return Err(Error::Dim { op: OP, axis: "in-features", expected: cin, actual: c });
        }
        if let Some(b) = b {
            let n = self.value(b).numel();
            if n != cout {
                return Err(Error::Dim { op: OP, axis: "bias", expected: cout, actual: n });
            }
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            outer,
            cin,
            inner,
            cout,
        );
        let mut shape = xs;
        shape[axis] = cout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Linear { x, w, b, outer, cin, inner, cout }, &inputs))
    }

    /// Layer normalization over `axis` with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: T) -> Result<Var> {
        const OP: &str = "layer_norm";
        if !(eps > T::zero()) {
            return Err(Error::InvalidArgument("layer_norm: eps must be positive".into()));
        }
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(OP, format!("axis {axis} out of range for {xs:?}")));
        }
        let (outer, c, inner) = split_axis(&xs, axis);
        for (v, axis) in [(gamma, "gamma"), (beta, "beta")] {
            let n = self.value(v).numel();
            if n != c {
                return Err(Error::Dim { op: OP, axis, expected: c, actual: n });
            }
        }
        let (y, mean, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            outer,
            c,
            inner,
            eps,
        );
        Ok(self.push(
            Tensor::from_parts(xs, y),
            Op::LayerNorm { x, gamma, beta, outer, c, inner, mean, rstd },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::silu);
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, gt: Var) -> Result<Var> {
        let p = self.value(pred);
        let g = self.value(gt);
        p.expect_same_shape(g, "l1_loss")?;
        let mut acc = T::zero();
        for (&a, &b) in p.data().iter().zip(g.data()) {
            acc += (a - b).abs();
        }
        let v = Tensor::scalar(acc / T::lit(p.numel() as f64));
        Ok(self.push(v, Op::L1Loss { pred, gt }, &[pred, gt]))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims::<4>("upsample2x")?;
        let y = kernels::upsample2x_forward(self.value(x).data(), b * c, h, w);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, 2 * h, 2 * w], y),
            Op::Upsample2x { x, bc: b * c, h, w },
            &[x],
        ))
    }

    /// Concatenates two `[B, *, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [ba, ca, ha, wa] = self.value(a).dims::<4>(OP)?;
        let [bb, cb, hb, wb] = self.value(b).dims::<4>(OP)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                OP,
                format!("{:?} and {:?} differ outside the channel axis", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for n in 0..ba {
            out.extend_from_slice(&self.value(a).data()[n * ca * plane..][..ca * plane]);
            out.extend_from_slice(&self.value(b).data()[n * cb * plane..][..cb * plane]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ba, ca + cb, ha, wa], out),
            Op::ConcatChannels { a, b, batch: ba, ca, cb, plane },
            &[a, b],
        ))
    }

    /// `[B, C, H, W]` map to a `[B, L, C]` token sequence in `perm` order,
    /// where `perm[t]` is the flat spatial index of token `t`.
    pub fn gather_tokens(&mut self, x: Var, perm: Arc<[usize]>) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims::<4>("gather_tokens")?;
        if perm.len() != h * w {
            return Err(Error::Dim { op: "gather_tokens", axis: "tokens", expected: h * w, actual: perm.len() });
        }
        let seq = kernels::gather_tokens(self.value(x).data(), &perm, b, c);
        let l = perm.len();
        Ok(self.push(Tensor::from_parts(vec![b, l, c], seq), Op::GatherTokens { x, perm, batch: b, c }, &[x]))
    }

    /// Inverse of [`Tape::gather_tokens`]: places token `t` at `perm[t]`.
    pub fn scatter_tokens(&mut self, seq: Var, perm: Arc<[usize]>, h: usize, w: usize) -> Result<Var> {
        let [b, l, c] = self.value(seq).dims::<3>("scatter_tokens")?;
        if l != h * w || perm.len() != l {
            return Err(Error::Dim { op: "scatter_tokens", axis: "tokens", expected: h * w, actual: l });
        }
        let map = kernels::scatter_tokens(self.value(seq).data(), &perm, b, c);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, h, w], map),
            Op::ScatterTokens { seq, perm, batch: b, c },
            &[seq],
        ))
    }

    /// Selective scan of `x: [B, L, D]` with per-token `delta: [B, L, D]`,
    /// `b`, `c: [B, L, N]`, state matrix `A = -exp(a_log)` and skip `d: [D]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        const OP: &str = "selective_scan";
        let [batch, len, dinner] = self.value(x).dims::<3>(OP)?;
        let [ad, nstate] = self.value(a_log).dims::<2>(OP)?;
        if ad != dinner {
            return Err(Error::Dim { op: OP, axis: "A channels", expected: dinner, actual: ad });
        }
        let dims = ScanDims { batch, len, dinner, nstate };
        let a: Vec<T> = self.value(a_log).data().iter().map(|v| -v.exp()).collect();
        let inp = ScanInputs {
            dims,
            x: self.value(x).data(),
            delta: self.value(delta).data(),
            a: &a,
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        };
        let (y, hs) = ssm::scan_seq_raw(&inp, true)?;
        Ok(self.push(
            Tensor::from_parts(vec![batch, len, dinner], y),
            Op::Scan { x, delta, a_log, b, c, d, dims, a, hs },
            &[x, delta, a_log, b, c, d],
        ))
    }

    /// Propagates `d loss / d v` for every tracked var.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward(format!("var {} not on this tape", loss.0)));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { slots });
        }
        slots[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = slots[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut slots);
            slots[idx] = Some(g);
        }
        for (slot, node) in slots.iter_mut().zip(&self.nodes) {
            if !node.tracked {
                *slot = None;
            }
        }
        Ok(Gradients { slots })
    }

    fn send(&self, slots: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        let node = &self.nodes[v.0];
        if node.tracked {
            accumulate(&mut slots[v.0], node.value.shape(), g);
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.tracked(*x) {
                    let gx = kernels::conv2d_backward_input(geom, gd, self.value(*w).data());
                    self.send(slots, *x, gx);
                }
                if self.tracked(*w) || b.is_some_and(|b| self.tracked(b)) {
                    let (gw, gb) = kernels::conv2d_backward_params(geom, gd, self.value(*x).data());
                    self.send(slots, *w, gw);
                    if let Some(b) = b {
                        self.send(slots, *b, gb);
                    }
                }
            }
            Op::Linear { x, w, b, outer, cin, inner, cout } => {
                if self.tracked(*x) {
                    let gx = kernels::linear_backward_input(gd, self.value(*w).data(), *outer, *cin, *inner, *cout);
                    self.send(slots, *x, gx);
                }
                if self.tracked(*w) || b.is_some_and(|b| self.tracked(b)) {
                    let (gw, gb) =
                        kernels::linear_backward_params(gd, self.value(*x).data(), *outer, *cin, *inner, *cout);
                    self.send(slots, *w, gw);
                    if let Some(b) = b {
                        self.send(slots, *b, gb);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, outer, c, inner, mean, rstd } => {
                let (gx, ggamma, gbeta) = kernels::layer_norm_backward(
                    gd,
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    mean,
                    rstd,
                    *outer,
                    *c,
                    *inner,
                );
                self.send(slots, *x, gx);
                self.send(slots, *gamma, ggamma);
                self.send(slots, *beta, gbeta);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let gx = gd.iter().zip(xv).map(|(&g, &x)| g * kernels::silu_grad(x)).collect();
                self.send(slots, *x, gx);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let gx = gd.iter().zip(xv).map(|(&g, &x)| g * kernels::sigmoid(x)).collect();
                self.send(slots, *x, gx);
            }
            Op::Add(a, b) => {
                self.send(slots, *a, gd.to_vec());
                self.send(slots, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(slots, *a, gd.to_vec());
                self.send(slots, *b, gd.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    self.send(slots, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.tracked(*b) {
                    self.send(slots, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(x, s) => {
                self.send(slots, *x, gd.iter().map(|&g| g * *s).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(slots, *x, vec![gd[0]; n]);
            }
            Op::L1Loss { pred, gt } => {
                let (p, t) = (self.value(*pred).data(), self.value(*gt).data());
                let scale = gd[0] / T::lit(p.len() as f64);
                let gp: Vec<T> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        let diff = a - b;
                        if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.tracked(*gt) {
                    self.send(slots, *gt, gp.iter().map(|&v| -v).collect());
                }
                self.send(slots, *pred, gp);
            }
            Op::Upsample2x { x, bc, h, w } => {
                self.send(slots, *x, kernels::upsample2x_backward(gd, *bc, *h, *w));
            }
            Op::ConcatChannels { a, b, batch, ca, cb, plane } => {
                let mut ga = Vec::with_capacity(batch * ca * plane);
                let mut gb = Vec::with_capacity(batch * cb * plane);
                for n in 0..*batch {
                    let base = n * (ca + cb) * plane;
                    ga.extend_from_slice(&gd[base..][..ca * plane]);
                    gb.extend_from_slice(&gd[base + ca * plane..][..cb * plane]);
                }
                self.send(slots, *a, ga);
                self.send(slots, *b, gb);
            }
            Op::GatherTokens { x, perm, batch, c } => {
                self.send(slots, *x, kernels::scatter_tokens(gd, perm, *batch, *c));
            }
            Op::ScatterTokens { seq, perm, batch, c } => {
                self.send(slots, *seq, kernels::gather_tokens(gd, perm, *batch, *c));
            }
            Op::Scan { x, delta, a_log, b, c, d, dims, a, hs } => {
                let inp = ScanInputs {
                    dims: *dims,
                    x: self.value(*x).data(),
                    delta: self.value(*delta).data(),
                    a,
                    b: self.value(*b).data(),
                    c: self.value(*c).data(),
                    d: self.value(*d).data(),
                };
                let grads = ssm::scan_backward_raw(&inp, hs, gd);
                // dA/dA_log = A
                let ga_log = grads.a.iter().zip(a).map(|(&g, &av)| g * av).collect();
                self.send(slots, *x, grads.x);
                self.send(slots, *delta, grads.delta);
                self.send(slots, *a_log, ga_log);
                self.send(slots, *b, grads.b);
                self.send(slots, *c, grads.c);
                self.send(slots, *d, grads.d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn independent_param_gets_zero_or_nothing() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p).map_or(true, |gp| gp.data().iter().all(|&v| v == 0.0)));
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let k = tape.constant(t(&[2], &[3.0, 4.0]));
        let prod = tape.mul(w, k).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(k).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Backward(_))));
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Backward(_))));
    }

    #[test]
    fn conv_identity_and_hand_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 1, 3, 3]).unwrap());
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, None, ConvSpec::same(1)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tape.constant(Tensor::ones(vec![1, 1, 3, 3]).unwrap());
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), ConvSpec::same(3)).unwrap();
        assert_eq!(tape.value(y).data()[4], 45.0);
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(vec![1, 3, 4, 4]).unwrap());
        let w = tape.constant(Tensor::ones(vec![2, 2, 3, 3]).unwrap());
        match tape.conv2d(x, w, None, ConvSpec::same(3)) {
            Err(Error::Dim { axis, expected: 3, actual: 2, .. }) => assert_eq!(axis, "weight in-channels"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
        let w = tape.constant(Tensor::ones(vec![2, 3, 2, 2]).unwrap());
        assert!(tape.conv2d(x, w, None, ConvSpec::same(3)).is_err());
        let w = tape.constant(Tensor::ones(vec![4, 1, 3, 3]).unwrap());
        assert!(tape.conv2d(x, w, None, ConvSpec::same(3).with_groups(2)).is_err());
    }

    #[test]
    fn depthwise_channels_independent() {
        let mut tape = Tape::<f64>::new();
        let base: Vec<f64> = (0..2 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut bumped = base.clone();
        bumped[16 + 5] += 3.0;
        let w = tape.constant(Tensor::from_fn(vec![2, 1, 3, 3], |i| i as f64 * 0.1 - 0.4).unwrap());
        let x0 = tape.constant(t(&[1, 2, 4, 4], &base));
        let x1 = tape.constant(t(&[1, 2, 4, 4], &bumped));
        let spec = ConvSpec::same(3).with_groups(2);
        let y0 = tape.conv2d(x0, w, None, spec).unwrap();
        let y1 = tape.conv2d(x1, w, None, spec).unwrap();
        assert_eq!(tape.value(y0).data()[..16], tape.value(y1).data()[..16]);
        assert_ne!(tape.value(y0).data()[16..], tape.value(y1).data()[16..]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones(vec![2]).unwrap());
        let zeros = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, ones, zeros, 1, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let c = tape.constant(t(&[1, 2], &[0.7, 0.7]));
        let y = tape.layer_norm(c, ones, zeros, 1, 1e-5).unwrap();
        assert!(tape.value(y).max_abs() < 1e-9);

        let g0 = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let beta = tape.constant(t(&[2], &[2.5, 2.5]));
        let y = tape.layer_norm(x, g0, beta, 1, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 2.5]);

        let bad = tape.constant(Tensor::ones(vec![3]).unwrap());
        assert!(tape.layer_norm(x, bad, zeros, 1, 1e-5).is_err());
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, 50.0]));
        let y = tape.silu(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        // 1 / (1 + e^-1)
        assert!((v[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((v[2] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
        let g = tape.constant(t(&[4], &[0.0, 0.0, 3.0, 1.0]));
        let loss = tape.l1_loss(p, g).unwrap();
        assert!((tape.value(loss).data()[0] - (0.5 + 1.0 + 1.0 + 1.0) / 4.0).abs() < 1e-15);
        let gr = tape.backward(loss).unwrap();
        assert_eq!(gr.get(p).unwrap().data(), &[0.25, -0.25, -0.25, -0.25]);
    }
}
