//! Direction-aware scanning of 2D feature maps.
//!
//! A `[B, C, H, W]` map is flattened into four token orders, each order is
//! run through its own selective scan, the results are put back in place
//! and summed.
//!
//! | direction | order                         |
//! |-----------|-------------------------------|
//! | 0         | row-major, top-left first     |
//! | 1         | reverse of 0                  |
//! | 2         | column-major, top-left first  |
//! | 3         | reverse of 2                  |

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::ssm::SsmParams;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColumnForward,
    ColumnBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] =
        [Direction::RowForward, Direction::RowBackward, Direction::ColumnForward, Direction::ColumnBackward];

    /// `perm[t]` is the flat row-major index of token `t`.
    pub fn permutation(self, h: usize, w: usize) -> Vec<usize> {
        let l = h * w;
        let col_major = |t: usize| (t % h) * w + t / h;
        match self {
            Direction::RowForward => (0..l).collect(),
            Direction::RowBackward => (0..l).rev().collect(),
            Direction::ColumnForward => (0..l).map(col_major).collect(),
            Direction::ColumnBackward => (0..l).rev().map(col_major).collect(),
        }
    }
}

/// Inverse permutation: `inv[perm[t]] = t`.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (t, &p) in perm.iter().enumerate() {
        inv[p] = t;
    }
    inv
}

/// Number of active scan paths: directions `0..n` are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ScanPaths {
    One = 1,
    Two = 2,
    #[default]
    Four = 4,
}

impl ScanPaths {
    pub fn count(self) -> usize {
        self as usize
    }

    pub fn directions(self) -> &'static [Direction] {
        &Direction::ALL[..self.count()]
    }
}

impl TryFrom<usize> for ScanPaths {
    type Error = Error;

    fn try_from(n: usize) -> Result<Self> {
        match n {
            1 => Ok(ScanPaths::One),
            2 => Ok(ScanPaths::Two),
            4 => Ok(ScanPaths::Four),
            _ => Err(Error::InvalidConfig(format!("scan paths must be 1, 2 or 4, got {n}"))),
        }
    }
}

/// Token sequences `[B, H*W, C]`, one per direction, with the orders that
/// produced them.
#[derive(Clone, Debug)]
pub struct DirectionalSequences<T = f32> {
    pub seqs: Vec<Tensor<T>>,
    pub perms: Vec<Arc<[usize]>>,
    pub dims: (usize, usize),
}

impl<T: Real> DirectionalSequences<T> {
    /// Keeps only the first `n` directions.
    pub fn truncate(mut self, n: usize) -> Self {
        self.seqs.truncate(n);
        self.perms.truncate(n);
        self
    }
}

/// Flattens `p: [B, C, H, W]` into the four directional orders.
pub fn scan_expand<T: Real>(p: &Tensor<T>) -> Result<DirectionalSequences<T>> {
    let [b, c, h, w] = p.dims::<4>("scan_expand")?;
    let mut seqs = Vec::with_capacity(4);
    let mut perms = Vec::with_capacity(4);
    for dir in Direction::ALL {
        let perm: Arc<[usize]> = dir.permutation(h, w).into();
        seqs.push(Tensor::from_parts(vec![b, h * w, c], kernels::gather_tokens(p.data(), &perm, b, c)));
        perms.push(perm);
    }
    Ok(DirectionalSequences { seqs, perms, dims: (h, w) })
}

/// Puts every sequence back in spatial order and sums them, in direction
/// order, into a `[B, C, H, W]` map.
pub fn scan_merge<T: Real>(seqs: &DirectionalSequences<T>) -> Result<Tensor<T>> {
    let (h, w) = seqs.dims;
    let first = seqs.seqs.first().ok_or_else(|| Error::shape("scan_merge", "no sequences"))?;
    if seqs.seqs.len() != seqs.perms.len() {
        return Err(Error::shape(
            "scan_merge",
            format!("{} sequences but {} permutations", seqs.seqs.len(), seqs.perms.len()),
        ));
    }
    let [b, l, c] = first.dims::<3>("scan_merge")?;
    if l != h * w {
        return Err(Error::Dim { op: "scan_merge", axis: "tokens", expected: h * w, actual: l });
    }
    let mut out = vec![T::zero(); b * c * l];
    for (seq, perm) in seqs.seqs.iter().zip(&seqs.perms) {
        if seq.shape() != first.shape() {
            return Err(Error::shape("scan_merge", format!("{:?} vs {:?}", seq.shape(), first.shape())));
        }
        if perm.len() != l {
            return Err(Error::Dim { op: "scan_merge", axis: "permutation", expected: l, actual: perm.len() });
        }
        let placed = kernels::scatter_tokens(seq.data(), perm, b, c);
        for (o, v) in out.iter_mut().zip(placed) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], out))
}

/// Tape handles for one direction's [`SsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d: Var,
    pub dt_weight: Var,
    pub dt_bias: Var,
    pub b_proj: Var,
    pub c_proj: Var,
}

impl SsmVars {
    pub fn constants<T: Real>(tape: &mut Tape<T>, p: &SsmParams<T>) -> Self {
        Self {
            a_log: tape.constant(p.a_log.clone()),
            d: tape.constant(p.d.clone()),
            dt_weight: tape.constant(p.dt_weight.clone()),
            dt_bias: tape.constant(p.dt_bias.clone()),
            b_proj: tape.constant(p.b_proj.clone()),
            c_proj: tape.constant(p.c_proj.clone()),
        }
    }
}

/// Selective scan of a `[B, L, D]` sequence with projections computed from
/// the sequence itself.
pub fn ssm_sequence<T: Real>(tape: &mut Tape<T>, seq: Var, p: &SsmVars) -> Result<Var> {
    let pre = tape.linear(seq, p.dt_weight, Some(p.dt_bias), 2)?;
    let delta = tape.softplus(pre);
    let b = tape.linear(seq, p.b_proj, None, 2)?;
    let c = tape.linear(seq, p.c_proj, None, 2)?;
    tape.selective_scan(seq, delta, p.a_log, b, c, p.d)
}

/// Scans `p: [B, C, H, W]` along the active directions and merges.
/// `ssm[i]` parameterizes direction `i`.
pub fn dsm_forward<T: Real>(tape: &mut Tape<T>, p: Var, ssm: &[SsmVars], paths: ScanPaths) -> Result<Var> {
    let [_, _, h, w] = tape.value(p).dims::<4>("dsm")?;
    if ssm.len() < paths.count() {
        return Err(Error::InvalidConfig(format!(
            "dsm: {} scan paths need as many parameter sets, got {}",
            paths.count(),
            ssm.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (dir, params) in paths.directions().iter().zip(ssm) {
        let perm: Arc<[usize]> = dir.permutation(h, w).into();
        let seq = tape.gather_tokens(p, perm.clone())?;
        let y = ssm_sequence(tape, seq, params)?;
        let placed = tape.scatter_tokens(y, perm, h, w)?;
        acc = Some(match acc {
            None => placed,
            Some(a) => tape.add(a, placed)?,
        });
    }
    Ok(acc.expect("at least one scan path"))
}

/// Untracked evaluation of [`dsm_forward`].
pub fn dsm_forward_tensor<T: Real>(p: &Tensor<T>, ssm: &[SsmParams<T>], paths: ScanPaths) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(p.clone());
    let vars: Vec<SsmVars> = ssm.iter().map(|s| SsmVars::constants(&mut tape, s)).collect();
    let y = dsm_forward(&mut tape, x, &vars, paths)?;
    Ok(tape.value(y).clone())
}
