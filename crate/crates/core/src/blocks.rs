//! Vision Dehamba Block: a normalized dual-branch state-space stage and a
//! normalized feed-forward stage, each wrapped in a residual connection.
//!
//! ```text
//! x1  = x  + SSM(Norm1(x))
//! out = x1 + FFN(DWConv3x3(Norm2(x1)))
//!
//! SSM(t) = Linear( SiLU(Linear(t)) * Norm(DSM(SiLU(DConv(Linear(t))))) )
//! FFN(t) = Linear(SiLU(Linear(t)))      hidden width round(ffn_expand * C)
//! ```
//!
//! The switches in [`VdbConfig`] turn off individual pieces for ablations.

use rand::Rng;

use crate::dsm::{dsm_forward, ScanPaths};
use crate::error::{Error, Result};
use crate::params::{Bound, ChannelNorm, Conv, Init, ParamStore, Pointwise, SsmIds};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VdbConfig {
    pub channels: usize,
    pub state_dim: usize,
    pub paths: ScanPaths,
    pub use_dconv: bool,
    pub use_silu: bool,
    pub use_hadamard: bool,
    pub use_ffn: bool,
    pub ffn_expand: f64,
}

impl VdbConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            state_dim: crate::ssm::DEFAULT_STATE_DIM,
            paths: ScanPaths::Four,
            use_dconv: true,
            use_silu: true,
            use_hadamard: true,
            use_ffn: true,
            ffn_expand: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidConfig("block channels must be at least 1".into()));
        }
        if self.state_dim == 0 {
            return Err(Error::InvalidConfig("state dimension must be at least 1".into()));
        }
        if !(self.ffn_expand > 0.0) || !self.ffn_expand.is_finite() {
            return Err(Error::InvalidConfig(format!("ffn_expand must be positive, got {}", self.ffn_expand)));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        ((self.ffn_expand * self.channels as f64).round() as usize).max(1)
    }
}

/// Pointwise expand, SiLU, pointwise project.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub expand: Pointwise,
    pub project: Pointwise,
}

impl Ffn {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, c: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            expand: Pointwise::new(&mut init.scoped("expand"), c, hidden)?,
            project: Pointwise::new(&mut init.scoped("project"), hidden, c)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, p, x)?;
        let h = tape.silu(h);
        self.project.forward(tape, p, h)
    }
}

/// Parameter layout of one block. Tensors live in the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Vdb {
    pub cfg: VdbConfig,
    pub norm1: ChannelNorm,
    pub gate_in: Pointwise,
    pub scan_in: Pointwise,
    pub dconv: Option<Conv>,
    pub ssm: Vec<SsmIds>,
    pub scan_norm: ChannelNorm,
    pub out: Pointwise,
    pub ffn_stage: Option<FfnStage>,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnStage {
    pub norm2: ChannelNorm,
    pub dwconv: Conv,
    pub ffn: Ffn,
}

impl Vdb {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: VdbConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let norm1 = ChannelNorm::new(&mut init.scoped("norm1"), c)?;
        let gate_in = Pointwise::new(&mut init.scoped("gate_in"), c, c)?;
        let scan_in = Pointwise::new(&mut init.scoped("scan_in"), c, c)?;
        let dconv = if cfg.use_dconv { Some(Conv::depthwise(&mut init.scoped("dconv"), c, 3)?) } else { None };
        let ssm = cfg
            .paths
            .directions()
            .iter()
            .enumerate()
            .map(|(i, _)| SsmIds::new(&mut init.scoped(&format!("ssm.dir{i}")), c, cfg.state_dim))
            .collect::<Result<Vec<_>>>()?;
        let scan_norm = ChannelNorm::new(&mut init.scoped("scan_norm"), c)?;
        let out = Pointwise::new(&mut init.scoped("out"), c, c)?;
        let ffn_stage = if cfg.use_ffn {
            Some(FfnStage {
                norm2: ChannelNorm::new(&mut init.scoped("norm2"), c)?,
                dwconv: Conv::depthwise(&mut init.scoped("dwconv"), c, 3)?,
                ffn: Ffn::new(&mut init.scoped("ffn"), c, cfg.ffn_hidden())?,
            })
        } else {
            None
        };
        Ok(Self { cfg, norm1, gate_in, scan_in, dconv, ssm, scan_norm, out, ffn_stage })
    }

    fn act<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        if self.cfg.use_silu {
            tape.silu(x)
        } else {
            x
        }
    }

    /// Gated branch times the scanned branch, then a linear map.
    pub fn ssm_dual_branch<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let gate = self.gate_in.forward(tape, p, x)?;
        let gate = self.act(tape, gate);

        let mut s = self.scan_in.forward(tape, p, x)?;
        if let Some(dconv) = &self.dconv {
            s = dconv.forward(tape, p, s)?;
        }
        s = self.act(tape, s);
        let ssm: Vec<_> = self.ssm.iter().map(|ids| ids.vars(p)).collect();
        s = dsm_forward(tape, s, &ssm, self.cfg.paths)?;
        s = self.scan_norm.forward(tape, p, s)?;

        let merged = if self.cfg.use_hadamard { tape.mul(gate, s)? } else { tape.add(gate, s)? };
        self.out.forward(tape, p, merged)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let [_, c, _, _] = tape.value(x).dims::<4>("vdb")?;
        if c != self.cfg.channels {
            return Err(Error::Dim { op: "vdb", axis: "channels", expected: self.cfg.channels, actual: c });
        }
        let n1 = self.norm1.forward(tape, p, x)?;
        let s = self.ssm_dual_branch(tape, p, n1)?;
        let x1 = tape.add(x, s)?;
        let Some(stage) = &self.ffn_stage else { return Ok(x1) };
        let n2 = stage.norm2.forward(tape, p, x1)?;
        let d = stage.dwconv.forward(tape, p, n2)?;
        let f = stage.ffn.forward(tape, p, d)?;
        tape.add(x1, f)
    }
}

/// A standalone block with its own parameters, for tests and tools.
#[derive(Clone, Debug)]
pub struct StandaloneVdb<T: Real = f32> {
    pub block: Vdb,
    pub params: ParamStore<T>,
}

impl<T: Real> StandaloneVdb<T> {
    pub fn new<R: Rng>(cfg: VdbConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let block = Vdb::new(&mut Init::new(&mut params, rng), cfg)?;
        Ok(Self { block, params })
    }

    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.block.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }
}
