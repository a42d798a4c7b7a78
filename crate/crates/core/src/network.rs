//! Three-level residual U-Net built from Vision Dehamba Blocks.
//!
//! ```text
//! I ─ conv3x3 ─ E0 (C, H)
//!      enc1: N1 blocks @ C,  H         ──────────────┐ skip
//!      down: conv3x3/2 → 2C, H/2                     │
//!      enc2: N2 blocks @ 2C, H/2       ──────┐ skip  │
//!      down: conv3x3/2 → 4C, H/4             │       │
//!      latent: N3 blocks @ 4C, H/4           │       │
//!      up: nearest x2, conv3x3 → 2C, H/2     │       │
//!      concat(enc2) → 4C, 1x1 → 2C  ◄────────┘       │
//!      dec2: N2 blocks @ 2C, H/2                     │
//!      up: nearest x2, conv3x3 → C, H                │
//!      concat(enc1) → 2C  ◄──────────────────────────┘
//!      dec1: N1 blocks @ 2C, H  = Ed
//!      conv3x3 → 3 = residual;  output = residual + I
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Vdb, VdbConfig};
use crate::dsm::ScanPaths;
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Init, ParamStore, Pointwise};
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

/// Spatial dims must be multiples of this (two stride-2 stages).
pub const SPATIAL_MULTIPLE: usize = 4;

/// Base width giving a parameter count close to 1.80M with the default
/// block counts and block layout.
pub const DEFAULT_BASE_CHANNELS: usize = 38;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub block_counts: [usize; 3],
    pub state_dim: usize,
    pub paths: ScanPaths,
    pub use_dconv: bool,
    pub use_silu: bool,
    pub use_hadamard: bool,
    pub use_ffn: bool,
    pub ffn_expand: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vdb = VdbConfig::new(DEFAULT_BASE_CHANNELS);
        Self {
            base_channels: DEFAULT_BASE_CHANNELS,
            block_counts: [2, 3, 3],
            state_dim: vdb.state_dim,
            paths: vdb.paths,
            use_dconv: vdb.use_dconv,
            use_silu: vdb.use_silu,
            use_hadamard: vdb.use_hadamard,
            use_ffn: vdb.use_ffn,
            ffn_expand: vdb.ffn_expand,
        }
    }
}

/// Named ablation variants of the block interior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// No feed-forward stage.
    V1,
    /// No depth-wise conv in the scan branch.
    V2,
    /// No SiLU in either branch.
    V3,
    /// Branch merge by sum instead of elementwise product.
    V4,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::V1, Ablation::V2, Ablation::V3, Ablation::V4];
}

impl ModelConfig {
    /// Small model for fast tests: `C = c`, one block per level.
    pub fn tiny(c: usize) -> Self {
        Self { base_channels: c, block_counts: [1, 1, 1], ..Self::default() }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        match a {
            Ablation::V1 => self.use_ffn = false,
            Ablation::V2 => self.use_dconv = false,
            Ablation::V3 => self.use_silu = false,
            Ablation::V4 => self.use_hadamard = false,
        }
        self
    }

    pub fn vdb(&self, channels: usize) -> VdbConfig {
        VdbConfig {
            channels,
            state_dim: self.state_dim,
            paths: self.paths,
            use_dconv: self.use_dconv,
            use_silu: self.use_silu,
            use_hadamard: self.use_hadamard,
            use_ffn: self.use_ffn,
            ffn_expand: self.ffn_expand,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::InvalidConfig(format!("base channels must be at least 4, got {}", self.base_channels)));
        }
        self.vdb(self.base_channels).validate()
    }
}

/// Parameters plus the layer layout that consumes them.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

#[derive(Clone, Debug)]
struct Layout {
    shallow: Conv,
    enc1: Vec<Vdb>,
    down1: Conv,
    enc2: Vec<Vdb>,
    down2: Conv,
    latent: Vec<Vdb>,
    up2: Conv,
    fuse2: Pointwise,
    dec2: Vec<Vdb>,
    up1: Conv,
    dec1: Vec<Vdb>,
    refine: Conv,
}

fn stack<T: Real, R: rand::Rng>(init: &mut Init<'_, T, R>, name: &str, n: usize, cfg: VdbConfig) -> Result<Vec<Vdb>> {
    let mut level = init.scoped(name);
    (0..n).map(|i| Vdb::new(&mut level.scoped(&i.to_string()), cfg)).collect()
}

fn run_stack<T: Real>(blocks: &[Vdb], tape: &mut Tape<T>, p: &Bound, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, p, x)?;
    }
    Ok(x)
}

impl Layout {
    fn new<T: Real, R: rand::Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let [n1, n2, n3] = cfg.block_counts;
        let k3 = ConvSpec::same(3);
        Ok(Self {
            shallow: Conv::new(&mut init.scoped("shallow"), IMAGE_CHANNELS, c, 3, k3)?,
            enc1: stack(init, "enc1", n1, cfg.vdb(c))?,
            down1: Conv::new(&mut init.scoped("down1"), c, 2 * c, 3, k3.with_stride(2))?,
            enc2: stack(init, "enc2", n2, cfg.vdb(2 * c))?,
            down2: Conv::new(&mut init.scoped("down2"), 2 * c, 4 * c, 3, k3.with_stride(2))?,
            latent: stack(init, "latent", n3, cfg.vdb(4 * c))?,
            up2: Conv::new(&mut init.scoped("up2"), 4 * c, 2 * c, 3, k3)?,
            fuse2: Pointwise::new(&mut init.scoped("fuse2"), 4 * c, 2 * c)?,
            dec2: stack(init, "dec2", n2, cfg.vdb(2 * c))?,
            up1: Conv::new(&mut init.scoped("up1"), 2 * c, c, 3, k3)?,
            dec1: stack(init, "dec1", n1, cfg.vdb(2 * c))?,
            refine: Conv::new(&mut init.scoped("refine"), 2 * c, IMAGE_CHANNELS, 3, k3)?,
        })
    }
}

/// Builds a model with deterministic parameters derived from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    Model::new(cfg, seed)
}

/// Sum of parameter element counts.
pub fn param_count<T: Real>(model: &Model<T>) -> usize {
    model.params.numel()
}

/// Names of the final convolution's tensors.
pub const REFINE_PARAMS: [&str; 2] = ["refine.weight", "refine.bias"];

impl<T: Real> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::new(&mut Init::new(&mut params, &mut rng), cfg)?;
        Ok(Self { cfg: *cfg, params, layout })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { cfg: self.cfg, params: self.params.cast(), layout: self.layout.clone() }
    }

    /// Rebuilds the layout for `cfg` around existing parameters.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Model::<T>::new(cfg, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "config expects {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.params.iter().zip(params.iter()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter mismatch: expected {rn} {:?}, got {n} {:?}",
                    rt.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { cfg: *cfg, params, layout: reference.layout })
    }

    /// Zeros the final convolution so the network reduces to the identity.
    pub fn zero_residual(&mut self) {
        for name in REFINE_PARAMS {
            let id = self.params.id(name).expect("refine conv is always present");
            self.params.get_mut(id).data_mut().fill(T::zero());
        }
    }

    pub fn check_input(shape: &[usize]) -> Result<()> {
        let [_, c, h, w]: [usize; 4] = shape
            .try_into()
            .map_err(|_| Error::shape("forward", format!("expected [B, 3, H, W], got {shape:?}")))?;
        if c != IMAGE_CHANNELS {
            return Err(Error::Dim { op: "forward", axis: "channels", expected: IMAGE_CHANNELS, actual: c });
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::InvalidArgument(format!(
                "input height and width must be divisible by {SPATIAL_MULTIPLE}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Records the full network on `tape`; returns `F(x) + x`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Self::check_input(tape.value(x).shape())?;
        let l = &self.layout;
        let e0 = l.shallow.forward(tape, p, x)?;
        let s1 = run_stack(&l.enc1, tape, p, e0)?;
        let d1 = l.down1.forward(tape, p, s1)?;
        let s2 = run_stack(&l.enc2, tape, p, d1)?;
        let d2 = l.down2.forward(tape, p, s2)?;
        let latent = run_stack(&l.latent, tape, p, d2)?;

        let u2 = tape.upsample2x(latent)?;
        let u2 = l.up2.forward(tape, p, u2)?;
        let cat2 = tape.concat_channels(u2, s2)?;
        let f2 = l.fuse2.forward(tape, p, cat2)?;
        let r2 = run_stack(&l.dec2, tape, p, f2)?;

        let u1 = tape.upsample2x(r2)?;
        let u1 = l.up1.forward(tape, p, u1)?;
        let cat1 = tape.concat_channels(u1, s1)?;
        let ed = run_stack(&l.dec1, tape, p, cat1)?;

        let residual = l.refine.forward(tape, p, ed)?;
        tape.add(residual, x)
    }

    /// Inference without gradient tracking.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }
}
