//! Selective state-space dehazing network on a self-contained CPU engine.
//!
//! The crate carries its own dense tensors and reverse-mode tape
//! ([`tensor`], [`tape`]), the selective scan kernel ([`ssm`]), the
//! four-direction 2D scan ([`dsm`]), the residual blocks ([`blocks`]) and the
//! U-Net that stacks them ([`network`]). Around the model sit synthetic haze
//! data ([`data`]), metrics ([`metrics`]), checkpoints ([`checkpoint`]) and
//! the trainer ([`train`]).

pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod dsm;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod params;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{build_model, param_count, Model, ModelConfig};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
