//! Minimal reverse-mode training machinery: a row-major matrix type,
//! a fixed layer sequence with hand-written backward passes, and Adam.

mod layers;
mod params;
mod tensor;

pub use layers::{LayerSpec, Mode, Sequential, BN_EPS, BN_MOMENTUM};
pub use params::{AdamConfig, Buffer, BufferId, Param, ParamId, ParamStore};
pub use tensor::Tensor2;
