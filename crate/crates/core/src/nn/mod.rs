//! A small reverse-mode network kernel: the layer set needed by the fusion,
//! CI-inference and discriminator networks, Adam, checkpoints and gradient
//! checking.

pub mod arch;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod params;

pub use arch::{ci_net, discriminator, fusion_net, ArchConfig};
pub use network::{Gradients, LayerKind, NetBuilder, NetSpec, Network, Tape};
pub use gradcheck::relative_error;
pub use params::{accumulate, AdamConfig, NetParams, ParamGrads, ParamTensor};
