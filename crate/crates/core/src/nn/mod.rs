//! Layers built on the autograd graph: convolution, linear, batch norm,
//! dropout, and parameter storage/initialization.

mod check;
mod init;
mod layers;
mod params;

pub use check::{gradcheck_module, projected_sum};
pub use init::{init_parameters, LayerKind};
pub use layers::{linear, BatchNorm, BatchNormConfig, Conv2d, ConvBn, Dropout, Linear};
pub use params::{apply_stat_updates, Mode, ParamEntry, ParamId, ParamKind, ParamStore, Session};

pub use crate::kernels::{ConvSpec, PoolKind};
