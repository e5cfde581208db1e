//! Layers built on the tape: convolutions, batch norm, pooling and
//! residual blocks, plus the parameter store they register into.

mod conv;
mod norm;
mod params;
mod pool;
mod residual;

pub use conv::{conv, conv_transpose, Conv, ConvSpec, ConvTranspose};
pub use norm::{batch_norm_eval, batch_norm_train, BatchNorm, BatchStats, BN_EPS, BN_MOMENTUM};
pub use params::{Forward, Mode, ParamId, ParamKind, ParamStore};
pub use pool::max_pool;
pub use residual::{ConvBnRelu, ResidualBlock};
