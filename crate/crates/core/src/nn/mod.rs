//! Tensor kernels and layers, each with an analytic backward pass.

pub mod attention;
pub mod layers;
pub mod lstm;
pub mod ops;
pub mod params;
pub mod time_distributed;

pub use attention::{attention_pool, attention_pool_backward, PoolMode, TemporalAttention};
pub use layers::{Conv2d, Dense, DepthwiseConv2d, LayerNorm};
pub use lstm::{Lstm, LstmState};
pub use ops::Padding;
pub use params::{seeded_rng, Grads, Param, ParamId, ParamStore, Rng};
pub use time_distributed::{time_distributed, time_distributed_backward, time_distributed_map};
