//! FLOP-counting convention shared by the tape counter and the closed forms.
//!
//! One fused multiply-add counts as two FLOPs. Nonlinearities carry the
//! per-element costs below. Layout ops (reshape, permute, concat, expand) are free.

pub const PER_MAC: u64 = 2;
pub const ELEMENTWISE: u64 = 1;
pub const BIAS_ADD: u64 = 1;
pub const LEAKY_RELU: u64 = 1;
pub const SIGMOID: u64 = 4;
pub const GELU: u64 = 10;
pub const SOFTMAX: u64 = 5;
pub const BATCH_NORM: u64 = 6;
pub const CROSS_ENTROPY: u64 = 5;
pub const REDUCE: u64 = 1;
