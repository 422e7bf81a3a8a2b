//! Residual integration rules over pre-norm Transformer sublayers.
//!
//! A block advances the hidden state `y` with one step of a numerical
//! scheme applied to the sublayer increment `F(y)`. Every internal stage of
//! a block evaluates the same `F` with the same parameters; the only extra
//! parameters a variant may own are its combination coefficients.

mod block;
mod probe;
mod sublayer;
mod variant;

pub use block::{block_forward, gate_logits, rk2_gate, BlockState, Coefficients};
pub use probe::{analytic_depth_gradient, probe_stack_gradient};
pub use sublayer::{
    attention_f, ffn_f, sublayer_f, AttentionParams, Dropout, FfnParams, Init, SublayerKind, SublayerParams,
    SublayerSpec, DEFAULT_LN_EPS,
};
pub use variant::{BlockVariant, CoefficientSpec, OdeGranularity};
