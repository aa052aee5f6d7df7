//! Dense tensor math, activations, the deterministic RNG, and the
//! finite-difference oracle.

mod activation;
mod fd;
mod matmul;
mod ops;
mod rng;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub use activation::{activation, activation_grad, sigmoid, Activation, GELU_SQRT_2_OVER_PI};
pub use fd::finite_diff_grad;
pub use matmul::{axpy, dot, matmul, matmul_into, matmul_naive, matmul_nt, matmul_tn, BLOCK};
pub use ops::{
    causal_attention, causal_attention_backward, layer_norm, layer_norm_backward, log_softmax_row,
    softmax_row, AttentionCache, LayerNormCache, LN_EPS,
};
pub use rng::Rng;
pub use tensor::Tensor;

/// Element type: `f32` for normal runs, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working precision.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("f64 converts to any Real")
}
