//! Dense tensors, a reverse-mode tape and deterministic randomness.

mod gemm;
mod params;
mod rng;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use rng::RngState;
pub use tape::{AttentionLayout, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

/// Stand-alone softmax of a slice, max-subtracted.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}
