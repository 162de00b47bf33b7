//! Dense tensors, the autodiff tape, parameter storage, initialization and
//! the Adam optimizer.

mod adam;
pub mod gradcheck;
mod init;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use init::{glorot_uniform, scaled_normal};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use alloc::vec::Vec;

/// Pure row-wise softmax helper over an arbitrary axis of `x`.
pub fn softmax(x: &Tensor, axis: usize) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x)?;
    let y = tape.softmax(v, axis)?;
    Ok(tape.tensor(y))
}

/// Inverted dropout mask: zero with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut crate::Rng) -> Vec<f64> {
    use rand::Rng as _;
    let keep = 1.0 - rate;
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep }).collect()
}
