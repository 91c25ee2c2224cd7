//! Tensor algebra with reverse-mode differentiation.
//!
//! Internal layout is `[B, C, H, W]` unless an operation says otherwise.
//! The free functions below are value-only conveniences that run the
//! corresponding [`Tape`] operation on constants.

mod fourier;
mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

use std::sync::Arc;

pub use fourier::{
    band_filter, dft2, fftshift, idft2, idft2_complex, ifftshift, ComplexTensor, InverseResult,
};
pub use gradcheck::{check_gradients, FD_STEP};
pub use kernels::gelu;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Same-size depthwise convolution of `[B, C, H, W]` with a `[C, k, k]` kernel.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(kernel.clone());
    let y = tape.depthwise_conv2d(xv, kv)?;
    Ok(tape.value(y).clone())
}

/// Weights of a two-layer perceptron `affine -> GELU -> affine`.
#[derive(Debug, Clone)]
pub struct Mlp2Weights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Records `linear(gelu(linear(x)))` on a tape.
pub fn mlp2_on(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.linear(x, w1, b1)?;
    let h = tape.gelu(h);
    tape.linear(h, w2, b2)
}

pub fn mlp2(x: &Tensor, weights: &Mlp2Weights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let [w1, b1, w2, b2] =
        [&weights.w1, &weights.b1, &weights.w2, &weights.b2].map(|t| tape.constant(t.clone()));
    let y = mlp2_on(&mut tape, xv, w1, b1, w2, b2)?;
    Ok(tape.value(y).clone())
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.softmax(xv);
    tape.value(y).clone()
}

/// `[B, H, W, C]` to `[B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.global_avg_pool(xv)?;
    Ok(tape.value(y).clone())
}

/// Pixel-mean (optionally weighted) cross-entropy of `[B, K, H, W]` logits
/// against a `[B, H, W]` class map.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    let mut tape = Tape::new();
    let lv = tape.constant(logits.clone());
    let y = tape.cross_entropy(
        lv,
        Arc::new(targets.to_vec()),
        weights.map(|w| Arc::new(w.to_vec())),
    )?;
    Ok(tape.value(y).item())
}

/// Softmax over the channel axis of `[B, K, H, W]` logits.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let [b, k, h, w] = logits.dims4()?;
    Tensor::new(
        logits.shape(),
        kernels::softmax_channels(logits.data(), b, k, h * w),
    )
}
