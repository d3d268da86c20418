//! Tape-free views of the differentiable operations.
//!
//! These share kernels with the tape versions, so a frozen model evaluated
//! through this path matches the training-time forward pass bit for bit.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Standard matrix product of two 2-d tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(dim_err("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = vec![0.0; m * n];
    kernels::matmul(a.data(), b.data(), m, k, n, &mut data);
    Tensor::new(vec![m, n], data)
}

/// 3×3 convolution, stride 1, zero padding 1: x [C,S,S] · kernel [O,C,3,3] + bias [O].
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 3 || x.shape()[1] != x.shape()[2] {
        return Err(dim_err("conv2d input", x.shape(), &[]));
    }
    if kernel.shape().len() != 4
        || kernel.shape()[2] != 3
        || kernel.shape()[3] != 3
        || kernel.shape()[1] != x.shape()[0]
    {
        return Err(dim_err("conv2d channels", x.shape(), kernel.shape()));
    }
    if bias.shape() != [kernel.shape()[0]] {
        return Err(dim_err("conv2d bias", bias.shape(), &kernel.shape()[..1]));
    }
    let (c_in, s) = (x.shape()[0], x.shape()[1]);
    let c_out = kernel.shape()[0];
    let mut data = vec![0.0; c_out * s * s];
    kernels::conv3x3(x.data(), kernel.data(), bias.data(), c_in, c_out, s, &mut data);
    Tensor::new(vec![c_out, s, s], data)
}

/// Max-stabilized temperature softmax; output sums to 1 and is positive.
pub fn softmax_temp(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!(
            "softmax temperature must be > 0, got {tau}"
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Domain("softmax_temp on non-finite logits".into()));
    }
    let mut data = vec![0.0; logits.len()];
    kernels::softmax_temp(logits.data(), tau, &mut data);
    Tensor::new(logits.shape().to_vec(), data)
}

/// Mean smooth-L1 error.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(dim_err("smooth_l1", pred.shape(), target.shape()));
    }
    Ok(kernels::smooth_l1_mean(pred.data(), target.data()))
}

/// Mean binary cross-entropy on logits against strictly binary targets.
pub fn bce_logits(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(dim_err("bce_logits", logits.shape(), target.shape()));
    }
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Domain("bce_logits target must be binary".into()));
    }
    Ok(kernels::bce_logits_mean(logits.data(), target.data()))
}
