//! Trainable building blocks shared by the three streams: a masked-input
//! MLP backbone, a CNN upsampling decoder, the loss library and Adam.

mod adam;
mod cnn;
pub mod gradcheck;
mod loss;
mod masking;
mod mlp;
mod params;

pub use adam::{Adam, AdamConfig};
pub use cnn::{CnnCache, CnnDecoder, CnnDecoderConfig};
pub use loss::{
    huber_loss, huber_loss_grad, info_nce_loss, info_nce_loss_grad, info_nce_loss_grad_pred,
    mse_loss, mse_loss_grad, InfoNceGrad, DEFAULT_HUBER_DELTA, DEFAULT_NCE_TEMPERATURE,
};
pub use masking::{apply_input_mask, MaskingPolicy};
pub use mlp::{Activation, Mlp, MlpBackboneConfig, MlpCache};
pub use params::{Param, ParamStore};

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
