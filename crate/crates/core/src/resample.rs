//! Separable linear resampling expressed as matrix products, so that every
//! resize used inside a differentiable path carries gradients for free.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Adaptive average pooling weights, `out × in`. Bin `i` covers
/// `[floor(i·in/out), ceil((i+1)·in/out))`.
pub fn area_weights(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    for i in 0..output {
        let start = (i * input) / output;
        let end = ((i + 1) * input).div_ceil(output).max(start + 1);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[i * input + j] = w;
        }
    }
    m
}

/// Bilinear interpolation weights with half-pixel centers, `out × in`.
pub fn bilinear_weights(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[i * input + lo] += 1.0 - frac;
        m[i * input + hi] += frac;
    }
    m
}

/// A precomputed separable resampler from `(in_h, in_w)` to `(out_h, out_w)`.
#[derive(Debug, Clone)]
pub struct Resampler {
    rows: Tensor,
    cols_t: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Area,
    Bilinear,
}

impl Resampler {
    pub fn new(
        kernel: Kernel,
        input: (usize, usize),
        output: (usize, usize),
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        let weights = match kernel {
            Kernel::Area => area_weights,
            Kernel::Bilinear => bilinear_weights,
        };
        let rows = Tensor::from_vec(weights(input.0, output.0), (output.0, input.0), device)?
            .to_dtype(dtype)?;
        let cols_t = Tensor::from_vec(weights(input.1, output.1), (output.1, input.1), device)?
            .t()?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(Self { rows, cols_t })
    }

    /// `(B, C, H, W)` → `(B, C, out_h, out_w)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.broadcast_matmul(&self.cols_t)?;
        Ok(self.rows.broadcast_matmul(&x)?)
    }
}

/// One-shot resample of a `(B, C, H, W)` tensor.
pub fn resample(x: &Tensor, kernel: Kernel, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    Resampler::new(kernel, (h, w), (out_h, out_w), x.device(), x.dtype())?.apply(x)
}
