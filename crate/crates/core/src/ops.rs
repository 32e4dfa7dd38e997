//! Small differentiable building blocks written in terms of primitive tensor
//! ops (so autograd covers all of them), plus seeded sampling helpers.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// `(1 + tanh(x/2)) / 2`; finite gradient for any finite `x`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Row-wise `v / ‖v‖₂` over the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Cosine similarity between rows of `a` (`B×D`) and a single vector `v` (`D`), giving `B`.
pub fn cosine_rows(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    let a = l2_normalize(a)?;
    let v = l2_normalize(&v.unsqueeze(0)?)?;
    Ok(a.broadcast_mul(&v)?.sum(D::Minus1)?)
}

/// Softmax over the last dimension. The subtracted max is detached; it does
/// not change the value and keeps the backward graph simple.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

pub fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    Ok((x * sigmoid(&(x * 1.702)?)?)?)
}

/// `x · Wᵀ + b` for `x` of any rank ≥ 2.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&weight.t()?)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes several words into one seed (splitmix64 finalizer per word).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn normal_tensor(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::from_vec(normal_vec(rng, n, std), shape, device)?.to_dtype(dtype)?)
}

/// Flattens any tensor into `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn to_f64_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// SHA-256 over named tensors (name, shape, raw little-endian values) in the given order.
pub fn tensors_checksum<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in items {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F64 => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
