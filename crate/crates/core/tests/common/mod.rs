#![allow(dead_code)]

pub mod gradcheck;

use candle_core::{DType, Tensor};
use rave::backend::{load_backend_with_dtype, BackendHandle, MOCK_CLIP, MOCK_LINEAR};
use rave::data::AugmentConfig;
use rave::image::{batch_to_tensor, ImageTensor};
use rave::synthetic::dark_bright_corpora;
use rave::train::{Method, TrainConfig, TrainData};

pub fn mock_linear() -> BackendHandle {
    load_backend_with_dtype(MOCK_LINEAR, "cpu", DType::F32).unwrap()
}

pub fn mock_clip() -> BackendHandle {
    load_backend_with_dtype(MOCK_CLIP, "cpu", DType::F32).unwrap()
}

pub fn mock_f64(id: &str) -> BackendHandle {
    load_backend_with_dtype(id, "cpu", DType::F64).unwrap()
}

/// Training corpora for the toy runs: 20 dark and 20 bright 64×64 images.
pub fn toy_corpora() -> (Vec<ImageTensor>, Vec<ImageTensor>) {
    dark_bright_corpora(20, 64, 11)
}

/// Dark images never seen during training.
pub fn held_out_dark() -> Vec<ImageTensor> {
    dark_bright_corpora(8, 64, 99).0
}

pub fn to_batch(images: &[ImageTensor], handle: &BackendHandle) -> Tensor {
    batch_to_tensor(images, handle.device(), handle.dtype()).unwrap()
}

pub fn mean_pixel(images: &[ImageTensor]) -> f64 {
    images.iter().map(|i| i.mean()).sum::<f64>() / images.len() as f64
}

fn small_net(cfg: &mut TrainConfig) {
    cfg.unet.depth = 2;
    cfg.unet.base_channels = 4;
}

/// 500-iteration RAVE run sized for a single CPU core, default seed and augmentation.
pub fn toy_rave_config() -> TrainConfig {
    let mut cfg = TrainConfig::defaults(Method::Rave);
    small_net(&mut cfg);
    cfg.backend = MOCK_LINEAR.into();
    cfg.total_iters = 500;
    cfg.batch_enhance = 4;
    cfg.train_size = 64;
    cfg.lr_enhance = 1e-3;
    cfg.layers = vec![2];
    cfg.alpha = vec![0.1];
    cfg.unet.init_illumination = 0.9;
    cfg.checkpoint_every = 0;
    cfg
}

/// Stage one plus a single refinement round of the latent-guidance method.
pub fn toy_latent_config() -> TrainConfig {
    let mut cfg = TrainConfig::defaults(Method::ClipLitLatent);
    small_net(&mut cfg);
    cfg.backend = MOCK_LINEAR.into();
    cfg.total_iters = 300;
    cfg.warmup_identity_iters = 50;
    cfg.batch_enhance = 4;
    cfg.batch_guidance = 4;
    cfg.train_size = 64;
    cfg.refine_rounds = 1;
    cfg.lr_enhance = 1e-3;
    cfg.lr_guidance = 0.01;
    cfg.guidance_init_max_steps = 300;
    cfg.layers = vec![2];
    cfg.alpha = vec![0.01];
    cfg.checkpoint_every = 0;
    cfg
}

/// A few steps of every phase on 16×16 crops; for determinism and resume checks.
pub fn tiny_config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::defaults(method);
    small_net(&mut cfg);
    cfg.augment = AugmentConfig::disabled();
    cfg.backend = if method == Method::ClipLit {
        MOCK_CLIP
    } else {
        MOCK_LINEAR
    }
    .into();
    cfg.train_size = 16;
    cfg.batch_enhance = 2;
    cfg.batch_guidance = 2;
    cfg.total_iters = 6;
    cfg.warmup_identity_iters = if method == Method::Rave { 0 } else { 2 };
    cfg.guidance_init_max_steps = 3;
    cfg.refine_rounds = if method == Method::Rave { 0 } else { 1 };
    cfg.lr_enhance = 1e-3;
    cfg.lr_guidance = 1e-2;
    cfg.checkpoint_every = 0;
    cfg.seed = 3;
    cfg
}

pub fn tiny_data(seed: u64) -> TrainData {
    let (dark, bright) = dark_bright_corpora(4, 16, seed);
    TrainData::in_memory(dark, bright, 16).unwrap()
}
