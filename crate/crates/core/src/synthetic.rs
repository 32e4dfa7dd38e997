//! Procedural image corpora for smoke runs and tests.

use rand::Rng;

use crate::image::ImageTensor;
use crate::ops;

/// Smooth random texture whose mean intensity is roughly `level`.
pub fn textured_image(height: usize, width: usize, level: f32, seed: u64) -> ImageTensor {
    let mut rng = ops::seeded_rng(ops::derive_seed(&[0x7e87, seed]));
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..3.0f32),
                rng.random_range(0.5..3.0f32),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.02..0.08f32),
            )
        })
        .collect();
    let tint: [f32; 3] = [
        rng.random_range(0.85..1.15),
        rng.random_range(0.85..1.15),
        rng.random_range(0.85..1.15),
    ];
    ImageTensor::from_fn(height, width, |y, x| {
        let u = x as f32 / width as f32 * std::f32::consts::TAU;
        let v = y as f32 / height as f32 * std::f32::consts::TAU;
        let t: f32 = waves
            .iter()
            .map(|&(fx, fy, ph, a)| a * (fx * u + fy * v + ph).sin())
            .sum();
        let base = level * (1.0 + t);
        [
            (base * tint[0]).clamp(0.0, 1.0),
            (base * tint[1]).clamp(0.0, 1.0),
            (base * tint[2]).clamp(0.0, 1.0),
        ]
    })
}

/// `n` dark images (levels in `[0.12, 0.22]`) and `n` bright ones (`[0.55, 0.7]`),
/// drawn independently.
pub fn dark_bright_corpora(
    n: usize,
    size: usize,
    seed: u64,
) -> (Vec<ImageTensor>, Vec<ImageTensor>) {
    let mut rng = ops::seeded_rng(ops::derive_seed(&[0xc0de, seed]));
    let dark = (0..n)
        .map(|i| {
            let level = rng.random_range(0.12..0.22f32);
            textured_image(size, size, level, ops::derive_seed(&[seed, 1, i as u64]))
        })
        .collect();
    let bright = (0..n)
        .map(|i| {
            let level = rng.random_range(0.55..0.7f32);
            textured_image(size, size, level, ops::derive_seed(&[seed, 2, i as u64]))
        })
        .collect();
    (dark, bright)
}

/// Same-content pairs: each backlit image is its well-lit partner scaled by `dim`.
pub fn paired_corpora(
    n: usize,
    size: usize,
    dim: f32,
    seed: u64,
) -> (Vec<ImageTensor>, Vec<ImageTensor>) {
    let well: Vec<ImageTensor> = (0..n)
        .map(|i| textured_image(size, size, 0.6, ops::derive_seed(&[seed, 3, i as u64])))
        .collect();
    let back = well
        .iter()
        .map(|w| {
            let data = w.data().iter().map(|v| v * dim).collect();
            ImageTensor::new(w.height(), w.width(), data).expect("same shape")
        })
        .collect();
    (back, well)
}
