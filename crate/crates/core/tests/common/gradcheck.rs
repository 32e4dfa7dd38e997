//! Central finite differences against autograd, in f64, w.r.t. input pixels.

use candle_core::{Tensor, Var};
use rand::Rng;
use rave::backend::{BackendHandle, LayerActivations, MOCK_LINEAR};
use rave::losses::{clip_guidance_loss, identity_loss, residual_loss};
use rave::ops::seeded_rng;

pub const SIZE: usize = 16;
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Identity,
    Guidance,
    Residual,
}

pub struct Probe {
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// Relative error, guarded so that two near-zero gradients compare equal.
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-10);
        (self.analytic - self.numeric).abs() / scale
    }
}

struct Setup {
    handle: BackendHandle,
    reference: Vec<f64>,
    pos: Tensor,
    neg: Tensor,
    v_res: Tensor,
    target: f64,
}

fn image(rng: &mut impl Rng) -> Vec<f64> {
    (0..3 * SIZE * SIZE)
        .map(|_| rng.random_range(0.1..0.9))
        .collect()
}

fn tensor(handle: &BackendHandle, v: &[f64]) -> Tensor {
    Tensor::from_slice(v, (1, 3, SIZE, SIZE), handle.device()).unwrap()
}

fn unit(rng: &mut impl Rng, n: usize, handle: &BackendHandle) -> (Tensor, Vec<f64>) {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
    (Tensor::from_slice(&v, n, handle.device()).unwrap(), v)
}

fn eval(s: &Setup, obj: Objective, pixels: &Tensor) -> Tensor {
    let h = &s.handle;
    match obj {
        Objective::Identity => {
            let layers = h.default_selection();
            let b = h
                .encode_image_layers(&tensor(h, &s.reference), &layers)
                .unwrap();
            let t = h.encode_image_layers(pixels, &layers).unwrap();
            let alpha: Vec<f64> = (0..layers.len()).map(|i| 0.5 + i as f64).collect();
            let b = LayerActivations {
                stages: b.stages,
                per_layer: b.per_layer.iter().map(|x| x.detach()).collect(),
            };
            identity_loss(&b, &t, &alpha).unwrap()
        }
        Objective::Guidance => {
            clip_guidance_loss(&h.encode_image(pixels).unwrap(), &s.pos, &s.neg).unwrap()
        }
        Objective::Residual => {
            residual_loss(&h.encode_image(pixels).unwrap(), &s.v_res, s.target, true).unwrap()
        }
    }
    .sum_all()
    .unwrap()
}

fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// `probes` random pixel coordinates of one random image, compared by central differences.
pub fn check(obj: Objective, probes: usize, seed: u64) -> Vec<Probe> {
    let handle =
        rave::backend::load_backend_with_dtype(MOCK_LINEAR, "cpu", candle_core::DType::F64)
            .unwrap();
    let mut rng = seeded_rng(seed);
    let x = image(&mut rng);
    let reference = image(&mut rng);
    let d = handle.embed_dim();
    let (pos, _) = unit(&mut rng, d, &handle);
    let (neg, _) = unit(&mut rng, d, &handle);
    let (v_res, vr) = unit(&mut rng, d, &handle);
    let (_, vw) = unit(&mut rng, d, &handle);
    let target = vw.iter().zip(&vr).map(|(a, b)| a * b).sum();
    let s = Setup {
        handle,
        reference,
        pos,
        neg,
        v_res,
        target,
    };

    let var = Var::from_tensor(&tensor(&s.handle, &x)).unwrap();
    let loss = eval(&s, obj, var.as_tensor());
    let grads = loss.backward().unwrap();
    let g: Vec<f64> = grads
        .get(var.as_tensor())
        .expect("pixels receive a gradient")
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();

    (0..probes)
        .map(|_| {
            let i = rng.random_range(0..x.len());
            let mut plus = x.clone();
            plus[i] += FD_STEP;
            let mut minus = x.clone();
            minus[i] -= FD_STEP;
            let fp = value(&eval(&s, obj, &tensor(&s.handle, &plus)));
            let fm = value(&eval(&s, obj, &tensor(&s.handle, &minus)));
            Probe {
                analytic: g[i],
                numeric: (fp - fm) / (2.0 * FD_STEP),
            }
        })
        .collect()
}

pub fn max_rel_err(probes: &[Probe]) -> f64 {
    probes.iter().map(Probe::rel_err).fold(0.0, f64::max)
}
