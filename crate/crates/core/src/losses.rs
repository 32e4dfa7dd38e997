//! Training objectives. Every function is a pure map from tensors to
//! tensors and stays on the autograd tape. Batched inputs produce one value
//! per image; trainers average them.

use candle_core::{Tensor, D};

use crate::backend::LayerActivations;
use crate::error::{Error, Result};
use crate::ops;

/// Probabilities are clamped into `[PROB_EPS, 1 − PROB_EPS]` before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Keeps `sqrt` differentiable when a layer difference is exactly zero.
const NORM_EPS: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
}

impl Margins {
    pub const DEFAULT: Margins = Margins {
        m0: 0.9,
        m1: 0.2,
        m2: 0.2,
    };

    pub fn new(m0: f64, m1: f64, m2: f64) -> Result<Self> {
        let m = Self { m0, m1, m2 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m0", self.m0), ("m1", self.m1), ("m2", self.m2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "margin {name} = {v} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

impl Default for Margins {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub omega: f64,
    /// One weight per configured layer.
    pub alpha: Vec<f64>,
    pub margins: Margins,
    /// Project `f_norm(Φ(I))` rather than the raw embedding in the residual loss.
    pub normalize_image_embedding: bool,
}

impl LossConfig {
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if !(self.omega >= 0.0) {
            return Err(Error::Config(format!(
                "omega must be ≥ 0, got {}",
                self.omega
            )));
        }
        if self.alpha.len() != layer_count {
            return Err(Error::Config(format!(
                "{} layer weights for {layer_count} layers",
                self.alpha.len()
            )));
        }
        self.margins.validate()
    }
}

/// `Σ_l α_l ‖Φ^l(I_b) − Φ^l(I_t)‖₂` per image, `(B)`.
pub fn identity_loss(
    acts_b: &LayerActivations,
    acts_t: &LayerActivations,
    alpha: &[f64],
) -> Result<Tensor> {
    if acts_b.len() != acts_t.len() || acts_b.len() != alpha.len() {
        return Err(Error::Shape(format!(
            "identity loss over {} / {} layers with {} weights",
            acts_b.len(),
            acts_t.len(),
            alpha.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for ((b, t), &a) in acts_b.per_layer.iter().zip(&acts_t.per_layer).zip(alpha) {
        if b.dims() != t.dims() {
            return Err(Error::Shape(format!(
                "layer shapes differ: {:?} vs {:?}",
                b.dims(),
                t.dims()
            )));
        }
        let diff = (b.flatten_from(1)? - t.flatten_from(1)?)?;
        let norm = (diff.sqr()?.sum(1)? + NORM_EPS)?.sqrt()?;
        let term = (norm * a)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Shape("no layers selected".into()))
}

/// `e^{cos_pos} / (e^{cos_pos} + e^{cos_neg})`, elementwise.
pub fn guidance_softmax(cos_pos: &Tensor, cos_neg: &Tensor) -> Result<Tensor> {
    let ep = cos_pos.exp()?;
    let en = cos_neg.exp()?;
    Ok((&ep / (&ep + en)?)?)
}

/// Binary cross-entropy `−(y log p + (1−y) log(1−p))`, elementwise.
pub fn initial_classification_loss(pred: &Tensor, y: &Tensor) -> Result<Tensor> {
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = (y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?)
}

fn check_guidance(v: &Tensor, side: &str) -> Result<()> {
    let n = ops::to_f64_scalar(&v.sqr()?.sum_all()?)?;
    if !(n > 0.0) {
        return Err(Error::Degenerate(format!(
            "degenerate guidance: {side} vector has zero norm"
        )));
    }
    Ok(())
}

/// Softmax weight of the negative side,
/// `e^{cos(e, neg)} / (e^{cos(e, neg)} + e^{cos(e, pos)})`, per image.
pub fn negative_similarity_score(image_emb: &Tensor, pos: &Tensor, neg: &Tensor) -> Result<Tensor> {
    check_guidance(pos, "positive")?;
    check_guidance(neg, "negative")?;
    let cos_pos = ops::cosine_rows(image_emb, pos)?;
    let cos_neg = ops::cosine_rows(image_emb, neg)?;
    guidance_softmax(&cos_neg, &cos_pos)
}

/// The enhancement-side guidance loss; identical in form to the score `S(I)`.
pub fn clip_guidance_loss(image_emb: &Tensor, pos: &Tensor, neg: &Tensor) -> Result<Tensor> {
    negative_similarity_score(image_emb, pos, neg)
}

/// Margin ranking loss over scores of well-lit, backlit, newly enhanced and
/// previously enhanced images, elementwise.
pub fn prompt_refinement_loss(
    s_w: &Tensor,
    s_b: &Tensor,
    s_t: &Tensor,
    s_prev: &Tensor,
    margins: Margins,
) -> Result<Tensor> {
    let hinge = |a: &Tensor, b: &Tensor, m: f64| -> Result<Tensor> { Ok(((a - b)? + m)?.relu()?) };
    let t1 = hinge(s_w, s_b, margins.m0)?;
    let t2 = hinge(s_prev, s_b, margins.m0)?;
    let t3 = hinge(s_w, s_t, margins.m1)?;
    let t4 = hinge(s_t, s_prev, margins.m2)?;
    Ok((((t1 + t2)? + t3)? + t4)?)
}

/// `(e · v_res − v_well · v_res)²` per image, with `e = f_norm(Φ(I))` when
/// `normalize` is set and the raw embedding otherwise.
pub fn residual_loss(
    image_emb: &Tensor,
    v_residual: &Tensor,
    target: f64,
    normalize: bool,
) -> Result<Tensor> {
    let e = if normalize {
        ops::l2_normalize(image_emb)?
    } else {
        image_emb.clone()
    };
    let proj = e.broadcast_mul(&v_residual.unsqueeze(0)?)?.sum(D::Minus1)?;
    Ok((proj - target)?.sqr()?)
}

/// `L_clip + ω·L_identity`.
pub fn enhance_loss(clip: &Tensor, identity: &Tensor, omega: f64) -> Result<Tensor> {
    Ok((clip + (identity * omega)?)?)
}

/// `L_identity + ω·L_residual`.
pub fn rave_loss(identity: &Tensor, residual: &Tensor, omega: f64) -> Result<Tensor> {
    Ok((identity + (residual * omega)?)?)
}
