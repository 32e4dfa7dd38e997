//! Learnable positive/negative guidance: token-space prompts projected through
//! the text encoder, or raw vectors in the shared latent space.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, Var};

use crate::backend::BackendHandle;
use crate::error::{Error, Result};
use crate::losses::{self, Margins};
use crate::ops;
use crate::optim::{Adam, ParamSet};

pub const DEFAULT_TOKEN_COUNT: usize = 16;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceKind {
    TokenSpace,
    LatentSpace,
}

impl fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceKind::TokenSpace => "token_space",
            GuidanceKind::LatentSpace => "latent_space",
        })
    }
}

impl FromStr for GuidanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_space" | "token-space" => Ok(GuidanceKind::TokenSpace),
            "latent_space" | "latent-space" => Ok(GuidanceKind::LatentSpace),
            other => Err(Error::Config(format!("unknown guidance kind `{other}`"))),
        }
    }
}

#[derive(Debug)]
pub struct GuidancePair {
    kind: GuidanceKind,
    positive: Var,
    negative: Var,
    params: ParamSet,
}

pub const POSITIVE_PARAM: &str = "guidance.positive";
pub const NEGATIVE_PARAM: &str = "guidance.negative";

impl GuidancePair {
    fn from_vars(kind: GuidanceKind, positive: Var, negative: Var) -> Self {
        let mut params = ParamSet::new();
        params.push(POSITIVE_PARAM, positive.clone());
        params.push(NEGATIVE_PARAM, negative.clone());
        Self {
            kind,
            positive,
            negative,
            params,
        }
    }

    /// Builds a pair from explicit values; both must share a shape that fits `kind`.
    pub fn from_tensors(kind: GuidanceKind, positive: &Tensor, negative: &Tensor) -> Result<Self> {
        if positive.dims() != negative.dims() {
            return Err(Error::Shape(format!(
                "positive {:?} and negative {:?} guidance differ in shape",
                positive.dims(),
                negative.dims()
            )));
        }
        let want = match kind {
            GuidanceKind::TokenSpace => 2,
            GuidanceKind::LatentSpace => 1,
        };
        if positive.rank() != want {
            return Err(Error::Shape(format!(
                "{kind} guidance must have rank {want}"
            )));
        }
        Ok(Self::from_vars(
            kind,
            Var::from_tensor(&positive.detach())?,
            Var::from_tensor(&negative.detach())?,
        ))
    }

    pub fn kind(&self) -> GuidanceKind {
        self.kind
    }

    pub fn token_count(&self) -> Option<usize> {
        match self.kind {
            GuidanceKind::TokenSpace => Some(self.positive.dims()[0]),
            GuidanceKind::LatentSpace => None,
        }
    }

    pub fn positive(&self) -> &Tensor {
        self.positive.as_tensor()
    }

    pub fn negative(&self) -> &Tensor {
        self.negative.as_tensor()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    /// Positive and negative `D`-vectors, still attached to the guidance parameters.
    pub fn project(&self, handle: &BackendHandle) -> Result<(Tensor, Tensor)> {
        match self.kind {
            GuidanceKind::LatentSpace => {
                let d = handle.embed_dim();
                if self.positive.dims() != [d] {
                    return Err(Error::Shape(format!(
                        "latent guidance has shape {:?}, backend embeds into {d}",
                        self.positive.dims()
                    )));
                }
                Ok((
                    self.positive.as_tensor().clone(),
                    self.negative.as_tensor().clone(),
                ))
            }
            GuidanceKind::TokenSpace => {
                let both =
                    Tensor::stack(&[self.positive.as_tensor(), self.negative.as_tensor()], 0)?;
                let out = handle.encode_text(&both)?;
                Ok((out.get(0)?, out.get(1)?))
            }
        }
    }

    /// Probability of the well-lit class per image, `(B)`.
    pub fn classify(&self, handle: &BackendHandle, image_emb: &Tensor) -> Result<Tensor> {
        let (pos, neg) = self.project(handle)?;
        losses::guidance_softmax(
            &ops::cosine_rows(image_emb, &pos)?,
            &ops::cosine_rows(image_emb, &neg)?,
        )
    }

    /// Negative similarity score `S(I)` per image, `(B)`.
    pub fn score(&self, handle: &BackendHandle, image_emb: &Tensor) -> Result<Tensor> {
        let (pos, neg) = self.project(handle)?;
        losses::negative_similarity_score(image_emb, &pos, &neg)
    }
}

/// Seeded `N(0, 0.02²)` initialization. `token_count` applies to token space only.
pub fn init_guidance(
    kind: GuidanceKind,
    seed: u64,
    handle: &BackendHandle,
    token_count: usize,
) -> Result<GuidancePair> {
    let mut rng = ops::seeded_rng(ops::derive_seed(&[0x9d1, seed]));
    let shape = match kind {
        GuidanceKind::LatentSpace => vec![handle.embed_dim()],
        GuidanceKind::TokenSpace => {
            if !handle.has_text_tower() {
                return Err(Error::NoTextTower(handle.model_id().to_string()));
            }
            if token_count == 0 {
                return Err(Error::Config("token_count must be at least 1".into()));
            }
            if let Some(max) = handle.max_tokens() {
                if token_count > max {
                    return Err(Error::Config(format!(
                        "token_count {token_count} exceeds the backend's {max} learnable positions"
                    )));
                }
            }
            vec![token_count, handle.token_width().unwrap_or(0)]
        }
    };
    let pos = ops::normal_tensor(&mut rng, &shape, INIT_STD, handle.device(), handle.dtype())?;
    let neg = ops::normal_tensor(&mut rng, &shape, INIT_STD, handle.device(), handle.dtype())?;
    Ok(GuidancePair::from_vars(
        kind,
        Var::from_tensor(&pos)?,
        Var::from_tensor(&neg)?,
    ))
}

/// Class label for the initial classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lighting {
    Backlit,
    WellLit,
}

impl Lighting {
    pub fn label(self) -> f64 {
        match self {
            Lighting::Backlit => 0.0,
            Lighting::WellLit => 1.0,
        }
    }
}

/// Mean classification loss over precomputed image embeddings, attached to the guidance.
pub fn init_loss(
    pair: &GuidancePair,
    handle: &BackendHandle,
    image_emb: &Tensor,
    labels: &[Lighting],
) -> Result<Tensor> {
    let b = image_emb.dim(0)?;
    if b == 0 || labels.is_empty() {
        return Err(Error::InvalidInput("empty guidance batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{b} embeddings but {} labels",
            labels.len()
        )));
    }
    let y: Vec<f64> = labels.iter().map(|l| l.label()).collect();
    let y = Tensor::new(y, image_emb.device())?.to_dtype(image_emb.dtype())?;
    let pred = pair.classify(handle, image_emb)?;
    Ok(losses::initial_classification_loss(&pred, &y)?.mean_all()?)
}

/// Fraction of images whose predicted class (`ŷ > 0.5` means well-lit) matches the label.
pub fn classification_accuracy(
    pair: &GuidancePair,
    handle: &BackendHandle,
    image_emb: &Tensor,
    labels: &[Lighting],
) -> Result<f64> {
    let pred = ops::to_f64_vec(&pair.classify(handle, &image_emb.detach())?)?;
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::Shape("prediction/label count mismatch".into()));
    }
    let hits = pred
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p > 0.5) == (**l == Lighting::WellLit))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// One Adam step on the classification loss. Returns the loss before the step.
pub fn guidance_init_step(
    pair: &GuidancePair,
    images: &Tensor,
    labels: &[Lighting],
    handle: &BackendHandle,
    opt: &mut Adam,
) -> Result<f64> {
    let emb = handle.encode_image(images)?.detach();
    guidance_init_step_embedded(pair, &emb, labels, handle, opt)
}

/// As [`guidance_init_step`] with the image embeddings already computed.
pub fn guidance_init_step_embedded(
    pair: &GuidancePair,
    image_emb: &Tensor,
    labels: &[Lighting],
    handle: &BackendHandle,
    opt: &mut Adam,
) -> Result<f64> {
    let loss = init_loss(pair, handle, &image_emb.detach(), labels)?;
    let value = ops::to_f64_scalar(&loss)?;
    let grads = loss.backward()?;
    opt.step(pair.params(), &grads)?;
    Ok(value)
}

/// Image embeddings for the four operands of the refinement loss, each `(B, D)`.
#[derive(Debug, Clone)]
pub struct RefinementEmbeddings {
    pub well_lit: Tensor,
    pub backlit: Tensor,
    pub enhanced: Tensor,
    pub previous: Tensor,
}

impl RefinementEmbeddings {
    pub fn encode(handle: &BackendHandle, batch: &RefinementBatch) -> Result<Self> {
        let enc = |t: &Tensor| -> Result<Tensor> { Ok(handle.encode_image(t)?.detach()) };
        Ok(Self {
            well_lit: enc(&batch.well_lit)?,
            backlit: enc(&batch.backlit)?,
            enhanced: enc(&batch.enhanced)?,
            previous: enc(&batch.previous)?,
        })
    }
}

/// Pixels `(I_w, I_b, I_t, I_prev)`, each `(B, 3, H, W)`, none attached to the enhancement weights.
#[derive(Debug, Clone)]
pub struct RefinementBatch {
    pub well_lit: Tensor,
    pub backlit: Tensor,
    pub enhanced: Tensor,
    pub previous: Tensor,
}

/// Mean margin ranking loss, attached to the guidance.
pub fn refine_loss(
    pair: &GuidancePair,
    handle: &BackendHandle,
    emb: &RefinementEmbeddings,
    margins: Margins,
) -> Result<Tensor> {
    margins.validate()?;
    let b = emb.backlit.dim(0)?;
    for t in [&emb.well_lit, &emb.enhanced, &emb.previous] {
        if t.dim(0)? != b {
            return Err(Error::Shape(
                "refinement groups differ in batch size".into(),
            ));
        }
    }
    let (pos, neg) = pair.project(handle)?;
    let s = |e: &Tensor| losses::negative_similarity_score(e, &pos, &neg);
    let loss = losses::prompt_refinement_loss(
        &s(&emb.well_lit)?,
        &s(&emb.backlit)?,
        &s(&emb.enhanced)?,
        &s(&emb.previous)?,
        margins,
    )?;
    Ok(loss.mean_all()?)
}

/// One Adam step on the margin ranking loss. Returns the loss before the step.
/// A zero loss leaves the pair untouched.
pub fn guidance_refine_step(
    pair: &GuidancePair,
    emb: &RefinementEmbeddings,
    handle: &BackendHandle,
    margins: Margins,
    opt: &mut Adam,
) -> Result<f64> {
    let loss = refine_loss(pair, handle, emb, margins)?;
    let value = ops::to_f64_scalar(&loss)?;
    if value > 0.0 {
        let grads = loss.backward()?;
        opt.step(pair.params(), &grads)?;
    }
    Ok(value)
}
