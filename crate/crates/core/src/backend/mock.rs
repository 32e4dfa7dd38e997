//! Analytic stand-in encoders for tests and toy runs.
//!
//! Image tower: adaptive average pooling to `4×4×3`, flattened channel-major,
//! then a fixed seeded affine map into `R^8`:
//!
//! ```text
//! Φ_image(I) = W · vec(pool₄(I)) + b
//! ```
//!
//! Exposed stages are `pool₈(I)` (0), `pool₄(I)` (1) and `Φ_image(I)` (2).
//!
//! Text tower (`mock-clip-8` only): token width 8 and
//! `Φ_text(T) = W_t · mean_rows(T)`, with a fixed vocabulary of words whose
//! embeddings are seeded standard normals.

use candle_core::{DType, Device, Tensor};

use super::{EmbeddingBackend, Vocabulary};
use crate::error::{Error, Result};
use crate::ops;
use crate::resample::{resample, Kernel};

pub const MOCK_LINEAR: &str = "mock-linear-8";
pub const MOCK_CLIP: &str = "mock-clip-8";

const EMBED_DIM: usize = 8;
const POOLED: usize = 4 * 4 * 3;
const TOKEN_WIDTH: usize = 8;
const MAX_TOKENS: usize = 32;
const IMAGE_SEED: u64 = 0x6d6f_636b_0001;
const TEXT_SEED: u64 = 0x6d6f_636b_0002;

const MOCK_WORDS: &[&str] = &[
    "afternoon",
    "backlit",
    "beach",
    "bright",
    "busan",
    "candlelight",
    "city",
    "clear",
    "cloud",
    "dark",
    "darkness",
    "daylight",
    "dim",
    "dusk",
    "evening",
    "forest",
    "glow",
    "gloomy",
    "light",
    "lit",
    "moonlight",
    "morning",
    "night",
    "nighttime",
    "noon",
    "photo",
    "portrait",
    "radiant",
    "shade",
    "shadow",
    "silhouette",
    "sky",
    "street",
    "sun",
    "sunny",
    "sunset",
    "vivid",
    "white",
    "wildlife",
    "window",
];

#[derive(Debug)]
struct TextTower {
    projection: Tensor,
    vocab: Vocabulary,
}

#[derive(Debug)]
pub struct MockBackend {
    id: String,
    device: Device,
    dtype: DType,
    /// `(D, 48)`.
    weight: Tensor,
    /// `(D)`.
    bias: Tensor,
    text: Option<TextTower>,
    checksum: String,
}

impl MockBackend {
    pub fn new(model_id: &str, device: &Device, dtype: DType) -> Result<Self> {
        let with_text = match model_id {
            MOCK_LINEAR => false,
            MOCK_CLIP => true,
            other => return Err(Error::UnknownModel(other.to_string())),
        };
        let mut rng = ops::seeded_rng(IMAGE_SEED);
        let weight = ops::normal_tensor(
            &mut rng,
            &[EMBED_DIM, POOLED],
            1.0 / (POOLED as f64).sqrt(),
            device,
            dtype,
        )?;
        let bias = ops::normal_tensor(&mut rng, &[EMBED_DIM], 0.1, device, dtype)?;

        let text = if with_text {
            let mut rng = ops::seeded_rng(TEXT_SEED);
            let projection = ops::normal_tensor(
                &mut rng,
                &[EMBED_DIM, TOKEN_WIDTH],
                1.0 / (TOKEN_WIDTH as f64).sqrt(),
                device,
                dtype,
            )?;
            let table = ops::normal_tensor(
                &mut rng,
                &[MOCK_WORDS.len(), TOKEN_WIDTH],
                1.0,
                device,
                dtype,
            )?;
            let vocab = Vocabulary::new(MOCK_WORDS.iter().map(|w| w.to_string()).collect(), table)?;
            Some(TextTower { projection, vocab })
        } else {
            None
        };

        let mut named: Vec<(&str, &Tensor)> =
            vec![("image.weight", &weight), ("image.bias", &bias)];
        if let Some(t) = &text {
            named.push(("text.projection", &t.projection));
            named.push(("text.vocab", t.vocab.embeddings()));
        }
        let checksum = ops::tensors_checksum(named)?;

        Ok(Self {
            id: model_id.to_string(),
            device: device.clone(),
            dtype,
            weight,
            bias,
            text,
            checksum,
        })
    }

    /// `(D, 48)` image projection, for closed-form oracles.
    pub fn image_weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn image_bias(&self) -> &Tensor {
        &self.bias
    }

    /// `(D, E_tok)` text projection, when the text tower exists.
    pub fn text_projection(&self) -> Option<&Tensor> {
        self.text.as_ref().map(|t| &t.projection)
    }

    fn embed_pooled(&self, pooled4: &Tensor) -> Result<Tensor> {
        let b = pooled4.dim(0)?;
        let flat = pooled4.reshape((b, POOLED))?;
        ops::linear(&flat, &self.weight, Some(&self.bias))
    }
}

impl EmbeddingBackend for MockBackend {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn embed_dim(&self) -> usize {
        EMBED_DIM
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn weight_checksum(&self) -> &str {
        &self.checksum
    }

    fn stage_count(&self) -> usize {
        3
    }

    fn default_layers(&self) -> Vec<usize> {
        vec![0, 1, 2]
    }

    fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        let pooled = resample(pixels, Kernel::Area, 4, 4)?;
        self.embed_pooled(&pooled)
    }

    fn encode_image_stages(&self, pixels: &Tensor, stages: &[usize]) -> Result<Vec<Tensor>> {
        let pooled4 = resample(pixels, Kernel::Area, 4, 4)?;
        stages
            .iter()
            .map(|&s| match s {
                0 => resample(pixels, Kernel::Area, 8, 8),
                1 => Ok(pooled4.clone()),
                2 => self.embed_pooled(&pooled4),
                other => Err(Error::Config(format!("mock backend has no stage {other}"))),
            })
            .collect()
    }

    fn has_text_tower(&self) -> bool {
        self.text.is_some()
    }

    fn token_width(&self) -> Option<usize> {
        self.text.as_ref().map(|_| TOKEN_WIDTH)
    }

    fn max_tokens(&self) -> Option<usize> {
        self.text.as_ref().map(|_| MAX_TOKENS)
    }

    fn encode_text(&self, token_embeddings: &Tensor) -> Result<Tensor> {
        let text = self
            .text
            .as_ref()
            .ok_or_else(|| Error::NoTextTower(self.id.clone()))?;
        let pooled = token_embeddings.mean(1)?;
        ops::linear(&pooled, &text.projection, None)
    }

    fn vocabulary(&self) -> Result<Vocabulary> {
        self.text
            .as_ref()
            .map(|t| t.vocab.clone())
            .ok_or_else(|| Error::NoTextTower(self.id.clone()))
    }
}
