//! Frozen vision-language encoders behind one interface.
//!
//! A [`BackendHandle`] exposes image embeddings, intermediate image-tower
//! activations, text-side projection of token embeddings and the tokenizer
//! vocabulary. All image entry points take raw `[0, 1]` pixels; resizing and
//! channel normalization happen inside each adapter. Every output stays on
//! the autograd tape, so losses built on top of it can be differentiated back
//! to the input pixels (or to learnable token embeddings).
//!
//! Registered model ids:
//! - `mock-linear-8`: image-only analytic test encoder, `D = 8`.
//! - `mock-clip-8`: the same image tower plus a linear text tower and a small vocabulary.
//! - `vit-b-32`: CLIP ViT-B/32 weights found under `$RAVE_VIT_B32_DIR`
//!   (default `~/.cache/rave/vit-b-32`).
//! - any directory path holding `model.safetensors` + `vocab.json` (+ optional `config.json`).

mod clip;
mod mock;

use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

pub use clip::{ClipBackend, ClipConfig};
pub use mock::{MockBackend, MOCK_CLIP, MOCK_LINEAR};

use crate::error::{Error, Result};
use crate::ops;

/// Tokenizer entries and the matching rows of the token-embedding table.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    embeddings: Tensor,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, embeddings: Tensor) -> Result<Self> {
        let (rows, _) = embeddings.dims2()?;
        if rows != tokens.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {rows} embedding rows",
                tokens.len()
            )));
        }
        Ok(Self { tokens, embeddings })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `(V, E_tok)` table.
    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// `(1, E_tok)` embedding of token `i`.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        Ok(self.embeddings.narrow(0, i, 1)?)
    }

    /// Looks a token up by its exact string, falling back to the
    /// end-of-word form used by BPE vocabularies (`word</w>`).
    pub fn index_of(&self, token: &str) -> Option<usize> {
        let word = format!("{token}</w>");
        self.tokens
            .iter()
            .position(|t| t == &word)
            .or_else(|| self.tokens.iter().position(|t| t == token))
    }

    /// `(token, embedding row)` pairs in vocabulary order.
    pub fn entries(&self) -> Result<Vec<(String, Vec<f32>)>> {
        let rows = self.embeddings.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        Ok(self.tokens.iter().cloned().zip(rows).collect())
    }
}

/// Display form of a vocabulary token (`word</w>` → `word`).
pub fn display_token(token: &str) -> &str {
    token.strip_suffix("</w>").unwrap_or(token)
}

/// A frozen encoder. Implementations never mutate their weights.
pub trait EmbeddingBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn device(&self) -> &Device;
    fn dtype(&self) -> DType;
    /// SHA-256 over the encoder weights.
    fn weight_checksum(&self) -> &str;

    /// Number of image-tower stages exposable as layer activations; the last
    /// stage is the final embedding.
    fn stage_count(&self) -> usize;
    /// Stage indices used for the identity loss when none are configured.
    fn default_layers(&self) -> Vec<usize>;

    /// `(B, 3, H, W)` pixels in `[0, 1]` → `(B, D)` unnormalized embeddings.
    fn encode_image(&self, pixels: &Tensor) -> Result<Tensor>;
    /// Activations of the requested stages, each with a leading batch dimension.
    fn encode_image_stages(&self, pixels: &Tensor, stages: &[usize]) -> Result<Vec<Tensor>>;

    fn has_text_tower(&self) -> bool;
    fn token_width(&self) -> Option<usize>;
    /// Maximum number of learnable tokens one text sequence can carry.
    fn max_tokens(&self) -> Option<usize>;
    /// `(B, N, E_tok)` token embeddings → `(B, D)` text embeddings.
    fn encode_text(&self, token_embeddings: &Tensor) -> Result<Tensor>;
    fn vocabulary(&self) -> Result<Vocabulary>;
}

/// Ordered stage indices standing in for the `Φ^l` layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSelection(pub Vec<usize>);

impl LayerSelection {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-layer image activations, in selection order.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub stages: Vec<usize>,
    pub per_layer: Vec<Tensor>,
}

impl LayerActivations {
    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.per_layer.iter().map(|t| t.dims().to_vec()).collect()
    }
}

/// Shared, cheaply cloneable handle to a loaded backend.
#[derive(Clone)]
pub struct BackendHandle {
    inner: Arc<dyn EmbeddingBackend>,
}

impl std::fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendHandle")
            .field("model_id", &self.inner.model_id())
            .field("embed_dim", &self.inner.embed_dim())
            .finish()
    }
}

impl Deref for BackendHandle {
    type Target = dyn EmbeddingBackend;

    fn deref(&self) -> &Self::Target {
        &*self.inner
    }
}

pub fn parse_device(device: &str) -> Result<Device> {
    match device {
        "cpu" => Ok(Device::Cpu),
        other => Err(Error::Config(format!(
            "unsupported device `{other}` (only `cpu` is built in)"
        ))),
    }
}

/// Loads a backend in `f32`.
pub fn load_backend(model_id: &str, device: &str) -> Result<BackendHandle> {
    load_backend_with_dtype(model_id, device, DType::F32)
}

pub fn load_backend_with_dtype(
    model_id: &str,
    device: &str,
    dtype: DType,
) -> Result<BackendHandle> {
    let device = parse_device(device)?;
    let backend: Arc<dyn EmbeddingBackend> = match model_id {
        MOCK_LINEAR | MOCK_CLIP => Arc::new(MockBackend::new(model_id, &device, dtype)?),
        "vit-b-32" => Arc::new(ClipBackend::load(
            "vit-b-32",
            &vit_b_32_dir(),
            &device,
            dtype,
        )?),
        other => {
            let path = Path::new(other);
            if path.join("model.safetensors").is_file() {
                Arc::new(ClipBackend::load(other, path, &device, dtype)?)
            } else {
                return Err(Error::UnknownModel(other.to_string()));
            }
        }
    };
    Ok(BackendHandle { inner: backend })
}

fn vit_b_32_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("RAVE_VIT_B32_DIR") {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_default();
    home.join(".cache").join("rave").join("vit-b-32")
}

impl BackendHandle {
    pub fn from_backend(backend: Arc<dyn EmbeddingBackend>) -> Self {
        Self { inner: backend }
    }

    pub fn default_selection(&self) -> LayerSelection {
        LayerSelection(self.inner.default_layers())
    }

    /// The selection holding only the final embedding stage (`k = 0`).
    pub fn final_stage_only(&self) -> LayerSelection {
        LayerSelection(vec![self.inner.stage_count() - 1])
    }

    fn check_pixels(&self, pixels: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = pixels.dims4()?;
        if b == 0 {
            return Err(Error::InvalidInput("empty image batch".into()));
        }
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let nan = pixels
            .ne(pixels)?
            .to_dtype(DType::F32)?
            .sum_all()?
            .to_scalar::<f32>()?;
        if nan > 0.0 {
            return Err(Error::InvalidInput(
                "image batch contains NaN pixels".into(),
            ));
        }
        Ok(pixels.to_dtype(self.inner.dtype())?)
    }

    /// One unnormalized `D`-vector per image, `(B, D)`.
    pub fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        let pixels = self.check_pixels(pixels)?;
        self.inner.encode_image(&pixels)
    }

    pub fn encode_image_layers(
        &self,
        pixels: &Tensor,
        layers: &LayerSelection,
    ) -> Result<LayerActivations> {
        let pixels = self.check_pixels(pixels)?;
        self.validate_layers(layers)?;
        let per_layer = self.inner.encode_image_stages(&pixels, &layers.0)?;
        Ok(LayerActivations {
            stages: layers.0.clone(),
            per_layer,
        })
    }

    pub fn validate_layers(&self, layers: &LayerSelection) -> Result<()> {
        if layers.is_empty() {
            return Err(Error::Config("layer selection is empty".into()));
        }
        let n = self.inner.stage_count();
        if let Some(bad) = layers.0.iter().find(|&&l| l >= n) {
            return Err(Error::Config(format!(
                "layer index {bad} out of range; backend `{}` exposes stages 0..{}",
                self.inner.model_id(),
                n - 1
            )));
        }
        Ok(())
    }

    /// `(N, E_tok)` → `(D)`, or `(B, N, E_tok)` → `(B, D)`.
    pub fn encode_text(&self, token_embeddings: &Tensor) -> Result<Tensor> {
        if !self.inner.has_text_tower() {
            return Err(Error::NoTextTower(self.inner.model_id().to_string()));
        }
        let single = token_embeddings.rank() == 2;
        let t = if single {
            token_embeddings.unsqueeze(0)?
        } else {
            token_embeddings.clone()
        };
        let (_, n, e) = t.dims3()?;
        if n == 0 {
            return Err(Error::InvalidInput("zero-length token sequence".into()));
        }
        let width = self.inner.token_width().unwrap_or(0);
        if e != width {
            return Err(Error::Shape(format!(
                "token width {e}, backend expects {width}"
            )));
        }
        if let Some(max) = self.inner.max_tokens() {
            if n > max {
                return Err(Error::InvalidInput(format!(
                    "{n} tokens exceed the backend context ({max} learnable positions)"
                )));
            }
        }
        let out = self.inner.encode_text(&t.to_dtype(self.inner.dtype())?)?;
        Ok(if single { out.squeeze(0)? } else { out })
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        if !self.inner.has_text_tower() {
            return Err(Error::NoTextTower(self.inner.model_id().to_string()));
        }
        self.inner.vocabulary()
    }

    /// Text embedding of every vocabulary token as a bare single-token
    /// sequence, `(V, D)`, computed in chunks.
    pub fn encode_vocabulary(&self, vocab: &Vocabulary, chunk: usize) -> Result<Tensor> {
        let mut parts = Vec::new();
        let v = vocab.len();
        let mut start = 0;
        while start < v {
            let n = chunk.max(1).min(v - start);
            let rows = vocab.embeddings().narrow(0, start, n)?.unsqueeze(1)?;
            parts.push(self.encode_text(&rows)?.detach());
            start += n;
        }
        Ok(Tensor::cat(&parts, 0)?)
    }
}

/// Wraps a backend and counts calls into each tower; the trainer's RAVE loop
/// must never reach the text side.
pub struct CountingBackend {
    inner: BackendHandle,
    image_calls: AtomicUsize,
    text_calls: AtomicUsize,
}

impl CountingBackend {
    pub fn new(inner: BackendHandle) -> Self {
        Self {
            inner,
            image_calls: AtomicUsize::new(0),
            text_calls: AtomicUsize::new(0),
        }
    }

    pub fn image_calls(&self) -> usize {
        self.image_calls.load(Ordering::SeqCst)
    }

    pub fn text_calls(&self) -> usize {
        self.text_calls.load(Ordering::SeqCst)
    }
}

impl EmbeddingBackend for CountingBackend {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }
    fn device(&self) -> &Device {
        self.inner.device()
    }
    fn dtype(&self) -> DType {
        self.inner.dtype()
    }
    fn weight_checksum(&self) -> &str {
        self.inner.weight_checksum()
    }
    fn stage_count(&self) -> usize {
        self.inner.stage_count()
    }
    fn default_layers(&self) -> Vec<usize> {
        self.inner.default_layers()
    }
    fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        self.image_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.inner.encode_image(pixels)
    }
    fn encode_image_stages(&self, pixels: &Tensor, stages: &[usize]) -> Result<Vec<Tensor>> {
        self.image_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.inner.encode_image_stages(pixels, stages)
    }
    fn has_text_tower(&self) -> bool {
        self.inner.has_text_tower()
    }
    fn token_width(&self) -> Option<usize> {
        self.inner.token_width()
    }
    fn max_tokens(&self) -> Option<usize> {
        self.inner.max_tokens()
    }
    fn encode_text(&self, token_embeddings: &Tensor) -> Result<Tensor> {
        self.text_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.inner.encode_text(token_embeddings)
    }
    fn vocabulary(&self) -> Result<Vocabulary> {
        self.text_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.inner.vocabulary()
    }
}

/// Wraps a backend and multiplies every image embedding by a positive constant.
pub struct ScaledBackend {
    inner: BackendHandle,
    scale: f64,
}

impl ScaledBackend {
    pub fn new(inner: BackendHandle, scale: f64) -> Self {
        Self { inner, scale }
    }
}

impl EmbeddingBackend for ScaledBackend {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }
    fn device(&self) -> &Device {
        self.inner.device()
    }
    fn dtype(&self) -> DType {
        self.inner.dtype()
    }
    fn weight_checksum(&self) -> &str {
        self.inner.weight_checksum()
    }
    fn stage_count(&self) -> usize {
        self.inner.stage_count()
    }
    fn default_layers(&self) -> Vec<usize> {
        self.inner.default_layers()
    }
    fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok((self.inner.inner.encode_image(pixels)? * self.scale)?)
    }
    fn encode_image_stages(&self, pixels: &Tensor, stages: &[usize]) -> Result<Vec<Tensor>> {
        self.inner.inner.encode_image_stages(pixels, stages)
    }
    fn has_text_tower(&self) -> bool {
        self.inner.has_text_tower()
    }
    fn token_width(&self) -> Option<usize> {
        self.inner.token_width()
    }
    fn max_tokens(&self) -> Option<usize> {
        self.inner.max_tokens()
    }
    fn encode_text(&self, token_embeddings: &Tensor) -> Result<Tensor> {
        self.inner.inner.encode_text(token_embeddings)
    }
    fn vocabulary(&self) -> Result<Vocabulary> {
        self.inner.inner.vocabulary()
    }
}

/// Normalized text embedding of one vocabulary token, `(D)`.
pub fn token_direction(handle: &BackendHandle, vocab: &Vocabulary, token: &str) -> Result<Tensor> {
    let idx = vocab
        .index_of(token)
        .ok_or_else(|| Error::InvalidInput(format!("unknown token `{token}`")))?;
    let e = handle.encode_text(&vocab.row(idx)?)?;
    Ok(ops::l2_normalize(&e.unsqueeze(0)?)?.squeeze(0)?)
}
