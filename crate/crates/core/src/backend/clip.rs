//! CLIP (ViT image tower + causal text transformer) loaded from a
//! Hugging Face style `model.safetensors` checkpoint.
//!
//! The text tower takes token *embeddings* rather than ids: a sequence of `N`
//! learnable or vocabulary rows is wrapped as `[SOT] rows [EOT]`, position
//! embeddings are added and the final-layer feature at the EOT position is
//! projected. With a causal mask this matches the padded 77-token layout.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::Deserialize;

use super::{EmbeddingBackend, Vocabulary};
use crate::error::{Error, Result};
use crate::ops;
use crate::resample::{resample, Kernel};

const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipConfig {
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub vision_mlp: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_mlp: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub projection_dim: usize,
}

impl ClipConfig {
    pub fn vit_b_32() -> Self {
        Self {
            vision_width: 768,
            vision_layers: 12,
            vision_heads: 12,
            vision_mlp: 3072,
            patch_size: 32,
            image_size: 224,
            text_width: 512,
            text_layers: 12,
            text_heads: 8,
            text_mlp: 2048,
            vocab_size: 49408,
            context_length: 77,
            projection_dim: 512,
        }
    }

    /// Reads the subset of a Hugging Face `CLIPConfig` JSON this adapter needs;
    /// absent fields take ViT-B/32 values.
    pub fn from_hf_json(text: &str) -> Result<Self> {
        #[derive(Deserialize, Default)]
        struct Tower {
            hidden_size: Option<usize>,
            intermediate_size: Option<usize>,
            num_attention_heads: Option<usize>,
            num_hidden_layers: Option<usize>,
            patch_size: Option<usize>,
            image_size: Option<usize>,
            vocab_size: Option<usize>,
            max_position_embeddings: Option<usize>,
        }
        #[derive(Deserialize)]
        struct Hf {
            projection_dim: Option<usize>,
            #[serde(default)]
            text_config: Tower,
            #[serde(default)]
            vision_config: Tower,
        }
        let hf: Hf =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("config.json: {e}")))?;
        let d = Self::vit_b_32();
        let (v, t) = (hf.vision_config, hf.text_config);
        Ok(Self {
            vision_width: v.hidden_size.unwrap_or(d.vision_width),
            vision_layers: v.num_hidden_layers.unwrap_or(d.vision_layers),
            vision_heads: v.num_attention_heads.unwrap_or(d.vision_heads),
            vision_mlp: v.intermediate_size.unwrap_or(d.vision_mlp),
            patch_size: v.patch_size.unwrap_or(d.patch_size),
            image_size: v.image_size.unwrap_or(d.image_size),
            text_width: t.hidden_size.unwrap_or(d.text_width),
            text_layers: t.num_hidden_layers.unwrap_or(d.text_layers),
            text_heads: t.num_attention_heads.unwrap_or(d.text_heads),
            text_mlp: t.intermediate_size.unwrap_or(d.text_mlp),
            vocab_size: t.vocab_size.unwrap_or(d.vocab_size),
            context_length: t.max_position_embeddings.unwrap_or(d.context_length),
            projection_dim: hf.projection_dim.unwrap_or(d.projection_dim),
        })
    }
}

#[derive(Debug)]
struct Block {
    ln1: (Tensor, Tensor),
    q: (Tensor, Tensor),
    k: (Tensor, Tensor),
    v: (Tensor, Tensor),
    out: (Tensor, Tensor),
    ln2: (Tensor, Tensor),
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
}

impl Block {
    fn forward(&self, x: &Tensor, heads: usize, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = ops::layer_norm(x, &self.ln1.0, &self.ln1.1, 1e-5)?;
        let x = (x + self.attention(&h, heads, mask)?)?;
        let h = ops::layer_norm(&x, &self.ln2.0, &self.ln2.1, 1e-5)?;
        let h = ops::linear(&h, &self.fc1.0, Some(&self.fc1.1))?;
        let h = ops::quick_gelu(&h)?;
        let h = ops::linear(&h, &self.fc2.0, Some(&self.fc2.1))?;
        Ok((x + h)?)
    }

    fn attention(&self, x: &Tensor, heads: usize, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, s, w) = x.dims3()?;
        let hd = w / heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, s, heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split((ops::linear(x, &self.q.0, Some(&self.q.1))? * (1.0 / (hd as f64).sqrt()))?)?;
        let k = split(ops::linear(x, &self.k.0, Some(&self.k.1))?)?;
        let v = split(ops::linear(x, &self.v.0, Some(&self.v.1))?)?;
        let mut scores = q.matmul(&k.t()?.contiguous()?)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let p = ops::softmax_last(&scores)?;
        let o = p
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, s, w))?;
        ops::linear(&o, &self.out.0, Some(&self.out.1))
    }
}

#[derive(Debug)]
pub struct ClipBackend {
    id: String,
    config: ClipConfig,
    device: Device,
    dtype: DType,
    checksum: String,
    // vision
    patch: Tensor,
    class_embedding: Tensor,
    vision_pos: Tensor,
    pre_ln: (Tensor, Tensor),
    vision_blocks: Vec<Block>,
    post_ln: (Tensor, Tensor),
    visual_projection: Tensor,
    // text
    token_table: Tensor,
    text_pos: Tensor,
    text_blocks: Vec<Block>,
    final_ln: (Tensor, Tensor),
    text_projection: Tensor,
    tokens: Vec<String>,
    sot: usize,
    eot: usize,
}

struct Weights {
    map: HashMap<String, Tensor>,
    dtype: DType,
}

impl Weights {
    fn take(&mut self, key: &str) -> Result<Tensor> {
        let t = self
            .map
            .remove(key)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{key}`")))?;
        Ok(t.to_dtype(self.dtype)?)
    }

    fn pair(&mut self, prefix: &str) -> Result<(Tensor, Tensor)> {
        Ok((
            self.take(&format!("{prefix}.weight"))?,
            self.take(&format!("{prefix}.bias"))?,
        ))
    }

    fn block(&mut self, prefix: &str) -> Result<Block> {
        Ok(Block {
            ln1: self.pair(&format!("{prefix}.layer_norm1"))?,
            q: self.pair(&format!("{prefix}.self_attn.q_proj"))?,
            k: self.pair(&format!("{prefix}.self_attn.k_proj"))?,
            v: self.pair(&format!("{prefix}.self_attn.v_proj"))?,
            out: self.pair(&format!("{prefix}.self_attn.out_proj"))?,
            ln2: self.pair(&format!("{prefix}.layer_norm2"))?,
            fc1: self.pair(&format!("{prefix}.mlp.fc1"))?,
            fc2: self.pair(&format!("{prefix}.mlp.fc2"))?,
        })
    }
}

impl ClipBackend {
    /// Loads `model.safetensors`, `vocab.json` and optionally `config.json`
    /// from `dir`. A `model.safetensors.sha256` sidecar, when present, must
    /// match the weight file.
    pub fn load(model_id: &str, dir: &Path, device: &Device, dtype: DType) -> Result<Self> {
        let weights_path = dir.join("model.safetensors");
        if !weights_path.is_file() {
            return Err(Error::UnknownModel(format!(
                "{model_id} (no weights at {})",
                weights_path.display()
            )));
        }
        let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        let checksum = ops::sha256_hex(&bytes);
        let sidecar = dir.join("model.safetensors.sha256");
        if sidecar.is_file() {
            let expected = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let expected = expected
                .split_whitespace()
                .next()
                .unwrap_or("")
                .to_lowercase();
            if expected != checksum {
                return Err(Error::ChecksumMismatch {
                    model_id: model_id.to_string(),
                    expected,
                    found: checksum,
                });
            }
        }
        let config_path = dir.join("config.json");
        let config = if config_path.is_file() {
            let text =
                std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
            ClipConfig::from_hf_json(&text)?
        } else {
            ClipConfig::vit_b_32()
        };
        let map = candle_core::safetensors::load_buffer(&bytes, device)?;
        drop(bytes);
        let mut w = Weights { map, dtype };

        let vocab_path = dir.join("vocab.json");
        let vocab_text =
            std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let ids: HashMap<String, usize> = serde_json::from_str(&vocab_text)
            .map_err(|e| Error::Format(format!("vocab.json: {e}")))?;

        let token_table = w.take("text_model.embeddings.token_embedding.weight")?;
        let (vocab_rows, _) = token_table.dims2()?;
        let mut tokens: Vec<String> = (0..vocab_rows).map(|i| format!("<unk_{i}>")).collect();
        for (tok, id) in ids {
            if id < vocab_rows {
                tokens[id] = tok;
            }
        }
        let find =
            |name: &str, fallback: usize| tokens.iter().position(|t| t == name).unwrap_or(fallback);
        let sot = find("<|startoftext|>", vocab_rows.saturating_sub(2));
        let eot = find("<|endoftext|>", vocab_rows.saturating_sub(1));

        let vision_blocks = (0..config.vision_layers)
            .map(|i| w.block(&format!("vision_model.encoder.layers.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let text_blocks = (0..config.text_layers)
            .map(|i| w.block(&format!("text_model.encoder.layers.{i}")))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            id: model_id.to_string(),
            device: device.clone(),
            dtype,
            checksum,
            patch: w.take("vision_model.embeddings.patch_embedding.weight")?,
            class_embedding: w.take("vision_model.embeddings.class_embedding")?,
            vision_pos: w.take("vision_model.embeddings.position_embedding.weight")?,
            pre_ln: w.pair("vision_model.pre_layrnorm")?,
            vision_blocks,
            post_ln: w.pair("vision_model.post_layernorm")?,
            visual_projection: w.take("visual_projection.weight")?,
            token_table,
            text_pos: w.take("text_model.embeddings.position_embedding.weight")?,
            text_blocks,
            final_ln: w.pair("text_model.final_layer_norm")?,
            text_projection: w.take("text_projection.weight")?,
            tokens,
            sot,
            eot,
            config,
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.config
    }

    fn preprocess(&self, pixels: &Tensor) -> Result<Tensor> {
        let s = self.config.image_size;
        let x = resample(pixels, Kernel::Bilinear, s, s)?;
        let mean = Tensor::new(&CLIP_MEAN, &self.device)?
            .to_dtype(self.dtype)?
            .reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&CLIP_STD, &self.device)?
            .to_dtype(self.dtype)?
            .reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Runs the vision tower, returning every stage up to `last_stage`.
    fn vision_stages(&self, pixels: &Tensor, last_stage: usize) -> Result<Vec<Tensor>> {
        let x = self.preprocess(pixels)?;
        let b = x.dim(0)?;
        let w = self.config.vision_width;
        let p = self.config.patch_size;
        let patches = x
            .conv2d(&self.patch, 0, p, 1, 1)?
            .flatten_from(2)?
            .transpose(1, 2)?;
        let cls = self
            .class_embedding
            .reshape((1, 1, w))?
            .broadcast_as((b, 1, w))?;
        let seq = Tensor::cat(&[&cls, &patches], 1)?;
        let s = seq.dim(1)?;
        let seq = seq.broadcast_add(&self.vision_pos.narrow(0, 0, s)?.unsqueeze(0)?)?;
        let mut h = ops::layer_norm(&seq, &self.pre_ln.0, &self.pre_ln.1, 1e-5)?;
        let mut out = vec![h.clone()];
        let final_stage = self.config.vision_layers + 1;
        for block in self
            .vision_blocks
            .iter()
            .take(last_stage.min(self.config.vision_layers))
        {
            h = block.forward(&h, self.config.vision_heads, None)?;
            out.push(h.clone());
        }
        if last_stage >= final_stage {
            let pooled = h.narrow(1, 0, 1)?.squeeze(1)?;
            let pooled = ops::layer_norm(&pooled, &self.post_ln.0, &self.post_ln.1, 1e-5)?;
            out.push(ops::linear(&pooled, &self.visual_projection, None)?);
        }
        Ok(out)
    }

    fn causal_mask(&self, s: usize) -> Result<Tensor> {
        let mut m = vec![0f64; s * s];
        for i in 0..s {
            for j in i + 1..s {
                m[i * s + j] = -1e9;
            }
        }
        Ok(Tensor::from_vec(m, (s, s), &self.device)?.to_dtype(self.dtype)?)
    }
}

impl EmbeddingBackend for ClipBackend {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn embed_dim(&self) -> usize {
        self.config.projection_dim
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

    /// Patch embedding (0), each transformer block (1..=L), projected embedding (L+1).
    fn stage_count(&self) -> usize {
        self.config.vision_layers + 2
    }

    /// The patch embedding is the only downsampling stage of a ViT.
    fn default_layers(&self) -> Vec<usize> {
        vec![0, self.config.vision_layers + 1]
    }

    fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        let final_stage = self.config.vision_layers + 1;
        let mut stages = self.vision_stages(pixels, final_stage)?;
        Ok(stages.pop().expect("final stage present"))
    }

    fn encode_image_stages(&self, pixels: &Tensor, stages: &[usize]) -> Result<Vec<Tensor>> {
        let last = stages.iter().copied().max().unwrap_or(0);
        let all = self.vision_stages(pixels, last)?;
        Ok(stages.iter().map(|&s| all[s].clone()).collect())
    }

    fn has_text_tower(&self) -> bool {
        true
    }

    fn token_width(&self) -> Option<usize> {
        Some(self.config.text_width)
    }

    fn max_tokens(&self) -> Option<usize> {
        Some(self.config.context_length - 2)
    }

    fn encode_text(&self, token_embeddings: &Tensor) -> Result<Tensor> {
        let (b, n, e) = token_embeddings.dims3()?;
        let sot = self
            .token_table
            .narrow(0, self.sot, 1)?
            .unsqueeze(0)?
            .broadcast_as((b, 1, e))?;
        let eot = self
            .token_table
            .narrow(0, self.eot, 1)?
            .unsqueeze(0)?
            .broadcast_as((b, 1, e))?;
        let seq = Tensor::cat(&[&sot, token_embeddings, &eot], 1)?;
        let s = n + 2;
        let mut h = seq.broadcast_add(&self.text_pos.narrow(0, 0, s)?.unsqueeze(0)?)?;
        let mask = self.causal_mask(s)?;
        for block in &self.text_blocks {
            h = block.forward(&h, self.config.text_heads, Some(&mask))?;
        }
        let h = ops::layer_norm(&h, &self.final_ln.0, &self.final_ln.1, 1e-5)?;
        let pooled = h.narrow(1, s - 1, 1)?.squeeze(1)?;
        ops::linear(&pooled, &self.text_projection, None)
    }

    fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.tokens.clone(), self.token_table.clone())
    }
}
