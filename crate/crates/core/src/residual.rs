//! The residual guidance direction: construction from two image corpora,
//! persistence, and interpretation against the text vocabulary.
//!
//! ```text
//! v_well   = f_norm( Σ f_norm(Φ(I_p)) / N_p )
//! v_back   = f_norm( Σ f_norm(Φ(I_n)) / N_n )
//! v_res    = f_norm( v_well − v_back )
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

use crate::backend::{display_token, token_direction, BackendHandle};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::ops;

/// `f_norm(v) = v / ‖v‖₂`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(
            "degenerate vector: cannot normalize a zero-length vector".into(),
        ));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Streaming mean of normalized vectors with Neumaier-compensated sums.
#[derive(Debug, Clone)]
pub struct MeanAccumulator {
    sum: Vec<f64>,
    comp: Vec<f64>,
    count: usize,
}

impl MeanAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            comp: vec![0.0; dim],
            count: 0,
        }
    }

    fn add_raw(&mut self, v: &[f64]) {
        for ((s, c), &x) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(v) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
    }

    /// Normalizes `embedding` and adds it.
    pub fn push(&mut self, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.sum.len() {
            return Err(Error::Shape(format!(
                "embedding of length {} pushed into a {}-dim accumulator",
                embedding.len(),
                self.sum.len()
            )));
        }
        let unit = normalize(embedding)?;
        self.add_raw(&unit);
        self.count += 1;
        Ok(())
    }

    /// Combines two partial accumulators. Callers merging parallel partials
    /// must merge in a fixed order to stay deterministic.
    pub fn merge(&mut self, other: &MeanAccumulator) {
        let total: Vec<f64> = other
            .sum
            .iter()
            .zip(&other.comp)
            .map(|(s, c)| s + c)
            .collect();
        self.add_raw(&total);
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `f_norm(mean)` of everything pushed so far.
    pub fn finish(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::InvalidInput("empty corpus".into()));
        }
        let mean: Vec<f64> = self
            .sum
            .iter()
            .zip(&self.comp)
            .map(|(s, c)| (s + c) / self.count as f64)
            .collect();
        normalize(&mean).map_err(|_| {
            Error::Degenerate("degenerate corpus: mean embedding is the zero vector".into())
        })
    }
}

/// Mean direction of a corpus together with an order-independent content hash.
#[derive(Debug, Clone)]
pub struct CorpusEmbedding {
    pub mean: Vec<f64>,
    pub count: usize,
    pub fingerprint: String,
}

fn image_embedding(handle: &BackendHandle, image: &ImageTensor) -> Result<Vec<f64>> {
    let pixels = image.to_tensor(handle.device(), handle.dtype())?;
    let e = handle.encode_image(&pixels)?.detach();
    ops::to_f64_vec(&e)
}

fn image_hash(image: &ImageTensor) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((image.height() as u64).to_le_bytes());
    h.update((image.width() as u64).to_le_bytes());
    for v in image.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Streams a corpus through the encoder; the corpus never has to be resident.
pub fn corpus_embedding<I>(handle: &BackendHandle, corpus: I) -> Result<CorpusEmbedding>
where
    I: IntoIterator<Item = Result<ImageTensor>>,
{
    let mut acc = MeanAccumulator::new(handle.embed_dim());
    let mut hashes = Vec::new();
    for image in corpus {
        let image = image?;
        acc.push(&image_embedding(handle, &image)?)?;
        hashes.push(image_hash(&image));
    }
    hashes.sort_unstable();
    let mut h = Sha256::new();
    for x in &hashes {
        h.update(x);
    }
    Ok(CorpusEmbedding {
        mean: acc.finish()?,
        count: acc.count(),
        fingerprint: hex::encode(h.finalize()),
    })
}

/// `f_norm(Σ f_norm(Φ_image(I)) / N)` over a corpus.
pub fn mean_embedding<I>(handle: &BackendHandle, corpus: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = Result<ImageTensor>>,
{
    Ok(corpus_embedding(handle, corpus)?.mean)
}

/// The guidance direction plus the two corpus means it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    pub v_residual: Vec<f32>,
    pub v_well_lit: Vec<f32>,
    pub v_backlit: Vec<f32>,
    pub n_well: usize,
    pub n_back: usize,
    pub backend_model_id: String,
    pub backend_checksum: String,
    pub dataset_fingerprint: String,
}

const NORM_TOL: f64 = 1e-6;

fn norm32(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

fn as_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn as_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl ResidualVector {
    pub fn from_means(
        well: &CorpusEmbedding,
        back: &CorpusEmbedding,
        backend_model_id: &str,
        backend_checksum: &str,
    ) -> Result<Self> {
        let diff: Vec<f64> = well
            .mean
            .iter()
            .zip(&back.mean)
            .map(|(a, b)| a - b)
            .collect();
        let residual = normalize(&diff).map_err(|_| {
            Error::Degenerate(
                "degenerate residual: well-lit and backlit corpora are indistinguishable".into(),
            )
        })?;
        let mut h = Sha256::new();
        h.update(back.fingerprint.as_bytes());
        h.update(b"|");
        h.update(well.fingerprint.as_bytes());
        Ok(Self {
            v_residual: as_f32(&residual),
            v_well_lit: as_f32(&well.mean),
            v_backlit: as_f32(&back.mean),
            n_well: well.count,
            n_back: back.count,
            backend_model_id: backend_model_id.to_string(),
            backend_checksum: backend_checksum.to_string(),
            dataset_fingerprint: hex::encode(h.finalize()),
        })
    }

    pub fn dim(&self) -> usize {
        self.v_residual.len()
    }

    pub fn residual_f64(&self) -> Vec<f64> {
        as_f64(&self.v_residual)
    }

    pub fn well_lit_f64(&self) -> Vec<f64> {
        as_f64(&self.v_well_lit)
    }

    /// `v_well · v_res`, the target projection of the residual loss.
    pub fn target_projection(&self) -> f64 {
        dot(&self.well_lit_f64(), &self.residual_f64())
    }

    /// Checks unit norms and collinearity of `v_res` with `v_well − v_back`.
    pub fn validate(&self) -> Result<()> {
        let d = self.v_residual.len();
        if d == 0 || self.v_well_lit.len() != d || self.v_backlit.len() != d {
            return Err(Error::Format(
                "residual vectors have inconsistent lengths".into(),
            ));
        }
        for (name, v) in [
            ("v_residual", &self.v_residual),
            ("v_well_lit", &self.v_well_lit),
            ("v_backlit", &self.v_backlit),
        ] {
            let n = norm32(v);
            if (n - 1.0).abs() > NORM_TOL {
                return Err(Error::Format(format!(
                    "{name} has norm {n}, expected 1 ± {NORM_TOL}"
                )));
            }
        }
        let diff: Vec<f64> = self
            .v_well_lit
            .iter()
            .zip(&self.v_backlit)
            .map(|(&a, &b)| a as f64 - b as f64)
            .collect();
        let dn = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        if dn == 0.0 {
            return Err(Error::Degenerate(
                "degenerate residual: v_well_lit equals v_backlit".into(),
            ));
        }
        let cos = dot(&diff, &self.residual_f64()) / (dn * norm32(&self.v_residual));
        if (cos - 1.0).abs() > NORM_TOL {
            return Err(Error::Format(format!(
                "v_residual is not collinear with v_well_lit - v_backlit (cos = {cos})"
            )));
        }
        Ok(())
    }

    /// `(D)` tensor of `v_res` on the handle's device and dtype.
    pub fn residual_tensor(&self, handle: &BackendHandle) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.v_residual, self.dim(), handle.device())?
                .to_dtype(handle.dtype())?,
        )
    }
}

/// Builds `v_res` from a backlit and a well-lit corpus.
pub fn compute_residual<B, W>(
    handle: &BackendHandle,
    backlit: B,
    well_lit: W,
) -> Result<ResidualVector>
where
    B: IntoIterator<Item = Result<ImageTensor>>,
    W: IntoIterator<Item = Result<ImageTensor>>,
{
    let back = corpus_embedding(handle, backlit)?;
    let well = corpus_embedding(handle, well_lit)?;
    ResidualVector::from_means(&well, &back, handle.model_id(), handle.weight_checksum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSimilarity {
    /// Raw vocabulary entry.
    pub token: String,
    pub score: f64,
}

impl TokenSimilarity {
    pub fn display(&self) -> &str {
        display_token(&self.token)
    }
}

/// Scores every vocabulary token as `f_norm(Φ_text(e_token)) · v_res`, with
/// each token encoded as a bare single-token sequence.
pub fn score_vocabulary(
    handle: &BackendHandle,
    rv: &ResidualVector,
) -> Result<Vec<TokenSimilarity>> {
    check_backend(handle, rv)?;
    let vocab = handle.vocabulary()?;
    let text = handle.encode_vocabulary(&vocab, 256)?;
    let text = ops::l2_normalize(&text.to_dtype(DType::F64)?)?;
    let v = Tensor::from_vec(rv.residual_f64(), (rv.dim(), 1), text.device())?;
    let scores = text.matmul(&v)?.squeeze(1)?.to_vec1::<f64>()?;
    Ok(vocab
        .tokens()
        .iter()
        .zip(scores)
        .map(|(t, s)| TokenSimilarity {
            token: t.clone(),
            score: s.clamp(-1.0, 1.0),
        })
        .collect())
}

fn by_score(a: &TokenSimilarity, b: &TokenSimilarity) -> Ordering {
    a.score
        .partial_cmp(&b.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.token.cmp(&b.token))
}

/// The `top_k` lowest (ascending) and highest (descending) scoring tokens.
/// Ties are broken by token string in both lists.
pub fn interpret_residual(
    handle: &BackendHandle,
    rv: &ResidualVector,
    top_k: usize,
) -> Result<(Vec<TokenSimilarity>, Vec<TokenSimilarity>)> {
    if top_k == 0 {
        return Err(Error::InvalidInput("top_k must be at least 1".into()));
    }
    let mut all = score_vocabulary(handle, rv)?;
    all.sort_by(by_score);
    let lowest = all.iter().take(top_k).cloned().collect();
    let mut desc = all;
    desc.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.token.cmp(&b.token))
    });
    let highest = desc.into_iter().take(top_k).collect();
    Ok((lowest, highest))
}

/// Mean over the corpus of `cos(f_norm(Φ_image(I)), f_norm(Φ_text(e_token)))`.
pub fn token_corpus_similarity<I>(handle: &BackendHandle, token: &str, corpus: I) -> Result<f64>
where
    I: IntoIterator<Item = Result<ImageTensor>>,
{
    let vocab = handle.vocabulary()?;
    let dir = ops::to_f64_vec(&token_direction(handle, &vocab, token)?)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for image in corpus {
        let e = normalize(&image_embedding(handle, &image?)?)?;
        total += dot(&e, &dir);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    Ok(total / n as f64)
}

/// Errors unless `rv` was computed with the loaded backend.
pub fn check_backend(handle: &BackendHandle, rv: &ResidualVector) -> Result<()> {
    if rv.backend_model_id != handle.model_id() {
        return Err(Error::Config(format!(
            "residual was computed with backend `{}` but `{}` is loaded",
            rv.backend_model_id,
            handle.model_id()
        )));
    }
    if rv.dim() != handle.embed_dim() {
        return Err(Error::Shape(format!(
            "residual has dimension {}, backend embeds into {}",
            rv.dim(),
            handle.embed_dim()
        )));
    }
    Ok(())
}

// ---- file format --------------------------------------------------------
//
// magic "RAVE-RES" | version u32 | meta_len u32 | meta (key=value lines)
// | v_residual, v_well_lit, v_backlit as f32 LE | sha256 of all prior bytes

const MAGIC: &[u8; 8] = b"RAVE-RES";
pub const RESIDUAL_FORMAT_VERSION: u32 = 1;

/// Serializes without validating, so that invalid vectors can still be written.
pub fn encode_residual(rv: &ResidualVector) -> Vec<u8> {
    let mut meta = BTreeMap::new();
    meta.insert("backend_model_id", rv.backend_model_id.clone());
    meta.insert("backend_checksum", rv.backend_checksum.clone());
    meta.insert("dataset_fingerprint", rv.dataset_fingerprint.clone());
    meta.insert("embed_dim", rv.dim().to_string());
    meta.insert("n_back", rv.n_back.to_string());
    meta.insert("n_well", rv.n_well.to_string());
    let meta: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&RESIDUAL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for v in [&rv.v_residual, &rv.v_well_lit, &rv.v_backlit] {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated residual file".into()))
}

pub fn decode_residual(bytes: &[u8]) -> Result<ResidualVector> {
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Format(
            "not a residual file (bad magic header)".into(),
        ));
    }
    let version = read_u32(bytes, 8)?;
    if version != RESIDUAL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "residual format version {version} is not supported (expected {RESIDUAL_FORMAT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format(
            "residual file checksum mismatch (corrupted)".into(),
        ));
    }
    let meta_len = read_u32(body, 12)? as usize;
    let meta_bytes = body
        .get(16..16 + meta_len)
        .ok_or_else(|| Error::Format("truncated metadata block".into()))?;
    let meta_text = std::str::from_utf8(meta_bytes)
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed metadata line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Format(format!("metadata key `{k}` missing")))
    };
    let parse = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("metadata key `{k}` is not an integer")))
    };
    let dim = parse("embed_dim")?;
    let data = &body[16 + meta_len..];
    if data.len() != 3 * dim * 4 {
        return Err(Error::Format(format!(
            "expected {} bytes of vector data, found {}",
            3 * dim * 4,
            data.len()
        )));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(ResidualVector {
        v_residual: floats[..dim].to_vec(),
        v_well_lit: floats[dim..2 * dim].to_vec(),
        v_backlit: floats[2 * dim..].to_vec(),
        n_well: parse("n_well")?,
        n_back: parse("n_back")?,
        backend_model_id: get("backend_model_id")?,
        backend_checksum: get("backend_checksum")?,
        dataset_fingerprint: get("dataset_fingerprint")?,
    })
}

pub fn save_residual(rv: &ResidualVector, path: impl AsRef<Path>) -> Result<()> {
    rv.validate()?;
    crate::fsutil::write_atomic(path.as_ref(), &encode_residual(rv))
}

/// Reads and validates a residual file.
pub fn load_residual(path: impl AsRef<Path>) -> Result<ResidualVector> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let rv = decode_residual(&bytes)?;
    rv.validate()?;
    Ok(rv)
}
