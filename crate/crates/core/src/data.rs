//! Corpus scanning, seeded augmentation and batch assembly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, ImageTensor};
use crate::ops;

pub const DEFAULT_TRAIN_SIZE: usize = 512;
pub const DEFAULT_EVAL_LONG_SIDE: usize = 2048;
pub const BACKLIT_DIR: &str = "backlit";
pub const WELL_LIT_DIR: &str = "well_lit";

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    PairedByFilename,
    Unpaired,
}

impl std::str::FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" | "supervised" | "paired_by_filename" => Ok(Pairing::PairedByFilename),
            "unpaired" | "unsupervised" => Ok(Pairing::Unpaired),
            other => Err(Error::Config(format!("unknown pairing `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub backlit_dir: PathBuf,
    pub well_lit_dir: PathBuf,
    pub pairing: Pairing,
    pub train_size: usize,
}

impl CorpusSpec {
    /// `<root>/backlit` and `<root>/well_lit`.
    pub fn from_root(root: impl AsRef<Path>, pairing: Pairing) -> Self {
        let root = root.as_ref();
        Self {
            backlit_dir: root.join(BACKLIT_DIR),
            well_lit_dir: root.join(WELL_LIT_DIR),
            pairing,
            train_size: DEFAULT_TRAIN_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEntry {
    /// Path relative to its corpus directory, `/`-separated.
    pub relative: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl FileEntry {
    /// Relative path without extension; the pairing key.
    pub fn stem(&self) -> &str {
        match self.relative.rfind('.') {
            Some(i) if !self.relative[i..].contains('/') => &self.relative[..i],
            _ => &self.relative,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusIndex {
    pub spec: CorpusSpec,
    pub backlit: Vec<FileEntry>,
    pub well_lit: Vec<FileEntry>,
    pub fingerprint: String,
}

impl CorpusIndex {
    pub fn is_paired(&self) -> bool {
        self.spec.pairing == Pairing::PairedByFilename
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if is_image(&path) {
            out.push(path);
        }
    }
    Ok(())
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(ops::sha256_hex(&bytes))
}

/// Sorted image files under `dir`, each with its content hash.
pub fn list_images(dir: &Path) -> Result<Vec<FileEntry>> {
    if !dir.is_dir() {
        return Err(Error::Corpus(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut entries = files
        .into_iter()
        .map(|path| {
            let rel = path.strip_prefix(dir).expect("walked under dir");
            let relative = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            Ok(FileEntry {
                relative,
                sha256: hash_file(&path)?,
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.relative.cmp(&b.relative));
    if entries.is_empty() {
        return Err(Error::Corpus(format!(
            "{} contains no images",
            dir.display()
        )));
    }
    Ok(entries)
}

pub fn scan_corpus(spec: &CorpusSpec) -> Result<CorpusIndex> {
    if spec.train_size == 0 {
        return Err(Error::Config("train_size must be positive".into()));
    }
    let backlit = list_images(&spec.backlit_dir)?;
    let mut well_lit = list_images(&spec.well_lit_dir)?;
    if spec.pairing == Pairing::PairedByFilename {
        let mut by_stem: BTreeMap<&str, &FileEntry> = BTreeMap::new();
        for w in &well_lit {
            if by_stem.insert(w.stem(), w).is_some() {
                return Err(Error::Corpus(format!(
                    "duplicate well-lit stem `{}`",
                    w.stem()
                )));
            }
        }
        let mut ordered = Vec::with_capacity(backlit.len());
        for b in &backlit {
            match by_stem.remove(b.stem()) {
                Some(w) => ordered.push(w.clone()),
                None => {
                    return Err(Error::Corpus(format!(
                        "backlit image `{}` has no well-lit counterpart",
                        b.stem()
                    )))
                }
            }
        }
        if let Some(stem) = by_stem.keys().next() {
            return Err(Error::Corpus(format!(
                "well-lit image `{stem}` has no backlit counterpart"
            )));
        }
        well_lit = ordered;
    }
    let mut hasher = Sha256::new();
    for (side, entries) in [(BACKLIT_DIR, &backlit), (WELL_LIT_DIR, &well_lit)] {
        let mut sorted: Vec<&FileEntry> = entries.iter().collect();
        sorted.sort_by(|a, b| a.relative.cmp(&b.relative));
        for e in sorted {
            hasher.update(format!("{side}/{}\t{}\n", e.relative, e.sha256).as_bytes());
        }
    }
    Ok(CorpusIndex {
        spec: spec.clone(),
        backlit,
        well_lit,
        fingerprint: hex::encode(hasher.finalize()),
    })
}

/// Indexed images that can be loaded on demand.
pub trait ImageSource: Send + Sync {
    fn len(&self) -> usize;
    fn name(&self, i: usize) -> String;
    fn load(&self, i: usize) -> Result<ImageTensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images held in memory, named `000000`, `000001`, ...
#[derive(Debug, Clone)]
pub struct MemorySource {
    images: Vec<ImageTensor>,
}

impl MemorySource {
    pub fn new(images: Vec<ImageTensor>) -> Self {
        Self { images }
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }
}

impl ImageSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn name(&self, i: usize) -> String {
        format!("{i:06}")
    }

    fn load(&self, i: usize) -> Result<ImageTensor> {
        Ok(self.images[i].clone())
    }
}

#[derive(Debug, Clone)]
pub struct FileSource {
    entries: Vec<FileEntry>,
}

impl FileSource {
    pub fn new(entries: Vec<FileEntry>) -> Self {
        Self { entries }
    }
}

impl ImageSource for FileSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn name(&self, i: usize) -> String {
        self.entries[i].relative.clone()
    }

    fn load(&self, i: usize) -> Result<ImageTensor> {
        ImageTensor::load(&self.entries[i].path)
    }
}

/// Content hash of decoded pixels; used for in-memory corpora.
pub fn pixel_fingerprint(images: &[ImageTensor]) -> String {
    let mut hashes: Vec<String> = images
        .iter()
        .map(|im| {
            let mut h = Sha256::new();
            h.update((im.height() as u64).to_le_bytes());
            h.update((im.width() as u64).to_le_bytes());
            for v in im.data() {
                h.update(v.to_le_bytes());
            }
            hex::encode(h.finalize())
        })
        .collect();
    hashes.sort();
    ops::sha256_hex(hashes.join("\n").as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub zoom: (f64, f64),
    pub rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            zoom: (1.0, 1.2),
            rotation_deg: 10.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability must lie in [0, 1]".into()));
        }
        if !(self.zoom.0 >= 1.0 && self.zoom.1 >= self.zoom.0) {
            return Err(Error::Config(
                "zoom range must satisfy 1 <= min <= max".into(),
            ));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg < 90.0) {
            return Err(Error::Config(
                "rotation range must lie in [0, 90) degrees".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub zoom: f64,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        zoom: 1.0,
        angle_deg: 0.0,
    };
}

/// Parameters drawn from a stream keyed by `(seed, step, item)`.
pub fn sample_augment(cfg: &AugmentConfig, seed: u64, step: u64, item: u64) -> AugmentParams {
    if !cfg.enabled {
        return AugmentParams::IDENTITY;
    }
    let mut rng = ops::seeded_rng(ops::derive_seed(&[0xa09, seed, step, item]));
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let zoom = if cfg.zoom.1 > cfg.zoom.0 {
        rng.random_range(cfg.zoom.0..cfg.zoom.1)
    } else {
        cfg.zoom.0
    };
    let angle_deg = if cfg.rotation_deg > 0.0 {
        rng.random_range(-cfg.rotation_deg..cfg.rotation_deg)
    } else {
        0.0
    };
    AugmentParams {
        flip,
        zoom,
        angle_deg,
    }
}

fn reflect(c: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let max = (n - 1) as f64;
    let period = 2.0 * max;
    let m = c.rem_euclid(period);
    if m > max {
        period - m
    } else {
        m
    }
}

/// Flip, rotation about the center and center zoom, resampled bilinearly
/// with reflect padding. Output has the input's size.
pub fn apply_augment(image: &ImageTensor, params: &AugmentParams) -> ImageTensor {
    if *params == AugmentParams::IDENTITY {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (s, c) = params.angle_deg.to_radians().sin_cos();
    ImageTensor::from_fn(h, w, |y, x| {
        let u = (x as f64 + 0.5 - cx) / params.zoom;
        let v = (y as f64 + 0.5 - cy) / params.zoom;
        let mut ru = c * u + s * v;
        let rv = -s * u + c * v;
        if params.flip {
            ru = -ru;
        }
        let sx = reflect(ru + cx - 0.5, w);
        let sy = reflect(rv + cy - 0.5, h);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
        let mut out = [0f32; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let top = image.get(y0, x0, ch) * (1.0 - fx) + image.get(y0, x1, ch) * fx;
            let bottom = image.get(y1, x0, ch) * (1.0 - fx) + image.get(y1, x1, ch) * fx;
            *o = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
        }
        out
    })
}

/// Training images resized once to `size × size` and cached.
pub struct TrainingSet {
    source: Box<dyn ImageSource>,
    size: usize,
    cache: Vec<OnceLock<ImageTensor>>,
}

impl TrainingSet {
    pub fn new(source: Box<dyn ImageSource>, size: usize) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Corpus("training corpus is empty".into()));
        }
        if size == 0 {
            return Err(Error::Config("train_size must be positive".into()));
        }
        let cache = (0..source.len()).map(|_| OnceLock::new()).collect();
        Ok(Self {
            source,
            size,
            cache,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn name(&self, i: usize) -> String {
        self.source.name(i)
    }

    /// Bicubic resize to the training size.
    pub fn resized(&self, i: usize) -> Result<&ImageTensor> {
        if let Some(img) = self.cache[i].get() {
            return Ok(img);
        }
        let img = self.source.load(i)?;
        let img = if img.height() == self.size && img.width() == self.size {
            img
        } else {
            img.resize(self.size, self.size)?
        };
        Ok(self.cache[i].get_or_init(|| img))
    }
}

/// Item for position `k` in the endless stream: a fresh seeded permutation
/// of `0..n` per epoch.
pub fn stream_item(n: usize, seed: u64, k: u64) -> usize {
    let epoch = k / n as u64;
    let pos = (k % n as u64) as usize;
    permutation(n, ops::derive_seed(&[0x5e9, seed, epoch]))[pos]
}

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ops::seeded_rng(seed));
    idx
}

/// A training batch as `(B, 3, S, S)` tensors; `targets` is present for paired data.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub items: Vec<usize>,
    pub inputs: Tensor,
    pub targets: Option<Tensor>,
}

/// Batch `step` of the stream over `set`: items from the per-epoch
/// permutation, each augmented with parameters derived from `(seed, step, item)`.
/// With `paired`, the target at the same index gets the same parameters.
#[allow(clippy::too_many_arguments)]
pub fn training_batch(
    set: &TrainingSet,
    paired: Option<&TrainingSet>,
    batch_size: usize,
    augment: &AugmentConfig,
    seed: u64,
    step: u64,
    device: &Device,
    dtype: DType,
) -> Result<TrainBatch> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if batch_size > set.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds corpus size {}",
            set.len()
        )));
    }
    if let Some(p) = paired {
        if p.len() != set.len() {
            return Err(Error::Corpus("paired corpora differ in length".into()));
        }
    }
    let mut items = Vec::with_capacity(batch_size);
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::new();
    for j in 0..batch_size as u64 {
        let item = stream_item(set.len(), seed, step * batch_size as u64 + j);
        let params = sample_augment(augment, seed, step, item as u64);
        inputs.push(apply_augment(set.resized(item)?, &params));
        if let Some(p) = paired {
            targets.push(apply_augment(p.resized(item)?, &params));
        }
        items.push(item);
    }
    Ok(TrainBatch {
        items,
        inputs: batch_to_tensor(&inputs, device, dtype)?,
        targets: if paired.is_some() {
            Some(batch_to_tensor(&targets, device, dtype)?)
        } else {
            None
        },
    })
}

/// Whole set without augmentation, in index order, as `(N, 3, S, S)`.
pub fn full_batch(set: &TrainingSet, device: &Device, dtype: DType) -> Result<Tensor> {
    let imgs = (0..set.len())
        .map(|i| set.resized(i).cloned())
        .collect::<Result<Vec<_>>>()?;
    batch_to_tensor(&imgs, device, dtype)
}

#[derive(Debug, Clone)]
pub struct EvalItem {
    pub name: String,
    pub backlit: ImageTensor,
    pub ground_truth: Option<ImageTensor>,
}

/// Test items in sorted order, longer side resized to `long_side`; the ground
/// truth (paired corpora only) is resized to the backlit image's processed size.
pub fn eval_iterator(
    index: &CorpusIndex,
    long_side: usize,
) -> impl Iterator<Item = Result<EvalItem>> + '_ {
    let paired = index.is_paired();
    index.backlit.iter().enumerate().map(move |(i, entry)| {
        let backlit = ImageTensor::load(&entry.path)?.resize_long_side(long_side)?;
        let ground_truth = if paired {
            let gt = ImageTensor::load(&index.well_lit[i].path)?;
            Some(gt.resize(backlit.height(), backlit.width())?)
        } else {
            None
        };
        Ok(EvalItem {
            name: entry.relative.clone(),
            backlit,
            ground_truth,
        })
    })
}
