//! Training loops. RAVE is a single enhancement loop; the prompt-based
//! methods run guidance initialization, enhancement training and then
//! alternating refinement rounds. The whole run is a resumable state machine.

mod checkpoint;
mod config;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_model, model_from_state,
    save_checkpoint, CheckpointEntry, CheckpointState, LossRecord, Position, RunManifest,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use config::{parse_key_values, Method, Setting, TrainConfig};

use crate::backend::{BackendHandle, LayerActivations, LayerSelection};
use crate::data::{
    pixel_fingerprint, training_batch, CorpusIndex, FileSource, MemorySource, TrainingSet,
};
use crate::enhance::{enhance_tensor, EnhancementModel, Frozen};
use crate::error::{Error, Result};
use crate::guidance::{
    guidance_init_step, guidance_refine_step, init_guidance, GuidancePair, Lighting,
    RefinementBatch, RefinementEmbeddings,
};
use crate::image::ImageTensor;
use crate::losses;
use crate::ops;
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::residual::{check_backend, ResidualVector};

pub const MANIFEST_FILE: &str = "manifest.json";

const TAG_INIT_BACKLIT: u64 = 1;
const TAG_INIT_WELL: u64 = 2;
const TAG_ENHANCE: u64 = 3;
const TAG_REFINE_BACKLIT: u64 = 4;
const TAG_REFINE_WELL: u64 = 5;
const TAG_REFINE_ENHANCE: u64 = 6;

/// Backlit and well-lit training images at the training resolution.
pub struct TrainData {
    pub backlit: TrainingSet,
    pub well_lit: TrainingSet,
    pub fingerprint: String,
}

impl TrainData {
    pub fn from_index(index: &CorpusIndex, train_size: usize) -> Result<Self> {
        Ok(Self {
            backlit: TrainingSet::new(
                Box::new(FileSource::new(index.backlit.clone())),
                train_size,
            )?,
            well_lit: TrainingSet::new(
                Box::new(FileSource::new(index.well_lit.clone())),
                train_size,
            )?,
            fingerprint: index.fingerprint.clone(),
        })
    }

    pub fn in_memory(
        backlit: Vec<ImageTensor>,
        well_lit: Vec<ImageTensor>,
        train_size: usize,
    ) -> Result<Self> {
        let fingerprint = ops::sha256_hex(
            format!(
                "{}\n{}",
                pixel_fingerprint(&backlit),
                pixel_fingerprint(&well_lit)
            )
            .as_bytes(),
        );
        Ok(Self {
            backlit: TrainingSet::new(Box::new(MemorySource::new(backlit)), train_size)?,
            well_lit: TrainingSet::new(Box::new(MemorySource::new(well_lit)), train_size)?,
            fingerprint,
        })
    }
}

/// Pixels for one refinement step. `I_t` and `I_prev` come from the current
/// model and the snapshot, neither attached to enhancement weights.
pub fn make_refinement_batch(
    current: &EnhancementModel,
    previous: Option<&EnhancementModel>,
    well_lit: &Tensor,
    backlit: &Tensor,
) -> Result<RefinementBatch> {
    let previous = previous.ok_or_else(|| {
        Error::InvalidInput("refinement needs a previous enhancement snapshot".into())
    })?;
    let enhanced = enhance_tensor(&Frozen(current), backlit)?.enhanced.detach();
    let prev = enhance_tensor(&Frozen(previous), backlit)?
        .enhanced
        .detach();
    Ok(RefinementBatch {
        well_lit: well_lit.clone(),
        backlit: backlit.clone(),
        enhanced,
        previous: prev,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    IdentityOnly,
    Rave,
    Clip,
}

pub struct Trainer {
    cfg: TrainConfig,
    handle: BackendHandle,
    layers: LayerSelection,
    alpha: Vec<f64>,
    model: EnhancementModel,
    opt_enhance: Adam,
    guidance: Option<GuidancePair>,
    opt_guidance: Option<Adam>,
    projected: Option<(Tensor, Tensor)>,
    snapshot: Option<EnhancementModel>,
    residual: Option<(Tensor, f64)>,
    data: TrainData,
    position: Position,
    global_step: u64,
    manifest: RunManifest,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    /// A fresh run. `residual` is required for RAVE and ignored otherwise.
    /// Checkpoints and the manifest go to `out_dir` when given.
    pub fn new(
        cfg: TrainConfig,
        handle: BackendHandle,
        data: TrainData,
        residual: Option<&ResidualVector>,
        out_dir: Option<PathBuf>,
    ) -> Result<Self> {
        cfg.validate()?;
        let kind = cfg.method.guidance_kind();
        if kind == Some(crate::guidance::GuidanceKind::TokenSpace) && !handle.has_text_tower() {
            return Err(Error::NoTextTower(handle.model_id().to_string()));
        }
        let layers = if cfg.layers.is_empty() {
            handle.default_selection()
        } else {
            LayerSelection(cfg.layers.clone())
        };
        handle.validate_layers(&layers)?;
        let alpha = if cfg.alpha.is_empty() {
            vec![1.0; layers.len()]
        } else {
            cfg.alpha.clone()
        };
        losses::LossConfig {
            omega: cfg.omega,
            alpha: alpha.clone(),
            margins: cfg.margins,
            normalize_image_embedding: cfg.normalize_residual_embedding,
        }
        .validate(layers.len())?;
        let residual_t = match (cfg.method, residual) {
            (Method::Rave, Some(rv)) => {
                check_backend(&handle, rv)?;
                if !rv.backend_checksum.is_empty()
                    && rv.backend_checksum != handle.weight_checksum()
                {
                    return Err(Error::Config(
                        "residual was computed with different backend weights".into(),
                    ));
                }
                Some((rv.residual_tensor(&handle)?, rv.target_projection()))
            }
            (Method::Rave, None) => {
                return Err(Error::Config(
                    "rave training needs a residual vector".into(),
                ))
            }
            _ => None,
        };
        for (name, set, need) in [
            (
                "backlit",
                &data.backlit,
                if kind.is_some() {
                    cfg.batch_enhance.max(cfg.batch_guidance)
                } else {
                    cfg.batch_enhance
                },
            ),
            (
                "well-lit",
                &data.well_lit,
                if kind.is_some() {
                    cfg.batch_guidance
                } else {
                    1
                },
            ),
        ] {
            if set.len() < need {
                return Err(Error::Config(format!(
                    "{name} corpus has {} images, fewer than the batch size {need}",
                    set.len()
                )));
            }
            if set.size() != cfg.train_size {
                return Err(Error::Config(format!(
                    "{name} images are prepared at {} but train_size is {}",
                    set.size(),
                    cfg.train_size
                )));
            }
        }
        let (device, dtype) = (handle.device().clone(), handle.dtype());
        let model = EnhancementModel::build(&cfg.unet, cfg.seed, &device, dtype)?;
        let opt_enhance = Adam::new(
            model.params(),
            AdamConfig::new(cfg.lr_enhance, cfg.adam_betas),
        )?;
        let guidance = match kind {
            Some(k) => Some(init_guidance(k, cfg.seed, &handle, cfg.token_count)?),
            None => None,
        };
        let opt_guidance = match &guidance {
            Some(g) => Some(Adam::new(
                g.params(),
                AdamConfig::new(cfg.lr_guidance, cfg.adam_betas),
            )?),
            None => None,
        };
        let manifest = RunManifest {
            config: cfg.to_map(),
            backend_model_id: handle.model_id().to_string(),
            backend_checksum: handle.weight_checksum().to_string(),
            dataset_fingerprint: data.fingerprint.clone(),
            residual_dataset_fingerprint: residual
                .filter(|_| cfg.method == Method::Rave)
                .map(|rv| rv.dataset_fingerprint.clone()),
            initial_model_checksum: model.checksum()?,
            guidance_init_steps: None,
            losses: Vec::new(),
            checkpoints: Vec::new(),
        };
        let position = if cfg.method == Method::Rave {
            Position::Enhance { iter: 0 }
        } else {
            Position::GuidanceInit { step: 0 }
        };
        if let Some(dir) = &out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut trainer = Self {
            cfg,
            handle,
            layers,
            alpha,
            model,
            opt_enhance,
            guidance,
            opt_guidance,
            projected: None,
            snapshot: None,
            residual: residual_t,
            data,
            position,
            global_step: 0,
            manifest,
            out_dir,
        };
        trainer.settle()?;
        Ok(trainer)
    }

    /// Continues a run from a checkpoint written by [`Trainer::new`]'s run.
    pub fn resume(
        checkpoint: &Path,
        handle: BackendHandle,
        data: TrainData,
        residual: Option<&ResidualVector>,
        out_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
        let state = decode_checkpoint(&bytes)?;
        let cfg = TrainConfig::from_map(&state.manifest.config)?;
        if state.manifest.backend_model_id != handle.model_id()
            || state.manifest.backend_checksum != handle.weight_checksum()
        {
            return Err(Error::Config(format!(
                "checkpoint was trained with backend `{}`; `{}` is loaded with different weights",
                state.manifest.backend_model_id,
                handle.model_id()
            )));
        }
        if state.manifest.dataset_fingerprint != data.fingerprint {
            return Err(Error::Corpus(
                "training data differs from the checkpointed run".into(),
            ));
        }
        let mut t = Self::new(cfg, handle, data, residual, out_dir)?;
        let (device, dtype) = (t.handle.device().clone(), t.handle.dtype());
        let cast = |v: &[(String, Tensor)]| -> Result<Vec<(String, Tensor)>> {
            v.iter()
                .map(|(n, x)| Ok((n.clone(), x.to_device(&device)?.to_dtype(dtype)?)))
                .collect()
        };
        let cast_state = |s: &AdamState| -> Result<AdamState> {
            let conv = |v: &[Tensor]| -> Result<Vec<Tensor>> {
                v.iter()
                    .map(|x| Ok(x.to_device(&device)?.to_dtype(dtype)?))
                    .collect()
            };
            Ok(AdamState {
                step: s.step,
                first: conv(&s.first)?,
                second: conv(&s.second)?,
            })
        };
        t.model = model_from_state(&state, &t.cfg.unet, &device, dtype)?;
        t.model.params().load(&cast(&state.model)?)?;
        t.opt_enhance.set_state(cast_state(&state.adam_enhance)?)?;
        match (&t.guidance, &mut t.opt_guidance, &state.adam_guidance) {
            (Some(g), Some(opt), Some(s)) => {
                g.params().load(&cast(&state.guidance)?)?;
                opt.set_state(cast_state(s)?)?;
            }
            (None, None, None) => {}
            _ => {
                return Err(Error::Format(
                    "checkpoint guidance state does not match the method".into(),
                ))
            }
        }
        t.snapshot = match &state.snapshot {
            Some(s) => {
                let m = EnhancementModel::build(&t.cfg.unet, 0, &device, dtype)?;
                m.params().load(&cast(s)?)?;
                Some(m)
            }
            None => None,
        };
        t.position = state.position;
        t.global_step = state.global_step;
        t.manifest = state.manifest;
        t.projected = None;
        let file = checkpoint
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        if t.manifest.checkpoints.last().map(|c| c.step) != Some(t.global_step) {
            t.manifest.push_checkpoint(CheckpointEntry {
                step: t.global_step,
                file,
                sha256: ops::sha256_hex(&bytes),
            });
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &EnhancementModel {
        &self.model
    }

    pub fn guidance(&self) -> Option<&GuidancePair> {
        self.guidance.as_ref()
    }

    pub fn snapshot(&self) -> Option<&EnhancementModel> {
        self.snapshot.as_ref()
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn position(&self) -> Position {
        self.position
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn handle(&self) -> &BackendHandle {
        &self.handle
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn layers(&self) -> &LayerSelection {
        &self.layers
    }

    pub fn is_done(&self) -> bool {
        self.position == Position::Done
    }

    fn seed(&self, tag: u64, round: u32) -> u64 {
        ops::derive_seed(&[self.cfg.seed, tag, round as u64])
    }

    fn epoch_steps(&self, batch: usize) -> u64 {
        (self.data.backlit.len() / batch).max(1) as u64
    }

    fn batch(
        &self,
        set: &TrainingSet,
        size: usize,
        tag: u64,
        round: u32,
        step: u64,
    ) -> Result<Tensor> {
        Ok(training_batch(
            set,
            None,
            size,
            &self.cfg.augment,
            self.seed(tag, round),
            step,
            self.handle.device(),
            self.handle.dtype(),
        )?
        .inputs)
    }

    /// Advances past phases that have nothing left to do.
    fn settle(&mut self) -> Result<()> {
        loop {
            let next = match self.position {
                Position::GuidanceInit { step } if step >= self.cfg.guidance_init_max_steps => {
                    self.manifest.guidance_init_steps = Some(step);
                    Position::Enhance { iter: 0 }
                }
                Position::Enhance { iter } if iter >= self.cfg.total_iters => {
                    if self.cfg.refine_rounds > 0 {
                        self.snapshot = Some(self.model.duplicate()?);
                        Position::RefineGuidance { round: 1, step: 0 }
                    } else {
                        Position::Done
                    }
                }
                Position::RefineGuidance { round, step }
                    if step >= self.epoch_steps(self.cfg.batch_guidance) =>
                {
                    self.snapshot = Some(self.model.duplicate()?);
                    Position::RefineEnhance { round, step: 0 }
                }
                Position::RefineEnhance { round, step }
                    if step >= self.epoch_steps(self.cfg.batch_enhance) =>
                {
                    if round < self.cfg.refine_rounds {
                        Position::RefineGuidance {
                            round: round + 1,
                            step: 0,
                        }
                    } else {
                        Position::Done
                    }
                }
                _ => return Ok(()),
            };
            self.position = next;
        }
    }

    /// Runs one optimizer step of the current phase. `None` once the run is done.
    pub fn step(&mut self) -> Result<Option<LossRecord>> {
        let record = match self.position {
            Position::Done => return Ok(None),
            Position::GuidanceInit { step } => {
                let rec = self.guidance_init(step)?;
                self.position = if rec.total < self.cfg.guidance_init_threshold {
                    self.manifest.guidance_init_steps = Some(step + 1);
                    Position::Enhance { iter: 0 }
                } else {
                    Position::GuidanceInit { step: step + 1 }
                };
                rec
            }
            Position::Enhance { iter } => {
                let pixels = self.batch(
                    &self.data.backlit,
                    self.cfg.batch_enhance,
                    TAG_ENHANCE,
                    0,
                    iter,
                )?;
                let objective = match self.cfg.method {
                    Method::Rave => Objective::Rave,
                    _ if iter < self.cfg.warmup_identity_iters => Objective::IdentityOnly,
                    _ => Objective::Clip,
                };
                let rec = self.enhancement_step("enhance", &pixels, objective)?;
                self.position = Position::Enhance { iter: iter + 1 };
                rec
            }
            Position::RefineGuidance { round, step } => {
                let rec = self.refine_guidance(round, step)?;
                self.position = Position::RefineGuidance {
                    round,
                    step: step + 1,
                };
                rec
            }
            Position::RefineEnhance { round, step } => {
                let pixels = self.batch(
                    &self.data.backlit,
                    self.cfg.batch_enhance,
                    TAG_REFINE_ENHANCE,
                    round,
                    step,
                )?;
                let rec = self.enhancement_step("refine_enhance", &pixels, Objective::Clip)?;
                self.position = Position::RefineEnhance {
                    round,
                    step: step + 1,
                };
                rec
            }
        };
        self.global_step += 1;
        self.manifest.push_loss(record.clone());
        self.settle()?;
        let every = self.cfg.checkpoint_every;
        let due = every > 0 && self.global_step % every == 0;
        let last = self.manifest.checkpoints.last().map(|c| c.step);
        if self.out_dir.is_some() && (due || (self.is_done() && last != Some(self.global_step))) {
            self.write_checkpoint()?;
        }
        Ok(Some(record))
    }

    /// Runs to completion, handing each record to `on_record`.
    pub fn run_with(&mut self, mut on_record: impl FnMut(&LossRecord)) -> Result<()> {
        while let Some(rec) = self.step()? {
            on_record(&rec);
        }
        if let Some(dir) = &self.out_dir {
            self.manifest.write(&dir.join(MANIFEST_FILE))?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| {})
    }

    pub fn state(&self) -> Result<CheckpointState> {
        Ok(CheckpointState {
            unet: self.cfg.unet.clone(),
            position: self.position,
            global_step: self.global_step,
            model: self.model.params().snapshot(),
            snapshot: self.snapshot.as_ref().map(|s| s.params().snapshot()),
            guidance_kind: self.guidance.as_ref().map(|g| g.kind().to_string()),
            guidance: self
                .guidance
                .as_ref()
                .map(|g| g.params().snapshot())
                .unwrap_or_default(),
            adam_enhance: self.opt_enhance.state().clone(),
            adam_guidance: self.opt_guidance.as_ref().map(|o| o.state().clone()),
            manifest: self.manifest.clone(),
        })
    }

    /// Writes `ckpt-<step>.safetensors` and the manifest; returns the checkpoint path.
    pub fn write_checkpoint(&mut self) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .ok_or_else(|| Error::Config("no output directory configured".into()))?;
        let file = format!("ckpt-{:08}.safetensors", self.global_step);
        let path = dir.join(&file);
        let sha256 = save_checkpoint(&self.state()?, &path)?;
        self.manifest.push_checkpoint(CheckpointEntry {
            step: self.global_step,
            file,
            sha256,
        });
        self.manifest.write(&dir.join(MANIFEST_FILE))?;
        Ok(path)
    }

    fn guidance_init(&mut self, step: u64) -> Result<LossRecord> {
        let bg = self.cfg.batch_guidance;
        let back = self.batch(&self.data.backlit, bg, TAG_INIT_BACKLIT, 0, step)?;
        let well = self.batch(&self.data.well_lit, bg, TAG_INIT_WELL, 0, step)?;
        let images = Tensor::cat(&[&back, &well], 0)?;
        let mut labels = vec![Lighting::Backlit; bg];
        labels.extend(std::iter::repeat_n(Lighting::WellLit, bg));
        let pair = self.guidance.as_ref().expect("guidance methods own a pair");
        let opt = self.opt_guidance.as_mut().expect("guidance optimizer");
        let loss = guidance_init_step(pair, &images, &labels, &self.handle, opt)?;
        self.projected = None;
        Ok(LossRecord {
            step: self.global_step,
            phase: "guidance_init".into(),
            identity: None,
            clip: None,
            residual: None,
            guidance: Some(loss),
            total: loss,
        })
    }

    fn refine_guidance(&mut self, round: u32, step: u64) -> Result<LossRecord> {
        let bg = self.cfg.batch_guidance;
        let back = self.batch(&self.data.backlit, bg, TAG_REFINE_BACKLIT, round, step)?;
        let well = self.batch(&self.data.well_lit, bg, TAG_REFINE_WELL, round, step)?;
        let batch = make_refinement_batch(&self.model, self.snapshot.as_ref(), &well, &back)?;
        let emb = RefinementEmbeddings::encode(&self.handle, &batch)?;
        let pair = self.guidance.as_ref().expect("guidance methods own a pair");
        let opt = self.opt_guidance.as_mut().expect("guidance optimizer");
        let loss = guidance_refine_step(pair, &emb, &self.handle, self.cfg.margins, opt)?;
        self.projected = None;
        Ok(LossRecord {
            step: self.global_step,
            phase: "refine_guidance".into(),
            identity: None,
            clip: None,
            residual: None,
            guidance: Some(loss),
            total: loss,
        })
    }

    fn projected_guidance(&mut self) -> Result<(Tensor, Tensor)> {
        if self.projected.is_none() {
            let pair = self.guidance.as_ref().expect("guidance methods own a pair");
            let (p, n) = pair.project(&self.handle)?;
            self.projected = Some((p.detach(), n.detach()));
        }
        Ok(self.projected.clone().expect("just set"))
    }

    fn enhancement_step(
        &mut self,
        phase: &str,
        pixels: &Tensor,
        objective: Objective,
    ) -> Result<LossRecord> {
        let out = enhance_tensor(&self.model, pixels)?;
        let final_stage = self.handle.stage_count() - 1;
        let mut stages = self.layers.0.clone();
        let final_idx = match objective {
            Objective::IdentityOnly => None,
            _ => Some(match stages.iter().position(|&s| s == final_stage) {
                Some(i) => i,
                None => {
                    stages.push(final_stage);
                    stages.len() - 1
                }
            }),
        };
        let acts_t = self
            .handle
            .encode_image_layers(&out.enhanced, &LayerSelection(stages))?;
        let acts_b = self.handle.encode_image_layers(pixels, &self.layers)?;
        let acts_b = LayerActivations {
            stages: acts_b.stages,
            per_layer: acts_b.per_layer.iter().map(|t| t.detach()).collect(),
        };
        let n = self.layers.len();
        let acts_t_id = LayerActivations {
            stages: acts_t.stages[..n].to_vec(),
            per_layer: acts_t.per_layer[..n].to_vec(),
        };
        let identity = losses::identity_loss(&acts_b, &acts_t_id, &self.alpha)?.mean_all()?;
        let (total, clip, residual) = match objective {
            Objective::IdentityOnly => (identity.clone(), None, None),
            Objective::Rave => {
                let emb = &acts_t.per_layer[final_idx.expect("final stage requested")];
                let (v, target) = self.residual.as_ref().expect("rave owns a residual");
                let r =
                    losses::residual_loss(emb, v, *target, self.cfg.normalize_residual_embedding)?
                        .mean_all()?;
                (
                    losses::rave_loss(&identity, &r, self.cfg.omega)?,
                    None,
                    Some(r),
                )
            }
            Objective::Clip => {
                let emb = acts_t.per_layer[final_idx.expect("final stage requested")].clone();
                let (pos, neg) = self.projected_guidance()?;
                let c = losses::clip_guidance_loss(&emb, &pos, &neg)?.mean_all()?;
                (
                    losses::enhance_loss(&c, &identity, self.cfg.omega)?,
                    Some(c),
                    None,
                )
            }
        };
        let grads = total.backward()?;
        self.opt_enhance.step(self.model.params(), &grads)?;
        let scalar = |t: &Tensor| ops::to_f64_scalar(t);
        Ok(LossRecord {
            step: self.global_step,
            phase: phase.into(),
            identity: Some(scalar(&identity)?),
            clip: clip.as_ref().map(scalar).transpose()?,
            residual: residual.as_ref().map(scalar).transpose()?,
            guidance: None,
            total: scalar(&total)?,
        })
    }
}

/// Mean residual loss of `model`'s output on `pixels`, without gradients.
pub fn residual_loss_on(
    model: &EnhancementModel,
    handle: &BackendHandle,
    rv: &ResidualVector,
    pixels: &Tensor,
    normalize: bool,
) -> Result<f64> {
    let out = enhance_tensor(&Frozen(model), pixels)?.enhanced;
    let emb = handle.encode_image(&out)?;
    let v = rv.residual_tensor(handle)?;
    ops::to_f64_scalar(
        &losses::residual_loss(&emb, &v, rv.target_projection(), normalize)?.mean_all()?,
    )
}

/// Mean enhanced pixel value of `model` on `pixels`.
pub fn mean_enhanced(model: &EnhancementModel, pixels: &Tensor) -> Result<f64> {
    let out = enhance_tensor(&Frozen(model), pixels)?.enhanced;
    ops::to_f64_scalar(&out.mean_all()?)
}

/// Per-image `S(I)` under `pair`.
pub fn scores(pair: &GuidancePair, handle: &BackendHandle, pixels: &Tensor) -> Result<Vec<f64>> {
    let emb = handle.encode_image(pixels)?.detach();
    ops::to_f64_vec(&pair.score(handle, &emb)?)
}

/// Device and dtype a trainer on `handle` uses.
pub fn training_device(handle: &BackendHandle) -> (Device, DType) {
    (handle.device().clone(), handle.dtype())
}
