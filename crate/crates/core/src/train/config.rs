use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::enhance::UNetConfig;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceKind, DEFAULT_TOKEN_COUNT};
use crate::losses::Margins;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rave,
    ClipLit,
    ClipLitLatent,
}

impl Method {
    pub fn guidance_kind(self) -> Option<GuidanceKind> {
        match self {
            Method::Rave => None,
            Method::ClipLit => Some(GuidanceKind::TokenSpace),
            Method::ClipLitLatent => Some(GuidanceKind::LatentSpace),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rave => "rave",
            Method::ClipLit => "clip-lit",
            Method::ClipLitLatent => "clip-lit-latent",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "rave" => Ok(Method::Rave),
            "clip-lit" => Ok(Method::ClipLit),
            "clip-lit-latent" => Ok(Method::ClipLitLatent),
            _ => Err(Error::Config(format!(
                "unknown method `{s}` (expected rave, clip-lit or clip-lit-latent)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Supervised,
    Unsupervised,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Supervised => "supervised",
            Setting::Unsupervised => "unsupervised",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Setting::Supervised),
            "unsupervised" => Ok(Setting::Unsupervised),
            _ => Err(Error::Config(format!("unknown setting `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub setting: Setting,
    pub backend: String,
    pub omega: f64,
    pub lr_enhance: f64,
    pub lr_guidance: f64,
    pub batch_enhance: usize,
    pub batch_guidance: usize,
    /// Stage-one enhancement iterations (the whole run for RAVE).
    pub total_iters: u64,
    pub warmup_identity_iters: u64,
    pub margins: Margins,
    pub refine_rounds: u32,
    pub seed: u64,
    /// Global optimizer steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub adam_betas: (f64, f64),
    pub guidance_init_threshold: f64,
    pub guidance_init_max_steps: u64,
    pub token_count: usize,
    /// Backend stages for the identity loss; empty selects the backend default.
    pub layers: Vec<usize>,
    /// One weight per identity-loss stage; empty means 1 for each.
    pub alpha: Vec<f64>,
    pub normalize_residual_embedding: bool,
    pub unet: UNetConfig,
    pub train_size: usize,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn defaults(method: Method) -> Self {
        let rave = method == Method::Rave;
        Self {
            method,
            setting: Setting::Supervised,
            backend: "vit-b-32".into(),
            omega: if rave { 6.0 } else { 0.9 },
            lr_enhance: 2e-5,
            lr_guidance: 5e-6,
            batch_enhance: if rave { 8 } else { 16 },
            batch_guidance: 8,
            total_iters: if rave { 10_000 } else { 50_000 },
            warmup_identity_iters: if rave { 0 } else { 1000 },
            margins: Margins::DEFAULT,
            refine_rounds: if rave { 0 } else { 10 },
            seed: 0,
            checkpoint_every: 1000,
            adam_betas: (0.9, 0.99),
            guidance_init_threshold: 0.05,
            guidance_init_max_steps: 5000,
            token_count: DEFAULT_TOKEN_COUNT,
            layers: Vec::new(),
            alpha: Vec::new(),
            normalize_residual_embedding: true,
            unet: UNetConfig::default(),
            train_size: crate::data::DEFAULT_TRAIN_SIZE,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr_enhance", self.lr_enhance)?;
        positive("lr_guidance", self.lr_guidance)?;
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!(
                "omega must be non-negative, got {}",
                self.omega
            )));
        }
        if self.batch_enhance == 0 || self.batch_guidance == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be positive".into()));
        }
        for (name, b) in [
            ("adam beta1", self.adam_betas.0),
            ("adam beta2", self.adam_betas.1),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.method == Method::Rave && self.warmup_identity_iters > 0 {
            return Err(Error::Config(
                "rave has no identity warmup; set warmup_identity_iters = 0".into(),
            ));
        }
        if self.method == Method::Rave && self.refine_rounds > 0 {
            return Err(Error::Config(
                "rave is single-stage; refine_rounds must be 0".into(),
            ));
        }
        if !self.alpha.is_empty()
            && !self.layers.is_empty()
            && self.alpha.len() != self.layers.len()
        {
            return Err(Error::Config(format!(
                "{} alpha weights for {} layers",
                self.alpha.len(),
                self.layers.len()
            )));
        }
        if self.token_count == 0 {
            return Err(Error::Config("token_count must be at least 1".into()));
        }
        self.margins.validate()?;
        self.unet.validate()?;
        self.augment.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "method" => {
                let m: Method = v.parse()?;
                if m != self.method {
                    return Err(Error::Config(format!(
                        "method `{m}` conflicts with the selected method `{}`",
                        self.method
                    )));
                }
            }
            "setting" => self.setting = v.parse()?,
            "backend" => self.backend = v.to_string(),
            "omega" => self.omega = num(key, v)?,
            "lr_enhance" => self.lr_enhance = num(key, v)?,
            "lr_guidance" => self.lr_guidance = num(key, v)?,
            "batch_enhance" => self.batch_enhance = num(key, v)?,
            "batch_guidance" => self.batch_guidance = num(key, v)?,
            "total_iters" => self.total_iters = num(key, v)?,
            "warmup_identity_iters" => self.warmup_identity_iters = num(key, v)?,
            "margins" => {
                let m = list::<f64>(key, v)?;
                if m.len() != 3 {
                    return Err(Error::Config("margins needs three values m0,m1,m2".into()));
                }
                self.margins = Margins::new(m[0], m[1], m[2])?;
            }
            "refine_rounds" => self.refine_rounds = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "adam_betas" => {
                let b = list::<f64>(key, v)?;
                if b.len() != 2 {
                    return Err(Error::Config("adam_betas needs two values".into()));
                }
                self.adam_betas = (b[0], b[1]);
            }
            "guidance_init_threshold" => self.guidance_init_threshold = num(key, v)?,
            "guidance_init_max_steps" => self.guidance_init_max_steps = num(key, v)?,
            "token_count" => self.token_count = num(key, v)?,
            "layers" => self.layers = list(key, v)?,
            "alpha" => self.alpha = list(key, v)?,
            "normalize_residual_embedding" => self.normalize_residual_embedding = boolean(key, v)?,
            "unet_depth" => self.unet.depth = num(key, v)?,
            "unet_channels" => self.unet.base_channels = num(key, v)?,
            "unet_init_illumination" => self.unet.init_illumination = num(key, v)?,
            "train_size" => self.train_size = num(key, v)?,
            "augment" => self.augment.enabled = boolean(key, v)?,
            "augment_flip_prob" => self.augment.flip_prob = num(key, v)?,
            "augment_zoom" => {
                let z = list::<f64>(key, v)?;
                if z.len() != 2 {
                    return Err(Error::Config("augment_zoom needs two values".into()));
                }
                self.augment.zoom = (z[0], z[1]);
            }
            "augment_rotation_deg" => self.augment.rotation_deg = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every setting as `key → value`; feeding these back through [`set`](Self::set)
    /// reproduces the config.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let join = |v: &[String]| v.join(",");
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("method", self.method.to_string());
        put("setting", self.setting.to_string());
        put("backend", self.backend.clone());
        put("omega", self.omega.to_string());
        put("lr_enhance", self.lr_enhance.to_string());
        put("lr_guidance", self.lr_guidance.to_string());
        put("batch_enhance", self.batch_enhance.to_string());
        put("batch_guidance", self.batch_guidance.to_string());
        put("total_iters", self.total_iters.to_string());
        put(
            "warmup_identity_iters",
            self.warmup_identity_iters.to_string(),
        );
        put(
            "margins",
            format!(
                "{},{},{}",
                self.margins.m0, self.margins.m1, self.margins.m2
            ),
        );
        put("refine_rounds", self.refine_rounds.to_string());
        put("seed", self.seed.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put(
            "adam_betas",
            format!("{},{}", self.adam_betas.0, self.adam_betas.1),
        );
        put(
            "guidance_init_threshold",
            self.guidance_init_threshold.to_string(),
        );
        put(
            "guidance_init_max_steps",
            self.guidance_init_max_steps.to_string(),
        );
        put("token_count", self.token_count.to_string());
        put(
            "layers",
            join(
                &self
                    .layers
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>(),
            ),
        );
        put(
            "alpha",
            join(&self.alpha.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
        );
        put(
            "normalize_residual_embedding",
            self.normalize_residual_embedding.to_string(),
        );
        put("unet_depth", self.unet.depth.to_string());
        put("unet_channels", self.unet.base_channels.to_string());
        put(
            "unet_init_illumination",
            self.unet.init_illumination.to_string(),
        );
        put("train_size", self.train_size.to_string());
        put("augment", self.augment.enabled.to_string());
        put("augment_flip_prob", self.augment.flip_prob.to_string());
        put(
            "augment_zoom",
            format!("{},{}", self.augment.zoom.0, self.augment.zoom.1),
        );
        put(
            "augment_rotation_deg",
            self.augment.rotation_deg.to_string(),
        );
        m
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let method: Method = map
            .get("method")
            .ok_or_else(|| Error::Config("config has no method".into()))?
            .parse()?;
        let mut cfg = Self::defaults(method);
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse `{v}` for `{key}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| num(key, p))
        .collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}` expects a boolean, got `{v}`"
        ))),
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
