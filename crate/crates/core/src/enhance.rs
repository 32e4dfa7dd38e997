//! The enhancement network: a UNet predicting a one-channel illumination map
//! `I_i`, and the division `I_t = I_b / I_i` that produces the enhanced image.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{long_side_dims, ImageTensor};
use crate::ops;
use crate::optim::ParamSet;

/// Floor applied to the illumination map before dividing; caps amplification at `1/ε`.
pub const ILLUMINATION_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of 2× downsampling steps.
    pub depth: usize,
    pub base_channels: usize,
    /// Illumination value the untrained network starts from.
    pub init_illumination: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 32,
            init_illumination: 0.5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("unet depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config(
                "unet base_channels must be at least 1".into(),
            ));
        }
        if !(self.init_illumination > 0.0 && self.init_illumination < 1.0) {
            return Err(Error::Config("init_illumination must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Anything that maps `(B, 3, H, W)` backlit pixels to a `(B, 1, H, W)` illumination map in `(0, 1]`.
pub trait Enhancer {
    fn illumination(&self, pixels: &Tensor) -> Result<Tensor>;
}

/// Outputs the same illumination everywhere. `ConstantIllumination(1.0)` is the identity enhancer.
#[derive(Debug, Clone, Copy)]
pub struct ConstantIllumination(pub f64);

impl Enhancer for ConstantIllumination {
    fn illumination(&self, pixels: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = pixels.dims4()?;
        Ok(Tensor::full(self.0, (b, 1, h, w), pixels.device())?.to_dtype(pixels.dtype())?)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: usize,
    bias: usize,
    padding: usize,
}

#[derive(Debug)]
pub struct EnhancementModel {
    config: UNetConfig,
    params: ParamSet,
    vars: Vec<Var>,
    encoder: Vec<[Conv; 2]>,
    decoder: Vec<[Conv; 2]>,
    head: Conv,
}

impl EnhancementModel {
    /// Deterministic He-normal initialization from `seed`.
    pub fn build(config: &UNetConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ops::seeded_rng(ops::derive_seed(&[0x0e7, seed]));
        let mut params = ParamSet::new();
        let mut vars = Vec::new();
        let mut add = |name: String, t: Tensor| -> Result<usize> {
            let v = Var::from_tensor(&t)?;
            params.push(name, v.clone());
            vars.push(v);
            Ok(vars.len() - 1)
        };
        let mut conv = |name: &str,
                        cin: usize,
                        cout: usize,
                        k: usize,
                        add: &mut dyn FnMut(String, Tensor) -> Result<usize>|
         -> Result<Conv> {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let w = ops::normal_tensor(&mut rng, &[cout, cin, k, k], std, device, dtype)?;
            let b = Tensor::zeros(cout, dtype, device)?;
            Ok(Conv {
                weight: add(format!("{name}.weight"), w)?,
                bias: add(format!("{name}.bias"), b)?,
                padding: k / 2,
            })
        };
        let ch = |level: usize| config.base_channels << level;
        let mut encoder = Vec::new();
        for level in 0..=config.depth {
            let cin = if level == 0 { 3 } else { ch(level - 1) };
            encoder.push([
                conv(&format!("enc{level}.0"), cin, ch(level), 3, &mut add)?,
                conv(&format!("enc{level}.1"), ch(level), ch(level), 3, &mut add)?,
            ]);
        }
        let mut decoder = Vec::new();
        for level in (0..config.depth).rev() {
            decoder.push([
                conv(
                    &format!("dec{level}.0"),
                    ch(level + 1) + ch(level),
                    ch(level),
                    3,
                    &mut add,
                )?,
                conv(&format!("dec{level}.1"), ch(level), ch(level), 3, &mut add)?,
            ]);
        }
        let logit = (config.init_illumination / (1.0 - config.init_illumination)).ln();
        let head_w = ops::normal_tensor(&mut rng, &[1, ch(0), 1, 1], 1e-3, device, dtype)?;
        let head_b = Tensor::full(logit, 1, device)?.to_dtype(dtype)?;
        let head = Conv {
            weight: add("head.weight".into(), head_w)?,
            bias: add("head.bias".into(), head_b)?,
            padding: 0,
        };
        Ok(Self {
            config: config.clone(),
            params,
            vars,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    pub fn dtype(&self) -> DType {
        self.vars[0].dtype()
    }

    pub fn device(&self) -> &Device {
        self.vars[0].device()
    }

    /// An independent copy with identical weights.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = Self::build(&self.config, 0, self.device(), self.dtype())?;
        copy.params.load(&self.params.snapshot())?;
        Ok(copy)
    }

    fn conv(&self, x: &Tensor, c: &Conv, track: bool) -> Result<Tensor> {
        let get = |i: usize| {
            let t = self.vars[i].as_tensor();
            if track {
                t.clone()
            } else {
                t.detach()
            }
        };
        let y = x.conv2d(&get(c.weight), c.padding, 1, 1, 1)?;
        Ok(y.broadcast_add(&get(c.bias).reshape((1, (), 1, 1))?)?)
    }

    fn block(&self, x: &Tensor, convs: &[Conv; 2], track: bool) -> Result<Tensor> {
        let h = self.conv(x, &convs[0], track)?.relu()?;
        Ok(self.conv(&h, &convs[1], track)?.relu()?)
    }

    /// Pre-sigmoid illumination logits, `(B, 1, H, W)`. Inputs whose sides are
    /// not multiples of `2^depth` are edge-padded and the output cropped back.
    pub fn logits(&self, pixels: &Tensor, track: bool) -> Result<Tensor> {
        let (_, c, h, w) = pixels.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let m = 1usize << self.config.depth;
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut x = pixels.to_dtype(self.dtype())?;
        if ph != h {
            x = x.pad_with_same(2, 0, ph - h)?;
        }
        if pw != w {
            x = x.pad_with_same(3, 0, pw - w)?;
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut hcur = self.block(&x, &self.encoder[0], track)?;
        for level in 1..=self.config.depth {
            skips.push(hcur.clone());
            hcur = self.block(&hcur.avg_pool2d(2)?, &self.encoder[level], track)?;
        }
        for convs in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let up = upsample2x(&hcur)?;
            hcur = self.block(&Tensor::cat(&[&up, &skip], 1)?, convs, track)?;
        }
        let out = self.conv(&hcur, &self.head, track)?;
        Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// Illumination without recording gradients into the weights.
    pub fn illumination_detached(&self, pixels: &Tensor) -> Result<Tensor> {
        ops::sigmoid(&self.logits(pixels, false)?)
    }
}

impl Enhancer for EnhancementModel {
    fn illumination(&self, pixels: &Tensor) -> Result<Tensor> {
        ops::sigmoid(&self.logits(pixels, true)?)
    }
}

/// Weights of a model that receive no gradient (inference and snapshots).
pub struct Frozen<'a>(pub &'a EnhancementModel);

impl Enhancer for Frozen<'_> {
    fn illumination(&self, pixels: &Tensor) -> Result<Tensor> {
        self.0.illumination_detached(pixels)
    }
}

/// Bilinear 2× upsampling (half-pixel centers, edge clamp) along both spatial axes.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let x = upsample_axis(x, 3)?;
    upsample_axis(&x, 2)
}

fn upsample_axis(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let (prev, next) = if n == 1 {
        (x.clone(), x.clone())
    } else {
        (
            Tensor::cat(&[&x.narrow(dim, 0, 1)?, &x.narrow(dim, 0, n - 1)?], dim)?,
            Tensor::cat(&[&x.narrow(dim, 1, n - 1)?, &x.narrow(dim, n - 1, 1)?], dim)?,
        )
    };
    let even = ((x * 0.75)? + (prev * 0.25)?)?;
    let odd = ((x * 0.75)? + (next * 0.25)?)?;
    let stacked = Tensor::stack(&[&even, &odd], dim + 1)?;
    let mut shape = x.dims().to_vec();
    shape[dim] *= 2;
    Ok(stacked.reshape(shape)?)
}

/// Illumination map and enhanced image for a batch, both still on the tape.
#[derive(Debug, Clone)]
pub struct EnhancedBatch {
    pub illumination: Tensor,
    pub enhanced: Tensor,
}

/// `I_t = clamp(I_b / max(I_i, ε), 0, 1)`.
pub fn enhance_tensor(enhancer: &dyn Enhancer, pixels: &Tensor) -> Result<EnhancedBatch> {
    let illumination = enhancer.illumination(pixels)?;
    let floor = illumination.maximum(ILLUMINATION_EPS)?;
    let enhanced = pixels
        .to_dtype(illumination.dtype())?
        .broadcast_div(&floor)?
        .clamp(0.0, 1.0)?;
    Ok(EnhancedBatch {
        illumination,
        enhanced,
    })
}

/// One-channel `H×W` illumination map.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct EnhancedPair {
    pub illumination: IlluminationMap,
    pub enhanced: ImageTensor,
}

pub fn enhance(
    enhancer: &dyn Enhancer,
    image: &ImageTensor,
    device: &Device,
    dtype: DType,
) -> Result<EnhancedPair> {
    if image.has_nan() {
        return Err(Error::InvalidInput("input image contains NaN".into()));
    }
    let x = image.to_tensor(device, dtype)?;
    let out = enhance_tensor(enhancer, &x)?;
    let illum = out
        .illumination
        .detach()
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(EnhancedPair {
        illumination: IlluminationMap {
            height: image.height(),
            width: image.width(),
            data: illum,
        },
        enhanced: ImageTensor::from_tensor(&out.enhanced.detach())?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnhanceFileReport {
    pub input_size: (usize, usize),
    pub processed_size: (usize, usize),
}

/// Loads an image, resizes its longer side to `long_side`, enhances it and
/// writes 8-bit output.
pub fn enhance_file(
    model: &EnhancementModel,
    input: &Path,
    output: &Path,
    long_side: usize,
) -> Result<EnhanceFileReport> {
    let image = ImageTensor::load(input)?;
    let (h, w) = long_side_dims(image.height(), image.width(), long_side)?;
    let resized = image.resize(h, w)?;
    let out = enhance(&Frozen(model), &resized, model.device(), model.dtype())?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    out.enhanced.save(output)?;
    Ok(EnhanceFileReport {
        input_size: (image.height(), image.width()),
        processed_size: (h, w),
    })
}
