//! Float RGB images in `[0, 1]` and their conversion to and from tensors and files.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};

/// An `H×W×3` image stored row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for a {height}x{width}x3 image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.pixel(y, self.width - 1 - x)
        })
    }

    /// Bicubic (Catmull-Rom) resize, clamped back into `[0, 1]`.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("cannot resize to {height}x{width}")));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let buf: Rgb32FImage =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        let out =
            image::imageops::resize(&buf, width as u32, height as u32, FilterType::CatmullRom);
        Ok(Self::new(height, width, out.into_raw())?.clamp01())
    }

    /// Resize so the longer side equals `long_side`, keeping the aspect ratio.
    pub fn resize_long_side(&self, long_side: usize) -> Result<Self> {
        let (h, w) = long_side_dims(self.height, self.width, long_side)?;
        self.resize(h, w)
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .unsqueeze(0)?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => {
                return Err(Error::Shape(format!(
                    "expected rank 3 or 4 image tensor, got rank {r}"
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        Ok(Self::new(h as usize, w as usize, rgb.into_raw())?.clamp01())
    }

    /// Writes 8-bit sRGB; the container format follows the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img: RgbImage =
            ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, bytes)
                .expect("buffer length checked at construction");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Output dimensions `(h, w)` when scaling the longer side to `long_side`.
pub fn long_side_dims(height: usize, width: usize, long_side: usize) -> Result<(usize, usize)> {
    if long_side == 0 {
        return Err(Error::InvalidInput("long side must be positive".into()));
    }
    let scale = long_side as f64 / height.max(width) as f64;
    let h = ((height as f64 * scale).round() as usize).max(1);
    let w = ((width as f64 * scale).round() as usize).max(1);
    Ok(if height >= width {
        (long_side, w)
    } else {
        (h, long_side)
    })
}

/// Stacks equally sized images into a `(B, 3, H, W)` tensor.
pub fn batch_to_tensor(images: &[ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let mut parts = Vec::with_capacity(images.len());
    for img in images {
        if img.height != first.height || img.width != first.width {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} images",
                first.height, first.width, img.height, img.width
            )));
        }
        parts.push(img.to_tensor(device, dtype)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let b = t.dim(0)?;
    (0..b)
        .map(|i| ImageTensor::from_tensor(&t.get(i)?))
        .collect()
}
