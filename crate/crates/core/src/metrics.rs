//! Full-reference image quality metrics and the evaluation harness.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::backend::BackendHandle;
use crate::data::EvalItem;
use crate::enhance::{enhance, Enhancer};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::ImageTensor;
use crate::ops;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)` in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn luminance(img: &ImageTensor) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64)
        .collect()
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luminance with an 11×11 Gaussian window (σ = 1.5),
/// averaged over valid window positions.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let la = luminance(a);
    let lb = luminance(b);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, h, w, &k);
    let mu_b = filter_valid(&lb, h, w, &k);
    let aa = filter_valid(&prod(&la, &la), h, w, &k);
    let bb = filter_valid(&prod(&lb, &lb), h, w, &k);
    let ab = filter_valid(&prod(&la, &lb), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// A learned perceptual distance such as LPIPS.
pub trait PerceptualBackend {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

/// A feature network for set-level distribution metrics.
pub trait FeatureBackend {
    fn name(&self) -> &str;
    fn features(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

pub fn lpips(
    a: &ImageTensor,
    b: &ImageTensor,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<f64> {
    let backend =
        backend.ok_or_else(|| Error::MissingBackend("lpips needs a perceptual backend".into()))?;
    check_same_shape(a, b)?;
    backend.distance(a, b)
}

/// Uses image embeddings of a loaded backend as FID features.
pub struct EmbeddingFeatures {
    handle: BackendHandle,
}

impl EmbeddingFeatures {
    pub fn new(handle: BackendHandle) -> Self {
        Self { handle }
    }
}

impl FeatureBackend for EmbeddingFeatures {
    fn name(&self) -> &str {
        self.handle.model_id()
    }

    fn features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let x = image.to_tensor(self.handle.device(), self.handle.dtype())?;
        ops::to_f64_vec(&self.handle.encode_image(&x)?.detach().flatten_all()?)
    }
}

/// Rows are samples.
pub fn feature_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

/// Eigenvalues below this (relative to the largest magnitude) mean the
/// matrix is genuinely indefinite rather than rounding noise.
const PSD_TOLERANCE: f64 = 1e-6;

fn clipped_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-300);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::InvalidInput(
                "covariance is not positive semidefinite".into(),
            ));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clipped_eigen(m)?;
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * s * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to two feature sets (rows are samples).
pub fn fid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InvalidInput(
            "fid needs at least two samples per set".into(),
        ));
    }
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(Error::Shape("feature sets differ in dimension".into()));
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let root_a = sqrt_psd(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let tr_cross: f64 = clipped_eigen(&inner)?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Psnr,
    Ssim,
    Lpips,
    Fid,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Lpips => "lpips",
            Metric::Fid => "fid",
        }
    }

    fn needs_ground_truth(self) -> bool {
        !matches!(self, Metric::Fid)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            "lpips" => Ok(Metric::Lpips),
            "fid" => Ok(Metric::Fid),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Parses a comma-separated list of at least one metric; duplicates collapse.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Metric = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no metrics selected".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerImageMetrics {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub metrics: Vec<Metric>,
    pub per_image: Vec<PerImageMetrics>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub fid: Option<f64>,
}

fn column_mean(
    rows: &[PerImageMetrics],
    f: impl Fn(&PerImageMetrics) -> Option<f64>,
) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(f).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl MetricsReport {
    /// Builds the report; each mean is the arithmetic mean of its per-image column.
    pub fn from_rows(
        metrics: Vec<Metric>,
        per_image: Vec<PerImageMetrics>,
        fid: Option<f64>,
    ) -> Self {
        let psnr = column_mean(&per_image, |r| r.psnr);
        let ssim = column_mean(&per_image, |r| r.ssim);
        let lpips = column_mean(&per_image, |r| r.lpips);
        Self {
            metrics,
            per_image,
            psnr,
            ssim,
            lpips,
            fid,
        }
    }

    /// Aligned plain-text table: one row per image, then the means.
    pub fn to_table(&self) -> String {
        let cols: Vec<Metric> = self
            .metrics
            .iter()
            .copied()
            .filter(|m| *m != Metric::Fid)
            .collect();
        let name_w = self
            .per_image
            .iter()
            .map(|r| r.name.len())
            .chain(["image".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let cell = |v: Option<f64>| match v {
            Some(x) if x.is_infinite() => "inf".to_string(),
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        let pick = |r: &PerImageMetrics, m: Metric| match m {
            Metric::Psnr => r.psnr,
            Metric::Ssim => r.ssim,
            Metric::Lpips => r.lpips,
            Metric::Fid => None,
        };
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "image");
        for m in &cols {
            let _ = write!(out, "  {:>10}", m.name());
        }
        out.push('\n');
        for r in &self.per_image {
            let _ = write!(out, "{:<name_w$}", r.name);
            for m in &cols {
                let _ = write!(out, "  {:>10}", cell(pick(r, *m)));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<name_w$}", "mean");
        for m in &cols {
            let v = match m {
                Metric::Psnr => self.psnr,
                Metric::Ssim => self.ssim,
                Metric::Lpips => self.lpips,
                Metric::Fid => None,
            };
            let _ = write!(out, "  {:>10}", cell(v));
        }
        out.push('\n');
        if let Some(f) = self.fid {
            let _ = writeln!(out, "fid = {f:.4}");
        }
        out
    }

    /// `key = value` lines for machine consumption.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "count = {}", self.per_image.len());
        let metrics: Vec<&str> = self.metrics.iter().map(|m| m.name()).collect();
        let _ = writeln!(out, "metrics = {}", metrics.join(","));
        for (k, v) in [
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("lpips", self.lpips),
            ("fid", self.fid),
        ] {
            if let Some(v) = v {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        for r in &self.per_image {
            for (k, v) in [("psnr", r.psnr), ("ssim", r.ssim), ("lpips", r.lpips)] {
                if let Some(v) = v {
                    let _ = writeln!(out, "image.{}.{k} = {v}", r.name);
                }
            }
        }
        out
    }

    pub fn write(&self, table_path: &Path, record_path: &Path) -> Result<()> {
        write_atomic(table_path, self.to_table().as_bytes())?;
        write_atomic(record_path, self.to_record().as_bytes())
    }
}

/// Optional networks consulted by [`evaluate`].
#[derive(Default)]
pub struct MetricBackends<'a> {
    pub perceptual: Option<&'a dyn PerceptualBackend>,
    pub features: Option<&'a dyn FeatureBackend>,
    /// FID reference features for corpora without ground truth.
    pub fid_reference: Option<Vec<Vec<f64>>>,
}

/// Enhances every item and scores the result against its ground truth.
pub fn evaluate<I>(
    enhancer: &dyn Enhancer,
    items: I,
    metrics: &[Metric],
    backends: &MetricBackends,
    device: &Device,
    dtype: DType,
) -> Result<MetricsReport>
where
    I: IntoIterator<Item = Result<EvalItem>>,
{
    if metrics.contains(&Metric::Lpips) && backends.perceptual.is_none() {
        return Err(Error::MissingBackend(
            "lpips requested but no perceptual backend is registered".into(),
        ));
    }
    if metrics.contains(&Metric::Fid) && backends.features.is_none() {
        return Err(Error::MissingBackend(
            "fid requested but no feature backend is registered".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut fid_out = Vec::new();
    let mut fid_ref = Vec::new();
    for item in items {
        let item = item?;
        let out = enhance(enhancer, &item.backlit, device, dtype)?.enhanced;
        let gt = item.ground_truth.as_ref();
        if gt.is_none() && metrics.iter().any(|m| m.needs_ground_truth()) {
            return Err(Error::Corpus(format!(
                "`{}` has no ground truth; psnr, ssim and lpips need a paired corpus",
                item.name
            )));
        }
        let mut row = PerImageMetrics {
            name: item.name.clone(),
            psnr: None,
            ssim: None,
            lpips: None,
        };
        for m in metrics {
            match m {
                Metric::Psnr => row.psnr = Some(psnr(&out, gt.expect("checked"))?),
                Metric::Ssim => row.ssim = Some(ssim(&out, gt.expect("checked"))?),
                Metric::Lpips => {
                    row.lpips = Some(lpips(&out, gt.expect("checked"), backends.perceptual)?)
                }
                Metric::Fid => {
                    let f = backends.features.expect("checked");
                    fid_out.push(f.features(&out)?);
                    if let Some(gt) = gt {
                        fid_ref.push(f.features(gt)?);
                    }
                }
            }
        }
        rows.push(row);
    }
    let fid_value = if metrics.contains(&Metric::Fid) {
        let reference = match &backends.fid_reference {
            Some(r) => r.clone(),
            None if !fid_ref.is_empty() => fid_ref,
            None => {
                return Err(Error::Corpus(
                    "fid needs ground truth or reference features".into(),
                ))
            }
        };
        Some(fid(
            &feature_matrix(&fid_out)?,
            &feature_matrix(&reference)?,
        )?)
    } else {
        None
    };
    Ok(MetricsReport::from_rows(metrics.to_vec(), rows, fid_value))
}
