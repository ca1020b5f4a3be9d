//! Image quality and diversity metrics. All accumulation is in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported in tables for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// White background used for foreground segmentation.
pub const IOU_BACKGROUND: f32 = 1.0;
pub const IOU_TAU: f32 = 0.05;

/// `H × W × C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor);

impl Image {
    /// Clamps every value into `[0, 1]`.
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Dimension(format!("image must be H×W×C, got {:?}", t.shape())));
        }
        t.ensure_finite("image")?;
        Ok(Self(t.map(|x| x.clamp(0.0, 1.0))))
    }

    /// Maps a latent in `[-1, 1]` to `[0, 1]`.
    pub fn from_latent(z: &Tensor) -> Result<Self> {
        Self::new(z.map(|x| (x + 1.0) * 0.5))
    }

    pub fn to_latent(&self) -> Tensor {
        self.0.map(|x| x * 2.0 - 1.0)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::filled(&[h, w, c], value)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.0.data()[(y * self.width() + x) * self.channels() + c]
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        other.0.ensure_shape(self.0.shape(), "image pair")
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    Ok(a.0.squared_distance(&b.0)? / a.0.len() as f64)
}

/// `10 · log10(1 / MSE)`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// PSNR with the identical-image sentinel replaced by [`PSNR_CAP_DB`].
pub fn psnr_capped(a: &Image, b: &Image) -> Result<f64> {
    psnr(a, b).map(|p| p.min(PSNR_CAP_DB))
}

fn gaussian_1d() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM: 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03,
/// L = 1, averaged over valid window positions and then over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let k = gaussian_1d();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = (0..h * w).map(|i| f64::from(a.0.data()[i * ch + c])).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| f64::from(b.0.data()[i * ch + c])).collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&sq(&pa, &pa), h, w, &k);
        let e_bb = filter_valid(&sq(&pb, &pb), h, w, &k);
        let e_ab = filter_valid(&sq(&pa, &pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / ch as f64)
}

/// Foreground mask: `max_c |p_c - background| > tau`.
pub fn foreground_mask(img: &Image, background: f32, tau: f32) -> Vec<bool> {
    img.0
        .data()
        .chunks_exact(img.channels())
        .map(|px| px.iter().map(|&v| (v - background).abs()).fold(0.0f32, f32::max) > tau)
        .collect()
}

/// Intersection over union of the two foreground masks; 1 when both are empty.
pub fn iou_mask(a: &Image, b: &Image, background: f32, tau: f32) -> Result<f64> {
    a.same_shape(b)?;
    let (ma, mb) = (foreground_mask(a, background, tau), foreground_mask(b, background, tau));
    let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
    let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean RMS pixel distance over unordered pairs of samples.
pub fn seed_diversity(samples: &[Image]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "diversity needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            total += mse(a, b)?.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Image {
        let mut d = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    d.push(f(y, x, c));
                }
            }
        }
        Image::new(Tensor::new(vec![h, w, 3], d).unwrap()).unwrap()
    }

    #[test]
    fn image_clamps() {
        let i = Image::new(Tensor::new(vec![1, 1, 3], vec![-0.5, 0.5, 2.0]).unwrap()).unwrap();
        assert_eq!(i.tensor().data(), &[0.0, 0.5, 1.0]);
        assert!(Image::new(Tensor::zeros(&[4, 4]).unwrap()).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(4, 4, |_, _, _| 0.25);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr_capped(&a, &a).unwrap(), 99.0);
        let b = img(4, 4, |_, _, _| 0.75);
        let c = img(4, 4, |_, _, _| 0.65);
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-4);
        assert!(psnr(&a, &img(3, 4, |_, _, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        let a = img(16, 16, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let zero = img(12, 12, |_, _, _| 0.0);
        let one = img(12, 12, |_, _, _| 1.0);
        let c1 = 1e-4;
        assert!((ssim(&zero, &one).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(ssim(&img(10, 16, |_, _, _| 0.0), &img(10, 16, |_, _, _| 0.0)).is_err());
    }

    #[test]
    fn iou_cases() {
        let white = img(8, 8, |_, _, _| 1.0);
        assert_eq!(iou_mask(&white, &white, 1.0, 0.05).unwrap(), 1.0);
        let left = img(8, 8, |_, x, _| if x < 4 { 0.0 } else { 1.0 });
        let right = img(8, 8, |_, x, _| if x >= 4 { 0.0 } else { 1.0 });
        assert_eq!(iou_mask(&left, &left, 1.0, 0.05).unwrap(), 1.0);
        assert_eq!(iou_mask(&left, &right, 1.0, 0.05).unwrap(), 0.0);
        // 4×4 squares overlapping in a 4×2 strip: 8 / (16 + 16 - 8)
        let a = img(8, 8, |y, x, _| if y < 4 && x < 4 { 0.2 } else { 1.0 });
        let b = img(8, 8, |y, x, _| if y < 4 && (2..6).contains(&x) { 0.2 } else { 1.0 });
        assert!((iou_mask(&a, &b, 1.0, 0.05).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn diversity_cases() {
        let a = img(4, 4, |_, _, _| 0.3);
        assert_eq!(seed_diversity(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        let b = img(4, 4, |_, _, _| 0.5);
        assert!((seed_diversity(&[a.clone(), b]).unwrap() - 0.2).abs() < 1e-7);
        assert!(seed_diversity(&[a]).is_err());
    }
}
