//! Image quality and embedding agreement scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const CLIP_TILE: usize = 64;

/// Dynamic range convention for PSNR and SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Peak {
    #[default]
    EightBit,
    Unit,
}

impl Peak {
    pub fn value(self) -> f64 {
        match self {
            Peak::EightBit => 255.0,
            Peak::Unit => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Psnr {
    /// Zero mean squared error.
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Identical => None,
            Psnr::Db(v) => Some(v),
        }
    }
}

fn check_peak(peak: f64) -> Result<()> {
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::Config(format!("peak must be positive, got {peak}")));
    }
    Ok(())
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<Psnr> {
    a.same_shape(b)?;
    check_peak(peak)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(10.0 * (peak * peak / mse).log10()))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Shape(format!("expected h x w or c x h x w image, got {s:?}"))),
    }
}

/// Single-scale SSIM with an 11 x 11 Gaussian window (sigma 1.5), valid
/// borders, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    check_peak(peak)?;
    let (c, h, w) = planes(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let plane = h * w;
    let per_channel: Vec<f64> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let x = &a.data()[ch * plane..(ch + 1) * plane];
            let y = &b.data()[ch * plane..(ch + 1) * plane];
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
            let mx = filter(x, h, w, &k);
            let my = filter(y, h, w, &k);
            let sxx = filter(&xx, h, w, &k);
            let syy = filter(&yy, h, w, &k);
            let sxy = filter(&xy, h, w, &k);
            let mut total = 0.0;
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
            total / mx.len() as f64
        })
        .collect();
    Ok(per_channel.iter().sum::<f64>() / c as f64)
}

fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateFeature("zero-norm embedding".into()));
    }
    let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between a whole-image embedding and a text embedding.
pub fn clip_i(image_feat: &Tensor, text_feat: &Tensor) -> Result<f64> {
    cosine(image_feat, text_feat)
}

/// Mean cosine between patch embeddings and a text embedding.
pub fn clip_p(patch_feats: &[Tensor], text_feat: &Tensor) -> Result<f64> {
    if patch_feats.is_empty() {
        return Err(Error::Config("no patch embeddings".into()));
    }
    let mut s = 0.0;
    for p in patch_feats {
        s += cosine(p, text_feat)?;
    }
    Ok(s / patch_feats.len() as f64)
}

/// Top-left corners `(row, col)` of `side x side` tiles at the given stride,
/// row-major. Tiles that would cross the border are dropped.
pub fn tile_grid(h: usize, w: usize, side: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if side == 0 || stride == 0 {
        return Err(Error::Config("tile side and stride must be positive".into()));
    }
    if side > h || side > w {
        return Err(Error::Config(format!("tile side {side} exceeds image {h}x{w}")));
    }
    let rows = (h - side) / stride + 1;
    let cols = (w - side) / stride + 1;
    Ok((0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride)))
        .collect())
}

/// Crops tiles from a `c x h x w` image.
pub fn tiles(img: &Tensor, side: usize, stride: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = img.chw()?;
    let grid = tile_grid(h, w, side, stride)?;
    let x = img.data();
    Ok(grid
        .into_iter()
        .map(|(e, f)| {
            let mut out = Vec::with_capacity(c * side * side);
            for ch in 0..c {
                for r in e..e + side {
                    let start = (ch * h + r) * w + f;
                    out.extend_from_slice(&x[start..start + side]);
                }
            }
            Tensor::from_parts(vec![c, side, side], out)
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub psnr: Option<Psnr>,
    pub ssim: Option<f64>,
    pub clip_i: Option<f64>,
    pub clip_p: Option<f64>,
    pub clip_patch_side: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, shape: Vec<usize>, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| scale * rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = img(1, vec![3, 8, 8], 200.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), Psnr::Identical);
        let b = a.scale_shift(1.0, 10.0);
        let v = psnr(&a, &b, 255.0).unwrap().db().unwrap();
        assert!((v - 10.0 * (65025.0f64 / 100.0).log10()).abs() < 1e-12);
        assert!((v - 28.131).abs() < 1e-3);
        let v2 = psnr(&a.scale_shift(2.0, 0.0), &b.scale_shift(2.0, 0.0), 510.0).unwrap().db().unwrap();
        assert!((v - v2).abs() < 1e-12);
        assert!(psnr(&a, &img(2, vec![3, 8, 9], 1.0), 255.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_monotone_in_error() {
        let a = img(3, vec![2, 6, 6], 1.0);
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let b = a.scale_shift(1.0, 0.01 * k as f64);
            let v = psnr(&a, &b, 1.0).unwrap().db().unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ssim_cases() {
        let a = img(4, vec![3, 16, 16], 255.0);
        assert!((ssim(&a, &a, 255.0).unwrap() - 1.0).abs() < 1e-12);
        let b = img(5, vec![3, 16, 16], 255.0);
        let ab = ssim(&a, &b, 255.0).unwrap();
        assert_eq!(ab, ssim(&b, &a, 255.0).unwrap());
        assert!(ab < 1.0 && ab > -1.0);
        assert!(matches!(ssim(&img(6, vec![1, 10, 16], 1.0), &img(7, vec![1, 10, 16], 1.0), 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn ssim_constant_offset() {
        // constants have zero variance; only the luminance term remains
        let a = Tensor::full(vec![1, 12, 12], 50.0).unwrap();
        let b = Tensor::full(vec![1, 12, 12], 200.0).unwrap();
        let c1 = (SSIM_K1 * 255.0f64).powi(2);
        let expect = (2.0 * 50.0 * 200.0 + c1) / (50.0f64 * 50.0 + 200.0 * 200.0 + c1);
        let v = ssim(&a, &b, 255.0).unwrap();
        assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
        assert!(v < 1.0);
    }

    #[test]
    fn clip_cases() {
        let t = Tensor::from_vec(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(clip_i(&t, &t).unwrap(), 1.0);
        let o = Tensor::from_vec(vec![0.0, 2.0, 0.0]).unwrap();
        assert_eq!(clip_i(&o, &t).unwrap(), 0.0);
        assert_eq!(clip_i(&t.scale_shift(3.0, 0.0), &t).unwrap(), 1.0);
        let p02 = Tensor::from_vec(vec![0.2, (1.0f64 - 0.04).sqrt(), 0.0]).unwrap();
        let p03 = Tensor::from_vec(vec![0.3, 0.0, (1.0f64 - 0.09).sqrt()]).unwrap();
        assert!((clip_p(&[p02, p03], &t).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(clip_i(&Tensor::zeros(vec![3]).unwrap(), &t), Err(Error::DegenerateFeature(_))));
        assert!(clip_p(&[], &t).is_err());
    }

    #[test]
    fn tiling() {
        assert_eq!(tile_grid(256, 256, 64, 64).unwrap().len(), 16);
        assert_eq!(tile_grid(130, 130, 64, 64).unwrap(), vec![(0, 0), (0, 64), (64, 0), (64, 64)]);
        assert_eq!(tile_grid(128, 128, 64, 32).unwrap().len(), 9);
        assert!(tile_grid(32, 32, 64, 64).is_err());
        let x = img(8, vec![2, 128, 128], 1.0);
        let t = tiles(&x, 64, 64).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[3].data()[0], x.data()[64 * 128 + 64]);
    }
}
