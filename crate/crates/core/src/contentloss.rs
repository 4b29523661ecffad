//! Content-preservation losses: pre-shape self-correlation consistency,
//! pixel and feature-map MSE, and a patch-wise contrastive loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preshape::{project_backward, project_slice, Projection};
use crate::tensor::Tensor;
use crate::weights::LossWeights;

/// Position vectors with norm at or below this have no direction.
pub const FEATURE_EPS: f64 = 1e-12;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Smooth-l1 with transition at 1.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_slope(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Unit channel vectors per spatial position, stored position-major
/// (`P x c`), plus the original norms.
struct PositionVectors {
    channels: usize,
    units: Vec<f64>,
    norms: Vec<f64>,
}

impl PositionVectors {
    fn new(z: &[f64], c: usize, positions: usize) -> Result<Self> {
        let mut units = vec![0.0; c * positions];
        let mut norms = vec![0.0; positions];
        for p in 0..positions {
            let row = &mut units[p * c..(p + 1) * c];
            for (ch, v) in row.iter_mut().enumerate() {
                *v = z[ch * positions + p];
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > FEATURE_EPS) {
                return Err(Error::DegenerateFeature(format!(
                    "zero channel vector at position {p}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms[p] = n;
        }
        Ok(Self {
            channels: c,
            units,
            norms,
        })
    }

    fn unit(&self, p: usize) -> &[f64] {
        &self.units[p * self.channels..(p + 1) * self.channels]
    }

    fn cos(&self, p: usize, q: usize) -> f64 {
        self.unit(p).iter().zip(self.unit(q)).map(|(a, b)| a * b).sum()
    }

    fn positions(&self) -> usize {
        self.norms.len()
    }

    /// Gradient on unit vectors -> gradient on the `c x P` feature layout.
    fn backward(&self, g_units: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let positions = self.positions();
        let mut out = vec![0.0; c * positions];
        for p in 0..positions {
            let u = self.unit(p);
            let g = &g_units[p * c..(p + 1) * c];
            let radial: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
            for ch in 0..c {
                out[ch * positions + p] = (g[ch] - u[ch] * radial) / self.norms[p];
            }
        }
        out
    }
}

/// Cosine similarity between the channel vector at `(u, v)` and every other
/// position of `z` (`c x h x w`), returned as an `h x w` tensor.
pub fn self_correlation(z: &Tensor, u: usize, v: usize) -> Result<Tensor> {
    let (c, h, w) = z.chw()?;
    if u >= h || v >= w {
        return Err(Error::Index(format!("position ({u}, {v}) outside {h}x{w}")));
    }
    let vecs = PositionVectors::new(z.data(), c, h * w)?;
    let p = u * w + v;
    let row = (0..h * w).map(|q| vecs.cos(p, q)).collect();
    Ok(Tensor::from_parts(vec![h, w], row))
}

/// Centers and normalizes a layer feature as a pre-shape while keeping its
/// `c x h x w` layout.
pub fn project_layer(t: &Tensor) -> Result<Tensor> {
    t.chw()?;
    let p = project_slice(t.data())?;
    Ok(Tensor::from_parts(t.shape().to_vec(), p.shape.into_vec()))
}

struct LayerPair {
    src_proj: Projection,
    tgt_proj: Projection,
    src: PositionVectors,
    tgt: PositionVectors,
}

fn layer_pair(src: &Tensor, tgt: &Tensor) -> Result<LayerPair> {
    src.same_shape(tgt)?;
    let (c, h, w) = src.chw()?;
    let src_proj = project_slice(src.data())?;
    let tgt_proj = project_slice(tgt.data())?;
    let s = PositionVectors::new(src_proj.shape.as_slice(), c, h * w)?;
    let t = PositionVectors::new(tgt_proj.shape.as_slice(), c, h * w)?;
    Ok(LayerPair {
        src_proj,
        tgt_proj,
        src: s,
        tgt: t,
    })
}

fn check_layers(src: &[Tensor], tgt: &[Tensor]) -> Result<()> {
    if src.is_empty() {
        return Err(Error::Config("no feature layers given".into()));
    }
    if src.len() != tgt.len() {
        return Err(Error::Shape(format!(
            "{} source layers vs {} target layers",
            src.len(),
            tgt.len()
        )));
    }
    Ok(())
}

/// Per-row terms of one layer; rows are streamed so the full correlation
/// matrix is never held in memory.
fn psc_layer_value(pair: &LayerPair) -> f64 {
    let positions = pair.src.positions();
    let rows: Vec<f64> = (0..positions)
        .into_par_iter()
        .map(|p| {
            (0..positions)
                .map(|q| smooth_l1(pair.src.cos(p, q) - pair.tgt.cos(p, q)))
                .sum::<f64>()
                / positions as f64
        })
        .collect();
    rows.iter().sum()
}

/// Sum over layers and positions of the row-mean smooth-l1 gap between the
/// source and target self-correlation rows, after pre-shape projection of
/// each layer.
pub fn loss_psc(src: &[Tensor], tgt: &[Tensor]) -> Result<f64> {
    check_layers(src, tgt)?;
    let mut total = 0.0;
    for (s, t) in src.iter().zip(tgt) {
        total += psc_layer_value(&layer_pair(s, t)?);
    }
    Ok(total)
}

/// Returns `(value, grad_src, grad_tgt)`.
pub fn loss_psc_grad(src: &[Tensor], tgt: &[Tensor]) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    check_layers(src, tgt)?;
    let mut total = 0.0;
    let mut g_src = Vec::with_capacity(src.len());
    let mut g_tgt = Vec::with_capacity(tgt.len());
    for (s, t) in src.iter().zip(tgt) {
        let pair = layer_pair(s, t)?;
        total += psc_layer_value(&pair);

        let positions = pair.src.positions();
        let c = pair.src.channels;
        // the correlation gap is symmetric in (p, q), so each row's gradient
        // is twice its one-sided contribution
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..positions)
            .into_par_iter()
            .map(|p| {
                let mut gs = vec![0.0; c];
                let mut gt = vec![0.0; c];
                for q in 0..positions {
                    let k = 2.0 * smooth_l1_slope(pair.src.cos(p, q) - pair.tgt.cos(p, q))
                        / positions as f64;
                    for ch in 0..c {
                        gs[ch] += k * pair.src.unit(q)[ch];
                        gt[ch] -= k * pair.tgt.unit(q)[ch];
                    }
                }
                (gs, gt)
            })
            .collect();
        let mut gs_units = Vec::with_capacity(c * positions);
        let mut gt_units = Vec::with_capacity(c * positions);
        for (gs, gt) in rows {
            gs_units.extend(gs);
            gt_units.extend(gt);
        }
        let gs = project_backward(&pair.src_proj, &pair.src.backward(&gs_units));
        let gt = project_backward(&pair.tgt_proj, &pair.tgt.backward(&gt_units));
        g_src.push(Tensor::from_parts(s.shape().to_vec(), gs));
        g_tgt.push(Tensor::from_parts(t.shape().to_vec(), gt));
    }
    Ok((total, g_src, g_tgt))
}

/// Mean squared difference over all elements.
pub fn loss_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Returns `(value, grad_a, grad_b)`.
pub fn loss_mse_grad(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let value = loss_mse(a, b)?;
    let scale = 2.0 / a.len() as f64;
    let ga: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| scale * (x - y))
        .collect();
    let gb = ga.iter().map(|v| -v).collect();
    Ok((
        value,
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    ))
}

/// Mean over layers of the per-layer MSE.
pub fn loss_feature_mse(src: &[Tensor], tgt: &[Tensor]) -> Result<f64> {
    check_layers(src, tgt)?;
    let mut total = 0.0;
    for (s, t) in src.iter().zip(tgt) {
        total += loss_mse(s, t)?;
    }
    Ok(total / src.len() as f64)
}

pub fn loss_feature_mse_grad(src: &[Tensor], tgt: &[Tensor]) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    let value = loss_feature_mse(src, tgt)?;
    let layers = src.len() as f64;
    let mut gs = Vec::with_capacity(src.len());
    let mut gt = Vec::with_capacity(src.len());
    for (s, t) in src.iter().zip(tgt) {
        let (_, a, b) = loss_mse_grad(s, t)?;
        gs.push(a.scale_shift(1.0 / layers, 0.0));
        gt.push(b.scale_shift(1.0 / layers, 0.0));
    }
    Ok((value, gs, gt))
}

struct Cosines {
    q_norms: Vec<f64>,
    k_norms: Vec<f64>,
    /// Row-major `n x n`, `cos[i][j] = cos(q_i, k_j)`.
    cos: Vec<f64>,
}

fn cosine_table(queries: &[Tensor], keys: &[Tensor]) -> Result<Cosines> {
    let norms = |ts: &[Tensor], what: &str| -> Result<Vec<f64>> {
        ts.iter()
            .enumerate()
            .map(|(i, t)| {
                let n = t.norm();
                if n > FEATURE_EPS {
                    Ok(n)
                } else {
                    Err(Error::DegenerateFeature(format!("{what} patch {i} has zero norm")))
                }
            })
            .collect()
    };
    let q_norms = norms(queries, "target")?;
    let k_norms = norms(keys, "source")?;
    let n = queries.len();
    let mut cos = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d: f64 = queries[i].data().iter().zip(keys[j].data()).map(|(a, b)| a * b).sum();
            cos[i * n + j] = d / (q_norms[i] * k_norms[j]);
        }
    }
    Ok(Cosines {
        q_norms,
        k_norms,
        cos,
    })
}

fn check_contrastive(src: &[Tensor], tgt: &[Tensor], temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if src.is_empty() || src.len() != tgt.len() {
        return Err(Error::Shape(format!(
            "{} source vs {} target patches",
            src.len(),
            tgt.len()
        )));
    }
    for t in src.iter().chain(tgt) {
        t.same_shape(&src[0])?;
    }
    Ok(())
}

/// Softmax probabilities per row and the loss value.
fn contrastive_forward(table: &Cosines, n: usize, temperature: f64) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut probs = vec![0.0; n * n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| table.cos[i * n + j] / temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - logits[i];
        for j in 0..n {
            probs[i * n + j] = (logits[j] - lse).exp();
        }
    }
    (total / n as f64, probs)
}

/// InfoNCE over patch features: the target patch `i` should match source
/// patch `i` against the other source patches of the same image.
pub fn loss_patch_contrastive(src: &[Tensor], tgt: &[Tensor], temperature: f64) -> Result<f64> {
    check_contrastive(src, tgt, temperature)?;
    let table = cosine_table(tgt, src)?;
    Ok(contrastive_forward(&table, src.len(), temperature).0)
}

pub fn loss_patch_contrastive_grad(
    src: &[Tensor],
    tgt: &[Tensor],
    temperature: f64,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    check_contrastive(src, tgt, temperature)?;
    let n = src.len();
    let table = cosine_table(tgt, src)?;
    let (value, probs) = contrastive_forward(&table, n, temperature);
    let len = src[0].len();
    let mut gq = vec![vec![0.0; len]; n];
    let mut gk = vec![vec![0.0; len]; n];
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            let g_cos = (probs[i * n + j] - delta) / (n as f64 * temperature);
            if g_cos == 0.0 {
                continue;
            }
            let cos = table.cos[i * n + j];
            let (qn, kn) = (table.q_norms[i], table.k_norms[j]);
            let q = tgt[i].data();
            let k = src[j].data();
            for e in 0..len {
                gq[i][e] += g_cos * (k[e] / (qn * kn) - cos * q[e] / (qn * qn));
                gk[j][e] += g_cos * (q[e] / (qn * kn) - cos * k[e] / (kn * kn));
            }
        }
    }
    let wrap = |gs: Vec<Vec<f64>>| {
        gs.into_iter()
            .map(|g| Tensor::from_parts(src[0].shape().to_vec(), g))
            .collect::<Vec<_>>()
    };
    Ok((value, wrap(gk), wrap(gq)))
}

/// Individual content loss values before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentParts {
    pub psc: f64,
    pub zecon: f64,
    pub vgg: f64,
    pub mse: f64,
}

pub fn loss_content(parts: &ContentParts, w: &LossWeights) -> f64 {
    w.lambda_ps * parts.psc + w.lambda_z * parts.zecon + w.lambda_v * parts.vgg + w.lambda_m * parts.mse
}

/// Everything needed to evaluate the full content loss.
#[derive(Debug, Clone)]
pub struct ContentInputs {
    /// Noise-predictor encoder features of the source image, per layer.
    pub src_layers: Vec<Tensor>,
    pub tgt_layers: Vec<Tensor>,
    /// Perceptual-network features, per layer.
    pub src_vgg: Vec<Tensor>,
    pub tgt_vgg: Vec<Tensor>,
    /// Patch features for the contrastive term.
    pub src_zecon: Vec<Tensor>,
    pub tgt_zecon: Vec<Tensor>,
    pub source_image: Tensor,
    pub target_image: Tensor,
    pub temperature: f64,
}

pub fn content_parts(inp: &ContentInputs) -> Result<ContentParts> {
    Ok(ContentParts {
        psc: loss_psc(&inp.src_layers, &inp.tgt_layers)?,
        zecon: loss_patch_contrastive(&inp.src_zecon, &inp.tgt_zecon, inp.temperature)?,
        vgg: loss_feature_mse(&inp.src_vgg, &inp.tgt_vgg)?,
        mse: loss_mse(&inp.source_image, &inp.target_image)?,
    })
}

/// Gradients of the weighted content loss, field-for-field with
/// [`ContentInputs`].
#[derive(Debug, Clone)]
pub struct ContentGrad {
    pub value: f64,
    pub parts: ContentParts,
    pub src_layers: Vec<Tensor>,
    pub tgt_layers: Vec<Tensor>,
    pub src_vgg: Vec<Tensor>,
    pub tgt_vgg: Vec<Tensor>,
    pub src_zecon: Vec<Tensor>,
    pub tgt_zecon: Vec<Tensor>,
    pub source_image: Tensor,
    pub target_image: Tensor,
}

pub fn loss_content_grad(inp: &ContentInputs, w: &LossWeights) -> Result<ContentGrad> {
    let (psc, gs_l, gt_l) = loss_psc_grad(&inp.src_layers, &inp.tgt_layers)?;
    let (zecon, gs_z, gt_z) = loss_patch_contrastive_grad(&inp.src_zecon, &inp.tgt_zecon, inp.temperature)?;
    let (vgg, gs_v, gt_v) = loss_feature_mse_grad(&inp.src_vgg, &inp.tgt_vgg)?;
    let (mse, gs_i, gt_i) = loss_mse_grad(&inp.source_image, &inp.target_image)?;
    let parts = ContentParts { psc, zecon, vgg, mse };
    let scale = |ts: Vec<Tensor>, k: f64| ts.into_iter().map(|t| t.scale_shift(k, 0.0)).collect::<Vec<_>>();
    Ok(ContentGrad {
        value: loss_content(&parts, w),
        parts,
        src_layers: scale(gs_l, w.lambda_ps),
        tgt_layers: scale(gt_l, w.lambda_ps),
        src_vgg: scale(gs_v, w.lambda_v),
        tgt_vgg: scale(gt_v, w.lambda_v),
        src_zecon: scale(gs_z, w.lambda_z),
        tgt_zecon: scale(gt_z, w.lambda_z),
        source_image: gs_i.scale_shift(w.lambda_m, 0.0),
        target_image: gt_i.scale_shift(w.lambda_m, 0.0),
    })
}
