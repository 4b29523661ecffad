use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contentloss::{self, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::geodesic::AugmentConfig;
use crate::styleloss::{self, StyleInputs};
use crate::swc::{self, CropMode, PatchPlan};
use crate::tensor::Tensor;
use crate::weights::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientSign {
    /// `x0_hat - eta * grad`
    #[default]
    Descent,
    /// `x0_hat + eta * grad`
    PaperPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub weights: LossWeights,
    pub eta: f64,
    pub sign: GradientSign,
    pub augment: AugmentConfig,
    pub temperature: f64,
    pub crop_mode: CropMode,
    /// Also evaluate the loss after the update (one extra forward pass).
    pub record_after: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            eta: 1.0,
            sign: GradientSign::Descent,
            augment: AugmentConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            crop_mode: CropMode::FullCoverage,
            record_after: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Total guidance loss of an image and its gradient.
pub trait GuidanceObjective: Sync {
    fn loss_and_grad(&self, image: &Tensor) -> Result<(f64, Tensor)>;

    fn loss(&self, image: &Tensor) -> Result<f64> {
        Ok(self.loss_and_grad(image)?.0)
    }
}

pub struct Guide<'a> {
    pub objective: &'a dyn GuidanceObjective,
    pub config: &'a GuidanceConfig,
}

impl Guide<'_> {
    pub fn is_active(&self) -> bool {
        let w = &self.config.weights;
        [w.lambda_pc, w.lambda_pd, w.lambda_ps, w.lambda_z, w.lambda_v, w.lambda_m]
            .iter()
            .any(|l| *l != 0.0)
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Random linear map from a flattened patch to a `dim`-vector.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    input: usize,
    dim: usize,
    w: Vec<f64>,
}

impl PatchEncoder {
    pub fn new(input: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            input,
            dim,
            w: gaussian_matrix(dim, input, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, patch: &Tensor) -> Result<Tensor> {
        if patch.len() != self.input {
            return Err(Error::Shape(format!(
                "patch encoder expects {} values, got {}",
                self.input,
                patch.len()
            )));
        }
        let x = patch.data();
        let out = self
            .w
            .chunks(self.input)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        Ok(Tensor::from_parts(vec![self.dim], out))
    }

    /// Transposed map of a feature-space gradient.
    pub fn vjp(&self, grad: &[f64], shape: &[usize]) -> Tensor {
        let mut out = vec![0.0; self.input];
        for (row, g) in self.w.chunks(self.input).zip(grad) {
            out.iter_mut().zip(row).for_each(|(o, w)| *o += g * w);
        }
        Tensor::from_parts(shape.to_vec(), out)
    }
}

/// Average pooling by `pool` followed by a random channel mix to
/// `channels` outputs.
#[derive(Debug, Clone)]
pub struct LayerEncoder {
    pool: usize,
    c_in: usize,
    channels: usize,
    mix: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub pool: usize,
    pub channels: usize,
}

impl LayerEncoder {
    pub fn new(c_in: usize, spec: LayerSpec, seed: u64) -> Result<Self> {
        if spec.pool == 0 || spec.channels == 0 {
            return Err(Error::Config(format!("bad layer spec {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            pool: spec.pool,
            c_in,
            channels: spec.channels,
            mix: gaussian_matrix(spec.channels, c_in, &mut rng),
        })
    }

    pub fn encode(&self, img: &Tensor) -> Result<Tensor> {
        let (c, h, w) = img.chw()?;
        if c != self.c_in || h % self.pool != 0 || w % self.pool != 0 {
            return Err(Error::Shape(format!(
                "layer encoder ({} channels, pool {}) cannot take {:?}",
                self.c_in,
                self.pool,
                img.shape()
            )));
        }
        let (ph, pw) = (h / self.pool, w / self.pool);
        let area = (self.pool * self.pool) as f64;
        let x = img.data();
        let mut pooled = vec![0.0; c * ph * pw];
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    pooled[(ch * ph + r / self.pool) * pw + col / self.pool] += x[(ch * h + r) * w + col] / area;
                }
            }
        }
        let n = ph * pw;
        let mut out = vec![0.0; self.channels * n];
        for o in 0..self.channels {
            for ch in 0..c {
                let m = self.mix[o * c + ch];
                for p in 0..n {
                    out[o * n + p] += m * pooled[ch * n + p];
                }
            }
        }
        Ok(Tensor::from_parts(vec![self.channels, ph, pw], out))
    }

    pub fn vjp(&self, grad: &Tensor, image_shape: &[usize]) -> Tensor {
        let (c, h, w) = (image_shape[0], image_shape[1], image_shape[2]);
        let (ph, pw) = (h / self.pool, w / self.pool);
        let n = ph * pw;
        let g = grad.data();
        let mut pooled = vec![0.0; c * n];
        for o in 0..self.channels {
            for ch in 0..c {
                let m = self.mix[o * c + ch];
                for p in 0..n {
                    pooled[ch * n + p] += m * g[o * n + p];
                }
            }
        }
        let area = (self.pool * self.pool) as f64;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    out[(ch * h + r) * w + col] = pooled[(ch * ph + r / self.pool) * pw + col / self.pool] / area;
                }
            }
        }
        Tensor::from_parts(image_shape.to_vec(), out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyExtractorConfig {
    pub patch_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl Default for ToyExtractorConfig {
    fn default() -> Self {
        Self {
            patch_dim: 32,
            layers: vec![LayerSpec { pool: 4, channels: 4 }, LayerSpec { pool: 8, channels: 8 }],
            seed: 0,
        }
    }
}

/// The full guidance loss with random linear stand-ins for the image,
/// patch and layer feature extractors. The same patch features feed the
/// style losses and the patch contrastive term; the same layer features
/// feed the self-correlation and feature MSE terms.
pub struct ToyObjective {
    source: Tensor,
    plan: PatchPlan,
    patch_encoder: PatchEncoder,
    layer_encoders: Vec<LayerEncoder>,
    source_patches: Vec<Tensor>,
    source_layers: Vec<Tensor>,
    source_text: Tensor,
    target_text: Tensor,
    config: GuidanceConfig,
}

impl ToyObjective {
    pub fn new(
        source: Tensor,
        source_text: Tensor,
        target_text: Tensor,
        config: &GuidanceConfig,
        extractors: &ToyExtractorConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = source.chw()?;
        let plan = swc::plan(h, w, config.weights.n, config.crop_mode)?;
        let patch_encoder = PatchEncoder::new(c * plan.side * plan.side, extractors.patch_dim, extractors.seed);
        if source_text.len() != extractors.patch_dim || target_text.len() != extractors.patch_dim {
            return Err(Error::Shape(format!(
                "text embeddings must have {} values, got {} and {}",
                extractors.patch_dim,
                source_text.len(),
                target_text.len()
            )));
        }
        let layer_encoders = extractors
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| LayerEncoder::new(c, *spec, extractors.seed.wrapping_add(1 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let source_patches = swc::extract(&source, &plan)?
            .iter()
            .map(|p| patch_encoder.encode(p))
            .collect::<Result<Vec<_>>>()?;
        let source_layers = layer_encoders
            .iter()
            .map(|e| e.encode(&source))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source,
            plan,
            patch_encoder,
            layer_encoders,
            source_patches,
            source_layers,
            source_text,
            target_text,
            config: *config,
        })
    }

    pub fn plan(&self) -> &PatchPlan {
        &self.plan
    }
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(y, v)| *y += a * v);
}

impl GuidanceObjective for ToyObjective {
    fn loss_and_grad(&self, image: &Tensor) -> Result<(f64, Tensor)> {
        image.same_shape(&self.source)?;
        let w = &self.config.weights;
        let mut total = 0.0;
        let mut grad = vec![0.0; image.len()];

        if w.lambda_pc != 0.0 || w.lambda_pd != 0.0 || w.lambda_z != 0.0 {
            let crops = swc::extract(image, &self.plan)?;
            let feats = crops
                .iter()
                .map(|p| self.patch_encoder.encode(p))
                .collect::<Result<Vec<_>>>()?;
            let d = self.patch_encoder.dim();
            let mut g_feat = vec![vec![0.0; d]; feats.len()];
            if w.lambda_pc != 0.0 {
                let (v, g, _, _) =
                    styleloss::patch_geodesic_loss_grad(&feats, &self.target_text, &self.config.augment)?;
                total += w.lambda_pc * v;
                for (acc, t) in g_feat.iter_mut().zip(&g) {
                    axpy(acc, w.lambda_pc, t.data());
                }
            }
            if w.lambda_pd != 0.0 {
                let inputs = StyleInputs {
                    target_patches: feats.clone(),
                    source_patches: self.source_patches.clone(),
                    target_text: self.target_text.clone(),
                    source_text: self.source_text.clone(),
                    augment: self.config.augment,
                };
                let g = styleloss::loss_pd_grad(&inputs)?;
                total += w.lambda_pd * g.value;
                for (acc, t) in g_feat.iter_mut().zip(&g.target_patches) {
                    axpy(acc, w.lambda_pd, t.data());
                }
            }
            if w.lambda_z != 0.0 {
                let (v, _, g) =
                    contentloss::loss_patch_contrastive_grad(&self.source_patches, &feats, self.config.temperature)?;
                total += w.lambda_z * v;
                for (acc, t) in g_feat.iter_mut().zip(&g) {
                    axpy(acc, w.lambda_z, t.data());
                }
            }
            let patch_grads: Vec<Tensor> = g_feat
                .iter()
                .zip(&crops)
                .map(|(g, c)| self.patch_encoder.vjp(g, c.shape()))
                .collect();
            let back = swc::scatter_add(&patch_grads, &self.plan, image.shape()[0])?;
            axpy(&mut grad, 1.0, back.data());
        }

        if w.lambda_ps != 0.0 || w.lambda_v != 0.0 {
            let layers = self
                .layer_encoders
                .iter()
                .map(|e| e.encode(image))
                .collect::<Result<Vec<_>>>()?;
            let mut g_layers: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.len()]).collect();
            if w.lambda_ps != 0.0 {
                let (v, _, g) = contentloss::loss_psc_grad(&self.source_layers, &layers)?;
                total += w.lambda_ps * v;
                for (acc, t) in g_layers.iter_mut().zip(&g) {
                    axpy(acc, w.lambda_ps, t.data());
                }
            }
            if w.lambda_v != 0.0 {
                let (v, _, g) = contentloss::loss_feature_mse_grad(&self.source_layers, &layers)?;
                total += w.lambda_v * v;
                for (acc, t) in g_layers.iter_mut().zip(&g) {
                    axpy(acc, w.lambda_v, t.data());
                }
            }
            for ((enc, g), l) in self.layer_encoders.iter().zip(g_layers).zip(&layers) {
                let back = enc.vjp(&Tensor::from_parts(l.shape().to_vec(), g), image.shape());
                axpy(&mut grad, 1.0, back.data());
            }
        }

        if w.lambda_m != 0.0 {
            let (v, _, g) = contentloss::loss_mse_grad(&self.source, image)?;
            total += w.lambda_m * v;
            axpy(&mut grad, w.lambda_m, g.data());
        }

        Ok((total, Tensor::from_parts(image.shape().to_vec(), grad)))
    }
}
