//! Loss dispatch by id over named input tensors, analytic gradients, and a
//! central finite-difference checker.
//!
//! Input naming (list entries carry a numeric suffix, `name.0`, `name.1`, ...):
//!
//! | name              | used by                       |
//! |-------------------|-------------------------------|
//! | `target_patch.i`  | pc, pd, style, total          |
//! | `source_patch.i`  | pd, style, total              |
//! | `target_text`     | pc, pd, style, total          |
//! | `source_text`     | pd, style, total              |
//! | `src_layer.l`     | psc, content, total           |
//! | `tgt_layer.l`     | psc, content, total           |
//! | `src_vgg.l`       | feature_mse, content, total   |
//! | `tgt_vgg.l`       | feature_mse, content, total   |
//! | `src_zecon.i`     | patch_contrastive, content, total |
//! | `tgt_zecon.i`     | patch_contrastive, content, total |
//! | `source_image`    | mse, content, total           |
//! | `target_image`    | mse, content, total           |

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contentloss::{self, ContentInputs, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::geodesic::AugmentConfig;
use crate::styleloss::{self, StyleInputs};
use crate::tensor::Tensor;
use crate::weights::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    Pc,
    Pd,
    Psc,
    Mse,
    FeatureMse,
    PatchContrastive,
    Style,
    Content,
    Total,
}

impl LossId {
    pub const ALL: [LossId; 9] = [
        LossId::Pc,
        LossId::Pd,
        LossId::Psc,
        LossId::Mse,
        LossId::FeatureMse,
        LossId::PatchContrastive,
        LossId::Style,
        LossId::Content,
        LossId::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossId::Pc => "pc",
            LossId::Pd => "pd",
            LossId::Psc => "psc",
            LossId::Mse => "mse",
            LossId::FeatureMse => "feature_mse",
            LossId::PatchContrastive => "patch_contrastive",
            LossId::Style => "style",
            LossId::Content => "content",
            LossId::Total => "total",
        }
    }

    /// Losses unchanged by rescaling any single input tensor.
    pub fn scale_invariant(self) -> bool {
        matches!(self, LossId::Pc | LossId::Pd | LossId::Psc)
    }
}

impl std::fmt::Display for LossId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pc" => LossId::Pc,
            "pd" => LossId::Pd,
            "psc" => LossId::Psc,
            "mse" => LossId::Mse,
            "feature_mse" | "vgg" => LossId::FeatureMse,
            "patch_contrastive" | "zecon" => LossId::PatchContrastive,
            "style" => LossId::Style,
            "content" => LossId::Content,
            "total" => LossId::Total,
            other => return Err(Error::Config(format!("unknown loss id {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Named input tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorSet {
    map: BTreeMap<String, Tensor>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn insert_list(&mut self, prefix: &str, ts: Vec<Tensor>) {
        for (i, t) in ts.into_iter().enumerate() {
            self.insert(format!("{prefix}.{i}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing input {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    /// Entries `prefix.0`, `prefix.1`, ... in index order. Indices must be
    /// contiguous from zero.
    pub fn list(&self, prefix: &str) -> Result<Vec<Tensor>> {
        let lead = format!("{prefix}.");
        let mut found: Vec<(usize, &Tensor)> = Vec::new();
        for (k, v) in &self.map {
            if let Some(rest) = k.strip_prefix(&lead) {
                let idx = rest
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad list index in {k:?}")))?;
                found.push((idx, v));
            }
        }
        found.sort_by_key(|(i, _)| *i);
        for (expect, (i, _)) in found.iter().enumerate() {
            if *i != expect {
                return Err(Error::Config(format!("{prefix} list is missing index {expect}")));
            }
        }
        if found.is_empty() {
            return Err(Error::Config(format!("missing input list {prefix:?}")));
        }
        Ok(found.into_iter().map(|(_, t)| t.clone()).collect())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GradResult {
    pub value: f64,
    pub grads: TensorSet,
    /// Arccos evaluations that hit the clamp; their sub-gradient is zero.
    pub clamped: usize,
}

fn style_inputs(inp: &TensorSet, cfg: &LossConfig, with_source: bool) -> Result<StyleInputs> {
    let target_patches = inp.list("target_patch")?;
    let (source_patches, source_text) = if with_source {
        (inp.list("source_patch")?, inp.get("source_text")?.clone())
    } else {
        // unused by the pc loss; placeholders keep the struct uniform
        (Vec::new(), inp.get("target_text")?.clone())
    };
    Ok(StyleInputs {
        target_patches,
        source_patches,
        target_text: inp.get("target_text")?.clone(),
        source_text,
        augment: cfg.augment,
    })
}

fn content_inputs(inp: &TensorSet, cfg: &LossConfig) -> Result<ContentInputs> {
    Ok(ContentInputs {
        src_layers: inp.list("src_layer")?,
        tgt_layers: inp.list("tgt_layer")?,
        src_vgg: inp.list("src_vgg")?,
        tgt_vgg: inp.list("tgt_vgg")?,
        src_zecon: inp.list("src_zecon")?,
        tgt_zecon: inp.list("tgt_zecon")?,
        source_image: inp.get("source_image")?.clone(),
        target_image: inp.get("target_image")?.clone(),
        temperature: cfg.temperature,
    })
}

/// Plain loss value.
pub fn evaluate(id: LossId, inp: &TensorSet, cfg: &LossConfig) -> Result<f64> {
    let w = &cfg.weights;
    match id {
        LossId::Pc => styleloss::patch_geodesic_loss(
            &inp.list("target_patch")?,
            inp.get("target_text")?,
            &cfg.augment,
        ),
        LossId::Pd => styleloss::loss_pd(&style_inputs(inp, cfg, true)?),
        LossId::Style => styleloss::loss_style(&style_inputs(inp, cfg, true)?, w),
        LossId::Psc => contentloss::loss_psc(&inp.list("src_layer")?, &inp.list("tgt_layer")?),
        LossId::Mse => contentloss::loss_mse(inp.get("source_image")?, inp.get("target_image")?),
        LossId::FeatureMse => {
            contentloss::loss_feature_mse(&inp.list("src_vgg")?, &inp.list("tgt_vgg")?)
        }
        LossId::PatchContrastive => contentloss::loss_patch_contrastive(
            &inp.list("src_zecon")?,
            &inp.list("tgt_zecon")?,
            cfg.temperature,
        ),
        LossId::Content => {
            let parts = contentloss::content_parts(&content_inputs(inp, cfg)?)?;
            Ok(contentloss::loss_content(&parts, w))
        }
        LossId::Total => Ok(evaluate(LossId::Style, inp, cfg)? + evaluate(LossId::Content, inp, cfg)?),
    }
}

fn add_style(out: &mut TensorSet, g: styleloss::StyleGrad, with_source: bool) {
    out.insert_list("target_patch", g.target_patches);
    out.insert("target_text", g.target_text);
    if with_source {
        out.insert_list("source_patch", g.source_patches);
        out.insert("source_text", g.source_text);
    }
}

fn add_content(out: &mut TensorSet, g: contentloss::ContentGrad) {
    out.insert_list("src_layer", g.src_layers);
    out.insert_list("tgt_layer", g.tgt_layers);
    out.insert_list("src_vgg", g.src_vgg);
    out.insert_list("tgt_vgg", g.tgt_vgg);
    out.insert_list("src_zecon", g.src_zecon);
    out.insert_list("tgt_zecon", g.tgt_zecon);
    out.insert("source_image", g.source_image);
    out.insert("target_image", g.target_image);
}

/// Loss value with gradients for every input the loss reads.
pub fn grad_eval(id: LossId, inp: &TensorSet, cfg: &LossConfig) -> Result<GradResult> {
    let w = &cfg.weights;
    let mut grads = TensorSet::new();
    let mut clamped = 0;
    let value = match id {
        LossId::Pc => {
            let (v, gp, gt, c) = styleloss::patch_geodesic_loss_grad(
                &inp.list("target_patch")?,
                inp.get("target_text")?,
                &cfg.augment,
            )?;
            grads.insert_list("target_patch", gp);
            grads.insert("target_text", gt);
            clamped = c;
            v
        }
        LossId::Pd => {
            let g = styleloss::loss_pd_grad(&style_inputs(inp, cfg, true)?)?;
            let v = g.value;
            add_style(&mut grads, g, true);
            v
        }
        LossId::Style => {
            let g = styleloss::loss_style_grad(&style_inputs(inp, cfg, true)?, w)?;
            let v = g.value;
            clamped = g.clamped;
            add_style(&mut grads, g, true);
            v
        }
        LossId::Psc => {
            let (v, gs, gt) = contentloss::loss_psc_grad(&inp.list("src_layer")?, &inp.list("tgt_layer")?)?;
            grads.insert_list("src_layer", gs);
            grads.insert_list("tgt_layer", gt);
            v
        }
        LossId::Mse => {
            let (v, ga, gb) = contentloss::loss_mse_grad(inp.get("source_image")?, inp.get("target_image")?)?;
            grads.insert("source_image", ga);
            grads.insert("target_image", gb);
            v
        }
        LossId::FeatureMse => {
            let (v, gs, gt) = contentloss::loss_feature_mse_grad(&inp.list("src_vgg")?, &inp.list("tgt_vgg")?)?;
            grads.insert_list("src_vgg", gs);
            grads.insert_list("tgt_vgg", gt);
            v
        }
        LossId::PatchContrastive => {
            let (v, gs, gt) = contentloss::loss_patch_contrastive_grad(
                &inp.list("src_zecon")?,
                &inp.list("tgt_zecon")?,
                cfg.temperature,
            )?;
            grads.insert_list("src_zecon", gs);
            grads.insert_list("tgt_zecon", gt);
            v
        }
        LossId::Content => {
            let g = contentloss::loss_content_grad(&content_inputs(inp, cfg)?, w)?;
            let v = g.value;
            add_content(&mut grads, g);
            v
        }
        LossId::Total => {
            let s = grad_eval(LossId::Style, inp, cfg)?;
            let c = grad_eval(LossId::Content, inp, cfg)?;
            grads = s.grads;
            for (k, v) in c.grads.map {
                grads.insert(k, v);
            }
            clamped = s.clamped;
            s.value + c.value
        }
    };
    Ok(GradResult {
        value,
        grads,
        clamped,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FdEntry {
    pub input: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub max_abs_error: f64,
    /// `|a - n| / max(|a|, |n|)` over the probed coordinates as vectors.
    pub norm_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub loss: LossId,
    pub step: f64,
    pub value: f64,
    /// The analytic pass hit an arccos clamp; errors near those points are
    /// not meaningful.
    pub flagged: bool,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub norm_rel_error: f64,
    pub inputs: Vec<FdEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates probed per input (all of them when the input is smaller).
    pub coords_per_input: usize,
    pub seed: u64,
    /// Denominator floor as a fraction of the largest analytic gradient entry.
    pub rel_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            coords_per_input: 200,
            seed: 0,
            rel_floor: 1e-3,
        }
    }
}

/// Compares [`grad_eval`] against central differences
/// `(L(x + h e) - L(x - h e)) / 2h`.
///
/// Per-coordinate relative error is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = rel_floor * max|a|` over all inputs, so coordinates whose true
/// gradient is near zero are measured against the gradient scale rather than
/// against rounding noise.
pub fn fd_check(id: LossId, inp: &TensorSet, cfg: &LossConfig, opts: &FdOptions) -> Result<FdReport> {
    if !(opts.step > 0.0) || !opts.step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", opts.step)));
    }
    let analytic = grad_eval(id, inp, cfg)?;
    let scale = analytic
        .grads
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let floor = (opts.rel_floor * scale).max(1e-300);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = inp.clone();
    let h = opts.step;

    let mut entries = Vec::new();
    for (name, g) in analytic.grads.iter() {
        let len = g.len();
        let coords: Vec<usize> = if len <= opts.coords_per_input {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.coords_per_input).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_rel: f64 = 0.0;
        let mut sum_rel = 0.0;
        let mut max_abs: f64 = 0.0;
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &coords {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = evaluate(id, &probe, cfg)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = evaluate(id, &probe, cfg)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
            sum_rel += rel;
            diff2 += abs * abs;
            a2 += a * a;
            n2 += numeric * numeric;
        }
        entries.push(FdEntry {
            input: name.to_string(),
            checked: coords.len(),
            max_rel_error: max_rel,
            mean_rel_error: sum_rel / coords.len().max(1) as f64,
            max_abs_error: max_abs,
            norm_rel_error: diff2.sqrt() / a2.max(n2).sqrt().max(f64::MIN_POSITIVE),
        });
    }
    let total_checked: usize = entries.iter().map(|e| e.checked).sum();
    Ok(FdReport {
        loss: id,
        step: h,
        value: analytic.value,
        flagged: analytic.clamped > 0,
        max_rel_error: entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max),
        norm_rel_error: entries.iter().map(|e| e.norm_rel_error).fold(0.0, f64::max),
        mean_rel_error: entries
            .iter()
            .map(|e| e.mean_rel_error * e.checked as f64)
            .sum::<f64>()
            / total_checked.max(1) as f64,
        inputs: entries,
    })
}

/// Largest `|<grad, x>| / (|grad| |x|)` over inputs with non-zero gradient.
/// Zero for losses invariant to rescaling each input.
pub fn radial_alignment(inp: &TensorSet, grads: &TensorSet) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (name, g) in grads.iter() {
        let x = inp.get(name)?;
        let gn = g.norm();
        if gn == 0.0 {
            continue;
        }
        let d: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        worst = worst.max(d.abs() / (gn * x.norm()));
    }
    Ok(worst)
}

/// Seeded random inputs with the names `id` reads. Sizes are small enough
/// for exhaustive finite-difference probing.
pub fn random_inputs(id: LossId, seed: u64) -> TensorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1a55);
    let mut t = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let mut set = TensorSet::new();
    let style = matches!(id, LossId::Pc | LossId::Pd | LossId::Style | LossId::Total);
    let with_source = style && id != LossId::Pc;
    let content = matches!(id, LossId::Content | LossId::Total);
    if style {
        set.insert_list("target_patch", (0..4).map(|_| t(vec![16])).collect());
        set.insert("target_text", t(vec![16]));
        if with_source {
            set.insert_list("source_patch", (0..4).map(|_| t(vec![16])).collect());
            set.insert("source_text", t(vec![16]));
        }
    }
    if content || id == LossId::Psc {
        let shapes = [vec![4, 3, 3], vec![3, 2, 2]];
        set.insert_list("src_layer", shapes.iter().map(|s| t(s.clone())).collect());
        set.insert_list("tgt_layer", shapes.iter().map(|s| t(s.clone())).collect());
    }
    if content || id == LossId::FeatureMse {
        let shapes = [vec![3, 4, 4], vec![2, 2, 2]];
        set.insert_list("src_vgg", shapes.iter().map(|s| t(s.clone())).collect());
        set.insert_list("tgt_vgg", shapes.iter().map(|s| t(s.clone())).collect());
    }
    if content || id == LossId::PatchContrastive {
        set.insert_list("src_zecon", (0..3).map(|_| t(vec![12])).collect());
        set.insert_list("tgt_zecon", (0..3).map(|_| t(vec![12])).collect());
    }
    if content || id == LossId::Mse {
        set.insert("source_image", t(vec![3, 8, 8]));
        set.insert("target_image", t(vec![3, 8, 8]));
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_ordering_is_numeric() {
        let mut s = TensorSet::new();
        for i in [10usize, 2, 0, 1, 3, 4, 5, 6, 7, 8, 9] {
            s.insert(format!("x.{i}"), Tensor::from_vec(vec![i as f64]).unwrap());
        }
        let l = s.list("x").unwrap();
        assert_eq!(l.len(), 11);
        for (i, t) in l.iter().enumerate() {
            assert_eq!(t.data()[0], i as f64);
        }
        s.insert("y.1", Tensor::from_vec(vec![0.0]).unwrap());
        assert!(s.list("y").is_err());
        assert!(s.list("z").is_err());
    }

    #[test]
    fn mse_gradient_closed_form() {
        let inp = random_inputs(LossId::Mse, 3);
        let g = grad_eval(LossId::Mse, &inp, &LossConfig::default()).unwrap();
        let a = inp.get("source_image").unwrap();
        let b = inp.get("target_image").unwrap();
        let ga = g.grads.get("source_image").unwrap();
        for i in 0..a.len() {
            let expect = 2.0 * (a.data()[i] - b.data()[i]) / a.len() as f64;
            assert!((ga.data()[i] - expect).abs() < 1e-15);
        }
        let rep = fd_check(LossId::Mse, &inp, &LossConfig::default(), &FdOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
        assert!(rep.norm_rel_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn pc_gradient_vanishes_at_minimum() {
        let mut inp = random_inputs(LossId::Pc, 1);
        let text = inp.get("target_text").unwrap().clone();
        for i in 0..4 {
            inp.insert(format!("target_patch.{i}"), text.clone());
        }
        let g = grad_eval(LossId::Pc, &inp, &LossConfig::default()).unwrap();
        assert!(g.value <= 1e-12);
        let total: f64 = g.grads.iter().map(|(_, t)| t.norm().powi(2)).sum::<f64>().sqrt();
        assert!(total <= 1e-8);
    }

    #[test]
    fn zero_step_rejected() {
        let inp = random_inputs(LossId::Mse, 0);
        let opts = FdOptions { step: 0.0, ..Default::default() };
        assert!(matches!(
            fd_check(LossId::Mse, &inp, &LossConfig::default(), &opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn value_bit_matches_plain_loss() {
        let cfg = LossConfig::default();
        for id in LossId::ALL {
            let inp = random_inputs(id, 7);
            let plain = evaluate(id, &inp, &cfg).unwrap();
            let g = grad_eval(id, &inp, &cfg).unwrap();
            assert_eq!(plain.to_bits(), g.value.to_bits(), "{id}");
            for (name, t) in g.grads.iter() {
                assert_eq!(t.shape(), inp.get(name).unwrap().shape());
                assert!(t.all_finite());
            }
        }
    }

    #[test]
    fn fd_agreement_single_draw() {
        let cfg = LossConfig::default();
        for id in LossId::ALL {
            let inp = random_inputs(id, 100);
            let rep = fd_check(id, &inp, &cfg, &FdOptions::default()).unwrap();
            assert!(!rep.flagged);
            assert!(rep.max_rel_error < 1e-5, "{id}: {}", rep.max_rel_error);
        }
    }

    #[test]
    fn loss_id_parsing() {
        for id in LossId::ALL {
            assert_eq!(id.name().parse::<LossId>().unwrap(), id);
        }
        assert_eq!("vgg".parse::<LossId>().unwrap(), LossId::FeatureMse);
        assert!("nope".parse::<LossId>().is_err());
    }
}
