//! Style losses on augmented pre-shapes: geodesic distance to the target
//! prompt embedding, and directional alignment between image and text
//! displacements.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodesic::{augment_chains, generate_weight_sets, AugmentConfig, SurfaceChain};
use crate::preshape::{angle, dot, Angle, norm, project_backward, project_slice, Projection};
use crate::tensor::Tensor;
use crate::weights::LossWeights;

/// Magnitudes at or below this make a direction undefined.
pub const DIRECTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct StyleInputs {
    /// Features of the denoised-image patches, in patch-index order.
    pub target_patches: Vec<Tensor>,
    /// Features of the source-image patches, in patch-index order.
    pub source_patches: Vec<Tensor>,
    pub target_text: Tensor,
    pub source_text: Tensor,
    pub augment: AugmentConfig,
}

/// Loss value plus gradients with respect to each raw input.
#[derive(Debug, Clone)]
pub struct StyleGrad {
    pub value: f64,
    pub target_patches: Vec<Tensor>,
    pub source_patches: Vec<Tensor>,
    pub target_text: Tensor,
    pub source_text: Tensor,
    /// Number of arccos evaluations that hit the clamp.
    pub clamped: usize,
}

fn check_lengths(patches: &[Tensor], texts: &[&Tensor]) -> Result<usize> {
    if patches.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 patch features, got {}",
            patches.len()
        )));
    }
    let len = patches[0].len();
    for t in patches.iter().chain(texts.iter().copied()) {
        if t.len() != len {
            return Err(Error::Shape(format!(
                "feature element counts differ: {len} vs {}",
                t.len()
            )));
        }
    }
    Ok(len)
}

fn project_all(ts: &[Tensor]) -> Result<Vec<Projection>> {
    ts.iter().map(|t| project_slice(t.data())).collect()
}

fn augmented(projs: &[Projection], aug: &AugmentConfig) -> Result<Vec<SurfaceChain>> {
    let taus: Vec<_> = projs.iter().map(|p| p.shape.clone()).collect();
    let sets = generate_weight_sets(taus.len(), aug)?;
    augment_chains(&taus, &sets)
}

/// Sums per-augmentation chain gradients into per-patch gradients and pulls
/// them back through the projections.
fn pull_back(
    chains: &[SurfaceChain],
    out_grads: &[Vec<f64>],
    projs: &[Projection],
    like: &[Tensor],
) -> Vec<Tensor> {
    let per_chain: Vec<Vec<Vec<f64>>> = chains
        .par_iter()
        .zip(out_grads)
        .map(|(c, g)| c.backward(g))
        .collect();
    let len = projs[0].shape.as_slice().len();
    let mut acc = vec![vec![0.0; len]; projs.len()];
    for grads in &per_chain {
        for (a, g) in acc.iter_mut().zip(grads) {
            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
    }
    acc.iter()
        .zip(projs)
        .zip(like)
        .map(|((g, p), t)| Tensor::from_parts(t.shape().to_vec(), project_backward(p, g)))
        .collect()
}

struct PcForward {
    projs: Vec<Projection>,
    chains: Vec<SurfaceChain>,
    text: Projection,
    angles: Vec<Angle>,
    value: f64,
}

fn pc_forward(target_patches: &[Tensor], target_text: &Tensor, aug: &AugmentConfig) -> Result<PcForward> {
    check_lengths(target_patches, &[target_text])?;
    let projs = project_all(target_patches)?;
    let text = project_slice(target_text.data())?;
    let chains = augmented(&projs, aug)?;
    let angles: Vec<Angle> = chains
        .iter()
        .map(|c| angle(c.output.as_slice(), text.shape.as_slice()))
        .collect();
    let value = angles.iter().map(|a| a.value).sum::<f64>() / chains.len() as f64;
    Ok(PcForward {
        projs,
        chains,
        text,
        angles,
        value,
    })
}

/// Mean geodesic distance between augmented target-patch pre-shapes and the
/// projected target prompt embedding.
pub fn patch_geodesic_loss(
    target_patches: &[Tensor],
    target_text: &Tensor,
    aug: &AugmentConfig,
) -> Result<f64> {
    pc_forward(target_patches, target_text, aug).map(|f| f.value)
}

pub fn patch_geodesic_loss_grad(
    target_patches: &[Tensor],
    target_text: &Tensor,
    aug: &AugmentConfig,
) -> Result<(f64, Vec<Tensor>, Tensor, usize)> {
    let fwd = pc_forward(target_patches, target_text, aug)?;
    let m = fwd.chains.len() as f64;
    let text = fwd.text.shape.as_slice();
    let mut g_text = vec![0.0; text.len()];
    let mut clamped = 0;
    let out_grads: Vec<Vec<f64>> = fwd
        .chains
        .iter()
        .zip(&fwd.angles)
        .map(|(chain, ang)| {
            clamped += ang.clamped as usize;
            let k = ang.slope / m;
            let x = chain.output.as_slice();
            g_text.iter_mut().zip(x).for_each(|(g, v)| *g += k * v);
            text.iter().map(|t| k * t).collect()
        })
        .collect();
    let g_patches = pull_back(&fwd.chains, &out_grads, &fwd.projs, target_patches);
    let g_text = Tensor::from_parts(
        target_text.shape().to_vec(),
        project_backward(&fwd.text, &g_text),
    );
    Ok((fwd.value, g_patches, g_text, clamped))
}

/// Mean of `1 - cos(image_delta_i, text_delta)`.
pub fn directional_mean(image_deltas: &[Vec<f64>], text_delta: &[f64]) -> Result<f64> {
    let nt = norm(text_delta);
    if !(nt > DIRECTION_EPS) {
        return Err(Error::DegenerateDirection { what: "text", index: 0 });
    }
    let mut total = 0.0;
    for (i, d) in image_deltas.iter().enumerate() {
        let ni = norm(d);
        if !(ni > DIRECTION_EPS) {
            return Err(Error::DegenerateDirection { what: "image", index: i });
        }
        total += 1.0 - dot(d, text_delta) / (ni * nt);
    }
    Ok(total / image_deltas.len() as f64)
}

struct PdForward {
    tgt_projs: Vec<Projection>,
    src_projs: Vec<Projection>,
    tgt_chains: Vec<SurfaceChain>,
    src_chains: Vec<SurfaceChain>,
    tgt_text: Projection,
    src_text: Projection,
    deltas: Vec<Vec<f64>>,
    text_delta: Vec<f64>,
    value: f64,
}

fn pd_forward(inputs: &StyleInputs) -> Result<PdForward> {
    if inputs.target_patches.len() != inputs.source_patches.len() {
        return Err(Error::Shape(format!(
            "{} target patches vs {} source patches",
            inputs.target_patches.len(),
            inputs.source_patches.len()
        )));
    }
    let mut all = inputs.target_patches.clone();
    all.extend(inputs.source_patches.iter().cloned());
    check_lengths(&all, &[&inputs.target_text, &inputs.source_text])?;

    let tgt_projs = project_all(&inputs.target_patches)?;
    let src_projs = project_all(&inputs.source_patches)?;
    let tgt_text = project_slice(inputs.target_text.data())?;
    let src_text = project_slice(inputs.source_text.data())?;

    // one set of weights for both stacks so augmented features pair up
    let sets = generate_weight_sets(tgt_projs.len(), &inputs.augment)?;
    let shapes = |p: &[Projection]| p.iter().map(|x| x.shape.clone()).collect::<Vec<_>>();
    let tgt_chains = augment_chains(&shapes(&tgt_projs), &sets)?;
    let src_chains = augment_chains(&shapes(&src_projs), &sets)?;

    let deltas: Vec<Vec<f64>> = tgt_chains
        .iter()
        .zip(&src_chains)
        .map(|(t, s)| {
            t.output
                .as_slice()
                .iter()
                .zip(s.output.as_slice())
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    let text_delta: Vec<f64> = tgt_text
        .shape
        .as_slice()
        .iter()
        .zip(src_text.shape.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let value = directional_mean(&deltas, &text_delta)?;
    Ok(PdForward {
        tgt_projs,
        src_projs,
        tgt_chains,
        src_chains,
        tgt_text,
        src_text,
        deltas,
        text_delta,
        value,
    })
}

pub fn loss_pc(inputs: &StyleInputs) -> Result<f64> {
    patch_geodesic_loss(&inputs.target_patches, &inputs.target_text, &inputs.augment)
}

pub fn loss_pd(inputs: &StyleInputs) -> Result<f64> {
    pd_forward(inputs).map(|f| f.value)
}

pub fn loss_style(inputs: &StyleInputs, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda_pc * loss_pc(inputs)? + w.lambda_pd * loss_pd(inputs)?)
}

fn zeros_like(ts: &[Tensor]) -> Vec<Tensor> {
    ts.iter()
        .map(|t| Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.len()]))
        .collect()
}

fn zero_tensor(t: &Tensor) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.len()])
}

pub fn loss_pc_grad(inputs: &StyleInputs) -> Result<StyleGrad> {
    let (value, target_patches, target_text, clamped) =
        patch_geodesic_loss_grad(&inputs.target_patches, &inputs.target_text, &inputs.augment)?;
    Ok(StyleGrad {
        value,
        target_patches,
        source_patches: zeros_like(&inputs.source_patches),
        target_text,
        source_text: zero_tensor(&inputs.source_text),
        clamped,
    })
}

pub fn loss_pd_grad(inputs: &StyleInputs) -> Result<StyleGrad> {
    let fwd = pd_forward(inputs)?;
    let m = fwd.deltas.len() as f64;
    let nt = norm(&fwd.text_delta);
    let mut g_text_delta = vec![0.0; fwd.text_delta.len()];
    let g_deltas: Vec<Vec<f64>> = fwd
        .deltas
        .iter()
        .map(|d| {
            let ni = norm(d);
            let cos = dot(d, &fwd.text_delta) / (ni * nt);
            // each term is 1 - cos, averaged
            let k = -1.0 / m;
            for (g, (t, x)) in g_text_delta.iter_mut().zip(fwd.text_delta.iter().zip(d)) {
                *g += k * (x / (ni * nt) - cos * t / (nt * nt));
            }
            d.iter()
                .zip(&fwd.text_delta)
                .map(|(x, t)| k * (t / (ni * nt) - cos * x / (ni * ni)))
                .collect()
        })
        .collect();
    let neg: Vec<Vec<f64>> = g_deltas
        .iter()
        .map(|g| g.iter().map(|v| -v).collect())
        .collect();
    let target_patches = pull_back(&fwd.tgt_chains, &g_deltas, &fwd.tgt_projs, &inputs.target_patches);
    let source_patches = pull_back(&fwd.src_chains, &neg, &fwd.src_projs, &inputs.source_patches);
    let neg_text: Vec<f64> = g_text_delta.iter().map(|v| -v).collect();
    Ok(StyleGrad {
        value: fwd.value,
        target_patches,
        source_patches,
        target_text: Tensor::from_parts(
            inputs.target_text.shape().to_vec(),
            project_backward(&fwd.tgt_text, &g_text_delta),
        ),
        source_text: Tensor::from_parts(
            inputs.source_text.shape().to_vec(),
            project_backward(&fwd.src_text, &neg_text),
        ),
        clamped: 0,
    })
}

pub fn loss_style_grad(inputs: &StyleInputs, w: &LossWeights) -> Result<StyleGrad> {
    let pc = loss_pc_grad(inputs)?;
    let pd = loss_pd_grad(inputs)?;
    let mix = |a: &Tensor, b: &Tensor| {
        Tensor::from_parts(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| w.lambda_pc * x + w.lambda_pd * y)
                .collect(),
        )
    };
    Ok(StyleGrad {
        value: w.lambda_pc * pc.value + w.lambda_pd * pd.value,
        target_patches: pc.target_patches.iter().zip(&pd.target_patches).map(|(a, b)| mix(a, b)).collect(),
        source_patches: pc.source_patches.iter().zip(&pd.source_patches).map(|(a, b)| mix(a, b)).collect(),
        target_text: mix(&pc.target_text, &pd.target_text),
        source_text: mix(&pc.source_text, &pd.source_text),
        clamped: pc.clamped + pd.clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, len: usize) -> Tensor {
        Tensor::from_vec((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn inputs(seed: u64, n: usize, len: usize) -> StyleInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StyleInputs {
            target_patches: (0..n).map(|_| rand_tensor(&mut rng, len)).collect(),
            source_patches: (0..n).map(|_| rand_tensor(&mut rng, len)).collect(),
            target_text: rand_tensor(&mut rng, len),
            source_text: rand_tensor(&mut rng, len),
            augment: AugmentConfig::default(),
        }
    }

    #[test]
    fn pc_zero_when_patches_match_text() {
        let mut inp = inputs(1, 4, 10);
        inp.target_patches = vec![inp.target_text.clone(); 4];
        let v = loss_pc(&inp).unwrap();
        assert!(v <= 1e-12, "{v}");
    }

    #[test]
    fn pc_quarter_pi_when_orthogonal() {
        // text in the y row only, patches in the x row only
        let mut inp = inputs(1, 3, 4);
        inp.target_text = Tensor::from_vec(vec![0.0, 0.0, 1.0, -1.0]).unwrap();
        inp.target_patches = vec![
            Tensor::from_vec(vec![1.0, -1.0, 0.0, 0.0]).unwrap(),
            Tensor::from_vec(vec![2.0, -2.0, 0.0, 0.0]).unwrap(),
            Tensor::from_vec(vec![1.0, -1.0, 3.0, 3.0]).unwrap(),
        ];
        let v = loss_pc(&inp).unwrap();
        assert!((v - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn pd_extremes() {
        let t = vec![0.1, -0.2, 0.3];
        assert!(directional_mean(&[t.clone(), t.iter().map(|v| 5.0 * v).collect()], &t).unwrap().abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((directional_mean(&[neg], &t).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            directional_mean(&[t.clone(), vec![0.0; 3]], &t),
            Err(Error::DegenerateDirection { what: "image", index: 1 })
        ));
        assert!(matches!(
            directional_mean(&[t.clone()], &[0.0; 3]),
            Err(Error::DegenerateDirection { what: "text", .. })
        ));
    }

    #[test]
    fn pd_degenerate_when_stacks_match() {
        let mut inp = inputs(2, 4, 8);
        inp.source_patches = inp.target_patches.clone();
        assert!(matches!(loss_pd(&inp), Err(Error::DegenerateDirection { what: "image", index: 0 })));
    }

    #[test]
    fn style_is_weighted_sum() {
        let inp = inputs(3, 4, 8);
        let w = LossWeights::default();
        let expect = 20000.0 * loss_pc(&inp).unwrap() + 20000.0 * loss_pd(&inp).unwrap();
        assert_eq!(loss_style(&inp, &w).unwrap(), expect);
        let w = LossWeights { lambda_pd: 0.0, ..w };
        assert_eq!(loss_style(&inp, &w).unwrap(), 20000.0 * loss_pc(&inp).unwrap());
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let mut inp = inputs(4, 4, 8);
        inp.target_text = Tensor::from_vec(vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        assert!(matches!(loss_pc(&inp), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_values_match_plain_ops() {
        let inp = inputs(5, 4, 8);
        assert_eq!(loss_pc_grad(&inp).unwrap().value.to_bits(), loss_pc(&inp).unwrap().to_bits());
        assert_eq!(loss_pd_grad(&inp).unwrap().value.to_bits(), loss_pd(&inp).unwrap().to_bits());
    }

    /// Two pre-shapes exactly one radian apart, returned as raw tensors.
    fn unit_radian_pair(rng: &mut ChaCha8Rng, len: usize) -> (Tensor, Tensor) {
        let a = project_slice(rand_tensor(rng, len).data()).unwrap().shape.into_vec();
        let b = project_slice(rand_tensor(rng, len).data()).unwrap().shape.into_vec();
        let along = dot(&a, &b);
        let mut u: Vec<f64> = b.iter().zip(&a).map(|(y, x)| y - along * x).collect();
        let nu = norm(&u);
        u.iter_mut().for_each(|v| *v /= nu);
        let (s, c) = 1.0f64.sin_cos();
        let b: Vec<f64> = a.iter().zip(&u).map(|(x, y)| c * x + s * y).collect();
        (Tensor::from_vec(a).unwrap(), Tensor::from_vec(b).unwrap())
    }

    #[test]
    fn two_patch_swap_symmetry() {
        // curve parameters are radians, so swapping a pair maps s to d - s;
        // with emphasis weights (a, b), (b, a) and a + b = 1 the augmented
        // set is unchanged exactly when d = 1
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t0, t1) = unit_radian_pair(&mut rng, 8);
        let (s0, s1) = unit_radian_pair(&mut rng, 8);
        let mut inp = inputs(6, 2, 8);
        inp.target_patches = vec![t0, t1];
        inp.source_patches = vec![s0, s1];
        inp.augment = AugmentConfig { m: Some(2), gamma: 0.4, ..Default::default() };
        let pc = loss_pc(&inp).unwrap();
        let pd = loss_pd(&inp).unwrap();
        inp.target_patches.swap(0, 1);
        inp.source_patches.swap(0, 1);
        assert!((loss_pc(&inp).unwrap() - pc).abs() < 1e-9);
        assert!((loss_pd(&inp).unwrap() - pd).abs() < 1e-9);
    }

    #[test]
    fn generic_pairs_are_order_sensitive() {
        let mut inp = inputs(7, 2, 8);
        inp.augment = AugmentConfig { m: Some(2), gamma: 0.4, ..Default::default() };
        let pc = loss_pc(&inp).unwrap();
        inp.target_patches.swap(0, 1);
        assert!((loss_pc(&inp).unwrap() - pc).abs() > 1e-6);
    }
}
