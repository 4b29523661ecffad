use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::guidance::{GradientSign, Guide};
use super::schedule::{Schedule, Timestep};

/// Noise prediction `eps(x_t, t)`. Must be deterministic and return a
/// tensor of the input's shape.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &Tensor, ts: Timestep) -> Result<Tensor>;
}

fn predict_checked(pred: &dyn NoisePredictor, x: &Tensor, ts: Timestep) -> Result<Tensor> {
    let eps = pred.predict(x, ts)?;
    eps.same_shape(x)?;
    if !eps.all_finite() {
        return Err(Error::Validation(format!("predictor output not finite at t = {}", ts.t)));
    }
    Ok(eps)
}

fn combine(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Tensor {
    let data = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn rel_change(new: &Tensor, old: &Tensor) -> f64 {
    let d: f64 = new
        .data()
        .iter()
        .zip(old.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    d / new.norm().max(f64::MIN_POSITIVE)
}

/// Denoised estimate at respaced index `k` and the noise prediction used.
pub fn denoised_estimate(
    x: &Tensor,
    k: usize,
    pred: &dyn NoisePredictor,
    sched: &Schedule,
) -> Result<(Tensor, Tensor)> {
    let ts = sched.timestep(k)?;
    let eps = predict_checked(pred, x, ts)?;
    let denom = sched.denominator(k)?;
    let x0 = combine(1.0 / denom, x, -(1.0 - ts.alpha_bar).sqrt() / denom, &eps);
    Ok((x0, eps))
}

/// `x_{k-1} = sqrt(ab_{k-1}) x0 + sqrt(1 - ab_{k-1} - sigma^2) eps + sigma z`.
fn ddim_update(
    x0: &Tensor,
    eps: &Tensor,
    k: usize,
    sched: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let prev = sched.timestep(k - 1)?.alpha_bar;
    let sigma = sched.sigma(k)?;
    let dir = (1.0 - prev - sigma * sigma).max(0.0).sqrt();
    let mut out = combine(prev.sqrt(), x0, dir, eps);
    if sigma > 0.0 {
        for v in out.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertOptions {
    /// Fixed-point iterations per step solving for the exact preimage of the
    /// deterministic update. 0 gives the plain explicit inversion.
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for InvertOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub x: Tensor,
    /// Largest relative change of the final fixed-point iterate over all
    /// steps.
    pub residual: f64,
}

/// Runs the deterministic update backwards from the clean image to respaced
/// index `k_stop`.
///
/// Each step starts from the explicit inversion
/// `x_k = sqrt(ab_k) x0_hat(x_{k-1}) + sqrt(1 - ab_k) eps(x_{k-1})` and then
/// iterates `x_k <- D_k (x_{k-1} - sqrt(1 - ab_{k-1}) e) / sqrt(ab_{k-1}) + sqrt(1 - ab_k) e`
/// with `e = eps(x_k)`, whose fixed point is mapped exactly onto `x_{k-1}`
/// by the sigma = 0 update.
pub fn ddim_invert(
    x0: &Tensor,
    pred: &dyn NoisePredictor,
    sched: &Schedule,
    k_stop: usize,
    opts: &InvertOptions,
) -> Result<Inversion> {
    if k_stop > sched.len() {
        return Err(Error::Index(format!(
            "inversion target {k_stop} beyond T' = {}",
            sched.len()
        )));
    }
    let mut x = x0.clone();
    let mut residual: f64 = 0.0;
    for k in 1..=k_stop {
        let prev = sched.timestep(k - 1)?.alpha_bar;
        let cur = sched.timestep(k)?.alpha_bar;
        let (x0_hat, eps) = denoised_estimate(&x, k - 1, pred, sched)?;
        let mut next = combine(cur.sqrt(), &x0_hat, (1.0 - cur).sqrt(), &eps);
        let scale = sched.denominator(k)? / prev.sqrt();
        let mut change = 0.0;
        for _ in 0..opts.max_iters {
            let e = predict_checked(pred, &next, sched.timestep(k)?)?;
            let base = combine(scale, &x, -scale * (1.0 - prev).sqrt(), &e);
            let refined = combine(1.0, &base, (1.0 - cur).sqrt(), &e);
            change = rel_change(&refined, &next);
            next = refined;
            if change <= opts.tol {
                break;
            }
        }
        residual = residual.max(change);
        x = next;
    }
    Ok(Inversion { x, residual })
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub x: Tensor,
    pub x0_hat: Tensor,
    /// Guidance loss at the denoised estimate, before and after the update.
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
}

/// One reverse step `k -> k - 1` with optional loss guidance applied to the
/// denoised estimate.
pub fn guided_step(
    x: &Tensor,
    k: usize,
    pred: &dyn NoisePredictor,
    sched: &Schedule,
    guide: Option<&Guide<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    if k == 0 {
        return Err(Error::Index("cannot step below the clean image".into()));
    }
    let (mut x0_hat, eps) = denoised_estimate(x, k, pred, sched)?;
    let mut loss_before = None;
    let mut loss_after = None;
    if let Some(g) = guide.filter(|g| g.is_active()) {
        let (loss, grad) = g.objective.loss_and_grad(&x0_hat)?;
        let sign = match g.config.sign {
            GradientSign::Descent => -1.0,
            GradientSign::PaperPlus => 1.0,
        };
        x0_hat = combine(1.0, &x0_hat, sign * g.config.eta, &grad);
        loss_before = Some(loss);
        if g.config.record_after {
            loss_after = Some(g.objective.loss(&x0_hat)?);
        }
    }
    let out = ddim_update(&x0_hat, &eps, k, sched, rng)?;
    Ok(StepOutput {
        x: out,
        x0_hat,
        loss_before,
        loss_after,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub k: usize,
    pub t: usize,
    pub loss: Option<f64>,
    pub loss_after: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: Tensor,
    pub inverted: Tensor,
    pub inversion_residual: f64,
    pub trace: Vec<TraceEntry>,
}

/// Inverts `x0` to the schedule's `t0`, then runs `t0` reverse steps.
pub fn sample_loop(
    x0: &Tensor,
    pred: &dyn NoisePredictor,
    sched: &Schedule,
    guide: Option<&Guide<'_>>,
    seed: u64,
    invert: &InvertOptions,
) -> Result<SampleOutput> {
    let inv = ddim_invert(x0, pred, sched, sched.t0, invert)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = inv.x.clone();
    let mut trace = Vec::with_capacity(sched.t0);
    for k in (1..=sched.t0).rev() {
        let step = guided_step(&x, k, pred, sched, guide, &mut rng)?;
        trace.push(TraceEntry {
            k,
            t: sched.timestep(k)?.t,
            loss: step.loss_before,
            loss_after: step.loss_after,
        });
        x = step.x;
    }
    Ok(SampleOutput {
        image: x,
        inverted: inv.x,
        inversion_residual: inv.residual,
        trace,
    })
}
