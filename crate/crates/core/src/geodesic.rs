//! Geodesic curves and surfaces on the pre-shape sphere, and feature
//! augmentation by sampling surface points under different weight sets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preshape::{check_same_k, dot, norm, PreShape};

/// Below this distance two pre-shapes are treated as the same point.
pub const COINCIDENT_EPS: f64 = 1e-9;
/// Within this margin of pi two pre-shapes are treated as antipodal.
pub const ANTIPODAL_EPS: f64 = 1e-9;

/// Point on the great circle from `a` through `b`, at arc length `s` from `a`.
#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub point: PreShape,
    /// `s` exceeded the distance between the endpoints, so the point lies
    /// past `b` on the great circle.
    pub overshoot: bool,
}

pub fn curve_point(a: &PreShape, b: &PreShape, s: f64) -> Result<PreShape> {
    curve_point_flagged(a, b, s).map(|c| c.point)
}

pub fn curve_point_flagged(a: &PreShape, b: &PreShape, s: f64) -> Result<CurvePoint> {
    let step = CurveStep::forward(a, b, s, 0)?;
    let overshoot = match &step {
        CurveStep::Stay { .. } => false,
        CurveStep::Move { dist, .. } => s > *dist,
    };
    Ok(CurvePoint {
        point: step.output(a),
        overshoot,
    })
}

/// One evaluation of the curve formula with everything the backward pass
/// needs.
#[derive(Debug, Clone)]
pub(crate) enum CurveStep {
    /// `s == 0` or coincident endpoints: the output is `a` itself.
    Stay,
    Move {
        a: Vec<f64>,
        b: Vec<f64>,
        cos_d: f64,
        sin_d: f64,
        dist: f64,
        s: f64,
        /// Output before renormalization and its norm.
        raw_norm: f64,
        out: Vec<f64>,
    },
}

impl CurveStep {
    pub(crate) fn forward(a: &PreShape, b: &PreShape, s: f64, index: usize) -> Result<Self> {
        check_same_k(a, b)?;
        if !(0.0..=std::f64::consts::PI).contains(&s) {
            return Err(Error::Config(format!(
                "curve parameter {s} outside [0, pi]"
            )));
        }
        if s == 0.0 {
            return Ok(CurveStep::Stay);
        }
        let c = a.dot(b).clamp(-1.0, 1.0);
        let av = a.as_slice();
        let bv = b.as_slice();
        let sin_d = norm(&av.iter().zip(bv).map(|(x, y)| y - x * c).collect::<Vec<_>>());
        let dist = crate::preshape::angle(av, bv).value;
        if dist < COINCIDENT_EPS {
            return Ok(CurveStep::Stay);
        }
        if dist > std::f64::consts::PI - ANTIPODAL_EPS {
            return Err(Error::DegenerateGeodesic { index });
        }
        let (sin_s, cos_s) = s.sin_cos();
        let mut out: Vec<f64> = av
            .iter()
            .zip(bv)
            .map(|(x, y)| cos_s * x + sin_s * (y - x * c) / sin_d)
            .collect();
        let raw_norm = norm(&out);
        out.iter_mut().for_each(|v| *v /= raw_norm);
        Ok(CurveStep::Move {
            a: av.to_vec(),
            b: bv.to_vec(),
            cos_d: c,
            sin_d,
            dist,
            s,
            raw_norm,
            out,
        })
    }

    pub(crate) fn output(&self, a: &PreShape) -> PreShape {
        match self {
            CurveStep::Stay => a.clone(),
            CurveStep::Move { out, .. } => PreShape::from_unit(out.clone()),
        }
    }

    /// Returns `(grad_a, grad_b)`; `grad_b` is `None` when the step did not
    /// depend on `b`.
    pub(crate) fn backward(&self, grad_out: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
        match self {
            CurveStep::Stay => (grad_out.to_vec(), None),
            CurveStep::Move {
                a,
                b,
                cos_d: c,
                sin_d,
                s,
                raw_norm,
                out,
                ..
            } => {
                // renormalization
                let radial = dot(out, grad_out);
                let g_p: Vec<f64> = grad_out
                    .iter()
                    .zip(out)
                    .map(|(g, q)| (g - q * radial) / raw_norm)
                    .collect();

                // p = cos s * a + sin s * r * (b - c a),  r = (1 - c^2)^(-1/2) = 1 / sin d
                let (sin_s, cos_s) = s.sin_cos();
                let r = 1.0 / sin_d;
                let g_w: Vec<f64> = g_p.iter().map(|g| sin_s * r * g).collect();
                let w_dot_gp: f64 = a
                    .iter()
                    .zip(b)
                    .zip(&g_p)
                    .map(|((x, y), g)| (y - c * x) * g)
                    .sum();
                let g_r = sin_s * w_dot_gp;
                let g_c = -dot(a, &g_w) + g_r * c * r * r * r;

                let g_a = (0..a.len())
                    .map(|i| cos_s * g_p[i] - c * g_w[i] + g_c * b[i])
                    .collect();
                let g_b = (0..b.len()).map(|i| g_w[i] + g_c * a[i]).collect();
                (g_a, Some(g_b))
            }
        }
    }
}

/// Non-negative weights, one per input pre-shape, not all zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightSet(Vec<f64>);

impl WeightSet {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "weights must be finite and non-negative: {weights:?}"
            )));
        }
        if !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::Config("weights sum to zero".into()));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Curve parameters `w_j / (w_1 + ... + w_j)` for `j = 2..=n`. A zero
    /// prefix sum yields 0 (the weight itself is then zero as well).
    pub fn step_parameters(&self) -> Vec<f64> {
        let mut prefix = self.0[0];
        self.0[1..]
            .iter()
            .map(|&w| {
                prefix += w;
                if prefix > 0.0 {
                    w / prefix
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Walks the weighted geodesic chain `mu_1 = tau_1`,
/// `mu_j = curve(mu_{j-1}, tau_j)(w_j / sum_{i<=j} w_i)` and returns `mu_n`.
pub fn surface_point(taus: &[PreShape], weights: &WeightSet) -> Result<PreShape> {
    SurfaceChain::forward(taus, weights).map(|c| c.output)
}

#[derive(Debug, Clone)]
pub(crate) struct SurfaceChain {
    steps: Vec<CurveStep>,
    pub(crate) output: PreShape,
}

impl SurfaceChain {
    pub(crate) fn forward(taus: &[PreShape], weights: &WeightSet) -> Result<Self> {
        if taus.len() < 2 {
            return Err(Error::Config(format!(
                "a geodesic surface needs at least 2 pre-shapes, got {}",
                taus.len()
            )));
        }
        if weights.len() != taus.len() {
            return Err(Error::Config(format!(
                "{} weights for {} pre-shapes",
                weights.len(),
                taus.len()
            )));
        }
        let k = taus[0].k();
        if let Some(bad) = taus.iter().find(|t| t.k() != k) {
            return Err(Error::Shape(format!(
                "landmark count mismatch: {k} vs {}",
                bad.k()
            )));
        }

        let mut mu = taus[0].clone();
        let mut steps = Vec::with_capacity(taus.len() - 1);
        for (j, (tau, s)) in taus[1..].iter().zip(weights.step_parameters()).enumerate() {
            // index reported 1-based to match mu_j numbering
            let step = CurveStep::forward(&mu, tau, s, j + 2)?;
            mu = step.output(&mu);
            steps.push(step);
        }
        Ok(Self { steps, output: mu })
    }

    /// Gradients with respect to every input pre-shape, in input order.
    pub(crate) fn backward(&self, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let n = self.steps.len() + 1;
        let mut grads = vec![vec![0.0; grad_out.len()]; n];
        let mut g_mu = grad_out.to_vec();
        for (j, step) in self.steps.iter().enumerate().rev() {
            let (g_prev, g_tau) = step.backward(&g_mu);
            if let Some(g_tau) = g_tau {
                grads[j + 1] = g_tau;
            }
            g_mu = g_prev;
        }
        grads[0] = g_mu;
        grads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightScheme {
    /// Set `i` puts `gamma` extra mass on patch `i mod n` over a uniform base.
    Emphasis,
    /// Seeded uniform draws from the probability simplex.
    Dirichlet { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Number of augmented features; `None` means one per input.
    pub m: Option<usize>,
    pub gamma: f64,
    pub scheme: WeightScheme,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            m: None,
            gamma: 0.5,
            scheme: WeightScheme::Emphasis,
        }
    }
}

impl AugmentConfig {
    pub fn count(&self, n: usize) -> usize {
        self.m.unwrap_or(n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == Some(0) {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

pub fn generate_weight_sets(n: usize, cfg: &AugmentConfig) -> Result<Vec<WeightSet>> {
    cfg.validate()?;
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 inputs, got {n}")));
    }
    let m = cfg.count(n);
    match cfg.scheme {
        WeightScheme::Emphasis => {
            let base = (1.0 - cfg.gamma) / n as f64;
            (0..m)
                .map(|i| {
                    let mut w = vec![base; n];
                    w[i % n] += cfg.gamma;
                    WeightSet::new(w)
                })
                .collect()
        }
        WeightScheme::Dirichlet { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..m)
                .map(|_| {
                    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
                    let total: f64 = draws.iter().sum();
                    WeightSet::new(draws.into_iter().map(|d| d / total).collect())
                })
                .collect()
        }
    }
}

/// Surface points of `taus` under each of the given weight sets.
pub fn augment_with(taus: &[PreShape], sets: &[WeightSet]) -> Result<Vec<PreShape>> {
    sets.par_iter().map(|w| surface_point(taus, w)).collect()
}

pub fn augment(taus: &[PreShape], cfg: &AugmentConfig) -> Result<Vec<PreShape>> {
    let sets = generate_weight_sets(taus.len(), cfg)?;
    augment_with(taus, &sets)
}

pub(crate) fn augment_chains(taus: &[PreShape], sets: &[WeightSet]) -> Result<Vec<SurfaceChain>> {
    sets.par_iter()
        .map(|w| SurfaceChain::forward(taus, w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preshape::{geodesic_distance, project_slice};
    use rand::{Rng, SeedableRng};

    fn random_shape(rng: &mut ChaCha8Rng, len: usize) -> PreShape {
        let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        project_slice(&v).unwrap().shape
    }

    fn close(a: &PreShape, b: &[f64], tol: f64) -> bool {
        a.as_slice().iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn orthogonal_quarter_turn() {
        let a = project_slice(&[1.0, -1.0, 0.0, 0.0]).unwrap().shape;
        let b = project_slice(&[0.0, 0.0, 1.0, -1.0]).unwrap().shape;
        assert!(a.dot(&b).abs() < 1e-15);
        let p = curve_point(&a, &b, std::f64::consts::FRAC_PI_4).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| h * (x + y)).collect();
        assert!(close(&p, &expect, 1e-15));
        assert_eq!(curve_point(&a, &b, 0.0).unwrap(), a);
    }

    #[test]
    fn endpoint_and_overshoot_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_shape(&mut rng, 10);
        let b = random_shape(&mut rng, 10);
        let d = geodesic_distance(&a, &b).unwrap();
        let end = curve_point_flagged(&a, &b, d).unwrap();
        assert!(!end.overshoot);
        assert!(close(&end.point, b.as_slice(), 1e-9));
        let past = curve_point_flagged(&a, &b, (d + 0.1).min(std::f64::consts::PI)).unwrap();
        assert!(past.overshoot);
        assert!(curve_point(&a, &b, -0.1).is_err());
        assert!(curve_point(&a, &b, 3.5).is_err());
    }

    #[test]
    fn antipodal_is_an_error() {
        let a = project_slice(&[1.0, -1.0, 0.5, -0.5]).unwrap().shape;
        let b = PreShape::from_unit(a.as_slice().iter().map(|v| -v).collect());
        assert!(matches!(
            curve_point(&a, &b, 0.3),
            Err(Error::DegenerateGeodesic { index: 0 })
        ));
        let a2 = project_slice(&[1.0, -1.0, 0.5, -0.5]).unwrap().shape;
        let b2 = PreShape::from_unit(a2.as_slice().iter().map(|v| -v).collect());
        let err = surface_point(&[a2.clone(), a2, b2], &WeightSet::new(vec![1.0, 1.0, 1.0]).unwrap());
        assert!(matches!(err, Err(Error::DegenerateGeodesic { index: 3 })));
    }

    #[test]
    fn surface_collapse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let taus: Vec<PreShape> = (0..5).map(|_| random_shape(&mut rng, 8)).collect();
        let e1 = WeightSet::new(vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(surface_point(&taus, &e1).unwrap(), taus[0]);

        let same = vec![taus[0].clone(); 5];
        let w = WeightSet::new(vec![0.3, 0.1, 0.2, 0.3, 0.1]).unwrap();
        assert_eq!(surface_point(&same, &w).unwrap(), taus[0]);
    }

    #[test]
    fn two_point_surface_uses_half_radian() {
        let a = project_slice(&[1.0, -1.0, 0.0, 0.0]).unwrap().shape;
        let b = project_slice(&[0.0, 0.0, 1.0, -1.0]).unwrap().shape;
        let w = WeightSet::new(vec![1.0, 1.0]).unwrap();
        let mu = surface_point(&[a.clone(), b.clone()], &w).unwrap();
        let (s, c) = 0.5f64.sin_cos();
        let expect: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| c * x + s * y).collect();
        assert!(close(&mu, &expect, 1e-15));
    }

    #[test]
    fn zero_weight_tail_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let taus: Vec<PreShape> = (0..4).map(|_| random_shape(&mut rng, 12)).collect();
        let w = WeightSet::new(vec![0.2, 0.5, 0.3]).unwrap();
        let base = surface_point(&taus[..3], &w).unwrap();
        let w4 = WeightSet::new(vec![0.2, 0.5, 0.3, 0.0]).unwrap();
        assert_eq!(surface_point(&taus, &w4).unwrap(), base);
    }

    #[test]
    fn emphasis_weights() {
        let cfg = AugmentConfig { m: Some(4), gamma: 0.5, scheme: WeightScheme::Emphasis };
        let sets = generate_weight_sets(4, &cfg).unwrap();
        assert_eq!(sets.len(), 4);
        assert_eq!(sets[1].as_slice(), &[0.125, 0.625, 0.125, 0.125]);
        for s in &sets {
            assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }

        let flat = AugmentConfig { gamma: 0.0, ..cfg };
        for s in generate_weight_sets(4, &flat).unwrap() {
            assert_eq!(s.as_slice(), &[0.25; 4]);
        }

        // m > n cycles over patch indices
        let cyc = AugmentConfig { m: Some(6), ..cfg };
        let sets = generate_weight_sets(4, &cyc).unwrap();
        assert_eq!(sets[5], sets[1]);
    }

    #[test]
    fn dirichlet_is_seeded() {
        let cfg = AugmentConfig { m: Some(3), gamma: 0.5, scheme: WeightScheme::Dirichlet { seed: 42 } };
        let a = generate_weight_sets(5, &cfg).unwrap();
        let b = generate_weight_sets(5, &cfg).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let other = AugmentConfig { scheme: WeightScheme::Dirichlet { seed: 43 }, ..cfg };
        assert_ne!(a, generate_weight_sets(5, &other).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = AugmentConfig { gamma: 1.5, ..Default::default() };
        assert!(generate_weight_sets(4, &bad).is_err());
        let bad = AugmentConfig { m: Some(0), ..Default::default() };
        assert!(generate_weight_sets(4, &bad).is_err());
        assert!(generate_weight_sets(1, &AugmentConfig::default()).is_err());
        assert!(WeightSet::new(vec![0.0, 0.0]).is_err());
        assert!(WeightSet::new(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn augment_defaults_and_degenerate_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let taus: Vec<PreShape> = (0..49).map(|_| random_shape(&mut rng, 16)).collect();
        let out = augment(&taus, &AugmentConfig::default()).unwrap();
        assert_eq!(out.len(), 49);
        for p in &out {
            assert!((p.norm() - 1.0).abs() < 1e-12);
            assert!(p.max_row_mean() < 1e-12);
        }

        let pure = AugmentConfig { gamma: 1.0, ..Default::default() };
        let out = augment(&taus[..4], &pure).unwrap();
        assert_eq!(out[0], taus[0]);

        let same = vec![taus[3].clone(); 6];
        for p in augment(&same, &AugmentConfig::default()).unwrap() {
            assert_eq!(p, taus[3]);
        }
    }

    #[test]
    fn curve_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_shape(&mut rng, 8);
        let b = random_shape(&mut rng, 8);
        let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = 0.7;
        let step = CurveStep::forward(&a, &b, s, 0).unwrap();
        let (ga, gb) = step.backward(&w);
        let gb = gb.unwrap();
        // inputs live on the unit sphere, so only tangential components are
        // defined; compare after removing the radial part
        let tangent = |g: &[f64], u: &PreShape| -> Vec<f64> {
            let r = dot(g, u.as_slice());
            g.iter().zip(u.as_slice()).map(|(x, y)| x - r * y).collect()
        };
        let f = |av: &[f64], bv: &[f64]| {
            let a = PreShape::from_unit(av.to_vec());
            let b = PreShape::from_unit(bv.to_vec());
            dot(CurveStep::forward(&a, &b, s, 0).unwrap().output(&a).as_slice(), &w)
        };
        let h = 1e-6;
        let mut fa = vec![0.0; 8];
        let mut fb = vec![0.0; 8];
        for i in 0..8 {
            let mut p = a.as_slice().to_vec();
            let mut m = p.clone();
            p[i] += h;
            m[i] -= h;
            fa[i] = (f(&p, b.as_slice()) - f(&m, b.as_slice())) / (2.0 * h);
            let mut p = b.as_slice().to_vec();
            let mut m = p.clone();
            p[i] += h;
            m[i] -= h;
            fb[i] = (f(a.as_slice(), &p) - f(a.as_slice(), &m)) / (2.0 * h);
        }
        let pairs = [(tangent(&fa, &a), tangent(&ga, &a)), (tangent(&fb, &b), tangent(&gb, &b))];
        for (fd, an) in pairs {
            for i in 0..8 {
                assert!((fd[i] - an[i]).abs() < 1e-7, "{i}: {} vs {}", fd[i], an[i]);
            }
        }
    }
}
