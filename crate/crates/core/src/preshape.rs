//! Pre-shape space: feature tensors viewed as 2-D landmark sets, centered and
//! scaled onto the unit hypersphere.
//!
//! A tensor with `L` elements is flattened row-major and split in half: the
//! first `L/2` values are the x coordinates, the last `L/2` the y
//! coordinates. A [`PreShape`] keeps that same flat layout, so its backing
//! vector is `[x_1..x_k, y_1..y_k]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Post-centering norms at or below this are rejected as degenerate.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// A `2 x k` landmark matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Landmarks {
    pub fn k(&self) -> usize {
        self.x.len()
    }
}

/// Row-major flatten, first half to the x row, second half to the y row.
pub fn reshape_to_landmarks(t: &Tensor) -> Result<Landmarks> {
    let data = t.data();
    if data.len() % 2 != 0 {
        return Err(Error::Shape(format!(
            "landmark reshape needs an even element count, got {}",
            data.len()
        )));
    }
    let (x, y) = data.split_at(data.len() / 2);
    Ok(Landmarks {
        x: x.to_vec(),
        y: y.to_vec(),
    })
}

/// A point on the pre-shape hypersphere: both coordinate rows have zero mean
/// and the whole landmark matrix has unit Frobenius norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PreShape {
    data: Vec<f64>,
}

impl PreShape {
    /// Wraps a vector that is already centered and unit-norm. Only used for
    /// values produced by operations that preserve the invariants.
    pub(crate) fn from_unit(data: Vec<f64>) -> Self {
        debug_assert!(data.len() % 2 == 0);
        Self { data }
    }

    /// Number of landmarks.
    pub fn k(&self) -> usize {
        self.data.len() / 2
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn x(&self) -> &[f64] {
        &self.data[..self.k()]
    }

    pub fn y(&self) -> &[f64] {
        &self.data[self.k()..]
    }

    pub fn dot(&self, other: &PreShape) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn to_landmarks(&self) -> Landmarks {
        Landmarks {
            x: self.x().to_vec(),
            y: self.y().to_vec(),
        }
    }

    /// Flat tensor view of shape `[2k]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.data.len()], self.data.clone())
    }

    /// Same values in an arbitrary layout with `2k` elements.
    pub fn to_tensor_shaped(&self, shape: &[usize]) -> Result<Tensor> {
        self.to_tensor().reshape(shape.to_vec())
    }

    /// Largest absolute row mean; zero up to rounding for a valid pre-shape.
    pub fn max_row_mean(&self) -> f64 {
        let k = self.k() as f64;
        let mx = self.x().iter().sum::<f64>() / k;
        let my = self.y().iter().sum::<f64>() / k;
        mx.abs().max(my.abs())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A projection together with the pre-normalization norm, needed to
/// differentiate through it.
#[derive(Debug, Clone)]
pub struct Projection {
    pub shape: PreShape,
    pub centered_norm: f64,
}

fn center_halves(values: &[f64]) -> Vec<f64> {
    let half = values.len() / 2;
    let mut out = values.to_vec();
    for row in out.chunks_exact_mut(half) {
        let mean = row.iter().sum::<f64>() / half as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Projects a flat value slice (split-half layout) onto the pre-shape sphere.
pub fn project_slice(values: &[f64]) -> Result<Projection> {
    if values.len() % 2 != 0 {
        return Err(Error::Shape(format!(
            "projection needs an even element count, got {}",
            values.len()
        )));
    }
    if values.len() < 4 {
        return Err(Error::Shape(format!(
            "projection needs at least 2 landmarks, got {} values",
            values.len()
        )));
    }
    let mut centered = center_halves(values);
    let n = norm(&centered);
    if !(n > DEGENERACY_EPS) {
        return Err(Error::DegenerateInput(format!(
            "norm after centering is {n:e}"
        )));
    }
    centered.iter_mut().for_each(|v| *v /= n);
    Ok(Projection {
        shape: PreShape::from_unit(centered),
        centered_norm: n,
    })
}

/// Reshape to landmarks, subtract row means, divide by the Frobenius norm.
pub fn project(t: &Tensor) -> Result<PreShape> {
    project_slice(t.data()).map(|p| p.shape)
}

/// Pulls a gradient on the projected point back to the raw input.
pub fn project_backward(proj: &Projection, grad_out: &[f64]) -> Vec<f64> {
    let u = proj.shape.as_slice();
    let radial = dot(u, grad_out);
    let g: Vec<f64> = grad_out
        .iter()
        .zip(u)
        .map(|(g, u)| (g - u * radial) / proj.centered_norm)
        .collect();
    // centering is an orthogonal projection, so its adjoint is itself
    center_halves(&g)
}

/// Great-circle distance `arccos(<a, b>)` with the inner product clamped to
/// `[-1, 1]`.
pub fn geodesic_distance(a: &PreShape, b: &PreShape) -> Result<f64> {
    check_same_k(a, b)?;
    Ok(angle(a.as_slice(), b.as_slice()).value)
}

pub(crate) fn check_same_k(a: &PreShape, b: &PreShape) -> Result<()> {
    if a.k() != b.k() {
        return Err(Error::Shape(format!(
            "landmark count mismatch: {} vs {}",
            a.k(),
            b.k()
        )));
    }
    Ok(())
}

/// Angle between unit vectors with its derivative along the inner product.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Angle {
    pub value: f64,
    /// `d angle / d <a, b>`; zero where the clamp is active.
    pub slope: f64,
    pub clamped: bool,
}

/// `arccos(clamp(<a, b>))` for unit `a`, `b`, evaluated as
/// `atan2(|b - <a, b> a|, <a, b>)` so that nearly equal or nearly opposite
/// inputs keep full precision. Inner products outside `[-1, 1]` and angles
/// below the coincidence threshold get a zero sub-gradient and are flagged.
pub(crate) fn angle(a: &[f64], b: &[f64]) -> Angle {
    let c = dot(a, b);
    if c >= 1.0 {
        return Angle { value: 0.0, slope: 0.0, clamped: true };
    }
    if c <= -1.0 {
        return Angle { value: std::f64::consts::PI, slope: 0.0, clamped: true };
    }
    // half-angle form: accurate near 0 and pi, and symmetric in a, b
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    let value = 2.0 * diff.sqrt().atan2(sum.sqrt());
    if value < crate::geodesic::COINCIDENT_EPS {
        return Angle { value, slope: 0.0, clamped: true };
    }
    Angle { value, slope: -1.0 / value.sin(), clamped: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn split_half_layout() {
        let l = reshape_to_landmarks(&t(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(l.x, vec![1.0, 2.0]);
        assert_eq!(l.y, vec![3.0, 4.0]);

        let cube = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let l = reshape_to_landmarks(&cube).unwrap();
        assert_eq!(l.x, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(l.y, vec![4.0, 5.0, 6.0, 7.0]);

        assert!(matches!(
            reshape_to_landmarks(&t(&[1.0; 5])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn hand_evaluated_projection() {
        let p = project(&t(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(p.x(), &[-0.5, 0.5]);
        assert_eq!(p.y(), &[-0.5, 0.5]);
    }

    #[test]
    fn constant_rows_are_degenerate() {
        assert!(matches!(
            project(&t(&[5.0, 5.0, 5.0, 5.0])),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            project(&t(&[1.0, 1.0, 7.0, 7.0])),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = project(&t(&v)).unwrap();
        let q = project(&p.to_tensor()).unwrap();
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_cases() {
        let a = project(&t(&[1.0, -1.0, 0.0, 0.0])).unwrap();
        let b = project(&t(&[0.0, 0.0, 1.0, -1.0])).unwrap();
        assert!(geodesic_distance(&a, &a).unwrap() <= 1e-12);
        let d = geodesic_distance(&a, &b).unwrap();
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-15);

        // inner product a hair above one must clamp, not NaN
        let hair = angle(&[1.0 + 1e-15, 0.0], &[1.0, 0.0]);
        assert_eq!(hair.value, 0.0);
        assert!(hair.clamped);
        let nudged = PreShape::from_unit(a.as_slice().iter().map(|v| v * (1.0 + 1e-15)).collect());
        assert!(nudged.dot(&a) > 1.0);
        assert_eq!(geodesic_distance(&nudged, &a).unwrap(), 0.0);

        let c = project(&t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        assert!(matches!(geodesic_distance(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| dot(project_slice(x).unwrap().shape.as_slice(), &w);
        let proj = project_slice(&v).unwrap();
        let g = project_backward(&proj, &w);
        let h = 1e-6;
        for i in 0..v.len() {
            let mut p = v.clone();
            p[i] += h;
            let mut m = v.clone();
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "coord {i}: {fd} vs {}", g[i]);
        }
    }
}
