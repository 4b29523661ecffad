use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::sampler::NoisePredictor;
use super::schedule::Timestep;

/// Exact noise predictor for data distributed as `N(mean, scale^2 I)`.
///
/// With `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`, `x_t` and `eps` are jointly
/// Gaussian, so `E[eps | x_t] = sqrt(1 - ab) (x_t - sqrt(ab) mean) / (ab scale^2 + 1 - ab)`.
#[derive(Debug, Clone)]
pub struct ToyPredictor {
    mean: Tensor,
    scale: f64,
}

impl ToyPredictor {
    pub fn new(mean: Tensor, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("toy predictor scale must be >= 0, got {scale}")));
        }
        Ok(Self { mean, scale })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl NoisePredictor for ToyPredictor {
    fn predict(&self, x: &Tensor, ts: Timestep) -> Result<Tensor> {
        x.same_shape(&self.mean)?;
        let ab = ts.alpha_bar;
        let var = ab * self.scale * self.scale + 1.0 - ab;
        if var == 0.0 {
            // point mass at the clean step: nothing left to predict
            return Tensor::zeros(x.shape().to_vec());
        }
        let gain = (1.0 - ab).sqrt() / var;
        let root = ab.sqrt();
        let data = x
            .data()
            .iter()
            .zip(self.mean.data())
            .map(|(v, m)| gain * (v - root * m))
            .collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }
}
