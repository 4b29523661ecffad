use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss weights and patch count. Defaults are the published settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_pc: f64,
    pub lambda_pd: f64,
    pub lambda_ps: f64,
    pub lambda_z: f64,
    pub lambda_v: f64,
    pub lambda_m: f64,
    pub n: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pc: 20000.0,
            lambda_pd: 20000.0,
            lambda_ps: 1000.0,
            lambda_z: 1000.0,
            lambda_v: 1000.0,
            lambda_m: 100.0,
            n: 49,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_pc: 0.0,
            lambda_pd: 0.0,
            lambda_ps: 0.0,
            lambda_z: 0.0,
            lambda_v: 0.0,
            lambda_m: 0.0,
            n: 49,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_pc,
            self.lambda_pd,
            self.lambda_ps,
            self.lambda_z,
            self.lambda_v,
            self.lambda_m,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative: {all:?}")));
        }
        Ok(())
    }
}
