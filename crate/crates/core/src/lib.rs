//! Pre-shape geometry, geodesic feature augmentation, patch and content
//! losses with analytic gradients, a guided diffusion loop and image metrics.

pub mod contentloss;
pub mod diffusion;
pub mod error;
pub mod geodesic;
pub mod grad;
pub mod metrics;
pub mod preshape;
pub mod styleloss;
pub mod swc;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use geodesic::{AugmentConfig, WeightScheme, WeightSet};
pub use grad::{LossConfig, LossId, TensorSet};
pub use preshape::PreShape;
pub use swc::{CropMode, PatchPlan};
pub use tensor::{DType, Tensor};
pub use weights::LossWeights;
pub use diffusion::{GuidanceConfig, Schedule, ScheduleConfig, ToyPredictor};
pub use metrics::Psnr;
