//! Noise schedule, denoised estimate, deterministic inversion and the
//! loss-guided reverse loop.

pub mod guidance;
pub mod sampler;
pub mod schedule;
pub mod toy;

pub use guidance::{
    GradientSign, Guide, GuidanceConfig, GuidanceObjective, LayerEncoder, LayerSpec, PatchEncoder,
    ToyExtractorConfig, ToyObjective,
};
pub use sampler::{
    ddim_invert, denoised_estimate, guided_step, sample_loop, InvertOptions, Inversion, NoisePredictor,
    SampleOutput, StepOutput, TraceEntry,
};
pub use schedule::{build_schedule, q_sample, BetaSpec, Denominator, Schedule, ScheduleConfig, SigmaMode, Timestep};
pub use toy::ToyPredictor;
