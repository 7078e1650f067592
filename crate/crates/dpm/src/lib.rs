//! Conditional denoising diffusion model for PET-to-MRI synthesis, and its
//! slice-wise use on 3D volumes.

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err(petdiff_core::Error::$variant(format!($($arg)+)));
        }
    };
}

pub mod checkpoint;
pub mod model;
pub mod net;
pub mod norm;
pub mod sample;
pub mod schedule;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use model::{reverse_mean, EpsilonModel, GaussianOracle, ModelOutput};
pub use net::{Architecture, ConvNet};
pub use norm::Normalization;
pub use sample::sample;
pub use schedule::{learned_sigma, make_schedule, posterior_mean_q, q_sample, NoiseSchedule, ScheduleKind};
pub use synth::{grid_search_tau, slice_update, synthesize_volume, tv_denoise_z, SynthConfig};
pub use train::{TrainConfig, Trainer};
