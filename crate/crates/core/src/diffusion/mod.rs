//! Noise schedules, DDIM sampling and inversion, and the backend interface.

mod backend;
mod ddim;
mod schedule;

pub use backend::{
    invert, invert_batch, invert_latents, sample, sample_batch, sample_latents, Condition,
    DiffusionBackend, GuidanceConfig,
};
pub use ddim::{cfg_noise, ddim_invert_step, ddim_step, forward_diffuse, predict_x0};
pub use schedule::{NoiseSchedule, ScheduleKind, ALPHA_BAR_FLOOR};
