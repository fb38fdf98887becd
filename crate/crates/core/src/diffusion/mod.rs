//! Noise schedule, closed-form forward process, reverse-posterior quantities
//! and the multi-step / one-step residual samplers.

mod sampler;
mod schedule;

pub use sampler::{
    sample_multistep, sample_onestep, sampling_timesteps, InitNoise, SamplerConfig, SamplerKind,
    X0Predictor, STUDENT_T_MAX, STUDENT_T_MIN,
};
pub use schedule::{
    chain_step, chain_step_with_beta, eps_from_x0, eps_from_x0_with, forward_marginal,
    forward_sample, make_linear_schedule, posterior_mean_var, posterior_variance, NoiseSchedule,
};
pub(crate) use schedule::randn_like;
