//! Pansharpening with a one-step distilled residual diffusion model fused
//! with an ODE-style end-to-end network.
//!
//! The crate is organised by training stage:
//!
//! * [`raster`]: raster types, synthetic scenes, reduced-resolution degradation
//!   and the on-disk dataset container.
//! * [`diffusion`]: noise schedule, closed-form marginals and the samplers.
//! * [`denoiser`]: the two-branch x0-predicting denoiser (stage 1).
//! * [`distill`]: low-rank adapters and one-step distillation (stage 2).
//! * [`e2e`]: the ODE-block end-to-end network (stage 3).
//! * [`ensemble`]: the frozen-backbone connector (stage 4).
//! * [`metrics`]: reduced- and full-resolution quality indices.
//! * [`pipeline`]: configuration, checkpoints, training, evaluation, cost
//!   accounting, ablations and reports.

pub mod denoiser;
pub mod diffusion;
pub mod distill;
pub mod e2e;
pub mod ensemble;
mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;

pub use error::{Error, Result};
