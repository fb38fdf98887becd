use candle_core::{Shape, Tensor, Device, DType};
use rand::Rng;

use super::schedule::{eps_from_x0_with, randn_like, NoiseSchedule};
use crate::{Error, Result};

/// Anything that maps a noisy residual at timestep `t` to an x0 estimate.
/// Conditions (PAN, LMS) are bound inside the implementor.
pub trait X0Predictor {
    fn predict_x0(&mut self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> X0Predictor for F
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_x0(&mut self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitNoise {
    Zero,
    Random,
}

impl std::str::FromStr for InitNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(InitNoise::Zero),
            "random" => Ok(InitNoise::Random),
            other => Err(Error::InvalidArgument(format!("unknown noise mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for InitNoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitNoise::Zero => "zero",
            InitNoise::Random => "random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Deterministic implicit update (eta = 0 by default).
    Implicit,
    /// Ancestral sampling with the reverse-posterior mean and variance,
    /// respaced onto the selected timesteps.
    Ancestral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub init_noise: InitNoise,
    pub eta: f64,
    pub kind: SamplerKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            init_noise: InitNoise::Zero,
            eta: 0.0,
            kind: SamplerKind::Implicit,
        }
    }
}

/// Lowest and highest timestep seen by the one-step student during training.
pub const STUDENT_T_MIN: usize = 20;
pub const STUDENT_T_MAX: usize = 980;

/// `n` timesteps spread uniformly over `[1, steps]`, descending.
pub fn sampling_timesteps(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return Err(Error::InvalidArgument(format!(
            "num_steps {n} outside [1, {steps}]"
        )));
    }
    if n == 1 {
        return Ok(vec![steps]);
    }
    let mut ts: Vec<usize> = (0..n)
        .map(|i| (1.0 + (steps - 1) as f64 * i as f64 / (n - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

fn init_tensor<R: Rng + ?Sized>(
    shape: &Shape,
    dtype: DType,
    device: &Device,
    init: InitNoise,
    rng: &mut R,
) -> Result<Tensor> {
    let zeros = Tensor::zeros(shape, dtype, device)?;
    match init {
        InitNoise::Zero => Ok(zeros),
        InitNoise::Random => randn_like(&zeros, rng),
    }
}

/// Multi-step residual sampler. The predictor is invoked exactly
/// `cfg.num_steps` times; the returned tensor is the residual estimate.
pub fn sample_multistep<P, R>(
    denoiser: &mut P,
    shape: impl Into<Shape>,
    dtype: DType,
    device: &Device,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor>
where
    P: X0Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let shape = shape.into();
    let ts = sampling_timesteps(sched.steps(), cfg.num_steps)?;
    let mut x = init_tensor(&shape, dtype, device, cfg.init_noise, rng)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let x0_hat = denoiser.predict_x0(&x, t)?;
        if x0_hat.shape() != &shape {
            return Err(Error::Dimension(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.dims(),
                shape.dims()
            )));
        }
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t_prev);
        let eps_hat = eps_from_x0_with(&x, &x0_hat, ab)?;
        x = match cfg.kind {
            SamplerKind::Implicit => {
                let sigma = cfg.eta
                    * ((1.0 - ab_prev) / (1.0 - ab)).sqrt()
                    * (1.0 - ab / ab_prev).sqrt();
                let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
                let mut next = ((&x0_hat * ab_prev.sqrt())? + (&eps_hat * dir)?)?;
                if sigma > 0.0 && t_prev > 0 {
                    next = (next + (randn_like(&x, rng)? * sigma)?)?;
                }
                next
            }
            SamplerKind::Ancestral => {
                // Reverse posterior with the effective beta between t and t_prev.
                let alpha = ab / ab_prev;
                let beta = 1.0 - alpha;
                let mean = ((&x - (&eps_hat * (beta / (1.0 - ab).sqrt()))?)? / alpha.sqrt())?;
                let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
                if t_prev > 0 && var > 0.0 {
                    (mean + (randn_like(&x, rng)? * var.sqrt())?)?
                } else {
                    mean
                }
            }
        };
    }
    Ok(x)
}

/// One student call on the initialisation at `t_infer`.
#[allow(clippy::too_many_arguments)]
pub fn sample_onestep<P, R>(
    student: &mut P,
    shape: impl Into<Shape>,
    dtype: DType,
    device: &Device,
    init_noise: InitNoise,
    t_infer: usize,
    rng: &mut R,
) -> Result<Tensor>
where
    P: X0Predictor + ?Sized,
    R: Rng + ?Sized,
{
    if !(STUDENT_T_MIN..=STUDENT_T_MAX).contains(&t_infer) {
        return Err(Error::InvalidArgument(format!(
            "t_infer {t_infer} outside the student's range [{STUDENT_T_MIN}, {STUDENT_T_MAX}]"
        )));
    }
    let shape = shape.into();
    let x = init_tensor(&shape, dtype, device, init_noise, rng)?;
    let out = student.predict_x0(&x, t_infer)?;
    if out.shape() != &shape {
        return Err(Error::Dimension(format!(
            "student returned {:?}, expected {:?}",
            out.dims(),
            shape.dims()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn timesteps_cover_range() {
        let ts = sampling_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(sampling_timesteps(1000, 1).unwrap(), vec![1000]);
        assert!(sampling_timesteps(10, 11).is_err());
    }

    #[test]
    fn oracle_denoiser_reconstructs() {
        let sched = NoiseSchedule::default();
        let dev = Device::Cpu;
        let x0 = Tensor::randn(0f64, 0.3, (1, 4, 8, 8), &dev).unwrap();
        for (steps, init) in [(50, InitNoise::Zero), (50, InitNoise::Random), (1, InitNoise::Zero)] {
            let mut calls = 0;
            let mut oracle = |_: &Tensor, _: usize| -> Result<Tensor> {
                calls += 1;
                Ok(x0.clone())
            };
            let cfg = SamplerConfig {
                num_steps: steps,
                init_noise: init,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let out =
                sample_multistep(&mut oracle, x0.shape(), DType::F64, &dev, &sched, &cfg, &mut rng)
                    .unwrap();
            assert_eq!(calls, steps);
            let err = (out - &x0).unwrap().abs().unwrap().max_all().unwrap();
            assert!(err.to_scalar::<f64>().unwrap() < 1e-4);
        }
    }

    #[test]
    fn ancestral_variant_runs_with_oracle() {
        let sched = NoiseSchedule::default();
        let dev = Device::Cpu;
        let x0 = Tensor::randn(0f64, 0.3, (2, 5), &dev).unwrap();
        let mut oracle = |_: &Tensor, _: usize| -> Result<Tensor> { Ok(x0.clone()) };
        let cfg = SamplerConfig {
            kind: SamplerKind::Ancestral,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out =
            sample_multistep(&mut oracle, (2, 5), DType::F64, &dev, &sched, &cfg, &mut rng).unwrap();
        let err = (out - &x0).unwrap().abs().unwrap().max_all().unwrap();
        assert!(err.to_scalar::<f64>().unwrap() < 1e-4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let sched = NoiseSchedule::default();
        let dev = Device::Cpu;
        let mut bad = |_: &Tensor, _: usize| -> Result<Tensor> {
            Ok(Tensor::zeros((3,), DType::F64, &Device::Cpu)?)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplerConfig::default();
        assert!(matches!(
            sample_multistep(&mut bad, (2, 2), DType::F64, &dev, &sched, &cfg, &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn onestep_contract() {
        let dev = Device::Cpu;
        let calls = std::cell::Cell::new(0);
        let mut student = |x: &Tensor, t: usize| -> Result<Tensor> {
            calls.set(calls.get() + 1);
            Ok(((x * 2.0)? + t as f64)?)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_onestep(&mut student, (2, 3), DType::F64, &dev, InitNoise::Zero, 980, &mut rng)
            .unwrap();
        let b = sample_onestep(&mut student, (2, 3), DType::F64, &dev, InitNoise::Zero, 980, &mut rng)
            .unwrap();
        assert_eq!(a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
        assert!(sample_onestep(&mut student, (2, 3), DType::F64, &dev, InitNoise::Zero, 990, &mut rng)
            .is_err());
        assert_eq!(calls.get(), 2);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let c = sample_onestep(&mut student, (2, 3), DType::F64, &dev, InitNoise::Random, 500, &mut r1)
            .unwrap();
        let d = sample_onestep(&mut student, (2, 3), DType::F64, &dev, InitNoise::Random, 500, &mut r2)
            .unwrap();
        assert_ne!(c.to_vec2::<f64>().unwrap(), d.to_vec2::<f64>().unwrap());
    }
}
