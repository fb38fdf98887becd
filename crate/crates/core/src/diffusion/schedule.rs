use candle_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Variance schedule with 1-based timesteps. `alpha_bar(0)` is 1 by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Linear betas from `beta_start` to `beta_end` over `steps` steps.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_linear_schedule(1000, 1e-4, 0.02).expect("valid default schedule")
    }
}

pub(crate) fn randn_like<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = x.elem_count();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, x.shape(), x.device())?.to_dtype(x.dtype())?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps` for an explicit `alpha_bar`.
pub fn forward_marginal(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    same_shape(x0, eps, "forward sample")?;
    Ok(((x0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

/// Closed-form marginal `q(x_t | x_0)`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    forward_marginal(x0, eps, sched.alpha_bar(t))
}

/// One forward transition with an explicit `beta`:
/// a draw from `N(sqrt(1 - beta) x_prev, beta I)`.
pub fn chain_step_with_beta<R: Rng + ?Sized>(x_prev: &Tensor, beta: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1)")));
    }
    let z = randn_like(x_prev, rng)?;
    Ok(((x_prev * (1.0 - beta).sqrt())? + (z * beta.sqrt())?)?)
}

/// One step of the forward Markov chain `q(x_t | x_{t-1})`.
pub fn chain_step<R: Rng + ?Sized>(
    x_prev: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    sched.check_t(t)?;
    chain_step_with_beta(x_prev, sched.beta(t), rng)
}

/// Noise implied by an x0 estimate for an explicit `alpha_bar < 1`.
pub fn eps_from_x0_with(x_t: &Tensor, x0_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    same_shape(x_t, x0_hat, "eps from x0")?;
    if alpha_bar >= 1.0 {
        return Err(Error::InvalidArgument(
            "alpha_bar = 1 leaves the noise undetermined".into(),
        ));
    }
    Ok(((x_t - (x0_hat * alpha_bar.sqrt())?)? / (1.0 - alpha_bar).sqrt())?)
}

/// Inversion of the closed-form marginal.
pub fn eps_from_x0(x_t: &Tensor, x0_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    eps_from_x0_with(x_t, x0_hat, sched.alpha_bar(t))
}

/// Reverse-transition mean and variance at step `t` given a noise estimate.
/// The variance at `t = 1` is zero.
pub fn posterior_mean_var(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor, f64)> {
    sched.check_t(t)?;
    same_shape(x_t, eps_hat, "posterior mean")?;
    let (beta, alpha, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
    let mean = ((x_t - (eps_hat * (beta / (1.0 - ab).sqrt()))?)? / alpha.sqrt())?;
    Ok((mean, posterior_variance(t, sched)))
}

pub fn posterior_variance(t: usize, sched: &NoiseSchedule) -> f64 {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    (1.0 - ab_prev) / (1.0 - ab) * sched.beta(t)
}
