use candle_core::{Tensor, Var, D};

use super::cost::{record, LayerKind};
use super::store::{Builder, Init, ParamKind};
use crate::{Error, Result};

/// Low-rank adapter settings: effective weight `w + (alpha / rank) A B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone)]
struct Lora {
    a: Tensor,
    b: Tensor,
    scale: f64,
}

impl Lora {
    /// `A` is `out × rank` (random), `B` is `rank × fan_in` (zero).
    fn new(b: &mut Builder, out: usize, fan_in: usize, cfg: LoraConfig) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
        }
        let a = b.get("lora_a", (out, cfg.rank), Init::Uniform(1.0 / (cfg.rank as f64).sqrt()))?;
        let bb = b.get("lora_b", (cfg.rank, fan_in), Init::Zeros)?;
        Ok(Self {
            a,
            b: bb,
            scale: cfg.scale(),
        })
    }

    fn delta(&self) -> Result<Tensor> {
        Ok((self.a.matmul(&self.b)? * self.scale)?)
    }
}

/// Folds `w + scale A B` for adapter `prefix` into a dense tensor.
pub(crate) fn fold_adapter(w: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let d = (a.matmul(b)? * scale)?.reshape(w.shape())?;
    Ok((w + d)?)
}

/// 2-D convolution with zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    lora: Option<Lora>,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    name: String,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let init = if zero_init { Init::Zeros } else { Init::Uniform(bound) };
        let weight = b.get("weight", (out_ch, in_ch, k, k), init)?;
        let bias = Some(b.get("bias", out_ch, if zero_init { Init::Zeros } else { Init::Uniform(bound) })?);
        let lora = match b.lora() {
            Some(cfg) => Some(Lora::new(b, out_ch, fan_in, cfg)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            lora,
            in_ch,
            out_ch,
            k,
            stride,
            name: b.prefix().to_string(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    /// Effective kernel including any adapter.
    pub fn weight(&self) -> Result<Tensor> {
        match &self.lora {
            None => Ok(self.weight.clone()),
            Some(l) => Ok((&self.weight + l.delta()?.reshape(self.weight.shape())?)?),
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, _, _) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::Dimension(format!(
                "conv `{}` expects {} channels, got {c}",
                self.name, self.in_ch
            )));
        }
        let y = x.conv2d(&self.weight()?, self.k / 2, self.stride, 1, 1)?;
        let (_, _, ho, wo) = y.dims4()?;
        record(
            &self.name,
            LayerKind::Conv,
            (self.k * self.k * self.in_ch * self.out_ch * ho * wo * bsz) as u64,
        );
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.out_ch, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Fully connected layer on `[batch, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
    lora: Option<Lora>,
    in_dim: usize,
    out_dim: usize,
    name: String,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize, zero_init: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let init = if zero_init { Init::Zeros } else { Init::Uniform(bound) };
        let weight = b.get("weight", (out_dim, in_dim), init)?;
        let bias = b.get("bias", out_dim, init)?;
        let lora = match b.lora() {
            Some(cfg) => Some(Lora::new(b, out_dim, in_dim, cfg)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            lora,
            in_dim,
            out_dim,
            name: b.prefix().to_string(),
        })
    }

    pub fn weight(&self) -> Result<Tensor> {
        match &self.lora {
            None => Ok(self.weight.clone()),
            Some(l) => Ok((&self.weight + l.delta()?)?),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, d) = x.dims2()?;
        if d != self.in_dim {
            return Err(Error::Dimension(format!(
                "linear `{}` expects {} features, got {d}",
                self.name, self.in_dim
            )));
        }
        record(&self.name, LayerKind::Linear, (bsz * d * self.out_dim) as u64);
        Ok(x.matmul(&self.weight()?.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalisation over `[batch, channels, h, w]` with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    channels: usize,
    name: String,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(b: &mut Builder, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: b.get("gamma", channels, Init::Const(1.0))?,
            beta: b.get("beta", channels, Init::Zeros)?,
            groups,
            channels,
            name: b.prefix().to_string(),
        })
    }

    /// Largest group count `<= 8` dividing `channels`.
    pub fn default_groups(channels: usize) -> usize {
        (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "group norm `{}` expects {} channels, got {c}",
                self.name, self.channels
            )));
        }
        record(&self.name, LayerKind::Norm, (2 * x.elem_count()) as u64);
        let g = x.reshape((bsz, self.groups, c / self.groups * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centred = g.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred
            .broadcast_div(&(var + NORM_EPS)?.sqrt()?)?
            .reshape((bsz, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Batch normalisation with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    channels: usize,
    name: String,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        let gamma = b.get("gamma", channels, Init::Const(1.0))?;
        let beta = b.get("beta", channels, Init::Zeros)?;
        b.get_kind("running_mean", channels, Init::Zeros, ParamKind::Buffer)?;
        b.get_kind("running_var", channels, Init::Const(1.0), ParamKind::Buffer)?;
        Ok(Self {
            gamma,
            beta,
            running_mean: b.var("running_mean")?,
            running_var: b.var("running_var")?,
            momentum: 0.1,
            channels,
            name: b.prefix().to_string(),
        })
    }

    /// Training mode normalises with batch statistics and updates the running
    /// estimates; evaluation mode uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "batch norm `{}` expects {} channels, got {c}",
                self.name, self.channels
            )));
        }
        record(&self.name, LayerKind::Norm, (2 * x.elem_count()) as u64);
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, bsz * h * w))?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
            let n = (bsz * h * w) as f64;
            let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}
