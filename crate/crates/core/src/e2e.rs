//! End-to-end fusion network built from ODE-solver-style residual blocks.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;

use crate::nn::{Builder, Conv2d, GroupNorm, Init};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeScheme {
    Euler,
    Rk2,
}

impl FromStr for OdeScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Self::Euler),
            "rk2" | "heun" => Ok(Self::Rk2),
            _ => Err(Error::Config(format!("unknown ODE scheme `{s}`"))),
        }
    }
}

impl fmt::Display for OdeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Rk2 => "rk2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtpConfig {
    pub bands: usize,
    pub num_blocks: usize,
    pub scheme: OdeScheme,
    /// Initial value of every block's learnable step size.
    pub step_size: f64,
    pub channels: usize,
}

impl OtpConfig {
    pub fn new(bands: usize) -> Self {
        Self {
            bands,
            num_blocks: 4,
            scheme: OdeScheme::Rk2,
            step_size: 1.0,
            channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("e2e num_blocks must be >= 1".into()));
        }
        if self.bands == 0 || self.channels == 0 {
            return Err(Error::Config("e2e bands and channels must be positive".into()));
        }
        if !self.step_size.is_finite() {
            return Err(Error::Config("e2e step_size must be finite".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`E2ENet`].
    pub fn param_count(&self) -> usize {
        let (c, b) = (self.channels, self.bands);
        let embed = (b + 1) * c * 9 + c;
        let block = 2 * (c * c * 9 + c) + 2 * c + 1;
        let proj = c * b * 9 + b;
        embed + self.num_blocks * block + proj
    }
}

/// One solver step of `dy/ds = f(y)` with step `h` (a scalar tensor or a
/// plain number via [`Tensor::new`]).
pub fn otp_block<F>(y: &Tensor, f: F, h: &Tensor, scheme: OdeScheme) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let k1 = f(y)?;
    match scheme {
        OdeScheme::Euler => Ok((y + k1.broadcast_mul(h)?)?),
        OdeScheme::Rk2 => {
            let y1 = (y + k1.broadcast_mul(h)?)?;
            let k2 = f(&y1)?;
            Ok((y + (k1 + k2)?.broadcast_mul(&(h * 0.5)?)?)?)
        }
    }
}

/// conv → group norm → SiLU → conv.
#[derive(Debug, Clone)]
pub struct VectorField {
    c1: Conv2d,
    norm: GroupNorm,
    c2: Conv2d,
}

impl VectorField {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv2d::new(&mut b.pp("c1"), channels, channels, 3, 1, false)?,
            norm: GroupNorm::new(&mut b.pp("norm"), channels, GroupNorm::default_groups(channels))?,
            c2: Conv2d::new(&mut b.pp("c2"), channels, channels, 3, 1, false)?,
        })
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        self.c2.forward(&self.norm.forward(&self.c1.forward(y)?)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct E2ENet {
    cfg: OtpConfig,
    embed: Conv2d,
    fields: Vec<VectorField>,
    steps: Vec<Tensor>,
    proj: Conv2d,
}

impl E2ENet {
    pub fn new(b: &mut Builder, cfg: &OtpConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut fields = Vec::new();
        let mut steps = Vec::new();
        for i in 0..cfg.num_blocks {
            let mut bb = b.pp(&format!("block{i}"));
            fields.push(VectorField::new(&mut bb, c)?);
            steps.push(bb.get("h", 1, Init::Const(cfg.step_size))?);
        }
        Ok(Self {
            embed: Conv2d::new(&mut b.pp("embed"), cfg.bands + 1, c, 3, 1, false)?,
            fields,
            steps,
            proj: Conv2d::new(&mut b.pp("proj"), c, cfg.bands, 3, 1, true)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &OtpConfig {
        &self.cfg
    }

    /// Residual before adding `lms` and clipping.
    pub fn residual(&self, lms: &Tensor, pan: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = lms.dims4()?;
        if c != self.cfg.bands || pan.dims() != [b, 1, h, w] {
            return Err(Error::Dimension(format!(
                "e2e expects lms [B,{},H,W] and pan [B,1,H,W], got {:?} and {:?}",
                self.cfg.bands,
                lms.dims(),
                pan.dims()
            )));
        }
        let mut y = self.embed.forward(&Tensor::cat(&[lms, pan], 1)?)?;
        for (f, h) in self.fields.iter().zip(&self.steps) {
            y = otp_block(&y, |z| f.forward(z), h, self.cfg.scheme)?;
        }
        self.proj.forward(&y)
    }

    pub fn forward(&self, lms: &Tensor, pan: &Tensor) -> Result<Tensor> {
        Ok((lms + self.residual(lms, pan)?)?.clamp(0.0, 1.0)?)
    }
}
