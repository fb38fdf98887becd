//! Two-branch x0-predicting denoiser: a spectral branch over the noisy
//! residual and LMS, a spatial branch over PAN with Fourier high-pass
//! injection, channel-attention fusion per scale and adaptive rectangular
//! convolutions inside the residual blocks.

mod apfm;
mod arconv;
mod blocks;
mod fmim;

pub use apfm::Apfm;
pub use arconv::{sample_columns, ArConv, BANK_SIZES, GRID};
pub use blocks::{sinusoidal_embedding, ResBlock, TimeEmbed};
pub use fmim::{fmim_highpass, lowfreq_mask, lowfreq_side};

use candle_core::Tensor;

use crate::nn::{Builder, Conv2d, GroupNorm};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub bands: usize,
    pub base_channels: usize,
    pub num_scales: usize,
    pub blocks_per_scale: usize,
    pub arconv_enabled: bool,
    pub arconv_kmax: usize,
    /// Sample grid of the adaptive convolution; only 3×3 is implemented.
    pub arconv_samples: (usize, usize),
    pub fmim_rho: f64,
    pub time_embed_dim: usize,
    pub heads: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::toy(8)
    }
}

impl DenoiserConfig {
    pub fn toy(bands: usize) -> Self {
        Self {
            bands,
            base_channels: 16,
            num_scales: 3,
            blocks_per_scale: 2,
            arconv_enabled: true,
            arconv_kmax: 7,
            arconv_samples: (GRID, GRID),
            fmim_rho: 0.25,
            time_embed_dim: 64,
            heads: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels < 4 {
            return bad(format!("base_channels {} < 4", self.base_channels));
        }
        if !(self.fmim_rho > 0.0 && self.fmim_rho < 1.0) {
            return bad(format!("fmim_rho {} outside (0, 1)", self.fmim_rho));
        }
        if self.num_scales == 0 || self.blocks_per_scale == 0 {
            return bad("num_scales and blocks_per_scale must be >= 1".into());
        }
        if !matches!(self.arconv_kmax, 3 | 5 | 7) {
            return bad(format!("arconv_kmax {} not in {{3, 5, 7}}", self.arconv_kmax));
        }
        if self.arconv_samples != (GRID, GRID) {
            return bad(format!("arconv_samples {:?} unsupported, use 3x3", self.arconv_samples));
        }
        if self.time_embed_dim < 2 || self.base_channels % 2 != 0 {
            return bad("time_embed_dim >= 2 and an even base_channels are required".into());
        }
        if self.heads == 0 || self.base_channels % self.heads != 0 {
            return bad(format!("{} heads do not divide {} channels", self.heads, self.base_channels));
        }
        if self.bands == 0 {
            return bad("bands must be >= 1".into());
        }
        Ok(())
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Smallest spatial factor inputs must be divisible by.
    pub fn size_multiple(&self) -> usize {
        1 << (self.num_scales - 1)
    }
}

/// Conditions of one batch: PAN `[B, 1, H, W]` and LMS `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub pan: Tensor,
    pub lms: Tensor,
}

impl ConditionBundle {
    pub fn new(pan: Tensor, lms: Tensor) -> Result<Self> {
        let c = Self { pan, lms };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let (b, _, h, w) = self.lms.dims4()?;
        let (pb, pc, ph, pw) = self.pan.dims4()?;
        if (pb, pc, ph, pw) != (b, 1, h, w) {
            return Err(Error::Dimension(format!(
                "pan {:?} not aligned with lms {:?}",
                self.pan.dims(),
                self.lms.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Scale {
    fmim_proj: Conv2d,
    spatial: Vec<ResBlock>,
    spectral: Vec<ResBlock>,
    fuse: Apfm,
    spatial_down: Option<Conv2d>,
    spectral_down: Option<Conv2d>,
}

#[derive(Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    time: TimeEmbed,
    spectral_in: Conv2d,
    spatial_in: Conv2d,
    scales: Vec<Scale>,
    ups: Vec<Conv2d>,
    decoder: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Denoiser {
    pub fn new(b: &mut Builder, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let te = cfg.time_embed_dim;
        let ar = cfg.arconv_enabled.then_some(cfg.arconv_kmax);
        let time = TimeEmbed::new(&mut b.pp("time"), cfg.base_channels, te)?;
        let c0 = cfg.channels(0);
        let spectral_in = Conv2d::new(&mut b.pp("spectral_in"), 2 * cfg.bands, c0, 3, 1, false)?;
        let spatial_in = Conv2d::new(&mut b.pp("spatial_in"), 1, c0, 3, 1, false)?;
        let mut scales = Vec::new();
        for s in 0..cfg.num_scales {
            let ch = cfg.channels(s);
            let mut sb = b.pp(&format!("enc{s}"));
            let mut spatial = Vec::new();
            let mut spectral = Vec::new();
            for i in 0..cfg.blocks_per_scale {
                spatial.push(ResBlock::new(&mut sb.pp(&format!("spatial{i}")), ch, ch, None, ar)?);
                spectral.push(ResBlock::new(&mut sb.pp(&format!("spectral{i}")), ch, ch, Some(te), ar)?);
            }
            let last = s + 1 == cfg.num_scales;
            let down = |sb: &mut Builder, name: &str| -> Result<Option<Conv2d>> {
                if last {
                    Ok(None)
                } else {
                    Ok(Some(Conv2d::new(&mut sb.pp(name), ch, cfg.channels(s + 1), 3, 2, false)?))
                }
            };
            scales.push(Scale {
                fmim_proj: Conv2d::new(&mut sb.pp("fmim_proj"), 1, ch, 1, 1, false)?,
                spatial,
                spectral,
                fuse: Apfm::new(&mut sb.pp("fuse"), ch, cfg.heads, te)?,
                spatial_down: down(&mut sb, "spatial_down")?,
                spectral_down: down(&mut sb, "spectral_down")?,
            });
        }
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for s in 0..cfg.num_scales {
            let ch = cfg.channels(s);
            let mut db = b.pp(&format!("dec{s}"));
            let deepest = s + 1 == cfg.num_scales;
            if !deepest {
                ups.push(Conv2d::new(&mut db.pp("up"), cfg.channels(s + 1), ch, 3, 1, false)?);
            }
            let cin = if deepest { ch } else { 2 * ch };
            decoder.push(ResBlock::new(&mut db.pp("block"), cin, ch, Some(te), ar)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            time,
            spectral_in,
            spatial_in,
            scales,
            ups,
            decoder,
            out_norm: GroupNorm::new(&mut b.pp("out_norm"), c0, GroupNorm::default_groups(c0))?,
            out_conv: Conv2d::new(&mut b.pp("out_conv"), c0, cfg.bands, 3, 1, true)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Time embedding for a batch of timesteps, `[len(t), time_embed_dim]`.
    pub fn embed_time(&self, t: &[usize], like: &Tensor) -> Result<Tensor> {
        self.time.forward(t, like.dtype(), like.device())
    }

    /// Predicted residual `x0` for noisy residual `x_t` at timesteps `t`.
    pub fn denoise(&self, x_t: &Tensor, cond: &ConditionBundle, t: &[usize]) -> Result<Tensor> {
        cond.validate()?;
        if x_t.dims() != cond.lms.dims() {
            return Err(Error::Dimension(format!(
                "x_t {:?} does not match lms {:?}",
                x_t.dims(),
                cond.lms.dims()
            )));
        }
        let (b, c, h, w) = x_t.dims4()?;
        if c != self.cfg.bands {
            return Err(Error::Dimension(format!("expected {} bands, got {c}", self.cfg.bands)));
        }
        if t.len() != b {
            return Err(Error::Dimension(format!("{} timesteps for batch of {b}", t.len())));
        }
        let m = self.cfg.size_multiple();
        if h % m != 0 || w % m != 0 || h / m < 4 || w / m < 4 {
            return Err(Error::Dimension(format!(
                "spatial size {h}x{w} must be a multiple of {m} with at least 4 pixels at the coarsest scale"
            )));
        }
        let te = self.embed_time(t, x_t)?;
        let mut spec = self
            .spectral_in
            .forward(&Tensor::cat(&[x_t, &cond.lms], 1)?)?;
        let mut spat = self.spatial_in.forward(&cond.pan)?;
        let mut skips = Vec::new();
        for (s, sc) in self.scales.iter().enumerate() {
            let pan_s = if s == 0 {
                cond.pan.clone()
            } else {
                cond.pan.avg_pool2d(1 << s)?
            };
            let hf = fmim_highpass(&pan_s, self.cfg.fmim_rho)?;
            spat = (spat + sc.fmim_proj.forward(&hf)?)?;
            for blk in &sc.spatial {
                spat = blk.forward(&spat, None)?;
            }
            for blk in &sc.spectral {
                spec = blk.forward(&spec, Some(&te))?;
            }
            spec = sc.fuse.forward(&spat, &spec, &te)?;
            skips.push(spec.clone());
            if let (Some(ds), Some(dp)) = (&sc.spatial_down, &sc.spectral_down) {
                spat = ds.forward(&spat)?;
                spec = dp.forward(&spec)?;
            }
        }
        let last = self.cfg.num_scales - 1;
        let mut hcur = self.decoder[last].forward(&spec, Some(&te))?;
        for s in (0..last).rev() {
            let (_, _, hs, ws) = skips[s].dims4()?;
            let up = self.ups[s].forward(&hcur.upsample_nearest2d(hs, ws)?)?;
            hcur = self.decoder[s].forward(&Tensor::cat(&[&up, &skips[s]], 1)?, Some(&te))?;
        }
        self.out_conv
            .forward(&self.out_norm.forward(&hcur)?.silu()?)
    }

    pub fn forward(&self, x_t: &Tensor, lms: &Tensor, pan: &Tensor, t: &[usize]) -> Result<Tensor> {
        let cond = ConditionBundle {
            pan: pan.clone(),
            lms: lms.clone(),
        };
        self.denoise(x_t, &cond, t)
    }

    /// Adaptive convolutions in a fixed traversal order.
    pub fn arconv_layers(&self) -> Vec<&ArConv> {
        let mut out = Vec::new();
        for sc in &self.scales {
            for blk in sc.spatial.iter().chain(&sc.spectral) {
                out.extend(blk.arconvs());
            }
        }
        for blk in &self.decoder {
            out.extend(blk.arconvs());
        }
        out
    }

    pub fn arconv_layers_mut(&mut self) -> Vec<&mut ArConv> {
        let mut out = Vec::new();
        for sc in &mut self.scales {
            for blk in sc.spatial.iter_mut().chain(sc.spectral.iter_mut()) {
                out.extend(blk.arconvs_mut());
            }
        }
        for blk in &mut self.decoder {
            out.extend(blk.arconvs_mut());
        }
        out
    }

    /// Frozen size of every adaptive layer.
    pub fn routing_state(&self) -> Vec<Option<(usize, usize)>> {
        self.arconv_layers().iter().map(|a| a.frozen_size()).collect()
    }

    pub fn set_routing_state(&mut self, state: &[Option<(usize, usize)>]) -> Result<()> {
        let mut layers = self.arconv_layers_mut();
        if layers.len() != state.len() {
            return Err(Error::Dimension(format!(
                "routing state has {} entries, model has {} adaptive layers",
                state.len(),
                layers.len()
            )));
        }
        for (l, s) in layers.iter_mut().zip(state) {
            l.set_frozen(*s)?;
        }
        Ok(())
    }

    /// Bank-usage counters of every adaptive layer since the last reset.
    pub fn routing_usage(&self) -> Vec<Vec<u64>> {
        self.arconv_layers().iter().map(|a| a.usage()).collect()
    }

    pub fn set_routing_usage(&self, usage: &[Vec<u64>]) -> Result<()> {
        let layers = self.arconv_layers();
        if layers.len() != usage.len() {
            return Err(Error::Dimension(format!(
                "usage for {} layers, model has {}",
                usage.len(),
                layers.len()
            )));
        }
        for (l, u) in layers.iter().zip(usage) {
            l.set_usage(u)?;
        }
        Ok(())
    }

    pub fn reset_routing_usage(&self) {
        self.arconv_layers().iter().for_each(|a| a.reset_usage());
    }

    pub fn routing_frozen(&self) -> bool {
        let layers = self.arconv_layers();
        !layers.is_empty() && layers.iter().all(|a| a.frozen_size().is_some())
    }
}

/// Fixes every adaptive layer's size selection once `epoch >= t_freeze`.
/// Returns whether routing was frozen by this call.
pub fn freeze_arconv_routing(model: &mut Denoiser, epoch: usize, t_freeze: usize) -> bool {
    if epoch < t_freeze || model.routing_frozen() {
        return false;
    }
    let mut changed = false;
    for l in model.arconv_layers_mut() {
        if l.frozen_size().is_none() {
            l.freeze();
            changed = true;
        }
    }
    changed
}
