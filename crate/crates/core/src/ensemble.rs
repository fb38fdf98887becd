//! Lightweight connector that fuses the one-step diffusion output with the
//! end-to-end output.

use candle_core::Tensor;

use crate::nn::{BatchNorm2d, Builder, Conv2d};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectorConfig {
    pub bands: usize,
    pub num_blocks: usize,
    pub hidden_channels: usize,
}

impl ConnectorConfig {
    pub fn new(bands: usize) -> Self {
        Self {
            bands,
            num_blocks: 3,
            hidden_channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.hidden_channels == 0 || self.bands == 0 {
            return Err(Error::Config(
                "connector bands, num_blocks and hidden_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form count of trainable connector parameters (running
    /// statistics excluded).
    pub fn param_count(&self) -> usize {
        let (c, h) = (self.bands, self.hidden_channels);
        let block = |cin: usize| cin * h * 9 + h + 2 * h;
        block(2 * c) + (self.num_blocks - 1) * block(h) + h * c + c
    }
}

#[derive(Debug, Clone)]
pub struct Connector {
    cfg: ConnectorConfig,
    blocks: Vec<(Conv2d, BatchNorm2d)>,
    out: Conv2d,
}

impl Connector {
    pub fn new(b: &mut Builder, cfg: &ConnectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut cin = 2 * cfg.bands;
        for i in 0..cfg.num_blocks {
            let mut bb = b.pp(&format!("block{i}"));
            let conv = Conv2d::new(&mut bb.pp("conv"), cin, cfg.hidden_channels, 3, 1, false)?;
            let bn = BatchNorm2d::new(&mut bb.pp("bn"), cfg.hidden_channels)?;
            blocks.push((conv, bn));
            cin = cfg.hidden_channels;
        }
        Ok(Self {
            out: Conv2d::new(&mut b.pp("out"), cfg.hidden_channels, cfg.bands, 1, 1, true)?,
            blocks,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ConnectorConfig {
        &self.cfg
    }

    /// Output before clipping. `train` selects batch statistics and updates
    /// the running estimates.
    pub fn forward_unclipped(&self, y_osd: &Tensor, y_e2e: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = y_osd.dims4()?;
        if y_osd.dims() != y_e2e.dims() || c != self.cfg.bands {
            return Err(Error::Dimension(format!(
                "connector inputs {:?} and {:?} must match with {} bands",
                y_osd.dims(),
                y_e2e.dims(),
                self.cfg.bands
            )));
        }
        let mut x = Tensor::cat(&[y_osd, y_e2e], 1)?;
        for (conv, bn) in &self.blocks {
            x = bn.forward(&conv.forward(&x)?, train)?.relu()?;
        }
        let avg = ((y_osd + y_e2e)? * 0.5)?;
        Ok((self.out.forward(&x)? + avg)?)
    }

    pub fn forward(&self, y_osd: &Tensor, y_e2e: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_unclipped(y_osd, y_e2e, train)?.clamp(0.0, 1.0)?)
    }
}
