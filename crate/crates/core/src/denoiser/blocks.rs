use candle_core::{DType, Device, Tensor};

use super::arconv::ArConv;
use crate::nn::{Builder, Conv2d, GroupNorm, Linear};
use crate::{Error, Result};

/// Sinusoidal features of integer timesteps, `[len(t), dim]`: sines in the
/// first half, cosines in the second.
pub fn sinusoidal_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} must be even and >= 2")));
    }
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        v.extend(args.iter().map(|a| a.sin()));
        v.extend(args.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal features followed by a two-layer projection.
#[derive(Debug, Clone)]
pub struct TimeEmbed {
    freq_dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbed {
    pub fn new(b: &mut Builder, freq_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            freq_dim,
            l1: Linear::new(&mut b.pp("l1"), freq_dim, out_dim, false)?,
            l2: Linear::new(&mut b.pp("l2"), out_dim, out_dim, false)?,
        })
    }

    pub fn forward(&self, t: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let s = sinusoidal_embedding(t, self.freq_dim, dtype, device)?;
        self.l2.forward(&self.l1.forward(&s)?.silu()?)
    }
}

#[derive(Debug)]
pub(crate) enum BlockConv {
    Plain(Conv2d),
    Adaptive(ArConv),
}

impl BlockConv {
    fn new(b: &mut Builder, cin: usize, cout: usize, arconv: Option<usize>) -> Result<Self> {
        Ok(match arconv {
            Some(kmax) => BlockConv::Adaptive(ArConv::new(b, cin, cout, kmax)?),
            None => BlockConv::Plain(Conv2d::new(b, cin, cout, 3, 1, false)?),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            BlockConv::Plain(c) => c.forward(x),
            BlockConv::Adaptive(a) => a.forward(x),
        }
    }
}

/// GroupNorm → SiLU → conv → (+ time) → GroupNorm → SiLU → conv, plus skip.
#[derive(Debug)]
pub struct ResBlock {
    n1: GroupNorm,
    c1: BlockConv,
    time: Option<Linear>,
    n2: GroupNorm,
    c2: BlockConv,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        b: &mut Builder,
        cin: usize,
        cout: usize,
        t_dim: Option<usize>,
        arconv: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            n1: GroupNorm::new(&mut b.pp("n1"), cin, GroupNorm::default_groups(cin))?,
            c1: BlockConv::new(&mut b.pp("c1"), cin, cout, arconv)?,
            time: match t_dim {
                Some(d) => Some(Linear::new(&mut b.pp("time"), d, cout, false)?),
                None => None,
            },
            n2: GroupNorm::new(&mut b.pp("n2"), cout, GroupNorm::default_groups(cout))?,
            c2: BlockConv::new(&mut b.pp("c2"), cout, cout, arconv)?,
            skip: if cin != cout {
                Some(Conv2d::new(&mut b.pp("skip"), cin, cout, 1, 1, false)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, t_emb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.c1.forward(&self.n1.forward(x)?.silu()?)?;
        if let (Some(lin), Some(te)) = (&self.time, t_emb) {
            let (b, c, _, _) = h.dims4()?;
            h = h.broadcast_add(&lin.forward(&te.silu()?)?.reshape((b, c, 1, 1))?)?;
        }
        let h = self.c2.forward(&self.n2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }

    pub(crate) fn arconvs(&self) -> Vec<&ArConv> {
        [&self.c1, &self.c2]
            .into_iter()
            .filter_map(|c| match c {
                BlockConv::Adaptive(a) => Some(a),
                BlockConv::Plain(_) => None,
            })
            .collect()
    }

    pub(crate) fn arconvs_mut(&mut self) -> Vec<&mut ArConv> {
        [&mut self.c1, &mut self.c2]
            .into_iter()
            .filter_map(|c| match c {
                BlockConv::Adaptive(a) => Some(a),
                BlockConv::Plain(_) => None,
            })
            .collect()
    }
}
