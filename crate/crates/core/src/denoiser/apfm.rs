use candle_core::{Tensor, D};

use crate::nn::{record, softmax_last, Builder, Conv2d, Init, LayerKind, Linear};
use crate::{Error, Result};

/// Channel cross-attention fusion: queries from the spectral branch, keys and
/// values from the spatial branch, time-conditioned scale and shift, and a
/// zero-initialised output projection added back onto the spectral feature.
#[derive(Debug, Clone)]
pub struct Apfm {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    temperature: Tensor,
    modulation: Linear,
    out: Conv2d,
    heads: usize,
    channels: usize,
    name: String,
}

impl Apfm {
    pub fn new(b: &mut Builder, channels: usize, heads: usize, t_dim: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            q: Conv2d::new(&mut b.pp("q"), channels, channels, 1, 1, false)?,
            k: Conv2d::new(&mut b.pp("k"), channels, channels, 1, 1, false)?,
            v: Conv2d::new(&mut b.pp("v"), channels, channels, 1, 1, false)?,
            temperature: b.get("temperature", heads, Init::Const(1.0))?,
            modulation: Linear::new(&mut b.pp("modulation"), t_dim, 2 * channels, false)?,
            out: Conv2d::new(&mut b.pp("out"), channels, channels, 1, 1, true)?,
            heads,
            channels,
            name: b.prefix().to_string(),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn check(&self, spatial: &Tensor, spectral: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = spectral.dims4()?;
        if spatial.dims() != spectral.dims() || c != self.channels {
            return Err(Error::Dimension(format!(
                "fusion `{}` got spatial {:?} and spectral {:?}, expected {} channels each",
                self.name,
                spatial.dims(),
                spectral.dims(),
                self.channels
            )));
        }
        Ok((b, h, w))
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let x = x.reshape((b, self.heads, c / self.heads, h * w))?;
        let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        Ok(x.broadcast_div(&norm)?)
    }

    /// Softmax attention over channels, `[B, heads, C/heads, C/heads]`.
    pub fn attention_weights(&self, spatial: &Tensor, spectral: &Tensor) -> Result<Tensor> {
        self.check(spatial, spectral)?;
        let q = self.split_heads(&self.q.forward(spectral)?)?;
        let k = self.split_heads(&self.k.forward(spatial)?)?;
        let logits = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
        let temp = self.temperature.reshape((1, self.heads, 1, 1))?;
        softmax_last(&logits.broadcast_mul(&temp)?)
    }

    pub fn forward(&self, spatial: &Tensor, spectral: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let (b, h, w) = self.check(spatial, spectral)?;
        let c = self.channels;
        let attn = self.attention_weights(spatial, spectral)?;
        let v = self
            .v
            .forward(spatial)?
            .reshape((b, self.heads, c / self.heads, h * w))?;
        record(
            &self.name,
            LayerKind::Attention,
            (2 * b * self.heads * (c / self.heads) * (c / self.heads) * h * w) as u64,
        );
        let fused = attn.matmul(&v)?.reshape((b, c, h, w))?;
        let m = self.modulation.forward(&t_emb.silu()?)?;
        let scale = m.narrow(1, 0, c)?.reshape((b, c, 1, 1))?;
        let shift = m.narrow(1, c, c)?.reshape((b, c, 1, 1))?;
        let modulated = fused
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?;
        Ok((spectral + self.out.forward(&modulated)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(store: &mut ParamStore) -> Apfm {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Apfm::new(&mut Builder::new(store, &mut rng).pp("f"), 4, 2, 6).unwrap()
    }

    #[test]
    fn identity_at_init_and_softmax_rows() {
        let mut store = ParamStore::new(DType::F64);
        let f = build(&mut store);
        let sp = Tensor::randn(0f64, 1.0, (2, 4, 5, 5), &Device::Cpu).unwrap();
        let zero = sp.zeros_like().unwrap();
        let te = Tensor::randn(0f64, 1.0, (2, 6), &Device::Cpu).unwrap();
        let y = f.forward(&zero, &sp, &te).unwrap();
        let d = (y - &sp).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
        let a = f.attention_weights(&Tensor::randn(0f64, 1.0, (2, 4, 5, 5), &Device::Cpu).unwrap(), &sp).unwrap();
        assert_eq!(a.dims(), &[2, 2, 2, 2]);
        let s = a.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn batch_equivariant_and_rejects_mismatch() {
        let mut store = ParamStore::new(DType::F64);
        let f = build(&mut store);
        let out = store.var("f.out.weight").unwrap();
        out.set(&Tensor::randn(0f64, 0.5, out.shape(), &Device::Cpu).unwrap()).unwrap();
        let a = Tensor::randn(0f64, 1.0, (2, 4, 5, 5), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f64, 1.0, (2, 4, 5, 5), &Device::Cpu).unwrap();
        let te = Tensor::randn(0f64, 1.0, (2, 6), &Device::Cpu).unwrap();
        let y = f.forward(&a, &b, &te).unwrap();
        let perm = Tensor::new(&[1u32, 0], &Device::Cpu).unwrap();
        let yp = f
            .forward(
                &a.index_select(&perm, 0).unwrap(),
                &b.index_select(&perm, 0).unwrap(),
                &te.index_select(&perm, 0).unwrap(),
            )
            .unwrap();
        let d = (yp - y.index_select(&perm, 0).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        let bad = Tensor::zeros((2, 4, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(f.forward(&bad, &b, &te), Err(Error::Dimension(_))));
    }
}
