use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};

use crate::nn::{record, sigmoid, Builder, Conv2d, Init, LayerKind};
use crate::{Error, Result};

/// Odd kernel extents available per axis.
pub const BANK_SIZES: [usize; 4] = [1, 3, 5, 7];
/// Sample grid per axis; offsets are `a (extent - 1) / 2` for `a` in {-1, 0, 1}.
pub const GRID: usize = 3;
const TAPS: usize = GRID * GRID;

struct Corners {
    idx: [Option<usize>; 4],
    wt: [f64; 4],
    fy: f64,
    fx: f64,
}

/// Bilinear corners of `(py, px)` in an `h × w` plane; outside pixels are zero.
fn corners(py: f64, px: f64, h: usize, w: usize) -> Corners {
    let (y0, x0) = (py.floor(), px.floor());
    let (fy, fx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |y: isize, x: isize| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            Some(y as usize * w + x as usize)
        } else {
            None
        }
    };
    Corners {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        wt: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
        fy,
        fx,
    }
}

fn offset(a: usize, extent: f64) -> f64 {
    (a as f64 - 1.0) * (extent - 1.0) / 2.0
}

struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn sample_fwd(x: &[f64], ext: &[f64], d: &Dims) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.b * d.c * TAPS * hw];
    for bi in 0..d.b {
        for y in 0..d.h {
            for xx in 0..d.w {
                let p = y * d.w + xx;
                let eh = ext[(bi * 2) * hw + p];
                let ew = ext[(bi * 2 + 1) * hw + p];
                for i in 0..GRID {
                    let py = y as f64 + offset(i, eh);
                    for j in 0..GRID {
                        let px = xx as f64 + offset(j, ew);
                        let cn = corners(py, px, d.h, d.w);
                        let tap = i * GRID + j;
                        for ch in 0..d.c {
                            let plane = &x[(bi * d.c + ch) * hw..(bi * d.c + ch + 1) * hw];
                            let mut v = 0.0;
                            for k in 0..4 {
                                if let Some(q) = cn.idx[k] {
                                    v += cn.wt[k] * plane[q];
                                }
                            }
                            out[((bi * d.c + ch) * TAPS + tap) * hw + p] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn sample_bwd(x: &[f64], ext: &[f64], g: &[f64], d: &Dims) -> (Vec<f64>, Vec<f64>) {
    let hw = d.h * d.w;
    let mut gx = vec![0.0; x.len()];
    let mut ge = vec![0.0; ext.len()];
    for bi in 0..d.b {
        for y in 0..d.h {
            for xx in 0..d.w {
                let p = y * d.w + xx;
                let eh = ext[(bi * 2) * hw + p];
                let ew = ext[(bi * 2 + 1) * hw + p];
                let (mut geh, mut gew) = (0.0, 0.0);
                for i in 0..GRID {
                    let py = y as f64 + offset(i, eh);
                    for j in 0..GRID {
                        let px = xx as f64 + offset(j, ew);
                        let cn = corners(py, px, d.h, d.w);
                        let tap = i * GRID + j;
                        let (dy, dx) = ((i as f64 - 1.0) / 2.0, (j as f64 - 1.0) / 2.0);
                        for ch in 0..d.c {
                            let base = (bi * d.c + ch) * hw;
                            let go = g[((bi * d.c + ch) * TAPS + tap) * hw + p];
                            if go == 0.0 {
                                continue;
                            }
                            let mut v = [0.0; 4];
                            for k in 0..4 {
                                if let Some(q) = cn.idx[k] {
                                    gx[base + q] += go * cn.wt[k];
                                    v[k] = x[base + q];
                                }
                            }
                            let dvy = (1.0 - cn.fx) * (v[2] - v[0]) + cn.fx * (v[3] - v[1]);
                            let dvx = (1.0 - cn.fy) * (v[1] - v[0]) + cn.fy * (v[3] - v[2]);
                            geh += go * dvy * dy;
                            gew += go * dvx * dx;
                        }
                    }
                }
                ge[(bi * 2) * hw + p] += geh;
                ge[(bi * 2 + 1) * hw + p] += gew;
            }
        }
    }
    (gx, ge)
}

fn to_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("arconv sampling needs contiguous input".into()))?;
    match s {
        CpuStorage::F64(v) => Ok(v[a..b].to_vec()),
        CpuStorage::F32(v) => Ok(v[a..b].iter().map(|x| *x as f64).collect()),
        _ => Err(candle_core::Error::Msg("arconv sampling supports f32 and f64".into())),
    }
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

struct SampleOp;

impl CustomOp2 for SampleOp {
    fn name(&self) -> &'static str {
        "arconv-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let x = to_f64(s1, l1)?;
        let e = to_f64(s2, l2)?;
        let out = sample_fwd(&x, &e, &Dims { b, c, h, w });
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(out.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, Shape::from((b, c * TAPS, h, w))))
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = arg1.dims4()?;
        let x = tensor_f64(arg1)?;
        let e = tensor_f64(arg2)?;
        let g = tensor_f64(grad_res)?;
        let (gx, ge) = sample_bwd(&x, &e, &g, &Dims { b, c, h, w });
        let gx = Tensor::from_vec(gx, arg1.shape(), arg1.device())?.to_dtype(arg1.dtype())?;
        let ge = Tensor::from_vec(ge, arg2.shape(), arg2.device())?.to_dtype(arg2.dtype())?;
        Ok((Some(gx), Some(ge)))
    }
}

/// Bilinear samples of `x` on the per-pixel scaled 3×3 grid.
/// `x` is `[B, C, H, W]`, `extents` is `[B, 2, H, W]` (height, width) and the
/// result is `[B, C·9, H, W]` with channel-major tap order.
pub fn sample_columns(x: &Tensor, extents: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    if extents.dims() != [b, 2, h, w] {
        return Err(Error::Dimension(format!(
            "extents {:?} do not match input {:?}",
            extents.dims(),
            x.dims()
        )));
    }
    Ok(x.contiguous()?
        .apply_op2(&extents.to_dtype(x.dtype())?.contiguous()?, SampleOp)?)
}

/// Adaptive rectangular convolution: a light conv head predicts a continuous
/// extent per pixel, the sample grid is stretched to it, and the weights come
/// from the bank entry of the nearest odd size.
#[derive(Debug)]
pub struct ArConv {
    bank: Vec<Conv2d>,
    sizes: Vec<usize>,
    head_in: Conv2d,
    head_out: Conv2d,
    kmax: usize,
    in_ch: usize,
    out_ch: usize,
    frozen: Option<(usize, usize)>,
    usage: RefCell<Vec<u64>>,
    name: String,
}

impl ArConv {
    pub fn new(b: &mut Builder, in_ch: usize, out_ch: usize, kmax: usize) -> Result<Self> {
        if !BANK_SIZES.contains(&kmax) || kmax < 3 {
            return Err(Error::InvalidArgument(format!(
                "arconv kmax must be 3, 5 or 7, got {kmax}"
            )));
        }
        let sizes: Vec<usize> = BANK_SIZES.iter().copied().filter(|s| *s <= kmax).collect();
        let mut bank = Vec::new();
        for &kh in &sizes {
            for &kw in &sizes {
                bank.push(Conv2d::new(&mut b.pp(&format!("bank{kh}x{kw}")), in_ch, out_ch, GRID, 1, false)?);
            }
        }
        let hid = (in_ch / 2).max(4);
        let head_in = Conv2d::new(&mut b.pp("head_in").with_lora(None), in_ch, hid, 3, 1, false)?;
        // Bias chosen so that the initial extent is about 3 on both axes.
        let s0 = (2.0 / (kmax as f64 - 1.0)).min(0.9);
        b.pp("head_out").get("bias", 2, Init::Const((s0 / (1.0 - s0)).ln()))?;
        let head_out = Conv2d::new(&mut b.pp("head_out").with_lora(None), hid, 2, 3, 1, false)?;
        let n = sizes.len() * sizes.len();
        Ok(Self {
            bank,
            sizes,
            head_in,
            head_out,
            kmax,
            in_ch,
            out_ch,
            frozen: None,
            usage: RefCell::new(vec![0; n]),
            name: b.prefix().to_string(),
        })
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Bank entry holding the weights for extent `(kh, kw)`.
    pub fn bank_entry(&self, kh: usize, kw: usize) -> Result<&Conv2d> {
        let ih = self.size_index(kh)?;
        let iw = self.size_index(kw)?;
        Ok(&self.bank[ih * self.sizes.len() + iw])
    }

    fn size_index(&self, k: usize) -> Result<usize> {
        self.sizes
            .iter()
            .position(|s| *s == k)
            .ok_or_else(|| Error::InvalidArgument(format!("size {k} not in bank {:?}", self.sizes)))
    }

    fn round_index(&self, v: f64) -> usize {
        (((v - 1.0) / 2.0).round().max(0.0) as usize).min(self.sizes.len() - 1)
    }

    /// Continuous per-pixel extents `[B, 2, H, W]`, each in `[1, kmax]`.
    /// Frozen layers return their cached integer size everywhere.
    pub fn extents(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        if let Some((kh, kw)) = self.frozen {
            let v: Vec<f64> = [kh as f64, kw as f64]
                .iter()
                .flat_map(|s| std::iter::repeat_n(*s, h * w))
                .collect();
            let one = Tensor::from_vec(v, (1, 2, h, w), x.device())?.to_dtype(x.dtype())?;
            return Ok(one.broadcast_as((b, 2, h, w))?.contiguous()?);
        }
        let z = self.head_out.forward(&self.head_in.forward(x)?.silu()?)?;
        Ok(((sigmoid(&z)? * (self.kmax as f64 - 1.0))? + 1.0)?)
    }

    /// Rounded odd size `(kh, kw)` selected at every pixel, batch-major.
    pub fn size_map(&self, x: &Tensor) -> Result<Vec<(usize, usize)>> {
        let ext = self.extents(x)?;
        let idx = self.pixel_entries(&ext)?;
        let n = self.sizes.len();
        Ok(idx.into_iter().map(|e| (self.sizes[e / n], self.sizes[e % n])).collect())
    }

    fn pixel_entries(&self, ext: &Tensor) -> Result<Vec<usize>> {
        let (b, _, h, w) = ext.dims4()?;
        let e = tensor_f64(ext)?;
        let hw = h * w;
        let n = self.sizes.len();
        let mut out = Vec::with_capacity(b * hw);
        for bi in 0..b {
            for p in 0..hw {
                let ih = self.round_index(e[bi * 2 * hw + p]);
                let iw = self.round_index(e[(bi * 2 + 1) * hw + p]);
                out.push(ih * n + iw);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::Dimension(format!(
                "arconv `{}` expects {} channels, got {c}",
                self.name, self.in_ch
            )));
        }
        if h < self.kmax || w < self.kmax {
            return Err(Error::Dimension(format!(
                "arconv `{}` needs spatial size >= {}, got {h}x{w}",
                self.name, self.kmax
            )));
        }
        let ext = self.extents(x)?;
        self.forward_with_extents(x, &ext)
    }

    /// Evaluates the layer with externally supplied extents.
    pub fn forward_with_extents(&self, x: &Tensor, ext: &Tensor) -> Result<Tensor> {
        let (b, cin, h, w) = x.dims4()?;
        let hw = h * w;
        let k = cin * TAPS;
        let entries = self.pixel_entries(ext)?;
        if self.frozen.is_none() {
            let mut u = self.usage.borrow_mut();
            for e in &entries {
                u[*e] += 1;
            }
        }
        record(
            &self.name,
            LayerKind::AdaptiveConv,
            ((k * self.out_ch + 4 * k) * hw * b) as u64,
        );
        let cols = sample_columns(x, ext)?;
        let mut groups: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (p, e) in entries.iter().enumerate() {
            groups.entry(*e).or_default().push(p as u32);
        }
        if groups.len() == 1 {
            let e = *groups.keys().next().expect("non-empty");
            let conv = &self.bank[e];
            let wm = conv.weight()?.reshape((self.out_ch, k))?;
            let y = wm.broadcast_matmul(&cols.reshape((b, k, hw))?)?;
            let y = match conv.bias() {
                Some(bias) => y.broadcast_add(&bias.reshape((1, self.out_ch, 1))?)?,
                None => y,
            };
            return Ok(y.reshape((b, self.out_ch, h, w))?);
        }
        let cols_t = cols.transpose(0, 1)?.contiguous()?.reshape((k, b * hw))?;
        let mut acc = Tensor::zeros((self.out_ch, b * hw), x.dtype(), x.device())?;
        for (e, pix) in groups {
            let n = pix.len();
            let ids = Tensor::from_vec(pix, n, x.device())?;
            let conv = &self.bank[e];
            let sub = cols_t.index_select(&ids, 1)?;
            let mut y = conv.weight()?.reshape((self.out_ch, k))?.matmul(&sub)?;
            if let Some(bias) = conv.bias() {
                y = y.broadcast_add(&bias.reshape((self.out_ch, 1))?)?;
            }
            acc = acc.index_add(&ids, &y, 1)?;
        }
        Ok(acc
            .reshape((self.out_ch, b, h, w))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    pub fn frozen_size(&self) -> Option<(usize, usize)> {
        self.frozen
    }

    /// Fixes the selection at `size` (or unfreezes with `None`).
    pub fn set_frozen(&mut self, size: Option<(usize, usize)>) -> Result<()> {
        if let Some((kh, kw)) = size {
            self.size_index(kh)?;
            self.size_index(kw)?;
        }
        self.frozen = size;
        Ok(())
    }

    /// Freezes at the most used size since the last reset (3×3 when unused).
    pub fn freeze(&mut self) -> (usize, usize) {
        let n = self.sizes.len();
        let u = self.usage.borrow();
        let best = if u.iter().all(|c| *c == 0) {
            let i = self.sizes.iter().position(|s| *s == 3).unwrap_or(0);
            i * n + i
        } else {
            let mut best = 0;
            for (i, c) in u.iter().enumerate() {
                if *c > u[best] {
                    best = i;
                }
            }
            best
        };
        drop(u);
        let size = (self.sizes[best / n], self.sizes[best % n]);
        self.frozen = Some(size);
        size
    }

    pub fn reset_usage(&self) {
        self.usage.borrow_mut().iter_mut().for_each(|c| *c = 0);
    }

    pub fn usage(&self) -> Vec<u64> {
        self.usage.borrow().clone()
    }

    pub fn set_usage(&self, counts: &[u64]) -> Result<()> {
        let mut u = self.usage.borrow_mut();
        if counts.len() != u.len() {
            return Err(Error::Dimension(format!(
                "arconv `{}` has {} bank entries, got {} usage counts",
                self.name,
                u.len(),
                counts.len()
            )));
        }
        u.copy_from_slice(counts);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(store: &mut ParamStore, cin: usize, cout: usize) -> ArConv {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ArConv::new(&mut Builder::new(store, &mut rng).pp("ar"), cin, cout, 7).unwrap()
    }

    fn const_ext(b: usize, h: usize, w: usize, eh: f64, ew: f64) -> Tensor {
        let mut v = vec![eh; b * 2 * h * w];
        for bi in 0..b {
            for p in 0..h * w {
                v[(bi * 2 + 1) * h * w + p] = ew;
            }
        }
        Tensor::from_vec(v, (b, 2, h, w), &Device::Cpu).unwrap()
    }

    fn max_abs(t: Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn fixed_three_matches_convolution() {
        let mut store = ParamStore::new(DType::F64);
        let ar = layer(&mut store, 3, 4);
        let x = Tensor::randn(0f64, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let y = ar.forward_with_extents(&x, &const_ext(2, 8, 8, 3.0, 3.0)).unwrap();
        let e = ar.bank_entry(3, 3).unwrap();
        assert_eq!(e.kernel_size(), 3);
        let want = e.forward(&x).unwrap();
        assert!(max_abs((y - want).unwrap()) < 1e-5);
    }

    #[test]
    fn unit_extent_is_pointwise() {
        let mut store = ParamStore::new(DType::F64);
        let ar = layer(&mut store, 2, 3);
        let x = Tensor::randn(0f64, 1.0, (1, 2, 8, 8), &Device::Cpu).unwrap();
        let y = ar.forward_with_extents(&x, &const_ext(1, 8, 8, 1.0, 1.0)).unwrap();
        let e = ar.bank_entry(1, 1).unwrap();
        let w1 = e.weight().unwrap().sum_keepdim((2, 3)).unwrap();
        let want = x
            .conv2d(&w1, 0, 1, 1, 1)
            .unwrap()
            .broadcast_add(&e.bias().unwrap().reshape((1, 3, 1, 1)).unwrap())
            .unwrap();
        assert!(max_abs((y - want).unwrap()) < 1e-10);
    }

    #[test]
    fn mixed_sizes_match_per_pixel_reference() {
        let mut store = ParamStore::new(DType::F64);
        let ar = layer(&mut store, 2, 2);
        let (h, w) = (8, 8);
        let x = Tensor::randn(0f64, 1.0, (1, 2, h, w), &Device::Cpu).unwrap();
        let mut ev = vec![0.0; 2 * h * w];
        for p in 0..h * w {
            ev[p] = 1.0 + (p % 7) as f64;
            ev[h * w + p] = 7.0 - (p % 5) as f64;
        }
        let ext = Tensor::from_vec(ev.clone(), (1, 2, h, w), &Device::Cpu).unwrap();
        let y = ar.forward_with_extents(&x, &ext).unwrap();
        let cols = sample_columns(&x, &ext).unwrap();
        let cv = cols.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for p in 0..h * w {
            let kh = ar.sizes[ar.round_index(ev[p])];
            let kw = ar.sizes[ar.round_index(ev[h * w + p])];
            let e = ar.bank_entry(kh, kw).unwrap();
            let wv = e.weight().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let bv = e.bias().unwrap().to_vec1::<f64>().unwrap();
            for o in 0..2 {
                let mut acc = bv[o];
                for k in 0..18 {
                    acc += wv[o * 18 + k] * cv[k * h * w + p];
                }
                assert!((acc - yv[o * h * w + p]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn extents_bounded_and_freeze() {
        let mut store = ParamStore::new(DType::F32);
        let mut ar = layer(&mut store, 4, 4);
        let x = Tensor::randn(0f32, 5.0, (2, 4, 8, 8), &Device::Cpu).unwrap();
        let e = ar.extents(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(e.iter().all(|v| *v >= 1.0 && *v <= 7.0));
        ar.forward(&x).unwrap();
        let size = ar.freeze();
        let a = ar.size_map(&x).unwrap();
        let x2 = Tensor::randn(0f32, 5.0, (2, 4, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(a, ar.size_map(&x2).unwrap());
        assert!(a.iter().all(|s| *s == size));
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let x = Tensor::randn(0f64, 1.0, (1, 2, 8, 8), &Device::Cpu).unwrap();
        let ext = ((Tensor::rand(0f64, 1.0, (1, 2, 8, 8), &Device::Cpu).unwrap() * 4.0).unwrap() + 1.3).unwrap();
        let xv = candle_core::Var::from_tensor(&x).unwrap();
        let ev = candle_core::Var::from_tensor(&ext).unwrap();
        let out = sample_columns(xv.as_tensor(), ev.as_tensor()).unwrap();
        let wts = Tensor::randn(0f64, 1.0, out.shape(), &Device::Cpu).unwrap();
        let loss = (out * &wts).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let gx = g.get(xv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ge = g.get(ev.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let f = |xx: &Tensor, ee: &Tensor| -> f64 {
            (sample_columns(xx, ee).unwrap() * &wts)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let step = 1e-4;
        for idx in [0usize, 37, 90, 127] {
            let mut v = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            v[idx] += step;
            let xp = Tensor::from_vec(v.clone(), x.shape(), &Device::Cpu).unwrap();
            v[idx] -= 2.0 * step;
            let xm = Tensor::from_vec(v, x.shape(), &Device::Cpu).unwrap();
            let fd = (f(&xp, &ext) - f(&xm, &ext)) / (2.0 * step);
            assert!((fd - gx[idx]).abs() <= 1e-3 * fd.abs().max(1e-6));
        }
        for idx in [5usize, 70, 100] {
            let mut v = ext.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            v[idx] += step;
            let ep = Tensor::from_vec(v.clone(), ext.shape(), &Device::Cpu).unwrap();
            v[idx] -= 2.0 * step;
            let em = Tensor::from_vec(v, ext.shape(), &Device::Cpu).unwrap();
            let fd = (f(&x, &ep) - f(&x, &em)) / (2.0 * step);
            assert!((fd - ge[idx]).abs() <= 1e-3 * fd.abs().max(1e-6));
        }
    }
}
