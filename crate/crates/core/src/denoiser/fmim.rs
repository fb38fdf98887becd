use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::nn::{record, LayerKind};
use crate::{Error, Result};

/// Side of the masked low-frequency box along an axis of length `n`.
pub fn lowfreq_side(n: usize, rho: f64) -> usize {
    ((rho * n as f64).ceil() as usize).clamp(1, n)
}

/// Per-axis flags of the masked frequencies: signed frequencies
/// `-floor(k/2) ..= k - floor(k/2) - 1`, wrapped to FFT bin order.
pub fn lowfreq_mask(n: usize, rho: f64) -> Vec<bool> {
    let k = lowfreq_side(n, rho) as isize;
    let mut m = vec![false; n];
    let lo = -(k / 2);
    for f in lo..lo + k {
        m[f.rem_euclid(n as isize) as usize] = true;
    }
    m
}

fn transpose(src: &[Complex<f64>], rows: usize, cols: usize, dst: &mut [Complex<f64>]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// In-place high-pass of every `h × w` plane of `data`.
fn highpass_planes(data: &mut [f64], h: usize, w: usize, rho: f64) {
    let mut planner = FftPlanner::<f64>::new();
    let (fw, fh) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let (iw, ih) = (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h));
    let (mh, mw) = (lowfreq_mask(h, rho), lowfreq_mask(w, rho));
    let norm = 1.0 / (h * w) as f64;
    let mut a = vec![Complex::new(0.0, 0.0); h * w];
    let mut b = vec![Complex::new(0.0, 0.0); h * w];
    for plane in data.chunks_mut(h * w) {
        for (z, v) in a.iter_mut().zip(plane.iter()) {
            *z = Complex::new(*v, 0.0);
        }
        fw.process(&mut a);
        transpose(&a, h, w, &mut b);
        fh.process(&mut b);
        // b is laid out [w][h]
        for (u, &drop_u) in mw.iter().enumerate() {
            if !drop_u {
                continue;
            }
            for (v, &drop_v) in mh.iter().enumerate() {
                if drop_v {
                    b[u * h + v] = Complex::new(0.0, 0.0);
                }
            }
        }
        ih.process(&mut b);
        transpose(&b, w, h, &mut a);
        iw.process(&mut a);
        for (v, z) in plane.iter_mut().zip(a.iter()) {
            *v = z.re * norm;
        }
    }
}

struct FmimOp {
    rho: f64,
}

impl CustomOp1 for FmimOp {
    fn name(&self) -> &'static str {
        "fmim-highpass"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.dims();
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("fmim input must be contiguous".into()))?;
        let out = match storage {
            CpuStorage::F64(v) => {
                let mut d = v[start..end].to_vec();
                highpass_planes(&mut d, h, w, self.rho);
                CpuStorage::F64(d)
            }
            CpuStorage::F32(v) => {
                let mut d: Vec<f64> = v[start..end].iter().map(|x| *x as f64).collect();
                highpass_planes(&mut d, h, w, self.rho);
                CpuStorage::F32(d.into_iter().map(|x| x as f32).collect())
            }
            _ => return Err(candle_core::Error::Msg("fmim supports f32 and f64".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    // The operator is a real, even frequency multiplier and therefore self-adjoint.
    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(FmimOp { rho: self.rho })?))
    }
}

/// Fourier-mask high-pass over the last two dimensions: the centred
/// low-frequency box of side `ceil(rho * n)` per axis is removed and the real
/// part of the inverse transform returned.
pub fn fmim_highpass(x: &Tensor, rho: f64) -> Result<Tensor> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside (0, 1]")));
    }
    let dims = x.dims();
    if dims.len() < 2 || dims[dims.len() - 2] < 4 || dims[dims.len() - 1] < 4 {
        return Err(Error::Dimension(format!(
            "fmim needs spatial size >= 4x4, got {dims:?}"
        )));
    }
    record("fmim", LayerKind::Other("fft"), 0);
    Ok(x.contiguous()?.apply_op1(FmimOp { rho })?)
}
