use ndarray::{s, Array3, ArrayView2, ArrayView3, Axis};

use super::MetricConfig;
use crate::{Error, Result};

fn same_shape(a: &ArrayView3<f64>, b: &ArrayView3<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean spectral angle in degrees. Pixels where either vector has zero norm
/// are skipped; if every pixel is skipped the result is 0.
pub fn sam(fused: ArrayView3<f64>, reference: ArrayView3<f64>) -> Result<f64> {
    same_shape(&fused, &reference, "sam")?;
    let (c, h, w) = fused.dim();
    let mut total = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (mut nf, mut nr) = (0.0f64, 0.0f64);
            for b in 0..c {
                nf += fused[[b, y, x]].powi(2);
                nr += reference[[b, y, x]].powi(2);
            }
            if nf == 0.0 || nr == 0.0 {
                continue;
            }
            let (nf, nr) = (nf.sqrt(), nr.sqrt());
            let (mut diff, mut sum) = (0.0, 0.0);
            for b in 0..c {
                let (u, v) = (fused[[b, y, x]] / nf, reference[[b, y, x]] / nr);
                diff += (u - v).powi(2);
                sum += (u + v).powi(2);
            }
            total += 2.0 * diff.sqrt().atan2(sum.sqrt());
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { (total / n as f64).to_degrees() })
}

/// `100 / ratio * sqrt(mean_c (RMSE_c / mu_c)^2)` with `mu_c` the reference
/// band mean.
pub fn ergas(fused: ArrayView3<f64>, reference: ArrayView3<f64>, ratio: usize) -> Result<f64> {
    same_shape(&fused, &reference, "ergas")?;
    if ratio == 0 {
        return Err(Error::InvalidArgument("ergas ratio must be positive".into()));
    }
    let c = fused.dim().0;
    let mut acc = 0.0;
    for b in 0..c {
        let f = fused.index_axis(Axis(0), b);
        let r = reference.index_axis(Axis(0), b);
        let mu = r.mean().unwrap_or(0.0);
        if mu == 0.0 {
            return Err(Error::Metric(format!("ergas: reference band {b} has zero mean")));
        }
        let mse = f.iter().zip(r.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / f.len() as f64;
        acc += mse / (mu * mu);
    }
    Ok(100.0 / ratio as f64 * (acc / c as f64).sqrt())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

fn mean_term(ma: f64, mb: f64) -> f64 {
    if ma == 0.0 && mb == 0.0 {
        1.0
    } else {
        2.0 * ma * mb / (ma * ma + mb * mb)
    }
}

/// Universal image quality index of two equally long samples. A pair of
/// constant samples scores 1, a single constant sample scores 0.
pub fn uiqi(a: &[f64], b: &[f64]) -> f64 {
    match (is_constant(a), is_constant(b)) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    (2.0 * cov / (va + vb)) * mean_term(ma, mb)
}

/// Top-left corners of the non-overlapping `block` tiles; partial tiles are
/// dropped.
pub(crate) fn blocks(h: usize, w: usize, block: usize) -> Result<Vec<(usize, usize)>> {
    if block == 0 || h < block || w < block {
        return Err(Error::Metric(format!("{h}x{w} image holds no {block}x{block} block")));
    }
    Ok((0..h / block)
        .flat_map(|i| (0..w / block).map(move |j| (i * block, j * block)))
        .collect())
}

fn block_values(band: ArrayView2<f64>, y: usize, x: usize, block: usize) -> Vec<f64> {
    band.slice(s![y..y + block, x..x + block]).iter().copied().collect()
}

/// Mean block-wise UIQI of two single bands.
pub fn uiqi_blocks(a: ArrayView2<f64>, b: ArrayView2<f64>, block: usize) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("uiqi: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    let tiles = blocks(h, w, block)?;
    let total: f64 = tiles
        .iter()
        .map(|&(y, x)| uiqi(&block_values(a, y, x, block), &block_values(b, y, x, block)))
        .sum();
    Ok(total / tiles.len() as f64)
}

/// Cayley–Dickson product of two hypercomplex numbers of length `2^n`:
/// `(a, b)(c, d) = (ac - conj(d) b, d a + b conj(c))`.
pub fn hyper_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let n = p.len();
    debug_assert_eq!(n, q.len());
    if n == 1 {
        return vec![p[0] * q[0]];
    }
    let h = n / 2;
    let (a, b) = p.split_at(h);
    let (c, d) = q.split_at(h);
    let ac = hyper_mul(a, c);
    let db = hyper_mul(&hyper_conj(d), b);
    let da = hyper_mul(d, a);
    let bc = hyper_mul(b, &hyper_conj(c));
    let mut out: Vec<f64> = ac.iter().zip(&db).map(|(x, y)| x - y).collect();
    out.extend(da.iter().zip(&bc).map(|(x, y)| x + y));
    out
}

pub fn hyper_conj(p: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|v| -v).collect();
    out[0] = p[0];
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Hypercomplex quality index of one block; `z` and `w` hold `n` pixel
/// vectors of dimension `d = 2^k`, laid out pixel-major. With `d = 1` this is
/// the signed scalar index.
fn q2n_block(z: &[Vec<f64>], w: &[Vec<f64>]) -> f64 {
    let d = z[0].len();
    let n = z.len() as f64;
    let cz = z.iter().all(|p| *p == z[0]);
    let cw = w.iter().all(|p| *p == w[0]);
    match (cz, cw) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mean = |v: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for p in v {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        m.iter().map(|a| a / n).collect()
    };
    let (mz, mw) = (mean(z), mean(w));
    let mut vz = 0.0;
    let mut vw = 0.0;
    let mut czw = vec![0.0; d];
    for (p, q) in z.iter().zip(w) {
        let dz: Vec<f64> = p.iter().zip(&mz).map(|(a, b)| a - b).collect();
        let dw: Vec<f64> = q.iter().zip(&mw).map(|(a, b)| a - b).collect();
        vz += dz.iter().map(|x| x * x).sum::<f64>();
        vw += dw.iter().map(|x| x * x).sum::<f64>();
        for (acc, v) in czw.iter_mut().zip(hyper_mul(&dz, &hyper_conj(&dw))) {
            *acc += v;
        }
    }
    if d == 1 {
        return 2.0 * czw[0] / (vz + vw) * mean_term(mz[0], mw[0]);
    }
    let (nz, nw) = (norm(&mz), norm(&mw));
    2.0 * norm(&czw) / (vz + vw) * mean_term(nz, nw)
}

/// Hypercomplex generalisation of the universal image quality index, averaged
/// over non-overlapping `q_block` tiles. Band counts that are not a power of
/// two are zero-padded to the next one.
pub fn q2n(fused: ArrayView3<f64>, reference: ArrayView3<f64>, cfg: &MetricConfig) -> Result<f64> {
    same_shape(&fused, &reference, "q2n")?;
    let (c, h, w) = fused.dim();
    if c == 0 {
        return Err(Error::Metric("q2n needs at least one band".into()));
    }
    let d = c.next_power_of_two();
    let tiles = blocks(h, w, cfg.q_block)?;
    let bs = cfg.q_block;
    let gather = |img: &ArrayView3<f64>, y0: usize, x0: usize| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(bs * bs);
        for y in y0..y0 + bs {
            for x in x0..x0 + bs {
                let mut v = vec![0.0; d];
                for b in 0..c {
                    v[b] = img[[b, y, x]];
                }
                out.push(v);
            }
        }
        out
    };
    let total: f64 = tiles
        .iter()
        .map(|&(y, x)| q2n_block(&gather(&fused, y, x), &gather(&reference, y, x)))
        .sum();
    Ok(total / tiles.len() as f64)
}

/// 3×3 Laplacian high-pass over interior pixels.
pub(crate) fn laplacian(band: ArrayView2<f64>) -> Vec<f64> {
    let (h, w) = band.dim();
    let mut out = Vec::with_capacity(h.saturating_sub(2) * w.saturating_sub(2));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let mut s = 8.0 * band[[y, x]];
            for dy in 0..3 {
                for dx in 0..3 {
                    if dy != 1 || dx != 1 {
                        s -= band[[y + dy - 1, x + dx - 1]];
                    }
                }
            }
            out.push(s);
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 || a.is_empty() {
        None
    } else {
        Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Band-mean correlation of Laplacian-filtered images. Bands whose filtered
/// response has zero variance are skipped; NaN when every band is skipped.
pub fn scc(fused: ArrayView3<f64>, reference: ArrayView3<f64>) -> Result<f64> {
    same_shape(&fused, &reference, "scc")?;
    let (c, h, w) = fused.dim();
    if h < 3 || w < 3 {
        return Err(Error::Metric(format!("scc needs at least 3x3 pixels, got {h}x{w}")));
    }
    let vals: Vec<f64> = (0..c)
        .filter_map(|b| {
            pearson(
                &laplacian(fused.index_axis(Axis(0), b)),
                &laplacian(reference.index_axis(Axis(0), b)),
            )
        })
        .collect();
    Ok(if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    })
}

/// Spectral distortion from inter-band index differences between the fused
/// image (blocks of `q_block`) and the low-resolution MS image (blocks of
/// `q_block / ratio`).
pub fn d_lambda(fused: ArrayView3<f64>, ms: ArrayView3<f64>, cfg: &MetricConfig) -> Result<f64> {
    let c = fused.dim().0;
    if c < 2 {
        return Err(Error::Metric("d_lambda needs at least two bands".into()));
    }
    if ms.dim().0 != c {
        return Err(Error::Dimension(format!("d_lambda: {c} fused bands vs {} ms bands", ms.dim().0)));
    }
    let (fb, mb) = cfg.block_sizes()?;
    let mut acc = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let qf = uiqi_blocks(fused.index_axis(Axis(0), i), fused.index_axis(Axis(0), j), fb)?;
            let qm = uiqi_blocks(ms.index_axis(Axis(0), i), ms.index_axis(Axis(0), j), mb)?;
            acc += (qf - qm).abs().powf(cfg.p);
        }
    }
    Ok((acc / (c * (c - 1)) as f64).powf(1.0 / cfg.p))
}

/// Spatial distortion between band-to-PAN indices at both resolutions.
pub fn d_s(
    fused: ArrayView3<f64>,
    ms: ArrayView3<f64>,
    pan: ArrayView2<f64>,
    pan_degraded: ArrayView2<f64>,
    cfg: &MetricConfig,
) -> Result<f64> {
    let (c, h, w) = fused.dim();
    if pan.dim() != (h, w) || ms.dim() != (c, pan_degraded.dim().0, pan_degraded.dim().1) {
        return Err(Error::Dimension(format!(
            "d_s: fused {:?}, pan {:?}, ms {:?}, degraded pan {:?} are inconsistent",
            fused.dim(),
            pan.dim(),
            ms.dim(),
            pan_degraded.dim()
        )));
    }
    let (fb, mb) = cfg.block_sizes()?;
    let mut acc = 0.0;
    for b in 0..c {
        let qf = uiqi_blocks(fused.index_axis(Axis(0), b), pan, fb)?;
        let qm = uiqi_blocks(ms.index_axis(Axis(0), b), pan_degraded, mb)?;
        acc += (qf - qm).abs().powf(cfg.q);
    }
    Ok((acc / c as f64).powf(1.0 / cfg.q))
}

/// `(1 - d_lambda)(1 - d_s)`.
pub fn hqnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

/// Widens an `f32` raster for metric evaluation.
pub fn widen(a: &Array3<f32>) -> Array3<f64> {
    a.mapv(f64::from)
}
