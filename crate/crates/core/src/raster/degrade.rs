use ndarray::Array3;

use super::{upsample, MsImage, PanImage, SamplePair};
use crate::{Error, Result};

/// Parameters of the reduced-resolution degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldConfig {
    pub ratio: usize,
    /// Gaussian frequency response at the Nyquist frequency of the decimated
    /// grid for the multispectral bands.
    pub mtf_gain_ms: f64,
    /// Same, for the panchromatic band.
    pub mtf_gain_pan: f64,
}

impl Default for WaldConfig {
    fn default() -> Self {
        Self {
            ratio: 4,
            mtf_gain_ms: 0.30,
            mtf_gain_pan: 0.15,
        }
    }
}

/// Frequency response `sum_k taps[k] cos(2 pi f (k - R))` of a symmetric kernel
/// of length `2R + 1`, `freq` in cycles per sample.
pub fn mtf_response(taps: &[f64], freq: f64) -> f64 {
    let radius = (taps.len() / 2) as f64;
    taps.iter()
        .enumerate()
        .map(|(k, t)| t * (2.0 * std::f64::consts::PI * freq * (k as f64 - radius)).cos())
        .sum()
}

fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let d = k as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Unit-DC-gain 1-D Gaussian whose sampled frequency response at `1 / (2 ratio)`
/// equals `gain`. The width is found by bisection on the discrete response, so
/// the match is exact up to 1e-12 rather than relying on the continuous formula.
pub fn mtf_kernel(ratio: usize, gain: f64) -> Result<Vec<f64>> {
    if ratio < 2 {
        return Err(Error::InvalidArgument(format!("ratio must be >= 2, got {ratio}")));
    }
    if !(gain > 0.0 && gain < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "MTF gain must lie in (0, 1), got {gain}"
        )));
    }
    let nyquist = 1.0 / (2.0 * ratio as f64);
    // Continuous-domain estimate fixes the support.
    let sigma0 = (ratio as f64 / std::f64::consts::PI) * (-2.0 * gain.ln()).sqrt();
    let radius = (3.0 * sigma0).ceil() as usize + 1;
    let (mut lo, mut hi) = (1e-3, 4.0 * sigma0 + 1.0);
    // Response decreases monotonically with sigma over this bracket.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mtf_response(&gaussian_taps(mid, radius), nyquist) > gain {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok(gaussian_taps(0.5 * (lo + hi), radius))
}

/// Half-sample symmetric reflection (`x[-1] = x[0]`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    r as usize
}

/// Separable filtering of every band with `taps` along both axes, reflective
/// boundaries. Computed in f64.
pub fn mtf_blur(image: &Array3<f32>, taps: &[f64]) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if taps.len() > h || taps.len() > w {
        return Err(Error::Dimension(format!(
            "kernel of {} taps larger than {h}x{w} image",
            taps.len()
        )));
    }
    let radius = (taps.len() / 2) as isize;
    let mut rows = Array3::<f64>::zeros((c, h, w));
    for b in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let xi = reflect(x as isize + k as isize - radius, w);
                    acc += t * image[[b, y, xi]] as f64;
                }
                rows[[b, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for b in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let yi = reflect(y as isize + k as isize - radius, h);
                    acc += t * rows[[b, yi, x]];
                }
                out[[b, y, x]] = acc;
            }
        }
    }
    Ok(out)
}

/// Keeps every `ratio`-th sample starting at `phase` (row, column).
pub fn decimate(image: &Array3<f64>, ratio: usize, phase: (usize, usize)) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if h % ratio != 0 || w % ratio != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} not divisible by ratio {ratio}"
        )));
    }
    if phase.0 >= ratio || phase.1 >= ratio {
        return Err(Error::InvalidArgument(format!("phase {phase:?} >= ratio {ratio}")));
    }
    Ok(Array3::from_shape_fn((c, h / ratio, w / ratio), |(b, y, x)| {
        image[[b, y * ratio + phase.0, x * ratio + phase.1]]
    }))
}

/// Sampling phase used by the degradation; `upsample` assumes the same
/// alignment (low-resolution sample `j` sits on high-resolution pixel
/// `ratio * j + ratio / 2`).
pub(crate) fn default_phase(ratio: usize) -> (usize, usize) {
    (ratio / 2, ratio / 2)
}

fn degrade(image: &Array3<f32>, ratio: usize, gain: f64) -> Result<Array3<f32>> {
    let taps = mtf_kernel(ratio, gain)?;
    let blurred = mtf_blur(image, &taps)?;
    let low = decimate(&blurred, ratio, default_phase(ratio))?;
    Ok(low.mapv(|v| v as f32))
}

/// Reduces a panchromatic raster by `ratio` through its MTF-matched Gaussian.
pub fn degrade_pan(pan: &Array3<f32>, ratio: usize, gain: f64) -> Result<Array3<f32>> {
    if pan.dim().0 != 1 {
        return Err(Error::Dimension("PAN must have one band".into()));
    }
    degrade(pan, ratio, gain)
}

/// Reduced-resolution protocol: the acquired MS image becomes the reference,
/// MS and PAN are both degraded by `ratio`, and the degraded MS is upsampled
/// back to the reference grid.
pub fn wald_degrade(gt: &MsImage, pan: &PanImage, cfg: &WaldConfig) -> Result<SamplePair> {
    let r = cfg.ratio;
    if pan.height() != gt.height() * r || pan.width() != gt.width() * r {
        return Err(Error::Dimension(format!(
            "PAN {}x{} must be {r}x the MS size {}x{}",
            pan.height(),
            pan.width(),
            gt.height(),
            gt.width()
        )));
    }
    let ms = degrade(gt.data(), r, cfg.mtf_gain_ms)?;
    let ms = MsImage::from_clipped(ms, gt.sensor())?;
    let lms = upsample(&ms, r)?;
    let pan_rr = degrade(pan.data(), r, cfg.mtf_gain_pan)?;
    let pan_rr = PanImage::new(pan_rr.mapv(|v| v.clamp(0.0, 1.0)), r)?;
    SamplePair::new(gt.clone(), ms, lms, pan_rr)
}
