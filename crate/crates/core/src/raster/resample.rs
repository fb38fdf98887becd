use ndarray::{Array2, Array3};

use super::MsImage;
use crate::{Error, Result};

const KEYS_A: f64 = -0.5;

fn keys(s: f64) -> f64 {
    let s = s.abs();
    if s <= 1.0 {
        (KEYS_A + 2.0) * s * s * s - (KEYS_A + 3.0) * s * s + 1.0
    } else if s < 2.0 {
        KEYS_A * s * s * s - 5.0 * KEYS_A * s * s + 8.0 * KEYS_A * s - 4.0 * KEYS_A
    } else {
        0.0
    }
}

/// Signal extended by two samples on each side. Quadratic extrapolation
/// (the cubic-convolution boundary rule) keeps linear and quadratic signals
/// exact up to the border.
fn extend(line: &[f64]) -> Vec<f64> {
    let n = line.len();
    let mut ext = vec![0.0; n + 4];
    ext[2..n + 2].copy_from_slice(line);
    match n {
        1 => {
            ext[0] = line[0];
            ext[1] = line[0];
            ext[n + 2] = line[0];
            ext[n + 3] = line[0];
        }
        2 => {
            ext[1] = 2.0 * ext[2] - ext[3];
            ext[0] = 2.0 * ext[1] - ext[2];
            ext[n + 2] = 2.0 * ext[n + 1] - ext[n];
            ext[n + 3] = 2.0 * ext[n + 2] - ext[n + 1];
        }
        _ => {
            ext[1] = 3.0 * ext[2] - 3.0 * ext[3] + ext[4];
            ext[0] = 3.0 * ext[1] - 3.0 * ext[2] + ext[3];
            ext[n + 2] = 3.0 * ext[n + 1] - 3.0 * ext[n] + ext[n - 1];
            ext[n + 3] = 3.0 * ext[n + 2] - 3.0 * ext[n + 1] + ext[n];
        }
    }
    ext
}

/// Tap indices (into the extended signal) and weights for every output sample.
fn plan(n: usize, ratio: usize) -> Vec<([usize; 4], [f64; 4])> {
    let half = (ratio / 2) as f64;
    (0..n * ratio)
        .map(|i| {
            let u = (i as f64 - half) / ratio as f64;
            let j0 = u.floor();
            let t = u - j0;
            let base = (j0 as isize - 1 + 2) as usize;
            (
                [base, base + 1, base + 2, base + 3],
                [keys(t + 1.0), keys(t), keys(1.0 - t), keys(2.0 - t)],
            )
        })
        .collect()
}

fn interp_line(line: &[f64], plan: &[([usize; 4], [f64; 4])], out: &mut [f64]) {
    let ext = extend(line);
    for (o, (idx, w)) in out.iter_mut().zip(plan) {
        *o = idx.iter().zip(w).map(|(&i, &w)| ext[i] * w).sum();
    }
}

/// Unclipped separable cubic interpolation of every band by `ratio`.
pub(crate) fn upsample_array(data: &Array3<f32>, ratio: usize) -> Array3<f64> {
    let (c, h, w) = data.dim();
    let (ph, pw) = (plan(h, ratio), plan(w, ratio));
    let (oh, ow) = (h * ratio, w * ratio);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut line = vec![0.0; w.max(h)];
    let mut buf = vec![0.0; ow.max(oh)];
    for b in 0..c {
        let mut rows = Array2::<f64>::zeros((h, ow));
        for y in 0..h {
            for x in 0..w {
                line[x] = data[[b, y, x]] as f64;
            }
            interp_line(&line[..w], &pw, &mut buf[..ow]);
            for x in 0..ow {
                rows[[y, x]] = buf[x];
            }
        }
        for x in 0..ow {
            for y in 0..h {
                line[y] = rows[[y, x]];
            }
            interp_line(&line[..h], &ph, &mut buf[..oh]);
            for y in 0..oh {
                out[[b, y, x]] = buf[y];
            }
        }
    }
    out
}

/// Cubic-kernel interpolation to `ratio` times the resolution, clipped to [0, 1].
pub fn upsample(ms: &MsImage, ratio: usize) -> Result<MsImage> {
    if ratio < 2 {
        return Err(Error::InvalidArgument(format!("ratio must be >= 2, got {ratio}")));
    }
    let up = upsample_array(ms.data(), ratio);
    MsImage::from_clipped(up.mapv(|v| v as f32), ms.sensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Sensor;

    #[test]
    fn kernel_partition_of_unity() {
        for k in 0..10 {
            let t = k as f64 / 10.0;
            let s = keys(t + 1.0) + keys(t) + keys(1.0 - t) + keys(2.0 - t);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_is_reproduced() {
        let ms = MsImage::new(Array3::from_elem((4, 5, 6), 0.3), Sensor::Qb).unwrap();
        let up = upsample(&ms, 4).unwrap();
        assert_eq!(up.data().dim(), (4, 20, 24));
        assert!(up.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn tiny_input_shape() {
        let data = Array3::from_shape_vec((1, 2, 2), vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let up = upsample_array(&data, 2);
        assert_eq!(up.dim(), (1, 4, 4));
    }

    #[test]
    fn bilinear_ramp_is_exact() {
        // Closed-form oracle: a low-res sample j sits on high-res coordinate
        // ratio*j + ratio/2, so f(y, x) = a + b*y + c*x maps to
        // a + b*(i - r/2)/r + c*(k - r/2)/r on the output grid.
        let (a, b, c) = (0.2, 0.011, 0.017);
        for ratio in [2usize, 3, 4] {
            let data = Array3::from_shape_fn((1, 9, 7), |(_, y, x)| {
                (a + b * y as f64 + c * x as f64) as f32
            });
            let up = upsample_array(&data, ratio);
            let half = (ratio / 2) as f64;
            for ((_, i, k), v) in up.indexed_iter() {
                let y = (i as f64 - half) / ratio as f64;
                let x = (k as f64 - half) / ratio as f64;
                let expect = a + b * y + c * x;
                assert!((v - expect).abs() < 1e-5, "ratio {ratio} at ({i},{k})");
            }
        }
    }
}
