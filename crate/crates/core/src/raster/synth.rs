use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MsImage, PanImage, Sensor};
use crate::{Error, Result};

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Line { y0: f64, x0: f64, y1: f64, x1: f64, half_width: f64 },
}

impl Shape {
    /// Point membership in normalised [0, 1]^2 coordinates.
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Line {
                y0,
                x0,
                y1,
                x1,
                half_width,
            } => {
                let (dy, dx) = (y1 - y0, x1 - x0);
                let len2 = dy * dy + dx * dx;
                let t = (((y - y0) * dy + (x - x0) * dx) / len2).clamp(0.0, 1.0);
                let (py, px) = (y0 + t * dy, x0 + t * dx);
                (y - py).powi(2) + (x - px).powi(2) <= half_width * half_width
            }
        }
    }
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, y: f64, x: f64) -> f64 {
        (2.0 * std::f64::consts::PI * (self.fy * y + self.fx * x) + self.phase).cos()
    }
}

fn random_wave(rng: &mut ChaCha8Rng, max_cycles: f64) -> Wave {
    Wave {
        fy: rng.random_range(-max_cycles..max_cycles),
        fx: rng.random_range(-max_cycles..max_cycles),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

/// Deterministic synthetic acquisition: an MS image of `bands × height × width`
/// and a PAN image `ratio` times larger.
///
/// The scene is rendered on the PAN grid. Every band is a smooth low-frequency
/// field plus rectangles, disks and lines shared across bands; each shape has
/// a signed amplitude scaled per band. The MS image is the area average of
/// the scene over `ratio × ratio` cells. PAN is a fixed positive mix of the
/// bands plus a texture that none of the bands contain.
pub fn generate_synthetic_scene(
    seed: u64,
    bands: usize,
    height: usize,
    width: usize,
    ratio: usize,
) -> Result<(MsImage, PanImage)> {
    let sensor = Sensor::for_bands(bands)?;
    if ratio < 2 {
        return Err(Error::Dimension(format!("ratio must be >= 2, got {ratio}")));
    }
    if height == 0 || width == 0 || height % ratio != 0 || width % ratio != 0 {
        return Err(Error::Dimension(format!(
            "{height}x{width} not divisible by ratio {ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..bands).map(|_| rng.random_range(0.25..0.45)).collect();
    let waves: Vec<Wave> = (0..3).map(|_| random_wave(&mut rng, 2.5)).collect();
    let wave_amp: Vec<Vec<f64>> = (0..bands)
        .map(|_| (0..waves.len()).map(|_| rng.random_range(0.0..0.06)).collect())
        .collect();

    let mut shapes = Vec::new();
    let n_shapes = rng.random_range(10..16);
    for i in 0..n_shapes {
        let shape = match i % 3 {
            0 => {
                let (y0, x0) = (rng.random_range(0.0..0.85), rng.random_range(0.0..0.85));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.random_range(0.05..0.3),
                    x1: x0 + rng.random_range(0.05..0.3),
                }
            }
            1 => Shape::Disk {
                cy: rng.random_range(0.05..0.95),
                cx: rng.random_range(0.05..0.95),
                r: rng.random_range(0.03..0.14),
            },
            _ => Shape::Line {
                y0: rng.random_range(0.0..1.0),
                x0: rng.random_range(0.0..1.0),
                y1: rng.random_range(0.0..1.0),
                x1: rng.random_range(0.0..1.0),
                half_width: rng.random_range(0.006..0.02),
            },
        };
        let amp = rng.random_range(0.08..0.3) * if rng.random_bool(0.35) { -1.0 } else { 1.0 };
        let signature: Vec<f64> = (0..bands).map(|_| amp * rng.random_range(0.7..1.3)).collect();
        shapes.push((shape, signature));
    }

    let mix_raw: Vec<f64> = (0..bands).map(|_| rng.random_range(0.5..1.5)).collect();
    let mix_total: f64 = mix_raw.iter().sum();
    let mix: Vec<f64> = mix_raw.iter().map(|w| w / mix_total).collect();
    let texture: Vec<Wave> = (0..4)
        .map(|_| random_wave(&mut rng, (height * ratio) as f64 / 6.0))
        .collect();
    let texture_amp = 0.02;

    let (ph, pw) = (height * ratio, width * ratio);
    let mut scene = Array3::<f64>::zeros((bands, ph, pw));
    let mut values = vec![0.0; bands];
    for py in 0..ph {
        let y = (py as f64 + 0.5) / ph as f64;
        for px in 0..pw {
            let x = (px as f64 + 0.5) / pw as f64;
            for (b, v) in values.iter_mut().enumerate() {
                *v = base[b]
                    + waves
                        .iter()
                        .zip(&wave_amp[b])
                        .map(|(w, a)| a * w.at(y, x))
                        .sum::<f64>();
            }
            for (shape, sig) in &shapes {
                if shape.contains(y, x) {
                    for (v, s) in values.iter_mut().zip(sig) {
                        *v += s;
                    }
                }
            }
            for (b, v) in values.iter().enumerate() {
                scene[[b, py, px]] = v.clamp(0.0, 1.0);
            }
        }
    }

    let area = (ratio * ratio) as f64;
    let gt = Array3::from_shape_fn((bands, height, width), |(b, y, x)| {
        let mut acc = 0.0;
        for dy in 0..ratio {
            for dx in 0..ratio {
                acc += scene[[b, y * ratio + dy, x * ratio + dx]];
            }
        }
        (acc / area) as f32
    });

    let pan = Array3::from_shape_fn((1, ph, pw), |(_, py, px)| {
        let y = (py as f64 + 0.5) / ph as f64;
        let x = (px as f64 + 0.5) / pw as f64;
        let mixed: f64 = (0..bands).map(|b| mix[b] * scene[[b, py, px]]).sum();
        let tex: f64 = texture.iter().map(|w| w.at(y, x)).sum::<f64>() / texture.len() as f64;
        (mixed + texture_amp * tex).clamp(0.0, 1.0) as f32
    });

    Ok((MsImage::new(gt, sensor)?, PanImage::new(pan, ratio)?))
}
