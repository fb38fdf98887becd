use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array3;

use super::config::FoseConfig;
use super::eval::{eval_split, read_fused};
use super::models::ensure_dir;
use super::train::{load_split, loss_window};
use crate::metrics::{MetricReport, Resolution};
use crate::{Error, Result};

/// Image grids written per method.
pub const GRID_SAMPLES: usize = 4;

/// Display bands (red, green, blue) for a band count.
pub fn rgb_bands(bands: usize) -> [usize; 3] {
    match bands {
        8 => [4, 2, 1],
        4 => [2, 1, 0],
        n if n >= 3 => [2, 1, 0],
        _ => [0, 0, 0],
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_panel(img: &Array3<f32>) -> RgbImage {
    let (c, h, w) = img.dim();
    let [r, g, b] = rgb_bands(c);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(img[[r, y, x]]), to_u8(img[[g, y, x]]), to_u8(img[[b, y, x]])])
    })
}

/// Per-pixel band-mean of `|fused - gt|`, divided by its maximum (all zero
/// when the images agree).
pub fn residual_map(fused: &Array3<f32>, gt: &Array3<f32>) -> Result<ndarray::Array2<f32>> {
    if fused.dim() != gt.dim() {
        return Err(Error::Dimension("residual of differently shaped images".into()));
    }
    let r = (fused - gt).mapv(f32::abs).mean_axis(ndarray::Axis(0)).expect("at least one band");
    let max = r.iter().copied().fold(0.0f32, f32::max);
    Ok(if max > 0.0 { r / max } else { r })
}

fn gray_panel(map: &ndarray::Array2<f32>) -> RgbImage {
    let (h, w) = map.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = to_u8(map[[y as usize, x as usize]]);
        Rgb([v, v, v])
    })
}

const GAP: u32 = 2;

/// `lms | fused | gt | residual` side by side.
pub fn image_grid(lms: &Array3<f32>, fused: &Array3<f32>, gt: &Array3<f32>) -> Result<RgbImage> {
    let panels = [rgb_panel(lms), rgb_panel(fused), rgb_panel(gt), gray_panel(&residual_map(fused, gt)?)];
    let (w, h) = panels[0].dimensions();
    let mut out = RgbImage::from_pixel(4 * w + 3 * GAP, h, Rgb([255, 255, 255]));
    for (i, p) in panels.iter().enumerate() {
        image::imageops::replace(&mut out, p, (i as u32 * (w + GAP)) as i64, 0);
    }
    Ok(out)
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Loss curve on linear axes spanning the data range.
pub fn loss_plot(losses: &[f64]) -> RgbImage {
    let (w, h, m) = (480u32, 240u32, 20i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let (right, bottom) = (w as i64 - m, h as i64 - m);
    draw_line(&mut img, (m, m), (m, bottom), black);
    draw_line(&mut img, (m, bottom), (right, bottom), black);
    let finite: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return img;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = finite.len() - 1;
    let pt = |i: usize, v: f64| {
        let x = m + ((right - m) as f64 * i as f64 / n as f64).round() as i64;
        let y = bottom - ((bottom - m) as f64 * (v - lo) / span).round() as i64;
        (x, y)
    };
    for i in 1..finite.len() {
        draw_line(&mut img, pt(i - 1, finite[i - 1]), pt(i, finite[i]), Rgb([31, 119, 180]));
    }
    img
}

fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("loss csv", l.to_string()))
        })
        .collect()
}

fn sorted_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in rd {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::format("png", format!("{}: {e}", path.display())))
}

fn stem(p: &Path) -> String {
    p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string()
}

/// Writes `summary.md`, `tables/*.csv`, `plots/loss_stage<k>.png` and
/// `grids/<method>_<image>.png` under `out_dir` from the stored training
/// logs in the run root and the evaluation outputs in `eval_dir`.
pub fn emit_report(cfg: &FoseConfig, eval_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut md = String::from("# Run report\n\n");
    let _ = writeln!(md, "Config hash: `{}`\n", cfg.hash());
    md.push_str("## Training\n\n| Stage | Steps | Initial loss | Final loss |\n| --- | --- | --- | --- |\n");
    let plots = out_dir.join("plots");
    ensure_dir(&plots)?;
    for k in 1..=4u8 {
        let p = cfg.stage_dir(k).join("losses.csv");
        if !p.exists() {
            let _ = writeln!(md, "| {k} | - | - | - |");
            continue;
        }
        let losses = read_losses(&p)?;
        let (a, b) = loss_window(&losses);
        let _ = writeln!(md, "| {k} | {} | {a:.6} | {b:.6} |", losses.len());
        let out = plots.join(format!("loss_stage{k}.png"));
        save_png(&loss_plot(&losses), &out)?;
        written.push(out);
    }
    md.push_str("\n## Metrics\n\n");
    let tables = out_dir.join("tables");
    ensure_dir(&tables)?;
    for p in sorted_files(eval_dir, ".csv")? {
        let name = stem(&p);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let res = if name.ends_with("_FR.csv") { Resolution::Full } else { Resolution::Reduced };
        let method = name.trim_end_matches(".csv").rsplit_once('_').map(|x| x.0).unwrap_or(&name);
        let report = MetricReport::from_csv(method, res, &text)?;
        let _ = writeln!(md, "- {}", report.summary_line());
        let out = tables.join(&name);
        std::fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
        written.push(out);
    }
    let fused_files = sorted_files(eval_dir, "_RR_fused.arr")?;
    if !fused_files.is_empty() {
        let pairs = load_split(cfg, eval_split(eval_dir)?)?;
        let grids = out_dir.join("grids");
        ensure_dir(&grids)?;
        for p in fused_files {
            let method = stem(&p).trim_end_matches("_RR_fused.arr").to_string();
            let fused = read_fused(&p)?;
            for (i, (f, pair)) in fused.iter().zip(&pairs).take(GRID_SAMPLES).enumerate() {
                let out = grids.join(format!("{method}_{}.png", super::eval::image_name(i)));
                save_png(&image_grid(pair.lms.data(), f, pair.gt.data())?, &out)?;
                written.push(out);
            }
        }
        md.push_str("\nGrids: lms | fused | gt | residual.\n");
    }
    let out = out_dir.join("summary.md");
    std::fs::write(&out, md).map_err(|e| Error::io(&out, e))?;
    written.push(out);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_residual_is_black() {
        let a = Array3::from_shape_fn((8, 5, 6), |(c, y, x)| (c + y + x) as f32 / 20.0);
        let r = residual_map(&a, &a).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
        let g = image_grid(&a, &a, &a).unwrap();
        assert_eq!(g.dimensions(), (4 * 6 + 3 * GAP, 5));
        for y in 0..5 {
            for x in 3 * (6 + GAP)..g.width() {
                assert_eq!(g.get_pixel(x, y).0, [0, 0, 0]);
            }
        }
    }

    #[test]
    fn band_selection() {
        assert_eq!(rgb_bands(8), [4, 2, 1]);
        assert_eq!(rgb_bands(4), [2, 1, 0]);
    }

    #[test]
    fn plot_draws_curve() {
        let img = loss_plot(&[3.0, 2.0, 1.0, 0.5]);
        let blue = img.pixels().filter(|p| p.0 == [31, 119, 180]).count();
        assert!(blue > 100);
    }
}
