use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Tensor;
use ndarray::{Array3, Axis};

use super::config::FoseConfig;
use super::data::{stack_pairs, tensor_image};
use super::models::{self, connector_images, dm_images, e2e_images, osd_images, schedule};
use super::train::{backbone_outputs, load_split};
use crate::diffusion::{InitNoise, SamplerConfig};
use crate::metrics::{full_metrics, reduced_metrics, widen, MetricConfig, MetricReport, Resolution};
use crate::raster::{degrade_pan, read_array, write_array, SamplePair, Split, WaldConfig};
use crate::{Error, Result};

/// A fusion method that can be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Fused image is the upsampled MS input.
    Exp,
    /// Multi-step sampling with the stage-1 model.
    Dm { steps: usize },
    /// Merged one-step student.
    Osd,
    E2e,
    Fose,
}

impl Method {
    /// Stage whose checkpoint the method needs.
    pub fn stage(self) -> Option<u8> {
        match self {
            Method::Exp => None,
            Method::Dm { .. } => Some(1),
            Method::Osd => Some(2),
            Method::E2e => Some(3),
            Method::Fose => Some(4),
        }
    }

    /// Denoiser invocations per output image.
    pub fn invocations(self) -> usize {
        match self {
            Method::Exp | Method::E2e => 0,
            Method::Dm { steps } => steps,
            Method::Osd | Method::Fose => 1,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Exp => f.write_str("exp"),
            Method::Dm { steps } => write!(f, "dm{steps}"),
            Method::Osd => f.write_str("osd"),
            Method::E2e => f.write_str("e2e"),
            Method::Fose => f.write_str("fose"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Method::Exp),
            "osd" => Ok(Method::Osd),
            "e2e" => Ok(Method::E2e),
            "fose" => Ok(Method::Fose),
            _ => match s.strip_prefix("dm").map(str::parse::<usize>) {
                Some(Ok(steps)) if steps > 0 => Ok(Method::Dm { steps }),
                _ => Err(Error::InvalidArgument(format!("unknown method `{s}`"))),
            },
        }
    }
}

/// Inference options shared by the evaluated methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    pub init_noise: InitNoise,
    pub seed: u64,
}

impl InferenceOptions {
    pub fn from_config(cfg: &FoseConfig) -> Self {
        Self {
            init_noise: cfg.model.init_noise,
            seed: 0,
        }
    }
}

/// Fused `[N, C, H, W]` images of `method` for the given inputs.
pub fn fuse(cfg: &FoseConfig, method: Method, lms: &Tensor, pan: &Tensor, opts: InferenceOptions) -> Result<Tensor> {
    let mut rng = models::inference_rng(opts.seed);
    match method {
        Method::Exp => Ok(lms.clone()),
        Method::Dm { steps } => {
            let (teacher, _) = models::load_teacher(cfg)?;
            let sampler = SamplerConfig {
                num_steps: steps,
                init_noise: opts.init_noise,
                ..SamplerConfig::default()
            };
            dm_images(&teacher.model, lms, pan, &schedule(cfg)?, &sampler, &mut rng)
        }
        Method::Osd => {
            let (osd, _) = models::load_osd(cfg)?;
            osd_images(&osd.model, lms, pan, opts.init_noise, cfg.model.t_infer, &mut rng)
        }
        Method::E2e => e2e_images(&models::load_e2e(cfg)?.0.model, lms, pan),
        Method::Fose => {
            let (osd, _) = models::load_osd(cfg)?;
            let (e2e, _) = models::load_e2e(cfg)?;
            let (conn, _) = models::load_connector(cfg)?;
            let mut c = cfg.clone();
            c.model.init_noise = opts.init_noise;
            let (a, b) = backbone_outputs(&c, &osd, &e2e, lms, pan, opts.seed)?;
            connector_images(&conn.model, &a, &b)
        }
    }
}

fn tensor_images(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    (0..t.dims()[0]).map(|i| tensor_image(t, i)).collect()
}

/// Metrics of stored fused images against a split. Runs over images in
/// parallel.
pub fn score(
    fused: &[Array3<f32>],
    pairs: &[SamplePair],
    resolution: Resolution,
    cfg: &MetricConfig,
    method: &str,
) -> Result<MetricReport> {
    if fused.len() != pairs.len() {
        return Err(Error::Validation(format!("{} fused images for {} pairs", fused.len(), pairs.len())));
    }
    let bands = pairs.first().map(|p| p.gt.bands()).unwrap_or(0);
    let one = |i: usize| -> Result<Vec<f64>> {
        let (f, p) = (&fused[i], &pairs[i]);
        check_resolution(f, p, resolution)?;
        let fw = widen(f);
        match resolution {
            Resolution::Reduced => reduced_metrics(fw.view(), widen(p.gt.data()).view(), cfg),
            Resolution::Full => {
                let pan = p.pan.data();
                let pd = degrade_pan(pan, p.ratio(), WaldConfig::default().mtf_gain_pan)?;
                let (pan, pd) = (widen(pan), widen(&pd));
                full_metrics(
                    fw.view(),
                    widen(p.ms.data()).view(),
                    pan.index_axis(Axis(0), 0),
                    pd.index_axis(Axis(0), 0),
                    cfg,
                )
            }
        }
    };
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(fused.len().max(1));
    let mut values: Vec<Option<Result<Vec<f64>>>> = (0..fused.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = fused.len().div_ceil(workers).max(1);
        for (w, slot) in values.chunks_mut(chunk).enumerate() {
            let one = &one;
            s.spawn(move || {
                for (j, v) in slot.iter_mut().enumerate() {
                    *v = Some(one(w * chunk + j));
                }
            });
        }
    });
    let mut report = MetricReport::new(method, resolution, resolution.metric_names(bands));
    for (i, v) in values.into_iter().enumerate() {
        report.push(&image_name(i), v.expect("every image scored")?)?;
    }
    Ok(report)
}

fn check_resolution(fused: &Array3<f32>, pair: &SamplePair, resolution: Resolution) -> Result<()> {
    let (c, h, w) = fused.dim();
    let ok = c == pair.gt.bands()
        && match resolution {
            Resolution::Reduced => (h, w) == (pair.gt.height(), pair.gt.width()),
            Resolution::Full => (h, w) == (pair.ms.height() * pair.ratio(), pair.ms.width() * pair.ratio()),
        };
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "fused {c}x{h}x{w} does not match the {} dataset geometry",
            resolution.tag()
        )))
    }
}

/// Records which split an evaluation directory was computed on.
pub const EVAL_META: &str = "eval_meta.txt";

/// Split recorded in an evaluation directory.
pub fn eval_split(dir: &Path) -> Result<Split> {
    let p = dir.join(EVAL_META);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("split = "))
        .ok_or_else(|| Error::format("evaluation metadata", "no split line"))?
        .trim()
        .parse()
}

pub fn image_name(i: usize) -> String {
    format!("img{i:03}")
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub baseline: MetricReport,
    pub out_dir: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fused images of `method` on `split`, metrics at `resolution` and the EXP
/// baseline; writes `<method>_<RR|FR>.csv`, `exp_<RR|FR>.csv`,
/// `<method>_<RR|FR>_fused.arr` and `summary.txt` under `out_dir`.
pub fn evaluate(
    cfg: &FoseConfig,
    method: Method,
    resolution: Resolution,
    split: Split,
    out_dir: &Path,
    opts: InferenceOptions,
) -> Result<Evaluation> {
    let pairs = load_split(cfg, split)?;
    let [_, lms, pan] = stack_pairs(&pairs)?;
    models::ensure_dir(out_dir)?;
    let tag = resolution.tag();
    let run = |m: Method| -> Result<MetricReport> {
        let fused = tensor_images(&fuse(cfg, m, &lms, &pan, opts)?)?;
        let (c, h, w) = fused[0].dim();
        let flat: Vec<f32> = fused.iter().flat_map(|a| a.iter().copied()).collect();
        write_array(&out_dir.join(format!("{m}_{tag}_fused.arr")), [fused.len(), c, h, w], &flat)?;
        let report = score(&fused, &pairs, resolution, &cfg.metrics, &m.to_string())?;
        write_text(&out_dir.join(format!("{m}_{tag}.csv")), &report.to_csv())?;
        Ok(report)
    };
    let baseline = run(Method::Exp)?;
    let report = if method == Method::Exp { baseline.clone() } else { run(method)? };
    let summary = format!(
        "split {split}, {} images, config {}\n{}\n{}\n",
        pairs.len(),
        cfg.hash(),
        report.summary_line(),
        baseline.summary_line()
    );
    write_text(&out_dir.join(format!("summary_{method}_{tag}.txt")), &summary)?;
    write_text(&out_dir.join("summary.txt"), &summary)?;
    write_text(&out_dir.join(EVAL_META), &format!("split = {split}\n"))?;
    log::info!("{}", report.summary_line());
    Ok(Evaluation {
        report,
        baseline,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Reads fused images written by [`evaluate`].
pub fn read_fused(path: &Path) -> Result<Vec<Array3<f32>>> {
    let ([n, c, h, w], data) = read_array(path)?;
    let per = c * h * w;
    (0..n)
        .map(|i| {
            Array3::from_shape_vec((c, h, w), data[i * per..(i + 1) * per].to_vec())
                .map_err(|e| Error::Dimension(e.to_string()))
        })
        .collect()
}
