//! Reduced-resolution (SAM, ERGAS, Q2n, SCC) and full-resolution
//! (D_lambda, D_s, HQNR) quality indices.

mod quality;

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView2, ArrayView3};

pub use quality::{
    d_lambda, d_s, ergas, hqnr, hyper_conj, hyper_mul, q2n, sam, scc, uiqi, uiqi_blocks, widen,
};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub ratio: usize,
    pub q_block: usize,
    /// Exponent of the spectral distortion.
    pub p: f64,
    /// Exponent of the spatial distortion.
    pub q: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ratio: 4,
            q_block: 32,
            p: 1.0,
            q: 1.0,
        }
    }
}

impl MetricConfig {
    /// Block sizes at full and at reduced resolution.
    pub fn block_sizes(&self) -> Result<(usize, usize)> {
        if self.ratio == 0 || self.q_block == 0 || self.q_block % self.ratio != 0 {
            return Err(Error::Metric(format!(
                "q_block {} must be a positive multiple of ratio {}",
                self.q_block, self.ratio
            )));
        }
        if self.p <= 0.0 || self.q <= 0.0 {
            return Err(Error::Metric("distortion exponents must be positive".into()));
        }
        Ok((self.q_block, self.q_block / self.ratio))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Reduced,
    Full,
}

impl Resolution {
    pub fn tag(self) -> &'static str {
        match self {
            Resolution::Reduced => "RR",
            Resolution::Full => "FR",
        }
    }

    pub fn metric_names(self, bands: usize) -> Vec<String> {
        match self {
            Resolution::Reduced => vec!["SAM".into(), "ERGAS".into(), format!("Q{bands}"), "SCC".into()],
            Resolution::Full => vec!["D_lambda".into(), "D_s".into(), "HQNR".into()],
        }
    }
}

impl FromStr for Resolution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reduced" | "rr" => Ok(Resolution::Reduced),
            "full" | "fr" => Ok(Resolution::Full),
            _ => Err(Error::InvalidArgument(format!("unknown resolution `{s}`"))),
        }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resolution::Reduced => "reduced",
            Resolution::Full => "full",
        })
    }
}

/// `[SAM, ERGAS, Q2n, SCC]` of a fused image against its reference.
pub fn reduced_metrics(fused: ArrayView3<f64>, gt: ArrayView3<f64>, cfg: &MetricConfig) -> Result<Vec<f64>> {
    Ok(vec![
        sam(fused, gt)?,
        ergas(fused, gt, cfg.ratio)?,
        q2n(fused, gt, cfg)?,
        scc(fused, gt)?,
    ])
}

/// `[D_lambda, D_s, HQNR]` of a fused image against its MS and PAN inputs.
pub fn full_metrics(
    fused: ArrayView3<f64>,
    ms: ArrayView3<f64>,
    pan: ArrayView2<f64>,
    pan_degraded: ArrayView2<f64>,
    cfg: &MetricConfig,
) -> Result<Vec<f64>> {
    let dl = d_lambda(fused, ms, cfg)?;
    let ds = d_s(fused, ms, pan, pan_degraded, cfg)?;
    Ok(vec![dl, ds, hqnr(dl, ds)])
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn format_mean_std(m: f64, s: f64) -> String {
    format!("{m:.4}±{s:.4}")
}

/// Per-image metric rows for one method at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub resolution: Resolution,
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MetricReport {
    pub fn new(method: &str, resolution: Resolution, names: Vec<String>) -> Self {
        Self {
            method: method.to_string(),
            resolution,
            names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, image: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.names.len() {
            return Err(Error::Metric(format!(
                "{} values for {} metrics",
                values.len(),
                self.names.len()
            )));
        }
        self.rows.push((image.to_string(), values));
        Ok(())
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|(_, v)| v[k]).collect()
    }

    /// `(mean, std)` per metric.
    pub fn aggregate(&self) -> Vec<(f64, f64)> {
        (0..self.names.len()).map(|k| mean_std(&self.column(k))).collect()
    }

    pub fn mean_of(&self, name: &str) -> Option<f64> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(mean_std(&self.column(k)).0)
    }

    /// One row per image plus a final `mean±std` row. Per-image values use
    /// the shortest round-trip representation.
    pub fn to_csv(&self) -> String {
        let mut out = format!("image,{}\n", self.names.join(","));
        for (img, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{img},{}\n", cells.join(",")));
        }
        let agg: Vec<String> = self.aggregate().iter().map(|(m, s)| format_mean_std(*m, *s)).collect();
        out.push_str(&format!("aggregate,{}\n", agg.join(",")));
        out
    }

    pub fn from_csv(method: &str, resolution: Resolution, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("metric csv", "empty file"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("image") {
            return Err(Error::format("metric csv", "header must start with `image`"));
        }
        let mut report = Self::new(method, resolution, cols.map(str::to_string).collect());
        for line in lines {
            let mut cells = line.split(',');
            let img = cells.next().unwrap_or_default();
            if img == "aggregate" {
                continue;
            }
            let vals = cells
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format("metric csv", format!("row `{img}`: {e}")))?;
            report.push(img, vals)?;
        }
        Ok(report)
    }

    /// `method [RR] SAM 2.7830±0.5040 ...`
    pub fn summary_line(&self) -> String {
        let parts: Vec<String> = self
            .names
            .iter()
            .zip(self.aggregate())
            .map(|(n, (m, s))| format!("{n} {}", format_mean_std(m, s)))
            .collect();
        format!("{} [{}] {}", self.method, self.resolution.tag(), parts.join(" "))
    }
}
