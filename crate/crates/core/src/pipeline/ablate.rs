use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::config::FoseConfig;
use super::cost::count_cost;
use super::eval::{evaluate, InferenceOptions, Method};
use super::models::checkpoint_path;
use super::train::{run_stage, RunOptions};
use crate::diffusion::InitNoise;
use crate::metrics::{format_mean_std, MetricReport, Resolution};
use crate::raster::Split;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Depth,
    Noise,
    Structure,
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::Depth => "depth",
            AblationKind::Noise => "noise",
            AblationKind::Structure => "structure",
        })
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(AblationKind::Depth),
            "noise" => Ok(AblationKind::Noise),
            "structure" => Ok(AblationKind::Structure),
            other => Err(Error::InvalidArgument(format!("unknown ablation `{other}`"))),
        }
    }
}

/// Comparison table; `None` cells are gaps printed as `-`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

impl Table {
    pub fn new(title: &str, columns: Vec<String>) -> Self {
        Self {
            title: title.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Option<String>>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::InvalidArgument(format!(
                "row has {} cells for {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        let k = self.columns.iter().position(|c| c == column)?;
        self.rows.get(row)?.get(k)?.as_deref()
    }

    pub fn has_gaps(&self) -> bool {
        self.rows.iter().flatten().any(Option::is_none)
    }

    fn cells(row: &[Option<String>]) -> Vec<&str> {
        row.iter().map(|c| c.as_deref().unwrap_or("-")).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",") + "\n";
        for r in &self.rows {
            s += &(Self::cells(r).join(",") + "\n");
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n| {} |\n|", self.title, self.columns.join(" | "));
        s += &" --- |".repeat(self.columns.len());
        s.push('\n');
        for r in &self.rows {
            s += &format!("| {} |\n", Self::cells(r).join(" | "));
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        super::models::ensure_dir(dir)?;
        for (ext, text) in [("csv", self.to_csv()), ("md", self.to_markdown())] {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn metric_columns(bands: usize) -> Vec<String> {
    let mut c = Resolution::Reduced.metric_names(bands);
    c.extend(Resolution::Full.metric_names(bands));
    c
}

fn metric_cells(rr: &MetricReport, fr: &MetricReport) -> Vec<Option<String>> {
    rr.aggregate()
        .into_iter()
        .chain(fr.aggregate())
        .map(|(m, s)| Some(format_mean_std(m, s)))
        .collect()
}

fn gaps(n: usize) -> Vec<Option<String>> {
    vec![None; n]
}

/// Reduced- and full-resolution evaluation of `method` on the test split.
fn both(cfg: &FoseConfig, method: Method, out: &Path, opts: InferenceOptions) -> Result<Vec<Option<String>>> {
    let rr = evaluate(cfg, method, Resolution::Reduced, Split::Test, &out.join("RR"), opts)?;
    let fr = evaluate(cfg, method, Resolution::Full, Split::Test, &out.join("FR"), opts)?;
    Ok(metric_cells(&rr.report, &fr.report))
}

fn available(cfg: &FoseConfig, method: Method) -> bool {
    match method {
        Method::Exp => true,
        Method::Fose => (2..=4).all(|s| checkpoint_path(cfg, s).exists()),
        m => m.stage().is_some_and(|s| checkpoint_path(cfg, s).exists()),
    }
}

pub const DEPTHS: [usize; 4] = [3, 4, 5, 6];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblateOptions {
    /// Inference seed for random initial noise.
    pub seed: u64,
    /// Training steps the depth ablation may spend; rows that do not fit
    /// are left as gaps.
    pub step_budget: Option<usize>,
}

/// Runs one ablation and writes `<kind>.csv` and `<kind>.md` under `out`.
pub fn ablate(cfg: &FoseConfig, kind: AblationKind, out: &Path, opts: AblateOptions) -> Result<Table> {
    let seed = opts.seed;
    let mut budget = opts.step_budget.unwrap_or(usize::MAX);
    let bands = cfg.data.bands;
    let table = match kind {
        AblationKind::Depth => {
            let mut cols = vec!["Blocks".to_string(), "Params".to_string()];
            cols.extend(metric_columns(bands));
            let mut t = Table::new("Number of blocks of the E2E model", cols);
            for blocks in DEPTHS {
                let mut c = cfg.clone();
                c.model.e2e.num_blocks = blocks;
                c.run_root = out.join(format!("depth_{blocks}"));
                let params = c.model.e2e.param_count();
                let mut row = vec![Some(blocks.to_string()), Some(params.to_string())];
                let cost = c.stage(3)?.iterations;
                if cost > budget {
                    row.extend(gaps(t.columns.len() - 2));
                } else {
                    budget -= cost;
                    run_stage(&c, 3, RunOptions::default())?;
                    let opts = InferenceOptions { init_noise: c.model.init_noise, seed };
                    row.extend(both(&c, Method::E2e, &c.run_root.join("eval"), opts)?);
                }
                t.push(row)?;
            }
            t
        }
        AblationKind::Noise => {
            let mut cols = vec!["Noise".to_string()];
            cols.extend(metric_columns(bands));
            let mut t = Table::new("Noise ablation", cols);
            for init in [InitNoise::Zero, InitNoise::Random] {
                let mut row = vec![Some(init.to_string())];
                if available(cfg, Method::Osd) {
                    let opts = InferenceOptions { init_noise: init, seed };
                    row.extend(both(cfg, Method::Osd, &out.join(format!("noise_{init}")), opts)?);
                } else {
                    row.extend(gaps(t.columns.len() - 1));
                }
                t.push(row)?;
            }
            t
        }
        AblationKind::Structure => {
            let mut cols: Vec<String> = ["Method", "Calls", "Params", "GMACs"].map(String::from).to_vec();
            cols.extend(metric_columns(bands));
            let mut t = Table::new("Structure ablation", cols);
            let size = cfg.data.gt_size;
            for m in [Method::Dm { steps: cfg.model.sampler_steps }, Method::Dm { steps: 1 }, Method::E2e, Method::Fose] {
                let cost = count_cost(cfg, m, size, size)?;
                let mut row = vec![
                    Some(m.to_string()),
                    Some(cost.invocations.to_string()),
                    Some(cost.params.to_string()),
                    Some(format!("{:.4}", cost.gmacs())),
                ];
                if available(cfg, m) {
                    let opts = InferenceOptions { init_noise: cfg.model.init_noise, seed };
                    row.extend(both(cfg, m, &out.join(format!("structure_{m}")), opts)?);
                } else {
                    row.extend(gaps(t.columns.len() - 4));
                }
                t.push(row)?;
            }
            t
        }
    };
    if table.has_gaps() {
        log::warn!("{kind} ablation is partial; missing cells are marked `-`");
    }
    table.write(out, &kind.to_string())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::train::synthesize;

    #[test]
    fn table_formats_and_gaps() {
        let mut t = Table::new("t", vec!["a".into(), "b".into()]);
        t.push(vec![Some("1".into()), None]).unwrap();
        assert!(t.push(vec![None]).is_err());
        assert_eq!(t.to_csv(), "a,b\n1,-\n");
        assert_eq!(t.to_markdown(), "### t\n\n| a | b |\n| --- | --- |\n| 1 | - |\n");
        assert!(t.has_gaps());
        assert_eq!(t.cell(0, "a"), Some("1"));
        assert_eq!(t.cell(0, "b"), None);
    }

    #[test]
    fn structure_without_checkpoints_is_partial() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = super::super::train::tests::tiny(dir.path());
        synthesize(&cfg).unwrap();
        cfg.model.sampler_steps = 50;
        let t = ablate(&cfg, AblationKind::Structure, &dir.path().join("ab"), AblateOptions::default()).unwrap();
        assert_eq!(t.rows.len(), 4);
        let calls: Vec<&str> = (0..4).map(|r| t.cell(r, "Calls").unwrap()).collect();
        assert_eq!(calls, ["50", "1", "0", "1"]);
        assert!(t.has_gaps());
        assert!(dir.path().join("ab/structure.md").exists());
    }

    #[test]
    fn depth_parameter_counts_increase() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = super::super::train::tests::tiny(dir.path());
        let opts = AblateOptions { seed: 0, step_budget: Some(0) };
        let t = ablate(&cfg, AblationKind::Depth, &dir.path().join("ab"), opts).unwrap();
        assert!(t.has_gaps());
        assert_eq!(t.rows.len(), 4);
        let p: Vec<usize> = (0..4).map(|r| t.cell(r, "Params").unwrap().parse().unwrap()).collect();
        assert!(p.windows(2).all(|w| w[0] < w[1]));
    }
}
