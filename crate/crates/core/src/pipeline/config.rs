use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::InitNoise;
use crate::e2e::{OdeScheme, OtpConfig};
use crate::ensemble::ConnectorConfig;
use crate::metrics::MetricConfig;
use crate::nn::LoraConfig;
use crate::raster::DATA_ROOT_ENV;
use crate::{Error, Result};

pub const RUN_ROOT_ENV: &str = "FOSE_RUN_ROOT";

/// Sections of `key = value` lines.
pub type RawConfig = BTreeMap<String, BTreeMap<String, String>>;

/// Parses `[section]` headers followed by `key = value` lines. `#` starts a
/// comment. Keys outside a section are rejected.
pub fn parse_raw(text: &str) -> Result<RawConfig> {
    let mut out = RawConfig::new();
    let mut section: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(Error::Config(format!("line {}: empty section name", i + 1)));
            }
            out.entry(name.clone()).or_default();
            section = Some(name);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let sec = section
            .as_ref()
            .ok_or_else(|| Error::Config(format!("line {}: key outside any section", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.get_mut(sec).expect("section").insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{sec}.{k}`", i + 1)));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    raw: &'a RawConfig,
    used: BTreeMap<(String, String), ()>,
}

impl<'a> Reader<'a> {
    fn get<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw.get(section).and_then(|s| s.get(key)) {
            Some(v) => {
                self.used.insert((section.into(), key.into()), ());
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("`{section}.{key} = {v}`: {e}")))
            }
            None => Ok(default),
        }
    }

    fn finish(self) -> Result<()> {
        for (sec, kv) in self.raw {
            for k in kv.keys() {
                if !self.used.contains_key(&(sec.clone(), k.clone())) {
                    return Err(Error::Config(format!("unknown key `{sec}.{k}`")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub bands: usize,
    pub ratio: usize,
    /// Reference (gt) size of generated scenes.
    pub gt_size: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
    /// Square training crop at reference resolution.
    pub crop: usize,
    /// Forces in-order loading on the calling thread.
    pub deterministic: bool,
    /// Bounded queue depth of the prefetch worker.
    pub prefetch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lora: LoraConfig,
    pub e2e: OtpConfig,
    pub connector: ConnectorConfig,
    pub sampler_steps: usize,
    pub init_noise: InitNoise,
    pub t_infer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub val_every: usize,
    /// Sampler steps used by stage-1 validation.
    pub val_sampler_steps: usize,
    /// Epoch at which adaptive-convolution routing is frozen (stage 1).
    pub t_freeze: Option<usize>,
}

impl StageConfig {
    pub fn defaults(stage: u8) -> Result<Self> {
        let (batch_size, learning_rate, iterations) = match stage {
            1 => (64, 1e-4, 3000),
            2 => (16, 2e-4, 2000),
            3 => (24, 5e-5, 3000),
            4 => (16, 1e-4, 1000),
            _ => return Err(Error::Config(format!("stage must be 1..=4, got {stage}"))),
        };
        Ok(Self {
            stage,
            batch_size,
            learning_rate,
            iterations,
            seed: 0,
            weight_decay: 1e-2,
            val_every: 500,
            val_sampler_steps: 10,
            t_freeze: None,
        })
    }

    /// Stages whose checkpoints must exist before this one runs.
    pub fn prerequisites(stage: u8) -> &'static [u8] {
        match stage {
            2 => &[1],
            4 => &[2, 3],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoseConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stages: [StageConfig; 4],
    pub metrics: MetricConfig,
    pub run_root: PathBuf,
}

fn env_path(var: &str, fallback: &str) -> PathBuf {
    std::env::var_os(var).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(fallback))
}

impl FoseConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader { raw, used: BTreeMap::new() };
        for sec in raw.keys() {
            let known = matches!(sec.as_str(), "data" | "model" | "eval" | "run")
                || matches!(sec.as_str(), "stage1" | "stage2" | "stage3" | "stage4");
            if !known {
                return Err(Error::Config(format!("unknown section `[{sec}]`")));
            }
        }
        let d = "data";
        let bands = r.get(d, "bands", 8usize)?;
        let data = DataConfig {
            root: r.get(d, "root", env_path(DATA_ROOT_ENV, "data"))?,
            bands,
            ratio: r.get(d, "ratio", 4)?,
            gt_size: r.get(d, "gt_size", 64)?,
            train_count: r.get(d, "train_count", 64)?,
            val_count: r.get(d, "val_count", 8)?,
            test_count: r.get(d, "test_count", 16)?,
            seed: r.get(d, "seed", 0)?,
            crop: r.get(d, "crop", 32)?,
            deterministic: r.get(d, "deterministic", true)?,
            prefetch: r.get(d, "prefetch", 2)?,
        };
        let m = "model";
        let dd = DenoiserConfig::toy(bands);
        let denoiser = DenoiserConfig {
            bands,
            base_channels: r.get(m, "base_channels", dd.base_channels)?,
            num_scales: r.get(m, "num_scales", dd.num_scales)?,
            blocks_per_scale: r.get(m, "blocks_per_scale", dd.blocks_per_scale)?,
            arconv_enabled: r.get(m, "arconv", dd.arconv_enabled)?,
            arconv_kmax: r.get(m, "arconv_kmax", dd.arconv_kmax)?,
            arconv_samples: dd.arconv_samples,
            fmim_rho: r.get(m, "fmim_rho", dd.fmim_rho)?,
            time_embed_dim: r.get(m, "time_embed_dim", dd.time_embed_dim)?,
            heads: r.get(m, "heads", dd.heads)?,
        };
        let de = OtpConfig::new(bands);
        let dc = ConnectorConfig::new(bands);
        let dl = LoraConfig::default();
        let model = ModelConfig {
            denoiser,
            diffusion_steps: r.get(m, "diffusion_steps", 1000)?,
            beta_start: r.get(m, "beta_start", 1e-4)?,
            beta_end: r.get(m, "beta_end", 2e-2)?,
            lora: LoraConfig {
                rank: r.get(m, "lora_rank", dl.rank)?,
                alpha: r.get(m, "lora_alpha", dl.alpha)?,
            },
            e2e: OtpConfig {
                bands,
                num_blocks: r.get(m, "e2e_blocks", de.num_blocks)?,
                scheme: r.get::<OdeScheme>(m, "e2e_scheme", de.scheme)?,
                step_size: r.get(m, "e2e_step_size", de.step_size)?,
                channels: r.get(m, "e2e_channels", de.channels)?,
            },
            connector: ConnectorConfig {
                bands,
                num_blocks: r.get(m, "connector_blocks", dc.num_blocks)?,
                hidden_channels: r.get(m, "connector_hidden", dc.hidden_channels)?,
            },
            sampler_steps: r.get(m, "sampler_steps", 50)?,
            init_noise: r.get::<InitNoise>(m, "init_noise", InitNoise::Zero)?,
            t_infer: r.get(m, "t_infer", crate::distill::T_MAX)?,
        };
        let mut stages = Vec::new();
        for k in 1..=4u8 {
            let s = format!("stage{k}");
            let def = StageConfig::defaults(k)?;
            let t_freeze: Option<usize> = match r.get::<String>(&s, "t_freeze", String::new())? {
                v if v.is_empty() || v == "auto" => None,
                v => Some(v.parse().map_err(|e| Error::Config(format!("`{s}.t_freeze`: {e}")))?),
            };
            stages.push(StageConfig {
                stage: k,
                batch_size: r.get(&s, "batch_size", def.batch_size)?,
                learning_rate: r.get(&s, "learning_rate", def.learning_rate)?,
                iterations: r.get(&s, "iterations", def.iterations)?,
                seed: r.get(&s, "seed", def.seed)?,
                weight_decay: r.get(&s, "weight_decay", def.weight_decay)?,
                val_every: r.get(&s, "val_every", def.val_every)?,
                val_sampler_steps: r.get(&s, "val_sampler_steps", def.val_sampler_steps)?,
                t_freeze,
            });
        }
        let dm = MetricConfig::default();
        let metrics = MetricConfig {
            ratio: data.ratio,
            q_block: r.get("eval", "q_block", dm.q_block)?,
            p: r.get("eval", "p", dm.p)?,
            q: r.get("eval", "q", dm.q)?,
        };
        let run_root = r.get("run", "root", env_path(RUN_ROOT_ENV, "runs"))?;
        r.finish()?;
        let cfg = Self {
            data,
            model,
            stages: stages.try_into().expect("four stages"),
            metrics,
            run_root,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&parse_raw(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn stage(&self, k: u8) -> Result<&StageConfig> {
        self.stages
            .get((k as usize).wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("stage must be 1..=4, got {k}")))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.ratio < 2 || d.gt_size % d.ratio != 0 {
            return Err(Error::Config(format!("gt_size {} must be a multiple of ratio {}", d.gt_size, d.ratio)));
        }
        if d.crop == 0 || d.crop > d.gt_size {
            return Err(Error::Config(format!("crop {} must lie in [1, gt_size]", d.crop)));
        }
        if d.train_count == 0 || d.test_count == 0 {
            return Err(Error::Config("train_count and test_count must be positive".into()));
        }
        self.model.denoiser.validate()?;
        let mult = self.model.denoiser.size_multiple();
        if d.crop % mult != 0 || d.gt_size % mult != 0 {
            return Err(Error::Config(format!("crop and gt_size must be multiples of {mult}")));
        }
        self.model.e2e.validate()?;
        self.model.connector.validate()?;
        let m = &self.model;
        if !(0.0 < m.beta_start && m.beta_start <= m.beta_end && m.beta_end < 1.0) {
            return Err(Error::Config("need 0 < beta_start <= beta_end < 1".into()));
        }
        if m.sampler_steps == 0 || m.sampler_steps > m.diffusion_steps {
            return Err(Error::Config("sampler_steps must lie in [1, diffusion_steps]".into()));
        }
        if !(crate::distill::T_MIN..=crate::distill::T_MAX).contains(&m.t_infer) || m.t_infer > m.diffusion_steps {
            return Err(Error::Config(format!("t_infer {} outside the student range", m.t_infer)));
        }
        if m.lora.rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        for s in &self.stages {
            if s.batch_size == 0 || s.iterations == 0 || s.val_every == 0 {
                return Err(Error::Config(format!("stage{}: batch_size, iterations, val_every must be positive", s.stage)));
            }
            if !(s.learning_rate > 0.0) || s.weight_decay < 0.0 {
                return Err(Error::Config(format!("stage{}: bad learning rate or weight decay", s.stage)));
            }
        }
        self.metrics.block_sizes()?;
        Ok(())
    }

    /// Every effective setting, sorted by section and key.
    pub fn canonical(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let dn = &m.denoiser;
        let mut out = String::new();
        let mut sec = |name: &str, kv: Vec<(&str, String)>| {
            let _ = writeln!(out, "[{name}]");
            let mut kv = kv;
            kv.sort_by(|a, b| a.0.cmp(b.0));
            for (k, v) in kv {
                let _ = writeln!(out, "{k} = {v}");
            }
        };
        sec(
            "data",
            vec![
                ("root", d.root.display().to_string()),
                ("bands", d.bands.to_string()),
                ("ratio", d.ratio.to_string()),
                ("gt_size", d.gt_size.to_string()),
                ("train_count", d.train_count.to_string()),
                ("val_count", d.val_count.to_string()),
                ("test_count", d.test_count.to_string()),
                ("seed", d.seed.to_string()),
                ("crop", d.crop.to_string()),
                ("deterministic", d.deterministic.to_string()),
                ("prefetch", d.prefetch.to_string()),
            ],
        );
        sec("eval", vec![
            ("q_block", self.metrics.q_block.to_string()),
            ("p", self.metrics.p.to_string()),
            ("q", self.metrics.q.to_string()),
        ]);
        sec(
            "model",
            vec![
                ("base_channels", dn.base_channels.to_string()),
                ("num_scales", dn.num_scales.to_string()),
                ("blocks_per_scale", dn.blocks_per_scale.to_string()),
                ("arconv", dn.arconv_enabled.to_string()),
                ("arconv_kmax", dn.arconv_kmax.to_string()),
                ("fmim_rho", dn.fmim_rho.to_string()),
                ("time_embed_dim", dn.time_embed_dim.to_string()),
                ("heads", dn.heads.to_string()),
                ("diffusion_steps", m.diffusion_steps.to_string()),
                ("beta_start", m.beta_start.to_string()),
                ("beta_end", m.beta_end.to_string()),
                ("lora_rank", m.lora.rank.to_string()),
                ("lora_alpha", m.lora.alpha.to_string()),
                ("e2e_blocks", m.e2e.num_blocks.to_string()),
                ("e2e_scheme", m.e2e.scheme.to_string()),
                ("e2e_step_size", m.e2e.step_size.to_string()),
                ("e2e_channels", m.e2e.channels.to_string()),
                ("connector_blocks", m.connector.num_blocks.to_string()),
                ("connector_hidden", m.connector.hidden_channels.to_string()),
                ("sampler_steps", m.sampler_steps.to_string()),
                ("init_noise", m.init_noise.to_string()),
                ("t_infer", m.t_infer.to_string()),
            ],
        );
        sec("run", vec![("root", self.run_root.display().to_string())]);
        for s in &self.stages {
            sec(
                &format!("stage{}", s.stage),
                vec![
                    ("batch_size", s.batch_size.to_string()),
                    ("learning_rate", s.learning_rate.to_string()),
                    ("iterations", s.iterations.to_string()),
                    ("seed", s.seed.to_string()),
                    ("weight_decay", s.weight_decay.to_string()),
                    ("val_every", s.val_every.to_string()),
                    ("val_sampler_steps", s.val_sampler_steps.to_string()),
                    ("t_freeze", s.t_freeze.map(|v| v.to_string()).unwrap_or_else(|| "auto".into())),
                ],
            );
        }
        out
    }

    /// SHA-256 of [`FoseConfig::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn stage_dir(&self, stage: u8) -> PathBuf {
        self.run_root.join(format!("stage{stage}"))
    }
}

impl Default for FoseConfig {
    fn default() -> Self {
        Self::from_raw(&RawConfig::new()).expect("defaults are valid")
    }
}
