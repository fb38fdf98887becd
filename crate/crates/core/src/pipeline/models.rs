use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::FoseConfig;
use crate::denoiser::Denoiser;
use crate::diffusion::{
    make_linear_schedule, sample_multistep, sample_onestep, InitNoise, NoiseSchedule, SamplerConfig,
};
use crate::e2e::E2ENet;
use crate::ensemble::Connector;
use crate::nn::{Builder, ParamStore};
use crate::{Error, Result};

pub const LAST: &str = "last.ckpt";
pub const BEST: &str = "best.ckpt";

pub fn schedule(cfg: &FoseConfig) -> Result<NoiseSchedule> {
    make_linear_schedule(cfg.model.diffusion_steps, cfg.model.beta_start, cfg.model.beta_end)
}

pub fn checkpoint_path(cfg: &FoseConfig, stage: u8) -> PathBuf {
    cfg.stage_dir(stage).join(LAST)
}

/// Loads the final checkpoint of `stage`, warning when it was produced under
/// a different configuration.
pub fn load_stage(cfg: &FoseConfig, stage: u8) -> Result<(Checkpoint, PathBuf)> {
    let path = checkpoint_path(cfg, stage);
    if !path.exists() {
        return Err(Error::Prerequisite {
            stage,
            missing: vec![stage],
        });
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.stage()? != stage {
        return Err(Error::format("checkpoint", format!("{} is not a stage-{stage} checkpoint", path.display())));
    }
    if ckpt.get("config_hash")? != cfg.hash() {
        log::warn!("{} was written under a different configuration", path.display());
    }
    Ok((ckpt, path))
}

pub(crate) fn routing_to_text(state: &[Option<(usize, usize)>]) -> String {
    let parts: Vec<String> = state
        .iter()
        .map(|s| match s {
            Some((h, w)) => format!("{h}x{w}"),
            None => "-".into(),
        })
        .collect();
    parts.join(",")
}

pub(crate) fn routing_from_text(text: &str) -> Result<Vec<Option<(usize, usize)>>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|p| {
            if p == "-" {
                return Ok(None);
            }
            let (h, w) = p
                .split_once('x')
                .ok_or_else(|| Error::format("routing state", p.to_string()))?;
            let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format("routing state", p.to_string()));
            Ok(Some((parse(h)?, parse(w)?)))
        })
        .collect()
}

fn rebuild_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Denoiser whose parameters come entirely from `store`.
pub fn denoiser_from_store(cfg: &FoseConfig, store: &mut ParamStore, routing: &str) -> Result<Denoiser> {
    let before = store.len();
    let mut rng = rebuild_rng();
    let mut m = Denoiser::new(&mut Builder::new(store, &mut rng), &cfg.model.denoiser)?;
    if store.len() != before {
        return Err(Error::format("checkpoint", "denoiser weights do not match the configured architecture"));
    }
    m.set_routing_state(&routing_from_text(routing)?)?;
    Ok(m)
}

pub fn e2e_from_store(cfg: &FoseConfig, store: &mut ParamStore) -> Result<E2ENet> {
    let before = store.len();
    let mut rng = rebuild_rng();
    let m = E2ENet::new(&mut Builder::new(store, &mut rng), &cfg.model.e2e)?;
    if store.len() != before {
        return Err(Error::format("checkpoint", "e2e weights do not match the configured architecture"));
    }
    Ok(m)
}

pub fn connector_from_store(cfg: &FoseConfig, store: &mut ParamStore) -> Result<Connector> {
    let before = store.len();
    let mut rng = rebuild_rng();
    let m = Connector::new(&mut Builder::new(store, &mut rng), &cfg.model.connector)?;
    if store.len() != before {
        return Err(Error::format("checkpoint", "connector weights do not match the configured architecture"));
    }
    Ok(m)
}

/// A model with the store that owns its parameters.
#[derive(Debug)]
pub struct Loaded<M> {
    pub store: ParamStore,
    pub model: M,
}

pub fn load_teacher(cfg: &FoseConfig) -> Result<(Loaded<Denoiser>, PathBuf)> {
    let (ckpt, path) = load_stage(cfg, 1)?;
    let mut store = ckpt.load_store("denoiser", DType::F32)?;
    store.freeze_all();
    let model = denoiser_from_store(cfg, &mut store, ckpt.get("routing")?)?;
    Ok((Loaded { store, model }, path))
}

/// Merged one-step student.
pub fn load_osd(cfg: &FoseConfig) -> Result<(Loaded<Denoiser>, PathBuf)> {
    let (ckpt, path) = load_stage(cfg, 2)?;
    let mut store = ckpt.load_store("merged", DType::F32)?;
    store.freeze_all();
    let model = denoiser_from_store(cfg, &mut store, ckpt.get("routing")?)?;
    Ok((Loaded { store, model }, path))
}

pub fn load_e2e(cfg: &FoseConfig) -> Result<(Loaded<E2ENet>, PathBuf)> {
    let (ckpt, path) = load_stage(cfg, 3)?;
    let mut store = ckpt.load_store("e2e", DType::F32)?;
    store.freeze_all();
    let model = e2e_from_store(cfg, &mut store)?;
    Ok((Loaded { store, model }, path))
}

pub fn load_connector(cfg: &FoseConfig) -> Result<(Loaded<Connector>, PathBuf)> {
    let (ckpt, path) = load_stage(cfg, 4)?;
    let mut store = ckpt.load_store("connector", DType::F32)?;
    store.freeze_all();
    let model = connector_from_store(cfg, &mut store)?;
    Ok((Loaded { store, model }, path))
}

/// Runs `f` over consecutive chunks of the batch dimension and concatenates.
pub fn chunked<F>(n: usize, chunk: usize, mut f: F) -> Result<Tensor>
where
    F: FnMut(usize, usize) -> Result<Tensor>,
{
    let mut outs = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        outs.push(f(start, len)?);
        start += len;
    }
    Ok(Tensor::cat(&outs, 0)?)
}

pub const EVAL_CHUNK: usize = 4;

/// Multi-step sampling with the teacher; returns clipped images.
pub fn dm_images(
    teacher: &Denoiser,
    lms: &Tensor,
    pan: &Tensor,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n = lms.dims()[0];
    chunked(n, EVAL_CHUNK, |s, len| {
        let (l, p) = (lms.narrow(0, s, len)?, pan.narrow(0, s, len)?);
        let mut pred = |x: &Tensor, t: usize| teacher.forward(x, &l, &p, &vec![t; len]);
        let r = sample_multistep(&mut pred, l.shape(), l.dtype(), l.device(), sched, sampler, rng)?;
        Ok((r + &l)?.clamp(0.0, 1.0)?)
    })
}

/// One student call per image; returns clipped images.
pub fn osd_images(
    student: &Denoiser,
    lms: &Tensor,
    pan: &Tensor,
    init: InitNoise,
    t_infer: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n = lms.dims()[0];
    chunked(n, EVAL_CHUNK, |s, len| {
        let (l, p) = (lms.narrow(0, s, len)?, pan.narrow(0, s, len)?);
        let mut pred = |x: &Tensor, t: usize| student.forward(x, &l, &p, &vec![t; len]);
        let r = sample_onestep(&mut pred, l.shape(), l.dtype(), l.device(), init, t_infer, rng)?;
        Ok((r + &l)?.clamp(0.0, 1.0)?)
    })
}

pub fn e2e_images(net: &E2ENet, lms: &Tensor, pan: &Tensor) -> Result<Tensor> {
    let n = lms.dims()[0];
    chunked(n, EVAL_CHUNK, |s, len| net.forward(&lms.narrow(0, s, len)?, &pan.narrow(0, s, len)?))
}

pub fn connector_images(c: &Connector, y_osd: &Tensor, y_e2e: &Tensor) -> Result<Tensor> {
    let n = y_osd.dims()[0];
    chunked(n, EVAL_CHUNK, |s, len| {
        c.forward(&y_osd.narrow(0, s, len)?, &y_e2e.narrow(0, s, len)?, false)
    })
}

/// Noise generator used at inference for a given seed.
pub fn inference_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_1AF)
}

pub fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_text_round_trip() {
        let s = vec![Some((3, 5)), None, Some((1, 7))];
        let t = routing_to_text(&s);
        assert_eq!(t, "3x5,-,1x7");
        assert_eq!(routing_from_text(&t).unwrap(), s);
        assert!(routing_from_text("").unwrap().is_empty());
        assert!(routing_from_text("3y5").is_err());
    }
}
