use std::fmt::Write as _;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{file_hash, Checkpoint};
use super::config::{FoseConfig, StageConfig};
use super::data::{stack_pairs, BatchStream, TrainData};
use super::models::{
    self, checkpoint_path, connector_images, e2e_images, osd_images,
    routing_to_text, schedule, Loaded, BEST, LAST,
};
use crate::denoiser::{freeze_arconv_routing, Denoiser};
use crate::diffusion::{randn_like, SamplerConfig};
use crate::distill::{self, init_student, merge_adapters, DistillBatch, Student};
use crate::e2e::E2ENet;
use crate::ensemble::Connector;
use crate::metrics::{sam, widen};
use crate::nn::{cosine_lr, AdamW, AdamWConfig, Builder, ParamStore};
use crate::raster::{
    generate_synthetic_scene, load_dataset, save_dataset, wald_degrade, DatasetManifest, SamplePair, Split,
    WaldConfig,
};
use crate::{Error, Result};

/// Seed of scene `index` in `split` for dataset seed `seed`.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let s = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    seed.wrapping_mul(1_000_003).wrapping_add(s << 40).wrapping_add(index as u64)
}

/// Generates and writes the train, val and test splits.
pub fn synthesize(cfg: &FoseConfig) -> Result<Vec<PathBuf>> {
    let d = &cfg.data;
    let sensor = crate::raster::Sensor::for_bands(d.bands)?;
    let wald = WaldConfig {
        ratio: d.ratio,
        ..WaldConfig::default()
    };
    let mut dirs = Vec::new();
    for (split, count) in [(Split::Train, d.train_count), (Split::Val, d.val_count), (Split::Test, d.test_count)] {
        if count == 0 {
            continue;
        }
        let pairs = (0..count)
            .map(|i| {
                let (gt, pan) = generate_synthetic_scene(scene_seed(d.seed, split, i), d.bands, d.gt_size, d.gt_size, d.ratio)?;
                wald_degrade(&gt, &pan, &wald)
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            sensor,
            bands: d.bands,
            ratio: d.ratio,
            count,
            split,
            seed: d.seed,
        };
        dirs.push(save_dataset(&pairs, &manifest, &d.root)?);
    }
    Ok(dirs)
}

pub fn load_split(cfg: &FoseConfig, split: Split) -> Result<Vec<SamplePair>> {
    let (pairs, manifest) = load_dataset(&cfg.data.root.join(split.to_string()))?;
    if manifest.bands != cfg.data.bands || manifest.ratio != cfg.data.ratio {
        return Err(Error::Validation(format!(
            "{split} split has {} bands at ratio {}, config expects {} at {}",
            manifest.bands, manifest.ratio, cfg.data.bands, cfg.data.ratio
        )));
    }
    Ok(pairs)
}

fn load_split_optional(cfg: &FoseConfig, split: Split) -> Result<Vec<SamplePair>> {
    if cfg.data.root.join(split.to_string()).join("manifest.txt").exists() {
        load_split(cfg, split)
    } else {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from the stage's last checkpoint when present.
    pub resume: bool,
    /// Stop (and checkpoint) once this many total steps have run.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: u8,
    pub checkpoint: PathBuf,
    pub hash: String,
    pub losses: Vec<f64>,
    /// `(step, mean validation SAM)`.
    pub validation: Vec<(usize, f64)>,
    pub final_step: usize,
}

impl StageOutcome {
    /// Mean loss over the first and over the last `max(1, n / 20)` steps.
    pub fn loss_window(&self) -> (f64, f64) {
        loss_window(&self.losses)
    }
}

pub fn loss_window(losses: &[f64]) -> (f64, f64) {
    if losses.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let w = (losses.len() / 20).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..w]), mean(&losses[losses.len() - w..]))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

fn mean_sam(fused: &Tensor, gt: &Tensor) -> Result<f64> {
    let n = gt.dims()[0];
    let mut total = 0.0;
    for i in 0..n {
        let f = widen(&super::data::tensor_image(fused, i)?);
        let g = widen(&super::data::tensor_image(gt, i)?);
        total += sam(f.view(), g.view())?;
    }
    Ok(total / n as f64)
}

/// Bookkeeping shared by the four training loops.
struct Tracker<'a> {
    cfg: &'a FoseConfig,
    sc: &'a StageConfig,
    dir: PathBuf,
    losses: Vec<f64>,
    validation: Vec<(usize, f64)>,
    best: f64,
    prereqs: Vec<(u8, String)>,
}

impl<'a> Tracker<'a> {
    fn new(cfg: &'a FoseConfig, stage: u8, prereqs: Vec<(u8, String)>) -> Result<Self> {
        Ok(Self {
            cfg,
            sc: cfg.stage(stage)?,
            dir: cfg.stage_dir(stage),
            losses: Vec::new(),
            validation: Vec::new(),
            best: f64::INFINITY,
            prereqs,
        })
    }

    fn base_checkpoint(&self, step: usize) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.sc.stage, step, self.cfg.canonical(), &self.cfg.hash());
        c.set("seed", self.sc.seed);
        c.set("iterations", self.sc.iterations);
        c.set(
            "schedule",
            format!(
                "linear {} {} {}",
                self.cfg.model.diffusion_steps, self.cfg.model.beta_start, self.cfg.model.beta_end
            ),
        );
        c.set("rng", format!("chacha8 sha256(seed, stage, step) next_step={step}"));
        let pre: Vec<String> = self.prereqs.iter().map(|(s, h)| format!("stage{s}:{h}")).collect();
        c.set("prerequisites", pre.join(","));
        Ok(c)
    }

    fn restore(&mut self, c: &Checkpoint) -> Result<usize> {
        self.losses = c.blob("hist/loss")?.to_vec1::<f64>()?;
        let vs = c.blob("hist/val_step")?.to_vec1::<f64>()?;
        let vv = c.blob("hist/val_sam")?.to_vec1::<f64>()?;
        self.validation = vs.into_iter().map(|s| s as usize).zip(vv).collect();
        self.best = c.parse("best_val_sam")?;
        c.step()
    }

    fn record(&mut self, step: usize, term: &str, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite { term: term.into(), step });
        }
        self.losses.push(loss);
        Ok(())
    }

    fn is_checkpoint_step(&self, done: usize, opts: &RunOptions) -> bool {
        done % self.sc.val_every == 0 || done == self.sc.iterations || opts.stop_after == Some(done)
    }

    /// Saves `last` (and `best` when validation improved); returns the hash
    /// of `last`.
    fn save(&mut self, ckpt: &Checkpoint, val: Option<f64>) -> Result<String> {
        if let Some(v) = val {
            let step = ckpt.step()?;
            self.validation.push((step, v));
            log::info!("stage {} step {step}: validation SAM {v:.4}", self.sc.stage);
        }
        let improved = matches!(val, Some(v) if v < self.best);
        if improved {
            self.best = val.unwrap();
        }
        let mut ckpt = ckpt.clone();
        ckpt.set("best_val_sam", self.best);
        ckpt.push("hist/loss", None, &Tensor::new(self.losses.as_slice(), &Device::Cpu)?)?;
        let vs: Vec<f64> = self.validation.iter().map(|v| v.0 as f64).collect();
        let vv: Vec<f64> = self.validation.iter().map(|v| v.1).collect();
        ckpt.push("hist/val_step", None, &Tensor::new(vs.as_slice(), &Device::Cpu)?)?;
        ckpt.push("hist/val_sam", None, &Tensor::new(vv.as_slice(), &Device::Cpu)?)?;
        let hash = ckpt.save(&self.dir.join(LAST))?;
        if improved {
            ckpt.save(&self.dir.join(BEST))?;
        }
        Ok(hash)
    }

    fn finish(self, hash: String, final_step: usize) -> Result<StageOutcome> {
        let mut csv = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l}");
        }
        let p = self.dir.join("losses.csv");
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        let mut csv = String::from("step,val_sam\n");
        for (s, v) in &self.validation {
            let _ = writeln!(csv, "{s},{v}");
        }
        let p = self.dir.join("validation.csv");
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        Ok(StageOutcome {
            stage: self.sc.stage,
            checkpoint: self.dir.join(LAST),
            hash,
            losses: self.losses,
            validation: self.validation,
            final_step,
        })
    }
}

fn check_prerequisites(cfg: &FoseConfig, stage: u8) -> Result<Vec<(u8, String)>> {
    let need = StageConfig::prerequisites(stage);
    let missing: Vec<u8> = need.iter().copied().filter(|s| !checkpoint_path(cfg, *s).exists()).collect();
    if !missing.is_empty() {
        return Err(Error::Prerequisite { stage, missing });
    }
    need.iter().map(|s| Ok((*s, file_hash(&checkpoint_path(cfg, *s))?))).collect()
}

fn resume_checkpoint(cfg: &FoseConfig, stage: u8, opts: &RunOptions) -> Result<Option<Checkpoint>> {
    let p = checkpoint_path(cfg, stage);
    if opts.resume && p.exists() {
        let c = Checkpoint::load(&p)?;
        if c.get("config_hash")? != cfg.hash() {
            return Err(Error::Config(format!("{} was written under a different configuration", p.display())));
        }
        return Ok(Some(c));
    }
    Ok(None)
}

fn optimizer(sc: &StageConfig, ckpt: Option<&Checkpoint>) -> Result<AdamW> {
    let mut opt = AdamW::new(AdamWConfig {
        lr: sc.learning_rate,
        weight_decay: sc.weight_decay,
        ..AdamWConfig::default()
    });
    if let Some(c) = ckpt {
        opt.load_state(c.parse("opt_steps")?, c.aux("opt"))?;
    }
    Ok(opt)
}

fn push_optimizer(c: &mut Checkpoint, opt: &AdamW) -> Result<()> {
    c.set("opt_steps", opt.steps_taken());
    for (n, t) in opt.state() {
        c.push(&format!("opt/{n}"), None, &t)?;
    }
    Ok(())
}

fn train_tensors(cfg: &FoseConfig) -> Result<[Tensor; 3]> {
    stack_pairs(&load_split(cfg, Split::Train)?)
}

fn stream(cfg: &FoseConfig, sc: &StageConfig, parts: Vec<Tensor>, start: usize) -> Result<BatchStream> {
    Ok(BatchStream::new(
        TrainData::new(parts, cfg.data.crop)?,
        sc.batch_size,
        sc.seed,
        sc.stage,
        start,
        sc.iterations,
        cfg.data.deterministic,
        cfg.data.prefetch,
    ))
}

/// Trains one stage and writes its checkpoints under the run root.
pub fn run_stage(cfg: &FoseConfig, stage: u8, opts: RunOptions) -> Result<StageOutcome> {
    cfg.stage(stage)?;
    let prereqs = check_prerequisites(cfg, stage)?;
    models::ensure_dir(&cfg.stage_dir(stage))?;
    match stage {
        1 => stage1(cfg, prereqs, opts),
        2 => stage2(cfg, prereqs, opts),
        3 => stage3(cfg, prereqs, opts),
        _ => stage4(cfg, prereqs, opts),
    }
}

fn val_tensors(cfg: &FoseConfig) -> Result<Option<[Tensor; 3]>> {
    let v = load_split_optional(cfg, Split::Val)?;
    if v.is_empty() {
        Ok(None)
    } else {
        Ok(Some(stack_pairs(&v)?))
    }
}

fn usage_blobs(c: &mut Checkpoint, model: &Denoiser) -> Result<()> {
    for (i, u) in model.routing_usage().iter().enumerate() {
        let v: Vec<f64> = u.iter().map(|x| *x as f64).collect();
        c.push(&format!("usage/{i}"), None, &Tensor::new(v.as_slice(), &Device::Cpu)?)?;
    }
    Ok(())
}

fn restore_usage(c: &Checkpoint, model: &Denoiser) -> Result<()> {
    let n = model.routing_usage().len();
    let mut all = Vec::with_capacity(n);
    for i in 0..n {
        let v = c.blob(&format!("usage/{i}"))?.to_vec1::<f64>()?;
        all.push(v.into_iter().map(|x| x as u64).collect());
    }
    model.set_routing_usage(&all)
}

fn stage1(cfg: &FoseConfig, prereqs: Vec<(u8, String)>, opts: RunOptions) -> Result<StageOutcome> {
    let sc = cfg.stage(1)?;
    let sched = schedule(cfg)?;
    let resume = resume_checkpoint(cfg, 1, &opts)?;
    let mut tr = Tracker::new(cfg, 1, prereqs)?;
    let (mut store, start) = match &resume {
        Some(c) => (c.load_store("denoiser", DType::F32)?, tr.restore(c)?),
        None => (ParamStore::new(DType::F32), 0),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut model = Denoiser::new(&mut Builder::new(&mut store, &mut init_rng), &cfg.model.denoiser)?;
    if let Some(c) = &resume {
        model.set_routing_state(&models::routing_from_text(c.get("routing")?)?)?;
        restore_usage(c, &model)?;
    }
    let mut opt = optimizer(sc, resume.as_ref())?;
    let [gt, lms, pan] = train_tensors(cfg)?;
    let steps_per_epoch = cfg.data.train_count.div_ceil(sc.batch_size).max(1);
    let epochs = sc.iterations.div_ceil(steps_per_epoch);
    let t_freeze = sc.t_freeze.unwrap_or(epochs / 2);
    let val = val_tensors(cfg)?;
    let mut batches = stream(cfg, sc, vec![gt, lms, pan], start)?;
    let sampler = SamplerConfig {
        num_steps: sc.val_sampler_steps.min(cfg.model.diffusion_steps),
        init_noise: cfg.model.init_noise,
        ..SamplerConfig::default()
    };
    let mut hash = String::new();
    let end = opts.stop_after.unwrap_or(sc.iterations).min(sc.iterations);
    for step in start..end {
        if step % steps_per_epoch == 0 && !model.routing_frozen() {
            let epoch = step / steps_per_epoch;
            if freeze_arconv_routing(&mut model, epoch, t_freeze) {
                log::info!("stage 1: adaptive routing frozen at epoch {epoch}: {}", routing_to_text(&model.routing_state()));
            } else if step > 0 {
                model.reset_routing_usage();
            }
        }
        let (parts, mut rng) = batches.next_batch()?;
        let (gt, lms, pan) = (&parts[0], &parts[1], &parts[2]);
        let x0 = (gt - lms)?;
        let b = x0.dims()[0];
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
        let eps = randn_like(&x0, &mut rng)?;
        let x_t = distill::noised(&x0, &eps, &t, &sched)?;
        let loss = l1(&model.forward(&x_t, lms, pan, &t)?, &x0)?;
        tr.record(step, "L_S1", scalar(&loss)?)?;
        let grads = loss.backward()?;
        opt.step(&store, &grads, cosine_lr(sc.learning_rate, step, sc.iterations))?;
        let done = step + 1;
        if tr.is_checkpoint_step(done, &opts) {
            let v = match &val {
                Some([vg, vl, vp]) => {
                    let usage = model.routing_usage();
                    let mut vr = models::inference_rng(sc.seed);
                    let fused = models::dm_images(&model, vl, vp, &sched, &sampler, &mut vr)?;
                    model.set_routing_usage(&usage)?;
                    Some(mean_sam(&fused, vg)?)
                }
                None => None,
            };
            let mut c = tr.base_checkpoint(done)?;
            c.set("routing", routing_to_text(&model.routing_state()));
            c.set("t_freeze", t_freeze);
            c.push_store("denoiser", &store)?;
            usage_blobs(&mut c, &model)?;
            push_optimizer(&mut c, &opt)?;
            hash = tr.save(&c, v)?;
        }
    }
    if hash.is_empty() {
        hash = file_hash(&checkpoint_path(cfg, 1))?;
    }
    tr.finish(hash, end)
}

fn stage2(cfg: &FoseConfig, prereqs: Vec<(u8, String)>, opts: RunOptions) -> Result<StageOutcome> {
    let sc = cfg.stage(2)?;
    let sched = schedule(cfg)?;
    let (teacher, _) = models::load_teacher(cfg)?;
    let teacher_digest = teacher.store.digest()?;
    let resume = resume_checkpoint(cfg, 2, &opts)?;
    let mut tr = Tracker::new(cfg, 2, prereqs)?;
    let (student, start) = match &resume {
        Some(c) => {
            let mut store = c.load_store("student", DType::F32)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
            let mut model = Denoiser::new(
                &mut Builder::new(&mut store, &mut rng).with_lora(Some(cfg.model.lora)),
                &cfg.model.denoiser,
            )?;
            model.set_routing_state(&teacher.model.routing_state())?;
            let start = tr.restore(c)?;
            (Student { store, model, lora: cfg.model.lora }, start)
        }
        None => (init_student(&teacher.store, &teacher.model, cfg.model.lora, sc.seed)?, 0),
    };
    let mut opt = optimizer(sc, resume.as_ref())?;
    let [gt, lms, pan] = train_tensors(cfg)?;
    let val = val_tensors(cfg)?;
    let mut batches = stream(cfg, sc, vec![gt, lms, pan], start)?;
    let mut hash = String::new();
    let end = opts.stop_after.unwrap_or(sc.iterations).min(sc.iterations);
    for step in start..end {
        let (parts, mut rng) = batches.next_batch()?;
        let x0 = (&parts[0] - &parts[1])?;
        let b = x0.dims()[0];
        let t: Vec<usize> = (0..b).map(|_| distill::sample_timestep(&mut rng)).collect();
        let eps = randn_like(&x0, &mut rng)?;
        let batch = DistillBatch {
            x0,
            lms: parts[1].clone(),
            pan: parts[2].clone(),
            t,
            eps,
        };
        let lr = cosine_lr(sc.learning_rate, step, sc.iterations);
        let (lv, ld) = distill::distill_step(&teacher.model, &student, &mut opt, lr, &batch, &sched, step)?;
        tr.record(step, "L_vsd + L_data", lv + ld)?;
        let done = step + 1;
        if tr.is_checkpoint_step(done, &opts) {
            let v = match &val {
                Some([vg, vl, vp]) => {
                    let mut vr = models::inference_rng(sc.seed);
                    let fused = osd_images(&student.model, vl, vp, cfg.model.init_noise, cfg.model.t_infer, &mut vr)?;
                    Some(mean_sam(&fused, vg)?)
                }
                None => None,
            };
            let (merged, _) = merge_adapters(&student)?;
            let mut c = tr.base_checkpoint(done)?;
            c.set("routing", routing_to_text(&student.model.routing_state()));
            c.set("teacher_digest", &teacher_digest);
            c.push_store("student", &student.store)?;
            c.push_store("merged", &merged)?;
            push_optimizer(&mut c, &opt)?;
            hash = tr.save(&c, v)?;
        }
    }
    if teacher.store.digest()? != teacher_digest {
        return Err(Error::Validation("teacher weights changed during distillation".into()));
    }
    if hash.is_empty() {
        hash = file_hash(&checkpoint_path(cfg, 2))?;
    }
    tr.finish(hash, end)
}

fn stage3(cfg: &FoseConfig, prereqs: Vec<(u8, String)>, opts: RunOptions) -> Result<StageOutcome> {
    let sc = cfg.stage(3)?;
    let resume = resume_checkpoint(cfg, 3, &opts)?;
    let mut tr = Tracker::new(cfg, 3, prereqs)?;
    let (mut store, start) = match &resume {
        Some(c) => (c.load_store("e2e", DType::F32)?, tr.restore(c)?),
        None => (ParamStore::new(DType::F32), 0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let net = E2ENet::new(&mut Builder::new(&mut store, &mut rng), &cfg.model.e2e)?;
    let mut opt = optimizer(sc, resume.as_ref())?;
    let [gt, lms, pan] = train_tensors(cfg)?;
    let val = val_tensors(cfg)?;
    let mut batches = stream(cfg, sc, vec![gt, lms, pan], start)?;
    let mut hash = String::new();
    let end = opts.stop_after.unwrap_or(sc.iterations).min(sc.iterations);
    for step in start..end {
        let (parts, _) = batches.next_batch()?;
        let loss = l1(&net.forward(&parts[1], &parts[2])?, &parts[0])?;
        tr.record(step, "L_S3", scalar(&loss)?)?;
        let grads = loss.backward()?;
        opt.step(&store, &grads, cosine_lr(sc.learning_rate, step, sc.iterations))?;
        let done = step + 1;
        if tr.is_checkpoint_step(done, &opts) {
            let v = match &val {
                Some([vg, vl, vp]) => Some(mean_sam(&e2e_images(&net, vl, vp)?, vg)?),
                None => None,
            };
            let mut c = tr.base_checkpoint(done)?;
            c.push_store("e2e", &store)?;
            push_optimizer(&mut c, &opt)?;
            hash = tr.save(&c, v)?;
        }
    }
    if hash.is_empty() {
        hash = file_hash(&checkpoint_path(cfg, 3))?;
    }
    tr.finish(hash, end)
}

/// Frozen one-step and end-to-end outputs for a set of images.
pub fn backbone_outputs(
    cfg: &FoseConfig,
    osd: &Loaded<Denoiser>,
    e2e: &Loaded<E2ENet>,
    lms: &Tensor,
    pan: &Tensor,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let mut rng = models::inference_rng(seed);
    let y_osd = osd_images(&osd.model, lms, pan, cfg.model.init_noise, cfg.model.t_infer, &mut rng)?;
    let y_e2e = e2e_images(&e2e.model, lms, pan)?;
    Ok((y_osd, y_e2e))
}

fn stage4(cfg: &FoseConfig, prereqs: Vec<(u8, String)>, opts: RunOptions) -> Result<StageOutcome> {
    let sc = cfg.stage(4)?;
    let (osd, _) = models::load_osd(cfg)?;
    let (e2e, _) = models::load_e2e(cfg)?;
    let (osd_digest, e2e_digest) = (osd.store.digest()?, e2e.store.digest()?);
    let resume = resume_checkpoint(cfg, 4, &opts)?;
    let mut tr = Tracker::new(cfg, 4, prereqs)?;
    let (mut store, start) = match &resume {
        Some(c) => (c.load_store("connector", DType::F32)?, tr.restore(c)?),
        None => (ParamStore::new(DType::F32), 0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let conn = Connector::new(&mut Builder::new(&mut store, &mut rng), &cfg.model.connector)?;
    let mut opt = optimizer(sc, resume.as_ref())?;
    let [gt, lms, pan] = train_tensors(cfg)?;
    let (y_osd, y_e2e) = backbone_outputs(cfg, &osd, &e2e, &lms, &pan, sc.seed)?;
    let val = match val_tensors(cfg)? {
        Some([vg, vl, vp]) => {
            let (a, b) = backbone_outputs(cfg, &osd, &e2e, &vl, &vp, sc.seed)?;
            Some((vg, a, b))
        }
        None => None,
    };
    let mut batches = stream(cfg, sc, vec![y_osd, y_e2e, gt], start)?;
    let mut hash = String::new();
    let end = opts.stop_after.unwrap_or(sc.iterations).min(sc.iterations);
    for step in start..end {
        let (parts, _) = batches.next_batch()?;
        let out = conn.forward(&parts[0], &parts[1], true)?;
        let loss = l1(&out, &parts[2])?;
        tr.record(step, "L_S4", scalar(&loss)?)?;
        let grads = loss.backward()?;
        opt.step(&store, &grads, cosine_lr(sc.learning_rate, step, sc.iterations))?;
        let done = step + 1;
        if tr.is_checkpoint_step(done, &opts) {
            let v = match &val {
                Some((vg, a, b)) => Some(mean_sam(&connector_images(&conn, a, b)?, vg)?),
                None => None,
            };
            let mut c = tr.base_checkpoint(done)?;
            c.set("osd_digest", &osd_digest);
            c.set("e2e_digest", &e2e_digest);
            c.push_store("connector", &store)?;
            push_optimizer(&mut c, &opt)?;
            hash = tr.save(&c, v)?;
        }
    }
    if osd.store.digest()? != osd_digest || e2e.store.digest()? != e2e_digest {
        return Err(Error::Validation("backbone weights changed during stage 4".into()));
    }
    if hash.is_empty() {
        hash = file_hash(&checkpoint_path(cfg, 4))?;
    }
    tr.finish(hash, end)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny(root: &std::path::Path) -> FoseConfig {
        let mut text = format!(
            "[data]\nroot = {0}/data\nbands = 4\ngt_size = 16\ntrain_count = 4\nval_count = 2\ntest_count = 2\ncrop = 16\n\
             [model]\nbase_channels = 8\nnum_scales = 2\nblocks_per_scale = 1\ntime_embed_dim = 16\nlora_rank = 2\n\
             e2e_blocks = 2\ne2e_channels = 8\nconnector_blocks = 2\nconnector_hidden = 8\n[run]\nroot = {0}/runs\n",
            root.display()
        );
        for k in 1..=4 {
            text.push_str(&format!("[stage{k}]\nbatch_size = 2\niterations = 4\nval_every = 2\nval_sampler_steps = 2\n"));
        }
        FoseConfig::parse(&text).unwrap()
    }

    #[test]
    fn window_means() {
        let l: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert_eq!(loss_window(&l), (0.5, 38.5));
        assert_eq!(loss_window(&[3.0]), (3.0, 3.0));
    }

    #[test]
    fn stages_run_in_order_and_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        synthesize(&cfg).unwrap();
        assert!(matches!(
            run_stage(&cfg, 2, RunOptions::default()),
            Err(Error::Prerequisite { stage: 2, .. })
        ));
        for k in 1..=4 {
            let o = run_stage(&cfg, k, RunOptions::default()).unwrap();
            assert_eq!(o.losses.len(), 4);
            assert_eq!(o.validation.len(), 2);
            assert!(o.checkpoint.exists());
        }
        let full = Checkpoint::load(&checkpoint_path(&cfg, 3)).unwrap().load_store("e2e", DType::F32).unwrap().digest().unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.run_root = dir.path().join("runs2");
        let part = run_stage(&cfg2, 3, RunOptions { resume: false, stop_after: Some(2) }).unwrap();
        assert_eq!(part.final_step, 2);
        let o = run_stage(&cfg2, 3, RunOptions { resume: true, stop_after: None }).unwrap();
        assert_eq!(o.losses.len(), 4);
        let resumed = Checkpoint::load(&checkpoint_path(&cfg2, 3)).unwrap().load_store("e2e", DType::F32).unwrap().digest().unwrap();
        assert_eq!(full, resumed);
    }
}
