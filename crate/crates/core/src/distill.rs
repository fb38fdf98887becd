//! One-step distillation: a low-rank-adapted copy of the frozen teacher is
//! trained with an adaptively weighted teacher-matching loss plus an L1 data
//! loss on randomly noised residuals.

use candle_core::{Tensor, D};
use rand::Rng;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::NoiseSchedule;
use crate::nn::{fold_adapter, AdamW, Builder, LoraConfig, ParamKind, ParamStore};
use crate::{Error, Result};

/// Inclusive timestep range seen by the student.
pub const T_MIN: usize = 20;
pub const T_MAX: usize = 980;
/// Guard added to the normaliser of the teacher-matching weight.
pub const OMEGA_EPS: f64 = 1e-8;

/// Uniform integer timestep on `[20, 980]`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(T_MIN..=T_MAX)
}

/// Low-rank adapter bookkeeping for one adapted weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    /// Name of the adapted weight, e.g. `enc0.fuse.q.weight`.
    pub layer: String,
    pub rank: usize,
    pub alpha: f64,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl LowRankAdapter {
    pub fn num_params(&self) -> usize {
        self.rank * (self.out_dim + self.in_dim)
    }
}

/// Adapters present in a store, in name order.
pub fn adapters(store: &ParamStore, cfg: LoraConfig) -> Result<Vec<LowRankAdapter>> {
    let mut out = Vec::new();
    for (name, var, _) in store.iter() {
        if let Some(prefix) = name.strip_suffix(".lora_a") {
            let b = store.var(&format!("{prefix}.lora_b"))?;
            out.push(LowRankAdapter {
                layer: format!("{prefix}.weight"),
                rank: var.dims()[1],
                alpha: cfg.alpha,
                out_dim: var.dims()[0],
                in_dim: b.dims()[1],
            });
        }
    }
    Ok(out)
}

/// Student model: teacher weights frozen underneath trainable adapters.
#[derive(Debug)]
pub struct Student {
    pub store: ParamStore,
    pub model: Denoiser,
    pub lora: LoraConfig,
}

/// Wraps a copy of the teacher weights with zero-initialised adapters on every
/// convolution (including each adaptive-convolution bank entry) and attention
/// projection. The teacher's routing selection is carried over.
pub fn init_student(
    teacher_store: &ParamStore,
    teacher: &Denoiser,
    lora: LoraConfig,
    seed: u64,
) -> Result<Student> {
    let mut store = teacher_store.deep_copy(teacher_store.dtype())?;
    store.freeze_all();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut model = Denoiser::new(
        &mut Builder::new(&mut store, &mut rng).with_lora(Some(lora)),
        teacher.config(),
    )?;
    model.set_routing_state(&teacher.routing_state())?;
    Ok(Student { store, model, lora })
}

/// One distillation batch. `x0` is the residual `gt - lms`.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub x0: Tensor,
    pub lms: Tensor,
    pub pan: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl DistillBatch {
    pub fn validate(&self) -> Result<()> {
        let b = self.x0.dims4()?.0;
        if self.t.len() != b {
            return Err(Error::Dimension(format!("{} timesteps for batch of {b}", self.t.len())));
        }
        if let Some(t) = self.t.iter().find(|t| !(T_MIN..=T_MAX).contains(*t)) {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [{T_MIN}, {T_MAX}]")));
        }
        if self.eps.dims() != self.x0.dims() || self.lms.dims() != self.x0.dims() {
            return Err(Error::Dimension("noise, lms and x0 shapes differ".into()));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with one timestep per sample.
pub fn noised(x0: &Tensor, eps: &Tensor, t: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    let b = x0.dims4()?.0;
    for &ti in t {
        sched.check_t(ti)?;
    }
    let a: Vec<f64> = t.iter().map(|ti| sched.alpha_bar(*ti).sqrt()).collect();
    let s: Vec<f64> = t.iter().map(|ti| (1.0 - sched.alpha_bar(*ti)).sqrt()).collect();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), x0.device())?.to_dtype(x0.dtype())?;
    let s = Tensor::from_vec(s, (b, 1, 1, 1), x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Teacher-matching weight `1 / (mean |teacher - student| + 1e-8)`, as a
/// plain number so no gradient flows through it.
pub fn omega(teacher_x0: &Tensor, student_x0: &Tensor) -> Result<f64> {
    let m = (teacher_x0 - student_x0)?
        .abs()?
        .mean_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    Ok(1.0 / (m + OMEGA_EPS))
}

/// `omega * mean((teacher - student)^2)` with an explicit weight.
pub fn vsd_loss_with(teacher_x0: &Tensor, student_x0: &Tensor, omega: f64) -> Result<Tensor> {
    Ok(((teacher_x0.detach() - student_x0)?.sqr()?.mean_all()? * omega)?)
}

pub fn vsd_loss(teacher_x0: &Tensor, student_x0: &Tensor) -> Result<Tensor> {
    let w = omega(teacher_x0, student_x0)?;
    vsd_loss_with(teacher_x0, student_x0, w)
}

/// `mean |student - gt|`.
pub fn data_loss(student_x0: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((student_x0 - gt)?.abs()?.mean_all()?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Both losses for a batch without updating anything. Images (`x̂ + lms`) are
/// compared, matching the update rule.
pub fn distill_losses(
    teacher: &Denoiser,
    student: &Denoiser,
    batch: &DistillBatch,
    sched: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    batch.validate()?;
    let x_t = noised(&batch.x0, &batch.eps, &batch.t, sched)?;
    let teacher_img = (teacher
        .forward(&x_t, &batch.lms, &batch.pan, &batch.t)?
        .detach()
        + &batch.lms)?;
    let student_img = (student.forward(&x_t, &batch.lms, &batch.pan, &batch.t)? + &batch.lms)?;
    let gt = (&batch.x0 + &batch.lms)?;
    Ok((vsd_loss(&teacher_img, &student_img)?, data_loss(&student_img, &gt)?))
}

/// One optimiser step on `L_vsd + L_data`; returns both scalars.
pub fn distill_step(
    teacher: &Denoiser,
    student: &Student,
    opt: &mut AdamW,
    lr: f64,
    batch: &DistillBatch,
    sched: &NoiseSchedule,
    step: usize,
) -> Result<(f64, f64)> {
    let (vsd, data) = distill_losses(teacher, &student.model, batch, sched)?;
    let (lv, ld) = (scalar(&vsd)?, scalar(&data)?);
    if !lv.is_finite() {
        return Err(Error::NonFinite { term: "L_vsd".into(), step });
    }
    if !ld.is_finite() {
        return Err(Error::NonFinite { term: "L_data".into(), step });
    }
    let grads = (vsd + data)?.backward()?;
    opt.step(&student.store, &grads, lr)?;
    Ok((lv, ld))
}

/// Folds every adapter into its base weight and rebuilds a plain denoiser.
pub fn merge_adapters(student: &Student) -> Result<(ParamStore, Denoiser)> {
    let mut merged = ParamStore::new(student.store.dtype());
    let scale = student.lora.scale();
    for (name, var, kind) in student.store.iter() {
        if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
            continue;
        }
        let prefix = name.strip_suffix(".weight");
        let a_name = prefix.map(|p| format!("{p}.lora_a"));
        let value = match a_name.filter(|n| student.store.contains(n)) {
            Some(a_name) => {
                let p = prefix.expect("weight prefix");
                let a = student.store.var(&a_name)?.as_tensor();
                let b = student.store.var(&format!("{p}.lora_b"))?.as_tensor();
                fold_adapter(var.as_tensor(), a, b, scale)?
            }
            None => var.as_tensor().clone(),
        };
        let kind = if kind == ParamKind::Buffer { kind } else { ParamKind::Frozen };
        merged.insert(name, &value, kind)?;
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let cfg: DenoiserConfig = student.model.config().clone();
    let mut model = Denoiser::new(&mut Builder::new(&mut merged, &mut rng), &cfg)?;
    model.set_routing_state(&student.model.routing_state())?;
    Ok((merged, model))
}

/// Element-wise `|a - b|` mean over all but the batch dimension.
pub fn per_sample_l1(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let d = (a - b)?.abs()?.flatten_from(1)?.mean(D::Minus1)?;
    Ok(d.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            bands: 4,
            base_channels: 8,
            num_scales: 2,
            blocks_per_scale: 1,
            time_embed_dim: 16,
            ..DenoiserConfig::toy(4)
        }
    }

    fn teacher() -> (ParamStore, Denoiser) {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Denoiser::new(&mut Builder::new(&mut store, &mut rng), &cfg()).unwrap();
        // Give the zero-initialised output a non-trivial value.
        let w = store.var("out_conv.weight").unwrap();
        w.set(&Tensor::randn(0f32, 0.1, w.shape(), &Device::Cpu).unwrap()).unwrap();
        store.freeze_all();
        (store, m)
    }

    #[test]
    fn omega_worked_example_and_guard() {
        let t = Tensor::new(&[1.0f64, 3.0], &Device::Cpu).unwrap();
        let s = Tensor::new(&[0.0f64, 0.0], &Device::Cpu).unwrap();
        let l = scalar(&vsd_loss(&t, &s).unwrap()).unwrap();
        assert!((l - 2.5).abs() < 1e-7);
        let z = scalar(&vsd_loss(&t, &t).unwrap()).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn timestep_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<usize> = (0..10_000).map(|_| sample_timestep(&mut rng)).collect();
        assert!(draws.iter().all(|t| (20..=980).contains(t)));
    }

    #[test]
    fn student_matches_teacher_then_merges() {
        let (ts, tm) = teacher();
        let st = init_student(&ts, &tm, LoraConfig::default(), 7).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 4, 16, 16), &Device::Cpu).unwrap();
        let lms = Tensor::rand(0f32, 1.0, (2, 4, 16, 16), &Device::Cpu).unwrap();
        let pan = Tensor::rand(0f32, 1.0, (2, 1, 16, 16), &Device::Cpu).unwrap();
        let a = tm.forward(&x, &lms, &pan, &[30, 900]).unwrap();
        let b = st.model.forward(&x, &lms, &pan, &[30, 900]).unwrap();
        let d = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
        let ads = adapters(&st.store, st.lora).unwrap();
        assert!(!ads.is_empty());
        let analytic: usize = ads.iter().map(|a| a.num_params()).sum();
        assert_eq!(analytic, st.store.num_trainable());
        let (merged, mm) = merge_adapters(&st).unwrap();
        assert!(merged.iter().all(|(n, _, _)| !n.contains("lora")));
        let c = mm.forward(&x, &lms, &pan, &[30, 900]).unwrap();
        let d = (&a - &c).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn timestep_moments_and_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let draws: Vec<usize> = (0..n).map(|_| sample_timestep(&mut rng)).collect();
        let mean = draws.iter().sum::<usize>() as f64 / n as f64;
        // Discrete uniform on 961 values: variance (961^2 - 1) / 12.
        let se = ((961f64 * 961.0 - 1.0) / 12.0 / n as f64).sqrt();
        assert!((mean - 500.0).abs() < 3.0 * se);
        assert!(draws.contains(&20) && draws.contains(&980));
    }

    #[test]
    fn omega_is_gradient_free() {
        let dev = Device::Cpu;
        let w = candle_core::Var::new(&[0.5f64, -1.0, 2.0], &dev).unwrap();
        let t = Tensor::new(&[1.0f64, 1.0, 1.0], &dev).unwrap();
        let s = (w.as_tensor() * 2.0).unwrap();
        let om = omega(&t, &s).unwrap();
        let g1 = vsd_loss(&t, &s).unwrap().backward().unwrap();
        let g2 = vsd_loss_with(&t, &s, om).unwrap().backward().unwrap();
        let a = g1.get(w.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let b = g2.get(w.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        // Analytic: d/dw omega * mean((t - 2w)^2) = -4 omega (t - 2w) / n.
        let wv = [0.5, -1.0, 2.0];
        for (i, g) in a.iter().enumerate() {
            let want = -4.0 * om * (1.0 - 2.0 * wv[i]) / 3.0;
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn steps_leave_teacher_untouched_and_merge_folds() {
        let (ts, tm) = teacher();
        let before = ts.digest().unwrap();
        let st = init_student(&ts, &tm, LoraConfig::default(), 7).unwrap();
        let sched = crate::diffusion::make_linear_schedule(1000, 1e-4, 2e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dev = Device::Cpu;
        let mut opt = AdamW::new(Default::default());
        let base_before = st.store.digest_filtered(|_, k| k != ParamKind::Trainable).unwrap();
        for step in 0..3 {
            let batch = DistillBatch {
                x0: Tensor::randn(0f32, 0.1, (2, 4, 16, 16), &dev).unwrap(),
                lms: Tensor::rand(0f32, 1.0, (2, 4, 16, 16), &dev).unwrap(),
                pan: Tensor::rand(0f32, 1.0, (2, 1, 16, 16), &dev).unwrap(),
                t: vec![sample_timestep(&mut rng), sample_timestep(&mut rng)],
                eps: Tensor::randn(0f32, 1.0, (2, 4, 16, 16), &dev).unwrap(),
            };
            let (lv, ld) = distill_step(&tm, &st, &mut opt, 1e-2, &batch, &sched, step).unwrap();
            assert!(lv >= 0.0 && ld >= 0.0);
        }
        assert_eq!(ts.digest().unwrap(), before);
        assert_eq!(st.store.digest_filtered(|_, k| k != ParamKind::Trainable).unwrap(), base_before);
        let (_, mm) = merge_adapters(&st).unwrap();
        for _ in 0..3 {
            let x = Tensor::randn(0f32, 1.0, (1, 4, 16, 16), &dev).unwrap();
            let lms = Tensor::rand(0f32, 1.0, (1, 4, 16, 16), &dev).unwrap();
            let pan = Tensor::rand(0f32, 1.0, (1, 1, 16, 16), &dev).unwrap();
            let a = st.model.forward(&x, &lms, &pan, &[400]).unwrap();
            let b = mm.forward(&x, &lms, &pan, &[400]).unwrap();
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(d < 1e-5, "{d}");
        }
    }

    #[test]
    fn bad_batch_rejected() {
        let dev = Device::Cpu;
        let b = DistillBatch {
            x0: Tensor::zeros((1, 4, 16, 16), DType::F32, &dev).unwrap(),
            lms: Tensor::zeros((1, 4, 16, 16), DType::F32, &dev).unwrap(),
            pan: Tensor::zeros((1, 1, 16, 16), DType::F32, &dev).unwrap(),
            t: vec![10],
            eps: Tensor::zeros((1, 4, 16, 16), DType::F32, &dev).unwrap(),
        };
        assert!(matches!(b.validate(), Err(Error::InvalidArgument(_))));
    }
}
