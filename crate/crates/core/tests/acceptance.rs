//! Acceptance criteria 1 to 11. Each test writes one `criterion N: PASS|FAIL`
//! line to stderr (outside the test harness capture) before asserting.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fose::denoiser::{fmim_highpass, Apfm, ArConv, Denoiser, DenoiserConfig};
use fose::diffusion::{
    chain_step, eps_from_x0, forward_sample, make_linear_schedule, posterior_variance, sample_multistep,
    sample_onestep, InitNoise, NoiseSchedule, SamplerConfig, SamplerKind,
};
use fose::distill::{distill_step, init_student, omega, sample_timestep, vsd_loss, DistillBatch};
use fose::e2e::{otp_block, OdeScheme, VectorField};
use fose::ensemble::{Connector, ConnectorConfig};
use fose::metrics::{ergas, hqnr, q2n, sam, scc, uiqi_blocks, MetricConfig, Resolution};
use fose::nn::{AdamW, Builder, LoraConfig, ParamStore};
use fose::pipeline::ablate::{ablate, AblateOptions, AblationKind};
use fose::pipeline::cost::{sampler_invocations, speedup};
use fose::pipeline::data::stack_pairs;
use fose::pipeline::eval::{evaluate, fuse, InferenceOptions, Method};
use fose::pipeline::models::load_teacher;
use fose::pipeline::train::load_split;
use fose::pipeline::{run_stage, synthesize, FoseConfig, RunOptions, StageOutcome};
use fose::raster::Split;

// Pinned tolerances.
const MC_REL_TOL: f64 = 0.02;
const ROUND_TRIP_TOL: f64 = 1e-6;
const HAND_VAR_TOL: f64 = 1e-4;
const ORACLE_SAMPLER_TOL: f64 = 1e-4;
const METRIC_TOL: f64 = 1e-10;
const HQNR_TOL: f64 = 0.005;
const SPEEDUP_REL_TOL: f64 = 0.005;
const VSD_TOL: f64 = 1e-12;
/// Offset of the worked example from 2.5 caused by the 1e-8 guard in omega.
const VSD_GUARD_TOL: f64 = 1e-7;
const DEGENERACY_TOL: f64 = 1e-5;
const GRAD_STEP: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-3;
const LOSS_RATIO: f64 = 0.5;
const EXP_IMPROVEMENT: f64 = 0.2;
const FUSION_SLACK: f64 = 1.05;

fn report(id: u32, checks: &[(String, bool)]) {
    let ok = checks.iter().all(|c| c.1);
    let detail: Vec<String> = checks
        .iter()
        .map(|(d, p)| format!("{d} [{}]", if *p { "ok" } else { "fail" }))
        .collect();
    let line = format!("criterion {id}: {} | {}", if ok { "PASS" } else { "FAIL" }, detail.join("; "));
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

fn check(what: impl Into<String>, pass: bool) -> (String, bool) {
    (what.into(), pass)
}

fn within(elapsed: Duration, limit: Duration) -> (String, bool) {
    check(format!("runtime {:.1}s <= {}s", elapsed.as_secs_f64(), limit.as_secs()), elapsed <= limit)
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn randomize(store: &ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    for (_, var, _) in store.iter() {
        var.set(&normal(var.dims(), std, rng).to_dtype(var.dtype()).unwrap()).unwrap();
    }
}

fn array(shape: (usize, usize, usize), rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

// ---------------------------------------------------------------- 1

/// Linear betas from 1e-4 to 2e-2 over 1000 steps, computed independently.
fn oracle_betas() -> Vec<f64> {
    (0..1000).map(|i| 1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0).collect()
}

#[test]
fn criterion_01_marginal_consistency() {
    let start = Instant::now();
    let sched = make_linear_schedule(1000, 1e-4, 2e-2).unwrap();
    let betas = oracle_betas();
    let beta_match = (1..=1000).all(|t| (sched.beta(t) - betas[t - 1]).abs() < 1e-15);
    // 10k chains over a 4x4 patch with values in [0.5, 1.5].
    let (n, d) = (10_000usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0_row: Vec<f64> = (0..d).map(|i| 0.5 + i as f64 / (d - 1) as f64).collect();
    let x0: Vec<f64> = (0..n).flat_map(|_| x0_row.clone()).collect();
    let mut x = Tensor::from_vec(x0, (n, d), &Device::Cpu).unwrap();
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    let mut abar = 1.0;
    for t in 1..=200 {
        x = chain_step(&x, t, &sched, &mut rng).unwrap();
        abar *= 1.0 - betas[t - 1];
        let v = x.to_vec2::<f64>().unwrap();
        let mut mean = vec![0.0; d];
        for row in &v {
            for (m, a) in mean.iter_mut().zip(row) {
                *m += a / n as f64;
            }
        }
        let mut var = 0.0;
        for row in &v {
            for (a, m) in row.iter().zip(&mean) {
                var += (a - m).powi(2);
            }
        }
        let var = var / ((n - 1) * d) as f64;
        let want: Vec<f64> = x0_row.iter().map(|x| abar.sqrt() * x).collect();
        let num: f64 = mean.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst_mean = worst_mean.max(num / den);
        worst_var = worst_var.max((var - (1.0 - abar)).abs() / (1.0 - abar));
    }
    report(
        1,
        &[
            check("betas match linear oracle", beta_match),
            check(format!("max mean rel err {worst_mean:.4} < {MC_REL_TOL}"), worst_mean < MC_REL_TOL),
            check(format!("max var rel err {worst_var:.4} < {MC_REL_TOL}"), worst_var < MC_REL_TOL),
            within(start.elapsed(), Duration::from_secs(60)),
        ],
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_round_trips() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = normal(&[2, 4, 8, 8], 1.0, &mut rng);
    let eps = normal(&[2, 4, 8, 8], 1.0, &mut rng);
    let mut worst = 0.0f64;
    for t in 1..=sched.steps() {
        let xt = forward_sample(&x0, t, &eps, &sched).unwrap();
        let back = eps_from_x0(&xt, &x0, t, &sched).unwrap();
        worst = worst.max(max_abs(&(back - &eps).unwrap()));
    }
    let bounded = (1..=sched.steps()).all(|t| {
        let v = posterior_variance(t, &sched);
        (0.0..=sched.beta(t)).contains(&v)
    });
    let two = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
    let hand = (1.0 - 0.9) / (1.0 - 0.9 * 0.8) * 0.2;
    let v2 = posterior_variance(2, &two);
    report(
        2,
        &[
            check(format!("eps round trip {worst:.2e} < {ROUND_TRIP_TOL}"), worst < ROUND_TRIP_TOL),
            check("posterior variance in [0, beta_t] for all t", bounded),
            check(
                format!("var(t=2) {v2:.6} = 0.0714 +- {HAND_VAR_TOL}"),
                (v2 - 0.0714).abs() <= HAND_VAR_TOL && (v2 - hand).abs() < 1e-12,
            ),
        ],
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_oracle_sampling() {
    let sched = NoiseSchedule::default();
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = normal(&[1, 8, 16, 16], 0.3, &mut rng);
    let mut calls = 0usize;
    let mut oracle = |_: &Tensor, _: usize| -> fose::Result<Tensor> {
        calls += 1;
        Ok(x0.clone())
    };
    let cfg = SamplerConfig { num_steps: 50, kind: SamplerKind::Implicit, eta: 0.0, init_noise: InitNoise::Zero };
    let out = sample_multistep(&mut oracle, x0.shape(), DType::F64, &dev, &sched, &cfg, &mut rng).unwrap();
    let multi_calls = calls;
    let err = max_abs(&(out - &x0).unwrap());
    let mut one_calls = 0usize;
    let mut student = |_: &Tensor, _: usize| -> fose::Result<Tensor> {
        one_calls += 1;
        Ok(x0.clone())
    };
    let one = sample_onestep(&mut student, x0.shape(), DType::F64, &dev, InitNoise::Zero, 980, &mut rng).unwrap();
    let one_err = max_abs(&(one - &x0).unwrap());
    let fcfg = FoseConfig::default();
    let dm = sampler_invocations(&fcfg, Method::Dm { steps: 50 }).unwrap();
    let osd = sampler_invocations(&fcfg, Method::Osd).unwrap();
    report(
        3,
        &[
            check(format!("50-step reconstruction {err:.2e} < {ORACLE_SAMPLER_TOL}"), err < ORACLE_SAMPLER_TOL),
            check(format!("multi-step calls {multi_calls} == 50"), multi_calls == 50),
            check(format!("one-step calls {one_calls} == 1"), one_calls == 1 && one_err == 0.0),
            check(format!("pipeline counters dm50={dm} osd={osd}"), dm == 50 && osd == 1),
        ],
    );
}

// ---------------------------------------------------------------- 4

/// Wang-Bovik index over non-overlapping tiles, written with explicit loops.
fn naive_uiqi_blocks(a: &Array2<f64>, b: &Array2<f64>, bs: usize) -> f64 {
    let (h, w) = a.dim();
    let (mut total, mut count) = (0.0, 0);
    for by in 0..h / bs {
        for bx in 0..w / bs {
            let n = (bs * bs) as f64;
            let (mut ma, mut mb) = (0.0, 0.0);
            for y in by * bs..(by + 1) * bs {
                for x in bx * bs..(bx + 1) * bs {
                    ma += a[[y, x]];
                    mb += b[[y, x]];
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
            for y in by * bs..(by + 1) * bs {
                for x in bx * bs..(bx + 1) * bs {
                    va += (a[[y, x]] - ma).powi(2);
                    vb += (b[[y, x]] - mb).powi(2);
                    cab += (a[[y, x]] - ma) * (b[[y, x]] - mb);
                }
            }
            total += 4.0 * cab * ma * mb / ((va + vb) * (ma * ma + mb * mb));
            count += 1;
        }
    }
    total / count as f64
}

/// Hamilton product of `[r, i, j, k]` quaternions.
fn quat_mul(p: [f64; 4], q: [f64; 4]) -> [f64; 4] {
    let [a1, b1, c1, d1] = p;
    let [a2, b2, c2, d2] = q;
    [
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    ]
}

/// Q4 over non-overlapping tiles with quaternion pixels.
fn naive_q4(f: &Array3<f64>, r: &Array3<f64>, bs: usize) -> f64 {
    let (_, h, w) = f.dim();
    let px = |img: &Array3<f64>, y: usize, x: usize| [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]], img[[3, y, x]]];
    let norm = |q: [f64; 4]| q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (mut total, mut count) = (0.0, 0);
    for by in 0..h / bs {
        for bx in 0..w / bs {
            let n = (bs * bs) as f64;
            let (mut mf, mut mr) = ([0.0; 4], [0.0; 4]);
            for y in by * bs..(by + 1) * bs {
                for x in bx * bs..(bx + 1) * bs {
                    for k in 0..4 {
                        mf[k] += px(f, y, x)[k] / n;
                        mr[k] += px(r, y, x)[k] / n;
                    }
                }
            }
            let (mut vf, mut vr, mut cov) = (0.0, 0.0, [0.0; 4]);
            for y in by * bs..(by + 1) * bs {
                for x in bx * bs..(bx + 1) * bs {
                    let (p, q) = (px(f, y, x), px(r, y, x));
                    let dp = [p[0] - mf[0], p[1] - mf[1], p[2] - mf[2], p[3] - mf[3]];
                    let dq = [q[0] - mr[0], -(q[1] - mr[1]), -(q[2] - mr[2]), -(q[3] - mr[3])];
                    vf += norm(dp).powi(2);
                    vr += norm([dq[0], dq[1], dq[2], dq[3]]).powi(2);
                    let c = quat_mul(dp, dq);
                    for k in 0..4 {
                        cov[k] += c[k];
                    }
                }
            }
            let (nf, nr) = (norm(mf), norm(mr));
            total += 2.0 * norm(cov) / (vf + vr) * 2.0 * nf * nr / (nf * nf + nr * nr);
            count += 1;
        }
    }
    total / count as f64
}

/// Band-mean Pearson correlation of 8-neighbour Laplacians over interior pixels.
fn naive_scc(f: &Array3<f64>, r: &Array3<f64>) -> f64 {
    let (c, h, w) = f.dim();
    let lap = |img: &Array3<f64>, b: usize| -> Vec<f64> {
        let mut out = Vec::new();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut s = 9.0 * img[[b, y, x]];
                for yy in y - 1..=y + 1 {
                    for xx in x - 1..=x + 1 {
                        s -= img[[b, yy, xx]];
                    }
                }
                out.push(s);
            }
        }
        out
    };
    let mut total = 0.0;
    for b in 0..c {
        let (p, q) = (lap(f, b), lap(r, b));
        let n = p.len() as f64;
        let (mp, mq) = (p.iter().sum::<f64>() / n, q.iter().sum::<f64>() / n);
        let (mut vp, mut vq, mut cpq) = (0.0, 0.0, 0.0);
        for (a, b) in p.iter().zip(&q) {
            vp += (a - mp).powi(2);
            vq += (b - mq).powi(2);
            cpq += (a - mp) * (b - mq);
        }
        total += cpq / (vp.sqrt() * vq.sqrt());
    }
    total / c as f64
}

#[test]
fn criterion_04_metric_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = array((8, 32, 32), &mut rng, 0.05, 1.0);
    let y = array((8, 32, 32), &mut rng, 0.05, 1.0);
    let cfg = MetricConfig { ratio: 4, q_block: 8, ..MetricConfig::default() };
    let s_id = sam(x.view(), x.view()).unwrap();
    let e_id = ergas(x.view(), x.view(), 4).unwrap();
    let q_id = q2n(x.view(), x.view(), &cfg).unwrap();
    let c_id = scc(x.view(), x.view()).unwrap();
    let f45 = Array3::from_shape_vec((2, 1, 1), vec![1.0, 0.0]).unwrap();
    let r45 = Array3::from_shape_vec((2, 1, 1), vec![1.0, 1.0]).unwrap();
    let s45 = sam(f45.view(), r45.view()).unwrap();
    let er = Array3::from_elem((1, 2, 2), 2.0);
    let ef = Array3::from_shape_vec((1, 2, 2), vec![1.0, 3.0, 3.0, 1.0]).unwrap();
    let e125 = ergas(ef.view(), er.view(), 4).unwrap();
    let (a, b) = (x.index_axis(ndarray::Axis(0), 0).to_owned(), y.index_axis(ndarray::Axis(0), 0).to_owned());
    let u_err = (uiqi_blocks(a.view(), b.view(), 8).unwrap() - naive_uiqi_blocks(&a, &b, 8)).abs();
    let x4 = x.slice(ndarray::s![0..4, .., ..]).to_owned();
    let y4 = y.slice(ndarray::s![0..4, .., ..]).to_owned();
    let q4_err = (q2n(y4.view(), x4.view(), &cfg).unwrap() - naive_q4(&y4, &x4, 8)).abs();
    let scc_err = (scc(y.view(), x.view()).unwrap() - naive_scc(&y, &x)).abs();
    report(
        4,
        &[
            check(format!("sam(x,x)={s_id}"), s_id == 0.0),
            check(format!("ergas(x,x,4)={e_id}"), e_id == 0.0),
            check(format!("q8(x,x)={q_id}"), (q_id - 1.0).abs() < METRIC_TOL),
            check(format!("scc(x,x)={c_id}"), (c_id - 1.0).abs() < METRIC_TOL),
            check(format!("45 degree case {s45:.12}"), (s45 - 45.0).abs() < METRIC_TOL),
            check(format!("ERGAS 12.5 case {e125:.12}"), (e125 - 12.5).abs() < METRIC_TOL),
            check(format!("uiqi blocks vs loops {u_err:.1e}"), u_err < METRIC_TOL),
            check(format!("q4 blocks vs quaternion loops {q4_err:.1e}"), q4_err < METRIC_TOL),
            check(format!("scc vs loops {scc_err:.1e}"), scc_err < METRIC_TOL),
            within(start.elapsed(), Duration::from_secs(60)),
        ],
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_published_arithmetic() {
    // Published full-resolution distortions, HQNR, and GFLOPs of the 50-step
    // baseline and of the fused model.
    let (d_lambda, d_s, published_hqnr) = (0.013, 0.053, 0.933);
    let (dm_gflops, fused_gflops, published_speedup) = (2205.00, 297.60, 7.42);
    let h = hqnr(d_lambda, d_s);
    let r = speedup(dm_gflops, fused_gflops);
    report(
        5,
        &[
            check(format!("hqnr {h:.6} = 0.9346"), (h - 0.9346).abs() < 1e-4),
            check(
                format!("|hqnr - {published_hqnr}| = {:.4} <= {HQNR_TOL}", (h - published_hqnr).abs()),
                (h - published_hqnr).abs() <= HQNR_TOL,
            ),
            check(format!("speedup {r:.4} = 7.409"), (r - 7.409).abs() < 1e-3),
            check(
                format!("rel diff to {published_speedup}: {:.4} <= {SPEEDUP_REL_TOL}", (r - published_speedup).abs() / published_speedup),
                (r - published_speedup).abs() / published_speedup <= SPEEDUP_REL_TOL,
            ),
        ],
    );
}

// ---------------------------------------------------------------- 6

fn toy_denoiser(bands: usize) -> DenoiserConfig {
    DenoiserConfig { base_channels: 8, num_scales: 2, blocks_per_scale: 1, time_embed_dim: 16, ..DenoiserConfig::toy(bands) }
}

#[test]
fn criterion_06_distillation_contracts() {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ts = ParamStore::new(DType::F32);
    let teacher = Denoiser::new(&mut Builder::new(&mut ts, &mut rng), &toy_denoiser(4)).unwrap();
    randomize(&ts, 0.1, &mut rng);
    ts.freeze_all();
    let before = ts.digest().unwrap();
    let student = init_student(&ts, &teacher, LoraConfig::default(), 7).unwrap();
    let f32n = |s: &[usize], std: f64, rng: &mut ChaCha8Rng| normal(s, std, rng).to_dtype(DType::F32).unwrap();
    let x = f32n(&[2, 4, 16, 16], 1.0, &mut rng);
    let lms = f32n(&[2, 4, 16, 16], 0.3, &mut rng);
    let pan = f32n(&[2, 1, 16, 16], 0.3, &mut rng);
    let a = teacher.forward(&x, &lms, &pan, &[30, 900]).unwrap();
    let b = student.model.forward(&x, &lms, &pan, &[30, 900]).unwrap();
    let init_diff = max_abs(&(a - b).unwrap());
    let sched = make_linear_schedule(1000, 1e-4, 2e-2).unwrap();
    let mut opt = AdamW::new(Default::default());
    let mut finite = true;
    for step in 0..100 {
        let batch = DistillBatch {
            x0: f32n(&[1, 4, 16, 16], 0.1, &mut rng),
            lms: f32n(&[1, 4, 16, 16], 0.3, &mut rng),
            pan: f32n(&[1, 1, 16, 16], 0.3, &mut rng),
            t: vec![sample_timestep(&mut rng)],
            eps: f32n(&[1, 4, 16, 16], 1.0, &mut rng),
        };
        let (lv, ld) = distill_step(&teacher, &student, &mut opt, 1e-3, &batch, &sched, step).unwrap();
        finite &= lv.is_finite() && ld.is_finite();
    }
    let after = ts.digest().unwrap();
    let same = Tensor::new(&[0.25f64, -1.0, 3.0], &dev).unwrap();
    let guard = vsd_loss(&same, &same).unwrap().to_scalar::<f64>().unwrap();
    let w = omega(&same, &same).unwrap();
    let t = Tensor::new(&[1.0f64, 3.0], &dev).unwrap();
    let s = Tensor::new(&[0.0f64, 0.0], &dev).unwrap();
    let worked = vsd_loss(&t, &s).unwrap().to_scalar::<f64>().unwrap();
    report(
        6,
        &[
            check(format!("student vs teacher at init {init_diff}"), init_diff == 0.0),
            check("teacher digest unchanged over 100 steps", before == after && finite),
            check(format!("guarded L_vsd {guard} (omega {w:.1e})"), guard == 0.0 && w.is_finite()),
            check(
                format!("worked example {worked} = 5 / (2 + 1e-8) ~ 2.5"),
                (worked - 5.0 / (2.0 + 1e-8)).abs() < VSD_TOL && (worked - 2.5).abs() < VSD_GUARD_TOL,
            ),
        ],
    );
}

// ---------------------------------------------------------------- 7

/// Zero-padded 3x3 cross-correlation with explicit loops.
fn naive_conv3(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let cout = w.dims()[0];
    let xv = values(x);
    let wv = values(w);
    let bv = bias.map(values).unwrap_or_else(|| vec![0.0; cout]);
    let mut out = vec![0.0; b * cout * h * wd];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = bv[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                s += wv[((o * cin + i) * 3 + ky) * 3 + kx]
                                    * xv[((n * cin + i) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((n * cout + o) * h + y) * wd + xx] = s;
                }
            }
        }
    }
    Tensor::from_vec(out, (b, cout, h, wd), &Device::Cpu).unwrap()
}

#[test]
fn criterion_07_degeneracies() {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new(DType::F64);
    let mut ar = ArConv::new(&mut Builder::new(&mut store, &mut rng).pp("ar"), 3, 4, 7).unwrap();
    randomize(&store, 0.3, &mut rng);
    ar.set_frozen(Some((3, 3))).unwrap();
    let x = normal(&[2, 3, 8, 8], 1.0, &mut rng);
    let e = ar.bank_entry(3, 3).unwrap();
    let want = naive_conv3(&x, &e.weight().unwrap(), e.bias());
    let ar_err = max_abs(&(ar.forward(&x).unwrap() - want).unwrap());

    let c = Tensor::full(0.7f64, (2, 3, 8, 8), &dev).unwrap();
    let fm = max_abs(&fmim_highpass(&c, 0.25).unwrap());

    let y = normal(&[1, 4, 8, 8], 1.0, &mut rng);
    let h0 = Tensor::new(&[0.0f64], &dev).unwrap();
    let h1 = Tensor::new(&[0.7f64], &dev).unwrap();
    let mut otp_id = true;
    for s in [OdeScheme::Euler, OdeScheme::Rk2] {
        let a = otp_block(&y, |z| Ok((z.sqr()? + 1.0)?), &h0, s).unwrap();
        let b = otp_block(&y, |z| Ok(z.zeros_like()?), &h1, s).unwrap();
        otp_id &= values(&a) == values(&y) && values(&b) == values(&y);
    }

    let mut cs = ParamStore::new(DType::F64);
    let conn = Connector::new(&mut Builder::new(&mut cs, &mut rng), &ConnectorConfig::new(4)).unwrap();
    let p = uniform(&[2, 4, 8, 8], 0.0, 1.0, &mut rng);
    let q = uniform(&[2, 4, 8, 8], 0.0, 1.0, &mut rng);
    let avg = ((&p + &q).unwrap() * 0.5).unwrap();
    let mut conn_err = 0.0f64;
    for train in [false, true] {
        conn_err = conn_err.max(max_abs(&(conn.forward_unclipped(&p, &q, train).unwrap() - &avg).unwrap()));
    }
    report(
        7,
        &[
            check(format!("arconv (3,3) vs loop conv {ar_err:.1e}"), ar_err < DEGENERACY_TOL),
            check(format!("fmim on constant {fm:.1e}"), fm < DEGENERACY_TOL),
            check("otp_block identity for h=0 and zero field", otp_id),
            check(format!("connector average {conn_err}"), conn_err == 0.0),
        ],
    );
}

// ---------------------------------------------------------------- 8

/// Relative error `|g_analytic - g_fd| / |g_fd|` of `sum(f(x) * w)` over
/// every coordinate of each input.
fn grad_rel_err(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let probe = f(inputs);
    let weights = normal(probe.dims(), 1.0, rng);
    let loss = |xs: &[Tensor]| -> f64 { (f(xs) * &weights).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() };
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let vt: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = (f(&vt) * &weights).unwrap().sum_all().unwrap().backward().unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (k, v) in vars.iter().enumerate() {
        let analytic = values(grads.get(v.as_tensor()).expect("input gradient"));
        let base = values(&inputs[k]);
        for i in 0..base.len() {
            let mut shifted = inputs.to_vec();
            let mut p = base.clone();
            p[i] += GRAD_STEP;
            shifted[k] = Tensor::from_vec(p.clone(), inputs[k].shape(), &Device::Cpu).unwrap();
            let fp = loss(&shifted);
            p[i] -= 2.0 * GRAD_STEP;
            shifted[k] = Tensor::from_vec(p, inputs[k].shape(), &Device::Cpu).unwrap();
            let fm = loss(&shifted);
            let fd = (fp - fm) / (2.0 * GRAD_STEP);
            num += (analytic[i] - fd).powi(2);
            den += fd * fd;
        }
    }
    (num / den).sqrt()
}

#[test]
fn criterion_08_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut s1 = ParamStore::new(DType::F64);
    let mut ar = ArConv::new(&mut Builder::new(&mut s1, &mut rng).pp("ar"), 2, 3, 7).unwrap();
    randomize(&s1, 0.3, &mut rng);
    ar.set_frozen(Some((5, 5))).unwrap();
    let x = normal(&[1, 2, 8, 8], 1.0, &mut rng);
    let ar_err = grad_rel_err(&[x], &|xs| ar.forward(&xs[0]).unwrap(), &mut rng);

    let mut s2 = ParamStore::new(DType::F64);
    let apfm = Apfm::new(&mut Builder::new(&mut s2, &mut rng).pp("f"), 4, 2, 6).unwrap();
    randomize(&s2, 0.3, &mut rng);
    let temb = normal(&[1, 6], 1.0, &mut rng);
    let sp = normal(&[1, 4, 8, 8], 1.0, &mut rng);
    let se = normal(&[1, 4, 8, 8], 1.0, &mut rng);
    let apfm_err = grad_rel_err(&[sp, se], &|xs| apfm.forward(&xs[0], &xs[1], &temb).unwrap(), &mut rng);

    let xf = normal(&[1, 2, 8, 8], 1.0, &mut rng);
    let fmim_err = grad_rel_err(&[xf], &|xs| fmim_highpass(&xs[0], 0.25).unwrap(), &mut rng);

    let mut s3 = ParamStore::new(DType::F64);
    let field = VectorField::new(&mut Builder::new(&mut s3, &mut rng).pp("v"), 4).unwrap();
    randomize(&s3, 0.3, &mut rng);
    let y = normal(&[1, 4, 8, 8], 1.0, &mut rng);
    let h = Tensor::new(&[0.3f64], &Device::Cpu).unwrap();
    let mut otp_err = 0.0f64;
    for scheme in [OdeScheme::Euler, OdeScheme::Rk2] {
        let e = grad_rel_err(
            &[y.clone(), h.clone()],
            &|xs| otp_block(&xs[0], |z| field.forward(z), &xs[1], scheme).unwrap(),
            &mut rng,
        );
        otp_err = otp_err.max(e);
    }
    report(
        8,
        &[
            check(format!("arconv {ar_err:.1e}"), ar_err < GRAD_REL_TOL),
            check(format!("apfm {apfm_err:.1e}"), apfm_err < GRAD_REL_TOL),
            check(format!("fmim {fmim_err:.1e}"), fmim_err < GRAD_REL_TOL),
            check(format!("otp_block {otp_err:.1e}"), otp_err < GRAD_REL_TOL),
            within(start.elapsed(), Duration::from_secs(120)),
        ],
    );
}

// ---------------------------------------------------------------- 9, 10

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config(root: &Path) -> FoseConfig {
    let mut cfg = FoseConfig::load(&workspace_root().join("configs/toy.conf")).unwrap();
    cfg.data.root = root.join("data");
    cfg.run_root = root.join("runs");
    cfg
}

struct ToyRun {
    cfg: FoseConfig,
    outcomes: Vec<StageOutcome>,
    elapsed: Duration,
}

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_toy");
        let _ = std::fs::remove_dir_all(&root);
        let cfg = toy_config(&root);
        let start = Instant::now();
        synthesize(&cfg).unwrap();
        let outcomes = (1..=4u8).map(|k| run_stage(&cfg, k, RunOptions::default()).unwrap()).collect();
        ToyRun { cfg, outcomes, elapsed: start.elapsed() }
    })
}

fn l1(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().mean_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn criterion_09_toy_end_to_end() {
    let run = toy_run();
    let cfg = &run.cfg;
    let mut checks = Vec::new();
    for o in &run.outcomes {
        let (a, b) = o.loss_window();
        checks.push(check(
            format!("stage {} loss {a:.5} -> {b:.5} (ratio {:.3} <= {LOSS_RATIO})", o.stage, b / a),
            b <= LOSS_RATIO * a,
        ));
    }
    let opts = InferenceOptions::from_config(cfg);
    let ev = evaluate(cfg, Method::Fose, Resolution::Reduced, Split::Test, &cfg.run_root.join("eval"), opts).unwrap();
    for name in ["SAM", "ERGAS"] {
        let (f, e) = (ev.report.mean_of(name).unwrap(), ev.baseline.mean_of(name).unwrap());
        checks.push(check(
            format!("{name} fose {f:.4} vs exp {e:.4} (gain {:.1}% >= {}%)", 100.0 * (1.0 - f / e), 100.0 * EXP_IMPROVEMENT),
            f <= (1.0 - EXP_IMPROVEMENT) * e,
        ));
    }
    let [gt, lms, pan] = stack_pairs(&load_split(cfg, Split::Test).unwrap()).unwrap();
    let err = |m: Method| l1(&fuse(cfg, m, &lms, &pan, opts).unwrap(), &gt);
    let (osd, e2e, fose) = (err(Method::Osd), err(Method::E2e), err(Method::Fose));
    checks.push(check(
        format!("L1 fose {fose:.5} <= {FUSION_SLACK} x min(osd {osd:.5}, e2e {e2e:.5})"),
        fose <= FUSION_SLACK * osd.min(e2e),
    ));
    checks.push(within(run.elapsed, Duration::from_secs(30 * 60)));
    report(9, &checks);
}

#[test]
fn criterion_10_noise_ablation() {
    let run = toy_run();
    let cfg = &run.cfg;
    let [_, lms, pan] = stack_pairs(&load_split(cfg, Split::Test).unwrap()).unwrap();
    let osd = |init_noise, seed| values(&fuse(cfg, Method::Osd, &lms, &pan, InferenceOptions { init_noise, seed }).unwrap());
    let z = osd(InitNoise::Zero, 0);
    let zero_det = z == osd(InitNoise::Zero, 0) && z == osd(InitNoise::Zero, 99);
    let r1 = osd(InitNoise::Random, 1);
    let random_varies = r1 != osd(InitNoise::Random, 2) && r1 == osd(InitNoise::Random, 1);
    let out = cfg.run_root.join("ablate");
    let t = ablate(cfg, AblationKind::Noise, &out, AblateOptions::default()).unwrap();
    let cols: Vec<&str> = t.columns.iter().map(String::as_str).collect();
    let labels: Vec<&str> = (0..t.rows.len()).filter_map(|r| t.cell(r, "Noise")).collect();
    report(
        10,
        &[
            check("zero-init one-step output bit-identical across runs and seeds", zero_det),
            check("random-init output differs across seeds", random_varies),
            check(
                format!("table rows {:?}, columns {cols:?}", labels),
                labels == ["zero", "random"]
                    && cols == ["Noise", "SAM", "ERGAS", "Q8", "SCC", "D_lambda", "D_s", "HQNR"]
                    && !t.has_gaps()
                    && out.join("noise.md").exists(),
            ),
        ],
    );
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_reproducibility() {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_repro");
    let _ = std::fs::remove_dir_all(&root);
    let mut base = toy_config(&root);
    base.data.train_count = 8;
    base.data.val_count = 2;
    base.data.test_count = 2;
    base.stages[0].iterations = 6;
    base.stages[0].batch_size = 4;
    base.stages[0].val_every = 3;
    synthesize(&base).unwrap();
    let with_run = |name: &str| {
        let mut c = base.clone();
        c.run_root = root.join(name);
        c
    };
    let (a, b, c) = (with_run("a"), with_run("b"), with_run("c"));
    let digest = |cfg: &FoseConfig| load_teacher(cfg).unwrap().0.store.digest().unwrap();
    let oa = run_stage(&a, 1, RunOptions::default()).unwrap();
    let ob = run_stage(&b, 1, RunOptions::default()).unwrap();
    let part = run_stage(&c, 1, RunOptions { resume: false, stop_after: Some(3) }).unwrap();
    let oc = run_stage(&c, 1, RunOptions { resume: true, stop_after: None }).unwrap();
    let (da, db, dc) = (digest(&a), digest(&b), digest(&c));
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    report(
        11,
        &[
            check("deterministic data loading", base.data.deterministic),
            check(format!("two runs: {}.. vs {}..", &da[..12], &db[..12]), da == db && bits(&oa.losses) == bits(&ob.losses)),
            check(
                format!("stop at {} then resume: {}..", part.final_step, &dc[..12]),
                part.final_step == 3 && dc == da && bits(&oc.losses) == bits(&oa.losses),
            ),
        ],
    );
}
