use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::FoseConfig;
use super::eval::Method;
use super::models::schedule;
use crate::denoiser::Denoiser;
use crate::diffusion::{sample_multistep, sample_onestep, SamplerConfig};
use crate::e2e::E2ENet;
use crate::ensemble::Connector;
use crate::nn::{trace_costs, Builder, CostItem, ParamStore};
use crate::Result;

/// Parameters, multiply-accumulates per output image and denoiser calls per
/// output image of one method at a stated input size.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub method: String,
    pub input: (usize, usize, usize),
    pub params: usize,
    pub macs: u64,
    pub invocations: usize,
    /// Per-layer tallies of a single pass through each network.
    pub items: Vec<CostItem>,
}

impl CostReport {
    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }

    /// Totals per layer kind.
    pub fn by_kind(&self) -> BTreeMap<&'static str, u64> {
        let mut m = BTreeMap::new();
        for it in &self.items {
            *m.entry(it.kind.label()).or_insert(0) += it.macs;
        }
        m
    }

    pub fn to_text(&self) -> String {
        let (c, h, w) = self.input;
        let mut s = format!(
            "{}: input {c}x{h}x{w}, params {}, MACs {}, denoiser calls {}\n",
            self.method, self.params, self.macs, self.invocations
        );
        s.push_str("  per pass:\n");
        for (k, v) in self.by_kind() {
            let _ = writeln!(s, "    {k}: {v}");
        }
        s
    }
}

fn pass_macs(items: &[CostItem]) -> u64 {
    items.iter().map(|i| i.macs).sum()
}

/// Denoiser calls made by the sampler used for `method`, counted by running
/// it with a stub predictor.
pub fn sampler_invocations(cfg: &FoseConfig, method: Method) -> Result<usize> {
    let sched = schedule(cfg)?;
    let mut calls = 0usize;
    let mut stub = |x: &Tensor, _t: usize| -> Result<Tensor> {
        calls += 1;
        Ok(x.zeros_like()?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = (1, 1, 1, 1);
    match method {
        Method::Dm { steps } => {
            let s = SamplerConfig {
                num_steps: steps,
                ..SamplerConfig::default()
            };
            sample_multistep(&mut stub, shape, DType::F32, &Device::Cpu, &sched, &s, &mut rng)?;
        }
        Method::Osd | Method::Fose => {
            sample_onestep(&mut stub, shape, DType::F32, &Device::Cpu, cfg.model.init_noise, cfg.model.t_infer, &mut rng)?;
        }
        Method::Exp | Method::E2e => {}
    }
    Ok(calls)
}

/// Cost of `method` on freshly initialised networks for one `h × w` image.
pub fn count_cost(cfg: &FoseConfig, method: Method, h: usize, w: usize) -> Result<CostReport> {
    let c = cfg.data.bands;
    let dev = Device::Cpu;
    let lms = Tensor::zeros((1, c, h, w), DType::F32, &dev)?;
    let pan = Tensor::zeros((1, 1, h, w), DType::F32, &dev)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let invocations = sampler_invocations(cfg, method)?;
    let mut params = 0;
    let mut items = Vec::new();
    let mut macs = 0u64;
    if matches!(method, Method::Dm { .. } | Method::Osd | Method::Fose) {
        let mut store = ParamStore::new(DType::F32);
        let d = Denoiser::new(&mut Builder::new(&mut store, &mut rng), &cfg.model.denoiser)?;
        let (out, it) = trace_costs(|| d.forward(&lms, &lms, &pan, &[cfg.model.t_infer]));
        out?;
        params += store.num_params();
        macs += pass_macs(&it) * invocations as u64;
        items.extend(it);
    }
    if matches!(method, Method::E2e | Method::Fose) {
        let mut store = ParamStore::new(DType::F32);
        let e = E2ENet::new(&mut Builder::new(&mut store, &mut rng), &cfg.model.e2e)?;
        let (out, it) = trace_costs(|| e.forward(&lms, &pan));
        out?;
        params += store.num_params();
        macs += pass_macs(&it);
        items.extend(it);
    }
    if method == Method::Fose {
        let mut store = ParamStore::new(DType::F32);
        let k = Connector::new(&mut Builder::new(&mut store, &mut rng), &cfg.model.connector)?;
        let (out, it) = trace_costs(|| k.forward(&lms, &lms, false));
        out?;
        params += store.num_params();
        macs += pass_macs(&it);
        items.extend(it);
    }
    Ok(CostReport {
        method: method.to_string(),
        input: (c, h, w),
        params,
        macs,
        invocations,
        items,
    })
}

/// Ratio of multi-step to fused cost.
pub fn speedup(slow_gmacs: f64, fast_gmacs: f64) -> f64 {
    slow_gmacs / fast_gmacs
}
