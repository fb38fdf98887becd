use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::raster::SamplePair;
use crate::{Error, Result};

/// Generator for one training step, a pure function of `(seed, stage, step)`.
pub fn step_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([stage]);
    h.update((step as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `[1, C, H, W]` tensor of an image.
pub fn image_tensor(a: &Array3<f32>) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let v: Vec<f32> = a.as_standard_layout().iter().copied().collect();
    Ok(Tensor::from_vec(v, (1, c, h, w), &Device::Cpu)?)
}

/// `[C, H, W]` array of one batch element.
pub fn tensor_image(t: &Tensor, index: usize) -> Result<Array3<f32>> {
    let x = t.get(index)?.to_dtype(DType::F32)?;
    let (c, h, w) = x.dims3()?;
    let v = x.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::Dimension(e.to_string()))
}

/// Stacked `gt`, `lms` and `pan` of a set of pairs.
pub fn stack_pairs(pairs: &[SamplePair]) -> Result<[Tensor; 3]> {
    if pairs.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let cat = |f: &dyn Fn(&SamplePair) -> &Array3<f32>| -> Result<Tensor> {
        let parts = pairs.iter().map(|p| image_tensor(f(p))).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    Ok([cat(&|p| p.gt.data())?, cat(&|p| p.lms.data())?, cat(&|p| p.pan.data())?])
}

/// Co-registered `[N, C_k, H, W]` components sampled together.
#[derive(Debug, Clone)]
pub struct TrainData {
    parts: Vec<Tensor>,
    crop: usize,
}

impl TrainData {
    pub fn new(parts: Vec<Tensor>, crop: usize) -> Result<Self> {
        let (n, _, h, w) = parts
            .first()
            .ok_or_else(|| Error::Validation("no training components".into()))?
            .dims4()?;
        for p in &parts {
            let (pn, _, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Dimension("training components are not co-registered".into()));
            }
        }
        if n == 0 || crop == 0 || crop > h || crop > w {
            return Err(Error::Config(format!("crop {crop} does not fit {h}x{w} images")));
        }
        Ok(Self { parts, crop })
    }

    pub fn len(&self) -> usize {
        self.parts[0].dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Random images (with replacement) and random aligned crops, drawn from
    /// `rng`, which is left positioned after the draws.
    pub fn batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        let (n, _, h, w) = self.parts[0].dims4()?;
        let c = self.crop;
        let picks: Vec<(usize, usize, usize)> = (0..batch)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..=h - c), rng.random_range(0..=w - c)))
            .collect();
        self.parts
            .iter()
            .map(|p| {
                let crops = picks
                    .iter()
                    .map(|&(i, y, x)| Ok(p.narrow(0, i, 1)?.narrow(2, y, c)?.narrow(3, x, c)?))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::cat(&crops, 0)?)
            })
            .collect()
    }
}

/// Batches for consecutive steps. Each step's content depends only on
/// `(seed, stage, step)`, so the prefetching and inline paths agree.
pub struct BatchStream {
    inline: Option<(TrainData, usize, u64, u8)>,
    rx: Option<Receiver<Result<(Vec<Tensor>, ChaCha8Rng)>>>,
    worker: Option<JoinHandle<()>>,
    next: usize,
}

impl BatchStream {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        data: TrainData,
        batch: usize,
        seed: u64,
        stage: u8,
        start: usize,
        end: usize,
        deterministic: bool,
        prefetch: usize,
    ) -> Self {
        if deterministic || prefetch == 0 {
            return Self {
                inline: Some((data, batch, seed, stage)),
                rx: None,
                worker: None,
                next: start,
            };
        }
        let (tx, rx) = sync_channel(prefetch);
        let worker = std::thread::spawn(move || {
            for step in start..end {
                let mut rng = step_rng(seed, stage, step);
                let item = data.batch(batch, &mut rng).map(|b| (b, rng));
                if tx.send(item).is_err() {
                    return;
                }
            }
        });
        Self {
            inline: None,
            rx: Some(rx),
            worker: Some(worker),
            next: start,
        }
    }

    /// Batch components and the step generator positioned after sampling.
    pub fn next_batch(&mut self) -> Result<(Vec<Tensor>, ChaCha8Rng)> {
        let step = self.next;
        self.next += 1;
        if let Some((data, batch, seed, stage)) = &self.inline {
            let mut rng = step_rng(*seed, *stage, step);
            let b = data.batch(*batch, &mut rng)?;
            return Ok((b, rng));
        }
        self.rx
            .as_ref()
            .expect("worker channel")
            .recv()
            .map_err(|_| Error::InvalidArgument("batch stream exhausted".into()))?
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> TrainData {
        let a = Tensor::arange(0f32, 2.0 * 3.0 * 8.0 * 8.0, &Device::Cpu).unwrap().reshape((2, 3, 8, 8)).unwrap();
        let b = (a.narrow(1, 0, 1).unwrap() * -1.0).unwrap();
        TrainData::new(vec![a, b], 4).unwrap()
    }

    #[test]
    fn prefetch_matches_inline() {
        let mut s1 = BatchStream::new(data(), 3, 7, 1, 5, 9, true, 0);
        let mut s2 = BatchStream::new(data(), 3, 7, 1, 5, 9, false, 2);
        for _ in 5..9 {
            let (a, mut ra) = s1.next_batch().unwrap();
            let (b, mut rb) = s2.next_batch().unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.flatten_all().unwrap().to_vec1::<f32>().unwrap(), y.flatten_all().unwrap().to_vec1::<f32>().unwrap());
            }
            assert_eq!(ra.random::<u64>(), rb.random::<u64>());
        }
    }

    #[test]
    fn crops_stay_aligned() {
        let d = data();
        let mut rng = step_rng(0, 1, 0);
        let b = d.batch(5, &mut rng).unwrap();
        assert_eq!(b[0].dims(), &[5, 3, 4, 4]);
        let first = (b[0].narrow(1, 0, 1).unwrap() * -1.0).unwrap();
        let diff = (first - &b[1]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        assert!(TrainData::new(vec![Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap()], 3).is_err());
    }
}
