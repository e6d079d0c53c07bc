//! Shared fine-tuning machinery: AdamW with a linear warmup/decay schedule,
//! gradient clipping and accumulation, parameter snapshots, seeded batching.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backends::{BackendError, Result};
use crate::util::mix;

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    /// Warmup covers `ceil(warmup_ratio * total_steps)` steps.
    pub fn with_ratio(base_lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            warmup_steps: (warmup_ratio * total_steps as f64).ceil() as usize,
            total_steps,
        }
    }

    /// No warmup and no decay.
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: 0,
            total_steps: usize::MAX,
        }
    }

    /// Learning rate applied at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps.max(1) as f64;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        self.base_lr * (remaining / span).max(0.0)
    }
}

/// AdamW driven by a schedule, with optional global-norm clipping.
pub struct ScheduledAdamW {
    opt: AdamW,
    vars: Vec<Var>,
    schedule: LinearSchedule,
    clip: Option<f64>,
    step: usize,
}

impl ScheduledAdamW {
    pub fn new(vars: Vec<Var>, schedule: LinearSchedule, weight_decay: f64, clip: Option<f64>) -> Result<Self> {
        if vars.is_empty() {
            return Err(BackendError::InvalidConfig("model has no trainable parameters".into()));
        }
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: schedule.lr_at(0),
                weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            opt,
            vars,
            schedule,
            clip,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update. Returns the gradient norm before clipping.
    pub fn step(&mut self, grads: &mut GradStore) -> Result<f64> {
        let norm = grad_norm(&self.vars, grads)?;
        if let Some(max) = self.clip {
            if norm > max {
                scale_grads(&self.vars, grads, max / (norm + 1e-6))?;
            }
        }
        self.opt.set_learning_rate(self.schedule.lr_at(self.step));
        self.opt.step(grads)?;
        self.step += 1;
        Ok(norm)
    }
}

/// Global L2 norm of the gradients of `vars`.
pub fn grad_norm(vars: &[Var], grads: &GradStore) -> Result<f64> {
    let mut total = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            total += f64::from(g.sqr()?.sum_all()?.to_scalar::<f32>()?);
        }
    }
    Ok(total.sqrt())
}

fn scale_grads(vars: &[Var], grads: &mut GradStore, factor: f64) -> Result<()> {
    for v in vars {
        if let Some(g) = grads.remove(v) {
            grads.insert(v, (g * factor)?);
        }
    }
    Ok(())
}

/// Sums gradients over micro-batches.
#[derive(Default)]
pub struct GradAccumulator {
    grads: Option<GradStore>,
    micro_batches: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, loss: &Tensor) -> Result<()> {
        let g = loss.backward()?;
        match &mut self.grads {
            Some(acc) => acc.extend(g)?,
            None => self.grads = Some(g),
        }
        self.micro_batches += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.micro_batches
    }

    pub fn is_empty(&self) -> bool {
        self.micro_batches == 0
    }

    pub fn take(&mut self) -> Option<GradStore> {
        self.micro_batches = 0;
        self.grads.take()
    }
}

/// Copies of parameter values, for restoring the best epoch.
pub struct Snapshot(Vec<Tensor>);

impl Snapshot {
    pub fn capture(vars: &[Var]) -> Result<Self> {
        Ok(Self(vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?))
    }

    pub fn restore(&self, vars: &[Var]) -> Result<()> {
        for (v, t) in vars.iter().zip(&self.0) {
            v.set(t)?;
        }
        Ok(())
    }
}

/// Index batches of a seeded permutation of `0..n`; the seed is mixed with the epoch.
pub fn shuffled_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mean of softmax cross-entropy between `logits [b, c]` and class `targets`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let t = Tensor::from_vec(targets.to_vec(), targets.len(), logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::nn::device;
    use candle_core::DType;

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule::with_ratio(1.0, 0.2, 10);
        assert_eq!(s.warmup_steps, 2);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(1), 0.5);
        assert_eq!(s.lr_at(2), 1.0);
        assert_eq!(s.lr_at(6), 0.5);
        assert_eq!(s.lr_at(10), 0.0);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = shuffled_batches(10, 3, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, shuffled_batches(10, 3, 1, 0));
        assert_ne!(b, shuffled_batches(10, 3, 1, 1));
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let v = Var::from_vec(vec![0f32; 4], 4, &device()).unwrap();
        let loss = (v.as_tensor() * 100.0).unwrap().sum_all().unwrap();
        let mut grads = loss.backward().unwrap();
        let vars = vec![v.clone()];
        assert!((grad_norm(&vars, &grads).unwrap() - 200.0).abs() < 1e-3);
        scale_grads(&vars, &mut grads, 0.5).unwrap();
        assert!((grad_norm(&vars, &grads).unwrap() - 100.0).abs() < 1e-3);
    }

    #[test]
    fn accumulation_sums_gradients() {
        let v = Var::from_vec(vec![1f32, 2.0], 2, &device()).unwrap();
        let mut acc = GradAccumulator::default();
        acc.add(&v.as_tensor().sum_all().unwrap()).unwrap();
        acc.add(&(v.as_tensor() * 3.0).unwrap().sum_all().unwrap()).unwrap();
        assert_eq!(acc.len(), 2);
        let g = acc.take().unwrap();
        assert_eq!(g.get(&v).unwrap().to_vec1::<f32>().unwrap(), vec![4.0, 4.0]);
        assert!(acc.is_empty());
    }

    #[test]
    fn snapshot_restores_values() {
        let v = Var::zeros(3, DType::F32, &device()).unwrap();
        let snap = Snapshot::capture(std::slice::from_ref(&v)).unwrap();
        v.set(&Tensor::ones(3, DType::F32, &device()).unwrap()).unwrap();
        snap.restore(std::slice::from_ref(&v)).unwrap();
        assert_eq!(v.as_tensor().to_vec1::<f32>().unwrap(), vec![0.0; 3]);
    }
}
