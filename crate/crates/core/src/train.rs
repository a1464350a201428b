//! AdaMax training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{bits_per_dim, DualGlowModel};
use crate::nn::{Module, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Epochs between checkpoint events; 0 disables them.
    pub checkpoint_interval: usize,
    /// Steps between progress events; 0 disables them.
    pub log_interval: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(50.0),
            checkpoint_interval: 10,
            log_interval: 50,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Per-parameter first moment `m` and infinity norm `u`, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaMax<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub u: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdaMax<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdaMax {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            u: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// One update. Parameters without a gradient entry see a zero gradient.
    /// Any non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &params {
            if let Some(g) = grads.get(&p.name) {
                if g.shape() != p.value.shape() {
                    return Err(Error::dim(format!(
                        "gradient for {} has shape {:?}, parameter has {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )));
                }
                if let Some(i) = g.first_non_finite() {
                    return Err(Error::numeric(
                        format!("adamax step {}", self.t + 1),
                        format!("non-finite gradient for {} at element {i}", p.name),
                    ));
                }
            }
        }
        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one_minus_b1 = T::lit(1.0 - self.beta1);
        let eps = T::lit(self.eps);
        let rate = T::lit(self.lr / (1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32)));
        for p in params {
            let shape = p.value.shape().to_vec();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let u = self.u.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let g = grads.get(&p.name);
            for (i, th) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + one_minus_b1 * gi;
                let ui = (b2 * u.data()[i]).max(gi.abs());
                m.data_mut()[i] = mi;
                u.data_mut()[i] = ui;
                *th = *th - rate * mi / (ui + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let f = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * f;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub bits_per_dim: f64,
    pub grad_norm: f64,
    pub disc_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_bits_per_dim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Trailing moving average of bits/dim over `window` steps, one value per step.
    pub fn moving_bits_per_dim(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let v: Vec<f64> = self.steps.iter().map(|s| s.bits_per_dim).collect();
        (0..v.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                v[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// Step log as CSV with one `disc{i}` column per discriminator.
    pub fn steps_csv(&self) -> String {
        let nd = self.steps.first().map_or(0, |s| s.disc_losses.len());
        let mut out = String::from("step,epoch,loss,bits_per_dim,grad_norm");
        for i in 0..nd {
            out.push_str(&format!(",disc{i}"));
        }
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}",
                s.step, s.epoch, s.loss, s.bits_per_dim, s.grad_norm
            ));
            for d in &s.disc_losses {
                out.push_str(&format!(",{d}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,steps,mean_loss,mean_bits_per_dim\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.steps, e.mean_loss, e.mean_bits_per_dim
            ));
        }
        out
    }
}

pub enum TrainEvent<'a, T> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    /// Fired every `checkpoint_interval` epochs with the current model.
    Checkpoint { epoch: usize, model: &'a DualGlowModel<T> },
}

/// Minimizes the model objective over `dataset`. Batch order comes from a
/// generator seeded with `seed`. On divergence the model is left at its last
/// finite state and a numeric error is returned; the log so far is in `log`.
pub fn train<T: Scalar>(
    model: &mut DualGlowModel<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut TrainLog,
    mut observer: impl FnMut(TrainEvent<'_, T>),
) -> Result<()> {
    cfg.validate()?;
    let n = dataset.len();
    if n == 0 {
        return Err(Error::contract("training dataset is empty"));
    }
    let [c, h, w] = model.config.flow.input;
    if dataset.image_shape() != [c, h, w] {
        return Err(Error::dim(format!(
            "dataset images are {:?}, model expects {:?}",
            dataset.image_shape(),
            [c, h, w]
        )));
    }
    let labels = dataset.side_matrix(&model.config.side)?;
    let dims = model.dims();
    let mut opt = AdaMax::<T>::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = log.steps.len();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    for epoch in 0..cfg.epochs {
        if step >= max_steps {
            break;
        }
        order.shuffle(&mut rng);
        let first = log.steps.len();
        for idx in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break;
            }
            let x_m: Tensor<T> = dataset.x_m.select(idx)?.cast();
            let x_p: Tensor<T> = dataset.x_p.select(idx)?.cast();
            let c: Option<Tensor<T>> = labels.as_ref().map(|c| c.select(idx)).transpose()?.map(|c| c.cast());
            if !model.initialized {
                model.data_init(&x_m, &x_p)?;
            }
            let ctx = |e: Error| e.context(format!("step {}", step + 1));
            let tape = Tape::new();
            let (vp, vm) = (tape.constant(x_p)?, tape.constant(x_m)?);
            let obj = match &c {
                Some(c) => model.conditional_objective(&tape, vp, vm, c),
                None => model.dualglow_objective(&tape, vp, vm),
            }
            .map_err(ctx)?;
            let loss = obj.loss.item().as_f64();
            if !loss.is_finite() {
                return Err(ctx(Error::numeric("loss", format!("non-finite loss {loss}"))));
            }
            let mean_ll = obj.cond_ll.value().mean().as_f64();
            let disc_losses: Vec<f64> = obj.disc_losses.iter().map(|l| l.item().as_f64()).collect();
            let mut grads = tape.backward(obj.loss).map_err(ctx)?.into_params();
            let grad_norm = match cfg.grad_clip {
                Some(max) => clip_global_norm(&mut grads, max),
                None => global_norm(&grads),
            };
            opt.step(model.params_mut(), &grads).map_err(ctx)?;
            step += 1;
            let rec = StepRecord {
                step,
                epoch,
                loss,
                bits_per_dim: bits_per_dim(mean_ll, dims)?,
                grad_norm,
                disc_losses,
            };
            log.steps.push(rec);
            if cfg.log_interval > 0 && step.is_multiple_of(cfg.log_interval) {
                observer(TrainEvent::Step(log.steps.last().expect("just pushed")));
            }
        }
        let done = &log.steps[first..];
        if done.is_empty() {
            break;
        }
        let k = done.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            steps: done.len(),
            mean_loss: done.iter().map(|s| s.loss).sum::<f64>() / k,
            mean_bits_per_dim: done.iter().map(|s| s.bits_per_dim).sum::<f64>() / k,
        });
        observer(TrainEvent::Epoch(log.epochs.last().expect("just pushed")));
        if cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0 {
            observer(TrainEvent::Checkpoint {
                epoch,
                model: &*model,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Param<f64> {
        Param::new("theta", Tensor::from_vec(vec![v]))
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("theta".to_string(), Tensor::from_vec(vec![v]))])
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = param(0.7);
        let mut opt = AdaMax::new(1e-3, 0.9, 0.999, 1e-8);
        opt.step(vec![&mut p], &grad(0.0)).unwrap();
        assert_eq!(p.value.data()[0], 0.7);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = param(0.0);
        let mut opt = AdaMax::new(1e-3, 0.9, 0.999, 1e-8);
        opt.step(vec![&mut p], &grad(1.0)).unwrap();
        assert!((opt.m["theta"].data()[0] - 0.1).abs() < 1e-15);
        assert_eq!(opt.u["theta"].data()[0], 1.0);
        let expected = -0.001 * (0.1 / 0.1) / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = param(1.0);
        let mut opt = AdaMax::new(1e-3, 0.9, 0.999, 1e-8);
        let mut prev = 1.0f64;
        let mut reached = None;
        for k in 0..5000 {
            let th = p.value.data()[0];
            opt.step(vec![&mut p], &grad(2.0 * th)).unwrap();
            let now = p.value.data()[0].abs();
            match reached {
                None => {
                    assert!(now <= prev, "|θ| increased at step {k}: {prev} → {now}");
                    if now < 1e-3 {
                        reached = Some(k);
                    }
                }
                Some(_) => assert!(now < 1e-3, "|θ| left the tolerance at step {k}: {now}"),
            }
            prev = now;
        }
        assert!(reached.is_some(), "final |θ| = {prev}");
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut p = param(0.5);
        let mut opt = AdaMax::new(1e-3, 0.9, 0.999, 1e-8);
        let err = opt.step(vec![&mut p], &grad(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(p.value.data()[0], 0.5);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn infinity_norm_nondecreasing_under_constant_gradient() {
        let mut p = param(0.0);
        let mut opt = AdaMax::new(1e-3, 0.9, 0.999, 1e-8);
        let mut last = 0.0;
        for _ in 0..50 {
            opt.step(vec![&mut p], &grad(0.3)).unwrap();
            let u = opt.u["theta"].data()[0];
            assert!(u >= last && u >= 0.0);
            last = u;
        }
    }

    #[test]
    fn clipping_never_increases_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::from_vec(vec![30.0, 40.0])),
            ("b".to_string(), Tensor::from_vec(vec![0.0])),
        ]);
        let before = clip_global_norm(&mut g, 10.0);
        assert_eq!(before, 50.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
        let before = clip_global_norm(&mut g, 100.0);
        assert!((global_norm(&g) - before).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
