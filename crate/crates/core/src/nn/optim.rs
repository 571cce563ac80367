//! Mini-batch momentum SGD.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Classifier, Gradients};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::rng::seeded;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Classical momentum coefficient in `[0, 1)`.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            seed: 0,
        }
    }
}

/// Whether updates descend or ascend the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Minimize,
    Maximize,
}

/// Trains `model` on `data` and returns the updated copy.
pub fn train(model: &Classifier, data: &[Example], cfg: &OptimizerConfig) -> Result<Classifier> {
    train_logged(model, data, cfg, Objective::Minimize).map(|(m, _)| m)
}

/// Like [`train`], also returning the mean per-sample loss seen during each epoch.
///
/// Loss values are measured on each batch before its update.
pub fn train_logged(
    model: &Classifier,
    data: &[Example],
    cfg: &OptimizerConfig,
    objective: Objective,
) -> Result<(Classifier, Vec<f64>)> {
    check_examples(model, data)?;
    let mut trainer = Trainer::new(model.clone(), cfg, objective)?;
    if data.is_empty() {
        return Ok((trainer.into_model(), Vec::new()));
    }
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        losses.push(trainer.epoch(data)?);
    }
    Ok((trainer.into_model(), losses))
}

fn check_examples(model: &Classifier, data: &[Example]) -> Result<()> {
    for (i, ex) in data.iter().enumerate() {
        model.check_input(ex.features.as_slice())?;
        if ex.label >= model.output_dim() {
            return Err(Error::invalid(format!(
                "example {i} has label {} but the model has {} outputs",
                ex.label,
                model.output_dim()
            )));
        }
    }
    Ok(())
}

/// Stateful momentum-SGD loop. Velocity and shuffle state persist across
/// epochs, so the training set may change between calls to [`Trainer::epoch`].
#[derive(Debug)]
pub struct Trainer {
    model: Classifier,
    cfg: OptimizerConfig,
    sign: f64,
    rng: ChaCha8Rng,
    grads: Gradients,
    velocity: Gradients,
    epochs_run: usize,
}

impl Trainer {
    pub fn new(model: Classifier, cfg: &OptimizerConfig, objective: Objective) -> Result<Self> {
        cfg.validate()?;
        let sign = match objective {
            Objective::Minimize => 1.0,
            Objective::Maximize => -1.0,
        };
        Ok(Self {
            grads: Gradients::zeros_like(&model),
            velocity: Gradients::zeros_like(&model),
            model,
            cfg: *cfg,
            sign,
            rng: seeded(cfg.seed),
            epochs_run: 0,
        })
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn into_model(self) -> Classifier {
        self.model
    }

    /// One pass over `data` in seeded shuffled order; returns the mean loss.
    pub fn epoch(&mut self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("training epoch over an empty set"));
        }
        check_examples(&self.model, data)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            self.grads.fill_zero();
            for &i in batch {
                let ex = &data[i];
                total += self
                    .model
                    .accumulate(ex.features.as_slice(), ex.label, &mut self.grads);
            }
            self.grads.scale(1.0 / batch.len() as f64);
            self.velocity
                .momentum_step(&self.grads, self.cfg.momentum, self.sign);
            self.model.apply_update(&self.velocity, self.cfg.learning_rate);
        }
        if !self.model.is_finite() {
            return Err(Error::state(format!(
                "training diverged (non-finite parameters) in epoch {}",
                self.epochs_run
            )));
        }
        self.epochs_run += 1;
        Ok(total / data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded as rng_from;
    use rand::Rng;

    fn two_blobs(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = rng_from(seed);
        (0..2 * n)
            .map(|i| {
                let label = i % 2;
                let c = if label == 0 { -1.5 } else { 1.5 };
                Example::new(
                    vec![c + rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0)],
                    label,
                )
            })
            .collect()
    }

    fn accuracy(model: &Classifier, data: &[Example]) -> f64 {
        let hits = data
            .iter()
            .filter(|e| model.predict(e.features.as_slice()).unwrap() == e.label)
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn zero_epochs_is_identity() {
        let model = Classifier::random(&[2, 8, 2], &mut rng_from(1)).unwrap();
        let cfg = OptimizerConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&model, &two_blobs(10, 2), &cfg).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn separable_blobs_are_fit_exactly() {
        let data = two_blobs(50, 3);
        let model = Classifier::random(&[2, 16, 2], &mut rng_from(4)).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            epochs: 100,
            seed: 9,
        };
        let trained = train(&model, &data, &cfg).unwrap();
        assert_eq!(accuracy(&trained, &data), 1.0);
    }

    #[test]
    fn converged_problem_has_small_gradient() {
        let data = two_blobs(50, 3);
        let model = Classifier::random(&[2, 16, 2], &mut rng_from(4)).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 100,
            epochs: 2000,
            seed: 9,
        };
        let before = model.grad_params(&data).unwrap().norm();
        let trained = train(&model, &data, &cfg).unwrap();
        let after = trained.grad_params(&data).unwrap().norm();
        assert!(after < 1e-2 && after < before * 1e-2, "{before} -> {after}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let data = two_blobs(30, 5);
        let model = Classifier::random(&[2, 8, 8, 2], &mut rng_from(6)).unwrap();
        let cfg = OptimizerConfig {
            epochs: 5,
            batch_size: 7,
            learning_rate: 0.01,
            ..Default::default()
        };
        assert_eq!(train(&model, &data, &cfg).unwrap(), train(&model, &data, &cfg).unwrap());
    }

    #[test]
    fn rejects_out_of_range_label_and_bad_config() {
        let model = Classifier::random(&[2, 4, 2], &mut rng_from(1)).unwrap();
        let bad = vec![Example::new(vec![0.0, 0.0], 2)];
        assert!(train(&model, &bad, &OptimizerConfig::default()).is_err());
        let ok = vec![Example::new(vec![0.0, 0.0], 1)];
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(train(&model, &ok, &cfg).is_err());
        let cfg = OptimizerConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(train(&model, &ok, &cfg).is_err());
    }
}
