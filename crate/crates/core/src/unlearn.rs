//! Unlearning methods: the two boundary-shifting methods and four baselines.
//!
//! Every method reads training data only through [`SplitAccess`]. Boundary
//! Shrink, Boundary Expanding, Random Labels and Negative Gradient read only
//! the forgetting part; Retrain and Finetune read only the remaining part.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{random_other_label, Example, SplitAccess};
use crate::error::{Error, Result};
use crate::nn::{train_logged, Classifier, Objective, OptimizerConfig, Trainer};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BoundaryShrink,
    #[serde(rename = "boundary_expanding")]
    BoundaryExpand,
    Retrain,
    Finetune,
    RandomLabels,
    NegativeGradient,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Retrain,
        Method::Finetune,
        Method::NegativeGradient,
        Method::RandomLabels,
        Method::BoundaryShrink,
        Method::BoundaryExpand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BoundaryShrink => "boundary_shrink",
            Method::BoundaryExpand => "boundary_expanding",
            Method::Retrain => "retrain",
            Method::Finetune => "finetune",
            Method::RandomLabels => "random_labels",
            Method::NegativeGradient => "negative_gradient",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "boundary_shrink" | "shrink" => Method::BoundaryShrink,
            "boundary_expanding" | "boundary_expand" | "expand" => Method::BoundaryExpand,
            "retrain" => Method::Retrain,
            "finetune" => Method::Finetune,
            "random_labels" => Method::RandomLabels,
            "negative_gradient" => Method::NegativeGradient,
            other => {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                return Err(Error::invalid(format!(
                    "unknown method `{other}`; valid methods: {}",
                    valid.join(", ")
                )));
            }
        };
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkConfig {
    /// Step size of the gradient-sign perturbation, in standardized feature units.
    pub epsilon: f64,
    pub finetune: OptimizerConfig,
    /// Recompute cross samples and labels against the current model at the
    /// start of every epoch instead of once against the original.
    pub refresh_labels_each_epoch: bool,
}

impl ShrinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        self.finetune.validate()
    }
}

/// A forgetting sample with its replacement label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabeledExample {
    pub features: Tensor,
    pub new_label: usize,
    pub original_label: usize,
}

impl RelabeledExample {
    fn to_example(&self) -> Example {
        Example {
            features: self.features.clone(),
            label: self.new_label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnResult {
    pub model: Classifier,
    pub method: Method,
    pub wall_clock_seconds: f64,
    pub per_epoch_loss: Vec<f64>,
}

/// Cross sample `x + epsilon * sign(grad_x CE(x, label))`, one step, no clipping.
/// A zero gradient coordinate leaves that coordinate unchanged.
pub fn neighbor_search(model: &Classifier, x: &Tensor, label: usize, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    sign_step(model, x, label, epsilon)
}

fn sign_step(model: &Classifier, x: &Tensor, label: usize, epsilon: f64) -> Result<Tensor> {
    let g = model.grad_input(x, label)?;
    let data = x
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(v, d)| v + epsilon * sign(*d))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Highest-logit class other than `t` at `x_prime`, lowest index on ties.
pub fn nearest_incorrect_label(model: &Classifier, x_prime: &Tensor, t: usize) -> Result<usize> {
    let k = model.num_classes();
    if model.is_expanded() {
        return Err(Error::state("nearest-incorrect labels need an unexpanded model"));
    }
    if k < 2 {
        return Err(Error::state("nearest-incorrect label needs at least two classes"));
    }
    if t >= k {
        return Err(Error::invalid(format!("class {t} out of range for {k} classes")));
    }
    let logits = model.forward(x_prime)?;
    let l = logits.as_slice();
    let mut best = if t == 0 { 1 } else { 0 };
    for (i, v) in l.iter().enumerate() {
        if i != t && *v > l[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Relabels every forgetting sample with its nearest-but-incorrect class,
/// using cross samples computed against `model`.
pub fn shrink_relabel(model: &Classifier, forget: &[Example], t: usize, epsilon: f64) -> Result<Vec<RelabeledExample>> {
    forget
        .iter()
        .map(|ex| {
            let cross = neighbor_search(model, &ex.features, t, epsilon)?;
            Ok(RelabeledExample {
                features: ex.features.clone(),
                new_label: nearest_incorrect_label(model, &cross, t)?,
                original_label: ex.label,
            })
        })
        .collect()
}

fn check_original(original: &Classifier, split: &(impl SplitAccess + ?Sized)) -> Result<()> {
    if original.is_expanded() {
        return Err(Error::state("the original model must not be expanded"));
    }
    if original.num_classes() != split.num_classes() {
        return Err(Error::invalid(format!(
            "model has {} classes but the split has {}",
            original.num_classes(),
            split.num_classes()
        )));
    }
    Ok(())
}

/// Boundary Shrink: relabel forgetting samples to their nearest incorrect
/// class and finetune a copy of the original on them.
pub fn boundary_shrink(original: &Classifier, split: &(impl SplitAccess + ?Sized), cfg: &ShrinkConfig) -> Result<UnlearnResult> {
    cfg.validate()?;
    check_original(original, split)?;
    let start = Instant::now();
    let t = split.forget_class();
    let forget = split.forget_train();
    let mut trainer = Trainer::new(original.clone(), &cfg.finetune, Objective::Minimize)?;
    let mut losses = Vec::with_capacity(cfg.finetune.epochs);
    if cfg.finetune.epochs > 0 && !forget.is_empty() {
        let mut relabeled: Vec<Example> = shrink_relabel(original, forget, t, cfg.epsilon)?
            .iter()
            .map(RelabeledExample::to_example)
            .collect();
        for epoch in 0..cfg.finetune.epochs {
            if cfg.refresh_labels_each_epoch && epoch > 0 {
                relabeled = shrink_relabel(trainer.model(), forget, t, cfg.epsilon)?
                    .iter()
                    .map(RelabeledExample::to_example)
                    .collect();
            }
            losses.push(trainer.epoch(&relabeled)?);
        }
    }
    Ok(UnlearnResult {
        model: trainer.into_model(),
        method: Method::BoundaryShrink,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        per_epoch_loss: losses,
    })
}

/// Boundary Expanding: add a shadow output, finetune forgetting samples
/// onto it, then prune it.
pub fn boundary_expand(original: &Classifier, split: &(impl SplitAccess + ?Sized), cfg: &OptimizerConfig) -> Result<UnlearnResult> {
    cfg.validate()?;
    check_original(original, split)?;
    let start = Instant::now();
    let shadow = original.num_classes();
    let wide = original.expand_output()?;
    let relabeled: Vec<Example> = split
        .forget_train()
        .iter()
        .map(|ex| Example {
            features: ex.features.clone(),
            label: shadow,
        })
        .collect();
    let (wide, losses) = train_logged(&wide, &relabeled, cfg, Objective::Minimize)?;
    let model = wide.prune_output(shadow)?;
    Ok(UnlearnResult {
        model,
        method: Method::BoundaryExpand,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        per_epoch_loss: losses,
    })
}

/// Trains a freshly initialised network on the remaining data only.
pub fn retrain(split: &(impl SplitAccess + ?Sized), widths: &[usize], cfg: &OptimizerConfig, init_seed: u64) -> Result<UnlearnResult> {
    cfg.validate()?;
    if widths.last() != Some(&split.num_classes()) {
        return Err(Error::invalid(format!(
            "architecture {widths:?} must end in {} classes",
            split.num_classes()
        )));
    }
    let start = Instant::now();
    let fresh = Classifier::random(widths, &mut seeded(init_seed))?;
    let (model, losses) = train_logged(&fresh, split.remain_train(), cfg, Objective::Minimize)?;
    Ok(UnlearnResult {
        model,
        method: Method::Retrain,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        per_epoch_loss: losses,
    })
}

/// Finetunes the original on the remaining data.
pub fn finetune_baseline(original: &Classifier, split: &(impl SplitAccess + ?Sized), cfg: &OptimizerConfig) -> Result<UnlearnResult> {
    cfg.validate()?;
    check_original(original, split)?;
    let start = Instant::now();
    let (model, losses) = train_logged(original, split.remain_train(), cfg, Objective::Minimize)?;
    Ok(UnlearnResult {
        model,
        method: Method::Finetune,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        per_epoch_loss: losses,
    })
}

/// Random labels for the forgetting samples, uniform over the other classes.
pub fn random_relabel(forget: &[Example], k: usize, t: usize, seed: u64) -> Result<Vec<RelabeledExample>> {
    if k < 2 || t >= k {
        return Err(Error::invalid(format!("cannot relabel class {t} among {k} classes")));
    }
    let mut rng = seeded(seed);
    Ok(forget
        .iter()
        .map(|ex| RelabeledExample {
            features: ex.features.clone(),
            new_label: random_other_label(&mut rng, k, t),
            original_label: ex.label,
        })
        .collect())
}

/// Finetunes the original on randomly relabeled forgetting samples.
pub fn random_labels_baseline(
    original: &Classifier,
    split: &(impl SplitAccess + ?Sized),
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<UnlearnResult> {
    cfg.validate()?;
    check_original(original, split)?;
    let start = Instant::now();
    let relabeled: Vec<Example> = random_relabel(split.forget_train(), split.num_classes(), split.forget_class(), seed)?
        .iter()
        .map(RelabeledExample::to_example)
        .collect();
    let (model, losses) = train_logged(original, &relabeled, cfg, Objective::Minimize)?;
    Ok(UnlearnResult {
        model,
        method: Method::RandomLabels,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        per_epoch_loss: losses,
    })
}

/// Gradient ascent on the forgetting samples with their true labels.
pub fn negative_gradient_baseline(
    original: &Classifier,
    split: &(impl SplitAccess + ?Sized),
    cfg: &OptimizerConfig,
) -> Result<UnlearnResult> {
    cfg.validate()?;
    check_original(original, split)?;
    let start = Instant::now();
    let (model, losses) = train_logged(original, split.forget_train(), cfg, Objective::Maximize)?;
    Ok(UnlearnResult {
        model,
        method: Method::NegativeGradient,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        per_epoch_loss: losses,
    })
}
