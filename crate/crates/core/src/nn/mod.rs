//! Fully-connected ReLU classifier with hand-written backpropagation.
//!
//! Weights are stored row-major with shape `[out, in]`. The final layer is
//! linear and produces logits; every earlier layer applies ReLU.

mod optim;

pub use optim::{train, train_logged, Objective, OptimizerConfig, Trainer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    weights: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 || bias.shape().len() != 1 {
            return Err(Error::invalid("dense layer needs 2-d weights and 1-d bias"));
        }
        if weights.shape()[0] != bias.len() {
            return Err(Error::invalid(format!(
                "weights have {} rows but bias has {} entries",
                weights.shape()[0],
                bias.len()
            )));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::invalid("layer parameters must be finite"));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Tensor::zeros(vec![output, input]),
            bias: Tensor::zeros(vec![output]),
        }
    }

    /// He-uniform weights, zero bias.
    fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weights: Tensor::new(vec![output, input], data).expect("shape matches"),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &[f64] {
        self.weights.as_slice()
    }

    pub fn bias(&self) -> &[f64] {
        self.bias.as_slice()
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.weights.as_mut_slice()
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        self.bias.as_mut_slice()
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        let n_in = self.input_dim();
        out.clear();
        out.extend(
            self.weights
                .as_slice()
                .chunks_exact(n_in)
                .zip(self.bias.as_slice())
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }
}

/// A multilayer perceptron classifier over `num_classes` classes.
///
/// When `expanded` is set the final layer carries one extra "shadow" output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    layers: Vec<Dense>,
    num_classes: usize,
    expanded: bool,
}

impl Classifier {
    /// Builds a network from already-constructed layers, checking that
    /// dimensions chain and that the output width matches `num_classes`.
    pub fn from_layers(layers: Vec<Dense>, num_classes: usize, expanded: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("classifier needs at least one layer"));
        }
        if num_classes == 0 {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::invalid(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        let width = layers.last().map(Dense::output_dim).unwrap_or(0);
        let expected = num_classes + usize::from(expanded);
        if width != expected {
            return Err(Error::invalid(format!(
                "final layer width {width} does not match {num_classes} classes (expanded: {expanded})"
            )));
        }
        Ok(Self {
            layers,
            num_classes,
            expanded,
        })
    }

    /// Randomly initialised network. `widths` lists every layer width from
    /// the input dimension to the number of classes, e.g. `[2, 64, 64, 10]`.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "architecture {widths:?} needs at least two positive widths"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], rng))
            .collect();
        Self::from_layers(layers, widths[widths.len() - 1], false)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_expanded(&self) -> bool {
        self.expanded
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Width of the final layer: `K`, or `K + 1` when expanded.
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Pre-softmax logits for one input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.as_slice())?;
        Ok(Tensor::vector(self.logits(x.as_slice())))
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Logits without the dimension check; callers guarantee `x.len() == input_dim`.
    pub(crate) fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i != last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        self.check_input(x)?;
        Ok(argmax(&self.logits(x)))
    }

    /// Forward pass that keeps every layer's input and pre-activation.
    fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.affine(&cur, &mut z);
            let next = if i == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            inputs.push(std::mem::replace(&mut cur, next));
            pre.push(z);
        }
        Trace {
            inputs,
            pre,
            logits: cur,
        }
    }

    /// Backpropagates `delta` (dL/dlogits) through the network, accumulating
    /// parameter gradients into `grads` when given, and returns dL/dx.
    fn backward(&self, trace: &Trace, mut delta: Vec<f64>, mut grads: Option<&mut Gradients>) -> Vec<f64> {
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let n_in = layer.input_dim();
            let input = &trace.inputs[i];
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = &mut g.layers[i];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (gwv, a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *gwv += d * a;
                    }
                }
            }
            let mut prev = vec![0.0; n_in];
            for (row, d) in layer.weights().chunks_exact(n_in).zip(&delta) {
                if *d == 0.0 {
                    continue;
                }
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            if i > 0 {
                // ReLU derivative, taken as 0 at the kink.
                for (p, z) in prev.iter_mut().zip(&trace.pre[i - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.output_dim() {
            return Err(Error::invalid(format!(
                "label {label} out of range for output width {}",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Adds the cross-entropy gradient of one sample into `grads` and
    /// returns the sample loss.
    pub(crate) fn accumulate(&self, x: &[f64], label: usize, grads: &mut Gradients) -> f64 {
        let trace = self.trace(x);
        let (loss, delta) = loss_and_delta(&trace.logits, label);
        self.backward(&trace, delta, Some(grads));
        loss
    }

    /// Mean cross-entropy gradient over `batch` with respect to every weight and bias.
    pub fn grad_params(&self, batch: &[Example]) -> Result<Gradients> {
        if batch.is_empty() {
            return Err(Error::invalid("gradient of an empty batch"));
        }
        let mut grads = Gradients::zeros_like(self);
        for ex in batch {
            self.check_input(ex.features.as_slice())?;
            self.check_label(ex.label)?;
            self.accumulate(ex.features.as_slice(), ex.label, &mut grads);
        }
        grads.scale(1.0 / batch.len() as f64);
        Ok(grads)
    }

    /// Gradient of the cross-entropy at `(x, label)` with respect to `x`.
    pub fn grad_input(&self, x: &Tensor, label: usize) -> Result<Tensor> {
        self.check_input(x.as_slice())?;
        self.check_label(label)?;
        let trace = self.trace(x.as_slice());
        let (_, delta) = loss_and_delta(&trace.logits, label);
        let g = self.backward(&trace, delta, None);
        Tensor::new(x.shape().to_vec(), g)
    }

    /// Mean cross-entropy over a set of examples.
    pub fn mean_loss(&self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("loss of an empty set"));
        }
        let mut total = 0.0;
        for ex in data {
            self.check_input(ex.features.as_slice())?;
            total += cross_entropy(&self.logits(ex.features.as_slice()), ex.label)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Appends a zero-initialised shadow output neuron.
    ///
    /// The first `K` logits are unchanged for every input and the new logit is 0.
    pub fn expand_output(&self) -> Result<Classifier> {
        if self.expanded {
            return Err(Error::state("classifier is already expanded"));
        }
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("non-empty");
        let n_in = last.input_dim();
        let n_out = last.output_dim();
        let mut w = std::mem::replace(&mut last.weights, Tensor::zeros(vec![0])).into_vec();
        w.extend(std::iter::repeat_n(0.0, n_in));
        let mut b = std::mem::replace(&mut last.bias, Tensor::zeros(vec![0])).into_vec();
        b.push(0.0);
        last.weights = Tensor::new(vec![n_out + 1, n_in], w)?;
        last.bias = Tensor::vector(b);
        out.expanded = true;
        Ok(out)
    }

    /// Removes the shadow neuron added by [`Classifier::expand_output`].
    /// Only `index == K` is accepted.
    pub fn prune_output(&self, index: usize) -> Result<Classifier> {
        if !self.expanded {
            return Err(Error::invalid("prune_output on a classifier that is not expanded"));
        }
        if index != self.num_classes {
            return Err(Error::invalid(format!(
                "only the shadow neuron {} may be pruned, got {index}",
                self.num_classes
            )));
        }
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("non-empty");
        let n_in = last.input_dim();
        let k = self.num_classes;
        let mut w = std::mem::replace(&mut last.weights, Tensor::zeros(vec![0])).into_vec();
        w.truncate(k * n_in);
        let mut b = std::mem::replace(&mut last.bias, Tensor::zeros(vec![0])).into_vec();
        b.truncate(k);
        last.weights = Tensor::new(vec![k, n_in], w)?;
        last.bias = Tensor::vector(b);
        out.expanded = false;
        Ok(out)
    }

    pub(crate) fn apply_update(&mut self, velocity: &Gradients, learning_rate: f64) {
        for (layer, (vw, vb)) in self.layers.iter_mut().zip(&velocity.layers) {
            for (w, v) in layer.weights.as_mut_slice().iter_mut().zip(vw) {
                *w -= learning_rate * v;
            }
            for (b, v) in layer.bias.as_mut_slice().iter_mut().zip(vb) {
                *b -= learning_rate * v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.is_finite())
    }
}

struct Trace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

/// Parameter-shaped gradient (or momentum) buffers, one `(weights, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &Classifier) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.layers
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = 0.0);
        }
    }

    /// `self = momentum * self + sign * grad`.
    pub(crate) fn momentum_step(&mut self, grad: &Gradients, momentum: f64, sign: f64) {
        for ((vw, vb), (gw, gb)) in self.layers.iter_mut().zip(&grad.layers) {
            for (v, g) in vw.iter_mut().chain(vb.iter_mut()).zip(gw.iter().chain(gb)) {
                *v = momentum * *v + sign * g;
            }
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// All entries in layer order, weights before bias.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln sum exp(logits)`, computed stably.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// `-ln softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

fn loss_and_delta(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = (log_sum_exp(logits) - logits[label]).max(0.0);
    let mut delta = softmax(logits);
    delta[label] -= 1.0;
    (loss, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn linear(w: Vec<f64>, b: Vec<f64>, n_in: usize) -> Classifier {
        let n_out = b.len();
        let layer = Dense::new(Tensor::new(vec![n_out, n_in], w).unwrap(), Tensor::vector(b)).unwrap();
        Classifier::from_layers(vec![layer], n_out, false).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let model = Classifier::from_layers(
            vec![Dense::zeros(3, 5), Dense::zeros(5, 4)],
            4,
            false,
        )
        .unwrap();
        let out = model.forward(&Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let model = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        let out = model.forward(&Tensor::vector(vec![0.3, 0.7])).unwrap();
        assert_eq!(out.as_slice(), &[0.3, 0.7]);
    }

    #[test]
    fn dead_hidden_layer_yields_final_bias() {
        let first = Dense::new(
            Tensor::new(vec![3, 2], vec![1.0, 1.0, 2.0, 0.5, 1.0, 3.0]).unwrap(),
            Tensor::vector(vec![-10.0, -10.0, -10.0]),
        )
        .unwrap();
        let second = Dense::new(
            Tensor::new(vec![2, 3], vec![4.0, -1.0, 2.0, 0.5, 0.5, 0.5]).unwrap(),
            Tensor::vector(vec![0.25, -0.75]),
        )
        .unwrap();
        let model = Classifier::from_layers(vec![first, second], 2, false).unwrap();
        let out = model.forward(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.25, -0.75]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        assert!(matches!(
            model.forward(&Tensor::vector(vec![1.0])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        assert!(Classifier::from_layers(vec![Dense::zeros(2, 3), Dense::zeros(4, 2)], 2, false).is_err());
        assert!(Classifier::from_layers(vec![Dense::zeros(2, 3)], 2, false).is_err());
        assert!(Classifier::from_layers(vec![Dense::zeros(2, 3)], 2, true).is_ok());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.0; 7]);
        for p in &u {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-300);
        let r = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (got, want) in r.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let k = 10;
        for label in 0..k {
            assert_eq!(cross_entropy(&vec![0.0; k], label).unwrap(), (k as f64).ln());
        }
        let a = cross_entropy(&[10.0, 0.0], 0).unwrap();
        assert!((a - (-10f64).exp().ln_1p()).abs() < 1e-15);
        let b = cross_entropy(&[0.0, 10.0], 0).unwrap();
        assert!((b - (10.0 + (-10f64).exp().ln_1p())).abs() < 1e-12);
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn linear_softmax_input_gradient() {
        let model = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        let g = model.grad_input(&Tensor::vector(vec![0.5, 0.5]), 0).unwrap();
        assert!((g.as_slice()[0] + 0.5).abs() < 1e-15);
        assert!((g.as_slice()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_final_layer_gives_zero_input_gradient() {
        let mut rng = seeded(3);
        let mut model = Classifier::random(&[3, 8, 4], &mut rng).unwrap();
        let last = model.layers_mut().last_mut().unwrap();
        last.weights_mut().iter_mut().for_each(|w| *w = 0.0);
        let g = model.grad_input(&Tensor::vector(vec![0.1, -0.4, 0.9]), 2).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let mut rng = seeded(11);
        let model = Classifier::random(&[2, 6, 3], &mut rng).unwrap();
        let batch = vec![
            Example::new(vec![0.2, -1.0], 0),
            Example::new(vec![1.5, 0.3], 2),
            Example::new(vec![-0.7, 0.8], 1),
        ];
        let doubled: Vec<Example> = batch.iter().chain(batch.iter()).cloned().collect();
        let a = model.grad_params(&batch).unwrap();
        let b = model.grad_params(&doubled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
        assert!(model.grad_params(&[]).is_err());
    }

    #[test]
    fn expand_keeps_logits_and_adds_zero() {
        let mut rng = seeded(5);
        let model = Classifier::random(&[2, 16, 16, 10], &mut rng).unwrap();
        let wide = model.expand_output().unwrap();
        assert_eq!(wide.output_dim(), 11);
        assert!(wide.is_expanded());
        for i in 0..20 {
            let x = Tensor::vector(vec![i as f64 * 0.3 - 3.0, 1.0 - i as f64 * 0.1]);
            let a = model.forward(&x).unwrap();
            let b = wide.forward(&x).unwrap();
            assert_eq!(&b.as_slice()[..10], a.as_slice());
            assert_eq!(b.as_slice()[10], 0.0);
        }
        assert!(matches!(wide.expand_output(), Err(Error::State(_))));
    }

    #[test]
    fn prune_preconditions() {
        let mut rng = seeded(5);
        let model = Classifier::random(&[2, 4, 3], &mut rng).unwrap();
        assert!(model.prune_output(3).is_err());
        let wide = model.expand_output().unwrap();
        assert!(wide.prune_output(2).is_err());
        assert_eq!(wide.prune_output(3).unwrap(), model);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
