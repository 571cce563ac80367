//! Central finite-difference checks of the analytic gradients.

use boundary_unlearning::nn::Classifier;
use boundary_unlearning::rng::seeded;
use boundary_unlearning::{Example, Tensor};
use rand::Rng;

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn random_case(seed: u64) -> (Classifier, Vec<Example>) {
    let mut rng = seeded(seed);
    let depth = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(1..=6)];
    for _ in 1..depth {
        widths.push(rng.random_range(1..=16));
    }
    let k = rng.random_range(2..=6);
    widths.push(k);
    let mut model = Classifier::random(&widths, &mut rng).unwrap();
    // Nonzero biases so the kink of ReLU is not hit at the origin.
    for layer in model.layers_mut() {
        for b in layer.bias_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let batch = (0..rng.random_range(1..=4))
        .map(|_| {
            let x = (0..widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
            Example::new(x, rng.random_range(0..k))
        })
        .collect();
    (model, batch)
}

#[test]
fn grad_params_matches_central_differences() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (model, batch) = random_case(seed);
        let grads = model.grad_params(&batch).unwrap();
        for (li, (gw, gb)) in grads.layers().iter().enumerate() {
            for (is_bias, analytic) in [(false, gw), (true, gb)] {
                for (pi, &g) in analytic.iter().enumerate() {
                    let loss_at = |delta: f64| {
                        let mut m = model.clone();
                        let layer = &mut m.layers_mut()[li];
                        let params = if is_bias { layer.bias_mut() } else { layer.weights_mut() };
                        params[pi] += delta;
                        m.mean_loss(&batch).unwrap()
                    };
                    let numeric = (loss_at(STEP) - loss_at(-STEP)) / (2.0 * STEP);
                    worst = worst.max(rel_err(g, numeric));
                }
            }
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn grad_input_matches_central_differences() {
    let mut worst = 0.0f64;
    for seed in 100..200 {
        let (model, batch) = random_case(seed);
        let ex = &batch[0];
        let g = model.grad_input(&ex.features, ex.label).unwrap();
        for (i, &analytic) in g.as_slice().iter().enumerate() {
            let loss_at = |delta: f64| {
                let mut x = ex.x().to_vec();
                x[i] += delta;
                model.mean_loss(&[Example::new(x, ex.label)]).unwrap()
            };
            let numeric = (loss_at(STEP) - loss_at(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn grad_input_of_logit_gap_points_between_classes() {
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let layer = boundary_unlearning::nn::Dense::new(w, Tensor::zeros(vec![2])).unwrap();
    let model = Classifier::from_layers(vec![layer], 2, false).unwrap();
    let g = model.grad_input(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
    assert_eq!(g.as_slice(), &[-0.5, 0.5]);
}
