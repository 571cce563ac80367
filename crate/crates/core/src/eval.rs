//! Utility, privacy, decision-space and timing metrics.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Example, ForgetSplit};
use crate::error::{Error, Result};
use crate::nn::{argmax, log_sum_exp, softmax, Classifier};
use crate::unlearn::{Method, UnlearnResult};

/// Fraction of `examples` whose top logit (lowest index on ties) equals the label.
pub fn accuracy(model: &Classifier, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut hits = 0usize;
    for ex in examples {
        if model.predict(ex.x())? == ex.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Shannon entropy (natural log) of `softmax(logits)`, clamped to `[0, ln n]`.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    let p = softmax(logits);
    let lse = log_sum_exp(logits);
    // H = lse - sum p_i * l_i, which stays accurate when some p_i underflow.
    let h = lse - p.iter().zip(logits).map(|(pi, li)| pi * li).sum::<f64>();
    h.clamp(0.0, (logits.len() as f64).ln())
}

/// Per-example output entropy.
pub fn output_entropy(model: &Classifier, examples: &[Example]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid("entropy of an empty set"));
    }
    examples
        .iter()
        .map(|ex| Ok(entropy_of_logits(model.forward(&ex.features)?.as_slice())))
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Attack feature for membership inference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiaFeature {
    #[default]
    Entropy,
}

/// Entropy-threshold membership inference. The threshold maximizes balanced
/// accuracy on the target's remaining-train (members) versus
/// remaining-test (non-members) entropies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiaConfig {
    pub feature: MiaFeature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaOutcome {
    /// Fraction of forgetting samples classified as members.
    pub asr: f64,
    /// Member iff entropy <= threshold.
    pub threshold: f64,
    /// Balanced accuracy of the threshold on the attack-training data.
    pub attack_balanced_accuracy: f64,
    /// Every attack-training entropy was identical.
    pub degenerate: bool,
}

/// Membership attack success rate on the forgetting training data.
pub fn mia_asr(target: &Classifier, split: &ForgetSplit, cfg: &MiaConfig) -> Result<MiaOutcome> {
    let MiaFeature::Entropy = cfg.feature;
    for (name, part) in [
        ("forget_train", &split.forget_train),
        ("remain_train", &split.remain_train),
        ("forget_test", &split.forget_test),
        ("remain_test", &split.remain_test),
    ] {
        if part.is_empty() {
            return Err(Error::invalid(format!("membership attack needs a non-empty {name}")));
        }
    }
    let members = output_entropy(target, &split.remain_train)?;
    let non_members = output_entropy(target, &split.remain_test)?;
    let probe = output_entropy(target, &split.forget_train)?;
    Ok(mia_from_scores(&members, &non_members, &probe))
}

/// Threshold attack on precomputed scores. Candidate thresholds are the
/// observed scores; ties in balanced accuracy go to the smallest threshold.
pub fn mia_from_scores(members: &[f64], non_members: &[f64], probe: &[f64]) -> MiaOutcome {
    let mut m = members.to_vec();
    let mut n = non_members.to_vec();
    m.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = m.iter().chain(&n).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let (mut im, mut inn) = (0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, candidates.first().copied().unwrap_or(0.0));
    for &theta in &candidates {
        while im < m.len() && m[im] <= theta {
            im += 1;
        }
        while inn < n.len() && n[inn] <= theta {
            inn += 1;
        }
        let tpr = im as f64 / m.len().max(1) as f64;
        let tnr = (n.len() - inn) as f64 / n.len().max(1) as f64;
        let ba = 0.5 * (tpr + tnr);
        if ba > best.0 {
            best = (ba, theta);
        }
    }
    let (ba, threshold) = best;
    let hits = probe.iter().filter(|&&h| h <= threshold).count();
    MiaOutcome {
        asr: if probe.is_empty() { 0.0 } else { hits as f64 / probe.len() as f64 },
        threshold,
        attack_balanced_accuracy: ba.max(0.0),
        degenerate: candidates.len() <= 1,
    }
}

/// Axis-aligned rectangle in a 2-d feature space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds2D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds2D {
    /// Bounding box of `points` grown by `fraction` of its extent on each side.
    pub fn around(points: &[Example], fraction: f64) -> Result<Self> {
        if points.is_empty() || points.iter().any(|p| p.features.len() != 2) {
            return Err(Error::invalid("bounds need a non-empty set of 2-d points"));
        }
        let mut b = Bounds2D {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for p in points {
            let (x, y) = (p.x()[0], p.x()[1]);
            b.x_min = b.x_min.min(x);
            b.x_max = b.x_max.max(x);
            b.y_min = b.y_min.min(y);
            b.y_max = b.y_max.max(y);
        }
        let dx = (b.x_max - b.x_min).max(1e-12) * fraction;
        let dy = (b.y_max - b.y_min).max(1e-12) * fraction;
        Ok(Bounds2D {
            x_min: b.x_min - dx,
            x_max: b.x_max + dx,
            y_min: b.y_min - dy,
            y_max: b.y_max + dy,
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = self.x_min.is_finite()
            && self.x_max.is_finite()
            && self.y_min.is_finite()
            && self.y_max.is_finite()
            && self.x_max > self.x_min
            && self.y_max > self.y_min;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate bounds {self:?}")))
        }
    }
}

/// Predicted class at every cell centre of a square grid.
///
/// Row 0 is the top row (largest y), column 0 the smallest x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub bounds: Bounds2D,
    pub resolution: usize,
    pub num_classes: usize,
    #[serde(skip)]
    pub cells: Vec<u16>,
    /// Fraction of cells assigned to each class.
    pub area: Vec<f64>,
}

impl Raster {
    /// Plain-text PGM (`P2`) whose pixel values are class indices.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "P2")?;
        writeln!(w, "{} {}", self.resolution, self.resolution)?;
        writeln!(w, "{}", self.num_classes.saturating_sub(1).max(1))?;
        for row in self.cells.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(u16::to_string).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// JSON sidecar describing the grid geometry and per-class areas.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "bounds": self.bounds,
            "resolution": self.resolution,
            "num_classes": self.num_classes,
            "row_order": "top_to_bottom",
            "area": self.area,
        })
    }
}

/// Rasterizes the argmax decision regions of a 2-d classifier.
pub fn decision_region_area(model: &Classifier, bounds: &Bounds2D, resolution: usize) -> Result<Raster> {
    if model.input_dim() != 2 {
        return Err(Error::invalid(format!(
            "decision regions need a 2-d model, got input width {}",
            model.input_dim()
        )));
    }
    if resolution == 0 {
        return Err(Error::invalid("raster resolution must be positive"));
    }
    bounds.validate()?;
    let width = model.output_dim();
    let dx = (bounds.x_max - bounds.x_min) / resolution as f64;
    let dy = (bounds.y_max - bounds.y_min) / resolution as f64;
    let cells: Vec<u16> = (0..resolution)
        .into_par_iter()
        .flat_map_iter(|r| {
            let y = bounds.y_max - (r as f64 + 0.5) * dy;
            (0..resolution).map(move |c| {
                let x = bounds.x_min + (c as f64 + 0.5) * dx;
                argmax(&model.logits(&[x, y])) as u16
            })
        })
        .collect();
    let mut counts = vec![0usize; width];
    for c in &cells {
        counts[*c as usize] += 1;
    }
    let total = cells.len() as f64;
    Ok(Raster {
        bounds: *bounds,
        resolution,
        num_classes: width,
        cells,
        area: counts.into_iter().map(|c| c as f64 / total).collect(),
    })
}

/// Whether `x` lies on the decision boundary between classes `i` and `j`:
/// their logits agree within `tol` and no other logit exceeds them by more than `tol`.
pub fn on_boundary(model: &Classifier, x: &[f64], i: usize, j: usize, tol: f64) -> Result<bool> {
    let k = model.output_dim();
    if i == j || i >= k || j >= k {
        return Err(Error::invalid(format!("invalid class pair ({i}, {j}) for {k} outputs")));
    }
    model.check_input(x)?;
    let f = model.logits(x);
    let top = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((f[i] - f[j]).abs() <= tol && top <= f[i].max(f[j]) + tol)
}

/// Per-split entropy samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySamples {
    pub remain_train: Vec<f64>,
    pub forget_train: Vec<f64>,
    pub remain_test: Vec<f64>,
    pub forget_test: Vec<f64>,
}

impl EntropySamples {
    pub fn splits(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("remain_train", &self.remain_train),
            ("forget_train", &self.forget_train),
            ("remain_test", &self.remain_test),
            ("forget_test", &self.forget_test),
        ]
    }
}

/// All metrics for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_remain_train: f64,
    pub acc_forget_train: f64,
    pub acc_remain_test: f64,
    pub acc_forget_test: f64,
    pub mia: MiaOutcome,
    pub entropy: EntropySamples,
    /// Per-class decision-region area, 2-d inputs only.
    pub region_area: Option<Vec<f64>>,
    /// Excluded from serialized results so they stay reproducible; see the timing table.
    #[serde(skip)]
    pub wall_clock_seconds: Option<f64>,
}

/// Raster settings used when the model is two-dimensional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSpec {
    pub bounds: Bounds2D,
    pub resolution: usize,
}

/// Evaluates one model on every part of `split`. Returns the raster too
/// when `raster` is given.
pub fn evaluate(
    model: &Classifier,
    split: &ForgetSplit,
    mia: &MiaConfig,
    raster: Option<&RasterSpec>,
) -> Result<(EvalReport, Option<Raster>)> {
    let grid = match raster {
        Some(spec) if model.input_dim() == 2 => Some(decision_region_area(model, &spec.bounds, spec.resolution)?),
        _ => None,
    };
    let report = EvalReport {
        acc_remain_train: accuracy(model, &split.remain_train)?,
        acc_forget_train: accuracy(model, &split.forget_train)?,
        acc_remain_test: accuracy(model, &split.remain_test)?,
        acc_forget_test: accuracy(model, &split.forget_test)?,
        mia: mia_asr(model, split, mia)?,
        entropy: EntropySamples {
            remain_train: output_entropy(model, &split.remain_train)?,
            forget_train: output_entropy(model, &split.forget_train)?,
            remain_test: output_entropy(model, &split.remain_test)?,
            forget_test: output_entropy(model, &split.forget_test)?,
        },
        region_area: grid.as_ref().map(|g| g.area.clone()),
        wall_clock_seconds: None,
    };
    Ok((report, grid))
}

/// Reports for every method plus retrain-relative speedups.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reports: BTreeMap<Method, EvalReport>,
    /// Retrain wall-clock divided by each method's wall-clock.
    pub speedup: BTreeMap<Method, f64>,
}

/// Evaluates each result and computes its speedup over `retrain_ref`.
pub fn compare_methods(
    results: &[UnlearnResult],
    retrain_ref: &UnlearnResult,
    split: &ForgetSplit,
    mia: &MiaConfig,
    raster: Option<&RasterSpec>,
) -> Result<Comparison> {
    let widths = retrain_ref.model.widths();
    for r in results {
        if r.model.widths() != widths || r.model.num_classes() != retrain_ref.model.num_classes() {
            return Err(Error::invalid(format!(
                "{} has architecture {:?}, expected {:?}",
                r.method,
                r.model.widths(),
                widths
            )));
        }
    }
    let mut reports = BTreeMap::new();
    let mut speedup = BTreeMap::new();
    for r in std::iter::once(retrain_ref).chain(results) {
        let (mut report, _) = evaluate(&r.model, split, mia, raster)?;
        report.wall_clock_seconds = Some(r.wall_clock_seconds);
        reports.insert(r.method, report);
        speedup.insert(r.method, speedup_ratio(retrain_ref.wall_clock_seconds, r.wall_clock_seconds));
    }
    Ok(Comparison { reports, speedup })
}

/// `reference / method`, with a zero-duration method reported as infinite speedup.
pub fn speedup_ratio(reference: f64, method: f64) -> f64 {
    if method == reference {
        1.0
    } else if method > 0.0 {
        reference / method
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use crate::tensor::Tensor;

    fn constant(k: usize, class: usize) -> Classifier {
        let mut b = vec![0.0; k];
        b[class] = 1.0;
        let layer = Dense::new(Tensor::zeros(vec![k, 2]), Tensor::vector(b)).unwrap();
        Classifier::from_layers(vec![layer], k, false).unwrap()
    }

    fn uniform(k: usize) -> Classifier {
        Classifier::from_layers(vec![Dense::zeros(2, k)], k, false).unwrap()
    }

    fn balanced(k: usize, per: usize) -> Vec<Example> {
        (0..k * per).map(|i| Example::new(vec![i as f64, 0.0], i % k)).collect()
    }

    #[test]
    fn constant_model_scores_chance() {
        assert!((accuracy(&constant(10, 0), &balanced(10, 7)).unwrap() - 0.1).abs() < 1e-15);
        assert!(accuracy(&constant(10, 0), &[]).is_err());
    }

    #[test]
    fn label_oracle_scores_one() {
        let k = 3;
        let mut w = vec![0.0; k * k];
        for i in 0..k {
            w[i * k + i] = 1.0;
        }
        let layer = Dense::new(Tensor::new(vec![k, k], w).unwrap(), Tensor::zeros(vec![k])).unwrap();
        let model = Classifier::from_layers(vec![layer], k, false).unwrap();
        let data: Vec<Example> = (0..9)
            .map(|i| {
                let mut x = vec![0.0; k];
                x[i % k] = 1.0;
                Example::new(x, i % k)
            })
            .collect();
        assert_eq!(accuracy(&model, &data).unwrap(), 1.0);
    }

    #[test]
    fn entropy_bounds() {
        let h = output_entropy(&uniform(10), &balanced(10, 1)).unwrap();
        assert!(h.iter().all(|v| (v - 10f64.ln()).abs() < 1e-12));
        let sharp = entropy_of_logits(&[50.0, 0.0, 0.0]);
        assert!(sharp < 1e-18);
        assert!(entropy_of_logits(&[1e4, -1e4]) >= 0.0);
    }

    #[test]
    fn separable_attack_scores_one() {
        let k = 10f64;
        let members = vec![1e-6; 50];
        let non_members = vec![k.ln(); 50];
        let out = mia_from_scores(&members, &non_members, &[1e-7; 20]);
        assert_eq!(out.asr, 1.0);
        assert_eq!(out.attack_balanced_accuracy, 1.0);
        assert!(!out.degenerate);
    }

    #[test]
    fn high_entropy_probe_scores_zero() {
        let out = mia_from_scores(&[0.1, 0.2], &[1.0, 1.5], &[2.0, 2.2]);
        assert_eq!(out.threshold, 0.2);
        assert_eq!(out.asr, 0.0);
    }

    #[test]
    fn degenerate_attack_counts_ties_as_members() {
        let out = mia_from_scores(&[0.5; 4], &[0.5; 4], &[0.5, 0.7]);
        assert!(out.degenerate);
        assert_eq!(out.threshold, 0.5);
        assert_eq!(out.asr, 0.5);
    }

    #[test]
    fn mia_on_models() {
        let ds = crate::data::make_blobs(3, 20, 2, 0.1, 0).unwrap();
        let split = crate::data::forget_split(&ds, 0).unwrap();
        let out = mia_asr(&uniform(3), &split, &MiaConfig::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.asr, 1.0);
        let mut empty = split.clone();
        empty.forget_test.clear();
        assert!(mia_asr(&uniform(3), &empty, &MiaConfig::default()).is_err());
    }

    #[test]
    fn constant_model_owns_whole_raster() {
        let b = Bounds2D {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -2.0,
            y_max: 2.0,
        };
        let r = decision_region_area(&constant(4, 2), &b, 32).unwrap();
        assert_eq!(r.area, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.cells.len(), 32 * 32);
        let three_d = Classifier::from_layers(vec![Dense::zeros(3, 2)], 2, false).unwrap();
        assert!(decision_region_area(&three_d, &b, 8).is_err());
    }

    #[test]
    fn raster_rows_run_top_to_bottom() {
        // Class 1 wins where y > 0.
        let layer = Dense::new(
            Tensor::new(vec![2, 2], vec![0.0, -1.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let model = Classifier::from_layers(vec![layer], 2, false).unwrap();
        let b = Bounds2D {
            x_min: 0.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
        };
        let r = decision_region_area(&model, &b, 4).unwrap();
        assert_eq!(&r.cells[..4], &[1, 1, 1, 1]);
        assert_eq!(&r.cells[12..], &[0, 0, 0, 0]);
        assert_eq!(r.area.iter().sum::<f64>(), 1.0);
        let mut pgm = Vec::new();
        r.write_pgm(&mut pgm).unwrap();
        let text = String::from_utf8(pgm).unwrap();
        assert!(text.starts_with("P2\n4 4\n1\n1 1 1 1\n"));
    }

    #[test]
    fn boundary_membership() {
        // Symmetric two-class model: logits (-x, x), boundary at x = 0.
        let layer = Dense::new(
            Tensor::new(vec![2, 2], vec![-1.0, 0.0, 1.0, 0.0]).unwrap(),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let model = Classifier::from_layers(vec![layer], 2, false).unwrap();
        assert!(on_boundary(&model, &[0.0, 3.0], 0, 1, 1e-3).unwrap());
        assert!(!on_boundary(&model, &[-2.0, 0.0], 0, 1, 1e-3).unwrap());
        assert!(on_boundary(&model, &[0.0, 0.0], 1, 1, 1e-3).is_err());
        assert!(on_boundary(&model, &[0.0, 0.0], 0, 2, 1e-3).is_err());
    }

    #[test]
    fn self_speedup_is_one() {
        assert_eq!(speedup_ratio(2.5, 2.5), 1.0);
        assert_eq!(speedup_ratio(3.0, 1.5), 2.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
