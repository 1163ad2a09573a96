//! Float-to-Q(10,8) coefficient conversion and quantized-model evaluation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::{infer_fixed, infer_golden, inputs_to_fixed, Activation, AnnError, CoefficientSet};
use crate::fixedpoint::{to_fixed, FxFormat, FxValue, Overflow};
use crate::metrics::{accuracy_precision, confusion, ClassMetrics, ConfusionMatrix, MetricsError};
use crate::pet_sim::{Label, Sample};
use crate::topology::TopologySpec;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("coefficient {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("no frames to evaluate")]
    EmptySet,
    #[error("frame {index}: label {label:?} does not fit the task")]
    LabelMismatch { index: usize, label: Label },
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMethod {
    /// Round, then wrap into 10 bits.
    Naive,
    /// Round, then saturate to [-2, 1.99609375].
    Clipped,
}

impl QuantMethod {
    pub fn overflow(self) -> Overflow {
        match self {
            QuantMethod::Naive => Overflow::Wrap,
            QuantMethod::Clipped => Overflow::Saturate,
        }
    }
}

impl fmt::Display for QuantMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMethod::Naive => "naive",
            QuantMethod::Clipped => "clipped",
        })
    }
}

impl FromStr for QuantMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "naive" => Ok(QuantMethod::Naive),
            "clipped" => Ok(QuantMethod::Clipped),
            _ => Err(format!("unknown quantization method {s:?} (naive|clipped)")),
        }
    }
}

pub fn quantize_set(coeffs: &CoefficientSet<f64>, method: QuantMethod) -> Result<CoefficientSet<FxValue>, QuantError> {
    let values = coeffs
        .as_slice()
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value.is_finite() {
                Ok(to_fixed(value, FxFormat::COEFF, method.overflow()))
            } else {
                Err(QuantError::NonFinite { index, value })
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(CoefficientSet::new(values))
}

/// A network ready to run on either datapath.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    Golden(&'a CoefficientSet<f64>),
    Fixed(&'a CoefficientSet<FxValue>),
}

pub fn predict(spec: &TopologySpec, model: Model<'_>, inputs: &[f64], act: Activation) -> Result<Vec<f64>, AnnError> {
    match model {
        Model::Golden(c) => infer_golden(spec, c, inputs, act),
        Model::Fixed(c) => Ok(infer_fixed(spec, c, &inputs_to_fixed(inputs), act)?.iter().map(|v| v.to_f64()).collect()),
    }
}

/// Index of the largest output; ties go to the lowest index.
pub fn argmax(outputs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in outputs.iter().enumerate() {
        if v > outputs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Scalar or 2-d targets; error is the absolute or Euclidean distance.
    Regression,
    /// Argmax over the output neurons.
    Classification { classes: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub target: Vec<f64>,
    pub frames: usize,
    pub mean_prediction: Vec<f64>,
    pub mean_error: f64,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub frames: usize,
    pub mean_error: f64,
    pub max_error: f64,
    /// One entry per distinct target, ordered by target.
    pub per_target: Vec<TargetStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    pub overall_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalReport {
    Regression(RegressionReport),
    Classification(ClassificationReport),
}

impl EvalReport {
    pub fn regression(&self) -> Option<&RegressionReport> {
        match self {
            EvalReport::Regression(r) => Some(r),
            EvalReport::Classification(_) => None,
        }
    }

    pub fn classification(&self) -> Option<&ClassificationReport> {
        match self {
            EvalReport::Classification(c) => Some(c),
            EvalReport::Regression(_) => None,
        }
    }
}

fn target_vec(label: Label) -> Option<Vec<f64>> {
    match label {
        Label::Value(v) => Some(vec![v]),
        Label::Point(p) => Some(p.to_vec()),
        Label::Class(_) => None,
    }
}

/// Per-frame predictions of `model`.
pub fn predict_all(
    spec: &TopologySpec,
    model: Model<'_>,
    samples: &[Sample],
    act: Activation,
) -> Result<Vec<Vec<f64>>, AnnError> {
    samples.par_iter().map(|s| predict(spec, model, &s.inputs, act)).collect()
}

/// Regression error of each frame (absolute for 1-d, Euclidean for 2-d targets).
pub fn frame_errors(predictions: &[Vec<f64>], samples: &[Sample]) -> Result<Vec<f64>, QuantError> {
    predictions
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(index, (p, s))| {
            let t = target_vec(s.target).ok_or(QuantError::LabelMismatch { index, label: s.target })?;
            if t.len() != p.len() {
                return Err(QuantError::LabelMismatch { index, label: s.target });
            }
            Ok(p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        })
        .collect()
}

pub fn evaluate(
    spec: &TopologySpec,
    model: Model<'_>,
    samples: &[Sample],
    task: &Task,
    act: Activation,
) -> Result<EvalReport, QuantError> {
    if samples.is_empty() {
        return Err(QuantError::EmptySet);
    }
    let predictions = predict_all(spec, model, samples, act)?;
    match task {
        Task::Regression => {
            let errors = frame_errors(&predictions, samples)?;
            let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                let t = target_vec(s.target).expect("checked by frame_errors");
                match groups.iter_mut().find(|(g, _)| *g == t) {
                    Some((_, idx)) => idx.push(i),
                    None => groups.push((t, vec![i])),
                }
            }
            groups.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite targets"));
            let per_target = groups
                .into_iter()
                .map(|(target, idx)| {
                    let n = idx.len() as f64;
                    let mean_prediction = (0..target.len())
                        .map(|d| idx.iter().map(|&i| predictions[i][d]).sum::<f64>() / n)
                        .collect();
                    TargetStats {
                        frames: idx.len(),
                        mean_prediction,
                        mean_error: idx.iter().map(|&i| errors[i]).sum::<f64>() / n,
                        max_error: idx.iter().map(|&i| errors[i]).fold(0.0, f64::max),
                        target,
                    }
                })
                .collect();
            Ok(EvalReport::Regression(RegressionReport {
                frames: samples.len(),
                mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
                max_error: errors.iter().copied().fold(0.0, f64::max),
                per_target,
            }))
        }
        Task::Classification { classes } => {
            let labels = samples
                .iter()
                .enumerate()
                .map(|(index, s)| s.target.class().ok_or(QuantError::LabelMismatch { index, label: s.target }))
                .collect::<Result<Vec<_>, _>>()?;
            let predicted: Vec<usize> = predictions.iter().map(|p| argmax(p)).collect();
            let m = confusion(&predicted, &labels, classes)?;
            Ok(EvalReport::Classification(ClassificationReport {
                metrics: accuracy_precision(&m)?,
                overall_accuracy: m.overall_accuracy(),
                confusion: m,
            }))
        }
    }
}

/// Quantize `coeffs` with `method` and evaluate the fixed-point model.
pub fn evaluate_quantized(
    spec: &TopologySpec,
    coeffs: &CoefficientSet<f64>,
    samples: &[Sample],
    method: QuantMethod,
    task: &Task,
    act: Activation,
) -> Result<EvalReport, QuantError> {
    let q = quantize_set(coeffs, method)?;
    evaluate(spec, Model::Fixed(&q), samples, task, act)
}

pub fn evaluate_golden(
    spec: &TopologySpec,
    coeffs: &CoefficientSet<f64>,
    samples: &[Sample],
    task: &Task,
    act: Activation,
) -> Result<EvalReport, QuantError> {
    evaluate(spec, Model::Golden(coeffs), samples, task, act)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::build_fully_connected;

    fn set(v: &[f64]) -> CoefficientSet<f64> {
        CoefficientSet::new(v.to_vec())
    }

    #[test]
    fn method_examples() {
        for m in [QuantMethod::Naive, QuantMethod::Clipped] {
            assert_eq!(quantize_set(&set(&[0.5]), m).unwrap().as_slice()[0].raw(), 128);
        }
        assert_eq!(quantize_set(&set(&[3.7]), QuantMethod::Clipped).unwrap().as_slice()[0].to_f64(), 1.99609375);
        let wrapped = quantize_set(&set(&[3.7]), QuantMethod::Naive).unwrap().as_slice()[0];
        assert_eq!((wrapped.raw(), wrapped.to_f64()), (-77, -0.30078125));
        assert_eq!(quantize_set(&set(&[-2.0]), QuantMethod::Clipped).unwrap().as_slice()[0].raw(), -512);
        assert!(matches!(
            quantize_set(&set(&[0.0, f64::NAN]), QuantMethod::Clipped),
            Err(QuantError::NonFinite { index: 1, .. })
        ));
        assert_eq!("clipped".parse::<QuantMethod>().unwrap(), QuantMethod::Clipped);
        assert!("round".parse::<QuantMethod>().is_err());
    }

    #[test]
    fn representable_coefficients_match_golden() {
        let spec = build_fully_connected(&[2, 3, 2]).unwrap();
        let coeffs: Vec<f64> = (0..spec.num_coefficients()).map(|i| ((i as f64 * 37.0) % 200.0 - 100.0) / 128.0).collect();
        let c = set(&coeffs);
        let samples: Vec<Sample> = (0..20)
            .map(|i| Sample { inputs: vec![i as f64, 3.0], target: Label::Class(i % 2) })
            .collect();
        let task = Task::Classification { classes: vec!["a".into(), "b".into()] };
        let g = evaluate_golden(&spec, &c, &samples, &task, Activation::Identity).unwrap();
        let q = evaluate_quantized(&spec, &c, &samples, QuantMethod::Clipped, &task, Activation::Identity).unwrap();
        assert_eq!(g, q);
    }

    #[test]
    fn regression_report_groups_targets() {
        let spec = build_fully_connected(&[1]).unwrap();
        let c = set(&[0.0, 1.0]);
        let samples = vec![
            Sample { inputs: vec![2.0], target: Label::Value(3.0) },
            Sample { inputs: vec![1.0], target: Label::Value(1.0) },
            Sample { inputs: vec![2.5], target: Label::Value(3.0) },
        ];
        let r = evaluate_golden(&spec, &c, &samples, &Task::Regression, Activation::Identity).unwrap();
        let r = r.regression().unwrap();
        assert_eq!(r.per_target.len(), 2);
        assert_eq!(r.per_target[0].target, vec![1.0]);
        assert_eq!(r.per_target[1].mean_prediction, vec![2.25]);
        assert_eq!(r.per_target[1].max_error, 1.0);
        assert!((r.mean_error - 0.5).abs() < 1e-15);
        let bad = vec![Sample { inputs: vec![1.0], target: Label::Class(0) }];
        assert!(evaluate_golden(&spec, &c, &bad, &Task::Regression, Activation::Identity).is_err());
        assert!(matches!(
            evaluate_golden(&spec, &c, &[], &Task::Regression, Activation::Identity),
            Err(QuantError::EmptySet)
        ));
    }

    #[test]
    fn argmax_ties_pick_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn requantizing_is_a_fixed_point(v in prop::collection::vec(-10.0f64..10.0, 1..64)) {
                for m in [QuantMethod::Naive, QuantMethod::Clipped] {
                    let q = quantize_set(&set(&v), m).unwrap();
                    prop_assert_eq!(quantize_set(&q.dequantize(), m).unwrap(), q);
                }
            }

            #[test]
            fn clipped_keeps_sign_and_half_lsb(v in prop::collection::vec(-2.0f64..1.99609375, 1..64)) {
                let q = quantize_set(&set(&v), QuantMethod::Clipped).unwrap();
                for (x, fx) in v.iter().zip(q.as_slice()) {
                    let y = fx.to_f64();
                    prop_assert!((x - y).abs() <= 2f64.powi(-9));
                    prop_assert!(y.abs() <= 2.0);
                    prop_assert!(y == 0.0 || y.signum() == x.signum());
                }
            }

            #[test]
            fn clipped_bounded_for_any_input(x in -1e6f64..1e6) {
                let y = quantize_set(&set(&[x]), QuantMethod::Clipped).unwrap().as_slice()[0].to_f64();
                prop_assert!(y.abs() <= 2.0);
            }
        }
    }
}
