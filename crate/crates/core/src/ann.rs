//! Golden (f64) and bit-exact fixed-point evaluation of the affine neuron model
//!
//! ```text
//! O_n = w_first + sum_k w_{first+1+k} * source_k(n)
//! ```
//!
//! with neurons visited in index order and weights in source order, which
//! pins the fixed-point accumulation order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{fx_mac, relative_error, to_fixed, FormatError, FxFormat, FxValue, Overflow};
use crate::topology::{TopologySpec, MAX_COEFFICIENTS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnError {
    #[error("shape mismatch ({what}): expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("empty input batch")]
    EmptyBatch,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("malformed coefficient image: {0}")]
    MalformedImage(String),
}

/// Nonlinearity applied to every non-output neuron.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Plain affine neurons, as the chip computes them.
    #[default]
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    fn apply_fixed(self, x: FxValue) -> FxValue {
        match self {
            Activation::Identity => x,
            Activation::Relu if x.raw() < 0 => FxValue::zero(x.format()),
            Activation::Relu => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Ordered weights and biases of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoefficientSet<T> {
    values: Vec<T>,
}

impl<T> CoefficientSet<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    /// Length-checked constructor.
    pub fn for_topology(spec: &TopologySpec, values: Vec<T>) -> Result<Self, AnnError> {
        check_len("coefficients", spec.num_coefficients(), values.len())?;
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }
}

impl CoefficientSet<FxValue> {
    pub fn dequantize(&self) -> CoefficientSet<f64> {
        CoefficientSet::new(self.values.iter().map(|v| v.to_f64()).collect())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), AnnError> {
    if expected == got {
        Ok(())
    } else {
        Err(AnnError::ShapeMismatch { what, expected, got })
    }
}

/// Evaluate the network in double precision.
pub fn infer_golden(
    spec: &TopologySpec,
    coeffs: &CoefficientSet<f64>,
    inputs: &[f64],
    act: Activation,
) -> Result<Vec<f64>, AnnError> {
    check_len("coefficients", spec.num_coefficients(), coeffs.len())?;
    check_len("inputs", spec.num_inputs(), inputs.len())?;
    let (_, post) = forward_trace(spec, coeffs.as_slice(), inputs, act);
    let start = spec.num_neurons() - spec.num_outputs();
    Ok(post[start..].to_vec())
}

/// Forward pass keeping every neuron's pre- and post-activation value.
pub(crate) fn forward_trace(
    spec: &TopologySpec,
    w: &[f64],
    inputs: &[f64],
    act: Activation,
) -> (Vec<f64>, Vec<f64>) {
    let n = spec.num_neurons();
    let mut pre = vec![0.0; n];
    let mut post = vec![0.0; n];
    let offsets = spec.layer_offsets();
    let last = spec.num_layers() - 1;
    for layer in 0..spec.num_layers() {
        let (lo, hi) = (offsets[layer], offsets[layer + 1]);
        for idx in lo..hi {
            let d = spec.neurons()[idx];
            let c = &w[d.first_coeff_index..d.first_coeff_index + d.coeff_count()];
            let mut acc = c[0];
            if layer == 0 {
                acc += c[1] * inputs[idx];
            } else {
                let src = &post[offsets[layer - 1]..offsets[layer]];
                for (wk, ok) in c[1..].iter().zip(src) {
                    acc += wk * ok;
                }
            }
            pre[idx] = acc;
            post[idx] = if layer == last { acc } else { act.apply(acc) };
        }
    }
    (pre, post)
}

/// Accumulate `d(loss)/d(coefficients)` into `grad` by reverse traversal,
/// given `d(loss)/d(output)` for one frame.
pub(crate) fn backprop(
    spec: &TopologySpec,
    w: &[f64],
    inputs: &[f64],
    trace: &(Vec<f64>, Vec<f64>),
    act: Activation,
    d_out: &[f64],
    grad: &mut [f64],
) {
    let (pre, post) = trace;
    let n = spec.num_neurons();
    let offsets = spec.layer_offsets();
    let last = spec.num_layers() - 1;
    // d(loss)/d(post-activation) per neuron
    let mut d_post = vec![0.0; n];
    d_post[offsets[last]..].copy_from_slice(d_out);
    for layer in (0..spec.num_layers()).rev() {
        let (lo, hi) = (offsets[layer], offsets[layer + 1]);
        for idx in lo..hi {
            let d = spec.neurons()[idx];
            let d_pre = if layer == last { d_post[idx] } else { d_post[idx] * act.derivative(pre[idx]) };
            if d_pre == 0.0 {
                continue;
            }
            let first = d.first_coeff_index;
            grad[first] += d_pre;
            if layer == 0 {
                grad[first + 1] += d_pre * inputs[idx];
            } else {
                let src_lo = offsets[layer - 1];
                for k in 0..d.fan_in {
                    grad[first + 1 + k] += d_pre * post[src_lo + k];
                    d_post[src_lo + k] += d_pre * w[first + 1 + k];
                }
            }
        }
    }
}

/// Evaluate the network on the fixed-point datapath. Accumulators and
/// activations use `inputs`' format (normally Q(32,8)).
pub fn infer_fixed(
    spec: &TopologySpec,
    coeffs: &CoefficientSet<FxValue>,
    inputs: &[FxValue],
    act: Activation,
) -> Result<Vec<FxValue>, AnnError> {
    check_len("coefficients", spec.num_coefficients(), coeffs.len())?;
    check_len("inputs", spec.num_inputs(), inputs.len())?;
    let acc_fmt = inputs.first().map_or(FxFormat::ACC, |v| v.format());
    let w = coeffs.as_slice();
    let offsets = spec.layer_offsets();
    let last = spec.num_layers() - 1;
    let mut post = vec![FxValue::zero(acc_fmt); spec.num_neurons()];
    for layer in 0..spec.num_layers() {
        let (lo, hi) = (offsets[layer], offsets[layer + 1]);
        for idx in lo..hi {
            let d = spec.neurons()[idx];
            let c = &w[d.first_coeff_index..d.first_coeff_index + d.coeff_count()];
            let mut acc = c[0].convert(acc_fmt, Overflow::Saturate);
            if layer == 0 {
                acc = fx_mac(acc, c[1], inputs[idx])?;
            } else {
                let (done, _) = post.split_at(offsets[layer]);
                for (wk, ok) in c[1..].iter().zip(&done[offsets[layer - 1]..]) {
                    acc = fx_mac(acc, *wk, *ok)?;
                }
            }
            post[idx] = if layer == last { acc } else { act.apply_fixed(acc) };
        }
    }
    Ok(post[offsets[last]..].to_vec())
}

/// Quantize real inputs to the activation format.
pub fn inputs_to_fixed(inputs: &[f64]) -> Vec<FxValue> {
    inputs.iter().map(|&x| to_fixed(x, FxFormat::ACC, Overflow::Saturate)).collect()
}

/// Golden-vs-fixed relative error statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub frames: usize,
    pub max_per_output: Vec<f64>,
    pub mean_per_output: Vec<f64>,
    /// Worst output error of each frame, in batch order.
    pub max_per_frame: Vec<f64>,
}

impl ErrorReport {
    pub fn max(&self) -> f64 {
        self.max_per_output.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.mean_per_output.iter().sum::<f64>() / self.mean_per_output.len() as f64
    }
}

/// Clip-quantize `coeffs` and compare both datapaths on every frame.
///
/// The golden path runs on the dequantized coefficients so that the report
/// isolates datapath rounding from coefficient quantization.
pub fn compare_models(
    spec: &TopologySpec,
    coeffs: &CoefficientSet<f64>,
    batch: &[Vec<f64>],
    act: Activation,
) -> Result<ErrorReport, AnnError> {
    if batch.is_empty() {
        return Err(AnnError::EmptyBatch);
    }
    check_len("coefficients", spec.num_coefficients(), coeffs.len())?;
    let fixed_coeffs = CoefficientSet::new(
        coeffs.as_slice().iter().map(|&c| to_fixed(c, FxFormat::COEFF, Overflow::Saturate)).collect(),
    );
    let golden_coeffs = fixed_coeffs.dequantize();
    let per_frame: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|x| {
            let golden = infer_golden(spec, &golden_coeffs, x, act)?;
            let fixed = infer_fixed(spec, &fixed_coeffs, &inputs_to_fixed(x), act)?;
            Ok(golden.iter().zip(&fixed).map(|(g, f)| relative_error(*g, f.to_f64())).collect())
        })
        .collect::<Result<_, AnnError>>()?;
    let outputs = spec.num_outputs();
    let mut max_per_output = vec![0.0f64; outputs];
    let mut sum_per_output = vec![0.0f64; outputs];
    for errs in &per_frame {
        for (k, e) in errs.iter().enumerate() {
            max_per_output[k] = max_per_output[k].max(*e);
            sum_per_output[k] += e;
        }
    }
    let frames = per_frame.len();
    Ok(ErrorReport {
        frames,
        max_per_output,
        mean_per_output: sum_per_output.into_iter().map(|s| s / frames as f64).collect(),
        max_per_frame: per_frame.iter().map(|e| e.iter().copied().fold(0.0, f64::max)).collect(),
    })
}

/// Logical operation count of one inference.
///
/// Convention: a weight costs one multiply and one add, a bias one add.
/// Input-layer neurons (one bias and one weight each) are reported apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub non_input: u64,
    pub input_layer: u64,
    pub weights: u64,
    pub biases: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.non_input + self.input_layer
    }
}

pub fn count_operations(spec: &TopologySpec) -> OpCount {
    let inputs = spec.num_inputs();
    let (mut weights, mut biases, mut input_layer) = (0u64, 0u64, 0u64);
    for (idx, d) in spec.neurons().iter().enumerate() {
        let ops = 2 * d.fan_in as u64 + 1;
        if idx < inputs {
            input_layer += ops;
        } else {
            weights += d.fan_in as u64;
            biases += 1;
        }
    }
    OpCount { non_input: 2 * weights + biases, input_layer, weights, biases }
}

/// Throughput in millions of operations per second.
pub fn mops(ops: u64, execution_time_s: f64) -> f64 {
    ops as f64 / execution_time_s / 1e6
}

/// Slots in the coefficient image, one per coefficient memory word.
pub const COEFF_IMAGE_SLOTS: usize = MAX_COEFFICIENTS;
pub const COEFF_IMAGE_BYTES: usize = COEFF_IMAGE_SLOTS * 2;

/// 1024 little-endian i16 slots, each a sign-extended Q(10,8) raw value;
/// unused slots are zero.
pub fn encode_coeff_image(coeffs: &CoefficientSet<FxValue>) -> Result<Vec<u8>, AnnError> {
    if coeffs.len() > COEFF_IMAGE_SLOTS {
        return Err(AnnError::ShapeMismatch { what: "coefficient image slots", expected: COEFF_IMAGE_SLOTS, got: coeffs.len() });
    }
    let mut out = vec![0u8; COEFF_IMAGE_BYTES];
    for (chunk, v) in out.chunks_exact_mut(2).zip(coeffs.as_slice()) {
        let raw = v.convert(FxFormat::COEFF, Overflow::Saturate).raw() as i16;
        chunk.copy_from_slice(&raw.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_coeff_image(bytes: &[u8], count: usize) -> Result<CoefficientSet<FxValue>, AnnError> {
    if bytes.len() != COEFF_IMAGE_BYTES {
        return Err(AnnError::MalformedImage(format!("expected {COEFF_IMAGE_BYTES} bytes, got {}", bytes.len())));
    }
    if count > COEFF_IMAGE_SLOTS {
        return Err(AnnError::MalformedImage(format!("{count} coefficients exceed {COEFF_IMAGE_SLOTS} slots")));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in bytes.chunks_exact(2).enumerate() {
        let raw = i16::from_le_bytes([chunk[0], chunk[1]]) as i64;
        if i < count {
            let v = FxValue::from_raw(raw, FxFormat::COEFF)
                .ok_or_else(|| AnnError::MalformedImage(format!("slot {i} value {raw} is not a 10-bit signed word")))?;
            values.push(v);
        } else if raw != 0 {
            return Err(AnnError::MalformedImage(format!("unused slot {i} is non-zero")));
        }
    }
    Ok(CoefficientSet::new(values))
}

/// The coefficient memory as the chip stores it: 1024 packed 10-bit words,
/// LSB-first, 1280 bytes.
pub fn pack_coeff_memory(coeffs: &CoefficientSet<FxValue>) -> Vec<u8> {
    let mut out = vec![0u8; COEFF_IMAGE_SLOTS * 10 / 8];
    for (i, v) in coeffs.as_slice().iter().take(COEFF_IMAGE_SLOTS).enumerate() {
        let word = (v.convert(FxFormat::COEFF, Overflow::Saturate).raw() as u16) & 0x3ff;
        for bit in 0..10 {
            if word >> bit & 1 == 1 {
                let pos = i * 10 + bit;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::build_fully_connected;

    fn reals(n: usize, v: f64) -> CoefficientSet<f64> {
        CoefficientSet::new(vec![v; n])
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = build_fully_connected(&[3, 4, 2]).unwrap();
        let out = infer_golden(&spec, &reals(32, 0.0), &[5.0, -1.0, 7.0], Activation::Identity).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn example_network_hand_evaluation() {
        // O_3..5 = 0.1 + 0.1 * (1, 2, 3); O_6..9 = 0.1 + 0.1 * 0.9; O_10,11 = 0.1 + 0.4 * 0.19
        let spec = build_fully_connected(&[3, 4, 2]).unwrap();
        let out = infer_golden(&spec, &reals(32, 0.1), &[1.0, 2.0, 3.0], Activation::Identity).unwrap();
        for o in out {
            assert!((o - 0.176).abs() < 1e-12, "{o}");
        }
    }

    #[test]
    fn single_neuron_chain_is_affine() {
        let spec = build_fully_connected(&[1, 1]).unwrap();
        let (b, w, x) = (0.75, -1.25, 3.0);
        let coeffs = CoefficientSet::new(vec![0.0, 1.0, b, w]);
        let out = infer_golden(&spec, &coeffs, &[x], Activation::Identity).unwrap();
        assert_eq!(out, vec![b + w * x]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let spec = build_fully_connected(&[3, 4, 2]).unwrap();
        assert!(matches!(
            infer_golden(&spec, &reals(31, 0.0), &[0.0; 3], Activation::Identity),
            Err(AnnError::ShapeMismatch { what: "coefficients", .. })
        ));
        assert!(matches!(
            infer_golden(&spec, &reals(32, 0.0), &[0.0; 2], Activation::Identity),
            Err(AnnError::ShapeMismatch { what: "inputs", .. })
        ));
        let fx = CoefficientSet::new(vec![FxValue::zero(FxFormat::COEFF); 32]);
        assert!(infer_fixed(&spec, &fx, &inputs_to_fixed(&[0.0; 4]), Activation::Identity).is_err());
    }

    #[test]
    fn fixed_zero_network() {
        let spec = build_fully_connected(&[3, 4, 2]).unwrap();
        let fx = CoefficientSet::new(vec![FxValue::zero(FxFormat::COEFF); 32]);
        let out = infer_fixed(&spec, &fx, &inputs_to_fixed(&[123.0, 4.5, 1e5]), Activation::Identity).unwrap();
        assert!(out.iter().all(|v| v.raw() == 0));
    }

    #[test]
    fn fixed_equals_golden_when_exact() {
        let spec = build_fully_connected(&[1, 1]).unwrap();
        let real = CoefficientSet::new(vec![0.5, 1.0, -0.25, 1.5]);
        let fx = CoefficientSet::new(
            real.as_slice().iter().map(|&c| to_fixed(c, FxFormat::COEFF, Overflow::Saturate)).collect(),
        );
        let golden = infer_golden(&spec, &real, &[6.0], Activation::Identity).unwrap();
        let fixed = infer_fixed(&spec, &fx, &inputs_to_fixed(&[6.0]), Activation::Identity).unwrap();
        assert_eq!(golden[0], fixed[0].to_f64());
    }

    #[test]
    fn relu_clamps_hidden_not_outputs() {
        let spec = build_fully_connected(&[1, 1]).unwrap();
        let coeffs = CoefficientSet::new(vec![-1.0, 0.0, -3.0, 1.0]);
        let out = infer_golden(&spec, &coeffs, &[0.0], Activation::Relu).unwrap();
        assert_eq!(out, vec![-3.0]);
        let out = infer_golden(&spec, &coeffs, &[0.0], Activation::Identity).unwrap();
        assert_eq!(out, vec![-4.0]);
    }

    #[test]
    fn compare_models_exact_case() {
        let spec = build_fully_connected(&[1, 1]).unwrap();
        let coeffs = CoefficientSet::new(vec![0.5, 1.0, -0.25, 1.5]);
        let report = compare_models(&spec, &coeffs, &[vec![6.0]], Activation::Identity).unwrap();
        assert_eq!(report.max(), 0.0);
        assert!(compare_models(&spec, &coeffs, &[], Activation::Identity).is_err());
    }

    #[test]
    fn compare_models_duplicate_frames() {
        let spec = build_fully_connected(&[3, 4, 2]).unwrap();
        let coeffs = CoefficientSet::new((0..32).map(|i| (i as f64 * 0.37).sin()).collect());
        let frame = vec![1234.0, 98765.0, 5.0];
        let report = compare_models(&spec, &coeffs, &vec![frame; 4], Activation::Identity).unwrap();
        assert!(report.max_per_frame.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn operation_counts() {
        let c = count_operations(&build_fully_connected(&[1, 1]).unwrap());
        assert_eq!((c.non_input, c.input_layer), (3, 3));
        let c = count_operations(&build_fully_connected(&[3, 4, 2]).unwrap());
        // 4 hidden x 3 sources + 2 outputs x 4 sources
        assert_eq!((c.weights, c.biases, c.non_input), (20, 6, 46));
        assert_eq!(c.input_layer, 9);
        let c = count_operations(&build_fully_connected(&[10, 13, 13, 13, 13, 13, 3]).unwrap());
        assert_eq!((c.weights, c.biases, c.non_input), (845, 68, 1758));
        assert_eq!(c.input_layer, 30);
    }

    #[test]
    fn mops_scales_with_clock() {
        // 1710 ops in 22.44 us at 105 MHz is ~76.2 MOPS; at 500 MHz the same cycle count gives ~363.
        let at_105 = mops(1710, 22.44e-6);
        assert!((at_105 - 76.2).abs() < 0.05);
        let at_500 = mops(1710, 22.44e-6 * 105.0 / 500.0);
        assert!((at_500 - 363.0).abs() < 0.5);
    }

    #[test]
    fn coeff_image_roundtrip_and_checks() {
        let vals: Vec<FxValue> =
            [-2.0, 1.99609375, 0.5, -0.00390625].iter().map(|&x| to_fixed(x, FxFormat::COEFF, Overflow::Saturate)).collect();
        let set = CoefficientSet::new(vals);
        let bytes = encode_coeff_image(&set).unwrap();
        assert_eq!(bytes.len(), 2048);
        assert_eq!(&bytes[..2], &(-512i16).to_le_bytes());
        assert_eq!(decode_coeff_image(&bytes, 4).unwrap(), set);
        assert!(decode_coeff_image(&bytes, 3).is_err());
        let mut bad = bytes.clone();
        bad[0..2].copy_from_slice(&600i16.to_le_bytes());
        assert!(decode_coeff_image(&bad, 4).is_err());
    }

    #[test]
    fn packed_memory_layout() {
        let vals: Vec<FxValue> = [-1.0 / 256.0, 1.0 / 256.0].iter().map(|&x| to_fixed(x, FxFormat::COEFF, Overflow::Saturate)).collect();
        let packed = pack_coeff_memory(&CoefficientSet::new(vals));
        assert_eq!(packed.len(), 1280);
        // word 0 = 0x3ff, word 1 = 0x001 starting at bit 10
        assert_eq!(packed[0], 0xff);
        assert_eq!(packed[1], 0b0000_0111);
        assert!(packed[2..].iter().all(|&b| b == 0));
    }
}
