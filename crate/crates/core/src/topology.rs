//! Fully-connected feed-forward topologies under the chip's memory budgets.
//!
//! Coefficients are laid out neuron-major: each neuron owns one bias followed by
//! one weight per source. Input-layer neurons have a single source, the raw
//! external input, so a `[3, 4, 2]` network owns exactly 32 coefficients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_NEURONS: usize = 128;
pub const MAX_COEFFICIENTS: usize = 1024;
pub const TOPOLOGY_MEMORY_BITS: usize = 624;
pub const NEURON_MEMORY_BITS: usize = 4096;

/// Byte size of the topology block: 624 bits.
pub const TOPO_BLOCK_BYTES: usize = TOPOLOGY_MEMORY_BITS / 8;
/// Byte size of the neuron-descriptor block: 128 slots of 32 bits.
pub const NEURON_BLOCK_BYTES: usize = NEURON_MEMORY_BITS / 8;
/// Layer sizes that fit after the one-byte layer count.
pub const MAX_LAYERS: usize = TOPO_BLOCK_BYTES - 1;

const FIRST_COEFF_BITS: u32 = 12;
const FAN_IN_BITS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology has no layers")]
    NoLayers,
    #[error("layer {0} has zero neurons")]
    EmptyLayer(usize),
    #[error("topology does not fit the hardware image: {0:?}")]
    ImageOverflow(Vec<Violation>),
    #[error("malformed topology image: {0}")]
    MalformedImage(String),
}

/// One violated hardware budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    TooFewLayers { layers: usize },
    NeuronBudget { neurons: usize },
    CoefficientBudget { coefficients: usize },
    /// Layer list or a descriptor field does not fit the fixed bit layout.
    ImageOverflow { detail: String },
}

/// Per-neuron wiring: how many sources it sums and where its coefficients start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronDescriptor {
    pub fan_in: usize,
    pub first_coeff_index: usize,
}

impl NeuronDescriptor {
    /// Bias plus weights.
    pub fn coeff_count(&self) -> usize {
        1 + self.fan_in
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    layer_sizes: Vec<usize>,
    neurons: Vec<NeuronDescriptor>,
}

/// JSON topology file: `{"layers": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub layers: Vec<usize>,
}

impl TopologySpec {
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn neurons(&self) -> &[NeuronDescriptor] {
        &self.neurons
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn num_neurons(&self) -> usize {
        self.neurons.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_outputs(&self) -> usize {
        *self.layer_sizes.last().expect("at least one layer")
    }

    pub fn num_coefficients(&self) -> usize {
        self.neurons.iter().map(NeuronDescriptor::coeff_count).sum()
    }

    /// Index of the first neuron of every layer, plus the total at the end.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layer_sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &n in &self.layer_sizes {
            acc += n;
            offsets.push(acc);
        }
        offsets
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile { layers: self.layer_sizes.clone() }
    }
}

/// Wire a fully-connected network: input neurons see one raw input, every other
/// neuron sees the whole previous layer.
pub fn build_fully_connected(layer_sizes: &[usize]) -> Result<TopologySpec, TopologyError> {
    if layer_sizes.is_empty() {
        return Err(TopologyError::NoLayers);
    }
    if let Some(i) = layer_sizes.iter().position(|&n| n == 0) {
        return Err(TopologyError::EmptyLayer(i));
    }
    let mut neurons = Vec::with_capacity(layer_sizes.iter().sum());
    let mut next = 0;
    for (layer, &size) in layer_sizes.iter().enumerate() {
        let fan_in = if layer == 0 { 1 } else { layer_sizes[layer - 1] };
        for _ in 0..size {
            neurons.push(NeuronDescriptor { fan_in, first_coeff_index: next });
            next += 1 + fan_in;
        }
    }
    Ok(TopologySpec { layer_sizes: layer_sizes.to_vec(), neurons })
}

/// Every budget the spec violates; empty means the chip can hold it.
pub fn validate(spec: &TopologySpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let layers = spec.num_layers();
    if layers < 2 {
        out.push(Violation::TooFewLayers { layers });
    }
    let neurons = spec.num_neurons();
    if neurons > MAX_NEURONS {
        out.push(Violation::NeuronBudget { neurons });
    }
    let coefficients = spec.num_coefficients();
    if coefficients > MAX_COEFFICIENTS {
        out.push(Violation::CoefficientBudget { coefficients });
    }
    if layers > MAX_LAYERS {
        out.push(Violation::ImageOverflow { detail: format!("{layers} layers > {MAX_LAYERS}") });
    }
    if let Some(&big) = spec.layer_sizes.iter().find(|&&n| n > u8::MAX as usize) {
        out.push(Violation::ImageOverflow { detail: format!("layer size {big} exceeds 8 bits") });
    }
    if let Some(d) = spec.neurons.iter().find(|d| d.fan_in >= 1 << FAN_IN_BITS) {
        out.push(Violation::ImageOverflow { detail: format!("fan-in {} exceeds 8 bits", d.fan_in) });
    }
    if let Some(d) = spec.neurons.iter().find(|d| d.first_coeff_index >= 1 << FIRST_COEFF_BITS) {
        out.push(Violation::ImageOverflow {
            detail: format!("coefficient index {} exceeds 12 bits", d.first_coeff_index),
        });
    }
    out
}

pub fn is_valid(spec: &TopologySpec) -> bool {
    validate(spec).is_empty()
}

/// Raw contents of the topology and neuron memories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyImage {
    pub topo: [u8; TOPO_BLOCK_BYTES],
    pub neurons: [u8; NEURON_BLOCK_BYTES],
}

impl TopologyImage {
    /// 78-byte topology block followed by the 512-byte neuron block.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TOPO_BLOCK_BYTES + NEURON_BLOCK_BYTES);
        out.extend_from_slice(&self.topo);
        out.extend_from_slice(&self.neurons);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TopologyError> {
        if bytes.len() != TOPO_BLOCK_BYTES + NEURON_BLOCK_BYTES {
            return Err(TopologyError::MalformedImage(format!(
                "expected {} bytes, got {}",
                TOPO_BLOCK_BYTES + NEURON_BLOCK_BYTES,
                bytes.len()
            )));
        }
        let mut topo = [0u8; TOPO_BLOCK_BYTES];
        let mut neurons = [0u8; NEURON_BLOCK_BYTES];
        topo.copy_from_slice(&bytes[..TOPO_BLOCK_BYTES]);
        neurons.copy_from_slice(&bytes[TOPO_BLOCK_BYTES..]);
        Ok(Self { topo, neurons })
    }
}

fn pack_descriptor(d: &NeuronDescriptor) -> u32 {
    (d.first_coeff_index as u32) | ((d.fan_in as u32) << FIRST_COEFF_BITS)
}

/// Layout: `topo[0]` = layer count, `topo[1..]` = layer sizes; neuron slot `i`
/// is a little-endian u32 with bits 0..12 = first coefficient index,
/// bits 12..20 = fan-in, bits 20..32 reserved (zero).
pub fn encode(spec: &TopologySpec) -> Result<TopologyImage, TopologyError> {
    let violations = validate(spec);
    if !violations.is_empty() {
        return Err(TopologyError::ImageOverflow(violations));
    }
    let mut topo = [0u8; TOPO_BLOCK_BYTES];
    topo[0] = spec.num_layers() as u8;
    for (slot, &n) in topo[1..].iter_mut().zip(&spec.layer_sizes) {
        *slot = n as u8;
    }
    let mut neurons = [0u8; NEURON_BLOCK_BYTES];
    for (chunk, d) in neurons.chunks_exact_mut(4).zip(&spec.neurons) {
        chunk.copy_from_slice(&pack_descriptor(d).to_le_bytes());
    }
    Ok(TopologyImage { topo, neurons })
}

pub fn decode(image: &TopologyImage) -> Result<TopologySpec, TopologyError> {
    let malformed = |msg: String| TopologyError::MalformedImage(msg);
    let count = image.topo[0] as usize;
    if count == 0 {
        return Err(malformed("layer count is zero".into()));
    }
    if count > MAX_LAYERS {
        return Err(malformed(format!("layer count {count} exceeds {MAX_LAYERS}")));
    }
    let sizes: Vec<usize> = image.topo[1..=count].iter().map(|&b| b as usize).collect();
    if image.topo[count + 1..].iter().any(|&b| b != 0) {
        return Err(malformed("non-zero bytes after the last layer".into()));
    }
    let spec = build_fully_connected(&sizes).map_err(|e| malformed(e.to_string()))?;
    let violations = validate(&spec);
    if !violations.is_empty() {
        return Err(malformed(format!("decoded topology violates budgets: {violations:?}")));
    }
    let slots = image.neurons.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for (i, word) in slots.enumerate() {
        let expected = spec.neurons.get(i).map_or(0, pack_descriptor);
        if word != expected {
            return Err(malformed(format!(
                "neuron slot {i} holds {word:#010x}, expected {expected:#010x} for a fully-connected layout"
            )));
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coeffs_by_enumeration(layers: &[usize]) -> usize {
        let mut total = 2 * layers[0];
        for pair in layers.windows(2) {
            total += pair[1] * (1 + pair[0]);
        }
        total
    }

    #[test]
    fn example_network_wiring() {
        let spec = build_fully_connected(&[3, 4, 2]).unwrap();
        assert_eq!(spec.num_neurons(), 9);
        assert_eq!(spec.num_coefficients(), 32);
        let firsts: Vec<usize> = spec.neurons().iter().map(|d| d.first_coeff_index).collect();
        // O_3..O_5 start at w_0, w_2, w_4; O_6..O_9 at w_6, w_10, w_14, w_18; O_10, O_11 at w_22, w_27.
        assert_eq!(firsts, vec![0, 2, 4, 6, 10, 14, 18, 22, 27]);
    }

    #[test]
    fn coefficient_counts() {
        assert_eq!(build_fully_connected(&[1, 1]).unwrap().num_coefficients(), 4);
        let big = build_fully_connected(&[10, 13, 13, 13, 13, 13, 3]).unwrap();
        assert_eq!(big.num_coefficients(), 933);
        assert_eq!(big.num_neurons(), 78);
        assert_eq!(coeffs_by_enumeration(&[10, 13, 13, 13, 13, 13, 3]), 933);
    }

    #[test]
    fn build_rejects_empty() {
        assert_eq!(build_fully_connected(&[]), Err(TopologyError::NoLayers));
        assert_eq!(build_fully_connected(&[3, 0, 2]), Err(TopologyError::EmptyLayer(1)));
    }

    #[test]
    fn validate_examples() {
        let wide = build_fully_connected(&[10, 70, 2]).unwrap();
        assert!(validate(&wide).is_empty());
        assert_eq!(wide.num_neurons(), 82);
        assert_eq!(wide.num_coefficients(), 932);

        let single = build_fully_connected(&[129]).unwrap();
        let v = validate(&single);
        assert!(v.contains(&Violation::NeuronBudget { neurons: 129 }));

        let fat = build_fully_connected(&[10, 50, 50, 2]).unwrap();
        assert_eq!(validate(&fat), vec![Violation::CoefficientBudget { coefficients: 3222 }]);
    }

    #[test]
    fn encode_decode_example_network() {
        let spec = build_fully_connected(&[3, 4, 2]).unwrap();
        let image = encode(&spec).unwrap();
        assert_eq!(decode(&image).unwrap(), spec);
        let bytes = image.to_bytes();
        assert_eq!(bytes.len(), 590);
        assert_eq!(&bytes[..4], &[3, 3, 4, 2]);
        assert_eq!(decode(&TopologyImage::from_bytes(&bytes).unwrap()).unwrap(), spec);
    }

    #[test]
    fn encode_largest_listed_topology() {
        let spec = build_fully_connected(&[10, 13, 13, 13, 13, 13, 3]).unwrap();
        let image = encode(&spec).unwrap();
        assert_eq!(image.topo[0], 7);
        assert_eq!(decode(&image).unwrap(), spec);
    }

    #[test]
    fn encode_rejects_over_budget() {
        let fat = build_fully_connected(&[10, 50, 50, 2]).unwrap();
        assert!(matches!(encode(&fat), Err(TopologyError::ImageOverflow(_))));
    }

    #[test]
    fn decode_rejects_zero_image() {
        let zero = TopologyImage { topo: [0; TOPO_BLOCK_BYTES], neurons: [0; NEURON_BLOCK_BYTES] };
        assert!(matches!(decode(&zero), Err(TopologyError::MalformedImage(_))));
    }

    #[test]
    fn decode_rejects_tampered_descriptor() {
        let spec = build_fully_connected(&[3, 4, 2]).unwrap();
        let mut image = encode(&spec).unwrap();
        image.neurons[4 * 5] ^= 1;
        assert!(matches!(decode(&image), Err(TopologyError::MalformedImage(_))));
        let mut image = encode(&spec).unwrap();
        image.neurons[4 * 100] = 1;
        assert!(matches!(decode(&image), Err(TopologyError::MalformedImage(_))));
        let mut image = encode(&spec).unwrap();
        image.topo[10] = 7;
        assert!(matches!(decode(&image), Err(TopologyError::MalformedImage(_))));
    }

    #[test]
    fn from_bytes_checks_length() {
        assert!(TopologyImage::from_bytes(&[0; 10]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn layer_lists() -> impl Strategy<Value = Vec<usize>> {
            prop::collection::vec(1usize..20, 2..7)
        }

        proptest! {
            #[test]
            fn coefficient_count_matches_enumeration(layers in layer_lists()) {
                let spec = build_fully_connected(&layers).unwrap();
                prop_assert_eq!(spec.num_coefficients(), coeffs_by_enumeration(&layers));
                let mut next = 0;
                for d in spec.neurons() {
                    prop_assert_eq!(d.first_coeff_index, next);
                    next += d.coeff_count();
                }
            }

            #[test]
            fn encode_decode_roundtrip(layers in layer_lists()) {
                let spec = build_fully_connected(&layers).unwrap();
                if is_valid(&spec) {
                    let image = encode(&spec).unwrap();
                    prop_assert_eq!(decode(&image).unwrap(), spec);
                    let again = TopologyImage::from_bytes(&image.to_bytes()).unwrap();
                    prop_assert_eq!(encode(&decode(&again).unwrap()).unwrap(), image);
                } else {
                    prop_assert!(encode(&spec).is_err());
                }
            }
        }
    }
}
