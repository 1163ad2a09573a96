//! Emulator and off-chip toolchain for a reconfigurable fixed-point
//! feed-forward ANN fed by ten ring-oscillator TDCs.
//!
//! - [`fixedpoint`]: Q-format arithmetic of the datapath
//! - [`topology`]: network shapes, hardware budgets and memory images
//! - [`ann`]: golden and bit-exact inference, error comparison, op counts
//! - [`tdc`]: TDC conversion and code-density characterization
//! - [`pet_sim`]: synthetic coincidence and single-shot datasets
//! - [`ga`]: genetic-algorithm training with optional Adam refinement
//! - [`quantize`]: coefficient quantization and quantized evaluation
//! - [`metrics`]: confusion matrices and one-vs-rest accuracy/precision

pub mod ann;
pub mod fixedpoint;
pub mod ga;
pub mod metrics;
pub mod pet_sim;
pub mod quantize;
pub mod rng;
pub mod tdc;
pub mod topology;
