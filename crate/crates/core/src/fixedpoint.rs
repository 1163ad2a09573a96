//! Two's-complement fixed-point arithmetic for the on-chip datapath.
//!
//! Coefficients live in signed Q(10,8) (1024 slots of 10 bits fill the 10.24 kbit
//! coefficient memory), activations and accumulators in signed Q(32,8). Every
//! rounding step is half-away-from-zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Guard below which [`relative_error`] falls back to the absolute difference.
pub const RELATIVE_ERROR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("invalid fixed-point format: total_bits={total_bits}, frac_bits={frac_bits} (need 1 <= frac < total <= 32)")]
    InvalidFormat { total_bits: u8, frac_bits: u8 },
    #[error("fx_mac operand has more fractional bits than the product can shed ({product_frac} < {acc_frac})")]
    FracMismatch { product_frac: u8, acc_frac: u8 },
}

/// Behaviour of [`to_fixed`] when the rounded value does not fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overflow {
    /// Keep the low `total_bits` bits (modular two's-complement).
    Wrap,
    /// Clamp to the nearest representable extreme.
    Saturate,
}

/// A Q(total, frac) fixed-point format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxFormat {
    total_bits: u8,
    frac_bits: u8,
    signed: bool,
}

impl FxFormat {
    /// Coefficient memory format, signed Q(10,8): range [-2, 1.99609375].
    pub const COEFF: FxFormat = FxFormat { total_bits: 10, frac_bits: 8, signed: true };
    /// Activation and accumulator format, signed Q(32,8).
    pub const ACC: FxFormat = FxFormat { total_bits: 32, frac_bits: 8, signed: true };

    pub fn new(total_bits: u8, frac_bits: u8, signed: bool) -> Result<Self, FormatError> {
        if frac_bits < 1 || frac_bits >= total_bits || total_bits > 32 {
            return Err(FormatError::InvalidFormat { total_bits, frac_bits });
        }
        Ok(Self { total_bits, frac_bits, signed })
    }

    pub fn total_bits(self) -> u8 {
        self.total_bits
    }

    pub fn frac_bits(self) -> u8 {
        self.frac_bits
    }

    pub fn is_signed(self) -> bool {
        self.signed
    }

    /// Smallest representable raw payload.
    pub fn min_raw(self) -> i64 {
        if self.signed {
            -(1i64 << (self.total_bits - 1))
        } else {
            0
        }
    }

    /// Largest representable raw payload.
    pub fn max_raw(self) -> i64 {
        if self.signed {
            (1i64 << (self.total_bits - 1)) - 1
        } else {
            (1i64 << self.total_bits) - 1
        }
    }

    /// Weight of one LSB, `2^-frac_bits`.
    pub fn lsb(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(self) -> f64 {
        self.min_raw() as f64 * self.lsb()
    }

    pub fn max_value(self) -> f64 {
        self.max_raw() as f64 * self.lsb()
    }

    pub fn contains_raw(self, raw: i64) -> bool {
        (self.min_raw()..=self.max_raw()).contains(&raw)
    }

    /// Reduce an arbitrary integer modulo `2^total_bits` into this format's range.
    pub fn wrap_raw(self, raw: i128) -> i64 {
        let modulus = 1i128 << self.total_bits;
        let low = raw.rem_euclid(modulus);
        if self.signed && low >= modulus / 2 {
            (low - modulus) as i64
        } else {
            low as i64
        }
    }

    pub fn saturate_raw(self, raw: i128) -> i64 {
        raw.clamp(self.min_raw() as i128, self.max_raw() as i128) as i64
    }
}

/// A fixed-point number: `raw / 2^frac_bits` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxValue {
    raw: i64,
    format: FxFormat,
}

impl FxValue {
    /// Build from a raw payload, or `None` if it does not fit the format.
    pub fn from_raw(raw: i64, format: FxFormat) -> Option<Self> {
        format.contains_raw(raw).then_some(Self { raw, format })
    }

    pub fn zero(format: FxFormat) -> Self {
        Self { raw: 0, format }
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn format(self) -> FxFormat {
        self.format
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 * self.format.lsb()
    }

    /// Re-express in another format with at least as many fractional bits
    /// lost as gained, saturating on overflow.
    pub fn convert(self, target: FxFormat, mode: Overflow) -> Self {
        let shift = target.frac_bits as i32 - self.format.frac_bits as i32;
        let raw = if shift >= 0 {
            (self.raw as i128) << shift
        } else {
            round_shift(self.raw as i128, (-shift) as u32)
        };
        let raw = match mode {
            Overflow::Wrap => target.wrap_raw(raw),
            Overflow::Saturate => target.saturate_raw(raw),
        };
        Self { raw, format: target }
    }
}

/// Arithmetic right shift with half-away-from-zero rounding.
pub(crate) fn round_shift(value: i128, shift: u32) -> i128 {
    if shift == 0 {
        return value;
    }
    let half = 1i128 << (shift - 1);
    let mag = (value.unsigned_abs() as i128 + half) >> shift;
    if value < 0 {
        -mag
    } else {
        mag
    }
}

/// Quantize a real number to `fmt`, rounding half away from zero.
///
/// NaN maps to zero; infinities behave like huge finite values.
pub fn to_fixed(x: f64, fmt: FxFormat, mode: Overflow) -> FxValue {
    if x.is_nan() {
        return FxValue::zero(fmt);
    }
    // Scaling by a power of two is exact; `as` saturates at the i128 extremes.
    let scaled = (x * (fmt.frac_bits as f64).exp2()).round();
    let rounded = scaled as i128;
    let raw = match mode {
        Overflow::Wrap => fmt.wrap_raw(rounded),
        Overflow::Saturate => fmt.saturate_raw(rounded),
    };
    FxValue { raw, format: fmt }
}

/// `acc + a * b`, with the product rounded half-away-from-zero down to the
/// accumulator's fractional precision and the sum saturated to its range.
pub fn fx_mac(acc: FxValue, a: FxValue, b: FxValue) -> Result<FxValue, FormatError> {
    let product_frac = a.format.frac_bits + b.format.frac_bits;
    let acc_fmt = acc.format;
    if product_frac < acc_fmt.frac_bits {
        return Err(FormatError::FracMismatch { product_frac, acc_frac: acc_fmt.frac_bits });
    }
    let product = a.raw as i128 * b.raw as i128;
    let term = round_shift(product, (product_frac - acc_fmt.frac_bits) as u32);
    let raw = acc_fmt.saturate_raw(acc.raw as i128 + term);
    Ok(FxValue { raw, format: acc_fmt })
}

/// `|golden - approx| / |golden|`, or the absolute difference when
/// `|golden| <= RELATIVE_ERROR_EPS`.
pub fn relative_error(golden: f64, approx: f64) -> f64 {
    let diff = (golden - approx).abs();
    if golden.abs() > RELATIVE_ERROR_EPS {
        diff / golden.abs()
    } else {
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q10() -> FxFormat {
        FxFormat::COEFF
    }

    #[test]
    fn format_bounds() {
        assert!(FxFormat::new(10, 8, true).is_ok());
        assert!(FxFormat::new(8, 8, true).is_err());
        assert!(FxFormat::new(33, 8, true).is_err());
        assert!(FxFormat::new(10, 0, true).is_err());
        assert_eq!(q10().min_value(), -2.0);
        assert_eq!(q10().max_value(), 1.99609375);
        let u = FxFormat::new(10, 8, false).unwrap();
        assert_eq!(u.min_value(), 0.0);
        assert_eq!(u.max_raw(), 1023);
    }

    #[test]
    fn to_fixed_examples() {
        assert_eq!(to_fixed(1.0, q10(), Overflow::Saturate).raw(), 256);
        assert_eq!(to_fixed(1.0 / 256.0, q10(), Overflow::Saturate).raw(), 1);
        let sat = to_fixed(3.7, q10(), Overflow::Saturate);
        assert_eq!(sat.raw(), 511);
        assert_eq!(sat.to_f64(), 1.99609375);
    }

    #[test]
    fn to_fixed_wrap_is_modular() {
        // round(3.7 * 256) = 947; 947 - 1024 = -77
        let w = to_fixed(3.7, q10(), Overflow::Wrap);
        assert_eq!(w.raw(), -77);
        assert_eq!(w.to_f64(), -0.30078125);
        assert_eq!(to_fixed(-2.0, q10(), Overflow::Wrap).raw(), -512);
        assert_eq!(to_fixed(2.0, q10(), Overflow::Wrap).raw(), -512);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(to_fixed(0.5 / 256.0, q10(), Overflow::Saturate).raw(), 1);
        assert_eq!(to_fixed(-0.5 / 256.0, q10(), Overflow::Saturate).raw(), -1);
        assert_eq!(to_fixed(0.49 / 256.0, q10(), Overflow::Saturate).raw(), 0);
        assert_eq!(round_shift(-384, 8), -2);
        assert_eq!(round_shift(383, 8), 1);
    }

    #[test]
    fn non_finite_inputs() {
        assert_eq!(to_fixed(f64::NAN, q10(), Overflow::Saturate).raw(), 0);
        assert_eq!(to_fixed(f64::INFINITY, q10(), Overflow::Saturate).raw(), 511);
        assert_eq!(to_fixed(f64::NEG_INFINITY, q10(), Overflow::Saturate).raw(), -512);
    }

    #[test]
    fn mac_examples() {
        let acc0 = FxValue::zero(FxFormat::ACC);
        let one = to_fixed(1.0, q10(), Overflow::Saturate);
        let one_act = to_fixed(1.0, FxFormat::ACC, Overflow::Saturate);
        assert_eq!(fx_mac(acc0, one, one_act).unwrap().to_f64(), 1.0);

        let half = to_fixed(0.5, q10(), Overflow::Saturate);
        let half_act = to_fixed(0.5, FxFormat::ACC, Overflow::Saturate);
        let r = fx_mac(acc0, half, half_act).unwrap();
        assert_eq!(r.raw(), 64);
        assert_eq!(r.to_f64(), 0.25);

        let acc = to_fixed(0.25, FxFormat::ACC, Overflow::Saturate);
        let neg_half = to_fixed(-0.5, q10(), Overflow::Saturate);
        assert_eq!(fx_mac(acc, neg_half, half_act).unwrap().to_f64(), 0.0);
    }

    #[test]
    fn mac_saturates() {
        let acc = FxValue::from_raw(FxFormat::ACC.max_raw(), FxFormat::ACC).unwrap();
        let one = to_fixed(1.0, q10(), Overflow::Saturate);
        let big = to_fixed(1000.0, FxFormat::ACC, Overflow::Saturate);
        assert_eq!(fx_mac(acc, one, big).unwrap().raw(), FxFormat::ACC.max_raw());
        let neg = to_fixed(-2.0, q10(), Overflow::Saturate);
        let min = FxValue::from_raw(FxFormat::ACC.min_raw(), FxFormat::ACC).unwrap();
        assert_eq!(fx_mac(min, neg, to_fixed(-1.0, FxFormat::ACC, Overflow::Saturate)).unwrap().raw(), min.raw() + 512);
        assert_eq!(fx_mac(min, neg, big).unwrap().raw(), FxFormat::ACC.min_raw());
    }

    #[test]
    fn mac_rejects_underprecise_operands() {
        let acc = FxValue::zero(FxFormat::ACC);
        let coarse = FxFormat::new(8, 2, true).unwrap();
        let a = FxValue::zero(coarse);
        assert!(matches!(fx_mac(acc, a, a), Err(FormatError::FracMismatch { .. })));
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(100.0, 100.0), 0.0);
        assert!((relative_error(200.0, 199.0) - 0.005).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.001), 0.001);
    }

    #[test]
    fn convert_between_formats() {
        let v = to_fixed(1.5, q10(), Overflow::Saturate);
        let wide = v.convert(FxFormat::ACC, Overflow::Saturate);
        assert_eq!(wide.raw(), 384);
        let big = to_fixed(100.0, FxFormat::ACC, Overflow::Saturate);
        assert_eq!(big.convert(q10(), Overflow::Saturate).raw(), 511);
    }
}
