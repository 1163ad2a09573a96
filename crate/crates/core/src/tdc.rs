//! Ring-oscillator TDC channels: a 20-bit ripple counter of full ring
//! revolutions plus four thermometer-coded phases, so one code step is a
//! quarter revolution (`result = 4 * coarse + fine`).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COUNTER_BITS: u32 = 20;
pub const PHASES: u32 = 4;
/// Codes per counter roll-over.
pub const CODE_SPAN: u64 = (PHASES as u64) << COUNTER_BITS;
pub const MAX_CODE: u64 = CODE_SPAN - 1;
/// Average LSB of the ten channels.
pub const NOMINAL_LSB_S: f64 = 53.5e-12;

/// Measured DNL extremes (min, max) in LSB for TDC0..TDC9.
pub const MEASURED_DNL: [(f64, f64); 10] = [
    (-0.19, 0.15),
    (-0.11, 0.16),
    (-0.29, 0.29),
    (-0.12, 0.13),
    (-0.45, 0.55),
    (-0.34, 0.36),
    (-0.43, 0.39),
    (-0.14, 0.15),
    (-0.22, 0.23),
    (-0.13, 0.12),
];

/// Measured INL extremes (min, max) in LSB for TDC0..TDC9.
pub const MEASURED_INL: [(f64, f64); 10] = [
    (-0.77, 0.90),
    (-0.15, 1.18),
    (-1.02, 2.17),
    (-1.13, 0.37),
    (-1.99, 0.87),
    (-1.04, 1.66),
    (-1.42, 1.14),
    (-0.52, 0.90),
    (-0.51, 0.46),
    (-0.63, 0.25),
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TdcError {
    #[error("stop ({stop}) precedes start ({start})")]
    NegativeInterval { start: f64, stop: f64 },
    #[error("non-finite timestamp")]
    NonFinite,
    #[error("phase word {0:?} is not a thermometer code")]
    NonThermometer([bool; 4]),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("invalid channel parameter: {0}")]
    InvalidChannel(String),
}

/// FWHM of a Gaussian to its standard deviation.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TdcCode {
    pub coarse: u32,
    pub fine: u8,
}

impl TdcCode {
    pub fn from_parts(coarse: u32, fine: u8) -> Self {
        assert!(fine < PHASES as u8, "fine phase out of range");
        Self { coarse: coarse & ((1 << COUNTER_BITS) - 1), fine }
    }

    /// Split a tick count, wrapping like the ripple counter.
    pub fn from_ticks(ticks: u64) -> Self {
        let t = ticks % CODE_SPAN;
        Self { coarse: (t / PHASES as u64) as u32, fine: (t % PHASES as u64) as u8 }
    }

    pub fn result(self) -> u32 {
        PHASES * self.coarse + self.fine as u32
    }

    /// Frozen ring state `Q<0:3>` as a thermometer word.
    pub fn phase_bits(self) -> [bool; 4] {
        std::array::from_fn(|i| i < self.fine as usize)
    }
}

/// Thermometer decode of the four ring phases: `0000→0, 1000→1, 1100→2, 1110→3`.
pub fn decode_fine(bits: [bool; 4]) -> Result<u8, TdcError> {
    let ones = bits.iter().take_while(|&&b| b).count();
    if ones == 4 || bits[ones..].iter().any(|&b| b) {
        return Err(TdcError::NonThermometer(bits));
    }
    Ok(ones as u8)
}

/// Femtoseconds per second; channel arithmetic runs on an integer femtosecond grid.
pub const FS_PER_S: f64 = 1e15;

/// Round seconds to the nearest femtosecond.
pub fn seconds_to_fs(t: f64) -> i64 {
    (t * FS_PER_S).round() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChannelParams", into = "ChannelParams")]
pub struct TdcChannel {
    lsb_fs: i64,
    dnl: Vec<f64>,
    jitter_sigma: f64,
    /// Upper edge (fs) of every DNL-warped bin; codes beyond the profile are ideal.
    edges_fs: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct ChannelParams {
    lsb_s: f64,
    dnl: Vec<f64>,
    jitter_sigma_s: f64,
}

impl TryFrom<ChannelParams> for TdcChannel {
    type Error = TdcError;
    fn try_from(p: ChannelParams) -> Result<Self, TdcError> {
        TdcChannel::new(p.lsb_s, p.jitter_sigma_s)?.with_dnl(p.dnl)
    }
}

impl From<TdcChannel> for ChannelParams {
    fn from(c: TdcChannel) -> Self {
        ChannelParams { lsb_s: c.lsb(), dnl: c.dnl, jitter_sigma_s: c.jitter_sigma }
    }
}

impl TdcChannel {
    /// `lsb` is rounded to whole femtoseconds.
    pub fn new(lsb: f64, jitter_sigma: f64) -> Result<Self, TdcError> {
        if !(lsb.is_finite() && seconds_to_fs(lsb) >= 1) {
            return Err(TdcError::InvalidChannel(format!("lsb must be at least 1 fs, got {lsb}")));
        }
        if !(jitter_sigma.is_finite() && jitter_sigma >= 0.0) {
            return Err(TdcError::InvalidChannel(format!("jitter sigma must be >= 0, got {jitter_sigma}")));
        }
        Ok(Self { lsb_fs: seconds_to_fs(lsb), dnl: Vec::new(), jitter_sigma, edges_fs: Vec::new() })
    }

    pub fn ideal(lsb: f64) -> Self {
        Self::new(lsb, 0.0).expect("positive lsb")
    }

    /// Warp the first `profile.len()` code bins: bin `i` is `lsb * (1 + dnl[i])` wide.
    pub fn with_dnl(mut self, profile: Vec<f64>) -> Result<Self, TdcError> {
        if let Some(bad) = profile.iter().find(|d| !(d.abs() < 1.0)) {
            return Err(TdcError::InvalidChannel(format!("|dnl| must be < 1, got {bad}")));
        }
        let lsb = self.lsb_fs as f64;
        let mut ideal_edge = 0.0;
        self.edges_fs = profile
            .iter()
            .map(|d| {
                ideal_edge += lsb * (1.0 + d);
                ideal_edge.round() as i64
            })
            .collect();
        self.dnl = profile;
        Ok(self)
    }

    pub fn with_jitter(mut self, sigma: f64) -> Result<Self, TdcError> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(TdcError::InvalidChannel(format!("jitter sigma must be >= 0, got {sigma}")));
        }
        self.jitter_sigma = sigma;
        Ok(self)
    }

    /// LSB in seconds.
    pub fn lsb(&self) -> f64 {
        self.lsb_fs as f64 / FS_PER_S
    }

    pub fn lsb_fs(&self) -> i64 {
        self.lsb_fs
    }

    pub fn dnl_profile(&self) -> &[f64] {
        &self.dnl
    }

    pub fn jitter_sigma(&self) -> f64 {
        self.jitter_sigma
    }

    /// Time (s) spanned by the warped part of the code range.
    pub fn warped_span(&self) -> f64 {
        self.warped_span_fs() as f64 / FS_PER_S
    }

    fn warped_span_fs(&self) -> i64 {
        self.edges_fs.last().copied().unwrap_or(0)
    }

    /// Tick count for a noiseless interval in femtoseconds.
    pub fn ticks_fs(&self, interval_fs: i64) -> u64 {
        let t = interval_fs.max(0);
        let span = self.warped_span_fs();
        if t < span {
            // first edge strictly above t
            self.edges_fs.partition_point(|&e| e <= t) as u64
        } else {
            self.edges_fs.len() as u64 + ((t - span) / self.lsb_fs) as u64
        }
    }

    /// Tick count for a noiseless interval in seconds.
    pub fn ticks(&self, interval: f64) -> u64 {
        self.ticks_fs(seconds_to_fs(interval))
    }

    /// Convert the interval between `start` and `stop` (seconds). Both edges
    /// snap to the femtosecond grid before the interval is formed.
    pub fn convert<R: Rng + ?Sized>(&self, start: f64, stop: f64, rng: &mut R) -> Result<TdcCode, TdcError> {
        if !(start.is_finite() && stop.is_finite()) {
            return Err(TdcError::NonFinite);
        }
        if stop < start {
            return Err(TdcError::NegativeInterval { start, stop });
        }
        let mut interval = seconds_to_fs(stop) - seconds_to_fs(start);
        if self.jitter_sigma > 0.0 {
            let noise = Normal::new(0.0, self.jitter_sigma * FS_PER_S).expect("finite sigma");
            interval += noise.sample(rng).round() as i64;
        }
        Ok(TdcCode::from_ticks(self.ticks_fs(interval)))
    }

    /// Like [`convert`](Self::convert), but a missing stop pulse yields no event.
    pub fn convert_event<R: Rng + ?Sized>(
        &self,
        start: f64,
        stop: Option<f64>,
        rng: &mut R,
    ) -> Result<Option<TdcCode>, TdcError> {
        stop.map(|s| self.convert(start, s, rng)).transpose()
    }
}

/// The ten on-chip channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdcBank {
    pub channels: Vec<TdcChannel>,
}

impl TdcBank {
    pub const CHANNELS: usize = 10;

    /// Ten channels with LSBs evenly spread over [52, 55] ps (mean 53.5 ps),
    /// no DNL, no intrinsic jitter.
    pub fn default_bank() -> Self {
        let channels = (0..Self::CHANNELS)
            .map(|i| TdcChannel::ideal((52.0 + 3.0 * i as f64 / (Self::CHANNELS - 1) as f64) * 1e-12))
            .collect();
        Self { channels }
    }

    /// Every channel at the nominal 53.5 ps.
    pub fn uniform(lsb: f64) -> Self {
        Self { channels: vec![TdcChannel::ideal(lsb); Self::CHANNELS] }
    }

    /// Default bank with a synthetic DNL profile per channel whose extremes
    /// match the measured bank.
    pub fn with_measured_dnl<R: Rng + ?Sized>(profile_len: usize, rng: &mut R) -> Result<Self, TdcError> {
        let channels = Self::default_bank()
            .channels
            .into_iter()
            .zip(MEASURED_DNL)
            .map(|(ch, (lo, hi))| ch.with_dnl(synth_dnl_profile(profile_len, lo, hi, rng)))
            .collect::<Result<_, _>>()?;
        Ok(Self { channels })
    }

    pub fn with_jitter(self, sigma: f64) -> Result<Self, TdcError> {
        let channels = self.channels.into_iter().map(|c| c.with_jitter(sigma)).collect::<Result<_, _>>()?;
        Ok(Self { channels })
    }

    pub fn mean_lsb(&self) -> f64 {
        self.channels.iter().map(TdcChannel::lsb).sum::<f64>() / self.channels.len() as f64
    }
}

/// Random zero-mean DNL profile whose minimum is exactly `min` and maximum exactly `max`.
pub fn synth_dnl_profile<R: Rng + ?Sized>(len: usize, min: f64, max: f64, rng: &mut R) -> Vec<f64> {
    assert!(len >= 3 && min < 0.0 && max > 0.0, "need len >= 3 and min < 0 < max");
    // Inner values stay well inside the extremes so the zero-sum fix-up cannot breach them.
    let (lo, hi) = (min * 0.5, max * 0.5);
    let mut profile: Vec<f64> = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    let a = rng.random_range(0..len);
    let mut b = rng.random_range(0..len - 1);
    if b >= a {
        b += 1;
    }
    profile[a] = min;
    profile[b] = max;
    let residual: f64 = profile.iter().sum();
    let share = residual / (len - 2) as f64;
    for (i, d) in profile.iter_mut().enumerate() {
        if i != a && i != b {
            *d = (*d - share).clamp(min * 0.999, max * 0.999);
        }
    }
    // Clamping can leave a tiny residual; push it onto the inner element with the most room.
    let residual: f64 = profile.iter().sum();
    if residual != 0.0 {
        let idx = (0..len)
            .filter(|&i| i != a && i != b)
            .max_by(|&i, &j| {
                let room = |d: f64| if residual > 0.0 { d - min } else { max - d };
                room(profile[i]).total_cmp(&room(profile[j]))
            })
            .expect("len >= 3");
        profile[idx] -= residual;
    }
    profile
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferPoint {
    pub width: f64,
    pub mean_code: f64,
}

/// Mean output code for each input pulse width over `repetitions` conversions.
pub fn transfer_function<R: Rng + ?Sized>(
    channel: &TdcChannel,
    widths: &[f64],
    repetitions: usize,
    rng: &mut R,
) -> Result<Vec<TransferPoint>, TdcError> {
    let reps = repetitions.max(1);
    widths
        .iter()
        .map(|&w| {
            let mut sum = 0u64;
            for _ in 0..reps {
                sum += channel.convert(0.0, w, rng)?.result() as u64;
            }
            Ok(TransferPoint { width: w, mean_code: sum as f64 / reps as f64 })
        })
        .collect()
}

/// Least-squares slope and intercept of a transfer function.
pub fn fit_line(points: &[TransferPoint]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.width).sum::<f64>() / n;
    let my = points.iter().map(|p| p.mean_code).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.width - mx) * (p.mean_code - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.width - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linearity {
    pub dnl: Vec<f64>,
    pub inl: Vec<f64>,
}

impl Linearity {
    pub fn dnl_extremes(&self) -> (f64, f64) {
        extremes(&self.dnl)
    }

    pub fn inl_extremes(&self) -> (f64, f64) {
        extremes(&self.inl)
    }
}

fn extremes(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// DNL and INL from a code-density histogram over a contiguous code range.
pub fn code_density(histogram: &[u64]) -> Result<Linearity, TdcError> {
    let total: u64 = histogram.iter().sum();
    if histogram.is_empty() || total == 0 {
        return Err(TdcError::EmptyHistogram);
    }
    let mean = total as f64 / histogram.len() as f64;
    let dnl: Vec<f64> = histogram.iter().map(|&c| c as f64 / mean - 1.0).collect();
    let inl = dnl
        .iter()
        .scan(0.0, |acc, d| {
            *acc += d;
            Some(*acc)
        })
        .collect();
    Ok(Linearity { dnl, inl })
}

/// Histogram of `samples` conversions of intervals uniform over the channel's
/// warped span (or `codes` ideal bins when the channel has no DNL profile).
pub fn code_density_histogram<R: Rng + ?Sized>(
    channel: &TdcChannel,
    codes: usize,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<u64>, TdcError> {
    let span = if channel.dnl.is_empty() { codes as f64 * channel.lsb() } else { channel.warped_span() };
    let bins = if channel.dnl.is_empty() { codes } else { channel.dnl.len() };
    let mut hist = vec![0u64; bins];
    for _ in 0..samples {
        let t = rng.random_range(0.0..span);
        let code = channel.convert(0.0, t, rng)?.result() as usize;
        if let Some(slot) = hist.get_mut(code) {
            *slot += 1;
        }
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn eq2_arithmetic() {
        assert_eq!(TdcCode::from_parts(3, 2).result(), 14);
        let c = TdcCode::from_ticks(14);
        assert_eq!((c.coarse, c.fine), (3, 2));
    }

    #[test]
    fn counter_wraps() {
        assert_eq!(TdcCode::from_ticks(MAX_CODE).result() as u64, MAX_CODE);
        assert_eq!(TdcCode::from_ticks(CODE_SPAN).result(), 0);
        assert_eq!(TdcCode::from_ticks(CODE_SPAN + 5).result(), 5);
        assert_eq!(MAX_CODE, 4 * ((1 << 20) - 1) + 3);
    }

    #[test]
    fn ideal_conversion_examples() {
        let ch = TdcChannel::ideal(53.5e-12);
        let mut r = rng();
        assert_eq!(ch.convert(0.0, 0.0, &mut r).unwrap().result(), 0);
        assert_eq!(ch.convert(0.0, 1.07e-9, &mut r).unwrap().result(), 20);
        assert_eq!(ch.convert(0.0, 1.0699e-9, &mut r).unwrap().result(), 19);
        assert_eq!(ch.convert(0.0, 20.0 * 53.5e-12, &mut r).unwrap().result(), 20);
        assert_eq!(ch.convert(1.0e-9, 1.0e-9 + 10.5 * 53.5e-12, &mut r).unwrap().result(), 10);
    }

    #[test]
    fn negative_interval_rejected() {
        let ch = TdcChannel::ideal(53.5e-12);
        assert!(matches!(ch.convert(2.0, 1.0, &mut rng()), Err(TdcError::NegativeInterval { .. })));
        assert!(matches!(ch.convert(0.0, f64::NAN, &mut rng()), Err(TdcError::NonFinite)));
        assert_eq!(ch.convert_event(0.0, None, &mut rng()).unwrap(), None);
    }

    #[test]
    fn thermometer_decoder() {
        assert_eq!(decode_fine([false; 4]).unwrap(), 0);
        assert_eq!(decode_fine([true, false, false, false]).unwrap(), 1);
        assert_eq!(decode_fine([true, true, false, false]).unwrap(), 2);
        assert_eq!(decode_fine([true, true, true, false]).unwrap(), 3);
        assert!(decode_fine([true, false, true, false]).is_err());
        assert!(decode_fine([true; 4]).is_err());
        assert!(decode_fine([false, true, false, false]).is_err());
        for fine in 0..4 {
            assert_eq!(decode_fine(TdcCode::from_parts(7, fine).phase_bits()).unwrap(), fine);
        }
    }

    #[test]
    fn ideal_staircase() {
        let lsb = 53.5e-12;
        let ch = TdcChannel::ideal(lsb);
        let widths: Vec<f64> = (0..=100).map(|k| k as f64 * lsb).collect();
        let tf = transfer_function(&ch, &widths, 10, &mut rng()).unwrap();
        for (k, p) in tf.iter().enumerate() {
            assert_eq!(p.mean_code, k as f64);
        }
        let zero = transfer_function(&ch, &[0.0], 1000, &mut rng()).unwrap();
        assert_eq!(zero[0].mean_code, 0.0);
        let (slope, _) = fit_line(&tf);
        assert!((slope * lsb - 1.0).abs() < 1e-3);
    }

    #[test]
    fn dnl_warping() {
        let ch = TdcChannel::ideal(1e-12).with_dnl(vec![0.5, -0.5, 0.0]).unwrap();
        assert_eq!(ch.ticks_fs(0), 0);
        assert_eq!(ch.ticks_fs(1499), 0);
        assert_eq!(ch.ticks_fs(1500), 1);
        assert_eq!(ch.ticks_fs(1999), 1);
        assert_eq!(ch.ticks_fs(2000), 2);
        assert_eq!(ch.ticks_fs(3000), 3);
        assert_eq!(ch.ticks_fs(4500), 4);
        assert_eq!(ch.ticks(4.5e-12), 4);
        assert!(TdcChannel::ideal(1e-12).with_dnl(vec![1.0]).is_err());
        assert!(TdcChannel::new(1e-16, 0.0).is_err());
    }

    #[test]
    fn code_density_examples() {
        let flat = code_density(&[5, 5, 5, 5]).unwrap();
        assert!(flat.dnl.iter().chain(&flat.inl).all(|&x| x == 0.0));
        let lin = code_density(&[2, 1, 1, 1]).unwrap();
        let expect_dnl = [0.6, -0.2, -0.2, -0.2];
        let expect_inl = [0.6, 0.4, 0.2, 0.0];
        for i in 0..4 {
            assert!((lin.dnl[i] - expect_dnl[i]).abs() < 1e-12);
            assert!((lin.inl[i] - expect_inl[i]).abs() < 1e-12);
        }
        assert_eq!(code_density(&[]), Err(TdcError::EmptyHistogram));
        assert_eq!(code_density(&[0, 0]), Err(TdcError::EmptyHistogram));
    }

    #[test]
    fn synthetic_profile_properties() {
        let mut r = rng();
        for &(lo, hi) in &MEASURED_DNL {
            let p = synth_dnl_profile(64, lo, hi, &mut r);
            let (mn, mx) = extremes(&p);
            assert_eq!((mn, mx), (lo, hi));
            assert!(p.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn default_bank_lsbs() {
        let bank = TdcBank::default_bank();
        assert_eq!(bank.channels.len(), 10);
        assert!((bank.mean_lsb() - NOMINAL_LSB_S).abs() < 1e-15);
        assert_eq!(bank.channels[0].lsb(), 52e-12);
        assert!((bank.channels[9].lsb() - 55e-12).abs() < 1e-20);
    }

    #[test]
    fn jitter_sigma_from_fwhm() {
        assert!((fwhm_to_sigma(120e-12) - 50.96e-12).abs() < 0.01e-12);
    }

    #[test]
    fn channel_serde_roundtrip() {
        let ch = TdcChannel::ideal(53.5e-12).with_dnl(vec![0.1, -0.1]).unwrap();
        let json = serde_json::to_string(&ch).unwrap();
        let back: TdcChannel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ch);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn eq2_holds_for_every_code(ticks in 0u64..(3 * CODE_SPAN)) {
                let c = TdcCode::from_ticks(ticks);
                prop_assert!(c.fine < 4);
                prop_assert_eq!(c.result() as u64, ticks % CODE_SPAN);
                prop_assert_eq!(c.result(), 4 * c.coarse + c.fine as u32);
            }

            #[test]
            fn dnl_estimator_sums_to_zero(hist in prop::collection::vec(0u64..1000, 1..200)) {
                if let Ok(lin) = code_density(&hist) {
                    prop_assert!(lin.dnl.iter().sum::<f64>().abs() < 1e-9);
                }
            }
        }
    }
}
