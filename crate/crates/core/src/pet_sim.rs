//! Two-detector time-of-flight Monte Carlo and exposure-frame assembly.
//!
//! A source on the x axis between two 5-SiPM detectors emits back-to-back
//! gammas. Detector 1 (SiPM IDs 1..=5) sits at `+separation/2`, detector 2
//! (IDs 6..=10) at `-separation/2`, so the gamma flight times are
//! `(separation/2 ∓ x) / c`. Every SiPM of a struck crystal fires with a fixed
//! efficiency after an exponential scintillation delay and Gaussian jitter.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, domain};
use crate::tdc::{fwhm_to_sigma, TdcBank, TdcCode, TdcError};

pub const SPEED_OF_LIGHT_MM_PER_S: f64 = 2.997_924_58e11;
/// Display label of the non-valid class: a position outside the detector gap.
pub const NON_VALID_CLASS_MM: f64 = -120.0;
/// One EN-width clock cycle of the single-shot setup.
pub const SINGLE_SHOT_CLOCK_S: f64 = 5e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("source x = {x} mm is outside (-{half}, {half}) mm")]
    OutOfRangeSource { x: f64, half: f64 },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid simulation parameter: {0}")]
    InvalidConfig(String),
    #[error("source position {0} mm is not in the class map")]
    UnknownPosition(f64),
    #[error("TDC bank has {have} channels, need {need}")]
    NotEnoughChannels { have: usize, need: usize },
    #[error(transparent)]
    Tdc(#[from] TdcError),
    #[error("dataset line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scintillator {
    pub width_mm: f64,
    pub height_mm: f64,
    pub length_mm: f64,
}

impl Default for Scintillator {
    /// 4 mm x 4 mm x 20 mm LYSO block.
    fn default() -> Self {
        Self { width_mm: 4.0, height_mm: 4.0, length_mm: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub detector_separation_mm: f64,
    pub sipms_per_detector: usize,
    pub scintillator: Scintillator,
    pub source_positions_x_mm: Vec<f64>,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            detector_separation_mm: 220.0,
            sipms_per_detector: 5,
            scintillator: Scintillator::default(),
            source_positions_x_mm: vec![-57.0, 0.0, 65.0],
        }
    }
}

impl Geometry {
    pub fn half_gap(&self) -> f64 {
        self.detector_separation_mm / 2.0
    }

    pub fn channels(&self) -> usize {
        2 * self.sipms_per_detector
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.detector_separation_mm > 0.0) {
            return Err(SimError::InvalidGeometry("separation must be positive".into()));
        }
        if self.sipms_per_detector == 0 {
            return Err(SimError::InvalidGeometry("need at least one SiPM per detector".into()));
        }
        for &x in &self.source_positions_x_mm {
            self.check_source(x)?;
        }
        Ok(())
    }

    pub fn check_source(&self, x: f64) -> Result<(), SimError> {
        let half = self.half_gap();
        if x.is_finite() && x > -half && x < half {
            Ok(())
        } else {
            Err(SimError::OutOfRangeSource { x, half })
        }
    }

    /// Gamma flight times (s) to detector 1 and detector 2.
    pub fn flight_times(&self, x: f64) -> [f64; 2] {
        let half = self.half_gap();
        [(half - x) / SPEED_OF_LIGHT_MM_PER_S, (half + x) / SPEED_OF_LIGHT_MM_PER_S]
    }

    /// Detector (0 or 1) that a 1-based SiPM ID belongs to.
    pub fn detector_of(&self, sipm: u8) -> usize {
        (sipm as usize - 1) / self.sipms_per_detector
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scintillation_tau_s: f64,
    pub jitter_fwhm_s: f64,
    /// Probability that a struck crystal's SiPM fires.
    pub sipm_efficiency: f64,
    /// Probability that a gamma deposits in its crystal at all.
    pub interaction_prob: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { scintillation_tau_s: 40e-9, jitter_fwhm_s: 120e-12, sipm_efficiency: 0.8, interaction_prob: 0.75 }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<(), SimError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.scintillation_tau_s > 0.0) {
            return Err(SimError::InvalidConfig("scintillation tau must be positive".into()));
        }
        if !(self.jitter_fwhm_s >= 0.0) {
            return Err(SimError::InvalidConfig("jitter FWHM must be >= 0".into()));
        }
        if !prob(self.sipm_efficiency) || !prob(self.interaction_prob) {
            return Err(SimError::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One SiPM timestamp, relative to the annihilation. Jitter can make very
/// early hits slightly negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    /// 1-based A-SiPM ID.
    pub sipm: u8,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceEvent {
    pub source_x_mm: f64,
    /// Gamma arrival at detector 1 and detector 2, whether or not it interacted.
    pub gamma_arrival_s: [f64; 2],
    /// Sorted by time.
    pub hits: Vec<Hit>,
}

/// Generate `n_events` annihilations at `source_x`. Event `k` draws from its
/// own stream derived from `(seed, source_x, k)`.
pub fn simulate_coincidence(
    geometry: &Geometry,
    config: &SimConfig,
    source_x: f64,
    n_events: usize,
    seed: u64,
) -> Result<Vec<CoincidenceEvent>, SimError> {
    geometry.validate()?;
    geometry.check_source(source_x)?;
    config.validate()?;
    let arrival = geometry.flight_times(source_x);
    let delay = Exp::new(1.0 / config.scintillation_tau_s).expect("positive tau");
    let jitter = Normal::new(0.0, fwhm_to_sigma(config.jitter_fwhm_s)).expect("finite sigma");
    let per_det = geometry.sipms_per_detector;
    let events = (0..n_events)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, &[domain::EVENT, source_x.to_bits(), k as u64]);
            let mut hits = Vec::with_capacity(geometry.channels());
            for (det, &t_gamma) in arrival.iter().enumerate() {
                if !r.random_bool(config.interaction_prob) {
                    continue;
                }
                for s in 0..per_det {
                    if r.random_bool(config.sipm_efficiency) {
                        let t = t_gamma + delay.sample(&mut r) + jitter.sample(&mut r);
                        hits.push(Hit { sipm: (det * per_det + s + 1) as u8, time_s: t });
                    }
                }
            }
            hits.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
            CoincidenceEvent { source_x_mm: source_x, gamma_arrival_s: arrival, hits }
        })
        .collect();
    Ok(events)
}

/// Target attached to a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Class(usize),
    Value(f64),
    Point([f64; 2]),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match *self {
            Label::Class(c) => Some(c),
            _ => None,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Label::Value(v) => Some(v),
            _ => None,
        }
    }
}

/// Class 0 is the non-valid class; classes `1..` are the source positions in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub positions_mm: Vec<f64>,
}

impl ClassMap {
    pub const NON_VALID: usize = 0;

    pub fn new(positions_mm: Vec<f64>) -> Self {
        Self { positions_mm }
    }

    pub fn num_classes(&self) -> usize {
        self.positions_mm.len() + 1
    }

    pub fn class_of(&self, x_mm: f64) -> Result<usize, SimError> {
        self.positions_mm
            .iter()
            .position(|&p| (p - x_mm).abs() < 1e-9)
            .map(|i| i + 1)
            .ok_or(SimError::UnknownPosition(x_mm))
    }

    /// Position in mm shown for a class, non-valid as -120.
    pub fn display_mm(&self, class: usize) -> f64 {
        if class == Self::NON_VALID {
            NON_VALID_CLASS_MM
        } else {
            self.positions_mm[class - 1]
        }
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.num_classes()).map(|c| format!("{}", self.display_mm(c))).collect()
    }
}

/// How assembled coincidence frames are labeled.
#[derive(Debug, Clone, PartialEq)]
pub enum Labeling {
    Classes(ClassMap),
    /// `(x, 0)` for valid frames, `(-120, 0)` for non-valid ones.
    Position,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// One entry per TDC channel; `None` when the channel did not fire.
    pub codes: Vec<Option<TdcCode>>,
    pub label: Label,
    pub valid: bool,
    pub source_x_mm: Option<f64>,
}

/// Code fed to the ANN for a channel that did not fire.
pub const MISSING_CODE: u32 = 0;

impl Frame {
    /// ANN input vector, missing channels as [`MISSING_CODE`].
    pub fn inputs(&self) -> Vec<f64> {
        self.codes.iter().map(|c| c.map_or(MISSING_CODE, TdcCode::result) as f64).collect()
    }

    pub fn fired(&self) -> Vec<bool> {
        self.codes.iter().map(Option::is_some).collect()
    }

    pub fn sample(&self) -> Sample {
        Sample { inputs: self.inputs(), target: self.label }
    }
}

/// ANN input vector with its training target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Vec<f64>,
    pub target: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub frame_length_s: f64,
    /// The frame (and every TDC START) opens this long before the annihilation.
    pub pretrigger_s: f64,
}

impl FrameConfig {
    /// Five times the 99th percentile of hit times measured from frame open.
    pub fn from_events(events: &[CoincidenceEvent], pretrigger_s: f64) -> Self {
        let mut times: Vec<f64> = events.iter().flat_map(|e| e.hits.iter().map(|h| h.time_s + pretrigger_s)).collect();
        let p99 = if times.is_empty() {
            pretrigger_s.max(1e-9)
        } else {
            times.sort_by(f64::total_cmp);
            times[((times.len() as f64 * 0.99).ceil() as usize).clamp(1, times.len()) - 1]
        };
        Self { frame_length_s: 5.0 * p99, pretrigger_s }
    }
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self { frame_length_s: 1e-6, pretrigger_s: 100e-9 }
    }
}

/// Frames plus a disjoint 80/20 train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

pub const TRAIN_FRACTION: f64 = 0.8;

impl Dataset {
    /// Split with a shuffle seeded by `seed`.
    pub fn new(frames: Vec<Frame>, seed: u64) -> Self {
        let n = frames.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(seed, &[domain::SPLIT, n as u64]);
        for i in (1..n).rev() {
            let j = r.random_range(0..=i);
            order.swap(i, j);
        }
        let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
        let validation = order.split_off(n_train);
        Self { frames, train: order, validation }
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn train_frames(&self) -> impl Iterator<Item = &Frame> {
        self.train.iter().map(|&i| &self.frames[i])
    }

    pub fn validation_frames(&self) -> impl Iterator<Item = &Frame> {
        self.validation.iter().map(|&i| &self.frames[i])
    }

    pub fn train_samples(&self) -> Vec<Sample> {
        self.train_frames().map(Frame::sample).collect()
    }

    pub fn validation_samples(&self) -> Vec<Sample> {
        self.validation_frames().map(Frame::sample).collect()
    }
}

/// Turn events into exposure frames: one frame opens `pretrigger` before each
/// annihilation, the first hit of each SiPM inside the frame is converted by
/// its TDC, and frames where nothing fired are dropped (no trigger).
pub fn assemble_frames(
    events: &[CoincidenceEvent],
    geometry: &Geometry,
    bank: &TdcBank,
    frame: &FrameConfig,
    labeling: &Labeling,
    seed: u64,
) -> Result<Dataset, SimError> {
    if !(frame.frame_length_s > 0.0) || !(frame.pretrigger_s >= 0.0) {
        return Err(SimError::InvalidConfig("frame length must be positive and pretrigger >= 0".into()));
    }
    let channels = geometry.channels();
    if bank.channels.len() < channels {
        return Err(SimError::NotEnoughChannels { have: bank.channels.len(), need: channels });
    }
    let frames: Vec<Option<Frame>> = events
        .par_iter()
        .enumerate()
        .map(|(k, ev)| {
            let mut r = rng::stream(seed, &[domain::CONVERT, k as u64]);
            let mut first: Vec<Option<f64>> = vec![None; channels];
            for h in &ev.hits {
                let t = h.time_s + frame.pretrigger_s;
                let slot = &mut first[h.sipm as usize - 1];
                if (0.0..frame.frame_length_s).contains(&t) && slot.is_none_or(|prev| t < prev) {
                    *slot = Some(t);
                }
            }
            if first.iter().all(Option::is_none) {
                return Ok(None);
            }
            let mut per_detector = [false; 2];
            for (i, f) in first.iter().enumerate() {
                if f.is_some() {
                    per_detector[geometry.detector_of(i as u8 + 1)] = true;
                }
            }
            let valid = per_detector[0] && per_detector[1];
            let codes = first
                .iter()
                .zip(&bank.channels)
                .map(|(t, ch)| ch.convert_event(0.0, *t, &mut r))
                .collect::<Result<Vec<_>, _>>()?;
            let label = match labeling {
                Labeling::Classes(map) if valid => Label::Class(map.class_of(ev.source_x_mm)?),
                Labeling::Classes(_) => Label::Class(ClassMap::NON_VALID),
                Labeling::Position if valid => Label::Point([ev.source_x_mm, 0.0]),
                Labeling::Position => Label::Point([NON_VALID_CLASS_MM, 0.0]),
            };
            Ok(Some(Frame { codes, label, valid, source_x_mm: Some(ev.source_x_mm) }))
        })
        .collect::<Result<_, SimError>>()?;
    Ok(Dataset::new(frames.into_iter().flatten().collect(), seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleShotConfig {
    pub channels: usize,
    pub jitter_fwhm_s: f64,
    pub clock_period_s: f64,
}

impl Default for SingleShotConfig {
    fn default() -> Self {
        Self { channels: 5, jitter_fwhm_s: 120e-12, clock_period_s: SINGLE_SHOT_CLOCK_S }
    }
}

/// `n_frames` laser shots with an EN pulse of `en_width` clock cycles; each of
/// the first `channels` TDCs converts the pulse plus its own jitter.
pub fn simulate_single_shot(
    en_width: u32,
    n_frames: usize,
    bank: &TdcBank,
    config: &SingleShotConfig,
    seed: u64,
) -> Result<Vec<Frame>, SimError> {
    if bank.channels.len() < config.channels {
        return Err(SimError::NotEnoughChannels { have: bank.channels.len(), need: config.channels });
    }
    if !(config.jitter_fwhm_s >= 0.0 && config.clock_period_s > 0.0) {
        return Err(SimError::InvalidConfig("single-shot jitter must be >= 0 and clock period > 0".into()));
    }
    let width = en_width as f64 * config.clock_period_s;
    let jitter = Normal::new(0.0, fwhm_to_sigma(config.jitter_fwhm_s)).expect("finite sigma");
    (0..n_frames)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, &[domain::SINGLE_SHOT, en_width as u64, k as u64]);
            let codes = bank.channels[..config.channels]
                .iter()
                .map(|ch| {
                    let stop = (width + jitter.sample(&mut r)).max(0.0);
                    ch.convert(0.0, stop, &mut r).map(Some)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Frame { codes, label: Label::Value(en_width as f64), valid: true, source_x_mm: None })
        })
        .collect()
}

/// Frames for several EN widths, split 80/20.
pub fn single_shot_dataset(
    widths: &[u32],
    frames_per_width: usize,
    bank: &TdcBank,
    config: &SingleShotConfig,
    seed: u64,
) -> Result<Dataset, SimError> {
    let mut frames = Vec::with_capacity(widths.len() * frames_per_width);
    for &w in widths {
        frames.extend(simulate_single_shot(w, frames_per_width, bank, config, seed)?);
    }
    Ok(Dataset::new(frames, seed))
}

/// One JSONL line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub codes: Vec<u32>,
    pub fired: Vec<bool>,
    pub label: Label,
    pub source_x_mm: Option<f64>,
    pub valid: bool,
}

impl From<&Frame> for FrameRecord {
    fn from(f: &Frame) -> Self {
        FrameRecord {
            codes: f.codes.iter().map(|c| c.map_or(MISSING_CODE, TdcCode::result)).collect(),
            fired: f.fired(),
            label: f.label,
            source_x_mm: f.source_x_mm,
            valid: f.valid,
        }
    }
}

impl From<FrameRecord> for Frame {
    fn from(r: FrameRecord) -> Self {
        let codes = r
            .codes
            .iter()
            .zip(&r.fired)
            .map(|(&c, &fired)| fired.then(|| TdcCode::from_ticks(c as u64)))
            .collect();
        Frame { codes, label: r.label, valid: r.valid, source_x_mm: r.source_x_mm }
    }
}

pub fn write_jsonl<W: Write>(frames: &[Frame], mut out: W) -> Result<(), SimError> {
    for f in frames {
        let line = serde_json::to_string(&FrameRecord::from(f)).map_err(|e| SimError::Json { line: 0, source: e })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Frame>, SimError> {
    let mut frames = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| SimError::Json { line: i + 1, source: e })?;
        if rec.codes.len() != rec.fired.len() {
            return Err(SimError::InvalidConfig(format!("line {}: codes and fired differ in length", i + 1)));
        }
        frames.push(rec.into());
    }
    Ok(frames)
}
