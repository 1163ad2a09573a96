//! Genetic-algorithm training of fixed-topology networks, with optional
//! per-individual Adam refinement.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::{backprop, forward_trace, Activation, AnnError, CoefficientSet};
use crate::pet_sim::{Label, Sample};
use crate::rng::{self, domain};
use crate::topology::TopologySpec;

/// Genes are initialized and mutated uniformly on `[-INIT_RANGE, INIT_RANGE]`.
pub const INIT_RANGE: f64 = 1.0;
pub const TOURNAMENT_SIZE: usize = 3;

#[derive(Debug, Error)]
pub enum GaError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid GA configuration: {0}")]
    InvalidConfig(String),
    #[error("{kind} loss needs {expected}, got {got}")]
    ShapeMismatch { kind: LossKind, expected: String, got: String },
    #[error("non-finite gradient at epoch {epoch}")]
    NonDifferentiable { epoch: usize },
    #[error(transparent)]
    Ann(#[from] AnnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    AbsoluteError,
    SquaredError,
    Euclidean2d,
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::AbsoluteError => "absolute_error",
            LossKind::SquaredError => "squared_error",
            LossKind::Euclidean2d => "euclidean_2d",
            LossKind::CrossEntropy => "cross_entropy",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "absolute_error" => Ok(LossKind::AbsoluteError),
            "squared_error" => Ok(LossKind::SquaredError),
            "euclidean_2d" => Ok(LossKind::Euclidean2d),
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            _ => Err(format!("unknown loss {s:?}")),
        }
    }
}

fn shape_error(kind: LossKind, expected: &str, prediction: &[f64], target: &Label) -> GaError {
    GaError::ShapeMismatch {
        kind,
        expected: expected.to_string(),
        got: format!("{} outputs with target {target:?}", prediction.len()),
    }
}

/// Loss and its gradient with respect to `prediction`.
pub fn loss_and_grad(kind: LossKind, prediction: &[f64], target: &Label) -> Result<(f64, Vec<f64>), GaError> {
    match (kind, target, prediction.len()) {
        (LossKind::AbsoluteError, Label::Value(t), 1) => {
            let d = prediction[0] - t;
            Ok((d.abs(), vec![if d == 0.0 { 0.0 } else { d.signum() }]))
        }
        (LossKind::SquaredError, Label::Value(t), 1) => {
            let d = prediction[0] - t;
            Ok((d * d, vec![2.0 * d]))
        }
        (LossKind::Euclidean2d, Label::Point([x, y]), 2) => {
            let (dx, dy) = (prediction[0] - x, prediction[1] - y);
            let dist = dx.hypot(dy);
            let g = if dist == 0.0 { vec![0.0, 0.0] } else { vec![dx / dist, dy / dist] };
            Ok((dist, g))
        }
        (LossKind::CrossEntropy, Label::Class(c), n) if *c < n => {
            let max = prediction.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = prediction.iter().map(|p| (p - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let loss = sum.ln() + max - prediction[*c];
            let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            g[*c] -= 1.0;
            Ok((loss, g))
        }
        (LossKind::AbsoluteError | LossKind::SquaredError, ..) => Err(shape_error(kind, "1 output and a value target", prediction, target)),
        (LossKind::Euclidean2d, ..) => Err(shape_error(kind, "2 outputs and a point target", prediction, target)),
        (LossKind::CrossEntropy, ..) => Err(shape_error(kind, "a class target below the output count", prediction, target)),
    }
}

pub fn loss(kind: LossKind, prediction: &[f64], target: &Label) -> Result<f64, GaError> {
    loss_and_grad(kind, prediction, target).map(|(l, _)| l)
}

fn check_inputs(spec: &TopologySpec, coeffs: &CoefficientSet<f64>, samples: &[Sample]) -> Result<(), GaError> {
    if samples.is_empty() {
        return Err(GaError::EmptyDataset);
    }
    let shape = |what, expected, got| GaError::Ann(AnnError::ShapeMismatch { what, expected, got });
    if coeffs.len() != spec.num_coefficients() {
        return Err(shape("coefficients", spec.num_coefficients(), coeffs.len()));
    }
    if let Some(s) = samples.iter().find(|s| s.inputs.len() != spec.num_inputs()) {
        return Err(shape("inputs", spec.num_inputs(), s.inputs.len()));
    }
    Ok(())
}

fn outputs<'a>(spec: &TopologySpec, post: &'a [f64]) -> &'a [f64] {
    &post[spec.num_neurons() - spec.num_outputs()..]
}

/// Mean loss over `samples`.
pub fn average_loss(
    spec: &TopologySpec,
    coeffs: &CoefficientSet<f64>,
    samples: &[Sample],
    kind: LossKind,
    act: Activation,
) -> Result<f64, GaError> {
    check_inputs(spec, coeffs, samples)?;
    let mut total = 0.0;
    for s in samples {
        let (_, post) = forward_trace(spec, coeffs.as_slice(), &s.inputs, act);
        total += loss(kind, outputs(spec, &post), &s.target)?;
    }
    Ok(total / samples.len() as f64)
}

/// Mean loss and its analytic gradient over `samples`.
pub fn loss_gradient(
    spec: &TopologySpec,
    coeffs: &CoefficientSet<f64>,
    samples: &[Sample],
    kind: LossKind,
    act: Activation,
) -> Result<(f64, Vec<f64>), GaError> {
    check_inputs(spec, coeffs, samples)?;
    let w = coeffs.as_slice();
    let mut grad = vec![0.0; w.len()];
    let mut total = 0.0;
    for s in samples {
        let trace = forward_trace(spec, w, &s.inputs, act);
        let (l, d_out) = loss_and_grad(kind, outputs(spec, &trace.1), &s.target)?;
        total += l;
        backprop(spec, w, &s.inputs, &trace, act, &d_out, &mut grad);
    }
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { epochs: 100, lr_start: 0.01, lr_end: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// Learning rate of `epoch`, linear from `lr_start` (first) to `lr_end` (last).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        self.lr_start + (self.lr_end - self.lr_start) * epoch as f64 / (self.epochs - 1) as f64
    }
}

/// Full-batch Adam on `samples`.
pub fn adam_refine(
    coeffs: &CoefficientSet<f64>,
    spec: &TopologySpec,
    samples: &[Sample],
    kind: LossKind,
    config: &AdamConfig,
    act: Activation,
) -> Result<CoefficientSet<f64>, GaError> {
    check_inputs(spec, coeffs, samples)?;
    let mut w = coeffs.clone();
    let n = w.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    for epoch in 0..config.epochs {
        let (_, g) = loss_gradient(spec, &w, samples, kind, act)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(GaError::NonDifferentiable { epoch });
        }
        let t = (epoch + 1) as i32;
        let lr = config.learning_rate(epoch);
        let (c1, c2) = (1.0 - config.beta1.powi(t), 1.0 - config.beta2.powi(t));
        for (i, wi) in w.as_mut_slice().iter_mut().enumerate() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            *wi -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + config.eps);
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crossover {
    Uniform,
    SinglePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover: Crossover,
    pub gene_swap_prob: f64,
    pub mutation_rate: f64,
    pub elitism_count: usize,
    pub refine: Option<AdamConfig>,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            generations: 30,
            crossover: Crossover::Uniform,
            gene_swap_prob: 0.5,
            mutation_rate: 0.002,
            elitism_count: 2,
            refine: None,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), GaError> {
        let bad = |m: &str| Err(GaError::InvalidConfig(m.to_string()));
        if self.population_size < 2 {
            return bad("population must be at least 2");
        }
        if self.elitism_count >= self.population_size {
            return bad("elitism_count must be below the population size");
        }
        for (name, p) in [("gene_swap_prob", self.gene_swap_prob), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GaError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if let Some(a) = &self.refine {
            if !(a.lr_start > 0.0 && a.lr_end > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
                return bad("Adam rates must be positive and betas in [0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub coeffs: CoefficientSet<f64>,
    /// Mean training loss; lower is better.
    pub fitness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_loss: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub best: Individual,
    pub history: Vec<GenerationStats>,
}

pub fn random_genes(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE)).collect()
}

/// Child genes from parents `a` and `b`.
pub fn crossover(a: &[f64], b: &[f64], kind: Crossover, gene_swap_prob: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        Crossover::Uniform => a.iter().zip(b).map(|(&x, &y)| if rng.random_bool(gene_swap_prob) { y } else { x }).collect(),
        Crossover::SinglePoint => {
            let cut = if a.len() < 2 { 0 } else { rng.random_range(1..a.len()) };
            a[..cut].iter().chain(&b[cut..]).copied().collect()
        }
    }
}

/// Resample each gene from the init distribution with probability `rate`.
pub fn mutate(genes: &mut [f64], rate: f64, rng: &mut ChaCha8Rng) {
    for g in genes {
        if rng.random_bool(rate) {
            *g = rng.random_range(-INIT_RANGE..=INIT_RANGE);
        }
    }
}

fn tournament(fitness: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut best = rng.random_range(0..fitness.len());
    for _ in 1..TOURNAMENT_SIZE {
        let c = rng.random_range(0..fitness.len());
        if fitness[c] < fitness[best] || (fitness[c] == fitness[best] && c < best) {
            best = c;
        }
    }
    best
}

fn develop(
    genes: Vec<f64>,
    spec: &TopologySpec,
    samples: &[Sample],
    kind: LossKind,
    config: &GaConfig,
    act: Activation,
) -> Result<Individual, GaError> {
    let mut coeffs = CoefficientSet::new(genes);
    if let Some(adam) = &config.refine {
        coeffs = adam_refine(&coeffs, spec, samples, kind, adam, act)?;
    }
    let f = average_loss(spec, &coeffs, samples, kind, act)?;
    Ok(Individual { coeffs, fitness: if f.is_finite() { f } else { f64::MAX } })
}

fn stats(generation: usize, pop: &[Individual]) -> GenerationStats {
    GenerationStats {
        generation,
        best_loss: pop.iter().map(|i| i.fitness).fold(f64::INFINITY, f64::min),
        mean_loss: pop.iter().map(|i| i.fitness).sum::<f64>() / pop.len() as f64,
    }
}

/// Evolve a population on `samples`; returns the fittest individual of the
/// final generation and the per-generation history (one entry per generation
/// after the initial population). Elites keep their genes and fitness, so
/// only newly bred individuals are refined and evaluated.
pub fn evolve(
    spec: &TopologySpec,
    samples: &[Sample],
    config: &GaConfig,
    kind: LossKind,
    act: Activation,
) -> Result<TrainResult, GaError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(GaError::EmptyDataset);
    }
    let n_genes = spec.num_coefficients();
    check_inputs(spec, &CoefficientSet::new(vec![0.0; n_genes]), samples)?;
    let mut pop: Vec<Individual> = (0..config.population_size)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(config.seed, &[domain::GA_INIT, i as u64]);
            develop(random_genes(n_genes, &mut r), spec, samples, kind, config, act)
        })
        .collect::<Result<_, _>>()?;
    let mut history = Vec::with_capacity(config.generations);
    for generation in 1..=config.generations {
        // stable sort: ties keep lower indices first
        pop.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
        let fitness: Vec<f64> = pop.iter().map(|i| i.fitness).collect();
        let children: Vec<Individual> = (config.elitism_count..config.population_size)
            .into_par_iter()
            .map(|slot| {
                let mut r = rng::stream(config.seed, &[domain::GA_CHILD, generation as u64, slot as u64]);
                let a = tournament(&fitness, &mut r);
                let b = tournament(&fitness, &mut r);
                let mut genes = crossover(
                    pop[a].coeffs.as_slice(),
                    pop[b].coeffs.as_slice(),
                    config.crossover,
                    config.gene_swap_prob,
                    &mut r,
                );
                mutate(&mut genes, config.mutation_rate, &mut r);
                develop(genes, spec, samples, kind, config, act)
            })
            .collect::<Result<_, _>>()?;
        pop.truncate(config.elitism_count);
        pop.extend(children);
        history.push(stats(generation, &pop));
    }
    let best = pop
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.fitness.total_cmp(&b.fitness).then(i.cmp(j)))
        .map(|(_, ind)| ind.clone())
        .expect("population is non-empty");
    Ok(TrainResult { best, history })
}
