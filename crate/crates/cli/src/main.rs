use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use smarty_core::ann::{decode_coeff_image, encode_coeff_image, pack_coeff_memory, Activation, CoefficientSet};
use smarty_core::ga::{evolve, AdamConfig, Crossover, GaConfig, LossKind};
use smarty_core::metrics::{accuracy_precision, ConfusionMatrix};
use smarty_core::pet_sim::{
    assemble_frames, read_jsonl, simulate_coincidence, simulate_single_shot, write_jsonl, ClassMap, Dataset, Frame,
    FrameConfig, Geometry, Labeling, Sample, SimConfig, SingleShotConfig,
};
use smarty_core::quantize::{evaluate, quantize_set, EvalReport, Model, QuantMethod, Task};
use smarty_core::rng::{self, domain};
use smarty_core::tdc::{
    code_density, code_density_histogram, fit_line, transfer_function, TdcBank, MEASURED_DNL, MEASURED_INL,
};
use smarty_core::topology::{build_fully_connected, encode, validate, TopologyFile, TopologySpec};

mod manifest;

use manifest::Run;

/// Bad flag combinations found after parsing; exits like a clap error.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser)]
#[command(name = "smarty", version, about = "Emulator and training toolchain for a reconfigurable fixed-point ANN with TDC inputs")]
struct Cli {
    /// Where to write the run manifest (default: `<primary output>.manifest.json`)
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a coincidence or single-shot dataset as JSON Lines
    GenData(GenData),
    /// Train coefficients with the genetic algorithm
    Train(Train),
    /// Convert trained coefficients to the chip's binary images
    Quantize(Quantize),
    /// Run a network over a dataset split and report metrics
    Infer(Infer),
    /// Code-density and transfer-function characterization of the TDC bank
    TdcChar(TdcChar),
    /// Accuracy and precision of a confusion matrix CSV
    Report(Report),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    Coincidence,
    SingleShot,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LabelMode {
    Classes,
    Position,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ActivationArg {
    Identity,
    Relu,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Identity => Activation::Identity,
            ActivationArg::Relu => Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum CrossoverArg {
    Uniform,
    SinglePoint,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SplitArg {
    Train,
    Validation,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TaskArg {
    Regression,
    Classification,
}

#[derive(Args, Serialize)]
struct GenData {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Coincidence: exposures simulated, spread evenly over the positions
    /// (exposures where nothing fired are not written). Single-shot: frames per width.
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Source positions in mm
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-57,0,65")]
    positions: Vec<f64>,
    /// EN widths in 5 ns clock cycles
    #[arg(long, value_delimiter = ',', default_value = "20,25,30,40,45,50")]
    widths: Vec<u32>,
    #[arg(long, value_enum, default_value_t = LabelMode::Classes)]
    labels: LabelMode,
    #[arg(long, default_value_t = 220.0)]
    separation_mm: f64,
    #[arg(long, default_value_t = 0.8)]
    efficiency: f64,
    #[arg(long, default_value_t = 0.75)]
    interaction_prob: f64,
    #[arg(long, default_value_t = 40.0)]
    tau_ns: f64,
    /// Timing jitter FWHM
    #[arg(long, default_value_t = 120.0)]
    jitter_ps: f64,
    #[arg(long, default_value_t = 100.0)]
    pretrigger_ns: f64,
    /// Exposure length (default: 5x the 99th percentile of detection times)
    #[arg(long)]
    frame_length_ns: Option<f64>,
}

#[derive(Args, Serialize)]
struct Train {
    #[arg(long)]
    #[serde(skip)]
    topology: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    dataset: PathBuf,
    #[arg(long)]
    loss: LossKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Best coefficient set (JSON)
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Per-generation history (default: `<out>` with extension `history.json`)
    #[arg(long)]
    #[serde(skip)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    population: usize,
    #[arg(long, default_value_t = 30)]
    generations: usize,
    #[arg(long, value_enum, default_value_t = CrossoverArg::Uniform)]
    crossover: CrossoverArg,
    #[arg(long, default_value_t = 0.5)]
    gene_swap_prob: f64,
    #[arg(long, default_value_t = 0.002)]
    mutation_rate: f64,
    #[arg(long, default_value_t = 2)]
    elitism: usize,
    /// Adam epochs per new individual; 0 trains with the GA alone
    #[arg(long, default_value_t = 0)]
    adam_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr_start: f64,
    #[arg(long, default_value_t = 0.001)]
    lr_end: f64,
    #[arg(long, value_enum, default_value_t = ActivationArg::Identity)]
    activation: ActivationArg,
}

#[derive(Args, Serialize)]
struct Quantize {
    /// Trained coefficient set (JSON)
    #[arg(long)]
    #[serde(skip)]
    coeffs: PathBuf,
    #[arg(long, default_value_t = QuantMethod::Clipped)]
    method: QuantMethod,
    /// Coefficient image: 1024 little-endian 16-bit slots
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Check the coefficient count against this topology
    #[arg(long)]
    #[serde(skip)]
    topology: Option<PathBuf>,
    /// Also write the topology and neuron-descriptor image (needs --topology)
    #[arg(long)]
    #[serde(skip)]
    topology_image: Option<PathBuf>,
    /// Also write the bit-packed 10-bit coefficient memory
    #[arg(long)]
    #[serde(skip)]
    memory_image: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct Infer {
    #[arg(long)]
    #[serde(skip)]
    topology: PathBuf,
    /// Float coefficient set (JSON); quantized with --method unless --golden
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    #[serde(skip)]
    coeffs: Option<PathBuf>,
    /// Coefficient image written by `quantize`
    #[arg(long)]
    #[serde(skip)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = QuantMethod::Clipped)]
    method: QuantMethod,
    /// Run the double-precision model instead of the fixed-point datapath
    #[arg(long, conflicts_with = "image")]
    golden: bool,
    #[arg(long)]
    #[serde(skip)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
    split: SplitArg,
    /// Seed of the train/validation split
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Source positions in mm, for class names (non-valid class first)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    positions: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = ActivationArg::Identity)]
    activation: ActivationArg,
    /// Metrics report (JSON)
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Confusion matrix CSV (classification only)
    #[arg(long)]
    #[serde(skip)]
    confusion: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TdcChar {
    /// Uniform intervals per channel for the code-density test
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    /// Length of each channel's injected DNL profile
    #[arg(long, default_value_t = 256)]
    codes: usize,
    /// Conversions per transfer-function point
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct Report {
    #[arg(long)]
    #[serde(skip)]
    confusion: PathBuf,
    /// Also write the metrics as JSON
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

fn read_topology(path: &Path) -> Result<TopologySpec> {
    let file: TopologyFile = serde_json::from_reader(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
        .with_context(|| format!("parsing topology {}", path.display()))?;
    let spec = build_fully_connected(&file.layers)?;
    let violations = validate(&spec);
    if !violations.is_empty() {
        anyhow::bail!("topology {} does not fit the chip: {violations:?}", path.display());
    }
    Ok(spec)
}

fn read_coeffs(path: &Path) -> Result<CoefficientSet<f64>> {
    serde_json::from_reader(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
        .with_context(|| format!("parsing coefficients {}", path.display()))
}

fn read_dataset(path: &Path, seed: u64) -> Result<Dataset> {
    let frames = read_jsonl(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
        .with_context(|| format!("reading dataset {}", path.display()))?;
    if frames.is_empty() {
        anyhow::bail!("dataset {} has no frames", path.display());
    }
    Ok(Dataset::new(frames, seed))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(args: &GenData) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let bank = TdcBank::default_bank();
    let frames: Vec<Frame> = match args.mode {
        Mode::Coincidence => {
            if args.positions.is_empty() {
                return usage("--positions needs at least one value");
            }
            let geo = Geometry { detector_separation_mm: args.separation_mm, source_positions_x_mm: args.positions.clone(), ..Default::default() };
            let sim = SimConfig {
                scintillation_tau_s: args.tau_ns * 1e-9,
                jitter_fwhm_s: args.jitter_ps * 1e-12,
                sipm_efficiency: args.efficiency,
                interaction_prob: args.interaction_prob,
            };
            let n = args.positions.len();
            let mut events = Vec::with_capacity(args.frames);
            for (i, &x) in args.positions.iter().enumerate() {
                let count = args.frames / n + usize::from(i < args.frames % n);
                events.extend(simulate_coincidence(&geo, &sim, x, count, args.seed)?);
            }
            let pretrigger = args.pretrigger_ns * 1e-9;
            let frame = match args.frame_length_ns {
                Some(ns) => FrameConfig { frame_length_s: ns * 1e-9, pretrigger_s: pretrigger },
                None => FrameConfig::from_events(&events, pretrigger),
            };
            let labeling = match args.labels {
                LabelMode::Classes => Labeling::Classes(ClassMap::new(args.positions.clone())),
                LabelMode::Position => Labeling::Position,
            };
            assemble_frames(&events, &geo, &bank, &frame, &labeling, args.seed)?.frames
        }
        Mode::SingleShot => {
            if args.widths.is_empty() {
                return usage("--widths needs at least one value");
            }
            let cfg = SingleShotConfig { jitter_fwhm_s: args.jitter_ps * 1e-12, ..Default::default() };
            let mut frames = Vec::new();
            for &w in &args.widths {
                frames.extend(simulate_single_shot(w, args.frames, &bank, &cfg, args.seed)?);
            }
            frames
        }
    };
    write_jsonl(&frames, BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?))?;
    let non_valid = frames.iter().filter(|f| !f.valid).count();
    println!("wrote {} frames ({} non-valid) to {}", frames.len(), non_valid, args.out.display());
    Ok((vec![], vec![args.out.clone()]))
}

fn train(args: &Train) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let spec = read_topology(&args.topology)?;
    let ds = read_dataset(&args.dataset, args.seed)?;
    let config = GaConfig {
        population_size: args.population,
        generations: args.generations,
        crossover: match args.crossover {
            CrossoverArg::Uniform => Crossover::Uniform,
            CrossoverArg::SinglePoint => Crossover::SinglePoint,
        },
        gene_swap_prob: args.gene_swap_prob,
        mutation_rate: args.mutation_rate,
        elitism_count: args.elitism,
        refine: (args.adam_epochs > 0).then(|| AdamConfig {
            epochs: args.adam_epochs,
            lr_start: args.lr_start,
            lr_end: args.lr_end,
            ..Default::default()
        }),
        seed: args.seed,
    };
    if let Err(e) = config.validate() {
        return usage(e.to_string());
    }
    let result = evolve(&spec, &ds.train_samples(), &config, args.loss, args.activation.into())?;
    let history = args.history.clone().unwrap_or_else(|| args.out.with_extension("history.json"));
    write_json(&args.out, &result.best.coeffs)?;
    write_json(&history, &result.history)?;
    println!(
        "best training loss {:.6} after {} generations ({} train / {} validation frames)",
        result.best.fitness,
        result.history.len(),
        ds.train.len(),
        ds.validation.len()
    );
    Ok((vec![args.topology.clone(), args.dataset.clone()], vec![args.out.clone(), history]))
}

fn quantize(args: &Quantize) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let coeffs = read_coeffs(&args.coeffs)?;
    let mut inputs = vec![args.coeffs.clone()];
    let mut outputs = vec![args.out.clone()];
    if args.topology_image.is_some() && args.topology.is_none() {
        return usage("--topology-image needs --topology");
    }
    if let Some(topo) = &args.topology {
        let spec = read_topology(topo)?;
        if spec.num_coefficients() != coeffs.len() {
            anyhow::bail!("topology needs {} coefficients, file has {}", spec.num_coefficients(), coeffs.len());
        }
        inputs.push(topo.clone());
        if let Some(path) = &args.topology_image {
            fs::write(path, encode(&spec)?.to_bytes()).with_context(|| format!("writing {}", path.display()))?;
            outputs.push(path.clone());
        }
    }
    let q = quantize_set(&coeffs, args.method)?;
    fs::write(&args.out, encode_coeff_image(&q)?).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.memory_image {
        fs::write(path, pack_coeff_memory(&q)).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path.clone());
    }
    let changed = coeffs.as_slice().iter().zip(q.as_slice()).filter(|(a, b)| (**a - b.to_f64()).abs() > 1.0 / 512.0).count();
    println!("quantized {} coefficients ({}); {} moved by more than half an LSB", q.len(), args.method, changed);
    Ok((inputs, outputs))
}

fn class_names(positions: &Option<Vec<f64>>, outputs: usize) -> Vec<String> {
    match positions {
        Some(p) => ClassMap::new(p.clone()).names(),
        None => (0..outputs).map(|i| i.to_string()).collect(),
    }
}

fn infer(args: &Infer) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let spec = read_topology(&args.topology)?;
    let ds = read_dataset(&args.dataset, args.seed)?;
    let samples: Vec<Sample> = match args.split {
        SplitArg::Train => ds.train_samples(),
        SplitArg::Validation => ds.validation_samples(),
        SplitArg::All => ds.frames.iter().map(Frame::sample).collect(),
    };
    let task = match args.task {
        TaskArg::Regression => Task::Regression,
        TaskArg::Classification => {
            let classes = class_names(&args.positions, spec.num_outputs());
            if classes.len() != spec.num_outputs() {
                return usage(format!("{} classes from --positions but the topology has {} outputs", classes.len(), spec.num_outputs()));
            }
            Task::Classification { classes }
        }
    };
    if args.confusion.is_some() && matches!(task, Task::Regression) {
        return usage("--confusion only applies to --task classification");
    }
    let act = args.activation.into();
    let mut inputs = vec![args.topology.clone(), args.dataset.clone()];
    let report = match (&args.coeffs, &args.image) {
        (Some(path), _) => {
            inputs.push(path.clone());
            let coeffs = read_coeffs(path)?;
            if args.golden {
                evaluate(&spec, Model::Golden(&coeffs), &samples, &task, act)?
            } else {
                evaluate(&spec, Model::Fixed(&quantize_set(&coeffs, args.method)?), &samples, &task, act)?
            }
        }
        (None, Some(path)) => {
            inputs.push(path.clone());
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let q = decode_coeff_image(&bytes, spec.num_coefficients())?;
            evaluate(&spec, Model::Fixed(&q), &samples, &task, act)?
        }
        (None, None) => return usage("one of --coeffs or --image is required"),
    };
    let mut outputs = vec![args.out.clone()];
    write_json(&args.out, &report)?;
    match &report {
        EvalReport::Regression(r) => {
            println!("frames {} mean error {:.6} max error {:.6}", r.frames, r.mean_error, r.max_error);
            for t in &r.per_target {
                println!("  target {:?}: {} frames, mean prediction {:?}, mean error {:.6}", t.target, t.frames, t.mean_prediction, t.mean_error);
            }
        }
        EvalReport::Classification(c) => {
            println!("accuracy: {:.4}", c.metrics.accuracy);
            println!("precision: {:.4}", c.metrics.precision);
            println!("overall accuracy: {:.4}", c.overall_accuracy);
            if let Some(path) = &args.confusion {
                c.confusion.write_csv(File::create(path).with_context(|| format!("creating {}", path.display()))?)?;
                outputs.push(path.clone());
            }
        }
    }
    Ok((inputs, outputs))
}

fn tdc_char(args: &TdcChar) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    if args.codes < 3 || args.samples == 0 {
        return usage("--codes must be at least 3 and --samples positive");
    }
    let mut r = rng::stream(args.seed, &[domain::TDC_CHAR]);
    let bank = TdcBank::with_measured_dnl(args.codes, &mut r)?;
    let widths: Vec<f64> = (1..=20).map(|i| i as f64 * 5e-9).collect();
    let mut channels = Vec::new();
    println!("channel  lsb[ps]  dnl min/max (target)        inl min/max");
    for (i, ch) in bank.channels.iter().enumerate() {
        let hist = code_density_histogram(ch, args.codes, args.samples, &mut r)?;
        let lin = code_density(&hist)?;
        let (dmin, dmax) = lin.dnl_extremes();
        let (imin, imax) = lin.inl_extremes();
        let (slope, intercept) = fit_line(&transfer_function(ch, &widths, args.reps, &mut r)?);
        println!(
            "TDC{i}     {:.3}   {dmin:+.3}/{dmax:+.3} ({:+.2}/{:+.2})   {imin:+.3}/{imax:+.3}",
            1e12 / slope,
            MEASURED_DNL[i].0,
            MEASURED_DNL[i].1
        );
        channels.push(json!({
            "channel": i,
            "lsb_s": ch.lsb(),
            "fitted_lsb_s": 1.0 / slope,
            "transfer_intercept": intercept,
            "dnl": [dmin, dmax],
            "inl": [imin, imax],
            "injected_dnl": MEASURED_DNL[i],
            "reference_inl": MEASURED_INL[i],
        }));
    }
    println!("mean LSB {:.3} ps", bank.mean_lsb() * 1e12);
    write_json(&args.out, &json!({ "mean_lsb_s": bank.mean_lsb(), "channels": channels }))?;
    Ok((vec![], vec![args.out.clone()]))
}

fn report(args: &Report) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let file = File::open(&args.confusion).with_context(|| format!("opening {}", args.confusion.display()))?;
    let m = ConfusionMatrix::read_csv(BufReader::new(file))?;
    let metrics = accuracy_precision(&m)?;
    println!("accuracy: {:.4}", metrics.accuracy);
    println!("precision: {:.4}", metrics.precision);
    for (i, name) in m.classes.iter().enumerate() {
        println!("  class {name}: accuracy {:.4} precision {:.4}", metrics.per_class_accuracy[i], metrics.per_class_precision[i]);
    }
    let mut outputs = vec![];
    if let Some(out) = &args.out {
        write_json(out, &metrics)?;
        outputs.push(out.clone());
    }
    Ok((vec![args.confusion.clone()], outputs))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SMARTY_THREADS") else {
        return Ok(());
    };
    let n: usize = match v.parse() {
        Ok(n) if n > 0 => n,
        _ => return usage(format!("SMARTY_THREADS must be a positive integer, got {v:?}")),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let run = Run::start(match &cli.command {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Quantize(_) => "quantize",
        Command::Infer(_) => "infer",
        Command::TdcChar(_) => "tdc-char",
        Command::Report(_) => "report",
    });
    let (seed, config, (inputs, outputs)) = match &cli.command {
        Command::GenData(a) => (Some(a.seed), serde_json::to_value(a)?, gen_data(a)?),
        Command::Train(a) => (Some(a.seed), serde_json::to_value(a)?, train(a)?),
        Command::Quantize(a) => (None, serde_json::to_value(a)?, quantize(a)?),
        Command::Infer(a) => (Some(a.seed), serde_json::to_value(a)?, infer(a)?),
        Command::TdcChar(a) => (Some(a.seed), serde_json::to_value(a)?, tdc_char(a)?),
        Command::Report(a) => (None, serde_json::to_value(a)?, report(a)?),
    };
    let primary = outputs.first().or(inputs.first()).expect("every command touches a file");
    let path = cli.manifest.clone().unwrap_or_else(|| manifest::default_path(primary));
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    run.finish(&path, seed, &config, &inputs, &outputs)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
