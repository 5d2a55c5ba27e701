//! The `tspike` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::analysis::{
    membrane_profile, spike_stats, write_capacity_csv, write_histograms_csv, write_spike_stats_csv, CapacityReport,
    MembraneSource, DEFAULT_BINS,
};
use crate::config::RunConfig;
use crate::data::{Dataset, DatasetKind};
use crate::energy::{estimate_from_counts, estimate_from_record, CostTable, OpCounts};
use crate::error::{Error, Result};
use crate::network::{build_small_cnn, ForwardOptions, Network};
use crate::neurons::NeuronKind;
use crate::reparam::{compare, fold_amplitudes, DEFAULT_TOLERANCE};
use crate::selftest;
use crate::tensor::Tensor;
use crate::training::{evaluate, train, Checkpoint, EpochMetrics, LrSchedule, OptimizerKind};

#[derive(Parser, Debug)]
#[command(name = "tspike", version, about = "Binary and ternary spiking networks")]
pub struct Cli {
    /// Log filter, e.g. `info` or `ternary_spike=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Fold trainable amplitudes into weights and verify the result.
    Convert(ConvertArgs),
    /// Capacity, spike statistics and membrane histograms.
    Analyze(AnalyzeArgs),
    /// Energy estimate from counts or from a checkpoint run on data.
    Energy(EnergyArgs),
    /// Run the built-in brute-force cross-checks.
    Selftest,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Run configuration (TOML); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub neuron: Option<NeuronKind>,
    #[arg(short = 'T', long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub weight_decay: Option<f32>,
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<LrSchedule>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "sgd" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?} (sgd, adam)")),
    }
}

fn parse_schedule(s: &str) -> std::result::Result<LrSchedule, String> {
    match s {
        "constant" => Ok(LrSchedule::Constant),
        "cosine" => Ok(LrSchedule::Cosine),
        _ => Err(format!("unknown schedule {s:?} (constant, cosine)")),
    }
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long, default_value = "mnist")]
    pub dataset: DatasetKind,
    #[arg(long, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Use only the first N test samples.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Probe images from this MNIST-layout directory; random inputs otherwise.
    #[arg(long)]
    pub probe_dir: Option<PathBuf>,
    #[arg(long, default_value = "mnist")]
    pub probe_dataset: DatasetKind,
    #[arg(long, default_value_t = 256)]
    pub probe: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Checkpoint to probe. Without it only capacities are reported.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Architecture for capacity-only reports.
    #[arg(long, default_value = "cnn-mnist")]
    pub preset: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// pre-reset or post-reset.
    #[arg(long, default_value = "pre-reset")]
    pub membrane: MembraneSource,
    /// Directory for the CSV tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnergyArgs {
    /// Counts file with `flops`, `sops`, `signs` and optionally `sparsity`, `timesteps`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub counts: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// Joules per FLOP.
    #[arg(long)]
    pub e_flop: Option<f64>,
    /// Joules per SOP.
    #[arg(long)]
    pub e_sop: Option<f64>,
    /// Joules per sign evaluation.
    #[arg(long)]
    pub e_sign: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log).try_init();
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Convert(a) => cmd_convert(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Energy(a) => cmd_energy(a, out),
        Command::Selftest => cmd_selftest(out),
    }
}

/// Resolves the run configuration: file (or defaults), then flags.
pub fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$src.clone() { cfg.$($dst).+ = v.into(); })*
        };
    }
    set!(
        preset => preset,
        neuron => neuron,
        timesteps => timesteps,
        dataset => dataset,
        data_dir => data_dir,
        epochs => train.epochs,
        batch_size => train.batch_size,
        lr => train.learning_rate,
        weight_decay => train.weight_decay,
        momentum => train.momentum,
        optimizer => train.optimizer,
        schedule => train.lr_schedule,
        seed => train.seed,
        out => output_dir,
    );
    if a.train_limit.is_some() {
        cfg.train_limit = a.train_limit;
    }
    if a.test_limit.is_some() {
        cfg.test_limit = a.test_limit;
    }
    if a.max_steps.is_some() {
        cfg.train.max_steps = a.max_steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn write_history_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for h in history {
        w.serialize(h).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve_config(&a)?;
    let spec = cfg.network_spec()?;
    let data = cfg.load_dataset()?;
    log::info!(
        "training {} ({}, T={}) on {} train / {} test samples",
        cfg.preset,
        cfg.neuron,
        cfg.timesteps,
        data.train.len(),
        data.test.len()
    );
    let ckpt = train(spec, &data, &cfg.train)?;
    fs::create_dir_all(&cfg.output_dir)?;
    ckpt.save(cfg.output_dir.join(CHECKPOINT_DIR))?;
    write_history_csv(&cfg.output_dir.join(METRICS_FILE), &ckpt.history)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    let best = ckpt.history.iter().find(|h| h.epoch == ckpt.epoch);
    writeln!(
        out,
        "best epoch {}: val accuracy {:.2}%  checkpoint {}",
        ckpt.epoch,
        best.map_or(0.0, |h| h.val_accuracy * 100.0),
        cfg.output_dir.join(CHECKPOINT_DIR).display()
    )?;
    Ok(0)
}

fn load_test(d: &DataArgs) -> Result<Dataset> {
    Dataset::load(d.dataset, &d.data_dir)?.truncated(Some(0), d.test_limit)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let net = Checkpoint::load(&a.checkpoint)?.network()?;
    let data = load_test(&a.data)?;
    let m = evaluate(&net, &data.test, a.batch_size)?;
    writeln!(out, "accuracy {:.4}", m.accuracy)?;
    writeln!(out, "loss {:.6}", m.loss)?;
    writeln!(out, "sparsity {:.6}", m.overall_sparsity)?;
    for l in &m.layer_sparsity {
        writeln!(out, "layer {} sparsity {:.6}", l.layer, l.sparsity)?;
    }
    Ok(0)
}

fn random_probe(shape: &[usize], n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let len = full.iter().product();
    Tensor::new(full, (0..len).map(|_| normal.sample(&mut rng)).collect())
}

fn cmd_convert(a: ConvertArgs, out: &mut dyn Write) -> Result<i32> {
    let original = Checkpoint::load(&a.input)?;
    let (converted, _) = fold_amplitudes(&original)?;
    let net = original.network()?;
    let probe = match &a.probe_dir {
        Some(dir) => {
            let data = Dataset::load(a.probe_dataset, dir)?.truncated(Some(0), Some(a.probe))?;
            data.test.images
        }
        None => random_probe(&net.spec().input_shape, a.probe, 0)?,
    };
    let report = compare(&net, &converted.network()?, &probe, a.tolerance)?;
    let json = report.to_json()?;
    writeln!(out, "{json}")?;
    if let Some(p) = &a.report {
        fs::write(p, &json)?;
    }
    if report.passed != Some(true) {
        eprintln!(
            "error: converted network deviates; first divergence: {}",
            report.first_divergence.as_deref().unwrap_or("none")
        );
        return Ok(1);
    }
    converted.save(&a.out)?;
    Ok(0)
}

fn cmd_analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<i32> {
    let net = match &a.checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.network()?),
        None => None,
    };
    let spec = match &net {
        Some(n) => n.spec().clone(),
        None => build_small_cnn(&a.preset, NeuronKind::Ternary, 2)?,
    };
    let cap = CapacityReport::for_spec(&spec)?;
    writeln!(out, "layer  shape        binary bits   ternary bits   real bits")?;
    for l in &cap.layers {
        writeln!(
            out,
            "{:>5}  {:<11}  {:>11.0}  {:>13.1}  {:>10.0}",
            l.layer,
            format!("{:?}", l.shape),
            l.binary_bits,
            l.ternary_bits,
            l.real_bits
        )?;
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_capacity_csv(fs::File::create(dir.join("capacity.csv"))?, &cap)?;
    }
    let Some(net) = net else { return Ok(0) };
    let data = Dataset::load(a.data.dataset, &a.data.data_dir)?.truncated(Some(0), Some(a.samples))?;
    let (_, record) = net.forward(&data.test.images, ForwardOptions::recording())?;
    let stats = spike_stats(&record)?;
    let profile = membrane_profile(&record, a.bins, a.membrane)?;
    writeln!(out, "layer  kind               +1 rate  -1 rate  entropy  max")?;
    for s in &stats {
        writeln!(
            out,
            "{:>5}  {:<17}  {:>7.4}  {:>7.4}  {:>7.4}  {:.4}",
            s.layer, s.kind, s.positive_rate, s.negative_rate, s.entropy, s.max_entropy
        )?;
    }
    for l in &profile.layers {
        writeln!(out, "layer {} membrane mean {:.4} std {:.4}", l.layer, l.mean, l.std)?;
    }
    if let Some(dir) = &a.out {
        write_spike_stats_csv(fs::File::create(dir.join("spikes.csv"))?, &stats)?;
        write_histograms_csv(fs::File::create(dir.join("membranes.csv"))?, &profile)?;
    }
    Ok(0)
}

fn cmd_energy(a: EnergyArgs, out: &mut dyn Write) -> Result<i32> {
    let defaults = CostTable::default();
    let cost = CostTable {
        flop: a.e_flop.unwrap_or(defaults.flop),
        sop: a.e_sop.unwrap_or(defaults.sop),
        sign: a.e_sign.unwrap_or(defaults.sign),
    };
    let report = match (&a.counts, &a.checkpoint) {
        (Some(path), _) => estimate_from_counts(&OpCounts::load(path)?, &cost)?,
        (None, Some(ckpt)) => {
            let net: Network = Checkpoint::load(ckpt)?.network()?;
            let data = Dataset::load(a.data.dataset, &a.data.data_dir)?.truncated(Some(0), Some(a.samples))?;
            let m = evaluate(&net, &data.test, 256)?;
            estimate_from_record(net.spec(), &m.record, &cost)?
        }
        (None, None) => return Err(Error::Config("energy needs --counts or --checkpoint".into())),
    };
    if a.json {
        writeln!(out, "{}", report.to_json()?)?;
    } else {
        writeln!(out, "{report}")?;
    }
    Ok(0)
}

fn cmd_selftest(out: &mut dyn Write) -> Result<i32> {
    let checks = selftest::run_all();
    for c in &checks {
        writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
    }
    Ok(if checks.iter().all(|c| c.passed) { 0 } else { 1 })
}
