//! Command-line entry point wiring the pipeline into reproducible
//! experiment runs. Every run writes a run manifest recording the exact
//! argv and seed; all randomness flows from `--seed`.

mod pipeline;

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use emsca::dataset::{read_emds, write_emds};
use emsca::error::{Error, Result};
use emsca::eval::{
    cross_matrix, device_discriminator, evaluate, fit_pca, pca_projection_csv, session_matrix,
    CrossOutcome, EvalReport, ExperimentConfig,
};
use emsca::mlp::{new_model, MlpModel, OptimizerKind, TrainConfig, TrainReport};
use emsca::seeding::derive_seed;
use emsca::spectral::{
    ScaleMode, SpectralDataset, StftConfig, TakeStrategy, WindowFn,
};
use emsca::synth::{gen_trace_samples, SynthConfig};
use emsca::trace_io::{save_manifest, write_cfile, TraceEntry};
use emsca::transfer::{compare_cost, transfer_fit, FreezeMode, FreezeSpec};

use pipeline::{
    ensure_dir, load_corpus, single_group, split_for, write_json, Corpus, RunTracker,
};

#[derive(Parser)]
#[command(
    name = "emsca",
    version,
    about = "Electromagnetic side-channel activity classification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace corpus (.cfile files plus manifest)
    Synth(SynthCmd),
    /// Convert corpus traces into labeled STFT feature datasets (.emds)
    Featurize(FeaturizeCmd),
    /// Train a per-device activity classifier
    Train(TrainCmd),
    /// Score a saved model on a dataset
    Evaluate(EvaluateCmd),
    /// Retrain a masked subset of a saved model's layers on new data
    Transfer(TransferCmd),
    /// Cross-device portability matrix (direct and transfer accuracy)
    Cross(CrossCmd),
    /// Cross-session portability matrix for one device
    Sessions(SessionsCmd),
    /// Project one activity's windows onto the top principal components
    Pca(PcaCmd),
    /// Train a device-identity classifier from one shared activity
    Discriminate(DiscriminateCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowArg {
    Rectangular,
    Hann,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Magnitude,
    LogMagnitude,
}

#[derive(Clone, Copy, ValueEnum)]
enum TakeArg {
    Head,
    UniformStride,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivitySetArg {
    Iphone,
    Nrf52,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    /// Paper-scale windows per activity (10,000)
    Full,
    /// Desk-scale windows per activity (2,000)
    Desk,
}

#[derive(Args)]
struct StftArgs {
    /// FFT size in samples (power of two)
    #[arg(long, default_value_t = 2048)]
    fft: usize,
    /// Hop between windows in samples; defaults to fft/2
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long, value_enum, default_value_t = WindowArg::Hann)]
    window: WindowArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::LogMagnitude)]
    scale: ScaleArg,
    /// Windows kept per activity trace
    #[arg(long, default_value_t = 10_000)]
    windows: usize,
    #[arg(long, value_enum, default_value_t = TakeArg::Head)]
    take: TakeArg,
}

impl StftArgs {
    fn config(&self) -> Result<StftConfig> {
        let config = StftConfig {
            fft_size: self.fft,
            hop: self.hop.unwrap_or(self.fft / 2),
            window_fn: match self.window {
                WindowArg::Rectangular => WindowFn::Rectangular,
                WindowArg::Hann => WindowFn::Hann,
            },
            scale: match self.scale {
                ScaleArg::Magnitude => ScaleMode::Magnitude,
                ScaleArg::LogMagnitude => ScaleMode::LogMagnitude,
            },
        };
        config.validate()?;
        Ok(config)
    }

    fn take_strategy(&self) -> TakeStrategy {
        match self.take {
            TakeArg::Head => TakeStrategy::Head,
            TakeArg::UniformStride => TakeStrategy::UniformStride,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Learning rate; defaults to 1e-3 for adam, 1e-2 for sgd
    #[arg(long)]
    lr: Option<f64>,
    /// Hidden layer widths, comma separated
    #[arg(long, default_value = "1400,800,500,200,100")]
    hidden: String,
    /// Held-out fraction of each dataset
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

impl FitArgs {
    fn hidden_dims(&self) -> Result<Vec<usize>> {
        if self.hidden.trim().is_empty() {
            return Ok(Vec::new());
        }
        self.hidden
            .split(',')
            .map(|part| {
                part.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Argument(format!("bad hidden dim {part:?}")))
            })
            .collect()
    }

    fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        if self.epochs == 0 {
            return Err(Error::Argument("--epochs must be >= 1".into()));
        }
        let optimizer = match self.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam {
                learning_rate: self.lr.unwrap_or(1e-3),
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            OptimizerArg::Sgd => OptimizerKind::Sgd {
                learning_rate: self.lr.unwrap_or(1e-2),
            },
        };
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            optimizer,
            seed,
            shuffle_each_epoch: true,
        })
    }
}

fn parse_freeze(mode: &str, reinit: bool) -> Result<FreezeSpec> {
    let mode = match mode {
        "output_only" => FreezeMode::OutputOnly,
        "input_only" => FreezeMode::InputOnly,
        other => {
            if let Some(k) = other.strip_prefix("freeze_top:") {
                FreezeMode::FreezeTop(k.parse().map_err(|_| {
                    Error::Argument(format!("bad layer count in {other:?}"))
                })?)
            } else if let Some(k) = other.strip_prefix("freeze_bottom:") {
                FreezeMode::FreezeBottom(k.parse().map_err(|_| {
                    Error::Argument(format!("bad layer count in {other:?}"))
                })?)
            } else {
                return Err(Error::Argument(format!(
                    "unknown freeze mode {other:?}; expected output_only, input_only, \
                     freeze_top:K, or freeze_bottom:K"
                )));
            }
        }
    };
    Ok(FreezeSpec {
        mode,
        reinit_unfrozen: reinit,
    })
}

#[derive(Args)]
struct SynthCmd {
    /// Generator config JSON; defaults to the built-in profile set
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile set when no config file is given
    #[arg(long, value_enum, default_value_t = ActivitySetArg::Iphone)]
    activity_set: ActivitySetArg,
    /// Keep only the first N devices of the config
    #[arg(long)]
    devices: Option<usize>,
    /// Keep only the first N sessions of the config
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long, value_enum, default_value_t = PresetArg::Full)]
    preset: PresetArg,
    /// Windows per activity each trace must support; overrides --preset
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long, default_value_t = 2048)]
    fft: usize,
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct FeaturizeCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    device: Option<String>,
    #[arg(long)]
    session: Option<String>,
    #[command(flatten)]
    stft: StftArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long, conflicts_with = "dataset", requires = "device")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    device: Option<String>,
    #[arg(long)]
    session: Option<String>,
    /// Pre-featurized .emds dataset instead of a corpus
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    stft: StftArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, conflicts_with = "dataset", requires = "device")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    device: Option<String>,
    #[arg(long)]
    session: Option<String>,
    /// Pre-featurized .emds dataset; evaluated in full
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    stft: StftArgs,
    /// Held-out fraction when evaluating from a corpus
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TransferCmd {
    /// Pretrained model to adapt
    #[arg(long)]
    model: PathBuf,
    #[arg(long, conflicts_with = "dataset", requires = "device")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    device: Option<String>,
    #[arg(long)]
    session: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    stft: StftArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value = "output_only")]
    freeze: String,
    /// Reinitialize the retrained layers instead of starting from the
    /// pretrained weights
    #[arg(long)]
    reinit: bool,
    /// Also train a fresh model on the same data and report the cost ratio
    #[arg(long)]
    compare_full: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct CrossCmd {
    #[arg(long)]
    corpus: PathBuf,
    /// Session shared by the compared devices; defaults when unambiguous
    #[arg(long)]
    session: Option<String>,
    #[command(flatten)]
    stft: StftArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value = "output_only")]
    freeze: String,
    #[arg(long)]
    reinit: bool,
    /// Worker threads for independent matrix cells
    #[arg(long)]
    jobs: Option<usize>,
    /// Output matrix artifact (JSON)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SessionsCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    device: String,
    #[command(flatten)]
    stft: StftArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value = "output_only")]
    freeze: String,
    #[arg(long)]
    reinit: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct PcaCmd {
    #[arg(long)]
    corpus: PathBuf,
    /// Activity whose windows are projected
    #[arg(long, default_value = "idle")]
    activity: String,
    #[arg(long)]
    session: Option<String>,
    #[command(flatten)]
    stft: StftArgs,
    /// Output CSV of x,y,z,device_id rows
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct DiscriminateCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "idle")]
    activity: String,
    #[arg(long)]
    session: Option<String>,
    #[command(flatten)]
    stft: StftArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    std::process::exit(0);
                }
                _ => {
                    eprint!("{err}");
                    std::process::exit(1);
                }
            }
        }
    };
    let result = match cli.command {
        Command::Synth(cmd) => run_synth(cmd),
        Command::Featurize(cmd) => run_featurize(cmd),
        Command::Train(cmd) => run_train(cmd),
        Command::Evaluate(cmd) => run_evaluate(cmd),
        Command::Transfer(cmd) => run_transfer(cmd),
        Command::Cross(cmd) => run_cross(cmd),
        Command::Sessions(cmd) => run_sessions(cmd),
        Command::Pca(cmd) => run_pca(cmd),
        Command::Discriminate(cmd) => run_discriminate(cmd),
    };
    if let Err(err) = result {
        eprintln!("emsca: {err}");
        std::process::exit(err.exit_code());
    }
}

/// Training report without wall-clock fields, so rerunning a seeded command
/// reproduces the artifact byte for byte.
#[derive(Serialize)]
struct TrainReportDoc {
    epoch_loss: Vec<f64>,
    epoch_val_accuracy: Vec<f64>,
    trainable_params: usize,
    total_params: usize,
}

impl From<&TrainReport> for TrainReportDoc {
    fn from(report: &TrainReport) -> Self {
        TrainReportDoc {
            epoch_loss: report.epoch_loss.clone(),
            epoch_val_accuracy: report.epoch_val_accuracy.clone(),
            trainable_params: report.trainable_params,
            total_params: report.total_params,
        }
    }
}

#[derive(Serialize)]
struct FitEvalDoc {
    training: TrainReportDoc,
    evaluation: EvalReport,
}

fn run_synth(cmd: SynthCmd) -> Result<()> {
    let mut tracker = RunTracker::new("synth", cmd.seed);
    let mut config = match &cmd.config {
        Some(path) => {
            tracker.input(path);
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            SynthConfig::from_json(&text)?
        }
        None => match cmd.activity_set {
            ActivitySetArg::Iphone => SynthConfig::smartphone_default(),
            ActivitySetArg::Nrf52 => SynthConfig::iot_default(),
        },
    };
    if let Some(n) = cmd.devices {
        if n == 0 || n > config.devices.len() {
            return Err(Error::Argument(format!(
                "--devices {n} outside 1..={}",
                config.devices.len()
            )));
        }
        config.devices.truncate(n);
    }
    if let Some(n) = cmd.sessions {
        if n == 0 || n > config.sessions.len() {
            return Err(Error::Argument(format!(
                "--sessions {n} outside 1..={}",
                config.sessions.len()
            )));
        }
        config.sessions.truncate(n);
    }
    config.validate()?;

    let windows = cmd.windows.unwrap_or(match cmd.preset {
        PresetArg::Full => 10_000,
        PresetArg::Desk => 2_000,
    });
    let hop = cmd.hop.unwrap_or(cmd.fft / 2);
    if cmd.fft == 0 || !cmd.fft.is_power_of_two() || hop == 0 || hop > cmd.fft {
        return Err(Error::Argument(format!(
            "bad stft geometry: fft {} hop {hop}",
            cmd.fft
        )));
    }
    let n_samples = cmd.fft + (windows - 1) * hop;

    ensure_dir(&cmd.out)?;
    let traces_dir = cmd.out.join("traces");
    ensure_dir(&traces_dir)?;

    let mut entries = Vec::new();
    for device in &config.devices {
        for session in &config.sessions {
            for activity in &config.activities {
                let trace_seed = derive_seed(
                    cmd.seed,
                    &[
                        "trace",
                        &device.device_id,
                        &session.session_id,
                        &activity.activity_label,
                    ],
                );
                let trace = gen_trace_samples(
                    device,
                    activity,
                    session,
                    n_samples,
                    config.sim_rate_hz,
                    trace_seed,
                )?;
                let file_name = format!(
                    "{}__{}__{}.cfile",
                    device.device_id, session.session_id, activity.activity_label
                );
                let path = traces_dir.join(&file_name);
                write_cfile(&trace, &path)?;
                entries.push(TraceEntry {
                    file: PathBuf::from("traces").join(&file_name),
                    sample_rate_hz: config.sim_rate_hz,
                    center_frequency_hz: device.clock_hz,
                    meta: trace.meta.clone(),
                });
            }
        }
    }
    let manifest_path = cmd.out.join("manifest.json");
    save_manifest(&entries, &manifest_path)?;
    tracker.output(&manifest_path);
    tracker.output(&traces_dir);
    println!(
        "wrote {} traces ({} samples each) to {}",
        entries.len(),
        n_samples,
        cmd.out.display()
    );
    tracker.finish_dir(&cmd.out)
}

fn run_featurize(cmd: FeaturizeCmd) -> Result<()> {
    let mut tracker = RunTracker::new("featurize", cmd.seed);
    tracker.input(&cmd.corpus);
    let corpus = load_corpus(&cmd.corpus)?;
    let stft = cmd.stft.config()?;
    let groups = corpus.select(cmd.device.as_deref(), cmd.session.as_deref());
    if groups.is_empty() {
        return Err(Error::Argument("no matching traces in corpus".into()));
    }
    ensure_dir(&cmd.out)?;
    for ((device, session), entries) in groups {
        let ds = corpus.featurize_group(
            entries,
            &stft,
            cmd.stft.windows,
            cmd.stft.take_strategy(),
            cmd.seed,
        )?;
        let path = cmd.out.join(format!("{device}__{session}.emds"));
        write_emds(&ds, &path)?;
        tracker.output(&path);
        println!(
            "{}: {} rows x {} features, {} classes",
            path.display(),
            ds.rows(),
            ds.width(),
            ds.n_classes()
        );
    }
    tracker.finish_dir(&cmd.out)
}

/// Loads the train/test pair a model-centric command operates on, either by
/// featurizing a corpus group or by splitting a prebuilt dataset.
#[allow(clippy::too_many_arguments)]
fn load_target(
    corpus: &Option<PathBuf>,
    device: &Option<String>,
    session: &Option<String>,
    dataset: &Option<PathBuf>,
    stft: &StftArgs,
    test_fraction: f64,
    seed: u64,
    tracker: &mut RunTracker,
) -> Result<(String, SpectralDataset, SpectralDataset)> {
    match (corpus, dataset) {
        (Some(corpus_path), None) => {
            let device = device.as_deref().ok_or_else(|| {
                Error::Argument("--device is required with --corpus".into())
            })?;
            tracker.input(corpus_path);
            let corpus = load_corpus(corpus_path)?;
            let (key, entries) = single_group(&corpus, device, session.as_deref())?;
            let ds = corpus.featurize_group(
                entries,
                &stft.config()?,
                stft.windows,
                stft.take_strategy(),
                seed,
            )?;
            let name = format!("{}__{}", key.0, key.1);
            let (train, test) = split_for(&ds, &key.0, test_fraction, seed)?;
            Ok((name, train, test))
        }
        (None, Some(dataset_path)) => {
            tracker.input(dataset_path);
            let ds = read_emds(dataset_path)?;
            let name = dataset_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            let (train, test) = split_for(&ds, &name, test_fraction, seed)?;
            Ok((name, train, test))
        }
        _ => Err(Error::Argument(
            "pass exactly one of --corpus (with --device) or --dataset".into(),
        )),
    }
}

fn run_train(cmd: TrainCmd) -> Result<()> {
    let mut tracker = RunTracker::new("train", cmd.seed);
    let (name, train, test) = load_target(
        &cmd.corpus,
        &cmd.device,
        &cmd.session,
        &cmd.dataset,
        &cmd.stft,
        cmd.fit.test_fraction,
        cmd.seed,
        &mut tracker,
    )?;

    let mut dims = vec![train.width()];
    dims.extend(cmd.fit.hidden_dims()?);
    dims.push(train.n_classes());
    let mut model = new_model(&dims, derive_seed(cmd.seed, &["model", &name]))?;
    let config = cmd.fit.train_config(derive_seed(cmd.seed, &["fit", &name]))?;
    let report = model.fit(&train, &test, &config)?;
    let evaluation = evaluate(&model, &test)?;

    ensure_dir(&cmd.out)?;
    let model_path = cmd.out.join("model.emnn");
    model.save(&model_path)?;
    tracker.output(&model_path);
    let report_path = cmd.out.join("report.json");
    write_json(
        &FitEvalDoc {
            training: TrainReportDoc::from(&report),
            evaluation,
        },
        &report_path,
    )?;
    tracker.output(&report_path);
    println!(
        "{name}: trained {} params in {:.1} s, held-out accuracy {:.4}",
        report.total_params,
        report.wall_time_seconds,
        report.epoch_val_accuracy.last().unwrap_or(&0.0)
    );
    tracker.finish_dir(&cmd.out)
}

fn run_evaluate(cmd: EvaluateCmd) -> Result<()> {
    let mut tracker = RunTracker::new("evaluate", cmd.seed);
    tracker.input(&cmd.model);
    let model = MlpModel::load(&cmd.model)?;

    let report = match (&cmd.corpus, &cmd.dataset) {
        (Some(_), None) => {
            let (_, _, test) = load_target(
                &cmd.corpus,
                &cmd.device,
                &cmd.session,
                &None,
                &cmd.stft,
                cmd.test_fraction,
                cmd.seed,
                &mut tracker,
            )?;
            evaluate(&model, &test)?
        }
        (None, Some(path)) => {
            tracker.input(path);
            let ds = read_emds(path)?;
            evaluate(&model, &ds)?
        }
        _ => {
            return Err(Error::Argument(
                "pass exactly one of --corpus (with --device) or --dataset".into(),
            ))
        }
    };

    ensure_dir(&cmd.out)?;
    let report_path = cmd.out.join("report.json");
    write_json(&report, &report_path)?;
    tracker.output(&report_path);
    print!("{}", report.to_table());
    tracker.finish_dir(&cmd.out)
}

fn run_transfer(cmd: TransferCmd) -> Result<()> {
    let mut tracker = RunTracker::new("transfer", cmd.seed);
    tracker.input(&cmd.model);
    let pretrained = MlpModel::load(&cmd.model)?;
    let (name, train, test) = load_target(
        &cmd.corpus,
        &cmd.device,
        &cmd.session,
        &cmd.dataset,
        &cmd.stft,
        cmd.fit.test_fraction,
        cmd.seed,
        &mut tracker,
    )?;
    let freeze = parse_freeze(&cmd.freeze, cmd.reinit)?;
    let config = cmd
        .fit
        .train_config(derive_seed(cmd.seed, &["transfer", &name]))?;
    let (model, report) = transfer_fit(&pretrained, &train, &test, &freeze, &config)?;
    let evaluation = evaluate(&model, &test)?;

    ensure_dir(&cmd.out)?;
    let model_path = cmd.out.join("model.emnn");
    model.save(&model_path)?;
    tracker.output(&model_path);
    let report_path = cmd.out.join("report.json");
    write_json(
        &FitEvalDoc {
            training: TrainReportDoc::from(&report),
            evaluation,
        },
        &report_path,
    )?;
    tracker.output(&report_path);
    println!(
        "{name}: transfer retrained {} of {} params, held-out accuracy {:.4}",
        report.trainable_params,
        report.total_params,
        report.epoch_val_accuracy.last().unwrap_or(&0.0)
    );

    if cmd.compare_full {
        let mut dims = vec![train.width()];
        dims.extend(
            pretrained.dims()[1..pretrained.dims().len() - 1]
                .iter()
                .copied(),
        );
        dims.push(train.n_classes());
        let mut fresh = new_model(&dims, derive_seed(cmd.seed, &["model", &name]))?;
        let full_config = cmd.fit.train_config(derive_seed(cmd.seed, &["fit", &name]))?;
        let full_report = fresh.fit(&train, &test, &full_config)?;
        let summary = compare_cost(&full_report, &report);
        let cost_path = cmd.out.join("cost.json");
        write_json(&summary, &cost_path)?;
        tracker.output(&cost_path);
        println!(
            "cost: time ratio {:.3}, parameter ratio {:.6}",
            summary.time_ratio, summary.param_ratio
        );
    }
    tracker.finish_dir(&cmd.out)
}

/// Featurizes and splits every matching (device, session) group, keyed by
/// device or session name.
fn matrix_inputs(
    corpus: &Corpus,
    groups: Vec<(&(String, String), &Vec<TraceEntry>)>,
    stft: &StftArgs,
    test_fraction: f64,
    seed: u64,
    key_by_session: bool,
) -> Result<BTreeMap<String, (SpectralDataset, SpectralDataset)>> {
    let config = stft.config()?;
    let mut out = BTreeMap::new();
    for ((device, session), entries) in groups {
        let key = if key_by_session {
            session.clone()
        } else {
            device.clone()
        };
        if out.contains_key(&key) {
            return Err(Error::Argument(format!(
                "multiple groups map to {key:?}; restrict with --session"
            )));
        }
        let ds = corpus.featurize_group(
            entries,
            &config,
            stft.windows,
            stft.take_strategy(),
            seed,
        )?;
        let pair = split_for(&ds, &key, test_fraction, seed)?;
        out.insert(key, pair);
    }
    Ok(out)
}

fn in_pool<T: Send>(jobs: Option<usize>, work: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => work(),
        Some(n) => {
            if n == 0 {
                return Err(Error::Argument("--jobs must be >= 1".into()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
            pool.install(work)
        }
    }
}

fn matrix_doc(outcome: &CrossOutcome) -> impl Serialize + '_ {
    #[derive(Serialize)]
    struct MatrixDoc<'a> {
        matrix: &'a emsca::eval::CrossMatrix,
        table: String,
    }
    MatrixDoc {
        matrix: &outcome.matrix,
        table: outcome.matrix.to_table(),
    }
}

fn run_cross(cmd: CrossCmd) -> Result<()> {
    let mut tracker = RunTracker::new("cross", cmd.seed);
    tracker.input(&cmd.corpus);
    let corpus = load_corpus(&cmd.corpus)?;

    let session = match &cmd.session {
        Some(s) => s.clone(),
        None => {
            let mut sessions: Vec<String> =
                corpus.groups.keys().map(|(_, s)| s.clone()).collect();
            sessions.sort();
            sessions.dedup();
            if sessions.len() != 1 {
                return Err(Error::Argument(format!(
                    "corpus has sessions {sessions:?}; pass --session"
                )));
            }
            sessions.pop().unwrap()
        }
    };
    let groups = corpus.select(None, Some(&session));
    let inputs = matrix_inputs(
        &corpus,
        groups,
        &cmd.stft,
        cmd.fit.test_fraction,
        cmd.seed,
        false,
    )?;

    let config = ExperimentConfig {
        train: cmd.fit.train_config(derive_seed(cmd.seed, &["experiment"]))?,
        freeze: parse_freeze(&cmd.freeze, cmd.reinit)?,
        hidden_dims: cmd.fit.hidden_dims()?,
    };
    let outcome = in_pool(cmd.jobs, || cross_matrix(&inputs, &config))?;

    print!("{}", outcome.matrix.to_table());
    write_json(&matrix_doc(&outcome), &cmd.out)?;
    tracker.output(&cmd.out);
    tracker.finish_beside(&cmd.out)
}

fn run_sessions(cmd: SessionsCmd) -> Result<()> {
    let mut tracker = RunTracker::new("sessions", cmd.seed);
    tracker.input(&cmd.corpus);
    let corpus = load_corpus(&cmd.corpus)?;
    let groups = corpus.select(Some(&cmd.device), None);
    if groups.is_empty() {
        return Err(Error::Argument(format!(
            "no traces for device {:?}",
            cmd.device
        )));
    }
    let inputs = matrix_inputs(
        &corpus,
        groups,
        &cmd.stft,
        cmd.fit.test_fraction,
        cmd.seed,
        true,
    )?;
    let config = ExperimentConfig {
        train: cmd.fit.train_config(derive_seed(cmd.seed, &["experiment"]))?,
        freeze: parse_freeze(&cmd.freeze, cmd.reinit)?,
        hidden_dims: cmd.fit.hidden_dims()?,
    };
    let outcome = in_pool(cmd.jobs, || session_matrix(&inputs, &config))?;

    print!("{}", outcome.matrix.to_table());
    write_json(&matrix_doc(&outcome), &cmd.out)?;
    tracker.output(&cmd.out);
    tracker.finish_beside(&cmd.out)
}

/// Merges same-activity window sets from several traces into one
/// single-class dataset that keeps per-row device provenance.
fn merge_single_class(parts: Vec<SpectralDataset>, activity: &str) -> Result<SpectralDataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument(format!("no traces for activity {activity:?}")))?;
    let width = first.width();
    let config = *first.config();
    let mut features = Vec::new();
    let mut sources = Vec::new();
    let mut row_source = Vec::new();
    for ds in &parts {
        if ds.width() != width {
            return Err(Error::Shape("mixed feature widths across traces".into()));
        }
        for r in 0..ds.rows() {
            features.extend_from_slice(ds.row(r));
            let tag = ds.provenance(r).clone();
            let idx = match sources.iter().position(|t| t == &tag) {
                Some(i) => i,
                None => {
                    sources.push(tag);
                    sources.len() - 1
                }
            };
            row_source.push(idx as u32);
        }
    }
    let rows = row_source.len();
    SpectralDataset::from_parts(
        width,
        features,
        vec![0; rows],
        vec![activity.to_string()],
        sources,
        row_source,
        config,
    )
}

/// Featurized single-activity windows per device.
fn activity_sets(
    corpus: &Corpus,
    activity: &str,
    session: Option<&str>,
    stft: &StftArgs,
    seed: u64,
) -> Result<BTreeMap<String, SpectralDataset>> {
    let config = stft.config()?;
    let mut per_device: BTreeMap<String, Vec<SpectralDataset>> = BTreeMap::new();
    for ((device, _), entries) in corpus.select(None, session) {
        for entry in entries {
            if entry.meta.activity_label != activity {
                continue;
            }
            let path = corpus.root.join(&entry.file);
            let trace = emsca::trace_io::read_cfile(&path, entry)?;
            let ds = emsca::spectral::stft_featurize(&trace, &config)?;
            let ds = emsca::spectral::take_windows(&ds, stft.windows, stft.take_strategy(), seed)?;
            per_device.entry(device.clone()).or_default().push(ds);
        }
    }
    if per_device.is_empty() {
        return Err(Error::Argument(format!(
            "activity {activity:?} not present in corpus"
        )));
    }
    per_device
        .into_iter()
        .map(|(device, parts)| Ok((device, merge_single_class(parts, activity)?)))
        .collect()
}

fn run_pca(cmd: PcaCmd) -> Result<()> {
    let mut tracker = RunTracker::new("pca", cmd.seed);
    tracker.input(&cmd.corpus);
    let corpus = load_corpus(&cmd.corpus)?;
    let sets = activity_sets(&corpus, &cmd.activity, cmd.session.as_deref(), &cmd.stft, cmd.seed)?;
    let merged = merge_single_class(sets.into_values().collect(), &cmd.activity)?;
    let pca = fit_pca(&merged, 3)?;
    let csv = pca_projection_csv(&pca, &merged)?;
    std::fs::write(&cmd.out, csv).map_err(|e| Error::io(&cmd.out, e))?;
    tracker.output(&cmd.out);
    println!(
        "projected {} windows of {:?} onto 3 components (variances {:.3e}, {:.3e}, {:.3e})",
        merged.rows(),
        cmd.activity,
        pca.explained_variance[0],
        pca.explained_variance[1],
        pca.explained_variance[2]
    );
    tracker.finish_beside(&cmd.out)
}

fn run_discriminate(cmd: DiscriminateCmd) -> Result<()> {
    let mut tracker = RunTracker::new("discriminate", cmd.seed);
    tracker.input(&cmd.corpus);
    let corpus = load_corpus(&cmd.corpus)?;
    let sets = activity_sets(&corpus, &cmd.activity, cmd.session.as_deref(), &cmd.stft, cmd.seed)?;
    let config = ExperimentConfig {
        train: cmd.fit.train_config(derive_seed(cmd.seed, &["experiment"]))?,
        freeze: FreezeSpec::default(),
        hidden_dims: cmd.fit.hidden_dims()?,
    };
    let split_spec = emsca::dataset::SplitSpec {
        test_fraction: cmd.fit.test_fraction,
        stratified: true,
        seed: derive_seed(cmd.seed, &["discriminator-split"]),
    };
    let (report, model) = device_discriminator(&sets, &config, &split_spec)?;

    ensure_dir(&cmd.out)?;
    let model_path = cmd.out.join("model.emnn");
    model.save(&model_path)?;
    tracker.output(&model_path);
    let report_path = cmd.out.join("report.json");
    write_json(&report, &report_path)?;
    tracker.output(&report_path);
    print!("{}", report.to_table());
    tracker.finish_dir(&cmd.out)
}
