//! `conceptprune` command line: train the toy model, record activation
//! statistics, build and combine masks, prune, sample, and evaluate.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use conceptprune::checkpoint::Checkpoint;
use conceptprune::diffusion::{self, Condition, ModelConfig, Style, ToyDataset, TrainConfig, UpdateRule};
use conceptprune::eval::{all_conditions, evaluate};
use conceptprune::mask::{build_bundle, union_concepts, ConceptMaskBundle, MaskKind, MaskParams};
use conceptprune::stats::{record, CalibrationSet, NormStatsArchive, PromptSet};
use conceptprune::{par, surgery};
use log::info;
use serde_json::json;

mod config;

#[derive(Parser, Debug)]
#[command(name = "conceptprune", version, about = "Concept erasure by pruning skilled FFN weights")]
struct Cli {
    /// Seed for every random draw made by the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for data-parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// File of `key = value` lines supplying flags not given on the command
    /// line. Keys are long flag names without the leading dashes.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Log more to standard error (repeat for more detail).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy diffusion model and write a checkpoint.
    TrainToy(TrainToyArgs),
    /// Record per-feature activation norms for one side of a calibration set.
    Record(RecordArgs),
    /// Build a concept mask bundle from target and reference statistics.
    Mask(MaskArgs),
    /// Combine several concept masks into one.
    Union(UnionArgs),
    /// Zero the masked second-layer weights of a checkpoint.
    Prune(PruneArgs),
    /// Draw samples from a checkpoint as CSV.
    Sample(SampleArgs),
    /// Compare an original and a pruned checkpoint on every condition.
    Eval(EvalArgs),
    /// Print per-layer mask densities as JSON.
    Density(DensityArgs),
    /// Check that a pruned checkpoint differs from its original only by the mask.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct TrainToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f32,
    /// `tensor_normalized` or `plain`.
    #[arg(long, default_value = "tensor_normalized")]
    update_rule: UpdateRule,
    #[arg(long, default_value_t = ModelConfig::default().d_model)]
    d_model: usize,
    #[arg(long, default_value_t = ModelConfig::default().d_hidden)]
    d_hidden: usize,
    #[arg(long, default_value_t = ModelConfig::default().n_blocks)]
    blocks: usize,
    #[arg(long, default_value_t = ModelConfig::default().timesteps)]
    timesteps: usize,
}

#[derive(Args, Debug)]
struct RecordArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Style whose conditions form the target side.
    #[arg(long, default_value = "ring")]
    style: String,
    /// `target` or `reference`.
    #[arg(long)]
    set: PromptSet,
    /// Points per condition and timestep.
    #[arg(long, default_value_t = 64)]
    n_tok: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Percentage of each row kept by the top-k indicator.
    #[arg(long, default_value_t = 2.0)]
    k: f64,
    /// Number of highest-noise timesteps aggregated.
    #[arg(long, default_value_t = 10)]
    t_hat: usize,
    /// `skilled` or `unskilled`.
    #[arg(long, default_value = "skilled", value_parser = parse_kind)]
    kind: MaskKind,
    /// Restrict to these layers (comma separated); all layers by default.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<String>>,
    /// Concept label stored in the bundle.
    #[arg(long, default_value = "ring")]
    concept: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct UnionArgs {
    /// Input masks; give the flag once per file.
    #[arg(long = "mask", required = true, num_args = 1)]
    masks: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Record the bundle as an unskilled (inverted) pruning.
    #[arg(long)]
    invert: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    object: usize,
    #[arg(long, default_value = "plain")]
    style: String,
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    pruned: PathBuf,
    /// Samples per condition.
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// JSON report path; the report goes to standard output when neither
    /// `--json` nor `--csv` is given.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DensityArgs {
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    pruned: PathBuf,
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    mask: PathBuf,
}

fn parse_kind(s: &str) -> Result<MaskKind, String> {
    match s {
        "skilled" => Ok(MaskKind::Skilled),
        "unskilled" => Ok(MaskKind::Unskilled),
        _ => Err(format!("expected skilled or unskilled, got {s:?}")),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(String),
    Output(std::io::Error),
    Core(conceptprune::Error),
}

impl From<conceptprune::Error> for Failure {
    fn from(e: conceptprune::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Config(_) => "config",
            Failure::Output(_) => "output",
            Failure::Core(e) => e.kind(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            "usage" => 2,
            "config" => 3,
            "output" => 4,
            "parameter" => 10,
            "shape" => 11,
            "numeric" => 12,
            "merge" => 13,
            "state" => 14,
            "compatibility" => 15,
            "format" => 16,
            "verification" => 17,
            "training" => 18,
            "io" => 19,
            _ => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Config(m) => m.clone(),
            Failure::Output(e) => e.to_string(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

fn style(name: &str) -> Result<Style, Failure> {
    Ok(Style::from_name(name)?)
}

fn emit(value: &serde_json::Value) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Failure::Output(e.into()))?;
    writeln!(out).map_err(Failure::Output)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(path)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    par::configure_threads(cli.threads);
    match cli.command {
        Command::TrainToy(a) => {
            let dataset = ToyDataset::default();
            let model_config = ModelConfig {
                d_model: a.d_model,
                d_hidden: a.d_hidden,
                n_blocks: a.blocks,
                timesteps: a.timesteps,
                ..ModelConfig::default()
            };
            let config = TrainConfig {
                steps: a.steps,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                update_rule: a.update_rule,
                seed: cli.seed,
                ..TrainConfig::default()
            };
            let (model, report) = diffusion::train(&dataset, model_config, &config)?;
            info!(
                "validation mse {:.5} -> {:.5}",
                report.initial_validation_mse, report.final_validation_mse
            );
            let ckpt = Checkpoint::new(model, dataset).with_training(report);
            ckpt.save(&a.out)?;
            info!("wrote {} (model {})", a.out.display(), ckpt.fingerprint);
        }
        Command::Record(a) => {
            let ckpt = load_ckpt(&a.ckpt)?;
            let calib = CalibrationSet::for_style(
                style(&a.style)?,
                ckpt.model.config.n_objects,
                ckpt.model.timesteps(),
                a.n_tok,
                cli.seed,
            )?;
            let archive = record(&ckpt, &calib, a.set)?;
            archive.save(&a.out)?;
            info!("wrote {} ({} statistics)", a.out.display(), archive.stats.len());
        }
        Command::Mask(a) => {
            let ckpt = load_ckpt(&a.ckpt)?;
            let target = NormStatsArchive::load(&a.target)?;
            let reference = NormStatsArchive::load(&a.reference)?;
            let params = MaskParams {
                concept: a.concept,
                k_percent: a.k,
                t_hat: a.t_hat,
                kind: a.kind,
                layers: a.layers,
            };
            let bundle = build_bundle(&ckpt, &target, &reference, &params)?;
            bundle.save(&a.out)?;
            for (layer, d) in bundle.densities() {
                info!("{layer}: density {d:.4}");
            }
        }
        Command::Union(a) => {
            let bundles = a
                .masks
                .iter()
                .map(ConceptMaskBundle::load)
                .collect::<conceptprune::Result<Vec<_>>>()?;
            let union = union_concepts(&bundles)?;
            union.save(&a.out)?;
            info!("wrote {} ({})", a.out.display(), union.concept);
        }
        Command::Prune(a) => {
            let ckpt = load_ckpt(&a.ckpt)?;
            let bundle = ConceptMaskBundle::load(&a.mask)?;
            let pruned = surgery::apply(&ckpt, &bundle, a.invert)?;
            pruned.save(&a.out)?;
            info!("wrote {}", a.out.display());
        }
        Command::Sample(a) => {
            let ckpt = load_ckpt(&a.ckpt)?;
            let cond = Condition::new(a.object, style(&a.style)?);
            let points = diffusion::sample(&ckpt.model, cond, a.n, cli.seed)?;
            let sink: Box<dyn Write> = match &a.out {
                Some(p) => Box::new(
                    std::fs::File::create(p)
                        .map_err(|e| conceptprune::Error::Io { path: p.clone(), source: e })?,
                ),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut w = csv::Writer::from_writer(sink);
            w.write_record(["x", "y"]).map_err(|e| Failure::Output(e.into()))?;
            for [x, y] in points {
                w.write_record([x.to_string(), y.to_string()])
                    .map_err(|e| Failure::Output(e.into()))?;
            }
            w.flush().map_err(Failure::Output)?;
        }
        Command::Eval(a) => {
            let original = load_ckpt(&a.original)?;
            let pruned = load_ckpt(&a.pruned)?;
            let report = evaluate(&original, &pruned, &all_conditions(&original), a.n, cli.seed)?;
            if let Some(p) = &a.json {
                report.write_json(p)?;
            }
            if let Some(p) = &a.csv {
                report.write_csv(p)?;
            }
            if a.json.is_none() && a.csv.is_none() {
                let mut out = std::io::stdout().lock();
                writeln!(out, "{}", report.to_json()?).map_err(Failure::Output)?;
            }
            for s in &report.summary {
                info!(
                    "{}: ring score {:.3} -> {:.3}, center error {:.3} -> {:.3}",
                    s.style.name(),
                    s.original.ring_score,
                    s.pruned.ring_score,
                    s.original.center_error,
                    s.pruned.center_error
                );
            }
        }
        Command::Density(a) => {
            let bundle = ConceptMaskBundle::load(&a.mask)?;
            let mut layers = serde_json::Map::new();
            for (info, (name, d)) in bundle.layers.iter().zip(bundle.densities()) {
                layers.insert(
                    name,
                    json!({ "density": d, "bound": bundle.density_bound(info)? }),
                );
            }
            emit(&json!({
                "concept": bundle.concept,
                "k_percent": bundle.k_percent,
                "t_hat": bundle.t_hat,
                "layers": layers,
            }))?;
        }
        Command::Verify(a) => {
            let pruned = load_ckpt(&a.pruned)?;
            let original = load_ckpt(&a.original)?;
            let bundle = ConceptMaskBundle::load(&a.mask)?;
            let report = surgery::verify(&pruned, &original, &bundle)?;
            emit(&serde_json::to_value(&report).map_err(|e| Failure::Output(e.into()))?)?;
        }
    }
    Ok(())
}

fn fail(f: &Failure) -> ExitCode {
    let code = f.exit_code();
    eprintln!(
        "error: kind={} exit={} message={}",
        f.kind(),
        code,
        serde_json::Value::String(f.message())
    );
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::merge(&Cli::command(), argv) {
        Ok(a) => a,
        Err(m) => return fail(&Failure::Config(m)),
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail(&Failure::Usage(e.kind().to_string()));
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}
