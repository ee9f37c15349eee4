//! Command-line front end: dataset preparation, training, evaluation, the
//! three-variant ablation, cost arithmetic, and gradient verification.
//!
//! Every command resolves its configuration the same way: documented
//! defaults, overridden by a flat `key = value` config file, overridden by
//! flags. Commands that produce artifacts write them into a fresh
//! timestamped directory containing the resolved config echo, so any run
//! can be reproduced from its output directory alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use manetl_core::config::{parse_config, RunSpec};
use manetl_core::image::dataset::{write_synthetic_dataset, LoadedDataset, MANIFEST_NAME};
use manetl_core::image::pipeline::Preprocess;
use manetl_core::model::cost::{format_millions, reference_reduction};
use manetl_core::model::{composed_gradient_check_with_fault, ModelConfig, Variant};
use manetl_core::tensor::gradcheck::check_primitives;
use manetl_core::tensor::{BackwardFault, OpKind};
use manetl_core::train::{
    ablation_table, run_ablation, to_csv, validate_series, Checkpoint, MetricsRecord, Trainer,
};
use manetl_core::{Error, Result};

const EXIT_HELP: &str = "Exit codes:\n  \
    0  success\n  \
    2  configuration error (bad config file, flags, or model setup)\n  \
    3  data error (missing or malformed dataset files)\n  \
    4  numerical abort (non-finite loss, failed gradient check)\n  \
    1  any other failure";

#[derive(Parser)]
#[command(
    name = "manetl",
    version,
    about = "Two-branch attention CNN for handwritten characters",
    after_help = EXIT_HELP
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flag-level overrides. Precedence: defaults < config file < flags.
#[derive(Args)]
struct Overrides {
    /// Flat `key = value` run configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for weights, shuffling, dropout, and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory that receives run artifact subdirectories.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// On-disk dataset root (a manifest plus BMP class folders).
    #[arg(long, global = true, value_name = "DIR", conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,

    /// Synthetic dataset shape as `classes,per_class`.
    #[arg(long, global = true, value_name = "K,N", value_parser = parse_synthetic)]
    synthetic: Option<(usize, usize)>,

    /// Model variant: inception, residual, or ensemble.
    #[arg(long, global = true, value_parser = Variant::parse)]
    variant: Option<Variant>,

    /// Feed raw grayscale pixels, skipping inversion and augmentation.
    #[arg(long, global = true)]
    no_preprocess: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic BMP dataset and its split manifest to disk.
    Prepare,
    /// Train one model; writes metrics, a checkpoint, and the config echo.
    Train,
    /// Score a training checkpoint on its dataset's test split.
    Evaluate {
        /// Checkpoint file produced by `train`.
        checkpoint: PathBuf,
    },
    /// Train all three variants under one budget and print the table.
    Ablate,
    /// Print the multiply-accumulate cost of a 5x5 layer with and
    /// without a 1x1 channel reduction in front of it.
    Macs,
    /// Compare every analytic gradient against finite differences.
    Gradcheck {
        /// Model size: `tiny` finishes in seconds, `default` is the full net.
        #[arg(long, default_value = "tiny", value_parser = parse_scale)]
        scale: Scale,

        /// Multiply one op's backward rule by 1.5 to prove the check bites.
        #[arg(long, hide = true, value_name = "OP", value_parser = parse_op)]
        corrupt_backward: Option<OpKind>,
    },
}

#[derive(Clone, Copy)]
enum Scale {
    Tiny,
    Default,
}

fn parse_scale(s: &str) -> Result<Scale> {
    match s {
        "tiny" => Ok(Scale::Tiny),
        "default" => Ok(Scale::Default),
        other => Err(Error::config(format!("unknown scale `{other}`, expected tiny|default"))),
    }
}

fn parse_synthetic(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("--synthetic wants `classes,per_class`, got `{s}`"));
    let (classes, per_class) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        classes.trim().parse().map_err(|_| bad())?,
        per_class.trim().parse().map_err(|_| bad())?,
    ))
}

fn parse_op(s: &str) -> Result<OpKind> {
    Ok(match s {
        "conv2d" => OpKind::Conv2d,
        "dense" => OpKind::Dense,
        "batch-norm" => OpKind::BatchNorm,
        "relu" => OpKind::Relu,
        "avg-pool" => OpKind::AvgPool,
        "max-pool" => OpKind::MaxPool,
        "global-avg-pool" => OpKind::GlobalAvgPool,
        "softmax" => OpKind::Softmax,
        "dropout" => OpKind::Dropout,
        "concat" => OpKind::ConcatChannels,
        "add" => OpKind::Add,
        "scale" => OpKind::Scale,
        "channel-scale" => OpKind::ChannelScale,
        other => return Err(Error::config(format!("unknown op `{other}`"))),
    })
}

fn main() -> ExitCode {
    // Die quietly when the reader closes the pipe (`manetl macs | head`);
    // the runtime otherwise turns SIGPIPE into a printing panic.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Config(_) | Error::Usage(_) => 2,
                Error::Data(_) => 3,
                Error::Numeric(_) => 4,
                _ => 1,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Prepare => cmd_prepare(&resolve_spec(&cli.overrides)?),
        Command::Train => cmd_train(&resolve_spec(&cli.overrides)?),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cli.overrides, &checkpoint),
        Command::Ablate => cmd_ablate(&resolve_spec(&cli.overrides)?),
        Command::Macs => cmd_macs(),
        Command::Gradcheck { scale, corrupt_backward } => cmd_gradcheck(scale, corrupt_backward),
    }
}

/// MANETL_THREADS caps the worker pool; 0 or unset means one per core.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MANETL_THREADS") else { return Ok(()) };
    let threads: usize = raw.trim().parse().map_err(|_| {
        Error::config(format!("MANETL_THREADS must be a non-negative integer, got `{raw}`"))
    })?;
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool setup failed: {e}")))
}

fn resolve_spec(overrides: &Overrides) -> Result<RunSpec> {
    let mut spec = match &overrides.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            parse_config(&text)?
        }
        None => RunSpec::default(),
    };
    apply_flags(&mut spec, overrides)?;
    Ok(spec)
}

fn apply_flags(spec: &mut RunSpec, overrides: &Overrides) -> Result<()> {
    if let Some(seed) = overrides.seed {
        spec.train.seed = seed;
    }
    if let Some(out) = &overrides.out {
        spec.out_dir = out.clone();
    }
    if let Some(dir) = &overrides.dataset {
        spec.dataset_dir = Some(dir.clone());
    }
    if let Some((classes, per_class)) = overrides.synthetic {
        spec.synthetic_classes = classes;
        spec.synthetic_per_class = per_class;
        spec.model.num_classes = classes;
        // The flag selects the synthetic source even when the config file
        // points at a directory.
        spec.dataset_dir = None;
    }
    if let Some(variant) = overrides.variant {
        spec.model.variant = variant;
    }
    if overrides.no_preprocess {
        spec.preprocess = false;
    }
    spec.validate()
}

fn preprocess_opts(spec: &RunSpec) -> Preprocess {
    if spec.preprocess {
        Preprocess::standard(None)
    } else {
        Preprocess::raw()
    }
}

fn load_dataset(spec: &RunSpec) -> Result<LoadedDataset> {
    let opts = preprocess_opts(spec);
    let augment = spec.preprocess;
    let (_, data) = match &spec.dataset_dir {
        Some(root) => LoadedDataset::from_dir(root, &opts, augment)?,
        None => LoadedDataset::from_synthetic(
            spec.synthetic_classes,
            spec.synthetic_per_class,
            spec.train.seed,
            spec.train_fraction,
            &opts,
            augment,
        )?,
    };
    if data.classes != spec.model.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes but the model is configured for {}",
            data.classes, spec.model.num_classes
        )));
    }
    Ok(data)
}

/// Fresh timestamped run directory under `out`; existing runs are never
/// reused or overwritten.
fn create_run_dir(out: &Path, kind: &str) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stamp =
        SystemTime::now().duration_since(UNIX_EPOCH).expect("clock after epoch").as_secs();
    for attempt in 0..1000 {
        let name = if attempt == 0 {
            format!("{kind}-{stamp}")
        } else {
            format!("{kind}-{stamp}-{attempt}")
        };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(Error::config(format!("cannot find a fresh run directory under {}", out.display())))
}

fn print_epoch(record: &MetricsRecord) {
    println!(
        "epoch {:>3}  train {:.4}/{:.4}  eval {:.4}/{:.4}  {:.1}s",
        record.epoch,
        record.train_loss,
        record.train_accuracy,
        record.eval_loss,
        record.eval_accuracy,
        record.wall_seconds
    );
}

fn cmd_prepare(spec: &RunSpec) -> Result<()> {
    let root = spec.dataset_dir.clone().ok_or_else(|| {
        Error::config("prepare needs a destination: --dataset <dir> or dataset_dir in the config")
    })?;
    if root.join(MANIFEST_NAME).exists() {
        return Err(Error::config(format!(
            "{} already holds a dataset; refusing to overwrite",
            root.display()
        )));
    }
    let opts = preprocess_opts(spec);
    let manifest = write_synthetic_dataset(
        &root,
        spec.synthetic_classes,
        spec.synthetic_per_class,
        spec.train.seed,
        spec.train_fraction,
        &opts,
    )?;
    println!(
        "wrote {} samples across {} classes to {}",
        manifest.records.len(),
        manifest.classes,
        root.display()
    );
    println!("fingerprint {:016x}", manifest.fingerprint);
    Ok(())
}

fn cmd_train(spec: &RunSpec) -> Result<()> {
    let data = load_dataset(spec)?;
    let run_dir = create_run_dir(&spec.out_dir, "train")?;
    let echo = spec.echo();
    fs::write(run_dir.join("config.txt"), &echo)?;
    fs::write(run_dir.join("fingerprint.txt"), format!("{:016x}\n", data.fingerprint))?;
    println!(
        "training {} on {} train / {} test samples ({} classes)",
        spec.model.variant,
        data.train_indices.len(),
        data.test_indices.len(),
        data.classes
    );
    let mut trainer = Trainer::new(spec.model.clone(), spec.train.clone())?;
    println!("{} trainable scalars", trainer.store.num_trainable_scalars());
    let records = trainer.train(&data, print_epoch)?;
    validate_series(&records)?;
    fs::write(run_dir.join("metrics.csv"), to_csv(&records))?;
    trainer.capture_checkpoint(&echo).save(&run_dir.join("checkpoint.bin"))?;
    if let Some(last) = records.last() {
        println!("final eval accuracy {:.4}", last.eval_accuracy);
    }
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

fn cmd_evaluate(overrides: &Overrides, path: &Path) -> Result<()> {
    if overrides.config.is_some() {
        return Err(Error::config(
            "evaluate reads its configuration from the checkpoint; drop --config",
        ));
    }
    let snapshot = Checkpoint::load(path)?;
    let mut spec = parse_config(&snapshot.config_echo)?;
    apply_flags(&mut spec, overrides)?;
    let data = load_dataset(&spec)?;
    let mut trainer = Trainer::resume(spec.model.clone(), spec.train.clone(), &snapshot)?;
    let (loss, accuracy) = trainer.evaluate(&data)?;
    println!("checkpoint {} after {} epochs", path.display(), trainer.completed_epochs());
    println!("eval loss {loss:.6}  accuracy {accuracy:.4}");
    Ok(())
}

fn cmd_ablate(spec: &RunSpec) -> Result<()> {
    let data = load_dataset(spec)?;
    let run_dir = create_run_dir(&spec.out_dir, "ablate")?;
    fs::write(run_dir.join("config.txt"), spec.echo())?;
    fs::write(run_dir.join("fingerprint.txt"), format!("{:016x}\n", data.fingerprint))?;
    println!(
        "ablation over {} train / {} test samples, {} epochs per variant",
        data.train_indices.len(),
        data.test_indices.len(),
        spec.train.epochs
    );
    let mut current = None;
    let rows = run_ablation(&data, &spec.model, &spec.train, |variant, record| {
        if current != Some(variant) {
            current = Some(variant);
            println!("-- {variant}");
        }
        print_epoch(record);
    })?;
    for row in &rows {
        validate_series(&row.records)?;
        fs::write(run_dir.join(format!("metrics-{}.csv", row.variant)), to_csv(&row.records))?;
    }
    let table = ablation_table(&rows);
    fs::write(run_dir.join("table.txt"), &table)?;
    print!("{table}");
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

fn cmd_macs() -> Result<()> {
    let cmp = reference_reduction()?;
    println!("per-position 5x5 convolution, 480 -> 48 channels on a 14x14 map:");
    println!("  direct:      {:>12} MACs  ({})", cmp.direct, format_millions(cmp.direct));
    println!("  1x1 reduced: {:>12} MACs  ({})", cmp.reduced, format_millions(cmp.reduced));
    println!("  reduction:   {:.1}x", cmp.direct as f64 / cmp.reduced as f64);
    Ok(())
}

const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSED_TOL: f64 = 1e-3;
const PRIMITIVE_SEEDS: u64 = 10;

fn cmd_gradcheck(scale: Scale, corrupt: Option<OpKind>) -> Result<()> {
    let fault = corrupt.map(|kind| BackwardFault { kind, scale: 1.5 });
    // The default-size model is checked at a single seed with a thinner
    // probe budget; finite differences over the full net are slow.
    let (config, composed_seeds, per_param) = match scale {
        Scale::Tiny => (ModelConfig::tiny(), 3, 4),
        Scale::Default => (ModelConfig::new(10, Variant::Ensemble), 1, 2),
    };

    let mut worst_name = "";
    let mut worst_err = 0.0;
    for seed in 0..PRIMITIVE_SEEDS {
        for check in check_primitives(seed)? {
            if check.max_rel_err > worst_err {
                worst_err = check.max_rel_err;
                worst_name = check.name;
            }
        }
    }
    println!("primitives over {PRIMITIVE_SEEDS} seeds: max rel err {worst_err:.3e} ({worst_name})");
    if worst_err >= PRIMITIVE_TOL {
        return Err(Error::numeric(format!(
            "primitive `{worst_name}` failed the finite-difference check: \
             {worst_err:.3e} >= {PRIMITIVE_TOL:.0e}"
        )));
    }

    for seed in 0..composed_seeds {
        let report = composed_gradient_check_with_fault(&config, seed, per_param, fault)?;
        let worst = report.worst().expect("model has parameters");
        println!(
            "composed seed {seed}: max rel err {:.3e} ({}) over {} probes",
            report.max_rel_err, worst.name, report.checked
        );
        if !report.passes(COMPOSED_TOL) {
            return Err(Error::numeric(format!(
                "gradient mismatch in `{}`: rel err {:.3e} at element {} \
                 (analytic {:.6e}, numeric {:.6e})",
                worst.name, worst.max_rel_err, worst.index, worst.analytic, worst.numeric
            )));
        }
    }
    println!("gradient checks passed (primitives < {PRIMITIVE_TOL:.0e}, composed < {COMPOSED_TOL:.0e})");
    Ok(())
}
