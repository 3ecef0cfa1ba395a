use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dfseg::io::{read_key_values, Task};
use dfseg::models::{build_initialized, Arch, ModelConfig};
use dfseg::phantom::{write_dataset, PhantomConfig};
use dfseg::pipeline::{evaluate_dirs, infer_dir, load_training_set, preprocess_dir};
use dfseg::preprocess::{PreprocessConfig, BODY_THRESHOLD};
use dfseg::trainer::{run_fold, Checkpoint, TrainConfig};
use dfseg::{Error, Result};

#[derive(Parser)]
#[command(name = "dfseg", version, about = "Volumetric tumour segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Basic,
    Dualflow,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with a case manifest.
    PhantomGen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        /// Volume size as z y x.
        #[arg(long, num_args = 3, value_names = ["Z", "Y", "X"], default_values_t = [16, 32, 32])]
        dims: Vec<usize>,
        #[arg(long, value_parser = ["1", "2"], default_value = "2")]
        task: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask, crop, match, resample and normalize every case of a dataset.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = BODY_THRESHOLD)]
        threshold: f64,
        #[arg(long, num_args = 3, value_names = ["Z", "Y", "X"], default_values_t = [1.2, 0.5, 0.5])]
        spacing: Vec<f64>,
        /// Reference volume for histogram matching.
        #[arg(long)]
        match_ref: Option<PathBuf>,
    },
    /// Train one cross-validation fold.
    Train {
        #[arg(long, value_parser = ["1", "2"])]
        task: String,
        #[arg(long, value_enum)]
        arch: ArchArg,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Flat `key = value` file with `model.*` and `train.*` settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mixup: bool,
        /// Initialize matching parameters from this checkpoint.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Preprocessed dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict label maps with an ensemble of checkpoints.
    Infer {
        #[arg(long, num_args = 1.., required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average over all eight axis flips.
        #[arg(long)]
        tta: bool,
    },
    /// Score predictions against reference labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn model_config(task: Task, arch: Arch, pairs: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let in_channels = match task {
        Task::Task1 => 1,
        Task::Task2 => 3,
    };
    let defaults = ModelConfig::toy(arch, in_channels);
    let mut merged: BTreeMap<String, String> = defaults.to_pairs().into_iter().collect();
    for (k, v) in pairs.iter().filter(|(k, _)| k.starts_with("model.")) {
        if !merged.contains_key(k) {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        merged.insert(k.clone(), v.clone());
    }
    merged.insert("model.arch".into(), arch.as_str().into());
    ModelConfig::from_pairs(&merged)
}

#[allow(clippy::too_many_arguments)]
fn train(task: &str, arch: ArchArg, fold: usize, config: Option<&Path>, mixup: bool, pretrained: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let task = Task::parse(task)?;
    let arch = match arch {
        ArchArg::Basic => Arch::Basic,
        ArchArg::Dualflow => Arch::DualFlow,
    };
    let pairs = config.map(read_key_values).transpose()?.unwrap_or_default();
    if let Some(k) = pairs.keys().find(|k| !k.starts_with("model.") && !k.starts_with("train.")) {
        return Err(Error::Config(format!("unknown key {k}")));
    }
    let mcfg = model_config(task, arch, &pairs)?;
    let mut tcfg = TrainConfig::default().with_pairs(&pairs)?;
    tcfg.fold = fold;
    tcfg.mixup |= mixup;
    tcfg.validate()?;
    let mut model = build_initialized(&mcfg, tcfg.seed)?;
    if let Some(p) = pretrained {
        let ck = Checkpoint::load(p)?;
        let n = model.load_matching(&ck.params);
        eprintln!("loaded {n} pretrained parameter tensors from {}", p.display());
    }
    let cases = load_training_set(data, mcfg.in_channels)?;
    let outcome = run_fold(&cases, model, &tcfg, Some(out))?;
    let best = outcome.history[outcome.best_epoch].val_mean.unwrap_or(0.0);
    println!("fold {fold}: best epoch {} validation DSC {best:.4}", outcome.best_epoch);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PhantomGen {
            seed,
            cases,
            dims,
            task,
            out,
        } => {
            let cfg = PhantomConfig::new([dims[0], dims[1], dims[2]], Task::parse(&task)?);
            let recs = write_dataset(&out, &cfg, seed, cases)?;
            println!("wrote {} cases to {}", recs.len(), out.display());
        }
        Command::Preprocess {
            input,
            out,
            threshold,
            spacing,
            match_ref,
        } => {
            let cfg = PreprocessConfig {
                threshold,
                target_spacing: [spacing[0], spacing[1], spacing[2]],
                ..PreprocessConfig::default()
            };
            let recs = preprocess_dir(&input, &out, &cfg, match_ref.as_deref())?;
            println!("preprocessed {} cases into {}", recs.len(), out.display());
        }
        Command::Train {
            task,
            arch,
            fold,
            config,
            mixup,
            pretrained,
            data,
            out,
        } => train(&task, arch, fold, config.as_deref(), mixup, pretrained.as_deref(), &data, &out)?,
        Command::Infer { ckpts, input, out, tta } => {
            let written = infer_dir(&ckpts, &input, &out, tta)?;
            println!("wrote {} predictions to {}", written.len(), out.display());
        }
        Command::Evaluate { pred, reference, report } => {
            let r = evaluate_dirs(&pred, &reference, &report)?;
            println!(
                "aggregated DSC: GTVp {:.4} GTVn {:.4} mean {:.4}",
                r.aggregate[0], r.aggregate[1], r.mean
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Format { .. } => 4,
        Error::Config(_) | Error::InvalidArgument(_) => 5,
        Error::Shape(_) => 6,
        Error::UnusableScan(_) => 7,
        Error::NonFinite(_) => 8,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("DFSEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
