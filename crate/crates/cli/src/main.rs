use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use irrcnn_core::arch::Variant;
use irrcnn_core::autograd::Fault;
use irrcnn_core::data::DatasetKind;
use irrcnn_core::harness::{gradcheck, run_eval, run_train, summarize, ArchPreset, RunConfig};
use irrcnn_core::init::InitScheme;
use irrcnn_core::ops::Activation;
use irrcnn_core::optim::OptimizerKind;
use irrcnn_core::Precision;

#[derive(Parser, Debug)]
#[command(
    name = "irrcnn",
    version,
    about = "Train, evaluate and inspect inception recurrent residual networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics and a checkpoint to the output directory.
    Train(RunArgs),
    /// Report top-1 and top-5 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check backpropagated gradients of a miniature model against finite differences.
    Gradcheck {
        #[arg(long, default_value = "irrcnn")]
        arch: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt a backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print parameter counts, layer lists and spatial traces for all variants.
    Summary(RunArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// cifar10, cifar100 or synthetic.
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Directory holding the binary CIFAR batch files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// irrcnn, ircnn, ein or eirn.
    #[arg(long)]
    arch: Option<Variant>,
    /// Network shape: cifar, cifar_reduced, small or miniature.
    #[arg(long)]
    preset: Option<ArchPreset>,
    /// Recurrent steps per RCL.
    #[arg(long)]
    k: Option<usize>,
    /// scaled or lsuv.
    #[arg(long)]
    init: Option<InitScheme>,
    /// sgd or eve.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// relu or elu.
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for config, metrics and checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random horizontal flips during training.
    #[arg(long)]
    augment: Option<Switch>,
    /// standard (f32) or wide (f64).
    #[arg(long)]
    precision: Option<Precision>,
    /// Use only the first N training images.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    test_limit: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> irrcnn_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$target = v; })*
            };
        }
        set!(
            dataset => dataset,
            arch => variant,
            preset => preset,
            k => k,
            optimizer => optimizer,
            activation => activation,
            epochs => epochs,
            batch_size => batch_size,
            seed => seed,
            out => out,
            precision => precision,
        );
        if let Some(dir) = &self.data_dir {
            cfg.data_dir = Some(dir.clone());
        }
        if let Some(scheme) = self.init {
            cfg.init.scheme = scheme;
        }
        if let Some(a) = self.augment {
            cfg.augment = matches!(a, Switch::On);
        }
        if self.train_limit.is_some() {
            cfg.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            cfg.test_limit = self.test_limit;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> irrcnn_core::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let mut header = true;
            let artifacts = run_train(&cfg, |r| {
                if std::mem::take(&mut header) {
                    println!("{}", irrcnn_core::harness::METRICS_HEADER);
                }
                println!(
                    "{},{:.6},{:.4},{:.6},{:.4},{:.4},{:.3e},{:.1}",
                    r.epoch,
                    r.train_loss,
                    r.train_acc,
                    r.val_loss,
                    r.val_acc,
                    r.top5_acc,
                    r.learning_rate,
                    r.seconds
                );
            })?;
            println!("metrics: {}", artifacts.metrics.display());
            if let Some(lsuv) = &artifacts.lsuv {
                println!("lsuv report: {}", lsuv.display());
            }
            println!("checkpoint: {}", artifacts.checkpoint.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, run } => {
            let cfg = run.resolve()?;
            let (header, result) = run_eval(&checkpoint, &cfg)?;
            println!(
                "checkpoint: {} ({}, epoch {})",
                checkpoint.display(),
                header.arch.variant,
                header.epoch
            );
            println!("samples: {}", result.samples);
            println!("loss: {:.6}", result.loss);
            println!("top-1: {:.4}", result.top1);
            println!("top-5: {:.4}", result.top5);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            arch,
            seed,
            inject_fault,
        } => {
            let fault = inject_fault.then_some(Fault::ActivationGradient);
            let report = gradcheck(arch, seed, fault)?;
            println!("{report}");
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Summary(args) => {
            let cfg = args.resolve()?;
            print!("{}", summarize(&cfg.arch()?)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
