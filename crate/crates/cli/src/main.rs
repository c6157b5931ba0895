mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mrnet::data::{load_cifar10, locate_cifar10, synthetic_split, LabeledImageSet};
use mrnet::netbuilder::{build, Network, NetworkSpec};
use mrnet::paths::{distribution_report, network_paths};
use mrnet::train::{checkpoint, evaluate, train_loop, TrainConfig, CHECKPOINT_FILE};
use mrnet::verify::{rows_to_csv, run_suite, Suite, VerifyOptions};
use mrnet::{DType, Error, Result, Scalar};

use config::{DataSource, RawConfig, RunConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_VERIFY: u8 = 4;

/// Largest depth accepted by analyze-paths.
const MAX_PATH_L: usize = 96;

#[derive(Parser)]
#[command(name = "mrnet", version, about = "Deep merge-and-run networks: train, analyse, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. --set L=12 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn raw(&self) -> Result<RawConfig> {
        let mut raw = match &self.config {
            Some(p) => RawConfig::from_file(p)?,
            None => RawConfig::default(),
        };
        for s in &self.set {
            raw.set(s)?;
        }
        Ok(raw)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes metrics.csv and model.mrn to out_dir
    Train(ConfigArgs),
    /// Evaluate the checkpoint in out_dir on the test split
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to load instead of <out_dir>/model.mrn
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Path-length distribution of a network (kind, L, B from the config)
    AnalyzePaths(ConfigArgs),
    /// Run self-verification suites
    Verify {
        /// idempotence, gradcheck, widen, lower, flow or all
        #[arg(long, default_value = "all")]
        suite: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Test hook: perturb one weight of every rewrite target by this amount
        #[arg(long, hide = true)]
        perturb: Option<f64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Numeric { .. } => EXIT_NUMERIC,
        Error::Certification { .. } => EXIT_VERIFY,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval { config, checkpoint } => cmd_eval(&config, checkpoint.as_deref()),
        Command::AnalyzePaths(c) => cmd_analyze_paths(&c),
        Command::Verify {
            suite,
            config,
            perturb,
        } => cmd_verify(&suite, &config, perturb),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn network_spec(cfg: &RunConfig) -> NetworkSpec {
    NetworkSpec {
        branch_layers: cfg.branch_layers,
        ..NetworkSpec::new(cfg.kind, cfg.depth)
            .with_widths(&cfg.widths)
            .with_multiplier(cfg.width_multiplier)
            .with_classes(cfg.num_classes)
    }
}

fn load_data(cfg: &RunConfig) -> Result<(LabeledImageSet, LabeledImageSet)> {
    match &cfg.data {
        DataSource::Synthetic { classes, n } => {
            synthetic_split(*classes, *n, (*n / 4).max(*classes), cfg.seed)
        }
        DataSource::Cifar10 { dir, limit } => {
            let root = locate_cifar10(dir).ok_or_else(|| Error::Config {
                key: "data".into(),
                message: format!("no CIFAR-10 binary batches under {}", dir.display()),
            })?;
            let (train, test) = load_cifar10(&root)?;
            match limit {
                Some(n) => {
                    let sub = train.take(*n)?;
                    let test = test.with_stats_of(&sub);
                    Ok((sub, test))
                }
                None => Ok((train, test)),
            }
        }
    }
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        base_lr: cfg.lr,
        seed: cfg.seed,
        dtype: cfg.dtype,
        augment: matches!(cfg.data, DataSource::Cifar10 { .. }),
        ..TrainConfig::default()
    }
}

fn cmd_train(args: &ConfigArgs) -> Result<u8> {
    let cfg = args.raw()?.resolve()?;
    let spec = network_spec(&cfg);
    spec.validate()?;
    let (train, test) = load_data(&cfg)?;
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(&cfg, &spec, &train, &test),
        DType::F64 => train_typed::<f64>(&cfg, &spec, &train, &test),
    }
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    spec: &NetworkSpec,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
) -> Result<u8> {
    let mut net: Network<T> = build(spec, cfg.seed)?;
    eprintln!(
        "training {} L={} ({} parameters) on {} images for {} epochs",
        cfg.kind.name(),
        cfg.depth,
        net.count_parameters(),
        train.len(),
        cfg.epochs
    );
    let metrics = train_loop(&mut net, train, Some(test), &train_config(cfg), Some(&cfg.out_dir))?;
    print!("{}", metrics.to_csv());
    Ok(0)
}

fn cmd_eval(args: &ConfigArgs, ckpt: Option<&Path>) -> Result<u8> {
    let cfg = args.raw()?.resolve()?;
    let spec = network_spec(&cfg);
    spec.validate()?;
    let (_, test) = load_data(&cfg)?;
    let path = ckpt.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    let (loss, err) = match cfg.dtype {
        DType::F32 => eval_typed::<f32>(&cfg, &spec, &test, &path)?,
        DType::F64 => eval_typed::<f64>(&cfg, &spec, &test, &path)?,
    };
    let report = format!("split,loss,err\ntest,{loss},{err}\n");
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("eval.csv"), &report)?;
    print!("{report}");
    Ok(0)
}

fn eval_typed<T: Scalar>(
    cfg: &RunConfig,
    spec: &NetworkSpec,
    test: &LabeledImageSet,
    path: &Path,
) -> Result<(f64, f64)> {
    let mut net: Network<T> = build(spec, cfg.seed)?;
    checkpoint::load(&mut net, path)?;
    evaluate(&net, test, cfg.batch_size)
}

fn cmd_analyze_paths(args: &ConfigArgs) -> Result<u8> {
    let raw = args.raw()?;
    let cfg = raw.resolve()?;
    if cfg.depth > MAX_PATH_L {
        return Err(Error::Config {
            key: "L".into(),
            message: format!("path analysis supports L <= {MAX_PATH_L}"),
        });
    }
    let dist = network_paths(cfg.kind, cfg.depth, cfg.branch_layers)?;
    let report = distribution_report(&dist);
    if raw.get("out_dir").is_some() {
        fs::create_dir_all(&cfg.out_dir)?;
        let name = format!("paths_{}_L{}_B{}.csv", cfg.kind.name(), cfg.depth, cfg.branch_layers);
        fs::write(cfg.out_dir.join(name), &report)?;
    }
    print!("{report}");
    Ok(0)
}

fn cmd_verify(suite: &str, args: &ConfigArgs, perturb: Option<f64>) -> Result<u8> {
    let raw = args.raw()?;
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![Suite::parse(suite).ok_or_else(|| Error::Config {
            key: "suite".into(),
            message: format!("unknown suite `{suite}`"),
        })?]
    };
    let seed = match raw.get("seed") {
        Some(s) => s.parse().map_err(|_| Error::Config {
            key: "seed".into(),
            message: format!("cannot parse `{s}`"),
        })?,
        None => 0,
    };
    let opts = VerifyOptions { perturb, seed };
    let mut rows = Vec::new();
    for s in suites {
        rows.extend(run_suite(s, &opts)?);
    }
    let report = rows_to_csv(&rows);
    if let Some(dir) = raw.get("out_dir") {
        fs::create_dir_all(dir)?;
        fs::write(Path::new(dir).join("verify.csv"), &report)?;
    }
    print!("{report}");
    Ok(if rows.iter().all(|r| r.pass) { 0 } else { EXIT_VERIFY })
}
