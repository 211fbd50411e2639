use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hwau_cli::{cmd_ablate, cmd_eval, cmd_infer, cmd_phantom, cmd_train, CliError, EvalSource, Invocation, Outcome, RunConfig};

/// Multimodal 3D lesion segmentation: phantoms, training, evaluation, inference and ablations.
///
/// Every command writes its outputs, the resolved configuration and the
/// invocation under `<output_root>/<timestamp>-<config hash>`. Failures print
/// one JSON line to stderr and exit with 2 (configuration), 3 (data) or 4
/// (non-finite values).
#[derive(Parser)]
#[command(name = "hwau", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise reproducible runs on any machine.
    #[arg(long, global = true, env = "HWAU_NUM_THREADS")]
    device_threads: Option<usize>,
    /// Sets a config value by dot path, e.g. `train.lr0=5e-4`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic phantom cases and a split manifest.
    Phantom {
        /// Number of cases; defaults to `phantom.count`.
        #[arg(long)]
        count: Option<usize>,
        /// Output directory (must be empty); defaults to a new run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains on the manifest's train split, or on generated phantoms.
    Train {
        /// Shortcut for `--override data.manifest=PATH`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Reports Dice and HD95 on `data.eval_split`.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<case id>/pred<c>.hwav` volumes, as written by `infer`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Writes probability volumes for one case.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Case id naming the output subdirectory.
        #[arg(long, default_value = "case")]
        id: String,
        /// One volume per input modality, in channel order.
        #[arg(required = true)]
        volumes: Vec<PathBuf>,
    },
    /// Trains the four block configurations (none, tfm, sgc+tfm, hwa+sgc+tfm) and tabulates them.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let g = cli.global;
    let mut overrides = g.overrides.clone();
    let manifest = match &cli.command {
        Command::Train { manifest } | Command::Eval { manifest, .. } | Command::Ablate { manifest } => manifest.clone(),
        _ => None,
    };
    if let Some(m) = &manifest {
        overrides.push(format!("data.manifest={}", toml::Value::String(m.display().to_string())));
    }
    let cfg = RunConfig::load(g.config.as_deref(), &overrides, g.seed)?;
    if let Some(n) = g.device_threads {
        if n == 0 {
            return Err(CliError::Config("--device-threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let base = |name: &str| {
        let mut inv = Invocation::new(name);
        if let Some(c) = &g.config {
            inv = inv.with("config", c.display());
        }
        for o in &g.overrides {
            inv = inv.with("override", o);
        }
        inv
    };
    match &cli.command {
        Command::Phantom { count, out } => {
            let n = count.unwrap_or(cfg.phantom.count);
            let mut inv = base("phantom").with("count", n);
            if let Some(o) = out {
                inv = inv.with("out", o.display());
            }
            cmd_phantom(&cfg, n, out.as_deref(), &inv)
        }
        Command::Train { .. } => cmd_train(&cfg, &base("train")),
        Command::Eval { checkpoint, predictions, .. } => {
            let (source, inv) = match (checkpoint, predictions) {
                (Some(c), _) => (EvalSource::Checkpoint(c.clone()), base("eval").with("checkpoint", c.display())),
                (None, Some(p)) => (EvalSource::Predictions(p.clone()), base("eval").with("predictions", p.display())),
                (None, None) => unreachable!("clap requires one source"),
            };
            cmd_eval(&cfg, &source, &inv)
        }
        Command::Infer { checkpoint, id, volumes } => {
            let mut inv = base("infer").with("checkpoint", checkpoint.display()).with("id", id);
            for v in volumes {
                inv = inv.with("volume", v.display());
            }
            cmd_infer(&cfg, checkpoint, volumes, id, &inv)
        }
        Command::Ablate { .. } => cmd_ablate(&cfg, &base("ablate")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            print!("{}", out.text);
            println!("run_dir {}", out.run_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
