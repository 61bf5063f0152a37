use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recast::estimators::EstimatorKind;
use recast::experiment::{
    cmd_report, cmd_sweep, cmd_toy, cmd_train, cmd_weight_hist, exit_code, ExperimentConfig, ToyFamily, ToyRun,
    DEFAULT_HIST_BINS,
};
use recast::Error;

#[derive(Parser)]
#[command(name = "recast", version, args_override_self = true, about = "Bayesian classifier training, mutilation sweeps and calibration reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one estimator on clean images and write `<out-dir>/<estimator>.ckpt`.
    Train(RunArgs),
    /// Mutilate the test subset level by level and score every level.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate; defaults to `<out-dir>/<estimator>.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarise sweep CSVs into a table with one column per estimator.
    Report {
        #[arg(required = true)]
        sweeps: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Histogram the sampled weights of one or more checkpoints.
    WeightHist {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_HIST_BINS)]
        bins: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Compare a sampler with a one-dimensional target of known moments.
    Toy {
        #[arg(long, default_value = "conjugate", value_parser = ["conjugate", "bimodal"])]
        family: String,
        #[arg(long, default_value = "sgld", value_parser = ["sgld", "recast"])]
        estimator: String,
        /// Observations for the conjugate target.
        #[arg(long, default_value_t = 100)]
        observations: usize,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Flags shared by `train` and `sweep`. Each one overrides the matching
/// key of `--config`.
#[derive(Args)]
struct RunArgs {
    /// Line-oriented `key = value` file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["sgd", "sgld", "recast", "mcd", "vi", "ensemble"])]
    estimator: Option<String>,
    #[arg(long, value_parser = ["lenet5", "mlp"])]
    model: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    restart_period: Option<String>,
    #[arg(long)]
    eps_max: Option<String>,
    #[arg(long)]
    eps_min: Option<String>,
    #[arg(long)]
    step_scale: Option<String>,
    #[arg(long, value_parser = ["noise", "rotation"])]
    mutilation: Option<String>,
    #[arg(long)]
    repetitions: Option<String>,
    #[arg(long)]
    train_subset: Option<String>,
    #[arg(long)]
    test_subset: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Retrain from scratch for every sweep repetition.
    #[arg(long)]
    retrain_per_rep: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("estimator", &self.estimator),
            ("model", &self.model),
            ("data_dir", &self.data_dir),
            ("iterations", &self.iterations),
            ("batch_size", &self.batch_size),
            ("restart_period", &self.restart_period),
            ("eps_max", &self.eps_max),
            ("eps_min", &self.eps_min),
            ("step_scale", &self.step_scale),
            ("mutilation", &self.mutilation),
            ("repetitions", &self.repetitions),
            ("train_subset", &self.train_subset),
            ("test_subset", &self.test_subset),
            ("seed", &self.seed),
            ("out_dir", &self.out_dir),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.retrain_per_rep {
            cfg.retrain_per_rep = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.config()?;
            let out = cmd_train(&cfg)?;
            println!("estimator   {}", cfg.estimator);
            println!("iterations  {}", out.iterations);
            println!("final loss  {:.6}", out.final_loss);
            println!("samples     {}", out.samples);
            println!("wall time   {:.2}s", out.wall.as_secs_f64());
            println!("checkpoint  {}", out.checkpoint.display());
        }
        Command::Sweep { run, checkpoint } => {
            let cfg = run.config()?;
            let out = cmd_sweep(&cfg, checkpoint.as_deref())?;
            println!("{} rows written to {}", out.rows.len(), out.csv.display());
            for p in out.plots.iter().chain([&out.reliability]) {
                println!("wrote {}", p.display());
            }
        }
        Command::Report { sweeps, out_dir } => {
            let report = cmd_report(&sweeps, &out_dir)?;
            print!("{}", report.table);
        }
        Command::WeightHist { checkpoints, bins, out_dir } => {
            let hist = cmd_weight_hist(&checkpoints, bins, &out_dir)?;
            for (label, sd) in &hist.std {
                println!("{label:<10} weight std {sd:.6}");
            }
            if hist.degenerate {
                println!("degenerate: every weight has the same value");
            }
            println!("wrote {}", out_dir.join("weights.csv").display());
        }
        Command::Toy { family, estimator, observations, iterations, seed } => {
            let family: ToyFamily = family.parse()?;
            let estimator: EstimatorKind = estimator.parse()?;
            let run = ToyRun { observations, iterations, ..ToyRun::new(family, estimator, seed) };
            let report = cmd_toy(&run)?;
            println!("{report}");
            if !report.pass {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
