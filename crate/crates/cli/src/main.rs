use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cascade_cal::harness::{
    read_results_csv, run_experiment_detailed, run_sweep_detailed, summarize, trial_splits,
    write_diagnostics_csv, write_results_csv, write_summary_csv, ExperimentConfig, KClusters,
    Method, SweepAxis,
};
use cascade_cal::models::{write_dataset_csv, MapInit};
use cascade_cal::{Error, QuantileMode, Result};

#[derive(Parser)]
#[command(name = "cascal", version, about = "Conformal calibration experiments for cascaded predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the five data splits of one trial as CSV files.
    Simulate {
        #[command(flatten)]
        opts: ConfigArgs,
        /// Trial whose splits are written.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Run the experiment and write one row per trial, method and level.
    Run {
        #[command(flatten)]
        opts: ConfigArgs,
    },
    /// Repeat the experiment over values of one parameter.
    Sweep {
        #[command(flatten)]
        opts: ConfigArgs,
        /// noise_std, noise_mean, data_size or k_clusters.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Summarize a results CSV into mean and standard deviation per group.
    Report {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags mirror the config keys and take precedence over the config file.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_cal_upstream: Option<usize>,
    #[arg(long)]
    n_cal_downstream: Option<usize>,
    #[arg(long)]
    n_cal_end2end: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    noise_mean: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    k_clusters: Option<KClusters>,
    #[arg(long)]
    quantile_mode: Option<QuantileMode>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    intermediate_dim: Option<usize>,
    #[arg(long)]
    nonlinear: bool,
    /// Oracle map entries: uniform or gaussian.
    #[arg(long)]
    map_init: Option<MapInit>,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    max_features: Option<usize>,
    #[arg(long)]
    aci_gamma: Option<f64>,
    /// 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

macro_rules! override_fields {
    ($cfg:ident, $args:ident, $($f:ident),*) => {
        $(if let Some(v) = $args.$f { $cfg.$f = v; })*
    };
}

impl ConfigArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => ExperimentConfig::default(),
        };
        let a = self;
        override_fields!(
            cfg, a, seed, trials, n_train, n_cal_upstream, n_cal_downstream, n_cal_end2end,
            n_test, alphas, noise_mean, noise_std, methods, k_clusters, quantile_mode,
            input_dim, intermediate_dim, map_init, n_trees, min_leaf, aci_gamma, workers
        );
        if a.nonlinear {
            cfg.nonlinear = true;
        }
        if a.max_features.is_some() {
            cfg.max_features = a.max_features;
        }
        if a.out.is_some() {
            cfg.out = a.out;
        }
        if a.diagnostics.is_some() {
            cfg.diagnostics = a.diagnostics;
        }
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { opts, trial } => {
            let cfg = opts.resolve()?;
            cfg.validate()?;
            if trial >= cfg.trials {
                return Err(Error::Config(format!(
                    "trial {trial} out of range for {} trials",
                    cfg.trials
                )));
            }
            let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            for (name, ds) in trial_splits(&cfg, trial)?.named() {
                let mut w = create(&dir.join(format!("{name}.csv")))?;
                write_dataset_csv(ds, &mut w)?;
                w.flush()?;
            }
        }
        Command::Run { opts } => {
            let cfg = opts.resolve()?;
            let out = run_experiment_detailed(&cfg)?;
            emit(&cfg, &out)?;
        }
        Command::Sweep { opts, axis, values } => {
            let cfg = opts.resolve()?;
            let out = run_sweep_detailed(&cfg, axis, &values)?;
            emit(&cfg, &out)?;
        }
        Command::Report { input, out } => {
            let rows = read_results_csv(File::open(&input)?)?;
            let mut w = sink(out.as_deref())?;
            write_summary_csv(&summarize(&rows), &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn emit(cfg: &ExperimentConfig, out: &cascade_cal::harness::ExperimentOutput) -> Result<()> {
    let mut w = sink(cfg.out.as_deref())?;
    write_results_csv(&out.results, &mut w)?;
    w.flush()?;
    if let Some(p) = &cfg.diagnostics {
        let mut d = create(p)?;
        write_diagnostics_csv(&out.diagnostics, &mut d)?;
        d.flush()?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Csv(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
