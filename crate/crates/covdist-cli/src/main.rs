use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covdist::estimators::MetricId;
use covdist::harness::{
    estimate_all, load_observations, run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutput, OutputFormat,
};
use covdist::spectral::scm_spectrum;
use covdist::{Error, Result};

/// Consistent estimation of distances between covariance matrices.
#[derive(Parser)]
#[command(name = "covdist", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of Monte Carlo trials (overrides the configuration).
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format; tables default to CSV, `estimate` to JSON.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "COVDIST_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Plug-in, consistent and true distances for one draw or two data files.
    Estimate(EstimateArgs),
    /// True distances, second-order means and covariances for a scenario.
    Asymptotics,
    /// Predicted and empirical probability of correct clustering.
    Clustering,
    /// Fluctuation histograms against the predicted Gaussian law.
    Histogram,
    /// Mean squared error over a grid of sample counts or dimensions.
    Mse,
}

#[derive(Args)]
struct EstimateArgs {
    /// Toeplitz correlation of the first model.
    #[arg(long)]
    rho1: Option<f64>,
    /// Toeplitz correlation of the second model.
    #[arg(long)]
    rho2: Option<f64>,
    /// Dimension.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Sample count of the first set.
    #[arg(long = "N1")]
    n1: Option<usize>,
    /// Sample count of the second set.
    #[arg(long = "N2")]
    n2: Option<usize>,
    /// Metric (eu, kl, le); repeat for several. Defaults to all three.
    #[arg(long = "metric")]
    metrics: Vec<String>,
    /// Observations of the first set, one per line.
    #[arg(long, requires = "data2")]
    data1: Option<PathBuf>,
    /// Observations of the second set, one per line.
    #[arg(long, requires = "data1")]
    data2: Option<PathBuf>,
}

fn load_config(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::new(kind),
    };
    if cfg.kind != kind {
        return Err(Error::Config(format!("configuration is for '{}', not '{kind}'", cfg.kind)));
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if let Some(o) = &common.out {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn parse_metrics(names: &[String]) -> Result<Vec<MetricId>> {
    names.iter().map(|s| s.parse()).collect()
}

fn estimate(common: &Common, args: &EstimateArgs) -> Result<(ExperimentOutput, Option<PathBuf>)> {
    if let (Some(p1), Some(p2)) = (&args.data1, &args.data2) {
        let s1 = scm_spectrum(&load_observations(p1)?)?;
        let s2 = scm_spectrum(&load_observations(p2)?)?;
        let metrics = if args.metrics.is_empty() {
            vec![MetricId::Euclidean, MetricId::KullbackLeibler, MetricId::LogEuclidean]
        } else {
            parse_metrics(&args.metrics)?
        };
        let (table, details) = estimate_all(&s1, &s2, &metrics, None)?;
        let out = ExperimentOutput { kind: ExperimentKind::Estimate, table, details: Some(details) };
        return Ok((out, common.out.clone()));
    }
    let mut cfg = load_config(common, ExperimentKind::Estimate)?;
    if let (Some(a), Some(b)) = (args.rho1, args.rho2) {
        cfg.rho = vec![a, b];
    } else if args.rho1.is_some() || args.rho2.is_some() {
        return Err(Error::Config("--rho1 and --rho2 must be given together".into()));
    }
    if let Some(m) = args.m {
        cfg.m = vec![m];
    }
    match (args.n1, args.n2) {
        (Some(a), Some(b)) => cfg.n = vec![a, b],
        (None, None) => {}
        _ => return Err(Error::Config("--N1 and --N2 must be given together".into())),
    }
    if !args.metrics.is_empty() {
        cfg.metrics = parse_metrics(&args.metrics)?;
    }
    let out = run_experiment(&cfg)?;
    Ok((out, cfg.output.clone()))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.common.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let (out, path) = match &cli.command {
        Command::Estimate(args) => estimate(&cli.common, args)?,
        other => {
            let kind = match other {
                Command::Asymptotics => ExperimentKind::Asymptotics,
                Command::Clustering => ExperimentKind::Clustering,
                Command::Histogram => ExperimentKind::Histogram,
                _ => ExperimentKind::Mse,
            };
            let cfg = load_config(&cli.common, kind)?;
            (run_experiment(&cfg)?, cfg.output.clone())
        }
    };
    let format = match (cli.common.format, out.kind) {
        (Some(Format::Csv), _) => OutputFormat::Csv,
        (Some(Format::Json), _) | (None, ExperimentKind::Estimate) => OutputFormat::Json,
        (None, _) => OutputFormat::Csv,
    };
    let text = out.render(format)?;
    match path {
        Some(p) => std::fs::write(&p, text).map_err(|e| Error::Numerical(format!("writing {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
