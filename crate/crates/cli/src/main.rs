use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use jkoflow::commands::{self, EvalArgs, EvalData, Metric, SampleArgs, VlabArgs};
use jkoflow::config::{DataSource, RunConfig};
use jkoflow::{CliError, CliResult};

/// Block-wise JKO normalizing flows.
///
/// Exit codes: 0 success, 2 configuration or usage error, 3 numeric fault,
/// 4 I/O or checkpoint fault. `JKOFLOW_LOG` sets the log level (default
/// `info`), `JKOFLOW_OUTPUT_ROOT` prefixes relative output directories.
#[derive(Parser, Debug)]
#[command(name = "jkoflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a flow from a TOML run configuration.
    Train {
        config: PathBuf,
    },
    /// Draw samples from a trained flow.
    Sample {
        checkpoint: PathBuf,
        #[arg(short, long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write a scatter plot.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Mixture component to condition on.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Evaluate a trained flow on held-out data.
    ///
    /// With `--config`, the run's `[eval]` section supplies the defaults and
    /// its `[data]` section the test data; flags override both.
    Eval {
        checkpoint: PathBuf,
        /// Toy dataset to draw test points from.
        #[arg(long, conflicts_with = "csv")]
        dataset: Option<String>,
        #[arg(long)]
        noise: Option<f64>,
        /// Test points from a CSV file with a header row.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Run configuration the checkpoint was trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "nll,mmd,inversion")]
        metrics: Vec<MetricArg>,
        /// Default 8000.
        #[arg(long)]
        n_test: Option<usize>,
        /// Default 10000.
        #[arg(long)]
        n_generated: Option<usize>,
        /// MMD bandwidth as a multiple of the median distance. Default 0.1.
        #[arg(long)]
        bandwidth_scale: Option<f64>,
        /// Default 1000.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Default 0.05.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Report CSV.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Proximal-point trajectory lab on an analytic potential.
    Vlab {
        /// `quadratic` or `mueller_brown`.
        #[arg(long)]
        potential: String,
        /// Starting point, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        /// Number of steps L.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        h0: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        h_max: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        /// Reparameterization iterations before refinement.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        no_refine: bool,
        /// Iterations after refinement.
        #[arg(long)]
        refined_iters: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print checkpoint metadata.
    Inspect {
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Nll,
    Mmd,
    Inversion,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config } => {
            let o = commands::cmd_train(&config)?;
            println!("blocks: {}", o.flow.blocks.len());
            println!("free_block: {}", o.flow.free_block.is_some());
            println!("unterminated: {}", o.flow.metadata.unterminated);
            println!("checkpoint: {}", o.checkpoint.display());
        }
        Command::Sample {
            checkpoint,
            n,
            seed,
            out,
            svg,
            class,
        } => {
            commands::cmd_sample(&SampleArgs {
                checkpoint,
                n,
                seed,
                out,
                svg,
                class,
            })?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            noise,
            csv,
            config,
            metrics,
            n_test,
            n_generated,
            bandwidth_scale,
            bootstrap,
            alpha,
            seed,
            out,
        } => {
            let run = config.as_deref().map(RunConfig::load).transpose()?;
            let data = match (dataset, csv, &run) {
                (Some(name), _, _) => EvalData::Toy(commands::toy_spec(&name, noise, false)?),
                (None, Some(p), _) => EvalData::Csv(p),
                (None, None, Some(r)) => match r.data_source()? {
                    DataSource::Toy(spec) => EvalData::Toy(spec),
                    DataSource::Csv { path, .. } => EvalData::Csv(path),
                },
                (None, None, None) => {
                    return Err(CliError::Config("one of --dataset, --csv or --config is required".into()))
                }
            };
            let mut metrics: Vec<Metric> = metrics
                .into_iter()
                .map(|m| match m {
                    MetricArg::Nll => Metric::Nll,
                    MetricArg::Mmd => Metric::Mmd,
                    MetricArg::Inversion => Metric::Inversion,
                })
                .collect();
            metrics.dedup();
            let mut args = EvalArgs::new(checkpoint, data, metrics);
            if let Some(r) = &run {
                let e = &r.eval;
                args.n_test = e.n_test;
                args.n_generated = e.n_generated;
                args.bandwidth_scale = e.bandwidth_scale;
                args.n_bootstrap = e.n_bootstrap;
                args.alpha = e.alpha;
                args.inversion_points = e.inversion_points;
            }
            args.n_test = n_test.unwrap_or(args.n_test);
            args.n_generated = n_generated.unwrap_or(args.n_generated);
            args.bandwidth_scale = bandwidth_scale.unwrap_or(args.bandwidth_scale);
            args.n_bootstrap = bootstrap.unwrap_or(args.n_bootstrap);
            args.alpha = alpha.unwrap_or(args.alpha);
            args.seed = seed;
            args.out = out;
            print!("{}", commands::cmd_eval(&args)?.text());
        }
        Command::Vlab {
            potential,
            x0,
            steps,
            h0,
            rho,
            h_max,
            eta,
            iters,
            no_refine,
            refined_iters,
            out,
        } => {
            let mut lab = commands::lab_defaults(&potential).ok_or_else(|| {
                CliError::Config(format!("unknown potential `{potential}` (expected quadratic or mueller_brown)"))
            })?;
            if let Some(x) = x0 {
                lab.x0 = x;
            }
            if steps.is_some() || h0.is_some() || rho.is_some() {
                let l = steps.unwrap_or(lab.steps.len());
                let h = h0.unwrap_or(lab.steps[0]);
                let r = rho.unwrap_or(if lab.steps.len() > 1 { lab.steps[1] / lab.steps[0] } else { 1.2 });
                lab.steps = (0..l).map(|k| h * r.powi(k as i32)).collect();
            }
            if let Some(v) = h_max {
                lab.h_max = v;
            }
            lab.steps.iter_mut().for_each(|h| *h = h.min(lab.h_max));
            if let Some(v) = eta {
                lab.eta = v;
            }
            if let Some(v) = iters {
                lab.reparam_iters = v;
            }
            if no_refine {
                lab.refine = false;
            }
            if let Some(v) = refined_iters {
                lab.refined_iters = v;
            }
            let t = commands::cmd_vlab(&VlabArgs { lab, out_dir: out })?;
            let fmt = |p: &[f64]| p.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ");
            println!("points: {}", t.points.len());
            println!("last_point: [{}]", fmt(t.points.last().expect("x0")));
            println!("free_endpoint: [{}]", fmt(&t.free_endpoint));
            println!("final_cv: {}", t.history.last().map_or(0.0, |h| h.stats.cv()));
            println!("converged: {}", t.converged);
        }
        Command::Inspect { checkpoint } => print!("{}", commands::cmd_inspect(&checkpoint)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("JKOFLOW_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
