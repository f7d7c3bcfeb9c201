//! The `train`, `sample`, `eval`, `vlab` and `inspect` commands.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use jkoflow_core::datasets::{self, DatasetKind, DatasetSpec};
use jkoflow_core::flow::FlowMetadata;
use jkoflow_core::mmd::{self, BandwidthRule, MmdConfig};
use jkoflow_core::objective::Batch;
use jkoflow_core::trainer::{self, BlockTrainReport, EpochRecord, TrainObserver};
use jkoflow_core::trajectory::{self, LabConfig, ProxTrajectory, TrajectoryStats};
use jkoflow_core::{rng, DataProvider, FlowNetwork, Mat};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::{load_csv, samples_csv, scatter_svg, trajectory_svg, write_atomic};

pub const CHECKPOINT_FILE: &str = "flow.jkf";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const BLOCKS_FILE: &str = "blocks.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

/// Streams per-epoch and per-block records to CSV as training runs, so a
/// failed run still leaves its log behind.
struct CsvLog {
    epochs: BufWriter<File>,
    blocks: BufWriter<File>,
    epochs_path: PathBuf,
    blocks_path: PathBuf,
    pass: usize,
    start: std::time::Instant,
    error: Option<CliError>,
}

impl CsvLog {
    fn create(dir: &Path) -> CliResult<Self> {
        let open = |p: &Path, header: &str| -> CliResult<BufWriter<File>> {
            let mut w = BufWriter::new(File::create(p).map_err(|e| CliError::io(p, e))?);
            writeln!(w, "{header}").map_err(|e| CliError::io(p, e))?;
            Ok(w)
        };
        let epochs_path = dir.join(EPOCHS_FILE);
        let blocks_path = dir.join(BLOCKS_FILE);
        Ok(CsvLog {
            epochs: open(&epochs_path, "pass,block,epoch,kl_term,w2_term,total,ratio")?,
            blocks: open(&blocks_path, "pass,block,free,h,kl_term,w2_term,total,termination_ratio,epochs,seconds")?,
            epochs_path,
            blocks_path,
            pass: 0,
            start: std::time::Instant::now(),
            error: None,
        })
    }

    fn record(&mut self, r: std::io::Result<()>, path: PathBuf) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(CliError::io(&path, e));
        }
    }

    fn finish(mut self) -> CliResult<()> {
        let r = self.epochs.flush();
        self.record(r, self.epochs_path.clone());
        let r = self.blocks.flush();
        self.record(r, self.blocks_path.clone());
        self.error.map_or(Ok(()), Err)
    }
}

impl TrainObserver for CsvLog {
    fn now(&self) -> Option<f64> {
        Some(self.start.elapsed().as_secs_f64())
    }

    fn on_epoch(&mut self, r: &EpochRecord) {
        self.pass = r.pass;
        let l = &r.loss;
        let res = writeln!(
            self.epochs,
            "{},{},{},{},{},{},{}",
            r.pass, r.block, r.epoch, l.kl_term, l.w2_term, l.total, r.ratio
        );
        self.record(res, self.epochs_path.clone());
    }

    fn on_block(&mut self, r: &BlockTrainReport) {
        let l = &r.final_loss;
        let res = writeln!(
            self.blocks,
            "{},{},{},{},{},{},{},{},{},{}",
            self.pass,
            r.block,
            u8::from(r.free),
            r.h,
            l.kl_term,
            l.w2_term,
            l.total,
            r.termination_ratio,
            r.epochs,
            r.wall_time.map_or(String::new(), |t| format!("{t:.3}"))
        )
        .and_then(|_| self.blocks.flush())
        .and_then(|_| self.epochs.flush());
        self.record(res, self.blocks_path.clone());
        log::info!(
            "pass {} block {}{} h={:.4} loss={:.4} ratio={:.3e}",
            self.pass,
            r.block,
            if r.free { " (free)" } else { "" },
            r.h,
            l.total,
            r.termination_ratio
        );
    }
}

fn trajectory_rows(out: &mut String, stage: &str, stats: &[TrajectoryStats]) {
    for s in stats {
        for (k, (m, h)) in s.movements.iter().zip(&s.steps).enumerate() {
            let _ = writeln!(out, "{stage},{},{},{},{},{}", s.iter, k, m, h, s.cv());
        }
    }
}

/// Training data for a config.
pub fn data_provider(cfg: &RunConfig) -> CliResult<DataProvider> {
    Ok(match cfg.data_source()? {
        DataSource::Toy(spec) => DataProvider::generator(spec, cfg.data.n_samples),
        DataSource::Csv {
            path,
            delimiter,
            has_header,
        } => {
            let t = load_csv(&path, delimiter, has_header)?;
            DataProvider::Fixed(Batch { x: t.x, labels: t.labels })
        }
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub flow: FlowNetwork,
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Per-iteration movements of the coarse reparameterization, then of the
    /// refined one.
    pub coarse: Vec<TrajectoryStats>,
    pub refined: Vec<TrajectoryStats>,
}

/// Trains a flow as configured, then runs the configured reparameterization
/// and refinement passes, and writes the checkpoint and logs.
pub fn cmd_train(config_path: &Path) -> CliResult<TrainOutcome> {
    let cfg = RunConfig::load(config_path)?;
    train_with(&cfg)
}

pub fn train_with(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let provider = data_provider(cfg)?;
    let dim = provider.dim();
    let arch = cfg.arch(dim);
    let potential = cfg.potential(dim)?;
    let tc = cfg.train_config(dim);
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut log = CsvLog::create(&dir)?;

    let result = (|| -> CliResult<(FlowNetwork, String, Vec<TrajectoryStats>, Vec<TrajectoryStats>)> {
        let (mut flow, report) = trainer::train_flow(&provider, &arch, &potential, &tc, &mut log)?;
        log::info!("trained {} blocks{}", report.blocks.len(), if report.unterminated { ", unterminated" } else { "" });
        let mut traj = String::from("stage,iter,block,movement,h,cv\n");
        let t = &cfg.trajectory;
        let mut coarse = Vec::new();
        let mut refined = Vec::new();
        if t.reparam_iters > 0 {
            coarse = trajectory::reparameterize_flow(&mut flow, &provider, &tc, &cfg.reparam_config(t.reparam_iters), 0, &mut log)?;
            trajectory_rows(&mut traj, "coarse", &coarse);
        } else if !flow.blocks.is_empty() {
            let reference = provider.reference_batch(&flow.standardizer, t.reference_size, tc.seed)?;
            let s = trajectory::flow_movements(&flow, &reference.x)?;
            let stats = TrajectoryStats {
                iter: 0,
                movements: s,
                steps: flow.steps(),
            };
            trajectory_rows(&mut traj, "coarse", core::slice::from_ref(&stats));
            coarse.push(stats);
        }
        if t.refine {
            let pass0 = t.reparam_iters + 1;
            let (fine, stats) =
                trajectory::refine_flow(&flow, &provider, &tc, &cfg.reparam_config(t.refined_iters), pass0, &mut log)?;
            trajectory_rows(&mut traj, "refined", &stats);
            refined = stats;
            flow = fine;
        }
        flow.metadata = FlowMetadata {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            unterminated: report.unterminated,
        };
        Ok((flow, traj, coarse, refined))
    })();
    let logged = log.finish();
    let (flow, traj, coarse, refined) = result?;
    logged?;

    write_atomic(&dir.join(TRAJECTORY_FILE), traj.as_bytes())?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &flow)?;
    Ok(TrainOutcome {
        flow,
        output_dir: dir,
        checkpoint,
        coarse,
        refined,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub svg: Option<PathBuf>,
    /// Mixture component to sample from.
    pub class: Option<usize>,
}

/// Writes `n` generated samples as CSV, and a scatter plot when asked.
pub fn cmd_sample(a: &SampleArgs) -> CliResult<Mat> {
    let flow = load_checkpoint(&a.checkpoint)?;
    let labels = a.class.map(|c| vec![c; a.n]);
    let x = flow.sample(a.n, labels.as_deref(), a.seed)?;
    write_atomic(&a.out, samples_csv(&x, labels.as_deref()).as_bytes())?;
    if let Some(svg) = &a.svg {
        write_atomic(svg, scatter_svg(&x, labels.as_deref()).as_bytes())?;
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Nll,
    Mmd,
    Inversion,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Nll => "nll",
            Metric::Mmd => "mmd",
            Metric::Inversion => "inversion",
        }
    }
}

/// Evaluation data: a toy generator or a CSV file.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalData {
    Toy(DatasetSpec),
    Csv(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: EvalData,
    pub metrics: Vec<Metric>,
    /// Test points drawn from a generator; a CSV file is used whole.
    pub n_test: usize,
    pub n_generated: usize,
    pub bandwidth_scale: f64,
    pub n_bootstrap: usize,
    pub alpha: f64,
    pub inversion_points: usize,
    pub inversion_tol: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    pub fn new(checkpoint: PathBuf, data: EvalData, metrics: Vec<Metric>) -> Self {
        EvalArgs {
            checkpoint,
            data,
            metrics,
            n_test: 8000,
            n_generated: 10_000,
            bandwidth_scale: 0.1,
            n_bootstrap: 1000,
            alpha: 0.05,
            inversion_points: 1000,
            inversion_tol: 1e-4,
            seed: 1,
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: Metric,
    pub value: f64,
    pub threshold: Option<f64>,
    pub pass: Option<bool>,
    /// Extra `key: value` lines for the text report.
    pub details: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("metric,value,threshold,pass\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.metric.name(),
                r.value,
                r.threshold.map_or(String::new(), |t| t.to_string()),
                r.pass.map_or(String::new(), |p| p.to_string())
            );
        }
        s
    }

    /// Flat `key: value` lines.
    pub fn text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let m = r.metric.name();
            let _ = writeln!(s, "{m}: {}", r.value);
            if let Some(t) = r.threshold {
                let _ = writeln!(s, "{m}_threshold: {t}");
            }
            if let Some(p) = r.pass {
                let _ = writeln!(s, "{m}_pass: {p}");
            }
            for (k, v) in &r.details {
                let _ = writeln!(s, "{m}_{k}: {v}");
            }
        }
        s
    }

    pub fn get(&self, m: Metric) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == m)
    }
}

fn eval_batch(a: &EvalArgs) -> CliResult<Batch> {
    match &a.data {
        EvalData::Toy(spec) => Ok(datasets::generate_seeded(spec, a.n_test, rng::derive_seed(a.seed, &[0x7465_7374]))?),
        EvalData::Csv(path) => {
            let t = load_csv(path, b',', true)?;
            Ok(Batch { x: t.x, labels: t.labels })
        }
    }
}

/// Runs the selected metrics on held-out data.
pub fn cmd_eval(a: &EvalArgs) -> CliResult<EvalReport> {
    let flow = load_checkpoint(&a.checkpoint)?;
    let test = eval_batch(a)?;
    let mut rows = Vec::new();
    for &m in &a.metrics {
        rows.push(match m {
            Metric::Nll => MetricRow {
                metric: m,
                value: flow.nll_mean(&test)?,
                threshold: None,
                pass: None,
                details: vec![("n".into(), test.len().to_string())],
            },
            Metric::Mmd => {
                let cfg = MmdConfig {
                    bandwidth: BandwidthRule::ScaledMedian(a.bandwidth_scale),
                    n_bootstrap: a.n_bootstrap,
                    alpha: a.alpha,
                    seed: a.seed,
                    ..MmdConfig::default()
                };
                let r = mmd::evaluate_generation(&flow, &test.x, a.n_generated, &cfg)?;
                MetricRow {
                    metric: m,
                    value: r.mmd2,
                    threshold: Some(r.tau),
                    pass: Some(!r.reject),
                    details: vec![
                        ("bandwidth".into(), r.bandwidth.to_string()),
                        ("n".into(), r.n.to_string()),
                        ("m".into(), r.m.to_string()),
                    ],
                }
            }
            Metric::Inversion => {
                let k = a.inversion_points.min(test.len());
                let v = flow.inversion_error(&test.x.row_range(0, k))?;
                MetricRow {
                    metric: m,
                    value: v,
                    threshold: Some(a.inversion_tol),
                    pass: Some(v < a.inversion_tol),
                    details: vec![("n".into(), k.to_string())],
                }
            }
        });
    }
    let report = EvalReport { rows };
    if let Some(out) = &a.out {
        write_atomic(out, report.csv().as_bytes())?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VlabArgs {
    pub lab: LabConfig,
    pub out_dir: PathBuf,
}

/// Lab defaults for a potential name, `None` if the name is unknown.
pub fn lab_defaults(name: &str) -> Option<LabConfig> {
    match name {
        "quadratic" => Some(LabConfig::quadratic()),
        "mueller_brown" | "mueller-brown" | "muller" => Some(LabConfig::mueller_brown()),
        _ => None,
    }
}

/// `iter,k,x0,…,movement,h` rows for every iteration; `k = 0` is the fixed
/// start, and a last row with `k = free` holds the free endpoint.
pub fn lab_csv(t: &ProxTrajectory) -> String {
    let d = t.points.first().map_or(0, Vec::len);
    let coords: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let mut s = format!("iter,k,{},movement,h\n", coords.join(","));
    let join = |p: &[f64]| p.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    for it in &t.history {
        for (k, p) in it.points.iter().enumerate() {
            let (m, h) = if k == 0 {
                (String::new(), String::new())
            } else {
                (it.stats.movements[k - 1].to_string(), it.stats.steps[k - 1].to_string())
            };
            let _ = writeln!(s, "{},{k},{},{m},{h}", it.stats.iter, join(p));
        }
    }
    let last = t.history.last().map_or(0, |h| h.stats.iter);
    let _ = writeln!(s, "{last},free,{},,", join(&t.free_endpoint));
    s
}

pub fn cmd_vlab(a: &VlabArgs) -> CliResult<ProxTrajectory> {
    let t = trajectory::prox_trajectory_lab(&a.lab)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    write_atomic(&a.out_dir.join(TRAJECTORY_FILE), lab_csv(&t).as_bytes())?;
    let plane = |p: &Vec<f64>| [p[0], p.get(1).copied().unwrap_or(0.0)];
    let pts: Vec<[f64; 2]> = t.points.iter().map(plane).collect();
    write_atomic(
        &a.out_dir.join("trajectory.svg"),
        trajectory_svg(&pts, plane(&t.free_endpoint)).as_bytes(),
    )?;
    Ok(t)
}

/// Checkpoint metadata as `key: value` lines.
pub fn cmd_inspect(checkpoint: &Path) -> CliResult<String> {
    let f = load_checkpoint(checkpoint)?;
    let mut s = String::new();
    let _ = writeln!(s, "dim: {}", f.dim());
    let _ = writeln!(s, "hidden_widths: {:?}", f.arch.hidden_widths);
    let _ = writeln!(s, "softplus_beta: {}", f.arch.beta);
    let _ = writeln!(s, "parameters_per_block: {}", f.arch.param_count());
    let _ = writeln!(s, "blocks: {}", f.blocks.len());
    let _ = writeln!(s, "free_block: {}", f.free_block.is_some());
    let steps: Vec<String> = f.steps().iter().map(|h| format!("{h:.6}")).collect();
    let _ = writeln!(s, "steps: [{}]", steps.join(", "));
    let _ = writeln!(s, "t_end: {}", f.t_end());
    let _ = writeln!(s, "substeps: {}", f.integrator.substeps);
    let _ = writeln!(s, "divergence: {:?}", f.integrator.divergence_mode);
    let _ = writeln!(
        s,
        "potential: {}",
        if f.potential.is_mixture() { "gaussian_mixture" } else { "standard_gaussian" }
    );
    let _ = writeln!(s, "standardizer_fitted_on: {}", f.standardizer.fitted_on);
    let _ = writeln!(s, "seed: {}", f.metadata.seed);
    let _ = writeln!(s, "config_hash: {:016x}", f.metadata.config_hash);
    let _ = writeln!(s, "unterminated: {}", f.metadata.unterminated);
    Ok(s)
}

/// A toy dataset by name, with optional noise override.
pub fn toy_spec(name: &str, noise: Option<f64>, labeled: bool) -> CliResult<DatasetSpec> {
    let kind: DatasetKind = name.parse().map_err(|e: jkoflow_core::Error| CliError::Config(e.to_string()))?;
    let spec = DatasetSpec { kind, noise, labeled };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

