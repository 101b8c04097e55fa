//! Experiment execution: repeated seeded runs, metric aggregation and
//! CSV/trace artifacts.

mod config;

pub use config::scenario_from_toml;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use crate::metrics::{ideal_share_series, MetricsAccumulator, MetricsError};
use crate::sim::{self, ControllerKind, Scenario, SimError};
use crate::trace::{ControlTrace, TeeSink, Trace};

/// Forward-looking convergence definition: every one-second bin in a
/// five-second window within 25% of the ideal share.
pub const CONVERGENCE_TOLERANCE: f64 = 0.25;
pub const CONVERGENCE_HOLD_SECS: usize = 5;
/// Post-convergence window for rate variation.
pub const STDDEV_WINDOW_SECS: usize = 60;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config field {field}: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One repeated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Window length for the fairness time series, seconds.
    pub metrics_window: usize,
    pub output_dir: PathBuf,
    pub repeat: usize,
    pub seed_stride: u64,
    /// Store per-packet events in trace files (large) instead of only the
    /// control-plane history.
    pub store_packet_events: bool,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            scenario,
            metrics_window: 1,
            output_dir: output_dir.into(),
            repeat: 1,
            seed_stride: 1,
            store_packet_events: false,
        }
    }
}

/// Per-flow metrics of one run.
#[derive(Debug, Clone)]
pub struct FlowReport {
    pub id: u32,
    pub mean_throughput_pps: f64,
    /// Seconds from the flow's start to convergence, if reached.
    pub convergence_time: Option<f64>,
    /// Rate variation over the 60 s after convergence, if measurable.
    pub rate_stddev_pps: Option<f64>,
    pub loss_rate: f64,
}

/// Metrics of one seeded run.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub seed: u64,
    pub flows: Vec<FlowReport>,
    pub jain_series: Vec<(usize, f64)>,
    pub utilization: f64,
    pub aggregate_loss: f64,
    /// Loss over the second half of the run.
    pub steady_loss: f64,
}

/// Aggregation across repeats.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub runs: Vec<RunMetrics>,
}

impl MetricReport {
    pub fn mean_utilization(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.utilization))
    }

    pub fn mean_flow_throughput(&self, flow: u32) -> f64 {
        mean(
            self.runs
                .iter()
                .flat_map(|r| r.flows.iter())
                .filter(|f| f.id == flow)
                .map(|f| f.mean_throughput_pps),
        )
    }

    pub fn convergence_times(&self, flow: u32) -> Vec<Option<f64>> {
        self.runs
            .iter()
            .flat_map(|r| r.flows.iter())
            .filter(|f| f.id == flow)
            .map(|f| f.convergence_time)
            .collect()
    }

    pub fn stddevs(&self, flow: u32) -> Vec<Option<f64>> {
        self.runs
            .iter()
            .flat_map(|r| r.flows.iter())
            .filter(|f| f.id == flow)
            .map(|f| f.rate_stddev_pps)
            .collect()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn mean_of(values: &[f64]) -> f64 {
    mean(values.iter().copied())
}

/// Runs one scenario and derives its metrics, without touching the
/// filesystem. The trace itself is discarded.
pub fn run_and_measure(scenario: &Scenario) -> Result<RunMetrics, HarnessError> {
    let mut acc = MetricsAccumulator::for_scenario(scenario);
    sim::run_with_sink(scenario, &mut acc)?;
    measure(scenario, &acc)
}

fn measure(scenario: &Scenario, acc: &MetricsAccumulator) -> Result<RunMetrics, HarnessError> {
    measure_with_window(scenario, acc, 1)
}

fn measure_with_window(
    scenario: &Scenario,
    acc: &MetricsAccumulator,
    jain_window: usize,
) -> Result<RunMetrics, HarnessError> {
    let ideals = ideal_share_series(scenario);
    let mut flows = Vec::new();
    for (i, f) in scenario.flows.iter().enumerate() {
        let start = f.start_time.floor() as usize;
        let stop = (f.stop_time.ceil() as usize).min(acc.seconds());
        let mean_tp = acc.mean_throughput(f.id, start, stop)?;
        let conv_abs = acc.convergence_time(
            f.id,
            &ideals[i],
            CONVERGENCE_TOLERANCE,
            CONVERGENCE_HOLD_SECS,
        )?;
        let convergence_time = conv_abs.map(|t| t as f64 - f.start_time);
        let rate_stddev_pps = conv_abs.and_then(|t| {
            let from = t;
            let window = STDDEV_WINDOW_SECS.min(stop.saturating_sub(from));
            if window < 2 {
                return None;
            }
            acc.rate_stddev(f.id, from, window).ok()
        });
        let loss_rate = if acc.total_sent[i] == 0 {
            0.0
        } else {
            acc.total_dropped[i] as f64 / acc.total_sent[i] as f64
        };
        flows.push(FlowReport {
            id: f.id,
            mean_throughput_pps: mean_tp,
            convergence_time,
            rate_stddev_pps,
            loss_rate,
        });
    }
    let half = acc.seconds() / 2;
    Ok(RunMetrics {
        seed: scenario.seed,
        flows,
        jain_series: acc.jain_series(jain_window),
        utilization: acc.utilization(scenario),
        aggregate_loss: acc.aggregate_loss(0, acc.seconds()),
        steady_loss: acc.aggregate_loss(half, acc.seconds()),
    })
}

/// Executes the configured repeats (seed striding), writes one trace file
/// per run plus the metric CSVs, and returns the aggregated report.
/// Repeats run on worker threads; `PCC_WORKERS` overrides the count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricReport, HarnessError> {
    cfg.scenario.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;

    let indices: Vec<usize> = (0..cfg.repeat).collect();
    let results: Mutex<Vec<Option<Result<RunMetrics, HarnessError>>>> =
        Mutex::new((0..cfg.repeat).map(|_| None).collect());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = worker_count(cfg.repeat);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= indices.len() {
                    return;
                }
                let out = run_one(cfg, k);
                results.lock().unwrap()[k] = Some(out);
            });
        }
    });

    let mut runs = Vec::with_capacity(cfg.repeat);
    for slot in results.into_inner().unwrap() {
        runs.push(slot.expect("worker filled every slot")?);
    }
    let report = MetricReport { runs };
    write_csvs(cfg, &report)?;
    Ok(report)
}

fn worker_count(repeats: usize) -> usize {
    let available = std::env::var("PCC_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    available.clamp(1, repeats.max(1))
}

fn run_one(cfg: &ExperimentConfig, k: usize) -> Result<RunMetrics, HarnessError> {
    let mut scenario = cfg.scenario.clone();
    scenario.seed = cfg.scenario.seed.wrapping_add(k as u64 * cfg.seed_stride);
    let mut acc = MetricsAccumulator::for_scenario(&scenario);
    let path = cfg.output_dir.join(format!("run_{k:03}.trace.jsonl"));
    let trace = if cfg.store_packet_events {
        let mut trace = Trace::new();
        let mut tee = TeeSink {
            first: &mut trace,
            second: &mut acc,
        };
        sim::run_with_sink(&scenario, &mut tee)?;
        trace
    } else {
        let mut control = ControlTrace::default();
        let mut tee = TeeSink {
            first: &mut control,
            second: &mut acc,
        };
        sim::run_with_sink(&scenario, &mut tee)?;
        control.trace
    };
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    trace.write_jsonl(&mut w).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    measure_with_window(&scenario, &acc, cfg.metrics_window)
}

/// Recomputes a run's metrics from a stored trace file. Reports are pure
/// functions of the trace, so this reproduces `run_experiment`'s numbers
/// for traces stored with packet events.
pub fn report_from_trace(
    scenario: &Scenario,
    trace_path: &Path,
    jain_window: usize,
) -> Result<RunMetrics, HarnessError> {
    let file = fs::File::open(trace_path).map_err(io_err(trace_path))?;
    let trace = Trace::read_jsonl(std::io::BufReader::new(file)).map_err(io_err(trace_path))?;
    let acc = MetricsAccumulator::from_trace(&trace, scenario);
    measure_with_window(scenario, &acc, jain_window)
}

fn write_csvs(cfg: &ExperimentConfig, report: &MetricReport) -> Result<(), HarnessError> {
    let per_flow = cfg.output_dir.join("per_flow.csv");
    let mut w = BufWriter::new(fs::File::create(&per_flow).map_err(io_err(&per_flow))?);
    writeln!(
        w,
        "run,seed,flow,mean_throughput_pps,mean_throughput_mbps,convergence_time_s,rate_stddev_pps,loss_rate"
    )
    .map_err(io_err(&per_flow))?;
    for (k, run) in report.runs.iter().enumerate() {
        for f in &run.flows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                k,
                run.seed,
                f.id,
                f.mean_throughput_pps,
                f.mean_throughput_pps * 8.0 * cfg.scenario.packet_size as f64 / 1e6,
                f.convergence_time.map_or(String::new(), |v| v.to_string()),
                f.rate_stddev_pps.map_or(String::new(), |v| v.to_string()),
                f.loss_rate,
            )
            .map_err(io_err(&per_flow))?;
        }
    }
    w.flush().map_err(io_err(&per_flow))?;

    let jain = cfg.output_dir.join("jain.csv");
    let mut w = BufWriter::new(fs::File::create(&jain).map_err(io_err(&jain))?);
    writeln!(w, "run,window_start_s,jain_index").map_err(io_err(&jain))?;
    for (k, run) in report.runs.iter().enumerate() {
        for (start, j) in &run.jain_series {
            writeln!(w, "{k},{start},{j}").map_err(io_err(&jain))?;
        }
    }
    w.flush().map_err(io_err(&jain))?;

    let summary = cfg.output_dir.join("summary.csv");
    let mut w = BufWriter::new(fs::File::create(&summary).map_err(io_err(&summary))?);
    writeln!(w, "run,seed,utilization,aggregate_loss,steady_loss").map_err(io_err(&summary))?;
    for (k, run) in report.runs.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{}",
            k, run.seed, run.utilization, run.aggregate_loss, run.steady_loss
        )
        .map_err(io_err(&summary))?;
    }
    w.flush().map_err(io_err(&summary))?;
    Ok(())
}

/// One cell of the stability/reactiveness sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub tm_multiplier: f64,
    pub epsilon_min: f64,
    pub rct_pairs: usize,
    /// Mean convergence time of the late flow across converged runs.
    pub mean_convergence_s: f64,
    /// Mean post-convergence throughput deviation of the late flow.
    pub mean_stddev_pps: f64,
    pub runs_converged: usize,
    pub runs_total: usize,
}

/// Sweeps interval length and step size, with and without paired trials.
/// The scenario's last-starting flow is the measured one. Rows come out in
/// grid order: for each `T_m`, for each epsilon, trials 2 then 1.
pub fn tradeoff_sweep(
    base: &ExperimentConfig,
    tm_multipliers: &[f64],
    epsilons: &[f64],
) -> Result<Vec<SweepRow>, HarnessError> {
    let mut rows = Vec::new();
    for &tm in tm_multipliers {
        for &eps in epsilons {
            for rct_pairs in [2usize, 1] {
                let mut cfg = base.clone();
                cfg.output_dir = base
                    .output_dir
                    .join(format!("tm{:.2}_eps{:.3}_rct{}", tm, eps, rct_pairs));
                for flow in &mut cfg.scenario.flows {
                    if let ControllerKind::Pcc(pcc) = &mut flow.controller {
                        let rtt = pcc.mi_schedule.rtt_estimate;
                        // A strictly fixed interval length would lock
                        // competing flows' interval boundaries in phase;
                        // keep a tenth of the multiplier as jitter.
                        pcc.mi_schedule =
                            crate::monitor::MiSchedule::with_multipliers(rtt, tm, tm * 1.1)
                                .map_err(|e| HarnessError::Config {
                                    field: "tm_multipliers".into(),
                                    msg: e.to_string(),
                                })?;
                        pcc.epsilon_min = eps;
                        pcc.epsilon_max = pcc.epsilon_max.max(eps);
                        pcc.rct_pairs = rct_pairs;
                    }
                }
                let report = run_experiment(&cfg)?;
                let late_flow = cfg
                    .scenario
                    .flows
                    .iter()
                    .max_by(|a, b| a.start_time.total_cmp(&b.start_time))
                    .expect("scenario has flows")
                    .id;
                let conv: Vec<f64> = report
                    .convergence_times(late_flow)
                    .into_iter()
                    .flatten()
                    .collect();
                let stds: Vec<f64> = report.stddevs(late_flow).into_iter().flatten().collect();
                rows.push(SweepRow {
                    tm_multiplier: tm,
                    epsilon_min: eps,
                    rct_pairs,
                    mean_convergence_s: mean_of(&conv),
                    mean_stddev_pps: mean_of(&stds),
                    runs_converged: conv.len(),
                    runs_total: report.runs.len(),
                });
            }
        }
    }
    write_sweep_csv(&base.output_dir, &rows)?;
    Ok(rows)
}

fn write_sweep_csv(dir: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("sweep.csv");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    writeln!(
        w,
        "tm_multiplier,epsilon_min,rct_pairs,mean_convergence_s,mean_stddev_pps,runs_converged,runs_total"
    )
    .map_err(io_err(&path))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.tm_multiplier,
            r.epsilon_min,
            r.rct_pairs,
            r.mean_convergence_s,
            r.mean_stddev_pps,
            r.runs_converged,
            r.runs_total
        )
        .map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))
}
