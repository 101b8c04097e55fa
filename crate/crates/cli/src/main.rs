//! `pcc`: run simulated congestion-control experiments, sweep the
//! stability/reactiveness tradeoff, solve the rate game, and recompute
//! reports from stored traces.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pcc_core::equilibrium::{find_equilibrium, run_dynamics, seeded_starts, EquilibriumOptions};
use pcc_core::harness::{
    report_from_trace, run_experiment, scenario_from_toml, tradeoff_sweep, ExperimentConfig,
    RunMetrics,
};
use pcc_core::sim::Scenario;
use pcc_core::utility::{min_alpha, GameModel, Rate};

#[derive(Parser)]
#[command(
    name = "pcc",
    about = "Utility-driven rate control on a simulated bottleneck",
    long_about = "Runs deterministic packet-level experiments described by TOML scenario \
                  files, computes fairness/convergence/stability metrics, and numerically \
                  solves the underlying rate game.\n\nRepeats run in parallel; set \
                  PCC_WORKERS to override the worker count."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (optionally repeated with strided seeds) and write
    /// traces plus metric CSVs.
    Run(RunArgs),
    /// Sweep interval length and step size with paired trials on and off.
    Sweep(SweepArgs),
    /// Solve the rate game and optionally run the update dynamics.
    Equilibrium(EquilibriumArgs),
    /// Recompute a run's metrics from a stored trace file.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repeats (seed striding).
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Seed increment between repeats.
    #[arg(long, default_value_t = 1)]
    stride: u64,
    /// Output directory for traces and CSVs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Window length for the fairness time series, seconds.
    #[arg(long, default_value_t = 1)]
    window: usize,
    /// Store per-packet events in trace files (large).
    #[arg(long)]
    packet_events: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario TOML file; its last-starting flow is the measured one.
    #[arg(long)]
    scenario: PathBuf,
    /// Interval lengths as RTT multiples, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4.8,2.4,1.0")]
    tm: Vec<f64>,
    /// Step sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.03,0.05")]
    eps: Vec<f64>,
    #[arg(long, default_value_t = 15)]
    repeat: usize,
    #[arg(long, default_value = "sweep_out")]
    out: PathBuf,
}

#[derive(Args)]
struct EquilibriumArgs {
    /// Sender counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    senders: Vec<usize>,
    /// Bottleneck capacity, packets per second.
    #[arg(long, default_value_t = 100.0)]
    capacity: f64,
    /// Sigmoid steepness; defaults to the fairness threshold for n.
    #[arg(long)]
    alpha: Option<f64>,
    /// Trial step of the update dynamics.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Grid resolution; defaults to capacity / 10^4.
    #[arg(long)]
    grid: Option<f64>,
    /// Steps of synchronous dynamics per trajectory (0 skips dynamics).
    #[arg(long, default_value_t = 10_000)]
    dynamics: usize,
    /// Seeded random starting vectors per sender count.
    #[arg(long, default_value_t = 20)]
    starts: usize,
    /// Seed for the starting vectors.
    #[arg(long, default_value_t = 0x5EED)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Scenario TOML file the trace was produced from.
    #[arg(long)]
    scenario: PathBuf,
    /// Trace file (JSON lines).
    #[arg(long)]
    trace: PathBuf,
    /// Window length for the fairness time series, seconds.
    #[arg(long, default_value_t = 1)]
    window: usize,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Equilibrium(a) => equilibrium(a),
        Command::Report(a) => report(a),
    }
}

fn load_scenario(path: &PathBuf, seed: Option<u64>) -> Result<Scenario> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
    let mut scenario = scenario_from_toml(&text)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

fn print_run(run: &RunMetrics, packet_size: u32) {
    println!(
        "seed {}: utilization {:.4}, aggregate loss {:.4}, steady loss {:.4}",
        run.seed, run.utilization, run.aggregate_loss, run.steady_loss
    );
    for f in &run.flows {
        println!(
            "  flow {}: {:.1} pkt/s ({:.2} Mbit/s), convergence {}, stddev {}, loss {:.4}",
            f.id,
            f.mean_throughput_pps,
            f.mean_throughput_pps * 8.0 * packet_size as f64 / 1e6,
            f.convergence_time
                .map_or("-".into(), |v| format!("{v:.0} s")),
            f.rate_stddev_pps
                .map_or("-".into(), |v| format!("{v:.1} pkt/s")),
            f.loss_rate
        );
    }
}

fn run(a: RunArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario, a.seed)?;
    let packet_size = scenario.packet_size;
    let mut cfg = ExperimentConfig::new(scenario, &a.out);
    cfg.repeat = a.repeat;
    cfg.seed_stride = a.stride;
    cfg.metrics_window = a.window;
    cfg.store_packet_events = a.packet_events;
    let report = run_experiment(&cfg)?;
    for run in &report.runs {
        print_run(run, packet_size);
    }
    println!(
        "wrote {} trace file(s), per_flow.csv, jain.csv and summary.csv to {}",
        report.runs.len(),
        a.out.display()
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    if a.tm.is_empty() || a.eps.is_empty() {
        bail!("sweep needs at least one interval length and one step size");
    }
    let scenario = load_scenario(&a.scenario, None)?;
    let mut cfg = ExperimentConfig::new(scenario, &a.out);
    cfg.repeat = a.repeat;
    let rows = tradeoff_sweep(&cfg, &a.tm, &a.eps)?;
    println!("tm_multiplier  eps_min  rct  conv_s  stddev_pps  converged");
    for r in &rows {
        println!(
            "{:>13.2}  {:>7.3}  {:>3}  {:>6.1}  {:>10.1}  {:>5}/{}",
            r.tm_multiplier,
            r.epsilon_min,
            r.rct_pairs,
            r.mean_convergence_s,
            r.mean_stddev_pps,
            r.runs_converged,
            r.runs_total
        );
    }
    println!("wrote sweep.csv to {}", a.out.display());
    Ok(())
}

fn equilibrium(a: EquilibriumArgs) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    use std::io::Write;
    for &n in &a.senders {
        let alpha = match a.alpha {
            Some(v) => v,
            None => min_alpha(n)?,
        };
        let model = GameModel::new(Rate::new(a.capacity)?, alpha, n)?;
        let mut opts = EquilibriumOptions::for_model(&model);
        opts.epsilon = a.epsilon;
        if let Some(g) = a.grid {
            opts.grid = g;
        }
        let sol = find_equilibrium(&model, &opts)?;
        let record = serde_json::json!({
            "kind": "equilibrium",
            "n": n,
            "capacity": a.capacity,
            "alpha": alpha,
            "rates": sol.rates.iter().map(|r| r.pps()).collect::<Vec<_>>(),
            "aggregate": sol.aggregate.pps(),
            "fair": sol.fair,
            "in_region": sol.in_region,
            "residual": sol.residual,
        });
        writeln!(out, "{record}")?;
        if a.dynamics > 0 {
            let mut in_band = 0usize;
            let mut converged_steps = Vec::new();
            for x0 in seeded_starts(a.seed, a.starts, n, a.capacity) {
                let traj = run_dynamics(&model, &x0, a.epsilon, a.dynamics)?;
                if traj.stays_in_band(100.min(a.dynamics)) {
                    in_band += 1;
                }
                converged_steps.push(traj.converged_at);
            }
            let record = serde_json::json!({
                "kind": "dynamics",
                "n": n,
                "epsilon": a.epsilon,
                "steps": a.dynamics,
                "starts": a.starts,
                "in_band_final_100": in_band,
                "converged_at": converged_steps,
            });
            writeln!(out, "{record}")?;
        }
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario, None)?;
    let packet_size = scenario.packet_size;
    let run = report_from_trace(&scenario, &a.trace, a.window)?;
    print_run(&run, packet_size);
    for (start, j) in &run.jain_series {
        println!("  jain[{start}s..] = {j:.4}");
    }
    Ok(())
}
