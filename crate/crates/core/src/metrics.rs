//! Evaluation metrics over run traces: per-second throughput bins, Jain's
//! fairness index, forward-looking convergence time, post-convergence rate
//! variation, loss and utilization.
//!
//! Everything here is a pure function of the event stream: recomputing a
//! report from a stored trace reproduces it exactly.

use std::collections::HashMap;

use thiserror::Error;

use crate::sim::Scenario;
use crate::trace::{EventKind, Trace, TraceEvent, TraceSink};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("throughput vector is empty")]
    Empty,
    #[error("throughputs must be non-negative")]
    Negative,
    #[error("throughputs are all zero")]
    AllZero,
    #[error("flow {0} is not part of this run")]
    UnknownFlow(u32),
    #[error("window [{from}, {to}) exceeds the binned range {len}")]
    InsufficientWindow { from: usize, to: usize, len: usize },
}

/// `(sum t)^2 / (n * sum t^2)`: 1 at perfect equality, `1/n` when a single
/// flow holds everything.
pub fn jain_index(throughputs: &[f64]) -> Result<f64, MetricsError> {
    if throughputs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if throughputs.iter().any(|&t| t < 0.0) {
        return Err(MetricsError::Negative);
    }
    let sum: f64 = throughputs.iter().sum();
    let sq: f64 = throughputs.iter().map(|t| t * t).sum();
    if sq == 0.0 {
        return Err(MetricsError::AllZero);
    }
    Ok(sum * sum / (throughputs.len() as f64 * sq))
}

/// Smallest `t` (seconds, absolute) such that every one-second bin in
/// `[t, t + hold)` lies within `tolerance` of the ideal at that second.
/// The scan starts at `from`.
pub fn convergence_time(
    bins: &[f64],
    ideal: &[f64],
    tolerance: f64,
    hold: usize,
    from: usize,
) -> Option<usize> {
    let n = bins.len().min(ideal.len());
    if hold == 0 || n < hold {
        return None;
    }
    'outer: for t in from..=(n - hold) {
        for k in t..t + hold {
            let lo = ideal[k] * (1.0 - tolerance);
            let hi = ideal[k] * (1.0 + tolerance);
            if !(bins[k] >= lo && bins[k] <= hi) {
                continue 'outer;
            }
        }
        return Some(t);
    }
    None
}

/// Population standard deviation of the per-second bins in
/// `[from, from + window)`.
pub fn stddev(bins: &[f64], from: usize, window: usize) -> Result<f64, MetricsError> {
    let to = from + window;
    if window == 0 || to > bins.len() {
        return Err(MetricsError::InsufficientWindow {
            from,
            to,
            len: bins.len(),
        });
    }
    let slice = &bins[from..to];
    let mean = slice.iter().sum::<f64>() / window as f64;
    let var = slice.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / window as f64;
    Ok(var.sqrt())
}

/// Per-flow activity window, seconds.
#[derive(Debug, Clone, Copy)]
pub struct FlowWindow {
    pub id: u32,
    pub start: f64,
    pub stop: f64,
}

/// Streams trace events into per-second, per-flow delivery and send bins.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    seconds: usize,
    flows: Vec<FlowWindow>,
    idx: HashMap<u32, usize>,
    delivered: Vec<Vec<f64>>,
    sent: Vec<Vec<f64>>,
    dropped: Vec<Vec<f64>>,
    pub total_sent: Vec<u64>,
    pub total_delivered: Vec<u64>,
    pub total_dropped: Vec<u64>,
}

impl MetricsAccumulator {
    pub fn new(duration: f64, flows: &[FlowWindow]) -> Self {
        let seconds = duration.ceil() as usize;
        let idx = flows.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
        let n = flows.len();
        MetricsAccumulator {
            seconds,
            flows: flows.to_vec(),
            idx,
            delivered: vec![vec![0.0; seconds]; n],
            sent: vec![vec![0.0; seconds]; n],
            dropped: vec![vec![0.0; seconds]; n],
            total_sent: vec![0; n],
            total_delivered: vec![0; n],
            total_dropped: vec![0; n],
        }
    }

    pub fn for_scenario(scenario: &Scenario) -> Self {
        let windows: Vec<FlowWindow> = scenario
            .flows
            .iter()
            .map(|f| FlowWindow {
                id: f.id,
                start: f.start_time,
                stop: f.stop_time,
            })
            .collect();
        Self::new(scenario.duration, &windows)
    }

    pub fn from_trace(trace: &Trace, scenario: &Scenario) -> Self {
        let mut acc = Self::for_scenario(scenario);
        for ev in &trace.events {
            acc.record(ev);
        }
        acc
    }

    fn flow_idx(&self, id: u32) -> Result<usize, MetricsError> {
        self.idx
            .get(&id)
            .copied()
            .ok_or(MetricsError::UnknownFlow(id))
    }

    /// Delivered packets per second for a flow.
    pub fn delivered_bins(&self, flow: u32) -> Result<&[f64], MetricsError> {
        Ok(&self.delivered[self.flow_idx(flow)?])
    }

    /// Mean delivered rate over `[from, to)`, packets per second.
    pub fn mean_throughput(&self, flow: u32, from: usize, to: usize) -> Result<f64, MetricsError> {
        let bins = self.delivered_bins(flow)?;
        let to = to.min(bins.len());
        if from >= to {
            return Err(MetricsError::InsufficientWindow {
                from,
                to,
                len: bins.len(),
            });
        }
        Ok(bins[from..to].iter().sum::<f64>() / (to - from) as f64)
    }

    /// Jain's index over consecutive `window`-second spans, computed across
    /// the flows active for the whole span. Spans with fewer than two active
    /// flows are skipped.
    pub fn jain_series(&self, window: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if window == 0 {
            return out;
        }
        let mut start = 0;
        while start + window <= self.seconds {
            let span_start = start as f64;
            let span_end = (start + window) as f64;
            let mut rates = Vec::new();
            for (i, fw) in self.flows.iter().enumerate() {
                if fw.start <= span_start && fw.stop >= span_end {
                    let mean = self.delivered[i][start..start + window].iter().sum::<f64>()
                        / window as f64;
                    rates.push(mean);
                }
            }
            if rates.len() >= 2 {
                if let Ok(j) = jain_index(&rates) {
                    out.push((start, j));
                }
            }
            start += window;
        }
        out
    }

    /// Forward-looking convergence time for `flow` against a per-second
    /// ideal, scanning from the flow's start. Absolute seconds.
    pub fn convergence_time(
        &self,
        flow: u32,
        ideal: &[f64],
        tolerance: f64,
        hold: usize,
    ) -> Result<Option<usize>, MetricsError> {
        let i = self.flow_idx(flow)?;
        let from = self.flows[i].start.floor() as usize;
        Ok(convergence_time(
            &self.delivered[i],
            ideal,
            tolerance,
            hold,
            from,
        ))
    }

    pub fn rate_stddev(&self, flow: u32, from: usize, window: usize) -> Result<f64, MetricsError> {
        let i = self.flow_idx(flow)?;
        stddev(&self.delivered[i], from, window)
    }

    /// Loss fraction across all flows for packets sent in `[from, to)`.
    pub fn aggregate_loss(&self, from: usize, to: usize) -> f64 {
        let mut sent = 0.0;
        let mut dropped = 0.0;
        for i in 0..self.flows.len() {
            let hi = to.min(self.sent[i].len());
            if from >= hi {
                continue;
            }
            sent += self.sent[i][from..hi].iter().sum::<f64>();
            dropped += self.dropped[i][from..hi].iter().sum::<f64>();
        }
        if sent == 0.0 {
            0.0
        } else {
            dropped / sent
        }
    }

    /// Delivered fraction of the link capacity integrated over the run.
    pub fn utilization(&self, scenario: &Scenario) -> f64 {
        let mut capacity = 0.0;
        let mut t = 0.0;
        while t < scenario.duration {
            let next = (t + 1.0).min(scenario.duration);
            capacity += scenario.link.spec_at(t).capacity.pps() * (next - t);
            t = next;
        }
        if capacity == 0.0 {
            return 0.0;
        }
        let delivered: f64 = self
            .delivered
            .iter()
            .map(|bins| bins.iter().sum::<f64>())
            .sum();
        delivered / capacity
    }

    pub fn seconds(&self) -> usize {
        self.seconds
    }

    pub fn flows(&self) -> &[FlowWindow] {
        &self.flows
    }
}

impl TraceSink for MetricsAccumulator {
    fn record(&mut self, ev: &TraceEvent) {
        let Some(&i) = self.idx.get(&ev.flow) else {
            return;
        };
        let sec = ev.time.floor() as usize;
        let in_range = sec < self.seconds;
        match ev.kind {
            EventKind::Deliver { .. } => {
                self.total_delivered[i] += 1;
                if in_range {
                    self.delivered[i][sec] += 1.0;
                }
            }
            EventKind::Send { .. } => {
                self.total_sent[i] += 1;
                if in_range {
                    self.sent[i][sec] += 1.0;
                }
            }
            EventKind::DropBuffer { .. } | EventKind::DropRandom { .. } => {
                self.total_dropped[i] += 1;
                if in_range {
                    self.dropped[i][sec] += 1.0;
                }
            }
            _ => {}
        }
    }
}

/// Per-second ideal equal share for every flow: the capacity in force
/// divided by the number of flows active at that second; zero while the
/// flow is inactive.
#[allow(clippy::needless_range_loop)]
pub fn ideal_share_series(scenario: &Scenario) -> Vec<Vec<f64>> {
    let seconds = scenario.duration.ceil() as usize;
    let n = scenario.flows.len();
    let mut out = vec![vec![0.0; seconds]; n];
    for sec in 0..seconds {
        let t = sec as f64 + 0.5;
        let cap = scenario.link.spec_at(t).capacity.pps();
        let active: Vec<usize> = scenario
            .flows
            .iter()
            .enumerate()
            .filter(|(_, f)| f.start_time <= sec as f64 && f.stop_time >= (sec + 1) as f64)
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            continue;
        }
        let share = cap / active.len() as f64;
        for i in active {
            out[i][sec] = share;
        }
    }
    out
}
