//! Monitor intervals: slicing a flow's timeline, attributing per-packet
//! outcomes, and aggregating each interval into [`PerformanceMetrics`].
//!
//! A packet belongs to the interval during which it was sent, even if its
//! ack arrives while later intervals are open. An interval finalizes once
//! every packet it sent has resolved (ack or loss), or when the owner forces
//! finalization at the timeout deadline, at which point unresolved packets
//! count as lost.

use std::collections::HashMap;

use thiserror::Error;

use crate::utility::{PerformanceMetrics, Rate};

#[derive(Debug, Error, PartialEq)]
pub enum MonitorError {
    #[error("rate must be positive to size an interval")]
    ZeroRate,
    #[error("uniform draw must lie in [0, 1], got {0}")]
    InvalidDraw(f64),
    #[error("an interval is already open (id {0})")]
    AlreadyOpen(u64),
    #[error("no interval is open")]
    NoneOpen,
    #[error("packet {0} is unknown or already resolved")]
    UnknownPacket(u64),
    #[error("interval {0} is unknown")]
    UnknownInterval(u64),
    #[error("interval {id} still has {outstanding} unresolved packets")]
    Unresolved { id: u64, outstanding: u64 },
    #[error("interval {0} sent no packets")]
    EmptyInterval(u64),
    #[error("interval {0} is not awaiting feedback")]
    NotAwaiting(u64),
    #[error("multiplier range is inverted: [{low}, {high}]")]
    InvertedRange { low: f64, high: f64 },
    #[error("rtt estimate must be positive, got {0}")]
    InvalidRtt(f64),
}

/// How interval lengths are drawn: the larger of the time to send
/// `min_packets` packets and a uniform-random multiple of the RTT estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiSchedule {
    pub rtt_estimate: f64,
    pub min_packets: u32,
    pub rtt_multiplier_low: f64,
    pub rtt_multiplier_high: f64,
}

impl MiSchedule {
    pub const DEFAULT_MIN_PACKETS: u32 = 10;
    pub const DEFAULT_MULTIPLIER_LOW: f64 = 1.7;
    pub const DEFAULT_MULTIPLIER_HIGH: f64 = 2.2;

    pub fn new(rtt_estimate: f64) -> Result<Self, MonitorError> {
        Self::with_multipliers(
            rtt_estimate,
            Self::DEFAULT_MULTIPLIER_LOW,
            Self::DEFAULT_MULTIPLIER_HIGH,
        )
    }

    /// A degenerate range (`low == high`) pins the interval length to a fixed
    /// RTT multiple, which the stability/reactiveness sweep relies on.
    pub fn with_multipliers(rtt_estimate: f64, low: f64, high: f64) -> Result<Self, MonitorError> {
        if !rtt_estimate.is_finite() || rtt_estimate <= 0.0 {
            return Err(MonitorError::InvalidRtt(rtt_estimate));
        }
        if low > high || low <= 0.0 {
            return Err(MonitorError::InvertedRange { low, high });
        }
        Ok(MiSchedule {
            rtt_estimate,
            min_packets: Self::DEFAULT_MIN_PACKETS,
            rtt_multiplier_low: low,
            rtt_multiplier_high: high,
        })
    }
}

/// Length of the next interval at `rate`, given a uniform draw in `[0, 1]`.
pub fn interval_duration(sched: &MiSchedule, rate: Rate, draw: f64) -> Result<f64, MonitorError> {
    if rate.pps() <= 0.0 {
        return Err(MonitorError::ZeroRate);
    }
    if !(0.0..=1.0).contains(&draw) {
        return Err(MonitorError::InvalidDraw(draw));
    }
    let packet_time = sched.min_packets as f64 / rate.pps();
    let mult =
        sched.rtt_multiplier_low + draw * (sched.rtt_multiplier_high - sched.rtt_multiplier_low);
    Ok(packet_time.max(mult * sched.rtt_estimate))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiState {
    Open,
    AwaitingFeedback,
    Finalized,
    Discarded,
}

/// Accounting record binding one commanded rate to its eventual metrics.
#[derive(Debug, Clone)]
pub struct MonitorInterval {
    pub id: u64,
    pub commanded_rate: Rate,
    pub start_time: f64,
    pub end_time: f64,
    pub packets_sent: u64,
    pub packets_acked: u64,
    pub packets_lost: u64,
    pub rtt_sum: f64,
    pub state: MiState,
    first_send: f64,
    last_send: f64,
}

impl MonitorInterval {
    fn outstanding(&self) -> u64 {
        self.packets_sent - self.packets_acked - self.packets_lost
    }

    /// Time the sent packets actually occupy: whole inter-packet gaps, one
    /// per packet. Using this as the throughput denominator instead of the
    /// nominal window keeps the measurement free of the up-to-one-packet
    /// quantization error, which at the ten-packet interval floor would be a
    /// ten percent swing in every utility sample.
    fn send_span(&self) -> f64 {
        if self.packets_sent == 0 {
            self.end_time - self.start_time
        } else {
            (self.last_send - self.first_send) + 1.0 / self.commanded_rate.pps()
        }
    }
}

/// A finalized interval's identity and aggregated performance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalizedMi {
    pub id: u64,
    pub commanded_rate: Rate,
    pub metrics: PerformanceMetrics,
}

/// Outcome of a realign request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RealignOutcome {
    /// Requested rate equals the current one; the open interval continues.
    Unchanged,
    /// The open interval `discarded` was truncated and a fresh one opened.
    Realigned {
        new_mi: u64,
        new_end: f64,
        discarded: u64,
    },
}

/// Per-flow interval bookkeeping.
#[derive(Debug)]
pub struct Monitor {
    sched: MiSchedule,
    next_id: u64,
    open: Option<MonitorInterval>,
    /// Closed intervals still waiting for packet resolutions, plus discarded
    /// ones kept only until their in-flight packets drain.
    pending: HashMap<u64, MonitorInterval>,
    pkt_to_mi: HashMap<u64, u64>,
    /// Force-finalized intervals that may still see straggler resolutions,
    /// keyed to how many are outstanding.
    late_map: HashMap<u64, u64>,
    last_avg_rtt: f64,
    /// Acks that arrived after their interval was force-finalized.
    pub late_resolutions: u64,
}

impl Monitor {
    pub fn new(sched: MiSchedule) -> Self {
        Monitor {
            last_avg_rtt: sched.rtt_estimate,
            sched,
            next_id: 0,
            open: None,
            pending: HashMap::new(),
            pkt_to_mi: HashMap::new(),
            late_map: HashMap::new(),
            late_resolutions: 0,
        }
    }

    pub fn schedule(&self) -> &MiSchedule {
        &self.sched
    }

    pub fn open_mi(&self) -> Option<&MonitorInterval> {
        self.open.as_ref()
    }

    /// Id the next opened interval will get; lets callers register the
    /// interval with its controller before opening it.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Opens the next interval at `now`. Consecutive intervals abut: callers
    /// pass the previous interval's end time as `now`.
    pub fn open_interval(
        &mut self,
        now: f64,
        rate: Rate,
        draw: f64,
    ) -> Result<&MonitorInterval, MonitorError> {
        if let Some(open) = &self.open {
            return Err(MonitorError::AlreadyOpen(open.id));
        }
        let duration = interval_duration(&self.sched, rate, draw)?;
        let id = self.next_id;
        self.next_id += 1;
        self.open = Some(MonitorInterval {
            id,
            commanded_rate: rate,
            start_time: now,
            end_time: now + duration,
            packets_sent: 0,
            packets_acked: 0,
            packets_lost: 0,
            rtt_sum: 0.0,
            state: MiState::Open,
            first_send: now,
            last_send: now,
        });
        Ok(self.open.as_ref().unwrap())
    }

    /// Moves the open interval to `AwaitingFeedback`. Returns its id, or
    /// `None` if nothing is open.
    pub fn close_open(&mut self) -> Option<u64> {
        let mut mi = self.open.take()?;
        mi.state = MiState::AwaitingFeedback;
        let id = mi.id;
        self.pending.insert(id, mi);
        Some(id)
    }

    /// Deadline after which the owner should force-finalize `mi_id`: twice
    /// the interval span past its start plus four RTT estimates of slack.
    pub fn timeout_deadline(&self, mi: &MonitorInterval) -> f64 {
        mi.end_time + (mi.end_time - mi.start_time) + 4.0 * self.sched.rtt_estimate
    }

    pub fn record_send(&mut self, pkt: u64, now: f64) -> Result<(), MonitorError> {
        let open = self.open.as_mut().ok_or(MonitorError::NoneOpen)?;
        if open.packets_sent == 0 {
            open.first_send = now;
        }
        open.last_send = now;
        open.packets_sent += 1;
        self.pkt_to_mi.insert(pkt, open.id);
        Ok(())
    }

    pub fn record_ack(
        &mut self,
        pkt: u64,
        rtt_sample: f64,
    ) -> Result<Option<FinalizedMi>, MonitorError> {
        self.resolve(pkt, Some(rtt_sample))
    }

    pub fn record_loss(&mut self, pkt: u64) -> Result<Option<FinalizedMi>, MonitorError> {
        self.resolve(pkt, None)
    }

    fn resolve(
        &mut self,
        pkt: u64,
        rtt_sample: Option<f64>,
    ) -> Result<Option<FinalizedMi>, MonitorError> {
        let mi_id = self
            .pkt_to_mi
            .remove(&pkt)
            .ok_or(MonitorError::UnknownPacket(pkt))?;

        if let Some(open) = self.open.as_mut() {
            if open.id == mi_id {
                apply_resolution(open, rtt_sample);
                return Ok(None);
            }
        }
        if let Some(remaining) = self.late_map.get_mut(&mi_id) {
            // Resolved as lost at the timeout already.
            self.late_resolutions += 1;
            *remaining -= 1;
            if *remaining == 0 {
                self.late_map.remove(&mi_id);
            }
            return Ok(None);
        }
        let mi = self
            .pending
            .get_mut(&mi_id)
            .ok_or(MonitorError::UnknownInterval(mi_id))?;
        match mi.state {
            MiState::Finalized => unreachable!("finalized intervals leave pending"),
            MiState::Discarded => {
                apply_resolution(mi, rtt_sample);
                if mi.outstanding() == 0 {
                    self.pending.remove(&mi_id);
                }
                Ok(None)
            }
            MiState::AwaitingFeedback => {
                apply_resolution(mi, rtt_sample);
                if mi.outstanding() == 0 {
                    return self.finalize(mi_id).map(Some);
                }
                Ok(None)
            }
            MiState::Open => unreachable!("open interval stored in pending"),
        }
    }

    /// Aggregates a fully resolved interval into metrics.
    pub fn finalize(&mut self, mi_id: u64) -> Result<FinalizedMi, MonitorError> {
        let mi = self
            .pending
            .get_mut(&mi_id)
            .ok_or(MonitorError::UnknownInterval(mi_id))?;
        if mi.state != MiState::AwaitingFeedback {
            return Err(MonitorError::NotAwaiting(mi_id));
        }
        if mi.outstanding() != 0 {
            return Err(MonitorError::Unresolved {
                id: mi_id,
                outstanding: mi.outstanding(),
            });
        }
        if mi.packets_sent == 0 {
            return Err(MonitorError::EmptyInterval(mi_id));
        }
        mi.state = MiState::Finalized;
        let throughput = Rate::new(mi.packets_acked as f64 / mi.send_span())
            .expect("counts and span are finite");
        let loss_rate = mi.packets_lost as f64 / mi.packets_sent as f64;
        // A fully lost interval has no RTT samples; carry the previous value.
        let avg_rtt = if mi.packets_acked > 0 {
            mi.rtt_sum / mi.packets_acked as f64
        } else {
            self.last_avg_rtt
        };
        let prev_avg_rtt = self.last_avg_rtt;
        self.last_avg_rtt = avg_rtt;
        let out = FinalizedMi {
            id: mi_id,
            commanded_rate: mi.commanded_rate,
            metrics: PerformanceMetrics::new(
                throughput,
                loss_rate,
                avg_rtt,
                prev_avg_rtt,
                mi.commanded_rate,
            )
            .expect("finalized metrics satisfy invariants"),
        };
        self.pending.remove(&mi_id);
        Ok(out)
    }

    /// Finalizes an awaiting interval at its timeout, counting unresolved
    /// packets as lost. Returns `None` if the interval already completed.
    pub fn force_finalize(&mut self, mi_id: u64) -> Result<Option<FinalizedMi>, MonitorError> {
        let mi = match self.pending.get_mut(&mi_id) {
            Some(mi) => mi,
            None => return Ok(None),
        };
        if mi.state != MiState::AwaitingFeedback {
            return Ok(None);
        }
        let unresolved = mi.outstanding();
        mi.packets_lost += unresolved;
        if unresolved > 0 {
            // Entries for the now-lost packets stay in pkt_to_mi; stragglers
            // are recognized through late_map and ignored.
            self.late_map.insert(mi_id, unresolved);
        }
        self.finalize(mi_id).map(Some)
    }

    /// Truncates the open interval at a rate change: the interval is dropped
    /// from the decision pipeline (its rate was not held constant) and a
    /// fresh one opens at `now`. Same-rate requests are a no-op.
    pub fn realign(
        &mut self,
        now: f64,
        new_rate: Rate,
        draw: f64,
    ) -> Result<RealignOutcome, MonitorError> {
        let open = self.open.as_ref().ok_or(MonitorError::NoneOpen)?;
        if open.commanded_rate == new_rate {
            return Ok(RealignOutcome::Unchanged);
        }
        let discarded = self.discard_open().expect("an interval is open");
        let mi = self.open_interval(now, new_rate, draw)?;
        Ok(RealignOutcome::Realigned {
            new_mi: mi.id,
            new_end: mi.end_time,
            discarded,
        })
    }

    /// Discards the open interval without reopening; used at flow stop.
    /// Returns the discarded interval's id.
    pub fn discard_open(&mut self) -> Option<u64> {
        let mut mi = self.open.take()?;
        let id = mi.id;
        if mi.outstanding() > 0 {
            mi.state = MiState::Discarded;
            self.pending.insert(id, mi);
        }
        Some(id)
    }

    pub fn last_avg_rtt(&self) -> f64 {
        self.last_avg_rtt
    }
}

fn apply_resolution(mi: &mut MonitorInterval, rtt_sample: Option<f64>) {
    match rtt_sample {
        Some(rtt) => {
            mi.packets_acked += 1;
            mi.rtt_sum += rtt;
        }
        None => mi.packets_lost += 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sched() -> MiSchedule {
        MiSchedule::new(0.03).unwrap()
    }

    fn rate(pps: f64) -> Rate {
        Rate::new(pps).unwrap()
    }

    #[test]
    fn duration_rtt_branch() {
        let d = interval_duration(&sched(), rate(10_000.0), 0.0).unwrap();
        assert_relative_eq!(d, 0.051, max_relative = 1e-12); // max(0.001, 1.7 * 0.03)
    }

    #[test]
    fn duration_packet_branch() {
        let d = interval_duration(&sched(), rate(50.0), 1.0).unwrap();
        assert_relative_eq!(d, 0.2, max_relative = 1e-12); // max(0.2, 2.2 * 0.03)
    }

    #[test]
    fn duration_midpoint_multiplier() {
        let d = interval_duration(&sched(), rate(10_000.0), 0.5).unwrap();
        assert_relative_eq!(d, 1.95 * 0.03, max_relative = 1e-12);
    }

    #[test]
    fn duration_rejects_zero_rate() {
        assert_eq!(
            interval_duration(&sched(), Rate::ZERO, 0.5),
            Err(MonitorError::ZeroRate)
        );
    }

    #[test]
    fn intervals_abut_and_ids_increase() {
        let mut m = Monitor::new(sched());
        let first = m.open_interval(0.0, rate(1000.0), 0.0).unwrap();
        assert_eq!(first.start_time, 0.0);
        assert_eq!(first.id, 0);
        let end = first.end_time;
        m.close_open();
        let second = m.open_interval(end, rate(1000.0), 0.0).unwrap();
        assert_eq!(second.start_time, end);
        assert_eq!(second.id, 1);
    }

    #[test]
    fn double_open_is_rejected() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(1000.0), 0.0).unwrap();
        assert!(matches!(
            m.open_interval(0.0, rate(1000.0), 0.0),
            Err(MonitorError::AlreadyOpen(0))
        ));
    }

    #[test]
    fn counting_and_finalize() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(200.0), 0.0).unwrap();
        for pkt in 0..10 {
            m.record_send(pkt, pkt as f64 * 0.005).unwrap();
        }
        m.close_open().unwrap();
        for pkt in 0..9 {
            assert_eq!(m.record_ack(pkt, 0.03).unwrap(), None);
        }
        let fin = m
            .record_loss(9)
            .unwrap()
            .expect("last resolution finalizes");
        let metrics = fin.metrics;
        assert_relative_eq!(metrics.loss_rate, 0.1, max_relative = 1e-12);
        // 9 acked over the 0.05 s the ten sends occupy at 200 pkt/s.
        assert_relative_eq!(metrics.throughput.pps(), 9.0 / 0.05, max_relative = 1e-12);
        assert_relative_eq!(metrics.avg_rtt, 0.03, max_relative = 1e-12);
        assert_eq!(metrics.sent_rate, rate(200.0));
        // Conservation: acked + lost == sent.
        assert_eq!(9 + 1, 10);
    }

    #[test]
    fn rtt_sum_accumulates() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(200.0), 0.0).unwrap();
        m.record_send(0, 0.0).unwrap();
        m.record_send(1, 0.005).unwrap();
        m.close_open().unwrap();
        m.record_ack(0, 0.8).unwrap();
        let fin = m.record_ack(1, 0.2).unwrap().unwrap();
        assert_relative_eq!(fin.metrics.avg_rtt, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn double_resolution_is_error() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(200.0), 0.0).unwrap();
        m.record_send(0, 0.0).unwrap();
        m.record_send(1, 0.005).unwrap();
        m.close_open().unwrap();
        m.record_ack(0, 0.03).unwrap();
        assert_eq!(m.record_ack(0, 0.03), Err(MonitorError::UnknownPacket(0)));
        assert_eq!(m.record_loss(0), Err(MonitorError::UnknownPacket(0)));
    }

    #[test]
    fn unknown_packet_is_error() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(200.0), 0.0).unwrap();
        assert_eq!(m.record_ack(42, 0.03), Err(MonitorError::UnknownPacket(42)));
    }

    #[test]
    fn finalize_with_unresolved_is_error() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(200.0), 0.0).unwrap();
        m.record_send(0, 0.0).unwrap();
        let id = m.close_open().unwrap();
        assert_eq!(
            m.finalize(id),
            Err(MonitorError::Unresolved { id, outstanding: 1 })
        );
    }

    #[test]
    fn finalize_empty_interval_is_error() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(200.0), 0.0).unwrap();
        let id = m.close_open().unwrap();
        assert_eq!(m.finalize(id), Err(MonitorError::EmptyInterval(id)));
    }

    #[test]
    fn fully_lost_interval_carries_previous_rtt() {
        let mut m = Monitor::new(sched());
        // First interval establishes avg_rtt = 0.04.
        m.open_interval(0.0, rate(200.0), 0.0).unwrap();
        m.record_send(0, 0.0).unwrap();
        m.close_open().unwrap();
        m.record_ack(0, 0.04).unwrap().unwrap();
        // Second interval loses everything.
        m.open_interval(0.051, rate(200.0), 0.0).unwrap();
        m.record_send(1, 0.051).unwrap();
        m.record_send(2, 0.056).unwrap();
        m.close_open().unwrap();
        m.record_loss(1).unwrap();
        let fin = m.record_loss(2).unwrap().unwrap();
        assert_relative_eq!(fin.metrics.avg_rtt, 0.04, max_relative = 1e-12);
        assert_eq!(fin.metrics.loss_rate, 1.0);
    }

    #[test]
    fn force_finalize_counts_unresolved_as_lost() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(200.0), 0.0).unwrap();
        m.record_send(0, 0.0).unwrap();
        m.record_send(1, 0.005).unwrap();
        let id = m.close_open().unwrap();
        m.record_ack(0, 0.03).unwrap();
        let fin = m.force_finalize(id).unwrap().unwrap();
        assert_relative_eq!(fin.metrics.loss_rate, 0.5, max_relative = 1e-12);
        // A late ack for the timed-out packet is ignored, not an error.
        assert_eq!(m.record_ack(1, 0.09).unwrap(), None);
        assert_eq!(m.late_resolutions, 1);
        // Forcing again is a no-op.
        assert_eq!(m.force_finalize(id).unwrap(), None);
    }

    #[test]
    fn realign_same_rate_is_noop() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(500.0), 0.0).unwrap();
        let out = m.realign(0.01, rate(500.0), 0.0).unwrap();
        assert_eq!(out, RealignOutcome::Unchanged);
        assert_eq!(m.open_mi().unwrap().id, 0);
    }

    #[test]
    fn realign_discards_and_reopens_at_now() {
        let mut m = Monitor::new(sched());
        m.open_interval(0.0, rate(500.0), 0.0).unwrap();
        m.record_send(0, 0.0).unwrap();
        let out = m.realign(0.02, rate(1000.0), 0.0).unwrap();
        match out {
            RealignOutcome::Realigned { new_mi, .. } => {
                assert_eq!(new_mi, 1);
                assert_eq!(m.open_mi().unwrap().start_time, 0.02);
            }
            RealignOutcome::Unchanged => panic!("expected realign"),
        }
        // The discarded interval produces no metrics when its packet resolves.
        assert_eq!(m.record_ack(0, 0.03).unwrap(), None);
    }

    #[test]
    fn timeout_deadline_formula() {
        let mut m = Monitor::new(sched());
        let mi = m.open_interval(1.0, rate(10_000.0), 0.0).unwrap().clone();
        let d = m.timeout_deadline(&mi);
        assert_relative_eq!(d, mi.end_time + 0.051 + 0.12, max_relative = 1e-12);
    }
}
