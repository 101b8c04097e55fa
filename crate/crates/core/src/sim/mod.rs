//! Deterministic packet-level network simulation: paced senders, one
//! bottleneck link with a finite buffer, propagation delay, random loss and
//! time-varying parameters.
//!
//! A run is a pure function of `(Scenario, seed)`: all randomness derives
//! from per-flow substreams, and simultaneous events resolve in scheduling
//! order.

mod aimd;
mod engine;
mod link;

pub use aimd::{AimdConfig, AimdState};
pub use engine::{run, run_with_sink, FlowCounters, RunSummary};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerConfig, ControllerError};
use crate::rng::{substream, StreamPurpose, LINK_OWNER};
use crate::utility::{Rate, UtilityError};
use rand::Rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("link capacity must be positive")]
    InvalidCapacity,
    #[error("propagation delay must be positive and finite, got {0}")]
    InvalidDelay(f64),
    #[error("buffer must hold at least one packet")]
    InvalidBuffer,
    #[error("loss fraction must lie in [0, 1), got {0}")]
    InvalidLossFraction(f64),
    #[error("duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error("flow {id}: window [{start}, {stop}) is invalid for duration {duration}")]
    InvalidFlowWindow {
        id: u32,
        start: f64,
        stop: f64,
        duration: f64,
    },
    #[error("flow ids must be unique, {0} repeats")]
    DuplicateFlowId(u32),
    #[error("scenario has no flows")]
    NoFlows,
    #[error("link change times must be strictly increasing and within the run")]
    InvalidSchedule,
    #[error("changing the queue discipline mid-run is not supported")]
    DisciplineChange,
    #[error("incast needs at least 2 senders, got {0}")]
    TooFewSenders(usize),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueDiscipline {
    /// One FIFO; arrivals beyond the buffer are dropped at the tail.
    DropTailFifo,
    /// Per-flow queues served round-robin, each owning an equal buffer share.
    PerFlowFq,
}

/// Bottleneck link parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSpec {
    pub capacity: Rate,
    /// One-way propagation delay, seconds.
    pub prop_delay: f64,
    pub buffer_packets: u32,
    /// Forward-path random drop probability, applied at enqueue.
    pub random_loss: f64,
    /// Ack-path random drop probability. Lost acks leave packets unresolved
    /// until the owning interval times out.
    pub ack_loss: f64,
    pub queue_discipline: QueueDiscipline,
}

impl LinkSpec {
    pub fn new(capacity: Rate, prop_delay: f64, buffer_packets: u32) -> Result<Self, SimError> {
        let spec = LinkSpec {
            capacity,
            prop_delay,
            buffer_packets,
            random_loss: 0.0,
            ack_loss: 0.0,
            queue_discipline: QueueDiscipline::DropTailFifo,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_random_loss(mut self, p: f64) -> Result<Self, SimError> {
        self.random_loss = p;
        self.validate()?;
        Ok(self)
    }

    pub fn with_ack_loss(mut self, p: f64) -> Result<Self, SimError> {
        self.ack_loss = p;
        self.validate()?;
        Ok(self)
    }

    pub fn with_discipline(mut self, q: QueueDiscipline) -> Self {
        self.queue_discipline = q;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.capacity.pps() <= 0.0 {
            return Err(SimError::InvalidCapacity);
        }
        if !self.prop_delay.is_finite() || self.prop_delay <= 0.0 {
            return Err(SimError::InvalidDelay(self.prop_delay));
        }
        if self.buffer_packets == 0 {
            return Err(SimError::InvalidBuffer);
        }
        for p in [self.random_loss, self.ack_loss] {
            if !p.is_finite() || !(0.0..1.0).contains(&p) {
                return Err(SimError::InvalidLossFraction(p));
            }
        }
        Ok(())
    }

    /// Bandwidth-delay product in packets for a path RTT.
    pub fn bdp_packets(&self, rtt: f64) -> u32 {
        (self.capacity.pps() * rtt).round() as u32
    }

    /// Base path RTT seen by a flow with the given extra delay.
    pub fn base_rtt(&self, path_rtt_extra: f64) -> f64 {
        2.0 * self.prop_delay + path_rtt_extra
    }
}

/// A link parameter change taking effect at `at`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkChange {
    pub at: f64,
    pub spec: LinkSpec,
}

/// Piecewise-constant link parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSchedule {
    pub initial: LinkSpec,
    pub changes: Vec<LinkChange>,
}

impl DynamicSchedule {
    /// Redraws capacity, propagation delay and loss every `period` seconds,
    /// each uniform over its range, from the link's schedule substream.
    /// The buffer size is held constant.
    #[allow(clippy::too_many_arguments)]
    pub fn redrawn_uniform(
        seed: u64,
        duration: f64,
        period: f64,
        capacity_pps: (f64, f64),
        rtt: (f64, f64),
        loss: (f64, f64),
        buffer_packets: u32,
        discipline: QueueDiscipline,
    ) -> Result<Self, SimError> {
        let mut rng = substream(seed, LINK_OWNER, StreamPurpose::LinkSchedule);
        let draw_spec = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<LinkSpec, SimError> {
            let cap = rng.random_range(capacity_pps.0..=capacity_pps.1);
            let path_rtt = rng.random_range(rtt.0..=rtt.1);
            let p = rng.random_range(loss.0..=loss.1);
            Ok(LinkSpec {
                capacity: Rate::new(cap)?,
                prop_delay: path_rtt / 2.0,
                buffer_packets,
                random_loss: p,
                ack_loss: 0.0,
                queue_discipline: discipline,
            })
        };
        let initial = draw_spec(&mut rng)?;
        let mut changes = Vec::new();
        let mut t = period;
        while t < duration {
            changes.push(LinkChange {
                at: t,
                spec: draw_spec(&mut rng)?,
            });
            t += period;
        }
        Ok(DynamicSchedule { initial, changes })
    }

    /// Capacity in force at time `t`.
    pub fn capacity_at(&self, t: f64) -> Rate {
        self.spec_at(t).capacity
    }

    pub fn spec_at(&self, t: f64) -> LinkSpec {
        let mut cur = self.initial;
        for c in &self.changes {
            if c.at <= t {
                cur = c.spec;
            } else {
                break;
            }
        }
        cur
    }
}

/// Link description: fixed or piecewise-constant.
#[derive(Debug, Clone, PartialEq)]
pub enum LinkPlan {
    Static(LinkSpec),
    Dynamic(DynamicSchedule),
}

impl LinkPlan {
    pub fn initial(&self) -> LinkSpec {
        match self {
            LinkPlan::Static(s) => *s,
            LinkPlan::Dynamic(d) => d.initial,
        }
    }

    pub fn changes(&self) -> &[LinkChange] {
        match self {
            LinkPlan::Static(_) => &[],
            LinkPlan::Dynamic(d) => &d.changes,
        }
    }

    pub fn spec_at(&self, t: f64) -> LinkSpec {
        match self {
            LinkPlan::Static(s) => *s,
            LinkPlan::Dynamic(d) => d.spec_at(t),
        }
    }
}

/// Which sender drives a flow.
#[derive(Debug, Clone)]
pub enum ControllerKind {
    Pcc(ControllerConfig),
    AimdBaseline(AimdConfig),
}

#[derive(Debug, Clone)]
pub struct FlowSpec {
    pub id: u32,
    pub controller: ControllerKind,
    pub start_time: f64,
    pub stop_time: f64,
    /// Extra per-flow path delay, split evenly between the two directions.
    pub path_rtt_extra: f64,
}

impl FlowSpec {
    /// A utility-driven flow with default tuning for the path RTT.
    pub fn pcc(id: u32, link: &LinkSpec, start: f64, stop: f64) -> Result<Self, SimError> {
        let rtt = link.base_rtt(0.0);
        Ok(FlowSpec {
            id,
            controller: ControllerKind::Pcc(ControllerConfig::new(rtt)?),
            start_time: start,
            stop_time: stop,
            path_rtt_extra: 0.0,
        })
    }

    pub fn aimd(id: u32, start: f64, stop: f64) -> Self {
        FlowSpec {
            id,
            controller: ControllerKind::AimdBaseline(AimdConfig::default()),
            start_time: start,
            stop_time: stop,
            path_rtt_extra: 0.0,
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub link: LinkPlan,
    pub flows: Vec<FlowSpec>,
    pub duration: f64,
    pub seed: u64,
    /// Used only to convert between packets/s and bit rates in reports.
    pub packet_size: u32,
}

impl Scenario {
    pub const DEFAULT_PACKET_SIZE: u32 = 1500;

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.duration.is_finite() || self.duration <= 0.0 {
            return Err(SimError::InvalidDuration(self.duration));
        }
        if self.flows.is_empty() {
            return Err(SimError::NoFlows);
        }
        self.link.initial().validate()?;
        let discipline = self.link.initial().queue_discipline;
        let mut prev = 0.0;
        for c in self.link.changes() {
            c.spec.validate()?;
            if c.at <= prev || c.at >= self.duration {
                return Err(SimError::InvalidSchedule);
            }
            if c.spec.queue_discipline != discipline {
                return Err(SimError::DisciplineChange);
            }
            prev = c.at;
        }
        let mut ids = std::collections::HashSet::new();
        for f in &self.flows {
            if !ids.insert(f.id) {
                return Err(SimError::DuplicateFlowId(f.id));
            }
            let ok = f.start_time >= 0.0
                && f.start_time < f.stop_time
                && f.stop_time <= self.duration
                && f.path_rtt_extra >= 0.0;
            if !ok {
                return Err(SimError::InvalidFlowWindow {
                    id: f.id,
                    start: f.start_time,
                    stop: f.stop_time,
                    duration: self.duration,
                });
            }
        }
        Ok(())
    }
}

/// Builds a many-to-one scenario: `n_senders` flows share one bottleneck,
/// each transferring `flow_packets` worth of time at the fair share, all
/// starting together.
pub fn incast_scenario(
    n_senders: usize,
    flow_packets: u64,
    link: LinkSpec,
    seed: u64,
) -> Result<Scenario, SimError> {
    if n_senders < 2 {
        return Err(SimError::TooFewSenders(n_senders));
    }
    link.validate()?;
    // Time for the aggregate transfer at capacity, with headroom for the
    // senders to find their share.
    let total = n_senders as u64 * flow_packets;
    let duration = (1.5 * total as f64 / link.capacity.pps()).max(10.0);
    let flows = (0..n_senders)
        .map(|i| FlowSpec::pcc(i as u32, &link, 0.0, duration))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scenario {
        link: LinkPlan::Static(link),
        flows,
        duration,
        seed,
        packet_size: Scenario::DEFAULT_PACKET_SIZE,
    })
}

/// Same topology with the AIMD baseline in every sender.
pub fn incast_scenario_aimd(
    n_senders: usize,
    flow_packets: u64,
    link: LinkSpec,
    seed: u64,
) -> Result<Scenario, SimError> {
    let mut s = incast_scenario(n_senders, flow_packets, link, seed)?;
    for f in &mut s.flows {
        f.controller = ControllerKind::AimdBaseline(AimdConfig::default());
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link() -> LinkSpec {
        LinkSpec::new(Rate::new(8333.0).unwrap(), 0.015, 250).unwrap()
    }

    #[test]
    fn scenario_rejects_inverted_flow_window() {
        let l = link();
        let mut flow = FlowSpec::pcc(0, &l, 5.0, 2.0).unwrap();
        flow.stop_time = 2.0;
        let s = Scenario {
            link: LinkPlan::Static(l),
            flows: vec![flow],
            duration: 10.0,
            seed: 0,
            packet_size: 1500,
        };
        assert!(matches!(
            s.validate(),
            Err(SimError::InvalidFlowWindow { .. })
        ));
    }

    #[test]
    fn scenario_rejects_duplicate_ids() {
        let l = link();
        let s = Scenario {
            link: LinkPlan::Static(l),
            flows: vec![
                FlowSpec::pcc(3, &l, 0.0, 10.0).unwrap(),
                FlowSpec::pcc(3, &l, 0.0, 10.0).unwrap(),
            ],
            duration: 10.0,
            seed: 0,
            packet_size: 1500,
        };
        assert!(matches!(s.validate(), Err(SimError::DuplicateFlowId(3))));
    }

    #[test]
    fn schedule_must_increase() {
        let l = link();
        let sched = DynamicSchedule {
            initial: l,
            changes: vec![
                LinkChange { at: 5.0, spec: l },
                LinkChange { at: 5.0, spec: l },
            ],
        };
        let s = Scenario {
            link: LinkPlan::Dynamic(sched),
            flows: vec![FlowSpec::pcc(0, &l, 0.0, 10.0).unwrap()],
            duration: 10.0,
            seed: 0,
            packet_size: 1500,
        };
        assert!(matches!(s.validate(), Err(SimError::InvalidSchedule)));
    }

    #[test]
    fn discipline_cannot_change_mid_run() {
        let l = link();
        let fq = l.with_discipline(QueueDiscipline::PerFlowFq);
        let s = Scenario {
            link: LinkPlan::Dynamic(DynamicSchedule {
                initial: l,
                changes: vec![LinkChange { at: 5.0, spec: fq }],
            }),
            flows: vec![FlowSpec::pcc(0, &l, 0.0, 10.0).unwrap()],
            duration: 10.0,
            seed: 0,
            packet_size: 1500,
        };
        assert!(matches!(s.validate(), Err(SimError::DisciplineChange)));
    }

    #[test]
    fn redrawn_schedule_is_seeded() {
        let a = DynamicSchedule::redrawn_uniform(
            9,
            50.0,
            5.0,
            (833.0, 8333.0),
            (0.01, 0.1),
            (0.0, 0.01),
            250,
            QueueDiscipline::DropTailFifo,
        )
        .unwrap();
        let b = DynamicSchedule::redrawn_uniform(
            9,
            50.0,
            5.0,
            (833.0, 8333.0),
            (0.01, 0.1),
            (0.0, 0.01),
            250,
            QueueDiscipline::DropTailFifo,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.changes.len(), 9);
        for c in &a.changes {
            assert!((833.0..=8333.0).contains(&c.spec.capacity.pps()));
        }
    }

    #[test]
    fn incast_needs_two_senders() {
        assert!(matches!(
            incast_scenario(1, 1000, link(), 0),
            Err(SimError::TooFewSenders(1))
        ));
        let s = incast_scenario(33, 1000, link(), 0).unwrap();
        assert_eq!(s.flows.len(), 33);
        s.validate().unwrap();
    }
}
