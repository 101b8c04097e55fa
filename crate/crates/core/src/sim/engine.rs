//! The discrete event loop driving flows, the bottleneck link, monitors and
//! controllers in timestamp order.
//!
//! Simultaneous events resolve in scheduling order via a sequence number, so
//! a run is fully determined by `(Scenario, seed)`. The loop drains past the
//! scenario duration until every in-flight packet has resolved; senders stop
//! emitting at their stop time.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::link::{EnqueueOutcome, LinkState, QueuedPacket};
use super::{ControllerKind, Scenario, SimError};
use crate::controller::Controller;
use crate::monitor::{FinalizedMi, Monitor};
use crate::rng::{substream, StreamPurpose};
use crate::sim::aimd::{AimdConfig, AimdState};
use crate::trace::{EventKind, Trace, TraceEvent, TraceSink};
use crate::utility::empirical_utility;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowCounters {
    pub id: u32,
    pub sent: u64,
    pub delivered: u64,
    pub dropped_buffer: u64,
    pub dropped_random: u64,
    pub acks_dropped: u64,
    pub mis_finalized: u64,
}

impl FlowCounters {
    pub fn conservation_holds(&self) -> bool {
        self.sent == self.delivered + self.dropped_buffer + self.dropped_random
    }

    pub fn loss_fraction(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            (self.dropped_buffer + self.dropped_random) as f64 / self.sent as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub duration: f64,
    pub flows: Vec<FlowCounters>,
}

impl RunSummary {
    pub fn conservation_holds(&self) -> bool {
        self.flows.iter().all(FlowCounters::conservation_holds)
    }

    pub fn aggregate_loss_fraction(&self) -> f64 {
        let sent: u64 = self.flows.iter().map(|f| f.sent).sum();
        let dropped: u64 = self
            .flows
            .iter()
            .map(|f| f.dropped_buffer + f.dropped_random)
            .sum();
        if sent == 0 {
            0.0
        } else {
            dropped as f64 / sent as f64
        }
    }
}

/// Runs a scenario, collecting the full event trace in memory.
pub fn run(scenario: &Scenario) -> Result<Trace, SimError> {
    let mut trace = Trace::new();
    run_with_sink(scenario, &mut trace)?;
    Ok(trace)
}

/// Runs a scenario, streaming events into `sink`.
pub fn run_with_sink(
    scenario: &Scenario,
    sink: &mut dyn TraceSink,
) -> Result<RunSummary, SimError> {
    scenario.validate()?;
    Engine::new(scenario, sink)?.run()
}

#[derive(Debug, Clone, Copy)]
enum EvKind {
    FlowStart { f: usize },
    FlowStop { f: usize },
    PacketSend { f: usize, gen: u64 },
    MiBoundary { f: usize, gen: u64 },
    MiTimeout { f: usize, mi: u64 },
    Departure,
    Deliver { f: usize, pkt: u64, sent_at: f64 },
    AckArrive { f: usize, pkt: u64, rtt: f64 },
    LossNotify { f: usize, pkt: u64 },
    LinkChange { idx: usize },
}

struct Ev {
    time: f64,
    seq: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ev {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

struct Sched {
    heap: BinaryHeap<Reverse<Ev>>,
    seq: u64,
}

impl Sched {
    fn push(&mut self, time: f64, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(Ev {
            time,
            seq: self.seq,
            kind,
        }));
    }
}

struct PccFlow {
    monitor: Monitor,
    controller: Controller,
    /// Bumped on every pacing-rate change; stale send events are skipped.
    send_gen: u64,
    /// Bumped on realign; stale boundary events are skipped.
    mi_gen: u64,
    next_pkt: u64,
    rate_pps: f64,
}

struct AimdFlow {
    cfg: AimdConfig,
    st: AimdState,
    in_flight: u64,
    next_pkt: u64,
    rtt_est: f64,
}

enum Sender {
    Pcc(Box<PccFlow>),
    Aimd(AimdFlow),
}

struct FlowState {
    active: bool,
    rtt_extra: f64,
    rng_fwd: ChaCha8Rng,
    rng_ack: ChaCha8Rng,
    rng_dur: ChaCha8Rng,
    sender: Sender,
}

struct Engine<'a> {
    sched: Sched,
    link: LinkState,
    flows: Vec<FlowState>,
    counters: Vec<FlowCounters>,
    active_flows: usize,
    sink: &'a mut dyn TraceSink,
    scenario: &'a Scenario,
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario, sink: &'a mut dyn TraceSink) -> Result<Self, SimError> {
        let initial = scenario.link.initial();
        let mut flows = Vec::with_capacity(scenario.flows.len());
        let mut counters = Vec::with_capacity(scenario.flows.len());
        for spec in &scenario.flows {
            let owner = spec.id as u64;
            let sender = match &spec.controller {
                ControllerKind::Pcc(cfg) => {
                    let controller = Controller::new(
                        cfg.clone(),
                        substream(scenario.seed, owner, StreamPurpose::RctOrder),
                    )?;
                    Sender::Pcc(Box::new(PccFlow {
                        monitor: Monitor::new(cfg.mi_schedule),
                        rate_pps: cfg.initial_rate.pps(),
                        controller,
                        send_gen: 0,
                        mi_gen: 0,
                        next_pkt: 0,
                    }))
                }
                ControllerKind::AimdBaseline(cfg) => Sender::Aimd(AimdFlow {
                    cfg: *cfg,
                    st: AimdState::new(cfg),
                    in_flight: 0,
                    next_pkt: 0,
                    rtt_est: initial.base_rtt(spec.path_rtt_extra),
                }),
            };
            flows.push(FlowState {
                active: false,
                rtt_extra: spec.path_rtt_extra,
                rng_fwd: substream(scenario.seed, owner, StreamPurpose::ForwardLoss),
                rng_ack: substream(scenario.seed, owner, StreamPurpose::AckLoss),
                rng_dur: substream(scenario.seed, owner, StreamPurpose::MiDuration),
                sender,
            });
            counters.push(FlowCounters {
                id: spec.id,
                ..FlowCounters::default()
            });
        }
        Ok(Engine {
            sched: Sched {
                heap: BinaryHeap::new(),
                seq: 0,
            },
            link: LinkState::new(initial, scenario.flows.len()),
            flows,
            counters,
            active_flows: 0,
            sink,
            scenario,
        })
    }

    fn run(mut self) -> Result<RunSummary, SimError> {
        for (i, f) in self.scenario.flows.iter().enumerate() {
            self.sched.push(f.start_time, EvKind::FlowStart { f: i });
            self.sched.push(f.stop_time, EvKind::FlowStop { f: i });
        }
        for (idx, c) in self.scenario.link.changes().iter().enumerate() {
            self.sched.push(c.at, EvKind::LinkChange { idx });
        }
        while let Some(Reverse(ev)) = self.sched.heap.pop() {
            self.dispatch(ev.time, ev.kind);
        }
        let summary = RunSummary {
            duration: self.scenario.duration,
            flows: self.counters,
        };
        debug_assert!(summary.conservation_holds());
        Ok(summary)
    }

    fn emit(&mut self, time: f64, f: usize, kind: EventKind) {
        self.sink.record(&TraceEvent {
            time,
            flow: self.counters[f].id,
            kind,
        });
    }

    fn dispatch(&mut self, now: f64, kind: EvKind) {
        match kind {
            EvKind::FlowStart { f } => self.on_flow_start(f, now),
            EvKind::FlowStop { f } => self.on_flow_stop(f),
            EvKind::PacketSend { f, gen } => self.on_packet_send(f, gen, now),
            EvKind::MiBoundary { f, gen } => self.on_mi_boundary(f, gen, now),
            EvKind::MiTimeout { f, mi } => self.on_mi_timeout(f, mi, now),
            EvKind::Departure => self.on_departure(now),
            EvKind::Deliver { f, pkt, sent_at } => self.on_deliver(f, pkt, sent_at, now),
            EvKind::AckArrive { f, pkt, rtt } => self.on_ack(f, pkt, rtt, now),
            EvKind::LossNotify { f, pkt } => self.on_loss_notify(f, pkt, now),
            EvKind::LinkChange { idx } => {
                self.link.spec = self.scenario.link.changes()[idx].spec;
            }
        }
    }

    fn on_flow_start(&mut self, f: usize, now: f64) {
        self.flows[f].active = true;
        self.active_flows += 1;
        match &mut self.flows[f].sender {
            Sender::Pcc(_) => {
                self.open_next_mi(f, now, true);
                let gen = match &self.flows[f].sender {
                    Sender::Pcc(p) => p.send_gen,
                    _ => unreachable!(),
                };
                self.sched.push(now, EvKind::PacketSend { f, gen });
                let info = match &self.flows[f].sender {
                    Sender::Pcc(p) => p.controller.phase_info(),
                    _ => unreachable!(),
                };
                self.emit(
                    now,
                    f,
                    EventKind::PhaseChange {
                        phase: info.phase,
                        epsilon: info.epsilon,
                        dir: info.dir,
                    },
                );
            }
            Sender::Aimd(_) => {
                self.try_send_window(f, now);
            }
        }
    }

    fn on_flow_stop(&mut self, f: usize) {
        if !self.flows[f].active {
            return;
        }
        self.flows[f].active = false;
        self.active_flows -= 1;
        if let Sender::Pcc(p) = &mut self.flows[f].sender {
            if let Some(discarded) = p.monitor.discard_open() {
                p.controller.forget_mi(discarded);
            }
            p.send_gen += 1;
            p.mi_gen += 1;
        }
    }

    /// Opens the next monitor interval at `now`. On natural boundaries the
    /// controller may hand out a planned trial rate; on a fresh start or a
    /// realign the interval runs at the commanded rate.
    fn open_next_mi(&mut self, f: usize, now: f64, emit_rate: bool) {
        let draw: f64 = self.flows[f].rng_dur.random();
        let flow = &mut self.flows[f];
        let p = match &mut flow.sender {
            Sender::Pcc(p) => p,
            Sender::Aimd(_) => unreachable!("intervals belong to utility-driven flows"),
        };
        let id = p.monitor.next_id();
        let rate = p.controller.register_mi(id);
        p.monitor
            .open_interval(now, rate, draw)
            .expect("no interval is open at a boundary");
        let (end, deadline) = {
            let mi = p.monitor.open_mi().expect("just opened");
            (mi.end_time, p.monitor.timeout_deadline(mi))
        };
        let rate_changed = rate.pps() != p.rate_pps;
        if rate_changed {
            p.rate_pps = rate.pps();
            p.send_gen += 1;
            let gen = p.send_gen;
            let gap = 1.0 / rate.pps();
            self.sched.push(now + gap, EvKind::PacketSend { f, gen });
        }
        let gen = p.mi_gen;
        self.sched.push(end, EvKind::MiBoundary { f, gen });
        self.sched.push(deadline, EvKind::MiTimeout { f, mi: id });
        if rate_changed || emit_rate {
            self.emit(now, f, EventKind::RateChange { rate: rate.pps() });
        }
    }

    fn on_mi_boundary(&mut self, f: usize, gen: u64, now: f64) {
        if !self.flows[f].active {
            return;
        }
        match &mut self.flows[f].sender {
            Sender::Pcc(p) => {
                if p.mi_gen != gen {
                    return;
                }
                p.monitor.close_open();
            }
            Sender::Aimd(_) => return,
        }
        self.open_next_mi(f, now, false);
    }

    fn on_mi_timeout(&mut self, f: usize, mi: u64, now: f64) {
        let fin = match &mut self.flows[f].sender {
            Sender::Pcc(p) => p
                .monitor
                .force_finalize(mi)
                .expect("timed-out interval bookkeeping is consistent"),
            Sender::Aimd(_) => None,
        };
        if let Some(fin) = fin {
            self.handle_finalized(f, fin, now);
        }
    }

    fn on_packet_send(&mut self, f: usize, gen: u64, now: f64) {
        if !self.flows[f].active {
            return;
        }
        let rate = match &mut self.flows[f].sender {
            Sender::Pcc(p) => {
                if p.send_gen != gen {
                    return;
                }
                p.rate_pps
            }
            Sender::Aimd(_) => return,
        };
        self.send_packet(f, now);
        self.sched
            .push(now + 1.0 / rate, EvKind::PacketSend { f, gen });
    }

    fn send_packet(&mut self, f: usize, now: f64) {
        let pkt = match &mut self.flows[f].sender {
            Sender::Pcc(p) => {
                let pkt = p.next_pkt;
                p.next_pkt += 1;
                p.monitor
                    .record_send(pkt, now)
                    .expect("an interval is open while the flow is active");
                pkt
            }
            Sender::Aimd(a) => {
                let pkt = a.next_pkt;
                a.next_pkt += 1;
                a.in_flight += 1;
                pkt
            }
        };
        self.counters[f].sent += 1;
        self.emit(now, f, EventKind::Send { pkt });
        let draw: f64 = self.flows[f].rng_fwd.random();
        let outcome = self.link.enqueue(
            QueuedPacket {
                flow: f,
                pkt,
                sent_at: now,
            },
            draw,
            self.active_flows,
        );
        match outcome {
            EnqueueOutcome::Queued => {
                if self.link.start_service().is_some() {
                    self.sched
                        .push(now + self.link.service_time(), EvKind::Departure);
                }
            }
            EnqueueOutcome::DroppedBuffer => {
                self.counters[f].dropped_buffer += 1;
                self.emit(now, f, EventKind::DropBuffer { pkt });
                self.schedule_loss_notify(f, pkt, now);
            }
            EnqueueOutcome::DroppedRandom => {
                self.counters[f].dropped_random += 1;
                self.emit(now, f, EventKind::DropRandom { pkt });
                self.schedule_loss_notify(f, pkt, now);
            }
        }
    }

    /// Drop notifications reach the sender roughly one RTT after the drop,
    /// mirroring gap-detection latency.
    fn schedule_loss_notify(&mut self, f: usize, pkt: u64, now: f64) {
        let delay = 2.0 * self.link.spec.prop_delay + self.flows[f].rtt_extra;
        self.sched.push(now + delay, EvKind::LossNotify { f, pkt });
    }

    fn on_departure(&mut self, now: f64) {
        let qp = self.link.depart();
        let fwd = self.link.spec.prop_delay + self.flows[qp.flow].rtt_extra / 2.0;
        self.sched.push(
            now + fwd,
            EvKind::Deliver {
                f: qp.flow,
                pkt: qp.pkt,
                sent_at: qp.sent_at,
            },
        );
        if self.link.start_service().is_some() {
            self.sched
                .push(now + self.link.service_time(), EvKind::Departure);
        }
    }

    fn on_deliver(&mut self, f: usize, pkt: u64, sent_at: f64, now: f64) {
        self.counters[f].delivered += 1;
        self.emit(now, f, EventKind::Deliver { pkt });
        let ack_draw: f64 = self.flows[f].rng_ack.random();
        let back = self.link.spec.prop_delay + self.flows[f].rtt_extra / 2.0;
        if ack_draw < self.link.spec.ack_loss {
            self.counters[f].acks_dropped += 1;
            // Utility-driven flows resolve the packet at the interval
            // timeout; the window baseline gets a loss signal instead, since
            // it has no other way to free the window slot.
            if matches!(self.flows[f].sender, Sender::Aimd(_)) {
                self.sched.push(now + back, EvKind::LossNotify { f, pkt });
            }
            return;
        }
        let arrive = now + back;
        self.sched.push(
            arrive,
            EvKind::AckArrive {
                f,
                pkt,
                rtt: arrive - sent_at,
            },
        );
    }

    fn on_ack(&mut self, f: usize, pkt: u64, rtt: f64, now: f64) {
        match &mut self.flows[f].sender {
            Sender::Pcc(p) => {
                let fin = p
                    .monitor
                    .record_ack(pkt, rtt)
                    .expect("acked packet was recorded at send");
                if let Some(fin) = fin {
                    self.handle_finalized(f, fin, now);
                }
            }
            Sender::Aimd(a) => {
                a.in_flight -= 1;
                a.rtt_est = rtt;
                a.st.on_ack(&a.cfg);
                self.try_send_window(f, now);
            }
        }
    }

    fn on_loss_notify(&mut self, f: usize, pkt: u64, now: f64) {
        match &mut self.flows[f].sender {
            Sender::Pcc(p) => {
                let fin = p
                    .monitor
                    .record_loss(pkt)
                    .expect("lost packet was recorded at send");
                if let Some(fin) = fin {
                    self.handle_finalized(f, fin, now);
                }
            }
            Sender::Aimd(a) => {
                a.in_flight -= 1;
                a.st.on_loss(&a.cfg, now, a.rtt_est);
                self.try_send_window(f, now);
            }
        }
    }

    fn try_send_window(&mut self, f: usize, now: f64) {
        loop {
            if !self.flows[f].active {
                return;
            }
            let can_send = match &self.flows[f].sender {
                Sender::Aimd(a) => a.in_flight < a.st.window_packets(),
                Sender::Pcc(_) => false,
            };
            if !can_send {
                return;
            }
            self.send_packet(f, now);
        }
    }

    fn handle_finalized(&mut self, f: usize, fin: FinalizedMi, now: f64) {
        self.counters[f].mis_finalized += 1;
        let (utility, update) = match &mut self.flows[f].sender {
            Sender::Pcc(p) => {
                let u = empirical_utility(p.controller.config().utility, &fin.metrics)
                    .expect("finalized metrics are valid");
                let upd = p
                    .controller
                    .on_mi_finalized(fin.id, &fin.metrics)
                    .expect("finalized interval was registered");
                (u, upd)
            }
            Sender::Aimd(_) => unreachable!("intervals belong to utility-driven flows"),
        };
        self.emit(
            now,
            f,
            EventKind::MiFinalized {
                mi: fin.id,
                rate: fin.commanded_rate.pps(),
                throughput: fin.metrics.throughput.pps(),
                loss_rate: fin.metrics.loss_rate,
                avg_rtt: fin.metrics.avg_rtt,
                utility,
            },
        );
        let Some(update) = update else { return };
        if update.phase_changed {
            self.emit(
                now,
                f,
                EventKind::PhaseChange {
                    phase: update.phase.phase,
                    epsilon: update.phase.epsilon,
                    dir: update.phase.dir,
                },
            );
        }
        if !self.flows[f].active {
            return;
        }
        let draw: f64 = self.flows[f].rng_dur.random();
        let realigned = match &mut self.flows[f].sender {
            Sender::Pcc(p) => {
                use crate::monitor::RealignOutcome;
                match p
                    .monitor
                    .realign(now, update.new_rate, draw)
                    .expect("active flow has an open interval")
                {
                    RealignOutcome::Unchanged => None,
                    RealignOutcome::Realigned {
                        new_mi,
                        new_end,
                        discarded,
                    } => {
                        p.controller.forget_mi(discarded);
                        p.controller.register_commanded_mi(new_mi);
                        p.mi_gen += 1;
                        p.send_gen += 1;
                        p.rate_pps = update.new_rate.pps();
                        let deadline = {
                            let mi = p.monitor.open_mi().expect("realign reopens");
                            p.monitor.timeout_deadline(mi)
                        };
                        Some((new_mi, new_end, deadline, p.mi_gen, p.send_gen))
                    }
                }
            }
            Sender::Aimd(_) => unreachable!(),
        };
        if let Some((new_mi, new_end, deadline, mi_gen, send_gen)) = realigned {
            let rate = update.new_rate.pps();
            self.emit(now, f, EventKind::RateChange { rate });
            self.sched
                .push(now + 1.0 / rate, EvKind::PacketSend { f, gen: send_gen });
            self.sched
                .push(new_end, EvKind::MiBoundary { f, gen: mi_gen });
            self.sched
                .push(deadline, EvKind::MiTimeout { f, mi: new_mi });
        }
    }
}
