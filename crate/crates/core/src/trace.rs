//! Run traces: timestamped event records and the sinks that collect them.
//!
//! Serialization is newline-delimited JSON with one event per line and
//! stable field order, so a `(scenario, seed)` pair reproduces a trace file
//! byte for byte.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::controller::Phase;
use crate::utility::Rate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Send {
        pkt: u64,
    },
    Deliver {
        pkt: u64,
    },
    DropBuffer {
        pkt: u64,
    },
    DropRandom {
        pkt: u64,
    },
    RateChange {
        rate: f64,
    },
    MiFinalized {
        mi: u64,
        rate: f64,
        throughput: f64,
        loss_rate: f64,
        avg_rtt: f64,
        utility: f64,
    },
    PhaseChange {
        phase: Phase,
        epsilon: f64,
        dir: i8,
    },
}

impl EventKind {
    pub fn is_packet_event(&self) -> bool {
        matches!(
            self,
            EventKind::Send { .. }
                | EventKind::Deliver { .. }
                | EventKind::DropBuffer { .. }
                | EventKind::DropRandom { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub flow: u32,
    pub kind: EventKind,
}

pub trait TraceSink {
    fn record(&mut self, ev: &TraceEvent);
}

/// Discards everything; useful when only the run summary matters.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _ev: &TraceEvent) {}
}

/// An in-memory event log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let mut events = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line)?);
        }
        Ok(Trace { events })
    }
}

impl TraceSink for Trace {
    fn record(&mut self, ev: &TraceEvent) {
        self.events.push(*ev);
    }
}

/// Stores control-plane events, dropping the per-packet ones. Long runs
/// produce tens of millions of packet events; rate and interval history is
/// what the reports need.
#[derive(Debug, Clone, Default)]
pub struct ControlTrace {
    pub trace: Trace,
}

impl TraceSink for ControlTrace {
    fn record(&mut self, ev: &TraceEvent) {
        if !ev.kind.is_packet_event() {
            self.trace.events.push(*ev);
        }
    }
}

/// Feeds two sinks at once.
pub struct TeeSink<'a> {
    pub first: &'a mut dyn TraceSink,
    pub second: &'a mut dyn TraceSink,
}

impl TraceSink for TeeSink<'_> {
    fn record(&mut self, ev: &TraceEvent) {
        self.first.record(ev);
        self.second.record(ev);
    }
}

/// Convenience constructor for rate-change events.
pub fn rate_change(time: f64, flow: u32, rate: Rate) -> TraceEvent {
    TraceEvent {
        time,
        flow,
        kind: EventKind::RateChange { rate: rate.pps() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_is_stable() {
        let mut t = Trace::new();
        t.events.push(TraceEvent {
            time: 0.125,
            flow: 1,
            kind: EventKind::Send { pkt: 7 },
        });
        t.events.push(TraceEvent {
            time: 0.25,
            flow: 1,
            kind: EventKind::MiFinalized {
                mi: 0,
                rate: 100.0,
                throughput: 99.0,
                loss_rate: 0.01,
                avg_rtt: 0.03,
                utility: 42.5,
            },
        });
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let parsed = Trace::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(parsed, t);
        let mut buf2 = Vec::new();
        parsed.write_jsonl(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn control_sink_filters_packet_events() {
        let mut c = ControlTrace::default();
        c.record(&TraceEvent {
            time: 0.0,
            flow: 0,
            kind: EventKind::Send { pkt: 0 },
        });
        c.record(&rate_change(0.1, 0, Rate::new(10.0).unwrap()));
        assert_eq!(c.trace.events.len(), 1);
    }
}
