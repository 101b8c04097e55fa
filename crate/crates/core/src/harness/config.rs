//! Scenario configuration files: TOML with explicit units.
//!
//! Rates take `pps`, `kbps`, `mbps` or `gbps` suffixes; times take `us`,
//! `ms` or `s` (a bare number means seconds); fractions accept `%` or a
//! plain value. Unit errors name the offending field.

use serde::Deserialize;

use super::HarnessError;
use crate::controller::ControllerConfig;
use crate::monitor::MiSchedule;
use crate::sim::{
    AimdConfig, ControllerKind, DynamicSchedule, FlowSpec, LinkChange, LinkPlan, LinkSpec,
    QueueDiscipline, Scenario,
};
use crate::utility::{Rate, UtilityFunctionId};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    duration: String,
    seed: Option<u64>,
    packet_size: Option<u32>,
    link: RawLink,
    flows: Vec<RawFlow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    capacity: Option<String>,
    prop_delay: Option<String>,
    rtt: Option<String>,
    buffer_packets: Option<u32>,
    /// `"bdp"`, `"0.5bdp"`, or an explicit `"<n>pkt"`.
    buffer: Option<String>,
    random_loss: Option<String>,
    ack_loss: Option<String>,
    queue: Option<String>,
    changes: Option<Vec<RawChange>>,
    random_schedule: Option<RawRandomSchedule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChange {
    at: String,
    capacity: Option<String>,
    prop_delay: Option<String>,
    rtt: Option<String>,
    buffer_packets: Option<u32>,
    random_loss: Option<String>,
    ack_loss: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRandomSchedule {
    period: String,
    capacity: [String; 2],
    rtt: [String; 2],
    random_loss: [String; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlow {
    id: u32,
    controller: Option<String>,
    start: Option<String>,
    stop: Option<String>,
    rtt_extra: Option<String>,
    utility: Option<String>,
    epsilon_min: Option<f64>,
    epsilon_max: Option<f64>,
    rct_pairs: Option<usize>,
    mi_rtt_low: Option<f64>,
    mi_rtt_high: Option<f64>,
}

fn err(field: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

pub(crate) fn parse_duration_str(s: &str, field: &str) -> Result<f64, HarnessError> {
    let s = s.trim();
    let (num, mult) = if let Some(v) = s.strip_suffix("us") {
        (v, 1e-6)
    } else if let Some(v) = s.strip_suffix("ms") {
        (v, 1e-3)
    } else if let Some(v) = s.strip_suffix('s') {
        (v, 1.0)
    } else {
        (s, 1.0)
    };
    num.trim()
        .parse::<f64>()
        .map(|v| v * mult)
        .map_err(|_| err(field, format!("cannot parse duration {s:?}")))
}

pub(crate) fn parse_rate_str(s: &str, packet_size: u32, field: &str) -> Result<Rate, HarnessError> {
    let s = s.trim().to_ascii_lowercase();
    let (num, to_pps): (&str, Box<dyn Fn(f64) -> f64>) = if let Some(v) = s.strip_suffix("gbps") {
        (v, Box::new(move |x| x * 1e9 / (8.0 * packet_size as f64)))
    } else if let Some(v) = s.strip_suffix("mbps") {
        (v, Box::new(move |x| x * 1e6 / (8.0 * packet_size as f64)))
    } else if let Some(v) = s.strip_suffix("kbps") {
        (v, Box::new(move |x| x * 1e3 / (8.0 * packet_size as f64)))
    } else if let Some(v) = s.strip_suffix("pps") {
        (v, Box::new(|x| x))
    } else {
        return Err(err(
            field,
            format!("rate {s:?} needs a unit: pps, kbps, mbps or gbps"),
        ));
    };
    let v = num
        .trim()
        .parse::<f64>()
        .map_err(|_| err(field, format!("cannot parse rate {s:?}")))?;
    Rate::new(to_pps(v)).map_err(|e| err(field, e.to_string()))
}

pub(crate) fn parse_fraction_str(s: &str, field: &str) -> Result<f64, HarnessError> {
    let s = s.trim();
    let (num, scale) = match s.strip_suffix('%') {
        Some(v) => (v, 0.01),
        None => (s, 1.0),
    };
    let v = num
        .trim()
        .parse::<f64>()
        .map_err(|_| err(field, format!("cannot parse fraction {s:?}")))?;
    Ok(v * scale)
}

/// Resolves `prop_delay`/`rtt` into a one-way delay.
fn resolve_delay(raw: &RawLink, prefix: &str) -> Result<f64, HarnessError> {
    match (&raw.prop_delay, &raw.rtt) {
        (Some(p), None) => parse_duration_str(p, &format!("{prefix}.prop_delay")),
        (None, Some(r)) => Ok(parse_duration_str(r, &format!("{prefix}.rtt"))? / 2.0),
        (Some(_), Some(_)) => Err(err(
            &format!("{prefix}.rtt"),
            "give either prop_delay or rtt, not both",
        )),
        (None, None) => Err(err(
            &format!("{prefix}.prop_delay"),
            "link needs prop_delay or rtt",
        )),
    }
}

fn resolve_buffer(
    raw: &RawLink,
    capacity: Rate,
    rtt: f64,
    prefix: &str,
) -> Result<u32, HarnessError> {
    match (raw.buffer_packets, &raw.buffer) {
        (Some(n), None) => Ok(n),
        (None, Some(s)) => {
            let s = s.trim().to_ascii_lowercase();
            if let Some(v) = s.strip_suffix("bdp") {
                let factor = if v.is_empty() {
                    1.0
                } else {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| err(&format!("{prefix}.buffer"), "bad bdp multiple"))?
                };
                Ok(((capacity.pps() * rtt * factor).round() as u32).max(1))
            } else if let Some(v) = s.strip_suffix("pkt") {
                v.trim()
                    .parse::<u32>()
                    .map_err(|_| err(&format!("{prefix}.buffer"), "bad packet count"))
            } else {
                Err(err(
                    &format!("{prefix}.buffer"),
                    format!("buffer {s:?} must be \"<n>pkt\" or \"<k>bdp\""),
                ))
            }
        }
        (Some(_), Some(_)) => Err(err(
            &format!("{prefix}.buffer"),
            "give either buffer_packets or buffer, not both",
        )),
        (None, None) => Err(err(
            &format!("{prefix}.buffer_packets"),
            "link needs buffer_packets or buffer",
        )),
    }
}

fn parse_queue(s: &Option<String>, field: &str) -> Result<QueueDiscipline, HarnessError> {
    match s.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("drop_tail") | Some("droptail") | Some("fifo") => {
            Ok(QueueDiscipline::DropTailFifo)
        }
        Some("fq") | Some("fair_queueing") => Ok(QueueDiscipline::PerFlowFq),
        Some(other) => Err(err(field, format!("unknown queue discipline {other:?}"))),
    }
}

/// Parses a scenario from TOML text.
pub fn scenario_from_toml(text: &str) -> Result<Scenario, HarnessError> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| HarnessError::Config {
        field: "<toml>".into(),
        msg: e.to_string(),
    })?;
    let packet_size = raw.packet_size.unwrap_or(Scenario::DEFAULT_PACKET_SIZE);
    let duration = parse_duration_str(&raw.duration, "duration")?;
    let seed = raw.seed.unwrap_or(0);

    let queue = parse_queue(&raw.link.queue, "link.queue")?;
    let link_plan = if let Some(rs) = &raw.link.random_schedule {
        if raw.link.changes.is_some() {
            return Err(err(
                "link.changes",
                "cannot combine changes with random_schedule",
            ));
        }
        let cap_lo = parse_rate_str(
            &rs.capacity[0],
            packet_size,
            "link.random_schedule.capacity",
        )?;
        let cap_hi = parse_rate_str(
            &rs.capacity[1],
            packet_size,
            "link.random_schedule.capacity",
        )?;
        let rtt_lo = parse_duration_str(&rs.rtt[0], "link.random_schedule.rtt")?;
        let rtt_hi = parse_duration_str(&rs.rtt[1], "link.random_schedule.rtt")?;
        let loss_lo = parse_fraction_str(&rs.random_loss[0], "link.random_schedule.random_loss")?;
        let loss_hi = parse_fraction_str(&rs.random_loss[1], "link.random_schedule.random_loss")?;
        let period = parse_duration_str(&rs.period, "link.random_schedule.period")?;
        // Buffer is fixed across redraws; size it from the range midpoints
        // unless given explicitly.
        let mid_cap = Rate::new(0.5 * (cap_lo.pps() + cap_hi.pps())).unwrap();
        let mid_rtt = 0.5 * (rtt_lo + rtt_hi);
        let buffer = match (raw.link.buffer_packets, &raw.link.buffer) {
            (None, None) => ((mid_cap.pps() * mid_rtt).round() as u32).max(1),
            _ => resolve_buffer(&raw.link, mid_cap, mid_rtt, "link")?,
        };
        let sched = DynamicSchedule::redrawn_uniform(
            seed,
            duration,
            period,
            (cap_lo.pps(), cap_hi.pps()),
            (rtt_lo, rtt_hi),
            (loss_lo, loss_hi),
            buffer,
            queue,
        )
        .map_err(HarnessError::Sim)?;
        LinkPlan::Dynamic(sched)
    } else {
        let capacity = parse_rate_str(
            raw.link
                .capacity
                .as_deref()
                .ok_or_else(|| err("link.capacity", "missing"))?,
            packet_size,
            "link.capacity",
        )?;
        let prop = resolve_delay(&raw.link, "link")?;
        let buffer = resolve_buffer(&raw.link, capacity, 2.0 * prop, "link")?;
        let base = LinkSpec {
            capacity,
            prop_delay: prop,
            buffer_packets: buffer,
            random_loss: raw
                .link
                .random_loss
                .as_deref()
                .map(|s| parse_fraction_str(s, "link.random_loss"))
                .transpose()?
                .unwrap_or(0.0),
            ack_loss: raw
                .link
                .ack_loss
                .as_deref()
                .map(|s| parse_fraction_str(s, "link.ack_loss"))
                .transpose()?
                .unwrap_or(0.0),
            queue_discipline: queue,
        };
        match &raw.link.changes {
            None => LinkPlan::Static(base),
            Some(changes) => {
                let mut cur = base;
                let mut out = Vec::new();
                for (i, c) in changes.iter().enumerate() {
                    let prefix = format!("link.changes[{i}]");
                    let at = parse_duration_str(&c.at, &format!("{prefix}.at"))?;
                    if let Some(cap) = &c.capacity {
                        cur.capacity =
                            parse_rate_str(cap, packet_size, &format!("{prefix}.capacity"))?;
                    }
                    if let Some(p) = &c.prop_delay {
                        cur.prop_delay = parse_duration_str(p, &format!("{prefix}.prop_delay"))?;
                    } else if let Some(r) = &c.rtt {
                        cur.prop_delay = parse_duration_str(r, &format!("{prefix}.rtt"))? / 2.0;
                    }
                    if let Some(b) = c.buffer_packets {
                        cur.buffer_packets = b;
                    }
                    if let Some(l) = &c.random_loss {
                        cur.random_loss = parse_fraction_str(l, &format!("{prefix}.random_loss"))?;
                    }
                    if let Some(l) = &c.ack_loss {
                        cur.ack_loss = parse_fraction_str(l, &format!("{prefix}.ack_loss"))?;
                    }
                    out.push(LinkChange { at, spec: cur });
                }
                LinkPlan::Dynamic(DynamicSchedule {
                    initial: base,
                    changes: out,
                })
            }
        }
    };

    let initial = link_plan.initial();
    let mut flows = Vec::new();
    for (i, rf) in raw.flows.iter().enumerate() {
        let prefix = format!("flows[{i}]");
        let start = rf
            .start
            .as_deref()
            .map(|s| parse_duration_str(s, &format!("{prefix}.start")))
            .transpose()?
            .unwrap_or(0.0);
        let stop = rf
            .stop
            .as_deref()
            .map(|s| parse_duration_str(s, &format!("{prefix}.stop")))
            .transpose()?
            .unwrap_or(duration);
        let rtt_extra = rf
            .rtt_extra
            .as_deref()
            .map(|s| parse_duration_str(s, &format!("{prefix}.rtt_extra")))
            .transpose()?
            .unwrap_or(0.0);
        let kind = match rf.controller.as_deref().unwrap_or("pcc") {
            "aimd" => ControllerKind::AimdBaseline(AimdConfig::default()),
            "pcc" => {
                let rtt = initial.base_rtt(rtt_extra);
                let mut cfg = ControllerConfig::new(rtt)
                    .map_err(|e| err(&format!("{prefix}.controller"), e.to_string()))?;
                if let Some(u) = &rf.utility {
                    cfg.utility = match u.to_ascii_lowercase().as_str() {
                        "safe" => UtilityFunctionId::Safe,
                        "latency" | "latency_sensitive" => UtilityFunctionId::LatencySensitive,
                        "loss_resilient" => UtilityFunctionId::LossResilient,
                        other => {
                            return Err(err(
                                &format!("{prefix}.utility"),
                                format!("unknown utility {other:?}"),
                            ))
                        }
                    };
                }
                if let Some(e) = rf.epsilon_min {
                    cfg.epsilon_min = e;
                }
                if let Some(e) = rf.epsilon_max {
                    cfg.epsilon_max = e;
                }
                cfg.epsilon_max = cfg.epsilon_max.max(cfg.epsilon_min);
                if let Some(p) = rf.rct_pairs {
                    cfg.rct_pairs = p;
                }
                if rf.mi_rtt_low.is_some() || rf.mi_rtt_high.is_some() {
                    let lo = rf.mi_rtt_low.unwrap_or(MiSchedule::DEFAULT_MULTIPLIER_LOW);
                    let hi = rf
                        .mi_rtt_high
                        .unwrap_or(lo.max(MiSchedule::DEFAULT_MULTIPLIER_HIGH));
                    cfg.mi_schedule = MiSchedule::with_multipliers(rtt, lo, hi)
                        .map_err(|e| err(&format!("{prefix}.mi_rtt_low"), e.to_string()))?;
                }
                cfg.validate()
                    .map_err(|e| err(&prefix.to_string(), e.to_string()))?;
                ControllerKind::Pcc(cfg)
            }
            other => {
                return Err(err(
                    &format!("{prefix}.controller"),
                    format!("unknown controller {other:?}"),
                ))
            }
        };
        flows.push(FlowSpec {
            id: rf.id,
            controller: kind,
            start_time: start,
            stop_time: stop,
            path_rtt_extra: rtt_extra,
        });
    }

    let scenario = Scenario {
        link: link_plan,
        flows,
        duration,
        seed,
        packet_size,
    };
    scenario.validate().map_err(HarnessError::Sim)?;
    Ok(scenario)
}
