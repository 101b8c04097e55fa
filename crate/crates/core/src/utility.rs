//! Utility functions over sending rates and measured interval performance.
//!
//! Two forms are provided: the analytic game form, where loss and throughput
//! are derived from a vector of sending rates sharing one bottleneck, and the
//! empirical form, where they come from a flow's own monitor-interval
//! measurements. Both use packets per second as the common unit, so the
//! throughput and loss terms of the safe utility stay commensurable and every
//! utility is homogeneous of degree one in (rates, capacity).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Loss fraction at which the safe utility's sigmoid cutoff is centred.
pub const LOSS_CUTOFF: f64 = 0.05;

/// Sigmoid steepness used by the empirical utilities. A sender cannot observe
/// how many flows it competes with, so the floor value is used unconditionally.
pub const EMPIRICAL_ALPHA: f64 = 100.0;

/// Exponent magnitude beyond which `exp` would overflow a double; the sigmoid
/// saturates to 0 or 1 there.
const SIGMOID_EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Error, PartialEq)]
pub enum UtilityError {
    #[error("rate must be finite and non-negative, got {0}")]
    InvalidRate(f64),
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("capacity must be positive, got {0}")]
    InvalidCapacity(f64),
    #[error("loss fraction must lie in [0, 1], got {0}")]
    InvalidLoss(f64),
    #[error("rate vector is empty")]
    EmptyRates,
    #[error("sender index {index} out of range for {n} rates")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("sender count must be at least 1")]
    ZeroSenders,
    #[error("rtt must be positive, got {0}")]
    InvalidRtt(f64),
}

/// A sending rate or throughput in packets per second.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rate(f64);

impl Rate {
    pub const ZERO: Rate = Rate(0.0);

    pub fn new(pps: f64) -> Result<Self, UtilityError> {
        if !pps.is_finite() || pps < 0.0 {
            return Err(UtilityError::InvalidRate(pps));
        }
        Ok(Rate(pps))
    }

    /// Converts a bit rate to packets per second for the given packet size.
    pub fn from_mbps(mbps: f64, packet_size_bytes: u32) -> Result<Self, UtilityError> {
        Rate::new(mbps * 1e6 / (8.0 * packet_size_bytes as f64))
    }

    pub fn pps(self) -> f64 {
        self.0
    }

    pub fn mbps(self, packet_size_bytes: u32) -> f64 {
        self.0 * 8.0 * packet_size_bytes as f64 / 1e6
    }

    pub fn scale(self, factor: f64) -> Result<Self, UtilityError> {
        Rate::new(self.0 * factor)
    }
}

impl std::fmt::Display for Rate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} pkt/s", self.0)
    }
}

/// Scalar objective value; dimensionally packets per second under the unit
/// convention above.
pub type UtilityValue = f64;

/// Which objective a flow optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UtilityFunctionId {
    /// Throughput with a sigmoid loss cutoff near 5%; safe to run over FIFO.
    Safe,
    /// Safe form weighted against RTT growth, for interactive flows under FQ.
    LatencySensitive,
    /// Throughput times delivery fraction; tolerates extreme random loss.
    LossResilient,
}

/// Parameters of the analytic rate game on a shared bottleneck.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameModel {
    pub capacity: Rate,
    pub alpha: f64,
    pub n: usize,
}

impl GameModel {
    pub fn new(capacity: Rate, alpha: f64, n: usize) -> Result<Self, UtilityError> {
        if capacity.pps() <= 0.0 {
            return Err(UtilityError::InvalidCapacity(capacity.pps()));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(UtilityError::InvalidAlpha(alpha));
        }
        if n == 0 {
            return Err(UtilityError::ZeroSenders);
        }
        Ok(GameModel { capacity, alpha, n })
    }
}

/// Performance of one finalized monitor interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMetrics {
    /// Delivered packets over the interval duration.
    pub throughput: Rate,
    /// Fraction of sent packets lost.
    pub loss_rate: f64,
    /// Mean RTT of the interval's acked packets, seconds.
    pub avg_rtt: f64,
    /// Mean RTT of the preceding interval, seconds.
    pub prev_avg_rtt: f64,
    /// Rate the controller commanded for the interval.
    pub sent_rate: Rate,
}

impl PerformanceMetrics {
    pub fn new(
        throughput: Rate,
        loss_rate: f64,
        avg_rtt: f64,
        prev_avg_rtt: f64,
        sent_rate: Rate,
    ) -> Result<Self, UtilityError> {
        if !loss_rate.is_finite() || !(0.0..=1.0).contains(&loss_rate) {
            return Err(UtilityError::InvalidLoss(loss_rate));
        }
        if !avg_rtt.is_finite() || avg_rtt <= 0.0 {
            return Err(UtilityError::InvalidRtt(avg_rtt));
        }
        if !prev_avg_rtt.is_finite() || prev_avg_rtt <= 0.0 {
            return Err(UtilityError::InvalidRtt(prev_avg_rtt));
        }
        Ok(PerformanceMetrics {
            throughput,
            loss_rate,
            avg_rtt,
            prev_avg_rtt,
            sent_rate,
        })
    }
}

/// `1 / (1 + e^(alpha * y))`: strictly decreasing in `y`, 0.5 at `y = 0`.
pub fn sigmoid(y: f64, alpha: f64) -> Result<f64, UtilityError> {
    if !y.is_finite() {
        return Err(UtilityError::NonFinite {
            name: "sigmoid argument",
            value: y,
        });
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(UtilityError::InvalidAlpha(alpha));
    }
    Ok(sigmoid_raw(y, alpha))
}

#[inline]
fn sigmoid_raw(y: f64, alpha: f64) -> f64 {
    let e = alpha * y;
    if e > SIGMOID_EXP_CLAMP {
        0.0
    } else if e < -SIGMOID_EXP_CLAMP {
        1.0
    } else {
        1.0 / (1.0 + e.exp())
    }
}

/// Per-packet loss fraction when `rates` share a bottleneck of `capacity`:
/// zero while demand fits, `1 - capacity / sum` beyond it.
pub fn analytic_loss(rates: &[Rate], capacity: Rate) -> Result<f64, UtilityError> {
    if rates.is_empty() {
        return Err(UtilityError::EmptyRates);
    }
    if capacity.pps() <= 0.0 {
        return Err(UtilityError::InvalidCapacity(capacity.pps()));
    }
    let sum: f64 = rates.iter().map(|r| r.pps()).sum();
    Ok(loss_raw(sum, capacity.pps()))
}

#[inline]
fn loss_raw(rate_sum: f64, capacity: f64) -> f64 {
    if rate_sum <= capacity {
        0.0
    } else {
        1.0 - capacity / rate_sum
    }
}

/// A sender's delivered rate given its sending rate and the shared loss.
pub fn analytic_throughput(rate: Rate, loss: f64) -> Result<Rate, UtilityError> {
    if !loss.is_finite() || !(0.0..=1.0).contains(&loss) {
        return Err(UtilityError::InvalidLoss(loss));
    }
    Rate::new(rate.pps() * (1.0 - loss))
}

/// Sender `i`'s utility in the analytic game:
/// `T_i * sigmoid(L - 0.05) - x_i * L`.
pub fn analytic_utility(
    i: usize,
    rates: &[Rate],
    model: &GameModel,
) -> Result<UtilityValue, UtilityError> {
    if rates.is_empty() {
        return Err(UtilityError::EmptyRates);
    }
    if i >= rates.len() {
        return Err(UtilityError::IndexOutOfRange {
            index: i,
            n: rates.len(),
        });
    }
    let sum: f64 = rates.iter().map(|r| r.pps()).sum();
    Ok(utility_raw(
        rates[i].pps(),
        sum,
        model.capacity.pps(),
        model.alpha,
    ))
}

/// Same as [`analytic_utility`] with the other senders' rates pre-summed.
/// This is the hot path of the equilibrium solver.
#[inline]
pub(crate) fn utility_raw(own: f64, rate_sum: f64, capacity: f64, alpha: f64) -> f64 {
    let loss = loss_raw(rate_sum, capacity);
    let throughput = own * (1.0 - loss);
    throughput * sigmoid_raw(loss - LOSS_CUTOFF, alpha) - own * loss
}

/// Utility of one measured interval under the chosen objective.
pub fn empirical_utility(
    id: UtilityFunctionId,
    m: &PerformanceMetrics,
) -> Result<UtilityValue, UtilityError> {
    // Re-validate: metrics may have been constructed literally.
    let m = PerformanceMetrics::new(
        m.throughput,
        m.loss_rate,
        m.avg_rtt,
        m.prev_avg_rtt,
        m.sent_rate,
    )?;
    let t = m.throughput.pps();
    let l = m.loss_rate;
    let x = m.sent_rate.pps();
    let u = match id {
        UtilityFunctionId::Safe => t * sigmoid_raw(l - LOSS_CUTOFF, EMPIRICAL_ALPHA) - x * l,
        UtilityFunctionId::LatencySensitive => {
            let ratio = m.prev_avg_rtt / m.avg_rtt;
            (t * sigmoid_raw(l - LOSS_CUTOFF, EMPIRICAL_ALPHA) * ratio - x * l) / m.avg_rtt
        }
        UtilityFunctionId::LossResilient => t * (1.0 - l),
    };
    Ok(u)
}

/// Smallest sigmoid steepness for which the rate game has its unique fair
/// stable state: `max(2.2 * (n - 1), 100)`.
pub fn min_alpha(n: usize) -> Result<f64, UtilityError> {
    if n == 0 {
        return Err(UtilityError::ZeroSenders);
    }
    Ok((2.2 * (n as f64 - 1.0)).max(100.0))
}
