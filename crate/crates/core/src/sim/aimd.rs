//! Windowed AIMD baseline: additive increase of one packet per RTT of
//! delivered data, multiplicative decrease on loss at most once per RTT.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AimdConfig {
    pub initial_window: f64,
    /// Additive increase per round trip of acked data, packets.
    pub increase_per_rtt: f64,
    pub decrease_factor: f64,
    pub min_window: f64,
}

impl Default for AimdConfig {
    fn default() -> Self {
        AimdConfig {
            initial_window: 2.0,
            increase_per_rtt: 1.0,
            decrease_factor: 0.5,
            min_window: 2.0,
        }
    }
}

/// Congestion window state; the sender keeps packets in flight up to
/// `floor(cwnd)`.
#[derive(Debug, Clone, Copy)]
pub struct AimdState {
    pub cwnd: f64,
    last_decrease: f64,
}

impl AimdState {
    pub fn new(cfg: &AimdConfig) -> Self {
        AimdState {
            cwnd: cfg.initial_window,
            last_decrease: f64::NEG_INFINITY,
        }
    }

    /// Ack for one packet: grow by `increase / cwnd` so a full window of
    /// acks adds `increase` packets per RTT.
    pub fn on_ack(&mut self, cfg: &AimdConfig) {
        self.cwnd += cfg.increase_per_rtt / self.cwnd;
    }

    /// Loss signal: halve, ignoring further losses for one RTT so a burst
    /// of drops counts as a single congestion event.
    pub fn on_loss(&mut self, cfg: &AimdConfig, now: f64, rtt: f64) -> bool {
        if now - self.last_decrease < rtt {
            return false;
        }
        self.cwnd = (self.cwnd * cfg.decrease_factor).max(cfg.min_window);
        self.last_decrease = now;
        true
    }

    pub fn window_packets(&self) -> u64 {
        self.cwnd.floor() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grows_one_packet_per_rtt_without_loss() {
        let cfg = AimdConfig::default();
        let mut st = AimdState::new(&cfg);
        // One "RTT" = one ack per in-flight packet.
        for _ in 0..50 {
            let w = st.window_packets();
            for _ in 0..w {
                st.on_ack(&cfg);
            }
        }
        // Starting at 2, fifty rounds of +~1/round.
        assert!(st.cwnd > 45.0 && st.cwnd < 60.0, "cwnd = {}", st.cwnd);
    }

    #[test]
    fn halves_on_loss() {
        let cfg = AimdConfig::default();
        let mut st = AimdState::new(&cfg);
        st.cwnd = 64.0;
        assert!(st.on_loss(&cfg, 1.0, 0.03));
        assert_relative_eq!(st.cwnd, 32.0);
    }

    #[test]
    fn at_most_one_decrease_per_rtt() {
        let cfg = AimdConfig::default();
        let mut st = AimdState::new(&cfg);
        st.cwnd = 64.0;
        assert!(st.on_loss(&cfg, 1.0, 0.03));
        assert!(!st.on_loss(&cfg, 1.01, 0.03));
        assert_relative_eq!(st.cwnd, 32.0);
        assert!(st.on_loss(&cfg, 1.04, 0.03));
        assert_relative_eq!(st.cwnd, 16.0);
    }

    #[test]
    fn window_floor() {
        let cfg = AimdConfig::default();
        let mut st = AimdState::new(&cfg);
        for i in 0..10 {
            st.on_loss(&cfg, i as f64, 0.5);
        }
        assert_relative_eq!(st.cwnd, cfg.min_window);
    }
}
