//! Per-flow rate control: Starting, Decision-Making and Rate-Adjusting.
//!
//! The controller is fed finalized monitor intervals and answers with rate
//! commands. Rates advance only on feedback, so the state machine is a pure
//! function of the utility sequence and the trial-ordering randomness: same
//! seed and same metrics give the same rate sequence.
//!
//! Every command bumps a generation counter. Intervals opened under an older
//! generation may still finalize later (timeout stragglers, queue-inflated
//! feedback delays); their metrics describe a superseded rate and are
//! ignored rather than fed into the comparison logic.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::monitor::MiSchedule;
use crate::utility::{
    empirical_utility, PerformanceMetrics, Rate, UtilityError, UtilityFunctionId, UtilityValue,
};

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("epsilon bounds must satisfy 0 < min <= max < 1, got [{min}, {max}]")]
    InvalidEpsilon { min: f64, max: f64 },
    #[error("rct_pairs must be at least 1")]
    NoPairs,
    #[error("trial perturbation must be positive (rate {rate}, epsilon {epsilon})")]
    DegenerateTrial { rate: f64, epsilon: f64 },
    #[error("operation requires the {0:?} phase")]
    WrongPhase(Phase),
    #[error("decision results are incomplete: {got} of {want} trials")]
    IncompleteResults { got: usize, want: usize },
    #[error("monitor interval {0} was never registered")]
    UnknownMi(u64),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// Controller tuning; defaults follow the prototype.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub utility: UtilityFunctionId,
    pub initial_rate: Rate,
    pub mi_schedule: MiSchedule,
    pub rct_pairs: usize,
    /// Pacing floor; updates below it clamp and force a fresh decision.
    pub min_rate: Rate,
}

impl ControllerConfig {
    pub const DEFAULT_EPSILON_MIN: f64 = 0.01;
    pub const DEFAULT_EPSILON_MAX: f64 = 0.05;
    pub const DEFAULT_RCT_PAIRS: usize = 2;

    /// Defaults for a path with the given RTT estimate: start at two packets
    /// per RTT, floor at one packet per RTT.
    pub fn new(rtt_estimate: f64) -> Result<Self, ControllerError> {
        let cfg = ControllerConfig {
            epsilon_min: Self::DEFAULT_EPSILON_MIN,
            epsilon_max: Self::DEFAULT_EPSILON_MAX,
            utility: UtilityFunctionId::Safe,
            initial_rate: Rate::new(2.0 / rtt_estimate)?,
            mi_schedule: MiSchedule::new(rtt_estimate).map_err(|_| {
                ControllerError::DegenerateTrial {
                    rate: 0.0,
                    epsilon: 0.0,
                }
            })?,
            rct_pairs: Self::DEFAULT_RCT_PAIRS,
            min_rate: Rate::new(1.0 / rtt_estimate)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.epsilon_min > 0.0
            && self.epsilon_min <= self.epsilon_max
            && self.epsilon_max < 1.0)
        {
            return Err(ControllerError::InvalidEpsilon {
                min: self.epsilon_min,
                max: self.epsilon_max,
            });
        }
        if self.rct_pairs == 0 {
            return Err(ControllerError::NoPairs);
        }
        Ok(())
    }
}

/// One planned trial interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRate {
    pub rate: Rate,
    pub is_high: bool,
}

/// Plans `pairs` randomized controlled trials: each pair holds one interval
/// at `(1+epsilon) * rate` and one at `(1-epsilon) * rate`, order drawn
/// independently per pair.
pub fn plan_rct(
    rate: Rate,
    epsilon: f64,
    pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrialRate>, ControllerError> {
    if pairs == 0 {
        return Err(ControllerError::NoPairs);
    }
    if epsilon <= 0.0 || rate.pps() * epsilon <= 0.0 {
        return Err(ControllerError::DegenerateTrial {
            rate: rate.pps(),
            epsilon,
        });
    }
    let high = TrialRate {
        rate: Rate::new(rate.pps() * (1.0 + epsilon))?,
        is_high: true,
    };
    let low = TrialRate {
        rate: Rate::new(rate.pps() * (1.0 - epsilon))?,
        is_high: false,
    };
    let mut plan = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        if rng.random::<bool>() {
            plan.push(high);
            plan.push(low);
        } else {
            plan.push(low);
            plan.push(high);
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    Starting,
    Decision,
    Adjusting,
}

/// Consecutive non-improving utility samples tolerated in the starting
/// phase before exiting. A single small interval with one random loss
/// measures far past the utility's loss cutoff; exiting on that one sample
/// strands the flow at a low rate, so the decrease must persist.
const STARTING_CONFIRMATIONS: u32 = 2;

#[derive(Debug)]
enum PhaseState {
    Starting {
        /// Best utility confirmed so far.
        reference: Option<UtilityValue>,
        /// Consecutive samples at or below the reference.
        dips: u32,
    },
    Decision {
        base: Rate,
        epsilon: f64,
        plan: Vec<TrialRate>,
        issued: usize,
        results: Vec<Option<UtilityValue>>,
    },
    Adjusting {
        dir: f64,
        step_n: u32,
        last_utility: UtilityValue,
        prev_rate: Rate,
    },
}

/// What an interval was opened for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MiRole {
    /// Starting-phase doubling probe.
    Probe,
    /// Decision-phase trial with this plan index.
    Trial(usize),
    /// Post-trial interval at the base rate; measured but never compared.
    Interim,
    /// Adjusting-phase interval at the current rate.
    Step,
}

#[derive(Debug, Clone, Copy)]
struct MiTag {
    generation: u64,
    role: MiRole,
}

/// Snapshot of the control state for tracing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseInfo {
    pub phase: Phase,
    pub epsilon: f64,
    pub dir: i8,
}

/// A command produced by feedback processing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateUpdate {
    pub new_rate: Rate,
    pub phase: PhaseInfo,
    pub phase_changed: bool,
}

pub struct Controller {
    cfg: ControllerConfig,
    state: PhaseState,
    current_rate: Rate,
    generation: u64,
    tags: HashMap<u64, MiTag>,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("phase", &self.phase_info())
            .field("current_rate", &self.current_rate)
            .field("generation", &self.generation)
            .finish()
    }
}

impl Controller {
    pub fn new(cfg: ControllerConfig, rng: ChaCha8Rng) -> Result<Self, ControllerError> {
        cfg.validate()?;
        Ok(Controller {
            current_rate: cfg.initial_rate,
            cfg,
            state: PhaseState::Starting {
                reference: None,
                dips: 0,
            },
            generation: 0,
            tags: HashMap::new(),
            rng,
        })
    }

    pub fn current_rate(&self) -> Rate {
        self.current_rate
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn phase_info(&self) -> PhaseInfo {
        match &self.state {
            PhaseState::Starting { .. } => PhaseInfo {
                phase: Phase::Starting,
                epsilon: self.cfg.epsilon_min,
                dir: 0,
            },
            PhaseState::Decision { epsilon, .. } => PhaseInfo {
                phase: Phase::Decision,
                epsilon: *epsilon,
                dir: 0,
            },
            PhaseState::Adjusting { dir, .. } => PhaseInfo {
                phase: Phase::Adjusting,
                epsilon: self.cfg.epsilon_min,
                dir: *dir as i8,
            },
        }
    }

    /// Registers a freshly opened interval and returns the rate it must run
    /// at. Decision phases hand out the planned trial rates in order, then
    /// fall back to the base rate while feedback accumulates.
    pub fn register_mi(&mut self, mi_id: u64) -> Rate {
        let (role, rate) = match &mut self.state {
            PhaseState::Starting { .. } => (MiRole::Probe, self.current_rate),
            PhaseState::Decision {
                base, plan, issued, ..
            } => {
                if *issued < plan.len() {
                    let t = plan[*issued];
                    let idx = *issued;
                    *issued += 1;
                    // Trials never dip under the pacing floor.
                    let r = if t.rate < self.cfg.min_rate {
                        self.cfg.min_rate
                    } else {
                        t.rate
                    };
                    (MiRole::Trial(idx), r)
                } else {
                    (MiRole::Interim, *base)
                }
            }
            PhaseState::Adjusting { .. } => (MiRole::Step, self.current_rate),
        };
        self.tags.insert(
            mi_id,
            MiTag {
                generation: self.generation,
                role,
            },
        );
        rate
    }

    /// Registers the interval opened by a realign. It runs at the commanded
    /// rate, so it never consumes a planned trial slot: a decision-entry
    /// command yields an interim interval at the base rate and the trials
    /// start from the next natural boundary.
    pub fn register_commanded_mi(&mut self, mi_id: u64) {
        let role = match &self.state {
            PhaseState::Starting { .. } => MiRole::Probe,
            PhaseState::Decision { .. } => MiRole::Interim,
            PhaseState::Adjusting { .. } => MiRole::Step,
        };
        self.tags.insert(
            mi_id,
            MiTag {
                generation: self.generation,
                role,
            },
        );
    }

    /// Drops the bookkeeping for an interval that will never finalize
    /// (truncated by a realign or by the flow stopping).
    pub fn forget_mi(&mut self, mi_id: u64) {
        self.tags.remove(&mi_id);
    }

    /// Routes a finalized interval's metrics to the phase logic. Returns a
    /// command when the controller wants the sending rate changed right away
    /// (the caller realigns the open interval), `None` when the feedback was
    /// buffered, interim, or stale.
    pub fn on_mi_finalized(
        &mut self,
        mi_id: u64,
        metrics: &PerformanceMetrics,
    ) -> Result<Option<RateUpdate>, ControllerError> {
        let tag = self
            .tags
            .remove(&mi_id)
            .ok_or(ControllerError::UnknownMi(mi_id))?;
        if tag.generation != self.generation {
            return Ok(None);
        }
        let u = empirical_utility(self.cfg.utility, metrics)?;
        match tag.role {
            MiRole::Probe => Ok(Some(self.on_starting_utility(u, metrics.sent_rate)?)),
            MiRole::Interim => Ok(None),
            MiRole::Step => Ok(Some(self.on_adjusting_utility(u)?)),
            MiRole::Trial(idx) => {
                let complete = match &mut self.state {
                    PhaseState::Decision { results, plan, .. } => {
                        results[idx] = Some(u);
                        results.iter().all(Option::is_some) && {
                            debug_assert_eq!(results.len(), plan.len());
                            true
                        }
                    }
                    _ => unreachable!("trial tag outlives decision phase only via generation"),
                };
                if complete {
                    let gathered: Vec<(TrialRate, UtilityValue)> = match &self.state {
                        PhaseState::Decision { plan, results, .. } => plan
                            .iter()
                            .zip(results.iter())
                            .map(|(t, r)| (*t, r.unwrap()))
                            .collect(),
                        _ => unreachable!(),
                    };
                    Ok(Some(self.on_decision_utilities(&gathered)?))
                } else {
                    Ok(None)
                }
            }
        }
    }

    /// Starting state: each utility above the best seen doubles the rate. A
    /// decrease holds the rate and retests; once the decrease persists for
    /// `STARTING_CONFIRMATIONS` further samples, the controller returns to
    /// the previous rate (half of the one whose utility fell) and enters
    /// decision making.
    pub fn on_starting_utility(
        &mut self,
        u_new: UtilityValue,
        measured_rate: Rate,
    ) -> Result<RateUpdate, ControllerError> {
        let (reference, dips) = match &mut self.state {
            PhaseState::Starting { reference, dips } => (reference, dips),
            _ => return Err(ControllerError::WrongPhase(Phase::Starting)),
        };
        let improved = match reference {
            None => true,
            Some(best) => u_new > *best,
        };
        if improved {
            *reference = Some(u_new);
            *dips = 0;
            let doubled = Rate::new(self.current_rate.pps() * 2.0)?;
            Ok(self.command(doubled, false))
        } else if *dips < STARTING_CONFIRMATIONS {
            *dips += 1;
            // Hold the rate; the interval already in flight is the retest.
            Ok(self.command(measured_rate, false))
        } else {
            let back = Rate::new(measured_rate.pps() / 2.0)?;
            let back = self.clamp_floor(back);
            self.enter_decision(back, self.cfg.epsilon_min)?;
            Ok(self.command(back, true))
        }
    }

    /// Decision state: acts once per full trial plan. The higher rate must
    /// win every pair to move up, the lower every pair to move down; any
    /// split holds the rate and retries at coarser granularity.
    pub fn on_decision_utilities(
        &mut self,
        results: &[(TrialRate, UtilityValue)],
    ) -> Result<RateUpdate, ControllerError> {
        let (base, epsilon) = match &self.state {
            PhaseState::Decision {
                base,
                epsilon,
                plan,
                ..
            } => {
                if results.len() != plan.len() {
                    return Err(ControllerError::IncompleteResults {
                        got: results.len(),
                        want: plan.len(),
                    });
                }
                (*base, *epsilon)
            }
            _ => return Err(ControllerError::WrongPhase(Phase::Decision)),
        };
        let mut all_high = true;
        let mut all_low = true;
        for pair in results.chunks_exact(2) {
            let (u_plus, u_minus) = if pair[0].0.is_high {
                (pair[0].1, pair[1].1)
            } else {
                (pair[1].1, pair[0].1)
            };
            // Ties count as "not greater": a tied pair is inconclusive.
            all_high &= u_plus > u_minus;
            all_low &= u_minus > u_plus;
        }
        if all_high || all_low {
            let (dir, winner_high) = if all_high { (1.0, true) } else { (-1.0, false) };
            let target = Rate::new(base.pps() * (1.0 + dir * epsilon))?;
            let clamped = self.clamp_floor(target);
            // Baseline for the adjusting comparisons: the smallest of the
            // winning-direction trials. A selection-inflated baseline stalls
            // the first adjusting step whenever measurement noise is wide.
            let winner_utility = results
                .iter()
                .filter(|(t, _)| t.is_high == winner_high)
                .map(|(_, u)| *u)
                .fold(f64::INFINITY, f64::min);
            if clamped < target {
                // Floor hit; a fresh decision from the floor instead.
                self.enter_decision(clamped, self.cfg.epsilon_min)?;
            } else {
                self.state = PhaseState::Adjusting {
                    dir,
                    step_n: 0,
                    last_utility: winner_utility,
                    prev_rate: clamped,
                };
            }
            Ok(self.command(clamped, true))
        } else {
            let escalated = (epsilon + self.cfg.epsilon_min).min(self.cfg.epsilon_max);
            self.enter_decision(base, escalated)?;
            Ok(self.command(base, false))
        }
    }

    /// Adjusting state: non-decreasing utility accelerates the move
    /// (`r_n = r_{n-1} * (1 + n * eps_min * dir)`); a drop reverts one step
    /// and re-enters decision making.
    pub fn on_adjusting_utility(
        &mut self,
        u_n: UtilityValue,
    ) -> Result<RateUpdate, ControllerError> {
        let (dir, step_n, last_utility, prev_rate) = match &self.state {
            PhaseState::Adjusting {
                dir,
                step_n,
                last_utility,
                prev_rate,
            } => (*dir, *step_n, *last_utility, *prev_rate),
            _ => return Err(ControllerError::WrongPhase(Phase::Adjusting)),
        };
        if u_n >= last_utility {
            let n = step_n + 1;
            let factor = 1.0 + n as f64 * self.cfg.epsilon_min * dir;
            let target = self.current_rate.pps() * factor;
            if factor <= 0.0 || target < self.cfg.min_rate.pps() {
                let floor = self.cfg.min_rate;
                self.enter_decision(floor, self.cfg.epsilon_min)?;
                return Ok(self.command(floor, true));
            }
            let prev = self.current_rate;
            let next = Rate::new(target)?;
            self.state = PhaseState::Adjusting {
                dir,
                step_n: n,
                last_utility: u_n,
                prev_rate: prev,
            };
            Ok(self.command(next, false))
        } else {
            self.enter_decision(prev_rate, self.cfg.epsilon_min)?;
            Ok(self.command(prev_rate, true))
        }
    }

    fn enter_decision(&mut self, base: Rate, epsilon: f64) -> Result<(), ControllerError> {
        let plan = plan_rct(base, epsilon, self.cfg.rct_pairs, &mut self.rng)?;
        let n = plan.len();
        self.state = PhaseState::Decision {
            base,
            epsilon,
            plan,
            issued: 0,
            results: vec![None; n],
        };
        Ok(())
    }

    fn clamp_floor(&self, r: Rate) -> Rate {
        if r < self.cfg.min_rate {
            self.cfg.min_rate
        } else {
            r
        }
    }

    /// The generation advances only when the commanded rate changes:
    /// intervals measuring a superseded rate become stale, while same-rate
    /// holds keep in-flight measurements valid (the starting-phase retest
    /// depends on this).
    fn command(&mut self, rate: Rate, phase_changed: bool) -> RateUpdate {
        if rate != self.current_rate || phase_changed {
            self.generation += 1;
        }
        self.current_rate = rate;
        RateUpdate {
            new_rate: rate,
            phase: self.phase_info(),
            phase_changed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, StreamPurpose};
    use approx::assert_relative_eq;

    fn rate(pps: f64) -> Rate {
        Rate::new(pps).unwrap()
    }

    fn controller() -> Controller {
        let cfg = ControllerConfig::new(0.03).unwrap();
        Controller::new(cfg, substream(1, 0, StreamPurpose::RctOrder)).unwrap()
    }

    fn metrics(throughput: f64, loss: f64, sent: f64) -> PerformanceMetrics {
        PerformanceMetrics::new(rate(throughput), loss, 0.03, 0.03, rate(sent)).unwrap()
    }

    #[test]
    fn starting_doubles_on_rising_utility() {
        let mut c = controller();
        let r0 = c.current_rate().pps();
        let up1 = c.on_starting_utility(10.0, rate(r0)).unwrap();
        assert_relative_eq!(up1.new_rate.pps(), 2.0 * r0);
        let up2 = c.on_starting_utility(25.0, up1.new_rate).unwrap();
        assert_relative_eq!(up2.new_rate.pps(), 4.0 * r0);
        let up3 = c.on_starting_utility(60.0, up2.new_rate).unwrap();
        assert_relative_eq!(up3.new_rate.pps(), 8.0 * r0);
        assert_eq!(up3.phase.phase, Phase::Starting);
    }

    #[test]
    fn starting_first_utility_always_doubles() {
        let mut c = controller();
        let r0 = c.current_rate().pps();
        // Strongly negative first utility still doubles: nothing to compare.
        let up = c.on_starting_utility(-1e6, rate(r0)).unwrap();
        assert_relative_eq!(up.new_rate.pps(), 2.0 * r0);
    }

    #[test]
    fn starting_exits_to_half_on_persistent_drop() {
        let mut c = controller();
        let r0 = c.current_rate().pps();
        c.on_starting_utility(10.0, rate(r0)).unwrap();
        c.on_starting_utility(25.0, rate(2.0 * r0)).unwrap();
        c.on_starting_utility(60.0, rate(4.0 * r0)).unwrap();
        // Utility falls at 8 r0 and stays down through the retests: the
        // controller commands 4 r0 and enters decision making.
        let hold1 = c.on_starting_utility(40.0, rate(8.0 * r0)).unwrap();
        assert_relative_eq!(hold1.new_rate.pps(), 8.0 * r0);
        assert_eq!(hold1.phase.phase, Phase::Starting);
        let hold2 = c.on_starting_utility(42.0, rate(8.0 * r0)).unwrap();
        assert_relative_eq!(hold2.new_rate.pps(), 8.0 * r0);
        let upd = c.on_starting_utility(41.0, rate(8.0 * r0)).unwrap();
        assert_relative_eq!(upd.new_rate.pps(), 4.0 * r0);
        assert_eq!(upd.phase.phase, Phase::Decision);
        assert_eq!(upd.phase.epsilon, 0.01);
        assert!(upd.phase_changed);
    }

    #[test]
    fn starting_recovers_from_noise_dip() {
        // One bad sample (a random loss in a ten-packet interval) must not
        // end the starting phase if the next sample recovers.
        let mut c = controller();
        let r0 = c.current_rate().pps();
        c.on_starting_utility(10.0, rate(r0)).unwrap();
        c.on_starting_utility(25.0, rate(2.0 * r0)).unwrap();
        let hold = c.on_starting_utility(-40.0, rate(4.0 * r0)).unwrap();
        assert_eq!(hold.phase.phase, Phase::Starting);
        assert_relative_eq!(hold.new_rate.pps(), 4.0 * r0);
        let resume = c.on_starting_utility(55.0, rate(4.0 * r0)).unwrap();
        assert_eq!(resume.phase.phase, Phase::Starting);
        assert_relative_eq!(resume.new_rate.pps(), 8.0 * r0);
    }

    #[test]
    fn plan_structure_and_orders() {
        let mut rng = substream(9, 3, StreamPurpose::RctOrder);
        let mut saw_high_first = false;
        let mut saw_low_first = false;
        for _ in 0..1000 {
            let plan = plan_rct(rate(100.0), 0.01, 2, &mut rng).unwrap();
            assert_eq!(plan.len(), 4);
            for pair in plan.chunks_exact(2) {
                assert_ne!(pair[0].is_high, pair[1].is_high);
                for t in pair {
                    let expect = if t.is_high { 101.0 } else { 99.0 };
                    assert_relative_eq!(t.rate.pps(), expect, max_relative = 1e-12);
                }
                saw_high_first |= pair[0].is_high;
                saw_low_first |= !pair[0].is_high;
            }
        }
        assert!(saw_high_first && saw_low_first);
    }

    #[test]
    fn plan_rejects_degenerate() {
        let mut rng = substream(9, 3, StreamPurpose::RctOrder);
        assert!(plan_rct(rate(100.0), 0.0, 2, &mut rng).is_err());
        assert!(plan_rct(Rate::ZERO, 0.01, 2, &mut rng).is_err());
        assert!(plan_rct(rate(100.0), 0.01, 0, &mut rng).is_err());
    }

    /// Drives a fresh controller into the decision phase at base rate r0.
    fn into_decision(c: &mut Controller) -> Rate {
        let r0 = c.current_rate().pps();
        c.on_starting_utility(10.0, rate(r0)).unwrap();
        c.on_starting_utility(5.0, rate(2.0 * r0)).unwrap();
        c.on_starting_utility(5.0, rate(2.0 * r0)).unwrap();
        let upd = c.on_starting_utility(5.0, rate(2.0 * r0)).unwrap();
        assert_eq!(upd.phase.phase, Phase::Decision);
        upd.new_rate
    }

    fn run_trials(c: &mut Controller, base: Rate, mut u_of: impl FnMut(bool) -> f64) -> RateUpdate {
        let mut update = None;
        for mi in 100..104 {
            let r = c.register_mi(mi);
            let is_high = r > base;
            let m = metrics(r.pps(), 0.0, r.pps());
            // Overwrite the measured utility path by calling the decision
            // routine through the dispatcher with crafted throughput: the
            // utility is monotone in throughput at zero loss, so encode the
            // desired ordering through it.
            let _ = m;
            let u = u_of(is_high);
            let done = match &mut c.state {
                PhaseState::Decision { results, plan, .. } => {
                    let idx = (mi - 100) as usize;
                    assert_relative_eq!(
                        plan[idx].rate.pps(),
                        r.pps().max(c.cfg.min_rate.pps()),
                        max_relative = 1e-12
                    );
                    results[idx] = Some(u);
                    results.iter().all(Option::is_some)
                }
                _ => panic!("expected decision phase"),
            };
            if done {
                let gathered: Vec<(TrialRate, UtilityValue)> = match &c.state {
                    PhaseState::Decision { plan, results, .. } => plan
                        .iter()
                        .zip(results.iter())
                        .map(|(t, r)| (*t, r.unwrap()))
                        .collect(),
                    _ => unreachable!(),
                };
                update = Some(c.on_decision_utilities(&gathered).unwrap());
            }
        }
        update.expect("four trials complete the plan")
    }

    #[test]
    fn consistent_high_moves_up() {
        let mut c = controller();
        let base = into_decision(&mut c);
        let upd = run_trials(&mut c, base, |high| if high { 10.0 } else { 5.0 });
        assert_relative_eq!(upd.new_rate.pps(), base.pps() * 1.01, max_relative = 1e-12);
        assert_eq!(upd.phase.phase, Phase::Adjusting);
        assert_eq!(upd.phase.dir, 1);
    }

    #[test]
    fn consistent_low_moves_down() {
        let mut c = controller();
        let base = into_decision(&mut c);
        let upd = run_trials(&mut c, base, |high| if high { 5.0 } else { 10.0 });
        assert_relative_eq!(upd.new_rate.pps(), base.pps() * 0.99, max_relative = 1e-12);
        assert_eq!(upd.phase.dir, -1);
    }

    /// Pair 0 favors the higher rate, pair 1 the lower: inconclusive.
    fn mixed_outcomes() -> impl FnMut(bool) -> f64 {
        let mut call = 0usize;
        move |is_high| {
            let pair = call / 2;
            call += 1;
            match (pair, is_high) {
                (0, true) | (1, false) => 10.0,
                _ => 5.0,
            }
        }
    }

    #[test]
    fn mixed_results_escalate_epsilon() {
        let mut c = controller();
        let base = into_decision(&mut c);
        let upd = run_trials(&mut c, base, mixed_outcomes());
        assert_eq!(upd.new_rate, base);
        assert_eq!(upd.phase.phase, Phase::Decision);
        assert_relative_eq!(upd.phase.epsilon, 0.02, max_relative = 1e-12);
        assert!(!upd.phase_changed);
    }

    #[test]
    fn tied_pair_is_inconclusive() {
        let mut c = controller();
        let base = into_decision(&mut c);
        let upd = run_trials(&mut c, base, |_| 7.0);
        assert_eq!(upd.new_rate, base);
        assert_eq!(upd.phase.phase, Phase::Decision);
    }

    #[test]
    fn epsilon_saturates_at_max() {
        let mut c = controller();
        let mut base = into_decision(&mut c);
        for _ in 0..8 {
            let upd = run_trials(&mut c, base, mixed_outcomes());
            base = upd.new_rate;
            assert!(upd.phase.epsilon <= 0.05 + 1e-12);
        }
        assert_relative_eq!(c.phase_info().epsilon, 0.05, max_relative = 1e-12);
    }

    #[test]
    fn adjusting_accelerates_per_recurrence() {
        let mut c = controller();
        let base = into_decision(&mut c);
        let upd = run_trials(&mut c, base, |high| if high { 10.0 } else { 5.0 });
        // Rescale to the documented example: treat the post-decision rate as 100.
        let r0 = upd.new_rate.pps();
        let s1 = c.on_adjusting_utility(11.0).unwrap();
        assert_relative_eq!(s1.new_rate.pps() / r0, 1.01, max_relative = 1e-12);
        let s2 = c.on_adjusting_utility(12.0).unwrap();
        assert_relative_eq!(s2.new_rate.pps() / r0, 1.01 * 1.02, max_relative = 1e-12);
        let s3 = c.on_adjusting_utility(13.0).unwrap();
        assert_relative_eq!(
            s3.new_rate.pps() / r0,
            1.01 * 1.02 * 1.03,
            max_relative = 1e-12
        );
        // Utility falls at r_3: revert to r_2 and re-enter decision making.
        let s4 = c.on_adjusting_utility(12.5).unwrap();
        assert_relative_eq!(s4.new_rate.pps(), s2.new_rate.pps(), max_relative = 1e-12);
        assert_eq!(s4.phase.phase, Phase::Decision);
        assert_relative_eq!(s4.phase.epsilon, 0.01, max_relative = 1e-12);
    }

    #[test]
    fn adjusting_down_mirrors() {
        let mut c = controller();
        let base = into_decision(&mut c);
        let upd = run_trials(&mut c, base, |high| if high { 5.0 } else { 10.0 });
        let r0 = upd.new_rate.pps();
        let s1 = c.on_adjusting_utility(11.0).unwrap();
        assert_relative_eq!(s1.new_rate.pps() / r0, 0.99, max_relative = 1e-12);
        let s2 = c.on_adjusting_utility(12.0).unwrap();
        assert_relative_eq!(s2.new_rate.pps() / r0, 0.99 * 0.98, max_relative = 1e-12);
    }

    #[test]
    fn ties_continue_adjusting() {
        let mut c = controller();
        let base = into_decision(&mut c);
        c.on_decision_utilities(&[]).unwrap_err();
        let upd = run_trials(&mut c, base, |high| if high { 10.0 } else { 5.0 });
        let _ = upd;
        let s1 = c.on_adjusting_utility(11.0).unwrap();
        let s2 = c.on_adjusting_utility(11.0).unwrap();
        assert!(s2.new_rate > s1.new_rate);
        assert_eq!(s2.phase.phase, Phase::Adjusting);
    }

    #[test]
    fn dispatcher_routes_and_ignores_stale() {
        let mut c = controller();
        let r0 = c.current_rate();
        c.register_mi(0);
        c.register_mi(1);
        // First probe doubles the rate, bumping the generation.
        let upd = c
            .on_mi_finalized(0, &metrics(r0.pps(), 0.0, r0.pps()))
            .unwrap()
            .expect("probe produces a command");
        assert_relative_eq!(upd.new_rate.pps(), 2.0 * r0.pps());
        // Interval 1 was opened under the old generation: stale, ignored.
        let stale = c
            .on_mi_finalized(1, &metrics(r0.pps(), 0.0, r0.pps()))
            .unwrap();
        assert_eq!(stale, None);
        // Unknown interval is an error.
        assert!(matches!(
            c.on_mi_finalized(99, &metrics(1.0, 0.0, 1.0)),
            Err(ControllerError::UnknownMi(99))
        ));
    }

    #[test]
    fn interim_metrics_are_ignored() {
        let mut c = controller();
        into_decision(&mut c);
        // Issue the four trials plus one interim.
        for mi in 0..5 {
            c.register_mi(mi);
        }
        let out = c.on_mi_finalized(4, &metrics(100.0, 0.0, 100.0)).unwrap();
        assert_eq!(out, None);
    }

    #[test]
    fn rate_floor_clamps_and_forces_decision() {
        let mut c = controller();
        let floor = c.cfg.min_rate.pps();
        let base = into_decision(&mut c);
        let upd = run_trials(&mut c, base, |high| if high { 5.0 } else { 10.0 });
        assert_eq!(upd.phase.dir, -1);
        // Walk down until the floor engages.
        let mut last = upd.new_rate.pps();
        let mut u = 11.0;
        for _ in 0..400 {
            let s = c.on_adjusting_utility(u).unwrap();
            u += 1.0;
            if s.phase.phase == Phase::Decision {
                assert_relative_eq!(s.new_rate.pps(), floor, max_relative = 1e-12);
                return;
            }
            assert!(s.new_rate.pps() < last);
            last = s.new_rate.pps();
        }
        panic!("floor never engaged");
    }

    #[test]
    fn deterministic_given_seed_and_metrics() {
        let drive = || {
            let cfg = ControllerConfig::new(0.03).unwrap();
            let mut c = Controller::new(cfg, substream(77, 5, StreamPurpose::RctOrder)).unwrap();
            let mut rates = Vec::new();
            for mi in 0..200u64 {
                let r = c.register_mi(mi);
                let loss = if mi % 9 == 8 { 0.08 } else { 0.0 };
                let m = metrics(r.pps() * (1.0 - loss), loss, r.pps());
                if let Some(upd) = c.on_mi_finalized(mi, &m).unwrap() {
                    rates.push(upd.new_rate.pps());
                }
            }
            rates
        };
        assert_eq!(drive(), drive());
    }

    #[test]
    fn commanded_rates_stay_positive_and_bounded() {
        let cfg = ControllerConfig::new(0.03).unwrap();
        let mut c = Controller::new(cfg, substream(3, 2, StreamPurpose::RctOrder)).unwrap();
        let mut prev = c.current_rate().pps();
        for mi in 0..500u64 {
            let r = c.register_mi(mi);
            let loss = if mi % 7 < 2 { 0.1 } else { 0.0 };
            let m = metrics(r.pps() * (1.0 - loss), loss, r.pps());
            if let Some(upd) = c.on_mi_finalized(mi, &m).unwrap() {
                let ratio = upd.new_rate.pps() / prev;
                assert!(upd.new_rate.pps() > 0.0);
                assert!(ratio <= 2.0 + 1e-12, "ratio {ratio}");
                prev = upd.new_rate.pps();
            }
        }
    }
}
