//! Numerical analysis of the rate game: grid-search best responses, the
//! stable state of the multiplicative update dynamics, and the synchronous
//! dynamics themselves.
//!
//! Two notions of "best response" coexist here. `best_response` is the plain
//! utility argmax over a rate grid. Iterating it does not reach the fair
//! stable state: the utility has a kink where aggregate demand meets
//! capacity, and argmax iteration parks on a continuum of unfair rest points
//! exactly at capacity. The protocol's senders never take an argmax; they
//! choose between `(1 ± eps) * rate`, and the state where that choice flips
//! is strictly above the kink. `find_equilibrium` therefore iterates the
//! per-sender flip point, which does converge to the unique fair state with
//! aggregate inside `(C, 20C/19)`, matching the dynamics.

use thiserror::Error;

use crate::rng::SplitMix64;
use crate::utility::{min_alpha, utility_raw, GameModel, Rate, UtilityError};

/// Lowest rate any sender considers, packets per second.
pub const RATE_FLOOR: f64 = 1.0;

/// Default trial step of the update dynamics.
pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error("grid resolution {grid} is coarser than capacity/10^4 = {max}")]
    GridTooCoarse { grid: f64, max: f64 },
    #[error("alpha {alpha} is below the fairness threshold {needed} for n = {n}")]
    AlphaTooSmall { alpha: f64, needed: f64, n: usize },
    #[error("epsilon must lie in (0, 0.1], got {0}")]
    InvalidEpsilon(f64),
    #[error("starting rates must be positive")]
    NonPositiveStart,
    #[error("starting vector has {got} rates, model has {want} senders")]
    WrongArity { got: usize, want: usize },
    #[error("no convergence after {rounds} rounds (residual {residual})")]
    NoConvergence {
        rounds: usize,
        residual: f64,
        last: EquilibriumSolution,
    },
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// Converged state of the flip-point iteration.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub rates: Vec<Rate>,
    pub aggregate: Rate,
    /// Max pairwise rate difference is below twice the grid resolution.
    pub fair: bool,
    /// Largest per-sender move in the final round.
    pub residual: f64,
    /// Aggregate lies strictly inside `(C, 20C/19)`.
    pub in_region: bool,
}

impl EquilibriumSolution {
    pub fn max_pairwise_diff(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in &self.rates {
            lo = lo.min(r.pps());
            hi = hi.max(r.pps());
        }
        hi - lo
    }
}

/// Solver knobs. `grid` is the final search resolution; the fairness check
/// uses twice this value.
#[derive(Debug, Clone)]
pub struct EquilibriumOptions {
    pub epsilon: f64,
    pub grid: f64,
    pub max_rounds: usize,
    pub start: Option<Vec<f64>>,
}

impl EquilibriumOptions {
    pub fn for_model(model: &GameModel) -> Self {
        EquilibriumOptions {
            epsilon: DEFAULT_EPSILON,
            grid: model.capacity.pps() * 1e-4,
            max_rounds: 20_000,
            start: None,
        }
    }
}

fn check_grid(grid: f64, capacity: f64) -> Result<(), EquilibriumError> {
    let max = capacity * 1e-4;
    if grid.is_nan() || grid <= 0.0 || grid > max * (1.0 + 1e-12) {
        return Err(EquilibriumError::GridTooCoarse { grid, max });
    }
    Ok(())
}

/// Utility argmax for sender `i` over the grid `[1 pkt/s, 2C]`, refined
/// twice around the coarse maximum; ties break toward the lower rate.
pub fn best_response(
    i: usize,
    others: &[Rate],
    model: &GameModel,
    grid: f64,
) -> Result<Rate, EquilibriumError> {
    check_grid(grid, model.capacity.pps())?;
    let others_sum: f64 = others.iter().map(|r| r.pps()).sum();
    let _ = i; // the game is symmetric in everything but the rate vector
    let capacity = model.capacity.pps();
    let alpha = model.alpha;
    let eval = |x: f64| utility_raw(x, others_sum + x, capacity, alpha);

    let mut lo = RATE_FLOOR;
    let mut hi = 2.0 * capacity;
    let mut step = grid * 100.0;
    let mut best = scan_argmax(&eval, lo, hi, step);
    for _ in 0..2 {
        lo = (best - step).max(RATE_FLOOR);
        hi = (best + step).min(2.0 * capacity);
        step /= 10.0;
        best = scan_argmax(&eval, lo, hi, step);
    }
    Ok(Rate::new(best)?)
}

fn scan_argmax(eval: &impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
    let mut best_x = lo;
    let mut best_u = eval(lo);
    let mut x = lo + step;
    while x <= hi + step * 1e-9 {
        let clamped = x.min(hi);
        let u = eval(clamped);
        if u > best_u {
            best_u = u;
            best_x = clamped;
        }
        x += step;
    }
    best_x
}

/// The rate at which a sender's `(1 ± eps)` comparison flips from
/// "increase" to "decrease", holding the others fixed. This is the rest
/// point of the sender's own update rule.
fn flip_point(start: f64, others_sum: f64, model: &GameModel, epsilon: f64, tol: f64) -> f64 {
    let capacity = model.capacity.pps();
    let alpha = model.alpha;
    let up_wins = |x: f64| {
        let up = utility_raw(
            x * (1.0 + epsilon),
            others_sum + x * (1.0 + epsilon),
            capacity,
            alpha,
        );
        let down = utility_raw(
            x * (1.0 - epsilon),
            others_sum + x * (1.0 - epsilon),
            capacity,
            alpha,
        );
        up > down
    };
    let mut x = start.max(RATE_FLOOR);
    let (mut lo, mut hi);
    if up_wins(x) {
        let cap = 4.0 * capacity;
        while up_wins(x) && x < cap {
            x *= 1.0 + epsilon;
        }
        lo = x / (1.0 + epsilon);
        hi = x;
    } else {
        while !up_wins(x) && x > RATE_FLOOR {
            x *= 1.0 - epsilon;
        }
        lo = x.max(RATE_FLOOR);
        hi = (x / (1.0 - epsilon)).max(RATE_FLOOR);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if up_wins(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Iterates per-sender flip points until no sender moves by more than a
/// small fraction of the grid, then reports fairness and the aggregate
/// region check.
pub fn find_equilibrium(
    model: &GameModel,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumSolution, EquilibriumError> {
    let capacity = model.capacity.pps();
    check_grid(opts.grid, capacity)?;
    if !(opts.epsilon > 0.0 && opts.epsilon <= 0.1) {
        return Err(EquilibriumError::InvalidEpsilon(opts.epsilon));
    }
    let needed = min_alpha(model.n)?;
    if model.alpha < needed {
        return Err(EquilibriumError::AlphaTooSmall {
            alpha: model.alpha,
            needed,
            n: model.n,
        });
    }
    let mut x: Vec<f64> = match &opts.start {
        Some(v) => {
            if v.len() != model.n {
                return Err(EquilibriumError::WrongArity {
                    got: v.len(),
                    want: model.n,
                });
            }
            if v.iter().any(|&r| r.is_nan() || r <= 0.0) {
                return Err(EquilibriumError::NonPositiveStart);
            }
            v.clone()
        }
        None => vec![0.75 * capacity / model.n as f64; model.n],
    };
    // Bisection must resolve the flip point an order finer than the outer
    // stopping tolerance, or the residual floors at bisection noise.
    let tol = opts.grid / 1000.0;
    let bisect_tol = tol / 10.0;
    let mut residual = f64::INFINITY;
    for _round in 0..opts.max_rounds {
        residual = 0.0;
        for i in 0..model.n {
            let others: f64 = x
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| v)
                .sum();
            let next = flip_point(x[i], others, model, opts.epsilon, bisect_tol);
            residual = residual.max((next - x[i]).abs());
            x[i] = next;
        }
        if residual < tol {
            return Ok(solution(&x, model, opts.grid, residual));
        }
    }
    Err(EquilibriumError::NoConvergence {
        rounds: opts.max_rounds,
        residual,
        last: solution(&x, model, opts.grid, residual),
    })
}

fn solution(x: &[f64], model: &GameModel, grid: f64, residual: f64) -> EquilibriumSolution {
    let rates: Vec<Rate> = x
        .iter()
        .map(|&v| Rate::new(v).expect("iterates stay positive"))
        .collect();
    let aggregate = x.iter().sum::<f64>();
    let capacity = model.capacity.pps();
    let sol = EquilibriumSolution {
        aggregate: Rate::new(aggregate).expect("aggregate is positive"),
        fair: false,
        residual,
        in_region: aggregate > capacity && aggregate < capacity * 20.0 / 19.0,
        rates,
    };
    EquilibriumSolution {
        fair: sol.max_pairwise_diff() < 2.0 * grid,
        ..sol
    }
}

/// One synchronous trajectory of the update rule
/// `x_j <- x_j * (1 + eps)` if raising beats lowering, else
/// `x_j * (1 - eps)`, all senders moving at once.
#[derive(Debug, Clone)]
pub struct DynamicsTrajectory {
    pub steps: Vec<Vec<f64>>,
    pub epsilon: f64,
    /// Stable-state rate used for the band check.
    pub x_hat: f64,
    /// `(x_hat (1-eps)^2, x_hat (1+eps)^2)`.
    pub band: (f64, f64),
    /// First step at which every sender is inside the band.
    pub converged_at: Option<usize>,
}

impl DynamicsTrajectory {
    /// True if every sender stays inside the band over the last `window`
    /// recorded steps.
    pub fn stays_in_band(&self, window: usize) -> bool {
        let n = self.steps.len();
        if n < window {
            return false;
        }
        self.steps[n - window..]
            .iter()
            .all(|xs| xs.iter().all(|&x| x > self.band.0 && x < self.band.1))
    }
}

/// Runs the synchronous dynamics for `steps` steps from `x0`. The recorded
/// trajectory includes the start, so it holds `steps + 1` states.
pub fn run_dynamics(
    model: &GameModel,
    x0: &[f64],
    epsilon: f64,
    steps: usize,
) -> Result<DynamicsTrajectory, EquilibriumError> {
    if !(epsilon > 0.0 && epsilon <= 0.1) {
        return Err(EquilibriumError::InvalidEpsilon(epsilon));
    }
    if x0.len() != model.n {
        return Err(EquilibriumError::WrongArity {
            got: x0.len(),
            want: model.n,
        });
    }
    if x0.iter().any(|&x| x.is_nan() || x <= 0.0) {
        return Err(EquilibriumError::NonPositiveStart);
    }
    let mut opts = EquilibriumOptions::for_model(model);
    opts.epsilon = epsilon;
    let x_hat = find_equilibrium(model, &opts)?.rates[0].pps();
    let band = (
        x_hat * (1.0 - epsilon) * (1.0 - epsilon),
        x_hat * (1.0 + epsilon) * (1.0 + epsilon),
    );

    let capacity = model.capacity.pps();
    let alpha = model.alpha;
    let mut x = x0.to_vec();
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(x.clone());
    let mut converged_at = if x.iter().all(|&v| v > band.0 && v < band.1) {
        Some(0)
    } else {
        None
    };
    for t in 0..steps {
        let sum: f64 = x.iter().sum();
        let next: Vec<f64> = x
            .iter()
            .map(|&xj| {
                let others = sum - xj;
                let up = utility_raw(
                    xj * (1.0 + epsilon),
                    others + xj * (1.0 + epsilon),
                    capacity,
                    alpha,
                );
                let down = utility_raw(
                    xj * (1.0 - epsilon),
                    others + xj * (1.0 - epsilon),
                    capacity,
                    alpha,
                );
                if up > down {
                    xj * (1.0 + epsilon)
                } else {
                    xj * (1.0 - epsilon)
                }
            })
            .collect();
        x = next;
        trajectory.push(x.clone());
        if converged_at.is_none() && x.iter().all(|&v| v > band.0 && v < band.1) {
            converged_at = Some(t + 1);
        }
    }
    Ok(DynamicsTrajectory {
        steps: trajectory,
        epsilon,
        x_hat,
        band,
        converged_at,
    })
}

/// Deterministic random starting vectors, uniform over `[0.05 C, 2 C)`,
/// derived from a documented splitmix64 stream keyed by `(seed, n)`.
pub fn seeded_starts(seed: u64, count: usize, n: usize, capacity: f64) -> Vec<Vec<f64>> {
    let mut g = SplitMix64::new(seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..count)
        .map(|_| {
            (0..n)
                .map(|_| 0.05 * capacity + g.next_f64() * (2.0 * capacity - 0.05 * capacity))
                .collect()
        })
        .collect()
}
