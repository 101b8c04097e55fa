//! Utility-driven congestion control at desk scale: the monitor-interval
//! learning controller, a deterministic packet-level network simulator with
//! an AIMD baseline, the analytic rate-game solver, and the measurement
//! harness that ties them together.

pub mod controller;
pub mod equilibrium;
pub mod harness;
pub mod metrics;
pub mod monitor;
pub mod rng;
pub mod sim;
pub mod trace;
pub mod utility;

pub use controller::{Controller, ControllerConfig, Phase};
pub use monitor::{MiSchedule, Monitor, MonitorInterval};
pub use sim::{FlowSpec, LinkSpec, Scenario};
pub use trace::{Trace, TraceEvent};
pub use utility::{GameModel, PerformanceMetrics, Rate, UtilityFunctionId, UtilityValue};
