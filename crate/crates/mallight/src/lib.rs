//! Desk-scale laboratory for coordinated traffic-signal control under
//! signal malfunctions.
//!
//! The crate ties together five layers:
//!
//! * [`network`] — road graphs, distance-kernel edge weights, random-walk
//!   transition matrices and shortest-path routing.
//! * [`simulator`] — a deterministic, seeded, tick-based queue simulator of
//!   signalized intersections with a blackout-malfunction mode and
//!   probabilistic collision injection.
//! * [`controllers`] — classical baselines (fixed-time, SOTL, max-pressure).
//! * [`diffusion`] + [`neural`] — masked graph-diffusion state/reward
//!   aggregation with analytic gradients, and a small dense Q-network with
//!   hand-rolled backprop and RMSprop.
//! * [`rl`] + [`harness`] — the multi-agent deep-Q training loop and the
//!   experiment front end (dataset generation, train/eval runs, sweeps,
//!   influence reports).

pub mod controllers;
pub mod diffusion;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod neural;
pub mod rl;
pub mod simulator;

pub use metrics::ExperimentMetrics;
