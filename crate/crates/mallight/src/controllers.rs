//! Classical baseline signal controllers. All three are pure functions of
//! their stated inputs; per-intersection plan or timing state lives with
//! the caller.

use thiserror::Error;

use crate::simulator::{IntersectionObservation, Movement, Phase};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("fixed-time plan must have at least one phase")]
    EmptyCycle,
    #[error("phase duration {duration}s must be a positive multiple of the {interval}s decision interval")]
    BadDuration { duration: u32, interval: u32 },
    #[error("SOTL threshold must be at least 1 vehicle")]
    BadThreshold,
    #[error("SOTL min-green {min_green}s must be at least the {interval}s decision interval")]
    BadMinGreen { min_green: u32, interval: u32 },
}

/// Cyclic phase schedule with a per-intersection offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedTimePlan {
    cycle: Vec<(Phase, u32)>,
    offset_s: u32,
    cycle_s: u32,
}

impl FixedTimePlan {
    pub fn new(
        cycle: Vec<(Phase, u32)>,
        offset_s: u32,
        decision_interval_s: u32,
    ) -> Result<Self, ControllerError> {
        if cycle.is_empty() {
            return Err(ControllerError::EmptyCycle);
        }
        for &(_, duration) in &cycle {
            if duration == 0 || duration % decision_interval_s != 0 {
                return Err(ControllerError::BadDuration {
                    duration,
                    interval: decision_interval_s,
                });
            }
        }
        let cycle_s = cycle.iter().map(|&(_, d)| d).sum();
        Ok(Self {
            cycle,
            offset_s,
            cycle_s,
        })
    }

    /// Equal splits over all eight phases.
    pub fn equal_splits(
        split_s: u32,
        offset_s: u32,
        decision_interval_s: u32,
    ) -> Result<Self, ControllerError> {
        Self::new(
            Phase::all().map(|p| (p, split_s)).to_vec(),
            offset_s,
            decision_interval_s,
        )
    }

    pub fn cycle_s(&self) -> u32 {
        self.cycle_s
    }
}

/// Phase active at `(clock + offset) mod cycle_length`.
pub fn fixed_time_action(plan: &FixedTimePlan, clock_s: u64) -> Phase {
    let mut pos = ((clock_s + plan.offset_s as u64) % plan.cycle_s as u64) as u32;
    for &(phase, duration) in &plan.cycle {
        if pos < duration {
            return phase;
        }
        pos -= duration;
    }
    unreachable!("position is reduced modulo the cycle length")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SotlParams {
    /// Demand threshold (vehicles) a competing phase needs to force a switch.
    pub theta: u32,
    pub min_green_s: u32,
}

impl SotlParams {
    pub fn new(theta: u32, min_green_s: u32, decision_interval_s: u32) -> Result<Self, ControllerError> {
        if theta == 0 {
            return Err(ControllerError::BadThreshold);
        }
        if min_green_s < decision_interval_s {
            return Err(ControllerError::BadMinGreen {
                min_green: min_green_s,
                interval: decision_interval_s,
            });
        }
        Ok(Self { theta, min_green_s })
    }
}

impl Default for SotlParams {
    fn default() -> Self {
        Self {
            theta: 3,
            min_green_s: 10,
        }
    }
}

/// Queued demand on a phase's two green left/through movements.
fn phase_demand(obs: &IntersectionObservation, phase: Phase) -> u32 {
    phase
        .movements()
        .map(|ms| ms.iter().map(|m| obs.incoming[m.lane_index()]).sum())
        .unwrap_or(0)
}

/// Request-threshold self-organizing rule: hold the current phase through
/// its minimum green, then keep holding until some competing phase has at
/// least `theta` queued vehicles, at which point the highest-demand
/// competitor wins (ties to the lowest phase index). With no demand
/// anywhere the current phase is kept.
pub fn sotl_action(
    obs: &IntersectionObservation,
    params: &SotlParams,
    elapsed_green_s: u32,
) -> Phase {
    let current = obs.phase;
    if current.index().is_some() && elapsed_green_s < params.min_green_s {
        return current;
    }
    let mut best: Option<(Phase, u32)> = None;
    for phase in Phase::all() {
        if phase == current {
            continue;
        }
        let demand = phase_demand(obs, phase);
        if best.map(|(_, d)| demand > d).unwrap_or(true) {
            best = Some((phase, demand));
        }
    }
    match (current.index(), best) {
        (Some(_), Some((phase, demand))) if demand >= params.theta => phase,
        (Some(_), _) => current,
        // No live phase to hold (blackout recovery): take the best demand.
        (None, Some((phase, _))) => phase,
        (None, None) => Phase::Index(0),
    }
}

/// Argmax over the eight phases of the summed upstream-minus-downstream
/// queue differences on each phase's green movements; ties to the lowest
/// index. `downstream` holds, per incoming movement, the queue on the exit
/// segment that movement feeds (see
/// [`crate::simulator::downstream_by_movement`]).
pub fn max_pressure_action(
    obs: &IntersectionObservation,
    downstream: &[u32; 12],
) -> Phase {
    let mut best = Phase::Index(0);
    let mut best_score = i64::MIN;
    for phase in Phase::all() {
        let score: i64 = phase
            .movements()
            .unwrap()
            .iter()
            .map(|m: &Movement| {
                obs.incoming[m.lane_index()] as i64 - downstream[m.lane_index()] as i64
            })
            .sum();
        if score > best_score {
            best_score = score;
            best = phase;
        }
    }
    best
}
