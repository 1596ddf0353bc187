//! Deterministic, seeded, tick-based queue simulator of signalized
//! intersections.
//!
//! Vehicles follow precomputed shortest-path routes. A vehicle entering a
//! segment travels at free-flow speed for `length / max_speed`, then joins
//! the FIFO queue of its turn-movement lane at the downstream intersection.
//! Green lanes discharge through deterministic fractional accumulators (add
//! the discharge rate each green tick, release one vehicle when the
//! accumulator reaches 1), which doubles as the start-up headway. Trips
//! begin on the first route segment and complete at the end of the last
//! one, so vehicles cross exactly the interior intersections of their
//! route.
//!
//! A malfunctioning (blackout) intersection behaves like a degraded
//! all-way stop: approaches are served one per tick in rotation at
//! `malfunction_capacity_factor` times the normal rate, crossing vehicles
//! dwell in the intersection box for a few ticks, and each tick every pair
//! of simultaneously crossing conflicting movements collides with
//! probability `foe_ignore_prob`. A collision blocks both source lanes for
//! `collision_block_s`, after which the two vehicles are removed.
//!
//! All randomness flows from the single seeded generator owned by the
//! state; identical inputs give bit-identical runs.

mod flow;
mod phase;

pub use flow::{flow_to_text, load_flow, parse_flow, FlowRecord};
pub use phase::{
    movements_conflict, Direction, Movement, Phase, Turn, DIRECTIONS, LANES, PHASE_COUNT, TURNS,
};

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::metrics::ExperimentMetrics;
use crate::network::{shortest_path, NetworkError, RoadNetwork};

/// Ticks a vehicle spends inside a blackout intersection box; the window
/// in which crossing conflicts can collide.
pub const BOX_CROSSING_TICKS: u64 = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("flow record {index}: {msg}")]
    Flow { index: usize, msg: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("got {got} actions for {expected} intersections")]
    ActionCount { expected: usize, got: usize },
    #[error("intersection {0} is malfunctioning; its action must be MalfunctionOff")]
    ExpectedOff(usize),
    #[error("intersection {0} is operational but was given MalfunctionOff")]
    UnexpectedOff(usize),
    #[error("unknown intersection {0}")]
    UnknownIntersection(usize),
    #[error("intersection {node}: two roads approach from the same compass side")]
    AmbiguousGeometry { node: usize },
    #[error("route for ({origin},{dest}) folds back on itself at node {node}")]
    RouteUTurn { origin: usize, dest: usize, node: usize },
    #[error("conservation violated at tick {tick}: {inserted} inserted != {finished} finished + {crashed} crashed-removed + {in_network} in network")]
    Conservation {
        tick: u64,
        inserted: u64,
        finished: u64,
        crashed: u64,
        in_network: u64,
    },
    #[error("metrics window end {end}s exceeds simulated time {clock}s")]
    WindowOutOfRange { end: u64, clock: u64 },
    #[error("empty focus set for intersection throughput")]
    EmptyFocus,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vehicle model and malfunction parameters; all times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub tick_s: u32,
    pub decision_interval_s: u32,
    pub max_speed_kmh: f64,
    pub vehicle_length_m: f64,
    pub min_gap_m: f64,
    pub accel_mps2: f64,
    pub decel_mps2: f64,
    /// Vehicles released per lane per green tick.
    pub discharge_rate: f64,
    /// Collision probability per conflicting crossing pair per tick at
    /// malfunctioning intersections.
    pub foe_ignore_prob: f64,
    pub collision_block_s: u32,
    /// Fraction of the normal discharge rate a blackout intersection keeps.
    pub malfunction_capacity_factor: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick_s: 1,
            decision_interval_s: 10,
            max_speed_kmh: 40.0,
            vehicle_length_m: 5.0,
            min_gap_m: 2.5,
            accel_mps2: 2.0,
            decel_mps2: 4.5,
            discharge_rate: 0.5,
            foe_ignore_prob: 0.05,
            collision_block_s: 30,
            malfunction_capacity_factor: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.tick_s == 0 {
            return bad("tick must be positive".into());
        }
        if self.decision_interval_s == 0 || self.decision_interval_s % self.tick_s != 0 {
            return bad(format!(
                "decision interval {}s must be a positive multiple of the {}s tick",
                self.decision_interval_s, self.tick_s
            ));
        }
        if !(self.max_speed_kmh > 0.0) {
            return bad("max speed must be positive".into());
        }
        if !(self.vehicle_length_m > 0.0 && self.min_gap_m >= 0.0) {
            return bad("vehicle length must be positive, min gap non-negative".into());
        }
        if !(self.accel_mps2 > 0.0 && self.decel_mps2 > 0.0) {
            return bad("acceleration limits must be positive".into());
        }
        if !(self.discharge_rate > 0.0) {
            return bad("discharge rate must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.foe_ignore_prob) {
            return bad(format!(
                "foe-ignore probability must lie in [0,1], got {}",
                self.foe_ignore_prob
            ));
        }
        if !(self.malfunction_capacity_factor > 0.0 && self.malfunction_capacity_factor <= 1.0) {
            return bad(format!(
                "malfunction capacity factor must lie in (0,1], got {}",
                self.malfunction_capacity_factor
            ));
        }
        Ok(())
    }

    pub fn max_speed_mps(&self) -> f64 {
        self.max_speed_kmh / 3.6
    }

    fn ticks_per_decision(&self) -> u64 {
        (self.decision_interval_s / self.tick_s) as u64
    }
}

/// Local view of one intersection: current phase plus queue lengths on the
/// 12 incoming and 12 outgoing lanes (approach-major, L/T/R minor).
/// Outgoing counts are the queues sitting at the downstream end of this
/// intersection's exit segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionObservation {
    pub phase: Phase,
    pub incoming: [u32; LANES],
    pub outgoing: [u32; LANES],
}

impl IntersectionObservation {
    pub fn incoming_total(&self) -> i64 {
        self.incoming.iter().map(|&q| q as i64).sum()
    }

    pub fn outgoing_total(&self) -> i64 {
        self.outgoing.iter().map(|&q| q as i64).sum()
    }

    /// Absolute imbalance between upstream and downstream queues.
    pub fn pressure(&self) -> i64 {
        (self.incoming_total() - self.outgoing_total()).abs()
    }
}

/// Negated pressure; never positive.
pub fn local_reward(obs: &IntersectionObservation) -> f64 {
    -(obs.pressure() as f64)
}

/// Queued vehicles on the exit segment each incoming movement feeds,
/// summed over that segment's three lanes. The downstream counts
/// max-pressure control works with.
pub fn downstream_by_movement(obs: &IntersectionObservation) -> [u32; LANES] {
    let mut out = [0u32; LANES];
    for lane in 0..LANES {
        let exit = Movement::from_lane_index(lane).exit_side() as usize;
        out[lane] = (0..3).map(|t| obs.outgoing[exit * 3 + t]).sum();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccidentRecord {
    pub time_s: u64,
    pub intersection: usize,
    /// Lane indices (approach-major) of the two movements involved.
    pub lane_a: usize,
    pub lane_b: usize,
}

/// Accident log in its CSV export format.
pub fn accidents_to_csv(log: &[AccidentRecord]) -> String {
    let mut out = String::from("time_s,intersection,lane_a,lane_b\n");
    for a in log {
        let _ = writeln!(out, "{},{},{},{}", a.time_s, a.intersection, a.lane_a, a.lane_b);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepStats {
    pub clock_s: u64,
    pub completed_in_step: u64,
    pub accidents_in_step: u64,
    pub in_network: u64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observations: Vec<IntersectionObservation>,
    pub rewards: Vec<f64>,
    pub stats: StepStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConservationCounts {
    pub generated: u64,
    pub finished: u64,
    pub crashed_removed: u64,
    pub in_network: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VehicleStatus {
    Staged,
    Traveling,
    Queued,
    Crossing,
    Finished,
    Crashed,
}

/// Immutable per-route data shared by vehicles with the same OD pair.
#[derive(Debug)]
struct RouteInfo {
    /// Segment index for each leg.
    segs: Vec<usize>,
    /// Turn taken at the end of each leg; `None` on the final leg.
    turns: Vec<Option<Turn>>,
}

#[derive(Debug)]
struct Vehicle {
    route: Rc<RouteInfo>,
    /// Index of the current (or next, while staged) leg.
    leg: usize,
    status: VehicleStatus,
    depart_s: f64,
}

/// Where a vehicle is headed within the segment it enters.
#[derive(Debug, Clone, Copy)]
enum LaneTarget {
    Turn(Turn),
    Finish,
}

#[derive(Debug)]
struct SegState {
    travel_ticks: u64,
    lane_cap: usize,
    /// Vehicles in free-flow transit, FIFO by arrival tick.
    traveling: VecDeque<(usize, u64)>,
    /// Turn-movement queues at the downstream end.
    queues: [VecDeque<usize>; 3],
    /// Inbound vehicles (traveling or crossing upstream) already assigned
    /// to each turn lane; reserves queue space so lanes never overflow.
    assigned: [usize; 3],
    /// Inbound or in-transit vehicles on their final leg.
    finishing: usize,
    /// Fractional discharge accumulators per turn lane.
    accum: [f64; 3],
    /// Tick until which each turn lane is blocked by a collision (0 = open).
    blocked_until: [u64; 3],
}

impl SegState {
    fn occupancy(&self) -> usize {
        self.traveling.len() + self.queues.iter().map(VecDeque::len).sum::<usize>()
    }

    fn try_reserve(&mut self, target: LaneTarget) -> bool {
        match target {
            LaneTarget::Turn(t) => {
                let t = t as usize;
                if self.queues[t].len() + self.assigned[t] < self.lane_cap {
                    self.assigned[t] += 1;
                    true
                } else {
                    false
                }
            }
            LaneTarget::Finish => {
                let total_cap = self.lane_cap * 3;
                let committed: usize = self.queues.iter().map(VecDeque::len).sum::<usize>()
                    + self.assigned.iter().sum::<usize>()
                    + self.finishing;
                if committed < total_cap {
                    self.finishing += 1;
                    true
                } else {
                    false
                }
            }
        }
    }

    fn unreserve(&mut self, target: LaneTarget) {
        match target {
            LaneTarget::Turn(t) => self.assigned[t as usize] -= 1,
            LaneTarget::Finish => self.finishing -= 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoxVehicle {
    veh: usize,
    movement: Movement,
    exit_tick: u64,
}

#[derive(Debug)]
struct NodeState {
    /// Incoming segment per compass approach.
    in_seg: [Option<usize>; 4],
    /// Outgoing segment per compass exit side.
    out_seg: [Option<usize>; 4],
    phase: Phase,
    /// Approaches that exist, in N/E/S/W order; blackout service rotates
    /// through them one per tick.
    approaches: Vec<Direction>,
    /// Vehicles currently crossing the blackout box.
    occupants: Vec<BoxVehicle>,
    /// Ticks at which a vehicle fully crossed this intersection.
    served: Vec<u64>,
}

#[derive(Debug)]
pub struct SimulationState {
    cfg: SimConfig,
    n: usize,
    segs: Vec<SegState>,
    nodes: Vec<NodeState>,
    vehicles: Vec<Vehicle>,
    /// Vehicle ids sorted by (depart, insertion order); `staged_cursor`
    /// marks the first not-yet-due vehicle.
    staged: Vec<usize>,
    staged_cursor: usize,
    /// Due vehicles whose first segment had no room yet.
    pending: VecDeque<usize>,
    malfunctioning: Vec<bool>,
    rng: ChaCha8Rng,
    tick: u64,
    inserted: u64,
    finished: u64,
    crashed_removed: u64,
    crashed_pending: Vec<(usize, u64)>,
    finish_log: Vec<u64>,
    accident_log: Vec<AccidentRecord>,
}

/// Compass heading of travel from `u` to `v`, quantized to the dominant
/// axis. Returns `None` on ambiguous (diagonal) geometry.
fn heading(net: &RoadNetwork, u: usize, v: usize) -> Option<Direction> {
    let (a, b) = (net.nodes()[u], net.nodes()[v]);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    if dx.abs() > dy.abs() {
        Some(if dx > 0.0 { Direction::East } else { Direction::West })
    } else if dy.abs() > dx.abs() {
        Some(if dy > 0.0 { Direction::North } else { Direction::South })
    } else {
        None
    }
}

fn turn_between(h_in: Direction, h_out: Direction) -> Option<Turn> {
    match (h_out as i32 - h_in as i32).rem_euclid(4) {
        0 => Some(Turn::Through),
        1 => Some(Turn::Right),
        3 => Some(Turn::Left),
        _ => None, // U-turn
    }
}

/// Builds the simulation: validates the flow, precomputes routes and
/// stages every vehicle. The malfunction set starts empty; use
/// [`SimulationState::inject_malfunction`] before stepping.
pub fn init(
    net: &RoadNetwork,
    flow: &[FlowRecord],
    cfg: SimConfig,
) -> Result<SimulationState, SimError> {
    cfg.validate()?;
    let n = net.node_count();
    let speed = cfg.max_speed_mps();

    let mut segs = Vec::with_capacity(net.edges().len());
    let mut seg_ids = HashMap::new();
    let mut nodes: Vec<NodeState> = (0..n)
        .map(|_| NodeState {
            in_seg: [None; 4],
            out_seg: [None; 4],
            phase: Phase::Index(0),
            approaches: Vec::new(),
            occupants: Vec::new(),
            served: Vec::new(),
        })
        .collect();

    for edge in net.edges() {
        let travel_s = edge.length_m / speed;
        let travel_ticks = ((travel_s / cfg.tick_s as f64).ceil() as u64).max(1);
        let lane_cap = ((edge.length_m / (cfg.vehicle_length_m + cfg.min_gap_m)).floor()
            as usize)
            .max(1);
        let idx = segs.len();
        segs.push(SegState {
            travel_ticks,
            lane_cap,
            traveling: VecDeque::new(),
            queues: [VecDeque::new(), VecDeque::new(), VecDeque::new()],
            assigned: [0; 3],
            finishing: 0,
            accum: [0.0; 3],
            blocked_until: [0; 3],
        });
        seg_ids.insert((edge.from, edge.to), idx);

        let h = heading(net, edge.from, edge.to)
            .ok_or(SimError::AmbiguousGeometry { node: edge.to })?;
        let approach = h.opposite();
        if nodes[edge.to].in_seg[approach as usize].is_some() {
            return Err(SimError::AmbiguousGeometry { node: edge.to });
        }
        nodes[edge.to].in_seg[approach as usize] = Some(idx);
        if nodes[edge.from].out_seg[h as usize].is_some() {
            return Err(SimError::AmbiguousGeometry { node: edge.from });
        }
        nodes[edge.from].out_seg[h as usize] = Some(idx);
    }
    for node in &mut nodes {
        node.approaches = DIRECTIONS
            .iter()
            .copied()
            .filter(|&d| node.in_seg[d as usize].is_some())
            .collect();
    }

    let mut route_cache: HashMap<(usize, usize), Rc<RouteInfo>> = HashMap::new();
    let mut vehicles = Vec::with_capacity(flow.len());
    for (index, rec) in flow.iter().enumerate() {
        if rec.origin >= n || rec.dest >= n {
            return Err(SimError::Flow {
                index,
                msg: format!("unknown endpoint in ({}, {})", rec.origin, rec.dest),
            });
        }
        if rec.origin == rec.dest {
            return Err(SimError::Flow {
                index,
                msg: format!("origin equals destination ({})", rec.origin),
            });
        }
        let route = match route_cache.get(&(rec.origin, rec.dest)) {
            Some(r) => Rc::clone(r),
            None => {
                let route_nodes = shortest_path(net, rec.origin, rec.dest)?;
                let mut seg_list = Vec::with_capacity(route_nodes.len() - 1);
                let mut turn_list = Vec::with_capacity(route_nodes.len() - 1);
                for leg in 0..route_nodes.len() - 1 {
                    let (u, v) = (route_nodes[leg], route_nodes[leg + 1]);
                    seg_list.push(seg_ids[&(u, v)]);
                    if leg + 2 < route_nodes.len() {
                        let w = route_nodes[leg + 2];
                        let h_in = heading(net, u, v).expect("validated at segment build");
                        let h_out = heading(net, v, w).expect("validated at segment build");
                        let turn = turn_between(h_in, h_out).ok_or(SimError::RouteUTurn {
                            origin: rec.origin,
                            dest: rec.dest,
                            node: v,
                        })?;
                        turn_list.push(Some(turn));
                    } else {
                        turn_list.push(None);
                    }
                }
                let info = Rc::new(RouteInfo {
                    segs: seg_list,
                    turns: turn_list,
                });
                route_cache.insert((rec.origin, rec.dest), Rc::clone(&info));
                info
            }
        };
        vehicles.push(Vehicle {
            route,
            leg: 0,
            status: VehicleStatus::Staged,
            depart_s: rec.depart_s,
        });
    }

    let mut staged: Vec<usize> = (0..vehicles.len()).collect();
    staged.sort_by(|&a, &b| {
        vehicles[a]
            .depart_s
            .partial_cmp(&vehicles[b].depart_s)
            .unwrap()
            .then(a.cmp(&b))
    });

    Ok(SimulationState {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cfg,
        n,
        segs,
        nodes,
        vehicles,
        staged,
        staged_cursor: 0,
        pending: VecDeque::new(),
        malfunctioning: vec![false; n],
        tick: 0,
        inserted: 0,
        finished: 0,
        crashed_removed: 0,
        crashed_pending: Vec::new(),
        finish_log: Vec::new(),
        accident_log: Vec::new(),
    })
}

impl SimulationState {
    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn clock_s(&self) -> u64 {
        self.tick * self.cfg.tick_s as u64
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn is_malfunctioning(&self, node: usize) -> bool {
        self.malfunctioning[node]
    }

    pub fn malfunction_set(&self) -> Vec<usize> {
        (0..self.n).filter(|&v| self.malfunctioning[v]).collect()
    }

    pub fn accident_log(&self) -> &[AccidentRecord] {
        &self.accident_log
    }

    /// Capacity of each incoming lane, for feature normalization.
    pub fn incoming_lane_caps(&self, node: usize) -> [u32; LANES] {
        let mut caps = [0u32; LANES];
        for dir in 0..4 {
            if let Some(s) = self.nodes[node].in_seg[dir] {
                for t in 0..3 {
                    caps[dir * 3 + t] = self.segs[s].lane_cap as u32;
                }
            }
        }
        caps
    }

    /// Replaces the malfunction set. Affected intersections switch to
    /// blackout behavior from the next tick; recovered ones restart on
    /// phase 0.
    pub fn inject_malfunction(&mut self, set: &[usize]) -> Result<(), SimError> {
        for &v in set {
            if v >= self.n {
                return Err(SimError::UnknownIntersection(v));
            }
        }
        let mut next = vec![false; self.n];
        for &v in set {
            next[v] = true;
        }
        for v in 0..self.n {
            if next[v] && !self.malfunctioning[v] {
                self.nodes[v].phase = Phase::MalfunctionOff;
            }
            if !next[v] && self.malfunctioning[v] {
                self.nodes[v].phase = Phase::Index(0);
            }
        }
        self.malfunctioning = next;
        Ok(())
    }

    pub fn conservation(&self) -> ConservationCounts {
        let in_segments: usize = self.segs.iter().map(SegState::occupancy).sum();
        let in_boxes: usize = self.nodes.iter().map(|n| n.occupants.len()).sum();
        ConservationCounts {
            generated: self.inserted,
            finished: self.finished,
            crashed_removed: self.crashed_removed,
            in_network: (in_segments + in_boxes + self.crashed_pending.len()) as u64,
        }
    }

    fn check_conservation(&self) -> Result<(), SimError> {
        let c = self.conservation();
        if c.generated != c.finished + c.crashed_removed + c.in_network {
            return Err(SimError::Conservation {
                tick: self.tick,
                inserted: c.generated,
                finished: c.finished,
                crashed: c.crashed_removed,
                in_network: c.in_network,
            });
        }
        Ok(())
    }

    /// Snapshot of every intersection without advancing time.
    pub fn observe(&self) -> Vec<IntersectionObservation> {
        (0..self.n).map(|v| self.observe_node(v)).collect()
    }

    fn observe_node(&self, v: usize) -> IntersectionObservation {
        let node = &self.nodes[v];
        let mut incoming = [0u32; LANES];
        let mut outgoing = [0u32; LANES];
        for dir in 0..4 {
            if let Some(s) = node.in_seg[dir] {
                for t in 0..3 {
                    incoming[dir * 3 + t] = self.segs[s].queues[t].len() as u32;
                }
            }
            if let Some(s) = node.out_seg[dir] {
                for t in 0..3 {
                    outgoing[dir * 3 + t] = self.segs[s].queues[t].len() as u32;
                }
            }
        }
        IntersectionObservation {
            phase: node.phase,
            incoming,
            outgoing,
        }
    }

    /// Applies one action per intersection and advances a full decision
    /// interval.
    pub fn step(&mut self, actions: &[Phase]) -> Result<StepOutcome, SimError> {
        if actions.len() != self.n {
            return Err(SimError::ActionCount {
                expected: self.n,
                got: actions.len(),
            });
        }
        for (v, &a) in actions.iter().enumerate() {
            match (self.malfunctioning[v], a) {
                (true, Phase::MalfunctionOff) => {}
                (true, _) => return Err(SimError::ExpectedOff(v)),
                (false, Phase::MalfunctionOff) => return Err(SimError::UnexpectedOff(v)),
                (false, Phase::Index(i)) if (i as usize) < PHASE_COUNT => {}
                (false, Phase::Index(i)) => {
                    return Err(SimError::Config(format!("phase index {i} out of range")))
                }
            }
            self.nodes[v].phase = a;
        }
        let completed_before = self.finished;
        let accidents_before = self.accident_log.len() as u64;
        for _ in 0..self.cfg.ticks_per_decision() {
            self.advance_tick()?;
        }
        let observations = self.observe();
        let rewards = observations.iter().map(local_reward).collect();
        let stats = StepStats {
            clock_s: self.clock_s(),
            completed_in_step: self.finished - completed_before,
            accidents_in_step: self.accident_log.len() as u64 - accidents_before,
            in_network: self.conservation().in_network,
        };
        Ok(StepOutcome {
            observations,
            rewards,
            stats,
        })
    }

    fn advance_tick(&mut self) -> Result<(), SimError> {
        let now = self.tick;
        let now_s = now as f64 * self.cfg.tick_s as f64;

        // Expired collision blocks and crashed-vehicle removal.
        for seg in &mut self.segs {
            for t in 0..3 {
                if seg.blocked_until[t] != 0 && seg.blocked_until[t] <= now {
                    seg.blocked_until[t] = 0;
                }
            }
        }
        let mut kept = Vec::with_capacity(self.crashed_pending.len());
        for &(veh, removal) in &self.crashed_pending {
            if removal <= now {
                self.crashed_removed += 1;
            } else {
                kept.push((veh, removal));
            }
        }
        self.crashed_pending = kept;

        // Blackout-box exits: vehicles that cleared the intersection.
        for v in 0..self.n {
            let mut exiting = Vec::new();
            self.nodes[v].occupants.retain(|occ| {
                if occ.exit_tick <= now {
                    exiting.push(occ.veh);
                    false
                } else {
                    true
                }
            });
            for veh in exiting {
                self.nodes[v].served.push(now);
                self.vehicles[veh].leg += 1;
                self.begin_leg(veh, now);
            }
        }

        // Arrivals at the downstream end of each segment.
        for s in 0..self.segs.len() {
            loop {
                match self.segs[s].traveling.front() {
                    Some(&(_, at)) if at <= now => {}
                    _ => break,
                }
                let (veh, _) = self.segs[s].traveling.pop_front().unwrap();
                let leg = self.vehicles[veh].leg;
                match self.vehicles[veh].route.turns[leg] {
                    None => {
                        self.segs[s].finishing -= 1;
                        self.vehicles[veh].status = VehicleStatus::Finished;
                        self.finished += 1;
                        self.finish_log.push(now);
                    }
                    Some(turn) => {
                        self.segs[s].assigned[turn as usize] -= 1;
                        self.segs[s].queues[turn as usize].push_back(veh);
                        self.vehicles[veh].status = VehicleStatus::Queued;
                    }
                }
            }
        }

        // Insertions: blocked vehicles first (FIFO), then newly due ones.
        let mut retry: Vec<usize> = self.pending.drain(..).collect();
        while self.staged_cursor < self.staged.len() {
            let veh = self.staged[self.staged_cursor];
            if self.vehicles[veh].depart_s <= now_s {
                retry.push(veh);
                self.staged_cursor += 1;
            } else {
                break;
            }
        }
        for veh in retry {
            if self.try_insert(veh, now) {
                self.inserted += 1;
            } else {
                self.pending.push_back(veh);
            }
        }

        // Discharge at functioning intersections.
        for v in 0..self.n {
            if self.malfunctioning[v] {
                continue;
            }
            let phase = self.nodes[v].phase;
            for lane in 0..LANES {
                let movement = Movement::from_lane_index(lane);
                let Some(s) = self.nodes[v].in_seg[movement.approach as usize] else {
                    continue;
                };
                if !phase.serves(movement) {
                    continue;
                }
                self.discharge_lane(v, s, movement, self.cfg.discharge_rate, now, false);
            }
        }

        // Blackout service: one approach per tick, reduced rate, vehicles
        // dwell in the box.
        for v in 0..self.n {
            if !self.malfunctioning[v] || self.nodes[v].approaches.is_empty() {
                continue;
            }
            let rotation = self.nodes[v].approaches.clone();
            let approach = rotation[(now as usize) % rotation.len()];
            let Some(s) = self.nodes[v].in_seg[approach as usize] else {
                continue;
            };
            let rate = self.cfg.discharge_rate * self.cfg.malfunction_capacity_factor;
            for &turn in &TURNS {
                let movement = Movement { approach, turn };
                self.discharge_lane(v, s, movement, rate, now, true);
            }
        }

        // Collision draws among simultaneously crossing movements.
        self.evaluate_collisions(now)?;

        self.tick += 1;
        self.check_conservation()
    }

    /// Accumulate-and-release for one lane. `to_box` routes released
    /// vehicles through the blackout box instead of transferring them
    /// immediately.
    fn discharge_lane(
        &mut self,
        v: usize,
        s: usize,
        movement: Movement,
        rate: f64,
        now: u64,
        to_box: bool,
    ) {
        let turn = movement.turn as usize;
        if self.segs[s].blocked_until[turn] > now {
            return;
        }
        let cap = 1.0f64.max(rate);
        self.segs[s].accum[turn] = cap.min(self.segs[s].accum[turn] + rate);
        while self.segs[s].accum[turn] >= 1.0 {
            let Some(&veh) = self.segs[s].queues[turn].front() else {
                break;
            };
            let next_leg = self.vehicles[veh].leg + 1;
            let (next_seg, target) = self.leg_target(veh, next_leg);
            if !self.segs[next_seg].try_reserve(target) {
                break; // head-of-line blocking: overflow holds discharge
            }
            self.segs[s].queues[turn].pop_front();
            self.segs[s].accum[turn] -= 1.0;
            if to_box {
                self.vehicles[veh].status = VehicleStatus::Crossing;
                self.nodes[v].occupants.push(BoxVehicle {
                    veh,
                    movement,
                    exit_tick: now + BOX_CROSSING_TICKS,
                });
            } else {
                self.nodes[v].served.push(now);
                self.vehicles[veh].leg = next_leg;
                self.begin_leg(veh, now);
            }
        }
    }

    /// Segment and lane target for a vehicle's given leg.
    fn leg_target(&self, veh: usize, leg: usize) -> (usize, LaneTarget) {
        let route = &self.vehicles[veh].route;
        let seg = route.segs[leg];
        let target = match route.turns[leg] {
            Some(t) => LaneTarget::Turn(t),
            None => LaneTarget::Finish,
        };
        (seg, target)
    }

    /// Puts a vehicle in free-flow transit on its current leg. Its slot on
    /// the segment must already be reserved.
    fn begin_leg(&mut self, veh: usize, now: u64) {
        let seg = self.vehicles[veh].route.segs[self.vehicles[veh].leg];
        let arrival = now + self.segs[seg].travel_ticks;
        self.segs[seg].traveling.push_back((veh, arrival));
        self.vehicles[veh].status = VehicleStatus::Traveling;
    }

    fn try_insert(&mut self, veh: usize, now: u64) -> bool {
        let (seg, target) = self.leg_target(veh, 0);
        if !self.segs[seg].try_reserve(target) {
            return false;
        }
        self.vehicles[veh].leg = 0;
        self.begin_leg(veh, now);
        true
    }

    /// Per tick, every pair of distinct conflicting movements present in a
    /// blackout box collides with probability `foe_ignore_prob`; the
    /// earliest-entered vehicle of each movement is the one involved.
    fn evaluate_collisions(&mut self, now: u64) -> Result<(), SimError> {
        let p = self.cfg.foe_ignore_prob;
        let block_ticks = (self.cfg.collision_block_s / self.cfg.tick_s) as u64;
        for v in 0..self.n {
            if self.nodes[v].occupants.len() < 2 {
                continue;
            }
            // First occupant per movement, ordered by lane index.
            let mut reps: Vec<(usize, usize)> = Vec::new(); // (lane, occupant idx)
            for (i, occ) in self.nodes[v].occupants.iter().enumerate() {
                let lane = occ.movement.lane_index();
                if !reps.iter().any(|&(l, _)| l == lane) {
                    reps.push((lane, i));
                }
            }
            reps.sort_by_key(|&(lane, _)| lane);

            let mut crashed: Vec<usize> = Vec::new(); // occupant indices
            for a in 0..reps.len() {
                for b in a + 1..reps.len() {
                    let (ia, ib) = (reps[a].1, reps[b].1);
                    if crashed.contains(&ia) || crashed.contains(&ib) {
                        continue;
                    }
                    let (ma, mb) = (
                        self.nodes[v].occupants[ia].movement,
                        self.nodes[v].occupants[ib].movement,
                    );
                    if !movements_conflict(ma, mb) {
                        continue;
                    }
                    if self.rng.random::<f64>() < p {
                        crashed.push(ia);
                        crashed.push(ib);
                        self.accident_log.push(AccidentRecord {
                            time_s: now * self.cfg.tick_s as u64,
                            intersection: v,
                            lane_a: ma.lane_index().min(mb.lane_index()),
                            lane_b: ma.lane_index().max(mb.lane_index()),
                        });
                    }
                }
            }
            if crashed.is_empty() {
                continue;
            }
            crashed.sort_unstable();
            for &i in crashed.iter().rev() {
                let occ = self.nodes[v].occupants.remove(i);
                let veh = occ.veh;
                // Free the reserved slot on the next segment.
                let next_leg = self.vehicles[veh].leg + 1;
                let (next_seg, target) = self.leg_target(veh, next_leg);
                self.segs[next_seg].unreserve(target);
                // Block the source lane and schedule removal.
                let src_seg = self.vehicles[veh].route.segs[self.vehicles[veh].leg];
                self.segs[src_seg].blocked_until[occ.movement.turn as usize] =
                    now + block_ticks;
                self.vehicles[veh].status = VehicleStatus::Crashed;
                self.crashed_pending.push((veh, now + block_ticks));
            }
        }
        Ok(())
    }

    /// Throughput and accident figures over a time window (seconds,
    /// half-open) for a non-empty focus set of intersections.
    pub fn metrics(
        &self,
        window: Range<u64>,
        focus: &[usize],
    ) -> Result<ExperimentMetrics, SimError> {
        if focus.is_empty() {
            return Err(SimError::EmptyFocus);
        }
        for &v in focus {
            if v >= self.n {
                return Err(SimError::UnknownIntersection(v));
            }
        }
        if window.end > self.clock_s() {
            return Err(SimError::WindowOutOfRange {
                end: window.end,
                clock: self.clock_s(),
            });
        }
        let tick_s = self.cfg.tick_s as u64;
        let in_window = |tick: u64| {
            let t = tick * tick_s;
            t >= window.start && t < window.end
        };
        let network = self.finish_log.iter().filter(|&&t| in_window(t)).count() as u64;
        let served_total: u64 = focus
            .iter()
            .map(|&v| self.nodes[v].served.iter().filter(|&&t| in_window(t)).count() as u64)
            .sum();
        let accidents = self
            .accident_log
            .iter()
            .filter(|a| {
                focus.contains(&a.intersection)
                    && a.time_s >= window.start
                    && a.time_s < window.end
            })
            .count() as u64;
        Ok(ExperimentMetrics {
            network_throughput: network,
            intersection_throughput: served_total as f64 / focus.len() as f64,
            reduction_ratio: None,
            accidents,
            seed: self.cfg.seed,
            config_digest: String::new(),
        })
    }
}

#[cfg(test)]
mod tests;
