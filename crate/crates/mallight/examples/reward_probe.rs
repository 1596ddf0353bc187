//! Scratch probe: mean local reward + throughput under hand policies.
use mallight::controllers::{fixed_time_action, max_pressure_action, FixedTimePlan};
use mallight::harness::{generate_flow, generate_grid, FlowSpec, OdPolicy};
use mallight::simulator::{downstream_by_movement, init, FlowRecord, Phase, SimConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let net = generate_grid(4, 4, 300.0).unwrap();
    let flow = generate_flow(&net, &FlowSpec { rate_per_300s: 1200, duration_s: 7200, od: OdPolicy::All, seed: 1 }).unwrap();
    let test: Vec<FlowRecord> = flow.iter().filter(|r| r.depart_s >= 3600.0)
        .map(|r| FlowRecord { depart_s: r.depart_s - 3600.0, ..*r }).collect();
    for policy in ["random", "fixed", "maxpressure", "longest-queue", "frozen0"] {
        let mut sim = init(&net, &test, SimConfig { seed: 77, ..SimConfig::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plans: Vec<FixedTimePlan> = (0..16)
            .map(|_| FixedTimePlan::equal_splits(20, rng.random_range(0..160), 10).unwrap())
            .collect();
        let mut obs = sim.observe();
        let mut reward_sum = 0.0;
        let mut count = 0u64;
        for _ in 0..360 {
            let clock = sim.clock_s();
            let actions: Vec<Phase> = (0..16).map(|v| match policy {
                "random" => Phase::Index(rng.random_range(0..8)),
                "fixed" => fixed_time_action(&plans[v], clock),
                "maxpressure" => max_pressure_action(&obs[v], &downstream_by_movement(&obs[v])),
                "longest-queue" => {
                    let mut best = Phase::Index(0);
                    let mut best_d = -1i64;
                    for ph in Phase::all() {
                        let d: i64 = ph.movements().unwrap().iter()
                            .map(|m| obs[v].incoming[m.lane_index()] as i64).sum();
                        if d > best_d { best_d = d; best = ph; }
                    }
                    best
                }
                _ => Phase::Index(0),
            }).collect();
            let out = sim.step(&actions).unwrap();
            reward_sum += out.rewards.iter().sum::<f64>();
            count += out.rewards.len() as u64;
            obs = out.observations;
        }
        let m = sim.metrics(0..3600, &[5]).unwrap();
        println!("{policy:14} mean_local_reward={:8.2} network={} node5={}",
            reward_sum / count as f64, m.network_throughput, m.intersection_throughput);
    }
}
