//! Scratch probe: action histogram of a trained checkpoint.
use mallight::harness::{generate_flow, generate_grid, FlowSpec, OdPolicy};
use mallight::network::{build_edge_weights, default_sigma, transition_matrix};
use mallight::diffusion::{DiffusionOperator, MalfunctionMask};
use mallight::rl::{greedy_actions, load_checkpoint};
use mallight::simulator::{init, FlowRecord, Phase, SimConfig, LANES};

fn main() {
    let ckpt = std::env::args().nth(1).expect("usage: policy_probe <ckpt>");
    let mut agent = load_checkpoint(&ckpt).unwrap();
    let net = generate_grid(4, 4, 300.0).unwrap();
    let flow = generate_flow(&net, &FlowSpec { rate_per_300s: 1200, duration_s: 7200, od: OdPolicy::All, seed: 1 }).unwrap();
    let test: Vec<FlowRecord> = flow.iter().filter(|r| r.depart_s >= 3600.0)
        .map(|r| FlowRecord { depart_s: r.depart_s - 3600.0, ..*r }).collect();
    let sigma = default_sigma(&net);
    let t = transition_matrix(&build_edge_weights(&net, sigma).unwrap()).unwrap();
    let op = DiffusionOperator::new(&t, MalfunctionMask::empty(16), 10).unwrap();
    let mut sim = init(&net, &test, SimConfig { seed: 99, ..SimConfig::default() }).unwrap();
    let caps: Vec<[u32; LANES]> = (0..16).map(|v| sim.incoming_lane_caps(v)).collect();
    let mut hist = vec![[0u32; 8]; 16];
    let mut switches = vec![0u32; 16];
    let mut prev: Vec<Phase> = (0..16).map(|_| Phase::Index(0)).collect();
    let mut obs = sim.observe();
    for _ in 0..180 {
        let actions = greedy_actions(&mut agent, Some(&op), &sim, &obs, &caps).unwrap();
        for v in 0..16 {
            if let Phase::Index(i) = actions[v] { hist[v][i as usize] += 1; }
            if actions[v] != prev[v] { switches[v] += 1; prev[v] = actions[v]; }
        }
        obs = sim.step(&actions).unwrap().observations;
    }
    println!("completed: {}", sim.conservation().finished);
    for v in 0..16 {
        println!("node {v:2}: {:?} switches={}", hist[v], switches[v]);
    }
    // Q-value spread for a few live states at the end of the rollout.
    use mallight::rl::StepFeatures;
    let feats = StepFeatures::build(&obs, &caps, &agent, Some(&op)).unwrap();
    for v in [0usize, 5, 9, 10] {
        let row = feats.aggregated_row(v, agent.filters());
        let q = agent.net(v).forward(&ndarray::Array1::from(row.clone())).unwrap();
        let qs: Vec<String> = q.iter().map(|x| format!("{x:.1}")).collect();
        let inq: u32 = obs[v].incoming.iter().sum();
        let outq: u32 = obs[v].outgoing.iter().sum();
        println!("node {v:2} in={inq:3} out={outq:3} Q=[{}]", qs.join(", "));
    }
}
