//! Scratch probe: fitted-Q on noisy expert data, then greedy evaluation.
use mallight::harness::{generate_flow, generate_grid, FlowSpec, OdPolicy};
use mallight::rl::{
    greedy_actions, run_training_episode, Agent, FeatureMode, PipelineMode, ReplayBuffer,
    TrainConfig,
};
use mallight::simulator::{init, FlowRecord, Phase, SimConfig, LANES};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let net = generate_grid(4, 4, 300.0).unwrap();
    let flow = generate_flow(&net, &FlowSpec { rate_per_300s: 1200, duration_s: 7200, od: OdPolicy::All, seed: 1 }).unwrap();
    let train_flow: Vec<FlowRecord> = flow.iter().filter(|r| r.depart_s < 3600.0).copied().collect();
    let test_flow: Vec<FlowRecord> = flow.iter().filter(|r| r.depart_s >= 3600.0)
        .map(|r| FlowRecord { depart_s: r.depart_s - 3600.0, ..*r }).collect();

    let cfg = TrainConfig {
        episodes: 10,
        eps_decay_episodes: 0,
        eps_end: 0.3, // behavior noise handled below; unused by manual loop
        ..TrainConfig::default()
    };
    let mut agent = Agent::new(16, 10, PipelineMode::idqn(), FeatureMode::Full, true, 0.001, 42);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    for episode in 0..10 {
        // Collect one episode with a longest-queue behavior policy + noise,
        // by hijacking the sim loop manually.
        let mut sim = init(&net, &train_flow, SimConfig { seed: 100 + episode, ..SimConfig::default() }).unwrap();
        let caps: Vec<[u32; LANES]> = (0..16).map(|v| sim.incoming_lane_caps(v)).collect();
        let mut obs = sim.observe();
        use mallight::rl::StepFeatures;
        let mut feats = StepFeatures::build(&obs, &caps, &agent, None).unwrap();
        for step in 0..360 {
            let actions: Vec<Phase> = (0..16).map(|v| {
                if rng.random::<f64>() < 0.3 {
                    Phase::Index(rng.random_range(0..8))
                } else {
                    let mut best = Phase::Index(0);
                    let mut best_d = -1i64;
                    for ph in Phase::all() {
                        let d: i64 = ph.movements().unwrap().iter()
                            .map(|m| obs[v].incoming[m.lane_index()] as i64).sum();
                        if d > best_d { best_d = d; best = ph; }
                    }
                    best
                }
            }).collect();
            let out = sim.step(&actions).unwrap();
            let next_feats = StepFeatures::build(&out.observations, &caps, &agent, None).unwrap();
            for i in 0..16 {
                buffer.push(mallight::rl::Transition {
                    agent: i,
                    state: feats.aggregated_row(i, agent.filters()),
                    action: actions[i].index().unwrap(),
                    reward: out.rewards[i],
                    next_state: next_feats.aggregated_row(i, agent.filters()),
                    terminal: step == 359,
                    local: feats.aggregated_row(i, agent.filters()),
                    basis: vec![],
                    next_local: next_feats.aggregated_row(i, agent.filters()),
                    next_basis: vec![],
                });
            }
            obs = out.observations;
            feats = next_feats;
        }
        // Fitted-Q passes using the production update machinery: run a
        // zero-step "episode" is not possible, so call the internal update
        // path via run_training_episode with 0 decisions... instead just
        // train via the public API: fake a 0-length episode is awkward;
        // replicate the pass here through run_training_episode on an empty
        // sim would skip pushes. Simplest: use a 1-decision sim episode to
        // trigger the update passes.
        let mut tiny = init(&net, &[], SimConfig::default()).unwrap();
        let tiny_cfg = TrainConfig { episode_seconds: 10, ..cfg.clone() };
        run_training_episode(&mut tiny, &mut agent, None, &mut buffer, &tiny_cfg, 1.0).unwrap();

        // Greedy evaluation on the test hour.
        let mut sim = init(&net, &test_flow, SimConfig { seed: 7, ..SimConfig::default() }).unwrap();
        let caps: Vec<[u32; LANES]> = (0..16).map(|v| sim.incoming_lane_caps(v)).collect();
        let mut obs = sim.observe();
        for _ in 0..360 {
            let actions = greedy_actions(&mut agent, None, &sim, &obs, &caps).unwrap();
            obs = sim.step(&actions).unwrap().observations;
        }
        let m = sim.metrics(0..3600, &[5]).unwrap();
        println!("after episode {episode}: greedy network={} node5={}", m.network_throughput, m.intersection_throughput);
    }

    // How well does Q's argmax track the demand argmax on buffer states?
    let mut agree = 0;
    let mut shown = 0;
    for (i, tr) in buffer.iter().enumerate().step_by(97) {
        let x = ndarray::Array1::from(tr.state.clone());
        let q = agent.net(0).forward(&x).unwrap();
        let qa = (0..8).max_by(|&a, &b| q[a].partial_cmp(&q[b]).unwrap()).unwrap();
        // demand from the normalized lane features (last 12 entries)
        let lanes = &tr.state[8..20];
        let demand_of = |ph: Phase| -> f64 {
            ph.movements().unwrap().iter().map(|m| lanes[m.lane_index()]).sum()
        };
        let da = (0..8).max_by(|&a, &b| {
            demand_of(Phase::Index(a as u8)).partial_cmp(&demand_of(Phase::Index(b as u8))).unwrap()
        }).unwrap();
        if qa == da { agree += 1; }
        if shown < 8 {
            let qs: Vec<String> = q.iter().map(|v| format!("{v:.0}")).collect();
            let ds: Vec<String> = (0..8).map(|a| format!("{:.2}", demand_of(Phase::Index(a)))).collect();
            println!("sample {i}: Qargmax={qa} demand_argmax={da} Q=[{}] D=[{}]", qs.join(","), ds.join(","));
            shown += 1;
        }
        if i > 3000 { break; }
    }
    println!("Q-argmax vs demand-argmax agreement: {agree}/32");
}
