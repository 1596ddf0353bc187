//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. Run with `cargo test -p mallight --test acceptance -- --nocapture`
//! to see the lines as they complete.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use mallight::controllers::max_pressure_action;
use mallight::diffusion::{
    aggregate_reward, aggregate_state, conv_backward, final_reward, masked_diffusion_conv,
    DiffusionFilters, DiffusionOperator, MalfunctionMask,
};
use mallight::harness::{
    generate_flow, generate_grid, metrics_csv, run_experiment, ControllerKind, ExperimentConfig,
    ExperimentReport, FlowSpec, OdPolicy,
};
use mallight::network::{
    build_edge_weights, default_sigma, transition_matrix, Intersection, RoadNetwork, RoadSegment,
};
use mallight::neural::{mse_loss, QNetwork};
use mallight::rl::{
    run_training_episode, Agent, FeatureMode, PipelineMode, ReplayBuffer, TrainConfig, Trainer,
};
use mallight::simulator::{
    accidents_to_csv, init, local_reward, FlowRecord, IntersectionObservation, Phase, SimConfig,
    LANES,
};

fn check(criterion: u32, desc: &str, pass: bool) {
    println!(
        "criterion {criterion}: {} - {desc}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {desc}");
}

#[test]
fn criterion_1_pressure_oracle() {
    let mut incoming = [0u32; LANES];
    incoming[..4].copy_from_slice(&[3, 3, 1, 2]);
    let mut outgoing = [0u32; LANES];
    outgoing[..4].copy_from_slice(&[1, 1, 3, 2]);
    let obs = IntersectionObservation {
        phase: Phase::Index(0),
        incoming,
        outgoing,
    };
    check(
        1,
        "worked pressure example gives pressure 2 and reward -2",
        obs.pressure() == 2 && local_reward(&obs) == -2.0,
    );
}

/// Random connected network: a random tree plus extra edges, mirrored into
/// directed segment pairs with positive lengths.
fn random_connected_network(rng: &mut ChaCha8Rng) -> RoadNetwork {
    let n = rng.random_range(2..=30);
    let nodes = (0..n)
        .map(|id| Intersection {
            id,
            x: rng.random_range(-2000.0..2000.0),
            y: rng.random_range(-2000.0..2000.0),
        })
        .collect();
    let mut pairs = Vec::new();
    for v in 1..n {
        let parent = rng.random_range(0..v);
        pairs.push((parent, v));
    }
    let extras = rng.random_range(0..n);
    for _ in 0..extras {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && !pairs.contains(&(a.min(b), a.max(b))) {
            pairs.push((a.min(b), a.max(b)));
        }
    }
    let mut edges = Vec::new();
    for (a, b) in pairs {
        let len = rng.random_range(50.0..1500.0);
        for (f, t) in [(a, b), (b, a)] {
            edges.push(RoadSegment {
                from: f,
                to: t,
                length_m: len,
                lanes_per_direction: 3,
            });
        }
    }
    RoadNetwork::new(nodes, edges).expect("generator builds valid networks")
}

#[test]
fn criterion_2_row_stochasticity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x2);
    let mut worst_row = 0.0f64;
    let mut worst_power = 0.0f64;
    for _ in 0..100 {
        let net = random_connected_network(&mut rng);
        let sigma = default_sigma(&net);
        let t = transition_matrix(&build_edge_weights(&net, sigma).unwrap()).unwrap();
        for row in t.values().rows() {
            worst_row = worst_row.max((row.sum() - 1.0).abs());
        }
        let n = net.node_count();
        let op = DiffusionOperator::new(&t, MalfunctionMask::all(n), 10).unwrap();
        for k in 1..=10 {
            for row in op.power(k).rows() {
                worst_power = worst_power.max((row.sum() - 1.0).abs());
            }
        }
    }
    check(
        2,
        &format!(
            "row sums within 1e-9 (worst {worst_row:.2e}) and powers within 1e-8 (worst {worst_power:.2e}) on 100 random graphs"
        ),
        worst_row < 1e-9 && worst_power < 1e-8,
    );
}

fn grid4x4_flow(seed: u64) -> (RoadNetwork, Vec<FlowRecord>) {
    let net = generate_grid(4, 4, 300.0).unwrap();
    let flow = generate_flow(
        &net,
        &FlowSpec {
            rate_per_300s: 1200,
            duration_s: 7200,
            od: OdPolicy::All,
            seed,
        },
    )
    .unwrap();
    (net, flow)
}

#[test]
fn criterion_3_empty_mask_degeneracy() {
    // Exact identities on the aggregation operators.
    let net = generate_grid(4, 4, 300.0).unwrap();
    let t = transition_matrix(&build_edge_weights(&net, 300.0).unwrap()).unwrap();
    let op = DiffusionOperator::new(&t, MalfunctionMask::empty(16), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3);
    let s = Array2::from_shape_fn((16, 20), |_| rng.random_range(0.0..5.0));
    let conv = masked_diffusion_conv(&s, &op, &DiffusionFilters::uniform(10)).unwrap();
    let s_agg = aggregate_state(&conv, &s).unwrap();
    let r = Array1::from_shape_fn(16, |_| -rng.random_range(0.0..50.0));
    let r_agg = final_reward(&r, &aggregate_reward(&r, &op).unwrap()).unwrap();
    let identities = s_agg == s && r_agg == r;

    // Full pipeline: training data must match the independent-DQN mode
    // transition-for-transition under identical seeds.
    let (net, flow) = grid4x4_flow(7);
    let train: Vec<FlowRecord> = flow.iter().copied().filter(|r| r.depart_s < 3600.0).collect();
    let cfg = TrainConfig {
        episodes: 2,
        eps_decay_episodes: 30,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut run = |mode: PipelineMode, op: Option<&DiffusionOperator>| {
        let agent = Agent::new(16, 10, mode, FeatureMode::Full, true, 0.001, 99);
        let mut trainer = Trainer::new(agent, cfg.clone()).unwrap();
        for episode in 0..cfg.episodes {
            let mut sim = init(&net, &train, SimConfig { seed: 42, ..SimConfig::default() }).unwrap();
            sim.inject_malfunction(&[]).unwrap();
            run_training_episode(
                &mut sim,
                &mut trainer.agent,
                op,
                &mut trainer.buffer,
                &cfg,
                cfg.epsilon(episode),
            )
            .unwrap();
        }
        trainer
    };
    let mallight = run(PipelineMode::mallight(), Some(&op));
    let idqn = run(PipelineMode::idqn(), None);
    let mut pipeline_identical = mallight.buffer.len() == idqn.buffer.len();
    for (a, b) in mallight.buffer.iter().zip(idqn.buffer.iter()) {
        pipeline_identical &= a.agent == b.agent
            && a.action == b.action
            && a.state == b.state
            && a.next_state == b.next_state
            && a.reward.to_bits() == b.reward.to_bits()
            && a.terminal == b.terminal;
    }
    pipeline_identical &=
        mallight.agent.net(0).flat_params() == idqn.agent.net(0).flat_params();

    check(
        3,
        "empty mask: S''=S and R''=R exactly; pipeline transitions identical to independent mode",
        identities && pipeline_identical,
    );
}

#[test]
fn criterion_4_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let n = 2 + trial % 3; // up to 4 nodes
        let p = 2 + trial % 5; // up to 6 features
        let k = 1 + trial % 3;
        let nodes = (0..n)
            .map(|id| Intersection { id, x: 150.0 * id as f64, y: 0.0 })
            .collect();
        let mut edges = Vec::new();
        for a in 0..n - 1 {
            let len = 100.0 + 25.0 * (a as f64);
            for (f, t) in [(a, a + 1), (a + 1, a)] {
                edges.push(RoadSegment { from: f, to: t, length_m: len, lanes_per_direction: 3 });
            }
        }
        let net = RoadNetwork::new(nodes, edges).unwrap();
        let t = transition_matrix(&build_edge_weights(&net, 120.0).unwrap()).unwrap();
        let mask = MalfunctionMask::from_set(n, &[trial % n]).unwrap();
        let op = DiffusionOperator::new(&t, mask, k).unwrap();
        let filters =
            DiffusionFilters::from_values((0..k).map(|_| rng.random_range(0.2..1.2)).collect());
        let s = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
        let net_q = QNetwork::with_layers(&[p, 6, 5, 8], &mut rng);
        let agent_row = rng.random_range(0..n);
        let action = rng.random_range(0..8);
        let target = rng.random_range(-2.0..2.0);

        // Loss of the exact training composition for one agent row.
        let loss_of = |filters: &DiffusionFilters, net_q: &QNetwork| -> f64 {
            let conv = masked_diffusion_conv(&s, &op, filters).unwrap();
            let agg = aggregate_state(&conv, &s).unwrap();
            let x = Array1::from(agg.row(agent_row).to_vec());
            let q = net_q.forward(&x).unwrap();
            mse_loss(q[action], target).0
        };

        // Analytic gradients through loss -> Q -> network -> aggregation.
        let conv = masked_diffusion_conv(&s, &op, &filters).unwrap();
        let agg = aggregate_state(&conv, &s).unwrap();
        let x = Array1::from(agg.row(agent_row).to_vec());
        let q = net_q.forward(&x).unwrap();
        let (_, dq) = mse_loss(q[action], target);
        let mut grad_out = Array1::zeros(8);
        grad_out[action] = dq;
        let (net_grads, input_grad) = net_q.backward(&x, &grad_out).unwrap();
        let flat_net_grads = net_q.flatten(&net_grads);
        let mut upstream = Array2::zeros((n, p));
        for (j, g) in input_grad.iter().enumerate() {
            upstream[(agent_row, j)] = *g;
        }
        let (d_theta, _) = conv_backward(&upstream, &s, &op, &filters).unwrap();

        let h = 1e-5;
        for idx in 0..k {
            let mut plus = filters.clone();
            plus.values_mut()[idx] += h;
            let mut minus = filters.clone();
            minus.values_mut()[idx] -= h;
            let fd = (loss_of(&plus, &net_q) - loss_of(&minus, &net_q)) / (2.0 * h);
            let denom = fd.abs().max(d_theta[idx].abs()).max(1e-6);
            worst = worst.max(((fd - d_theta[idx]) / denom).abs());
        }
        let base_params = net_q.flat_params();
        for idx in 0..base_params.len() {
            let mut p_vec = base_params.clone();
            p_vec[idx] += h;
            let mut plus = net_q.clone();
            plus.set_flat_params(&p_vec).unwrap();
            p_vec[idx] -= 2.0 * h;
            let mut minus = net_q.clone();
            minus.set_flat_params(&p_vec).unwrap();
            let fd = (loss_of(&filters, &plus) - loss_of(&filters, &minus)) / (2.0 * h);
            let denom = fd.abs().max(flat_net_grads[idx].abs()).max(1e-6);
            worst = worst.max(((fd - flat_net_grads[idx]) / denom).abs());
        }
    }
    check(
        4,
        &format!("end-to-end gradients match finite differences (worst rel err {worst:.2e})"),
        worst < 1e-4,
    );
}

#[test]
fn criterion_5_max_pressure_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5);
    let mut agree = 0;
    for _ in 0..100 {
        let mut incoming = [0u32; LANES];
        let mut downstream = [0u32; LANES];
        for i in 0..LANES {
            incoming[i] = rng.random_range(0..15);
            downstream[i] = rng.random_range(0..15);
        }
        let obs = IntersectionObservation {
            phase: Phase::Index(rng.random_range(0..8)),
            incoming,
            outgoing: [0; LANES],
        };
        let got = max_pressure_action(&obs, &downstream);
        let mut best: Option<(Phase, i64)> = None;
        for phase in Phase::all() {
            let score: i64 = phase
                .movements()
                .unwrap()
                .iter()
                .map(|m| incoming[m.lane_index()] as i64 - downstream[m.lane_index()] as i64)
                .sum();
            if best.map(|(_, s)| score > s).unwrap_or(true) {
                best = Some((phase, score));
            }
        }
        if got == best.unwrap().0 {
            agree += 1;
        }
    }
    check(
        5,
        &format!("max-pressure equals exhaustive argmax on {agree}/100 random observations"),
        agree == 100,
    );
}

/// Two hours of Grid4x4 under fixed cycling phases with a blackout;
/// conservation is enforced internally on every tick.
fn two_hour_run(seed: u64) -> (String, String) {
    let (net, flow) = grid4x4_flow(11);
    let mut sim = init(&net, &flow, SimConfig { seed, ..SimConfig::default() }).unwrap();
    sim.inject_malfunction(&[5]).unwrap();
    let decisions = 7200 / 10;
    for step in 0..decisions {
        let actions: Vec<Phase> = (0..16)
            .map(|v| {
                if sim.is_malfunctioning(v) {
                    Phase::MalfunctionOff
                } else {
                    Phase::Index(((step / 2) % 8) as u8)
                }
            })
            .collect();
        sim.step(&actions).unwrap();
    }
    let metrics = sim.metrics(0..7200, &[5]).unwrap();
    (
        format!("{metrics:?}"),
        accidents_to_csv(sim.accident_log()),
    )
}

#[test]
fn criterion_6_conservation_and_determinism() {
    let (metrics_a, accidents_a) = two_hour_run(123);
    let (metrics_b, accidents_b) = two_hour_run(123);
    check(
        6,
        "2-hour run conserves vehicles every tick; identical seeds give byte-identical outputs",
        metrics_a == metrics_b && accidents_a == accidents_b && !accidents_a.is_empty(),
    );
}

#[test]
fn criterion_7_hop_decay() {
    let net = generate_grid(4, 4, 300.0).unwrap();
    let sigma = default_sigma(&net);
    let t = transition_matrix(&build_edge_weights(&net, sigma).unwrap()).unwrap();
    let op = DiffusionOperator::new(&t, MalfunctionMask::empty(16), 10).unwrap();
    let influence = op.power_sum();
    let hops = net.hop_distances(0);
    let mut means = Vec::new();
    for h in 1..=4 {
        let targets: Vec<usize> = (0..16).filter(|&v| hops[v] == h).collect();
        means.push(
            targets.iter().map(|&v| influence[(0, v)]).sum::<f64>() / targets.len() as f64,
        );
    }
    let non_increasing = means.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    check(
        7,
        &format!("mean influence per hop non-increasing for hops 1-4: {means:?}"),
        non_increasing,
    );
}

/// Shared protocol for criteria 8 and 9: Grid4x4 at 1200 vehicles/300 s,
/// one interior blackout, 50 training episodes, 5 seeds.
fn table_protocol(controller: ControllerKind, ablation: Option<&str>, dir: &std::path::Path) -> ExperimentReport {
    let mut cfg = ExperimentConfig::default();
    cfg.net_path = dir.join("grid.net");
    cfg.flow_path = dir.join("flow.txt");
    cfg.out_dir = dir.join(format!(
        "out_{}{}",
        controller.name(),
        ablation.unwrap_or("")
    ));
    cfg.controller = controller;
    cfg.malfunction = vec![5];
    cfg.seeds = vec![1, 2, 3, 4, 5];
    cfg.split_s = 3600;
    cfg.train.episodes = 50;
    cfg.train.eps_decay_episodes = 30;
    if let Some(a) = ablation {
        cfg.set("ablation", a).unwrap();
    }
    run_experiment(&cfg).unwrap()
}

fn rr_by_seed(report: &ExperimentReport) -> Vec<f64> {
    report
        .results
        .iter()
        .map(|r| r.rr_intersection.expect("throughput is nonzero at this demand"))
        .collect()
}

fn wins(a: &[f64], b: &[f64], strict: bool) -> usize {
    a.iter()
        .zip(b)
        .filter(|(x, y)| if strict { x < y } else { x <= y })
        .count()
}

#[test]
fn criteria_8_and_9_directional_replication() {
    let dir = tempfile::tempdir().unwrap();
    let (net, flow) = grid4x4_flow(20240101);
    mallight::harness::write_atomic(dir.path().join("grid.net"), &net.to_text()).unwrap();
    mallight::harness::write_atomic(
        dir.path().join("flow.txt"),
        &mallight::simulator::flow_to_text(&flow),
    )
    .unwrap();

    let mallight_report = table_protocol(ControllerKind::MalLight, None, dir.path());
    let idqn_report = table_protocol(ControllerKind::Idqn, None, dir.path());
    let fixed_report = table_protocol(ControllerKind::FixedTime, None, dir.path());
    let ablation_r_report = table_protocol(ControllerKind::MalLight, Some("R"), dir.path());

    println!("--- metrics (mallight) ---\n{}", metrics_csv(&mallight_report));
    println!("--- metrics (idqn) ---\n{}", metrics_csv(&idqn_report));
    println!("--- metrics (fixedtime) ---\n{}", metrics_csv(&fixed_report));
    println!("--- metrics (mallight-R) ---\n{}", metrics_csv(&ablation_r_report));

    let ml = rr_by_seed(&mallight_report);
    let idqn = rr_by_seed(&idqn_report);
    let fixed = rr_by_seed(&fixed_report);
    let ablated = rr_by_seed(&ablation_r_report);

    let vs_idqn = wins(&ml, &idqn, true);
    let vs_fixed = wins(&ml, &fixed, true);
    check(
        8,
        &format!(
            "intersection RR: mallight {ml:.1?} beats idqn {idqn:.1?} in {vs_idqn}/5 and fixedtime {fixed:.1?} in {vs_fixed}/5 seeds"
        ),
        vs_idqn >= 4 && vs_fixed >= 4,
    );

    let vs_ablated = wins(&ml, &ablated, false);
    check(
        9,
        &format!(
            "intersection RR: full mallight {ml:.1?} <= reward-ablated {ablated:.1?} in {vs_ablated}/5 seeds"
        ),
        vs_ablated >= 4,
    );

    // Training-progress property on the same runs: mean episode reward over
    // 10-episode windows is non-decreasing in at least 4 of 5 seeds.
    let improving = mallight_report
        .results
        .iter()
        .filter(|r| {
            let window_means: Vec<f64> = r
                .curve
                .chunks(10)
                .map(|w| w.iter().map(|s| s.mean_reward).sum::<f64>() / w.len() as f64)
                .collect();
            window_means.windows(2).all(|w| w[1] >= w[0])
        })
        .count();
    println!(
        "criterion 8 supplement: reward windows non-decreasing in {improving}/5 seeds"
    );
    assert!(
        improving >= 4,
        "training reward failed to improve in {}/5 seeds",
        5 - improving
    );
}

#[test]
fn criterion_10_zero_collision_control() {
    let (net, flow) = grid4x4_flow(31);
    let cfg = SimConfig {
        foe_ignore_prob: 0.0,
        seed: 9,
        ..SimConfig::default()
    };
    let mut sim = init(&net, &flow, cfg).unwrap();
    sim.inject_malfunction(&[5, 6, 9, 10]).unwrap();
    for step in 0..720 {
        let actions: Vec<Phase> = (0..16)
            .map(|v| {
                if sim.is_malfunctioning(v) {
                    Phase::MalfunctionOff
                } else {
                    Phase::Index((step % 8) as u8)
                }
            })
            .collect();
        sim.step(&actions).unwrap();
    }
    check(
        10,
        &format!(
            "2-hour run with foe-ignore 0 logged {} accidents",
            sim.accident_log().len()
        ),
        sim.accident_log().is_empty(),
    );
}
