//! Scratch probe: (1) supervised regression sanity of the net+optimizer,
//! (2) offline fitted-Q on longest-queue expert data.
use mallight::harness::{generate_flow, generate_grid, FlowSpec, OdPolicy};
use mallight::neural::{mse_loss, QNetwork, RmspropState};
use mallight::rl::{feature_row, FeatureMode};
use mallight::simulator::{init, FlowRecord, Phase, SimConfig, LANES};
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn demand(incoming: &[u32; LANES], phase: Phase) -> f64 {
    phase
        .movements()
        .unwrap()
        .iter()
        .map(|m| incoming[m.lane_index()] as f64)
        .sum()
}

fn main() {
    // --- Part 1: supervised regression of per-phase demand ---
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = QNetwork::q_network(20, &mut rng);
    let mut opt = RmspropState::new(net.param_count(), 0.001);
    let caps = [40u32; LANES];
    let sample = |rng: &mut ChaCha8Rng| {
        let mut incoming = [0u32; LANES];
        for q in incoming.iter_mut() {
            *q = rng.random_range(0..40);
        }
        let phase = Phase::Index(rng.random_range(0..8));
        let obs = mallight::simulator::IntersectionObservation {
            phase,
            incoming,
            outgoing: [0; LANES],
        };
        (Array1::from(feature_row(&obs, &caps, FeatureMode::Full)), incoming)
    };
    for step in 0..20000 {
        // batch of 32, averaged
        let mut flat_sum = vec![0.0; net.param_count()];
        let mut loss_sum = 0.0;
        for _ in 0..32 {
            let (x, incoming) = sample(&mut rng);
            let a = rng.random_range(0..8usize);
            let target = demand(&incoming, Phase::Index(a as u8));
            let q = net.forward(&x).unwrap();
            let (loss, dq) = mse_loss(q[a], target);
            loss_sum += loss;
            let mut g = Array1::zeros(8);
            g[a] = dq;
            let (grads, _) = net.backward(&x, &g).unwrap();
            let flat = net.flatten(&grads);
            for (s, v) in flat_sum.iter_mut().zip(flat) {
                *s += v;
            }
        }
        for v in flat_sum.iter_mut() {
            *v /= 32.0;
        }
        net.apply_flat_gradients(&flat_sum, &mut opt).unwrap();
        if step % 5000 == 0 {
            println!("supervised step {step}: batch loss {:.2}", loss_sum / 32.0);
        }
    }
    let mut correct = 0;
    for _ in 0..500 {
        let (x, incoming) = sample(&mut rng);
        let q = net.forward(&x).unwrap();
        let pred = (0..8).max_by(|&a, &b| q[a].partial_cmp(&q[b]).unwrap()).unwrap();
        let best = (0..8)
            .max_by(|&a, &b| {
                demand(&incoming, Phase::Index(a as u8))
                    .partial_cmp(&demand(&incoming, Phase::Index(b as u8)))
                    .unwrap()
            })
            .unwrap();
        if pred == best {
            correct += 1;
        }
    }
    println!("supervised argmax agreement: {correct}/500");
}
