//! Versioned text checkpoints: layer sizes, all parameters, diffusion
//! filters, optimizer accumulators and the RNG state. Floats are stored
//! as hex-encoded IEEE-754 bits so save -> load -> save is byte-exact.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Agent, FeatureMode, PipelineMode, RlError, StateAggregation};
use crate::diffusion::DiffusionFilters;
use crate::neural::{QNetwork, RmspropState};

const MAGIC: &str = "mallight-checkpoint v1";

fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn hex_slice(values: &[f64]) -> String {
    values.iter().map(|&v| hex_f64(v)).collect::<Vec<_>>().join(" ")
}

fn parse_f64(s: &str) -> Result<f64, RlError> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| RlError::Checkpoint(format!("bad float word `{s}`")))
}

fn parse_f64_slice(s: &str, expected: usize) -> Result<Vec<f64>, RlError> {
    let values: Result<Vec<f64>, _> = s.split_whitespace().map(parse_f64).collect();
    let values = values?;
    if values.len() != expected {
        return Err(RlError::Checkpoint(format!(
            "expected {expected} float words, got {}",
            values.len()
        )));
    }
    Ok(values)
}

pub fn checkpoint_to_string(agent: &Agent) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let feature = match agent.feature_mode {
        FeatureMode::Full => "full",
        FeatureMode::LanesOnly => "lanes-only",
    };
    let _ = writeln!(out, "feature_mode {feature}");
    let state_agg = match agent.mode.state_agg {
        StateAggregation::Trainable => "trainable",
        StateAggregation::FixedUnit => "fixed",
        StateAggregation::Off => "off",
    };
    let _ = writeln!(out, "state_agg {state_agg}");
    let _ = writeln!(out, "reward_agg {}", agent.mode.reward_agg as u8);
    let _ = writeln!(out, "shared {}", agent.shared as u8);
    let _ = writeln!(out, "agents {}", agent.n_agents);
    let _ = writeln!(out, "steps {}", agent.steps);
    let _ = writeln!(out, "episodes {}", agent.episodes_trained);
    let _ = writeln!(out, "learning_rate {}", hex_f64(agent.learning_rate));
    let seed_hex: String = agent.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    let _ = writeln!(out, "rng {} {:x}", seed_hex, agent.rng.get_word_pos());
    let _ = writeln!(out, "theta {}", hex_slice(agent.filters.values()));
    let _ = writeln!(out, "theta_acc {}", hex_slice(agent.filter_opt.accumulators()));
    for (i, net) in agent.nets.iter().enumerate() {
        let _ = writeln!(out, "net {i}");
        let sizes: Vec<String> = net.layer_sizes().iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "sizes {}", sizes.join(" "));
        let _ = writeln!(out, "params {}", hex_slice(&net.flat_params()));
        let _ = writeln!(out, "acc {}", hex_slice(agent.opts[i].accumulators()));
    }
    let _ = writeln!(out, "end");
    out
}

pub fn agent_from_string(text: &str) -> Result<Agent, RlError> {
    let mut lines = text.lines();
    let err = |msg: &str| RlError::Checkpoint(msg.to_string());
    if lines.next() != Some(MAGIC) {
        return Err(err("unrecognized checkpoint header"));
    }

    let mut field = |name: &str| -> Result<String, RlError> {
        let line = lines
            .next()
            .ok_or_else(|| err(&format!("missing field `{name}`")))?;
        line.strip_prefix(name)
            .map(|rest| rest.trim().to_string())
            .ok_or_else(|| err(&format!("expected field `{name}`, got `{line}`")))
    };

    let feature_mode = match field("feature_mode")?.as_str() {
        "full" => FeatureMode::Full,
        "lanes-only" => FeatureMode::LanesOnly,
        other => return Err(err(&format!("unknown feature mode `{other}`"))),
    };
    let state_agg = match field("state_agg")?.as_str() {
        "trainable" => StateAggregation::Trainable,
        "fixed" => StateAggregation::FixedUnit,
        "off" => StateAggregation::Off,
        other => return Err(err(&format!("unknown state aggregation `{other}`"))),
    };
    let reward_agg = field("reward_agg")? == "1";
    let shared = field("shared")? == "1";
    let n_agents: usize = field("agents")?
        .parse()
        .map_err(|_| err("bad agent count"))?;
    let steps: usize = field("steps")?.parse().map_err(|_| err("bad step count"))?;
    let episodes_trained: usize = field("episodes")?
        .parse()
        .map_err(|_| err("bad episode count"))?;
    let learning_rate = parse_f64(&field("learning_rate")?)?;

    let rng_line = field("rng")?;
    let mut rng_parts = rng_line.split_whitespace();
    let seed_hex = rng_parts.next().ok_or_else(|| err("missing rng seed"))?;
    let pos_hex = rng_parts.next().ok_or_else(|| err("missing rng position"))?;
    if seed_hex.len() != 64 {
        return Err(err("rng seed must be 32 bytes"));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed.iter_mut().enumerate() {
        *chunk = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
            .map_err(|_| err("bad rng seed byte"))?;
    }
    let word_pos = u128::from_str_radix(pos_hex, 16).map_err(|_| err("bad rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    let theta = parse_f64_slice(&field("theta")?, steps)?;
    let theta_acc = parse_f64_slice(&field("theta_acc")?, steps)?;
    let mut filter_opt = RmspropState::new(steps, learning_rate);
    filter_opt.accumulators_mut().copy_from_slice(&theta_acc);

    let net_count = if shared { 1 } else { n_agents };
    let mut nets = Vec::with_capacity(net_count);
    let mut opts = Vec::with_capacity(net_count);
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..net_count {
        let header = field(&format!("net {i}"))?;
        if !header.is_empty() {
            return Err(err(&format!("unexpected tokens after net header: `{header}`")));
        }
        let sizes: Vec<usize> = field("sizes")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| err("bad layer size")))
            .collect::<Result<_, _>>()?;
        let mut net = QNetwork::with_layers(&sizes, &mut init_rng);
        let params = parse_f64_slice(&field("params")?, net.param_count())?;
        net.set_flat_params(&params)?;
        let acc = parse_f64_slice(&field("acc")?, net.param_count())?;
        let mut opt = RmspropState::new(net.param_count(), learning_rate);
        opt.accumulators_mut().copy_from_slice(&acc);
        nets.push(net);
        opts.push(opt);
    }
    if lines.next() != Some("end") {
        return Err(err("missing end marker"));
    }

    Ok(Agent {
        nets,
        opts,
        filters: DiffusionFilters::from_values(theta),
        filter_opt,
        shared,
        mode: PipelineMode {
            state_agg,
            reward_agg,
        },
        feature_mode,
        n_agents,
        steps,
        learning_rate,
        episodes_trained,
        rng,
    })
}

/// Atomically writes the checkpoint next to its final path.
pub fn save_checkpoint(path: impl AsRef<Path>, agent: &Agent) -> Result<(), RlError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, checkpoint_to_string(agent))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Agent, RlError> {
    agent_from_string(&std::fs::read_to_string(path)?)
}
