//! Experiment front end: dataset generation, train/eval orchestration,
//! ablations, sweeps, influence reports and CSV emission.
//!
//! A run is: load network and flow, train the learning controller on the
//! first split of the flow (with the configured malfunction active), then
//! evaluate the second split twice — once with no malfunction and once
//! with the configured set — and report throughputs, accidents and
//! reduction ratios. Classical controllers skip the training phase.

mod config;
mod gen;

pub use config::{fnv1a64, Ablation, ControllerKind, ExperimentConfig};
pub use gen::{generate_flow, generate_grid, FlowSpec, OdPolicy};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controllers::{
    fixed_time_action, max_pressure_action, sotl_action, ControllerError, FixedTimePlan,
};
use crate::diffusion::{
    stationary_distribution, DiffusionError, DiffusionOperator, MalfunctionMask,
};
use crate::metrics::{reduction_ratio, ExperimentMetrics};
use crate::network::{
    build_edge_weights, default_sigma, transition_matrix, NetworkError, RoadNetwork,
    TransitionMatrix,
};
use crate::rl::{
    self, checkpoint_to_string, curve_to_csv, greedy_actions, load_checkpoint, Agent,
    EpisodeStats, PipelineMode, RlError, StateAggregation, Trainer,
};
use crate::simulator::{
    accidents_to_csv, downstream_by_movement, init, load_flow, FlowRecord, Phase, SimConfig,
    SimError, SimulationState, LANES,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("grid needs at least 2x2 intersections, got {rows}x{cols}")]
    BadGrid { rows: usize, cols: usize },
    #[error("malfunction id {id} outside network of {nodes} intersections")]
    BadMalfunction { id: usize, nodes: usize },
    #[error("metrics digest mismatch: {0}")]
    DigestMismatch(String),
    #[error("bad metrics file: {0}")]
    BadMetrics(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Deterministic stream separation for the sub-seeds a run needs.
fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const AGENT_SALT: u64 = 0x01;
const TRAIN_SIM_SALT: u64 = 0x1000;
const EVAL_SIM_SALT: u64 = 0x02;
const OFFSET_SALT: u64 = 0x03;

/// Everything loaded once per experiment and shared across seeds.
pub struct Assets {
    pub net: RoadNetwork,
    pub transition: TransitionMatrix,
    pub train_flow: Vec<FlowRecord>,
    pub test_flow: Vec<FlowRecord>,
}

pub fn load_assets(cfg: &ExperimentConfig) -> Result<Assets, HarnessError> {
    let net = RoadNetwork::load(&cfg.net_path)?;
    let sigma = cfg.sigma.unwrap_or_else(|| default_sigma(&net));
    let transition = transition_matrix(&build_edge_weights(&net, sigma)?)?;
    let flow = load_flow(&cfg.flow_path)?;
    let split = cfg.split_s as f64;
    let train_flow: Vec<FlowRecord> =
        flow.iter().copied().filter(|r| r.depart_s < split).collect();
    let test_flow: Vec<FlowRecord> = flow
        .iter()
        .filter(|r| r.depart_s >= split)
        .map(|r| FlowRecord {
            depart_s: r.depart_s - split,
            ..*r
        })
        .collect();
    for &id in &cfg.malfunction {
        if id >= net.node_count() {
            return Err(HarnessError::BadMalfunction {
                id,
                nodes: net.node_count(),
            });
        }
    }
    Ok(Assets {
        net,
        transition,
        train_flow,
        test_flow,
    })
}

/// Results of one seed: metrics for both evaluation arms plus artifacts.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub no_mal: ExperimentMetrics,
    pub mal: ExperimentMetrics,
    pub rr_network: Option<f64>,
    pub rr_intersection: Option<f64>,
    pub curve: Vec<EpisodeStats>,
    pub accidents_no_mal_csv: String,
    pub accidents_mal_csv: String,
    /// Trained model state, present for learning controllers.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub controller: ControllerKind,
    pub digest: String,
    pub results: Vec<SeedResult>,
}

fn mask_for(
    cfg: &ExperimentConfig,
    n: usize,
    malfunction: &[usize],
) -> Result<MalfunctionMask, HarnessError> {
    if cfg.ablation == Some(Ablation::NoMask) {
        return Ok(MalfunctionMask::all(n));
    }
    Ok(MalfunctionMask::from_set(n, malfunction)?)
}

fn pipeline_mode(cfg: &ExperimentConfig) -> PipelineMode {
    match (cfg.controller, cfg.ablation) {
        (ControllerKind::Idqn, _) => PipelineMode::idqn(),
        (_, Some(Ablation::FixedStateWeights)) => PipelineMode {
            state_agg: StateAggregation::FixedUnit,
            reward_agg: true,
        },
        (_, Some(Ablation::NoRewardAggregation)) => PipelineMode {
            state_agg: StateAggregation::Trainable,
            reward_agg: false,
        },
        _ => PipelineMode::mallight(),
    }
}

/// Greedy rollout of `seconds` of simulated time under the configured
/// controller. `agent` must be `Some` for the learning controllers.
fn evaluate_controller(
    sim: &mut SimulationState,
    cfg: &ExperimentConfig,
    seed: u64,
    mut agent: Option<(&mut Agent, Option<&DiffusionOperator>)>,
    seconds: u32,
) -> Result<(), HarnessError> {
    let n = sim.node_count();
    let dt = sim.config().decision_interval_s;
    let decisions = seconds / dt;
    let caps: Vec<[u32; LANES]> = (0..n).map(|v| sim.incoming_lane_caps(v)).collect();

    let plans: Option<Vec<FixedTimePlan>> = if cfg.controller == ControllerKind::FixedTime {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, OFFSET_SALT));
        let cycle = cfg.fixed_split_s * 8;
        Some(
            (0..n)
                .map(|_| {
                    FixedTimePlan::equal_splits(cfg.fixed_split_s, rng.random_range(0..cycle), dt)
                })
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };
    let mut switch_time = vec![0u64; n];
    let mut prev: Vec<Phase> = sim.observe().iter().map(|o| o.phase).collect();

    let mut obs = sim.observe();
    for _ in 0..decisions {
        let clock = sim.clock_s();
        let actions: Vec<Phase> = match cfg.controller {
            ControllerKind::FixedTime => {
                let plans = plans.as_ref().unwrap();
                (0..n)
                    .map(|v| {
                        if sim.is_malfunctioning(v) {
                            Phase::MalfunctionOff
                        } else {
                            fixed_time_action(&plans[v], clock)
                        }
                    })
                    .collect()
            }
            ControllerKind::Sotl => (0..n)
                .map(|v| {
                    if sim.is_malfunctioning(v) {
                        Phase::MalfunctionOff
                    } else {
                        let elapsed = (clock - switch_time[v]) as u32;
                        sotl_action(&obs[v], &cfg.sotl, elapsed)
                    }
                })
                .collect(),
            ControllerKind::MaxPressure => (0..n)
                .map(|v| {
                    if sim.is_malfunctioning(v) {
                        Phase::MalfunctionOff
                    } else {
                        max_pressure_action(&obs[v], &downstream_by_movement(&obs[v]))
                    }
                })
                .collect(),
            ControllerKind::Idqn | ControllerKind::MalLight => {
                let (agent, op) = agent
                    .as_mut()
                    .map(|(a, op)| (&mut **a, *op))
                    .expect("learning controller needs an agent");
                greedy_actions(agent, op, sim, &obs, &caps)?
            }
        };
        for v in 0..n {
            if actions[v] != prev[v] {
                switch_time[v] = clock;
                prev[v] = actions[v];
            }
        }
        let out = sim.step(&actions)?;
        obs = out.observations;
    }
    Ok(())
}

struct ArmOutcome {
    metrics: ExperimentMetrics,
    accidents_csv: String,
}

fn eval_arm(
    cfg: &ExperimentConfig,
    assets: &Assets,
    seed: u64,
    agent: &mut Option<Agent>,
    malfunction: &[usize],
    focus: &[usize],
    digest: &str,
) -> Result<ArmOutcome, HarnessError> {
    let mut sim = init(
        &assets.net,
        &assets.test_flow,
        SimConfig {
            seed: mix_seed(seed, EVAL_SIM_SALT),
            ..cfg.sim.clone()
        },
    )?;
    sim.inject_malfunction(malfunction)?;
    let mask = mask_for(cfg, assets.net.node_count(), malfunction)?;
    let op = DiffusionOperator::new(&assets.transition, mask, cfg.diffusion_k)?;
    let agent_ref = match (cfg.controller.is_learning(), agent.as_mut()) {
        (true, Some(a)) => {
            let op_ref = if cfg.controller == ControllerKind::Idqn {
                None
            } else {
                Some(&op)
            };
            Some((a, op_ref))
        }
        _ => None,
    };
    evaluate_controller(&mut sim, cfg, seed, agent_ref, cfg.split_s)?;
    let mut metrics = sim.metrics(0..cfg.split_s as u64, focus)?;
    metrics.seed = seed;
    metrics.config_digest = digest.to_string();
    Ok(ArmOutcome {
        metrics,
        accidents_csv: accidents_to_csv(sim.accident_log()),
    })
}

/// Trains (when applicable) and evaluates a single seed.
pub fn run_seed(
    cfg: &ExperimentConfig,
    assets: &Assets,
    seed: u64,
    digest: &str,
) -> Result<SeedResult, HarnessError> {
    let n = assets.net.node_count();
    let mut malfunction = cfg.malfunction.clone();
    malfunction.sort_unstable();
    malfunction.dedup();

    let mut agent: Option<Agent> = None;
    let mut curve = Vec::new();
    if cfg.controller.is_learning() {
        let shared = if cfg.controller == ControllerKind::Idqn {
            cfg.idqn_shared
        } else {
            true
        };
        let ckpt_path = checkpoint_path(cfg, seed);
        let new_agent = if cfg.resume && ckpt_path.exists() {
            load_checkpoint(&ckpt_path)?
        } else {
            Agent::new(
                n,
                cfg.diffusion_k,
                pipeline_mode(cfg),
                cfg.features,
                shared,
                cfg.train.learning_rate,
                mix_seed(seed, AGENT_SALT),
            )
        };
        let train_cfg = rl::TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let mut trainer = Trainer::new(new_agent, train_cfg)?;
        let train_op = if cfg.controller == ControllerKind::Idqn {
            None
        } else {
            Some(DiffusionOperator::new(
                &assets.transition,
                mask_for(cfg, n, &malfunction)?,
                cfg.diffusion_k,
            )?)
        };
        let sim_cfg = cfg.sim.clone();
        let net = &assets.net;
        let flow = &assets.train_flow;
        let mal = &malfunction;
        rl::train(&mut trainer, train_op.as_ref(), |episode| {
            let mut sim = init(
                net,
                flow,
                SimConfig {
                    seed: mix_seed(seed, TRAIN_SIM_SALT + episode as u64),
                    ..sim_cfg.clone()
                },
            )?;
            sim.inject_malfunction(mal)
                .expect("malfunction ids validated at load");
            Ok(sim)
        })?;
        curve = trainer.curve.clone();
        agent = Some(trainer.agent);
    }
    let checkpoint = agent.as_ref().map(checkpoint_to_string);

    // Focus for intersection-level metrics: the (would-be) malfunctioning
    // intersections, identical in both arms; all nodes when none are set.
    let focus: Vec<usize> = if malfunction.is_empty() {
        (0..n).collect()
    } else {
        malfunction.clone()
    };
    let no_mal = eval_arm(cfg, assets, seed, &mut agent, &[], &focus, digest)?;
    let mal = eval_arm(cfg, assets, seed, &mut agent, &malfunction, &focus, digest)?;

    let rr_network = reduction_ratio(
        no_mal.metrics.network_throughput as f64,
        mal.metrics.network_throughput as f64,
    );
    let rr_intersection = reduction_ratio(
        no_mal.metrics.intersection_throughput,
        mal.metrics.intersection_throughput,
    );
    let mut mal_metrics = mal.metrics;
    mal_metrics.reduction_ratio = rr_intersection;
    Ok(SeedResult {
        seed,
        no_mal: no_mal.metrics,
        mal: mal_metrics,
        rr_network,
        rr_intersection,
        curve,
        accidents_no_mal_csv: no_mal.accidents_csv,
        accidents_mal_csv: mal.accidents_csv,
        checkpoint,
    })
}

/// Per-seed checkpoint location inside the configured output directory.
pub fn checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("checkpoint_seed{seed}.ckpt"))
}

/// Runs every configured seed (concurrently; each seed is an isolated
/// replica) and collects the per-seed results in seed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let assets = load_assets(cfg)?;
    let digest = cfg.digest()?;
    let results: Vec<Result<SeedResult, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let assets = &assets;
                let digest = &digest;
                scope.spawn(move || run_seed(cfg, assets, seed, digest))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed worker panicked"))
            .collect()
    });
    let results: Result<Vec<SeedResult>, HarnessError> = results.into_iter().collect();
    Ok(ExperimentReport {
        controller: cfg.controller,
        digest,
        results: results?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// One row per seed:
/// `controller,seed,config_digest,no_mal_network,no_mal_intersection,
///  no_mal_accidents,mal_network,mal_intersection,mal_accidents,
///  rr_network,rr_intersection` (empty reduction fields when undefined).
pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "controller,seed,config_digest,no_mal_network,no_mal_intersection,no_mal_accidents,\
         mal_network,mal_intersection,mal_accidents,rr_network,rr_intersection\n",
    );
    for r in &report.results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            report.controller.name(),
            r.seed,
            report.digest,
            r.no_mal.network_throughput,
            r.no_mal.intersection_throughput,
            r.no_mal.accidents,
            r.mal.network_throughput,
            r.mal.intersection_throughput,
            r.mal.accidents,
            fmt_opt(r.rr_network),
            fmt_opt(r.rr_intersection),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub controller: String,
    pub seed: u64,
    pub digest: String,
    pub no_mal_network: f64,
    pub no_mal_intersection: f64,
    pub no_mal_accidents: u64,
    pub mal_network: f64,
    pub mal_intersection: f64,
    pub mal_accidents: u64,
    pub rr_network: Option<f64>,
    pub rr_intersection: Option<f64>,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut rows = Vec::new();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::BadMetrics("empty file".into()))?;
    if !header.starts_with("controller,seed,config_digest") {
        return Err(HarnessError::BadMetrics(format!(
            "unexpected header `{header}`"
        )));
    }
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(HarnessError::BadMetrics(format!(
                "expected 11 fields, got {} in `{line}`",
                f.len()
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| HarnessError::BadMetrics(format!("bad number `{s}`")))
        };
        let opt = |s: &str| -> Result<Option<f64>, HarnessError> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        rows.push(MetricsRow {
            controller: f[0].to_string(),
            seed: f[1]
                .parse()
                .map_err(|_| HarnessError::BadMetrics(format!("bad seed `{}`", f[1])))?,
            digest: f[2].to_string(),
            no_mal_network: num(f[3])?,
            no_mal_intersection: num(f[4])?,
            no_mal_accidents: num(f[5])? as u64,
            mal_network: num(f[6])?,
            mal_intersection: num(f[7])?,
            mal_accidents: num(f[8])? as u64,
            rr_network: opt(f[9])?,
            rr_intersection: opt(f[10])?,
        });
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Merges metrics rows from several runs. Rows must share one config
/// digest unless `allow_mixed`; mixed digests are otherwise rejected.
pub fn summarize_metrics(rows: &[MetricsRow], allow_mixed: bool) -> Result<String, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::BadMetrics("no rows to summarize".into()));
    }
    let mut digests: Vec<&str> = rows.iter().map(|r| r.digest.as_str()).collect();
    digests.sort_unstable();
    digests.dedup();
    if digests.len() > 1 && !allow_mixed {
        return Err(HarnessError::DigestMismatch(digests.join(", ")));
    }
    let mut controllers: Vec<&str> = rows.iter().map(|r| r.controller.as_str()).collect();
    controllers.sort_unstable();
    controllers.dedup();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>5} {:>14} {:>14} {:>12} {:>12} {:>8}",
        "controller", "runs", "no_mal_int", "mal_int", "rr_int%", "rr_net%", "acc"
    );
    for c in controllers {
        let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.controller == c).collect();
        let no_mal: Vec<f64> = group.iter().map(|r| r.no_mal_intersection).collect();
        let mal: Vec<f64> = group.iter().map(|r| r.mal_intersection).collect();
        let rr_int: Vec<f64> = group.iter().filter_map(|r| r.rr_intersection).collect();
        let rr_net: Vec<f64> = group.iter().filter_map(|r| r.rr_network).collect();
        let acc: f64 =
            group.iter().map(|r| r.mal_accidents as f64).sum::<f64>() / group.len() as f64;
        let fmt_pair = |v: &[f64]| {
            if v.is_empty() {
                "-".to_string()
            } else {
                let (m, s) = mean_std(v);
                format!("{m:.1}±{s:.1}")
            }
        };
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>14} {:>14} {:>12} {:>12} {:>8.1}",
            c,
            group.len(),
            fmt_pair(&no_mal),
            fmt_pair(&mal),
            fmt_pair(&rr_int),
            fmt_pair(&rr_net),
            acc
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    DiffusionSteps,
    MalfunctionCount,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "k" => Ok(Self::DiffusionSteps),
            "malfunction-count" => Ok(Self::MalfunctionCount),
            other => Err(HarnessError::Config(format!(
                "unknown sweep axis `{other}` (expected k|malfunction-count)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: u64,
    pub mean_rr_intersection: Option<f64>,
    pub std_rr_intersection: Option<f64>,
    pub mean_rr_network: Option<f64>,
    pub std_rr_network: Option<f64>,
    pub runs: usize,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(value: u64, error: String) -> Self {
        Self {
            value,
            mean_rr_intersection: None,
            std_rr_intersection: None,
            mean_rr_network: None,
            std_rr_network: None,
            runs: 0,
            error: Some(error),
        }
    }
}

/// Nodes chosen for growing malfunction sets: highest degree first
/// (interior before boundary), then ascending id.
pub fn malfunction_order(net: &RoadNetwork) -> Vec<usize> {
    let mut order: Vec<usize> = (0..net.node_count()).collect();
    order.sort_by_key(|&v| (std::cmp::Reverse(net.neighbors(v).len()), v));
    order
}

/// Runs the experiment once per axis value (each run averages over the
/// configured seeds) and emits plot-ready rows. Per-value errors are
/// recorded and the sweep continues.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[u64],
) -> Result<Vec<SweepRow>, HarnessError> {
    let net = RoadNetwork::load(&cfg.net_path)?;
    let order = malfunction_order(&net);
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut run_cfg = cfg.clone();
        match axis {
            SweepAxis::DiffusionSteps => {
                if value < 1 {
                    rows.push(SweepRow::failed(value, "diffusion steps must be >= 1".into()));
                    continue;
                }
                run_cfg.diffusion_k = value as usize;
            }
            SweepAxis::MalfunctionCount => {
                if value as usize > order.len() {
                    rows.push(SweepRow::failed(
                        value,
                        format!("cannot blackout {value} of {} intersections", order.len()),
                    ));
                    continue;
                }
                run_cfg.malfunction = order[..value as usize].to_vec();
            }
        }
        match run_experiment(&run_cfg) {
            Ok(report) => {
                let rr_int: Vec<f64> = report
                    .results
                    .iter()
                    .filter_map(|r| r.rr_intersection)
                    .collect();
                let rr_net: Vec<f64> = report
                    .results
                    .iter()
                    .filter_map(|r| r.rr_network)
                    .collect();
                let pack = |v: &[f64]| {
                    if v.is_empty() {
                        (None, None)
                    } else {
                        let (m, s) = mean_std(v);
                        (Some(m), Some(s))
                    }
                };
                let (mi, si) = pack(&rr_int);
                let (mn, sn) = pack(&rr_net);
                rows.push(SweepRow {
                    value,
                    mean_rr_intersection: mi,
                    std_rr_intersection: si,
                    mean_rr_network: mn,
                    std_rr_network: sn,
                    runs: report.results.len(),
                    error: None,
                });
            }
            Err(e) => rows.push(SweepRow::failed(value, e.to_string())),
        }
    }
    Ok(rows)
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let axis_name = match axis {
        SweepAxis::DiffusionSteps => "k",
        SweepAxis::MalfunctionCount => "malfunction_count",
    };
    let mut out = format!(
        "{axis_name},mean_rr_intersection,std_rr_intersection,mean_rr_network,std_rr_network,runs,error\n"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.value,
            fmt_opt(r.mean_rr_intersection),
            fmt_opt(r.std_rr_intersection),
            fmt_opt(r.mean_rr_network),
            fmt_opt(r.std_rr_network),
            r.runs,
            r.error.as_deref().unwrap_or_default(),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRow {
    pub hop: usize,
    pub mean_influence: f64,
    pub nodes: usize,
}

/// Mean diffusion influence from a source intersection to every hop ring.
/// The source is the lowest malfunctioning id, or node 0 when none is set.
pub fn influence_report(
    net: &RoadNetwork,
    malfunction: &[usize],
    k: usize,
    alpha: f64,
    sigma: Option<f64>,
) -> Result<Vec<InfluenceRow>, HarnessError> {
    let sigma = sigma.unwrap_or_else(|| default_sigma(net));
    let transition = transition_matrix(&build_edge_weights(net, sigma)?)?;
    let dist = stationary_distribution(&transition, alpha, k)?;
    let source = malfunction.iter().copied().min().unwrap_or(0);
    let hops = net.hop_distances(source);
    let max_hop = hops
        .iter()
        .copied()
        .filter(|&h| h != usize::MAX)
        .max()
        .unwrap_or(0);
    let mut rows = Vec::new();
    for hop in 1..=max_hop {
        let targets: Vec<usize> = (0..net.node_count()).filter(|&v| hops[v] == hop).collect();
        if targets.is_empty() {
            continue;
        }
        let mean =
            targets.iter().map(|&v| dist[(source, v)]).sum::<f64>() / targets.len() as f64;
        rows.push(InfluenceRow {
            hop,
            mean_influence: mean,
            nodes: targets.len(),
        });
    }
    Ok(rows)
}

pub fn influence_csv(rows: &[InfluenceRow]) -> String {
    let mut out = String::from("hop,mean_influence,nodes\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.hop, r.mean_influence, r.nodes);
    }
    out
}

/// Atomic file write: temp file in the same directory, then rename.
pub fn write_atomic(path: impl AsRef<Path>, contents: &str) -> std::io::Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("part");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

/// Writes metrics, curves and accident logs for a finished experiment;
/// returns the paths written.
pub fn write_report(
    cfg: &ExperimentConfig,
    report: &ExperimentReport,
) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    let dir = &cfg.out_dir;
    let metrics_path = dir.join("metrics.csv");
    write_atomic(&metrics_path, &metrics_csv(report))?;
    written.push(metrics_path);
    for r in &report.results {
        if !r.curve.is_empty() {
            let p = dir.join(format!("curve_seed{}.csv", r.seed));
            write_atomic(&p, &curve_to_csv(&r.curve))?;
            written.push(p);
        }
        let p = dir.join(format!("accidents_no_mal_seed{}.csv", r.seed));
        write_atomic(&p, &r.accidents_no_mal_csv)?;
        written.push(p);
        let p = dir.join(format!("accidents_mal_seed{}.csv", r.seed));
        write_atomic(&p, &r.accidents_mal_csv)?;
        written.push(p);
        if let Some(ckpt) = &r.checkpoint {
            let p = checkpoint_path(cfg, r.seed);
            write_atomic(&p, ckpt)?;
            written.push(p);
        }
    }
    Ok(written)
}
