//! Multi-agent deep-Q training with shared parameters.
//!
//! Every intersection is an agent; by default all agents share one
//! Q-network and one set of diffusion filters. Each decision step builds
//! the local feature matrix from the observations, aggregates it through
//! the masked diffusion convolution, selects epsilon-greedy actions,
//! steps the simulator, reshapes rewards through the reward diffusion and
//! appends one transition per well-functioning agent. At episode end the
//! buffer is replayed in shuffled per-sample passes; gradients flow
//! through the network into the diffusion filters, so stored transitions
//! carry the theta-independent basis rows from which the aggregated state
//! is rebuilt under the current filters.

mod checkpoint;

pub use checkpoint::{agent_from_string, checkpoint_to_string, load_checkpoint, save_checkpoint};

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::{
    aggregate_reward, final_reward, DiffusionError, DiffusionFilters, DiffusionOperator,
};
use crate::neural::{mse_loss, rmsprop_step, NeuralError, QNetwork, RmspropState};
use crate::simulator::{
    IntersectionObservation, Phase, SimError, SimulationState, LANES, PHASE_COUNT,
};

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("bad training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which features feed the Q-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// 8-dim one-hot phase plus 12 normalized lane counts.
    Full,
    /// The literal 12-neuron input: lane counts only.
    LanesOnly,
}

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            FeatureMode::Full => PHASE_COUNT + LANES,
            FeatureMode::LanesOnly => LANES,
        }
    }
}

/// How the state half of the pipeline treats the diffusion convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateAggregation {
    /// Masked diffusion convolution with trainable per-step filters.
    Trainable,
    /// Fixed unit filters; no filter training.
    FixedUnit,
    /// No aggregation at all (independent agents).
    Off,
}

/// State/reward pipeline switches; the ablations and the independent-DQN
/// baseline are all configurations of this pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineMode {
    pub state_agg: StateAggregation,
    pub reward_agg: bool,
}

impl PipelineMode {
    pub fn mallight() -> Self {
        Self {
            state_agg: StateAggregation::Trainable,
            reward_agg: true,
        }
    }

    pub fn idqn() -> Self {
        Self {
            state_agg: StateAggregation::Off,
            reward_agg: false,
        }
    }
}

/// One replay record. `state`/`next_state` hold the aggregated rows as
/// collected; `local` and the theta-independent `basis` rows allow the
/// aggregation to be rebuilt under the current filters during updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub agent: usize,
    pub state: Vec<f64>,
    pub action: u8,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub local: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub next_local: Vec<f64>,
    pub next_basis: Vec<Vec<f64>>,
}

/// FIFO ring of transitions.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    ring: VecDeque<Transition>,
    capacity: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            ring: VecDeque::with_capacity(capacity),
            capacity,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(t);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.ring[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.ring.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Full passes over the buffer at each episode end.
    pub updates_per_episode: usize,
    /// Samples whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Episodes over which epsilon decays linearly from start to end.
    pub eps_decay_episodes: usize,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub episode_seconds: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            updates_per_episode: 10,
            batch_size: 32,
            gamma: 0.95,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_episodes: 100,
            learning_rate: 0.001,
            buffer_capacity: 5000,
            episode_seconds: 3600,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(RlError::Config(format!(
                "gamma must lie in [0,1), got {}",
                self.gamma
            )));
        }
        for eps in [self.eps_start, self.eps_end] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(RlError::Config(format!(
                    "epsilon must lie in [0,1], got {eps}"
                )));
            }
        }
        if self.buffer_capacity == 0 {
            return Err(RlError::Config("buffer capacity must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(RlError::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Linear schedule from `eps_start` to `eps_end` over
    /// `eps_decay_episodes`, then flat.
    pub fn epsilon(&self, episode: usize) -> f64 {
        if episode >= self.eps_decay_episodes || self.eps_decay_episodes == 0 {
            return self.eps_end;
        }
        let frac = episode as f64 / self.eps_decay_episodes as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// The trainable bundle all agents share: Q-network(s), diffusion filters
/// and their optimizer states.
#[derive(Debug)]
pub struct Agent {
    pub(crate) nets: Vec<QNetwork>,
    pub(crate) opts: Vec<RmspropState>,
    pub(crate) filters: DiffusionFilters,
    pub(crate) filter_opt: RmspropState,
    pub(crate) shared: bool,
    pub(crate) mode: PipelineMode,
    pub(crate) feature_mode: FeatureMode,
    pub(crate) n_agents: usize,
    pub(crate) steps: usize,
    pub(crate) learning_rate: f64,
    pub(crate) episodes_trained: usize,
    pub(crate) rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(
        n_agents: usize,
        steps: usize,
        mode: PipelineMode,
        feature_mode: FeatureMode,
        shared: bool,
        learning_rate: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = if shared { 1 } else { n_agents };
        let nets: Vec<QNetwork> = (0..count)
            .map(|_| QNetwork::q_network(feature_mode.dim(), &mut rng))
            .collect();
        let opts = nets
            .iter()
            .map(|n| RmspropState::new(n.param_count(), learning_rate))
            .collect();
        let filters = match mode.state_agg {
            StateAggregation::FixedUnit => DiffusionFilters::unit(steps),
            _ => DiffusionFilters::uniform(steps),
        };
        Self {
            nets,
            opts,
            filters,
            filter_opt: RmspropState::new(steps, learning_rate),
            shared,
            mode,
            feature_mode,
            n_agents,
            steps,
            learning_rate,
            episodes_trained: 0,
            rng,
        }
    }

    fn net_index(&self, agent: usize) -> usize {
        if self.shared {
            0
        } else {
            agent
        }
    }

    pub fn net(&self, agent: usize) -> &QNetwork {
        &self.nets[self.net_index(agent)]
    }

    pub fn filters(&self) -> &DiffusionFilters {
        &self.filters
    }

    pub fn mode(&self) -> PipelineMode {
        self.mode
    }

    pub fn feature_mode(&self) -> FeatureMode {
        self.feature_mode
    }

    pub fn episodes_trained(&self) -> usize {
        self.episodes_trained
    }

    pub fn agent_count(&self) -> usize {
        self.n_agents
    }

    fn uses_aggregation(&self) -> bool {
        !matches!(self.mode.state_agg, StateAggregation::Off)
    }

    fn filters_trainable(&self) -> bool {
        matches!(self.mode.state_agg, StateAggregation::Trainable)
    }
}

/// Local feature row: one-hot phase (zero for a blacked-out signal)
/// followed by lane counts normalized by lane capacity.
pub fn feature_row(
    obs: &IntersectionObservation,
    caps: &[u32; LANES],
    mode: FeatureMode,
) -> Vec<f64> {
    let mut row = Vec::with_capacity(mode.dim());
    if mode == FeatureMode::Full {
        let mut one_hot = [0.0; PHASE_COUNT];
        if let Some(i) = obs.phase.index() {
            one_hot[i as usize] = 1.0;
        }
        row.extend_from_slice(&one_hot);
    }
    for lane in 0..LANES {
        let cap = caps[lane].max(1) as f64;
        row.push(obs.incoming[lane] as f64 / cap);
    }
    row
}

/// Per-step feature bundle: the raw local matrix and, when aggregation is
/// on, the theta-independent basis matrices `(T^k masked) S` for k=1..K.
pub struct StepFeatures {
    pub local: Array2<f64>,
    pub basis: Option<Vec<Array2<f64>>>,
}

impl StepFeatures {
    pub fn build(
        observations: &[IntersectionObservation],
        caps: &[[u32; LANES]],
        agent: &Agent,
        op: Option<&DiffusionOperator>,
    ) -> Result<StepFeatures, RlError> {
        let n = observations.len();
        let p = agent.feature_mode.dim();
        let mut local = Array2::zeros((n, p));
        for (i, obs) in observations.iter().enumerate() {
            let row = feature_row(obs, &caps[i], agent.feature_mode);
            for (j, v) in row.into_iter().enumerate() {
                local[(i, j)] = v;
            }
        }
        let basis = match (agent.uses_aggregation(), op) {
            (true, Some(op)) => {
                let mut per_step = Vec::with_capacity(op.steps());
                for k in 1..=op.steps() {
                    per_step.push(op.masked_power(k).dot(&local));
                }
                Some(per_step)
            }
            _ => None,
        };
        Ok(StepFeatures { local, basis })
    }

    /// Aggregated state row for one agent under the given filters:
    /// `S''_i = S_i + sum_k theta_k basis_k[i]`.
    pub fn aggregated_row(&self, i: usize, filters: &DiffusionFilters) -> Vec<f64> {
        let mut row: Vec<f64> = self.local.row(i).to_vec();
        if let Some(basis) = &self.basis {
            for (k, b) in basis.iter().enumerate() {
                let theta = filters.values()[k];
                for (out, v) in row.iter_mut().zip(b.row(i)) {
                    *out += theta * v;
                }
            }
        }
        row
    }

    fn basis_rows(&self, i: usize) -> Vec<Vec<f64>> {
        match &self.basis {
            Some(basis) => basis.iter().map(|b| b.row(i).to_vec()).collect(),
            None => Vec::new(),
        }
    }
}

fn combine(local: &[f64], basis: &[Vec<f64>], filters: &DiffusionFilters) -> Vec<f64> {
    let mut out = local.to_vec();
    for (k, row) in basis.iter().enumerate() {
        let theta = filters.values()[k];
        for (o, b) in out.iter_mut().zip(row) {
            *o += theta * b;
        }
    }
    out
}

/// Epsilon-greedy phase choice; a malfunctioning signal is always off.
pub fn select_action(
    net: &QNetwork,
    state: &[f64],
    epsilon: f64,
    malfunctioning: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Phase, RlError> {
    if malfunctioning {
        return Ok(Phase::MalfunctionOff);
    }
    let draw: f64 = rng.random();
    if draw < epsilon {
        return Ok(Phase::Index(rng.random_range(0..PHASE_COUNT as u8)));
    }
    let q = net.forward(&Array1::from(state.to_vec()))?;
    let mut best = 0usize;
    for i in 1..q.len() {
        if q[i] > q[best] {
            best = i;
        }
    }
    Ok(Phase::Index(best as u8))
}

/// `r` when terminal, else `r + gamma * max_a Q(next, a)`.
pub fn bellman_target(
    reward: f64,
    next_state: &[f64],
    terminal: bool,
    net: &QNetwork,
    gamma: f64,
) -> Result<f64, RlError> {
    if terminal {
        return Ok(reward);
    }
    let q = net.forward(&Array1::from(next_state.to_vec()))?;
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(reward + gamma * max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub episode: usize,
    pub mean_reward: f64,
    pub throughput: u64,
    pub epsilon: f64,
    pub loss: f64,
    pub accidents: u64,
}

/// Learning-curve CSV (`episode,mean_reward,throughput,epsilon,loss`).
pub fn curve_to_csv(curve: &[EpisodeStats]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("episode,mean_reward,throughput,epsilon,loss\n");
    for s in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.episode, s.mean_reward, s.throughput, s.epsilon, s.loss
        );
    }
    out
}

/// Rolls one episode and performs the end-of-episode update passes.
/// The simulator must be freshly initialized; its malfunction set defines
/// which agents are forced off (those contribute no transitions).
pub fn run_training_episode(
    sim: &mut SimulationState,
    agent: &mut Agent,
    op: Option<&DiffusionOperator>,
    buffer: &mut ReplayBuffer,
    cfg: &TrainConfig,
    epsilon: f64,
) -> Result<EpisodeStats, RlError> {
    let n = sim.node_count();
    let decisions = (cfg.episode_seconds / sim.config().decision_interval_s) as usize;
    let caps: Vec<[u32; LANES]> = (0..n).map(|v| sim.incoming_lane_caps(v)).collect();

    let mut feats = StepFeatures::build(&sim.observe(), &caps, agent, op)?;
    let mut reward_sum = 0.0;
    let mut reward_count = 0u64;
    let mut throughput = 0u64;
    let mut accidents = 0u64;

    for step in 0..decisions {
        let mut actions = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let row = feats.aggregated_row(i, &agent.filters);
            let ni = agent.net_index(i);
            let a = select_action(
                &agent.nets[ni],
                &row,
                epsilon,
                sim.is_malfunctioning(i),
                &mut agent.rng,
            )?;
            actions.push(a);
            rows.push(row);
        }
        let out = sim.step(&actions)?;
        throughput += out.stats.completed_in_step;
        accidents += out.stats.accidents_in_step;

        let local_rewards = Array1::from(out.rewards.clone());
        let rewards = match (agent.mode.reward_agg, op) {
            (true, Some(op)) => {
                let aggregated = aggregate_reward(&local_rewards, op)?;
                final_reward(&local_rewards, &aggregated)?
            }
            _ => local_rewards.clone(),
        };

        let next_feats = StepFeatures::build(&out.observations, &caps, agent, op)?;
        let terminal = step + 1 == decisions;
        for i in 0..n {
            if sim.is_malfunctioning(i) {
                continue;
            }
            buffer.push(Transition {
                agent: i,
                state: rows[i].clone(),
                action: actions[i].index().expect("functioning agents pick a phase"),
                reward: rewards[i],
                next_state: next_feats.aggregated_row(i, &agent.filters),
                terminal,
                local: feats.local.row(i).to_vec(),
                basis: feats.basis_rows(i),
                next_local: next_feats.local.row(i).to_vec(),
                next_basis: next_feats.basis_rows(i),
            });
            reward_sum += rewards[i];
            reward_count += 1;
        }
        feats = next_feats;
    }

    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;
    for _ in 0..cfg.updates_per_episode {
        // Each pass regresses toward targets frozen at the pass start;
        // bootstrapping on the live network destabilizes the action
        // ranking badly at this scale.
        let frozen = FrozenTargets {
            nets: agent.nets.clone(),
            filters: agent.filters.clone(),
        };
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        order.shuffle(&mut agent.rng);
        for chunk in order.chunks(cfg.batch_size) {
            loss_sum += update_batch(agent, &frozen, buffer, chunk, cfg)?;
            loss_count += chunk.len() as u64;
        }
    }

    Ok(EpisodeStats {
        episode: agent.episodes_trained,
        mean_reward: if reward_count > 0 {
            reward_sum / reward_count as f64
        } else {
            0.0
        },
        throughput,
        epsilon,
        loss: if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            0.0
        },
        accidents,
    })
}

/// Bellman-target snapshot: the networks and filters as they were when an
/// update pass began.
struct FrozenTargets {
    nets: Vec<QNetwork>,
    filters: DiffusionFilters,
}

/// Minibatch update: rebuild the aggregated states under the current
/// filters, regress `Q(s'', a)` toward Bellman targets evaluated on the
/// pass-frozen snapshot (semi-gradient), average the gradients over the
/// batch, and step both the network parameters and, when trainable, the
/// filters. Returns the summed loss. With unshared networks each agent's
/// sub-batch steps its own optimizer.
fn update_batch(
    agent: &mut Agent,
    frozen: &FrozenTargets,
    buffer: &ReplayBuffer,
    chunk: &[usize],
    cfg: &TrainConfig,
) -> Result<f64, RlError> {
    let use_any_basis = agent.uses_aggregation();
    let mut loss_sum = 0.0;
    let mut net_grad_sums: Vec<Option<Vec<f64>>> = vec![None; agent.nets.len()];
    let mut net_counts = vec![0usize; agent.nets.len()];
    let mut theta_grad_sum = vec![0.0; agent.steps];
    let mut theta_count = 0usize;

    for &idx in chunk {
        let tr = buffer.get(idx);
        let use_basis = use_any_basis && !tr.basis.is_empty();
        let state = if use_basis {
            combine(&tr.local, &tr.basis, &agent.filters)
        } else {
            tr.local.clone()
        };
        let next_state = if use_basis {
            combine(&tr.next_local, &tr.next_basis, &frozen.filters)
        } else {
            tr.next_local.clone()
        };
        let ni = agent.net_index(tr.agent);
        let target =
            bellman_target(tr.reward, &next_state, tr.terminal, &frozen.nets[ni], cfg.gamma)?;
        let state = Array1::from(state);
        let q = agent.nets[ni].forward(&state)?;
        let (loss, dq) = mse_loss(q[tr.action as usize], target);
        loss_sum += loss;
        let mut grad_out = Array1::zeros(agent.nets[ni].output_size());
        grad_out[tr.action as usize] = dq;
        let (grads, input_grad) = agent.nets[ni].backward(&state, &grad_out)?;
        let flat = agent.nets[ni].flatten(&grads);
        match &mut net_grad_sums[ni] {
            Some(sum) => {
                for (s, g) in sum.iter_mut().zip(&flat) {
                    *s += g;
                }
            }
            None => net_grad_sums[ni] = Some(flat),
        }
        net_counts[ni] += 1;
        if agent.filters_trainable() && use_basis {
            for (k, row) in tr.basis.iter().enumerate() {
                theta_grad_sum[k] += input_grad.iter().zip(row).map(|(g, b)| g * b).sum::<f64>();
            }
            theta_count += 1;
        }
    }

    for ni in 0..agent.nets.len() {
        if let Some(sum) = &mut net_grad_sums[ni] {
            let scale = 1.0 / net_counts[ni] as f64;
            for g in sum.iter_mut() {
                *g *= scale;
            }
            agent.nets[ni].apply_flat_gradients(sum, &mut agent.opts[ni])?;
        }
    }
    if theta_count > 0 {
        for g in theta_grad_sum.iter_mut() {
            *g /= theta_count as f64;
        }
        rmsprop_step(agent.filters.values_mut(), &theta_grad_sum, &mut agent.filter_opt)?;
    }
    Ok(loss_sum)
}

/// Agent plus everything the episode loop accumulates.
#[derive(Debug)]
pub struct Trainer {
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub cfg: TrainConfig,
    pub curve: Vec<EpisodeStats>,
}

impl Trainer {
    pub fn new(agent: Agent, cfg: TrainConfig) -> Result<Self, RlError> {
        cfg.validate()?;
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            agent,
            cfg,
            curve: Vec::new(),
        })
    }
}

/// Runs episodes `agent.episodes_trained..cfg.episodes`, building a fresh
/// environment for each via `make_env`. Resuming a loaded checkpoint just
/// continues the range.
pub fn train<F>(
    trainer: &mut Trainer,
    op: Option<&DiffusionOperator>,
    mut make_env: F,
) -> Result<(), RlError>
where
    F: FnMut(usize) -> Result<SimulationState, SimError>,
{
    for episode in trainer.agent.episodes_trained..trainer.cfg.episodes {
        let epsilon = trainer.cfg.epsilon(episode);
        let mut sim = make_env(episode)?;
        let stats = run_training_episode(
            &mut sim,
            &mut trainer.agent,
            op,
            &mut trainer.buffer,
            &trainer.cfg,
            epsilon,
        )?;
        trainer.curve.push(EpisodeStats { episode, ..stats });
        trainer.agent.episodes_trained = episode + 1;
    }
    Ok(())
}

/// Greedy (epsilon = 0) actions for the current observations; used for
/// evaluation rollouts.
pub fn greedy_actions(
    agent: &mut Agent,
    op: Option<&DiffusionOperator>,
    sim: &SimulationState,
    observations: &[IntersectionObservation],
    caps: &[[u32; LANES]],
) -> Result<Vec<Phase>, RlError> {
    let feats = StepFeatures::build(observations, caps, agent, op)?;
    let mut actions = Vec::with_capacity(observations.len());
    for i in 0..observations.len() {
        let row = feats.aggregated_row(i, &agent.filters);
        let ni = agent.net_index(i);
        let a = select_action(
            &agent.nets[ni],
            &row,
            0.0,
            sim.is_malfunctioning(i),
            &mut agent.rng,
        )?;
        actions.push(a);
    }
    Ok(actions)
}
