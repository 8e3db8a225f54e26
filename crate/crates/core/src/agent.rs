//! DQN training: epsilon-greedy acting, (prioritized) replay, TD targets
//! from a periodically synchronized target network, Adam updates.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{episode_return, CostModel, Position, TradingEnv};
use crate::error::{Error, Result};
use crate::features::{Observation, StatePanel};
use crate::fmt::{num, opt};
use crate::nn::{ForwardCache, MlpSpec, NetParams, QNetwork};
use crate::replay::{Batch, ReplayBuffer, Transition};
use crate::rng::{stream_rng, SimRng};

/// Number of passes over the training data when `total_timesteps` is unset.
pub const DEFAULT_EPOCHS: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub exploration_fraction: f64,
    pub exploration_final_eps: f64,
    pub learning_starts: u64,
    pub target_network_update_freq: u64,
    pub prioritized_replay: bool,
    pub priority_alpha: f64,
    pub priority_beta0: f64,
    pub priority_eps: f64,
    /// `None` means [`DEFAULT_EPOCHS`] passes over the training sources.
    pub total_timesteps: Option<u64>,
    pub train_freq: u64,
    pub double_q: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            gamma: 0.94,
            batch_size: 128,
            buffer_size: 30_000,
            exploration_fraction: 0.25,
            exploration_final_eps: 0.02,
            learning_starts: 100,
            target_network_update_freq: 500,
            prioritized_replay: true,
            priority_alpha: 0.6,
            priority_beta0: 0.4,
            priority_eps: 1e-6,
            total_timesteps: None,
            train_freq: 1,
            double_q: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_size {
            return bad("batch_size must be in 1..=buffer_size");
        }
        if !(self.exploration_fraction > 0.0 && self.exploration_fraction <= 1.0) {
            return bad("exploration_fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.exploration_final_eps) {
            return bad("exploration_final_eps must lie in [0, 1]");
        }
        if self.target_network_update_freq == 0 || self.train_freq == 0 {
            return bad("update frequencies must be positive");
        }
        if !(self.priority_alpha >= 0.0) || !(0.0..=1.0).contains(&self.priority_beta0) {
            return bad("priority_alpha must be >= 0 and priority_beta0 in [0, 1]");
        }
        if !(self.priority_eps > 0.0) {
            return bad("priority_eps must be positive");
        }
        Ok(())
    }

    /// Linear decay from 1 to `exploration_final_eps` over the first
    /// `exploration_fraction * total` steps, then constant.
    pub fn epsilon(&self, step: u64, total: u64) -> f64 {
        let horizon = self.exploration_fraction * total as f64;
        let s = step as f64;
        if s >= horizon {
            return self.exploration_final_eps;
        }
        1.0 + (self.exploration_final_eps - 1.0) * (s / horizon)
    }

    /// Importance exponent, linear from `priority_beta0` to 1 over training.
    pub fn beta(&self, step: u64, total: u64) -> f64 {
        let frac = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
        self.priority_beta0 + (1.0 - self.priority_beta0) * frac
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

pub fn select_action<R: Rng + ?Sized>(q: &[f64], eps: f64, rng: &mut R) -> usize {
    if eps > 0.0 && rng.random::<f64>() < eps {
        rng.random_range(0..q.len())
    } else {
        argmax(q)
    }
}

pub fn td_target(reward: f64, next_q_target: &[f64], next_q_online: &[f64], done: bool, gamma: f64, double_q: bool) -> f64 {
    if done {
        return reward;
    }
    let bootstrap = if double_q {
        next_q_target[argmax(next_q_online)]
    } else {
        next_q_target.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    };
    reward + gamma * bootstrap
}

/// Greedy action of a network, as a position.
pub fn act_greedy(params: &NetParams, observation: &[f64]) -> Result<Position> {
    Ok(Position::from_index(argmax(&params.q_values(observation)?)))
}

/// Loss, gradients, and TD errors of one minibatch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub td_errors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainStepReport {
    pub loss: f64,
    pub indices: Vec<usize>,
    pub td_errors: Vec<f64>,
}

/// Online/target networks, replay memory, and the exploration stream.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    config: TrainConfig,
    pub network: QNetwork,
    pub buffer: ReplayBuffer,
    rng: SimRng,
    replay_rng: SimRng,
    cache: ForwardCache,
    next_cache: ForwardCache,
    step: u64,
    total: u64,
}

impl DqnAgent {
    pub fn new(config: TrainConfig, spec: MlpSpec, total_timesteps: u64) -> Result<Self> {
        let network = QNetwork::new(spec, &mut stream_rng(config.seed, 0))?;
        Self::with_network(config, network, total_timesteps)
    }

    pub fn with_network(config: TrainConfig, network: QNetwork, total_timesteps: u64) -> Result<Self> {
        config.validate()?;
        let buffer = ReplayBuffer::new(config.buffer_size, config.prioritized_replay, config.priority_alpha)?;
        let cache = network.online.new_cache();
        Ok(DqnAgent {
            rng: stream_rng(config.seed, 1),
            replay_rng: stream_rng(config.seed, 2),
            next_cache: cache.clone(),
            cache,
            config,
            network,
            buffer,
            step: 0,
            total: total_timesteps,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Environment steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon(self.step, self.total)
    }

    /// Exploratory action index under the current schedule.
    pub fn act(&mut self, observation: &[f64]) -> Result<usize> {
        let eps = self.epsilon();
        let q = self.network.online.forward_q(observation, &mut self.cache)?;
        Ok(select_action(q, eps, &mut self.rng))
    }

    /// Store a transition, advance the step counter, and train / sync the
    /// target network when due. Returns the loss when a train step ran.
    pub fn observe(&mut self, transition: Transition) -> Result<Option<f64>> {
        transition.validate(self.network.online.spec().action_head_out)?;
        self.buffer.push(transition);
        self.step += 1;
        let mut loss = None;
        if self.step >= self.config.learning_starts && self.step.is_multiple_of(self.config.train_freq) {
            loss = self.train_step()?.map(|r| r.loss);
        }
        if self.step.is_multiple_of(self.config.target_network_update_freq) {
            self.network.hard_update_target();
        }
        Ok(loss)
    }

    /// Sample, compute the weighted squared TD loss, apply Adam, refresh
    /// priorities. `None` while the buffer holds less than one batch.
    pub fn train_step(&mut self) -> Result<Option<TrainStepReport>> {
        let beta = self.config.beta(self.step, self.total);
        let Some(batch) = self.buffer.sample(self.config.batch_size, beta, &mut self.replay_rng) else {
            return Ok(None);
        };
        let g = self.batch_gradient(&batch)?;
        self.network.apply_gradients(&g.grads, self.config.learning_rate)?;
        let priorities: Vec<f64> = g.td_errors.iter().map(|d| d.abs() + self.config.priority_eps).collect();
        self.buffer.update_priorities(&batch.indices, &priorities);
        Ok(Some(TrainStepReport { loss: g.loss, indices: batch.indices, td_errors: g.td_errors }))
    }

    /// Gradient of `mean(w * delta^2)` through the taken actions only.
    pub fn batch_gradient(&mut self, batch: &Batch) -> Result<BatchGradient> {
        let size = batch.indices.len();
        let b = size as f64;
        let dim = self.network.online.spec().input_dim;
        let n_actions = self.network.online.spec().action_head_out;
        let mut states = Vec::with_capacity(size * dim);
        let mut next_states = Vec::with_capacity(size * dim);
        for &i in &batch.indices {
            let t = self.buffer.get(i);
            states.extend_from_slice(&t.state);
            next_states.extend_from_slice(&t.next_state);
        }
        let net = &self.network;
        let next_target = net.target.forward_batch(&next_states, size, &mut self.next_cache)?.to_vec();
        let next_online = if self.config.double_q {
            net.online.forward_batch(&next_states, size, &mut self.next_cache)?.to_vec()
        } else {
            Vec::new()
        };
        let q = net.online.forward_batch(&states, size, &mut self.cache)?;
        let mut dq = vec![0.0; size * n_actions];
        let mut td_errors = Vec::with_capacity(size);
        let mut loss = 0.0;
        for (r, (&i, &w)) in batch.indices.iter().zip(&batch.weights).enumerate() {
            let t = self.buffer.get(i);
            let row = r * n_actions..(r + 1) * n_actions;
            let online_row = if self.config.double_q { &next_online[row.clone()] } else { &[][..] };
            let y = td_target(t.reward, &next_target[row.clone()], online_row, t.done, self.config.gamma, self.config.double_q);
            let delta = q[row.start + t.action] - y;
            loss += w * delta * delta / b;
            dq[row.start + t.action] = 2.0 * w * delta / b;
            td_errors.push(delta);
        }
        let mut grads = vec![0.0; net.online.len()];
        net.online.backward_into(&mut self.cache, &dq, &mut grads);
        Ok(BatchGradient { loss, grads, td_errors })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub eps: f64,
    pub loss: Option<f64>,
    /// Compounded net return of an episode, on the step that ends it.
    pub episode_return: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn episode_returns(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.episode_return).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,eps,loss,episode_return")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.step, num(r.eps), opt(r.loss), opt(r.episode_return))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub network: QNetwork,
    pub log: TrainingLog,
    pub total_timesteps: u64,
}

/// Steps in one pass over all sources (each episode runs to its last date).
pub fn epoch_steps(sources: &[StatePanel]) -> u64 {
    sources.iter().map(|p| p.len().saturating_sub(1) as u64).sum()
}

/// Step-at-a-time training driver; episodes cycle through the sources in order.
pub struct Trainer<'a> {
    sources: &'a [StatePanel],
    costs: CostModel,
    agent: DqnAgent,
    env: TradingEnv<'a>,
    source: usize,
    obs: Observation,
    rewards: Vec<f64>,
    log: TrainingLog,
}

impl<'a> Trainer<'a> {
    pub fn new(sources: &'a [StatePanel], costs: CostModel, config: &TrainConfig, init: Option<QNetwork>) -> Result<Self> {
        config.validate()?;
        costs.validate()?;
        let usable = sources.iter().any(|p| p.len() >= 2);
        if !usable {
            return Err(Error::Config("no training source with at least two dates".into()));
        }
        let dim = sources.iter().find(|p| !p.is_empty()).map(StatePanel::state_dim).unwrap_or(0);
        if let Some(p) = sources.iter().find(|p| !p.is_empty() && p.state_dim() != dim) {
            return Err(Error::Shape { expected: dim, got: p.state_dim() });
        }
        let total = config.total_timesteps.unwrap_or(DEFAULT_EPOCHS * epoch_steps(sources));
        let agent = match init {
            Some(net) => {
                let got = net.online.spec().input_dim;
                if got != dim {
                    return Err(Error::Shape { expected: dim, got });
                }
                DqnAgent::with_network(config.clone(), net, total)?
            }
            None => DqnAgent::new(config.clone(), MlpSpec::new(dim), total)?,
        };
        let source = sources.iter().position(|p| p.len() >= 2).unwrap();
        let mut env = TradingEnv::new(&sources[source], costs);
        let obs = env.reset(0)?;
        Ok(Trainer { sources, costs, agent, env, source, obs, rewards: Vec::new(), log: TrainingLog::default() })
    }

    pub fn agent(&self) -> &DqnAgent {
        &self.agent
    }

    pub fn total_timesteps(&self) -> u64 {
        self.agent.total
    }

    pub fn is_finished(&self) -> bool {
        self.agent.step >= self.agent.total
    }

    /// One environment step; `false` once the step budget is spent.
    pub fn advance(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        let eps = self.agent.epsilon();
        let action = self.agent.act(&self.obs)?;
        let result = self.env.step(Position::from_index(action))?;
        self.rewards.push(result.reward);
        let transition = Transition {
            state: std::mem::replace(&mut self.obs, result.next_state.clone()),
            action,
            reward: result.reward,
            next_state: result.next_state,
            done: result.done,
        };
        let loss = self.agent.observe(transition)?;
        let mut record = LogRecord { step: self.agent.step, eps, loss, episode_return: None };
        if result.done {
            record.episode_return = Some(episode_return(&self.rewards));
            self.rewards.clear();
            self.next_episode()?;
        }
        self.log.records.push(record);
        Ok(true)
    }

    fn next_episode(&mut self) -> Result<()> {
        loop {
            self.source = (self.source + 1) % self.sources.len();
            if self.sources[self.source].len() >= 2 {
                break;
            }
        }
        self.env = TradingEnv::new(&self.sources[self.source], self.costs);
        self.obs = self.env.reset(0)?;
        Ok(())
    }

    pub fn finish(self) -> FitOutput {
        FitOutput { total_timesteps: self.agent.total, network: self.agent.network, log: self.log }
    }
}

/// Train on `sources` for the configured number of environment steps.
pub fn fit(sources: &[StatePanel], costs: CostModel, config: &TrainConfig, init: Option<QNetwork>) -> Result<FitOutput> {
    let mut trainer = Trainer::new(sources, costs, config, init)?;
    while trainer.advance()? {}
    Ok(trainer.finish())
}
