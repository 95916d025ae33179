//! Deep Q-learning: ε-greedy rollouts into a replay buffer, then minibatch
//! regression onto Bellman targets from a periodically synced target network.

use std::collections::VecDeque;
use std::fmt::Write as _;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{PriceSeries, DATE_FORMAT};
use crate::neural_net::{AdamState, Gradients, QNetwork, DEFAULT_HIDDEN};
use crate::trading_env::{
    run_policy, Action, EnvConfig, Normalizer, Position, Rollout, TradingEnv,
};

/// Anything that maps an observation to `(Q(s, sell), Q(s, buy))`.
pub trait QFunction {
    fn q_values(&self, observation: &[f64]) -> Result<[f64; 2]>;
}

impl QFunction for QNetwork {
    fn q_values(&self, observation: &[f64]) -> Result<[f64; 2]> {
        self.forward(observation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// FIFO experience memory; pushing past capacity evicts the oldest transition.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != t.next_state.len() {
            return Err(Error::Dimension {
                expected: t.state.len(),
                found: t.next_state.len(),
            });
        }
        if !t.reward.is_finite() {
            return Err(Error::Numeric("non-finite reward".into()));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `batch` distinct transitions drawn uniformly.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.len() < batch {
            return Err(Error::Usage(format!(
                "replay buffer holds {} transitions, fewer than the batch size {batch}",
                self.items.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), batch)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_min: f64,
    /// Multiplicative, applied once per episode.
    pub epsilon_decay: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_width: usize,
    /// Gradient steps after each episode's rollout.
    pub epochs: usize,
    pub episodes: usize,
    /// Target network refresh period, in gradient steps.
    pub target_sync: usize,
    pub replay_capacity: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_min: 0.01,
            epsilon_decay: 0.995,
            learning_rate: AdamState::DEFAULT_LEARNING_RATE,
            batch_size: 32,
            hidden_width: DEFAULT_HIDDEN,
            epochs: 100,
            episodes: 30,
            target_sync: 100,
            replay_capacity: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.epsilon_min > 0.0
            && self.epsilon_min <= self.epsilon_start
            && self.epsilon_start <= 1.0)
        {
            return bad(format!(
                "need 0 < epsilon_min <= epsilon_start <= 1, got {} and {}",
                self.epsilon_min, self.epsilon_start
            ));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad(format!(
                "epsilon_decay must lie in (0, 1], got {}",
                self.epsilon_decay
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("hidden_width", self.hidden_width),
            ("epochs", self.epochs),
            ("target_sync", self.target_sync),
            ("replay_capacity", self.replay_capacity),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.replay_capacity < self.batch_size {
            return bad(format!(
                "replay_capacity {} is smaller than batch_size {}",
                self.replay_capacity, self.batch_size
            ));
        }
        Ok(())
    }
}

/// ε-greedy choice; greedy ties go to sell.
pub fn select_action<Q: QFunction + ?Sized, R: Rng>(
    net: &Q,
    observation: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<Action> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Usage(format!(
            "epsilon must lie in [0, 1], got {epsilon}"
        )));
    }
    if rng.gen::<f64>() < epsilon {
        return Action::from_index(rng.gen_range(0..2));
    }
    greedy_action(net, observation)
}

pub fn greedy_action<Q: QFunction + ?Sized>(net: &Q, observation: &[f64]) -> Result<Action> {
    let q = net.q_values(observation)?;
    Ok(if q[1] > q[0] {
        Action::Buy
    } else {
        Action::Sell
    })
}

/// `r` for terminal transitions, else `r + γ·max_a Q_target(s', a)`.
pub fn bellman_target<Q: QFunction + ?Sized>(
    transition: &Transition,
    target_net: &Q,
    gamma: f64,
) -> Result<f64> {
    if transition.done {
        return Ok(transition.reward);
    }
    let q = target_net.q_values(&transition.next_state)?;
    Ok(transition.reward + gamma * q[0].max(q[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub epsilon: f64,
    pub mean_loss: f64,
    /// Reward of the exploratory rollout.
    pub cumulative_reward: f64,
    /// Reward of the greedy policy over the same range after this episode's updates.
    pub greedy_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeLog>,
}

impl TrainingLog {
    /// `episode,epsilon,mean_loss,cumulative_reward,greedy_reward`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,epsilon,mean_loss,cumulative_reward,greedy_reward\n");
        for e in &self.episodes {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.episode, e.epsilon, e.mean_loss, e.cumulative_reward, e.greedy_reward
            );
        }
        out
    }
}

/// Mutable training state for one agent.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    pub online: QNetwork,
    pub target: QNetwork,
    adam: AdamState,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    pub epsilon: f64,
    pub grad_steps: u64,
}

impl Trainer {
    pub fn new(input_dim: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let online = QNetwork::new(input_dim, config.hidden_width, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // keep exploration draws off the initialization stream
        rng.set_stream(1);
        Ok(Self {
            target: online.copy_parameters(),
            adam: AdamState::new(&online, config.learning_rate),
            online,
            buffer: ReplayBuffer::new(config.replay_capacity),
            rng,
            epsilon: config.epsilon_start,
            grad_steps: 0,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One ε-greedy pass over the episode, storing every transition.
    pub fn rollout(&mut self, env: &TradingEnv<'_>) -> Result<f64> {
        let (mut state, mut obs) = env.reset()?;
        while !state.done {
            let action = select_action(&self.online, &obs, self.epsilon, &mut self.rng)?;
            let step = env.step(&state, action)?;
            self.buffer.push(Transition {
                state: obs,
                action,
                reward: step.reward,
                next_state: step.observation.clone(),
                done: step.done,
            })?;
            state = step.state;
            obs = step.observation;
        }
        Ok(state.cumulative_reward)
    }

    /// One Adam step on the mean squared Bellman error of a sampled batch.
    /// Returns the batch loss.
    pub fn update(&mut self) -> Result<f64> {
        let batch = self.buffer.sample(self.config.batch_size, &mut self.rng)?;
        let mut grads = Gradients::zeros_like(&self.online);
        let mut loss = 0.0;
        for t in &batch {
            let y = bellman_target(t, &self.target, self.config.gamma)?;
            let q = self.online.forward(&t.state)?[t.action.index()];
            loss += (q - y) * (q - y);
            grads.add_assign(&self.online.backward(&t.state, t.action.index(), y)?);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        self.adam.step(&mut self.online, &grads)?;
        self.grad_steps += 1;
        if self
            .grad_steps
            .is_multiple_of(self.config.target_sync as u64)
        {
            self.target = self.online.copy_parameters();
        }
        Ok(loss / n)
    }

    pub fn decay_epsilon(&mut self) {
        self.epsilon = (self.epsilon * self.config.epsilon_decay).max(self.config.epsilon_min);
    }

    /// Rollout, `epochs` updates, ε decay.
    pub fn run_episode(&mut self, env: &TradingEnv<'_>, episode: usize) -> Result<EpisodeLog> {
        let epsilon = self.epsilon;
        let cumulative_reward = self.rollout(env)?;
        if self.buffer.len() < self.config.batch_size {
            return Err(Error::Config(format!(
                "episode produced {} transitions, fewer than the batch size {}; use a longer training range",
                self.buffer.len(),
                self.config.batch_size
            )));
        }
        let mut total = 0.0;
        for _ in 0..self.config.epochs {
            total += self.update()?;
        }
        self.decay_epsilon();
        // no RNG draws here, so logging does not perturb training
        let greedy_reward =
            run_policy(env, |obs| greedy_action(&self.online, obs))?.cumulative_reward;
        Ok(EpisodeLog {
            episode,
            epsilon,
            mean_loss: total / self.config.epochs as f64,
            cumulative_reward,
            greedy_reward,
        })
    }
}

/// A trained network plus the observation scaling it was trained under.
#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub net: QNetwork,
    pub normalizer: Normalizer,
    pub log: TrainingLog,
    pub final_epsilon: f64,
}

/// Trains on `series` (the training partition); normalization is fitted on it.
pub fn train(
    series: &PriceSeries,
    env_config: EnvConfig,
    config: &TrainConfig,
) -> Result<TrainedAgent> {
    let normalizer = Normalizer::fit(series)?;
    let env = TradingEnv::new(series, env_config, &normalizer)?;
    let mut trainer = Trainer::new(env_config.input_dim(), *config)?;
    let mut log = TrainingLog::default();
    for episode in 1..=config.episodes {
        let entry = trainer.run_episode(&env, episode)?;
        log::info!(
            "episode {episode}/{}: epsilon {:.4} loss {:.6} reward {:.4} greedy {:.4}",
            config.episodes,
            entry.epsilon,
            entry.mean_loss,
            entry.cumulative_reward,
            entry.greedy_reward
        );
        log.episodes.push(entry);
    }
    Ok(TrainedAgent {
        net: trainer.online,
        normalizer,
        log,
        final_epsilon: trainer.epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestDay {
    pub index: usize,
    pub date: NaiveDate,
    pub action: Action,
    pub q_values: [f64; 2],
    pub position: Position,
    pub reward: f64,
    pub cumulative_reward: f64,
}

/// Greedy backtest over one series.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestRecord {
    pub ticker: String,
    pub window_size: usize,
    pub days: Vec<BacktestDay>,
    pub cumulative_reward: f64,
}

impl BacktestRecord {
    /// Day record for bar `index`.
    pub fn at(&self, index: usize) -> Option<&BacktestDay> {
        let first = self.days.first()?.index;
        self.days.get(index.checked_sub(first)?)
    }

    pub fn first_index(&self) -> Option<usize> {
        self.days.first().map(|d| d.index)
    }

    pub fn to_rollout(&self) -> Rollout {
        Rollout {
            steps: self
                .days
                .iter()
                .map(|d| crate::trading_env::StepRecord {
                    index: d.index,
                    date: d.date,
                    action: d.action,
                    position: d.position,
                    reward: d.reward,
                    cumulative_reward: d.cumulative_reward,
                })
                .collect(),
            cumulative_reward: self.cumulative_reward,
        }
    }

    /// `date,action,position,reward,cumulative_reward`
    pub fn to_csv(&self) -> String {
        self.to_rollout().to_csv()
    }

    pub fn date_range_label(&self) -> String {
        match (self.days.first(), self.days.last()) {
            (Some(a), Some(b)) => format!(
                "{}_{}",
                a.date.format(DATE_FORMAT),
                b.date.format(DATE_FORMAT)
            ),
            _ => "empty".into(),
        }
    }
}

/// Runs the greedy policy (ε = 0) over the configured range.
pub fn evaluate(
    net: &QNetwork,
    normalizer: Option<&Normalizer>,
    series: &PriceSeries,
    env_config: EnvConfig,
) -> Result<BacktestRecord> {
    let normalizer = normalizer.ok_or_else(|| {
        Error::Usage("evaluation needs the normalization constants saved with the model".into())
    })?;
    if !normalizer.is_finite() {
        return Err(Error::Usage(
            "normalization constants are not finite".into(),
        ));
    }
    net.expect_input_dim(env_config.input_dim())?;
    let env = TradingEnv::new(series, env_config, normalizer)?;
    let mut q_trace = Vec::new();
    let rollout = run_policy(&env, |obs| {
        let q = net.forward(obs)?;
        q_trace.push(q);
        Ok(if q[1] > q[0] {
            Action::Buy
        } else {
            Action::Sell
        })
    })?;
    let days = rollout
        .steps
        .iter()
        .zip(q_trace)
        .map(|(s, q)| BacktestDay {
            index: s.index,
            date: s.date,
            action: s.action,
            q_values: q,
            position: s.position,
            reward: s.reward,
            cumulative_reward: s.cumulative_reward,
        })
        .collect();
    Ok(BacktestRecord {
        ticker: series.ticker().to_string(),
        window_size: env_config.window_size,
        days,
        cumulative_reward: rollout.cumulative_reward,
    })
}
