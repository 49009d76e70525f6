//! Deep Q-learning over one-hot encoded discrete states.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, ParamStore, Parameter, Session, Var, LEAKY_SLOPE};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig, OptimizerKind};

use super::{Action, Environment};

const W1: &str = "q.w1";
const B1: &str = "q.b1";
const W2: &str = "q.w2";
const B2: &str = "q.b2";

/// One-hidden-layer value network: `code(s) → hidden → Q(s, ·)`, where
/// `code(s)` is row `s` of a fixed state encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    pub states: usize,
    pub hidden: usize,
    pub encoding: DenseMatrix,
    pub params: ParamStore,
}

impl QNetwork {
    /// Network over a plain one-hot encoding of `states` states.
    pub fn new<R: Rng + ?Sized>(states: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::with_encoding(DenseMatrix::identity(states), hidden, rng)
    }

    pub fn with_encoding<R: Rng + ?Sized>(encoding: DenseMatrix, hidden: usize, rng: &mut R) -> Result<Self> {
        let (states, inputs) = encoding.shape();
        if states == 0 || inputs == 0 || hidden == 0 {
            return Err(Error::Config("Q-network needs states, inputs and hidden units".into()));
        }
        let mut params = ParamStore::new();
        params.insert(W1, Parameter::new(DenseMatrix::random_normal(inputs, hidden, 1.0, rng)));
        params.insert(B1, Parameter::new(DenseMatrix::zeros(1, hidden)));
        params.insert(W2, Parameter::new(DenseMatrix::random_normal(hidden, 3, 0.1 / (hidden as f64).sqrt(), rng)));
        params.insert(B2, Parameter::new(DenseMatrix::zeros(1, 3)));
        Ok(Self {
            states,
            hidden,
            encoding,
            params,
        })
    }

    /// Encoded rows for a batch of states.
    pub fn encode(&self, states: &[usize]) -> Result<DenseMatrix> {
        let mut x = DenseMatrix::zeros(states.len(), self.encoding.cols());
        for (r, &s) in states.iter().enumerate() {
            if s >= self.states {
                return Err(Error::InvalidArgument(format!("state {s} of {}", self.states)));
            }
            x.row_mut(r).copy_from_slice(self.encoding.row(s));
        }
        Ok(x)
    }

    /// Q-values for a batch of encoded states, recorded on `s`, whose store
    /// must be this network's.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (s.param(W1)?, s.param(B1)?, s.param(W2)?, s.param(B2)?);
        let t = &mut s.tape;
        let h = t.matmul(x, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.leaky_relu(h, LEAKY_SLOPE);
        let q = t.matmul(h, w2)?;
        t.add_row(q, b2)
    }

    pub fn q_batch(&self, states: &[usize]) -> Result<DenseMatrix> {
        let x = self.encode(states)?;
        let bias = |key: &str| -> Result<DenseMatrix> {
            let b = self.params.value(key)?;
            let mut out = DenseMatrix::zeros(states.len(), b.cols());
            for r in 0..states.len() {
                out.row_mut(r).copy_from_slice(b.row(0));
            }
            Ok(out)
        };
        let h = x.matmul(self.params.value(W1)?)?.add(&bias(B1)?)?.leaky_relu(LEAKY_SLOPE);
        h.matmul(self.params.value(W2)?)?.add(&bias(B2)?)
    }

    pub fn q_values(&self, state: usize) -> Result<[f64; 3]> {
        let q = self.q_batch(&[state])?;
        Ok([q.get(0, 0), q.get(0, 1), q.get(0, 2)])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: Action,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
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

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::InvalidArgument("sampling an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// `y = r` for terminal transitions, else `r + γ max_a Q_target(s', a)`.
pub fn td_targets(batch: &[Transition], target: &QNetwork, gamma: f64) -> Result<Vec<f64>> {
    let next: Vec<usize> = batch.iter().map(|t| t.next_state).collect();
    let q = target.q_batch(&next)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(r, t)| {
            if t.terminal {
                t.reward
            } else {
                t.reward + gamma * q.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect())
}

/// Mean squared TD error `(Q(s, a) - y)²` on the tape.
pub fn dqn_loss(s: &mut Session<'_>, online: &QNetwork, batch: &[Transition], targets: &[f64]) -> Result<Var> {
    if batch.len() != targets.len() || batch.is_empty() {
        return Err(Error::Shape(format!("{} transitions for {} targets", batch.len(), targets.len())));
    }
    let states: Vec<usize> = batch.iter().map(|t| t.state).collect();
    let actions: Vec<usize> = batch.iter().map(|t| t.action.index()).collect();
    let x = s.constant(online.encode(&states)?);
    let q = online.forward(s, x)?;
    let t = &mut s.tape;
    let qa = t.pick_per_row(q, &actions)?;
    let y = t.constant(DenseMatrix::col_vector(targets));
    let d = t.sub(qa, y)?;
    let sq = t.square(d);
    Ok(t.mean(sq))
}

pub fn dqn_loss_value(online: &QNetwork, target: &QNetwork, batch: &[Transition], gamma: f64) -> Result<f64> {
    let y = td_targets(batch, target, gamma)?;
    let mut s = Session::new(&online.params);
    let l = dqn_loss(&mut s, online, batch, &y)?;
    Ok(s.scalar(l))
}

/// Argmax with ties going to the lowest action index.
pub fn greedy_action(q: &[f64; 3]) -> Action {
    let mut best = 0;
    for i in 1..3 {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::ALL[best]
}

pub fn epsilon_greedy<R: Rng + ?Sized>(q: &[f64; 3], epsilon: f64, rng: &mut R) -> Action {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        Action::ALL[rng.random_range(0..3)]
    } else {
        greedy_action(q)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which ε decays linearly.
    pub epsilon_decay_steps: usize,
    /// Updates between target-network copies.
    pub target_sync: usize,
    /// Step budget per episode.
    pub episode_steps: usize,
    pub episodes: usize,
    pub hidden: usize,
    pub learning_rate: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            replay_capacity: 10_000,
            batch_size: 32,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            target_sync: 100,
            episode_steps: 64,
            episodes: 400,
            hidden: 128,
            learning_rate: 2e-3,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("γ = {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return Err(Error::Config("ε bounds must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.target_sync == 0 || self.episode_steps == 0 || self.hidden == 0 {
            return Err(Error::Config("agent sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        let t = (step as f64 / self.epsilon_decay_steps as f64).min(1.0);
        self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub state: usize,
    pub action: Action,
    pub q_values: [f64; 3],
}

/// Greedy action and Q-values for every state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub entries: Vec<PolicyEntry>,
}

impl PolicyTable {
    pub fn from_network(net: &QNetwork) -> Result<Self> {
        let all: Vec<usize> = (0..net.states).collect();
        let q = net.q_batch(&all)?;
        let entries = all
            .iter()
            .map(|&s| {
                let q_values = [q.get(s, 0), q.get(s, 1), q.get(s, 2)];
                PolicyEntry {
                    state: s,
                    action: greedy_action(&q_values),
                    q_values,
                }
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn action(&self, state: usize) -> Option<Action> {
        self.entries.get(state).map(|e| e.action)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedAgent {
    pub network: QNetwork,
    pub policy: PolicyTable,
    pub updates: usize,
    pub final_loss: f64,
}

/// Runs ε-greedy episodes with experience replay and a periodically
/// synced target network. Episodes end on a terminal step or when the step
/// budget runs out; a budget cut is not stored as terminal, so its value
/// still bootstraps.
pub fn train_agent(env: &mut dyn Environment, config: &AgentConfig, rng: &mut dyn RngCore) -> Result<TrainedAgent> {
    config.validate()?;
    let mut online = QNetwork::with_encoding(env.encoding(), config.hidden, rng)?;
    let mut target = online.clone();
    let mut buffer = ReplayBuffer::new(config.replay_capacity)?;
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Adam,
        learning_rate: config.learning_rate,
        weight_decay: 0.0,
        clip_norm: Some(10.0),
        ..OptimizerConfig::default()
    })?;
    let (mut steps, mut updates, mut final_loss) = (0usize, 0usize, 0.0);
    let total_steps = config.episodes * config.episode_steps;
    for episode in 0..config.episodes {
        let mut state = env.reset(rng)?;
        for _ in 0..config.episode_steps {
            let q = online.q_values(state)?;
            let action = epsilon_greedy(&q, config.epsilon(steps), rng);
            let step = env.step(action)?;
            steps += 1;
            buffer.push(Transition {
                state,
                action,
                reward: step.reward,
                next_state: step.state,
                terminal: step.terminal,
            });
            state = step.state;
            if buffer.len() >= config.batch_size {
                let batch = buffer.sample(config.batch_size, rng)?;
                let y = td_targets(&batch, &target, config.gamma)?;
                let grads = {
                    let mut s = Session::new(&online.params);
                    let loss = dqn_loss(&mut s, &online, &batch, &y)?;
                    final_loss = s.scalar(loss);
                    if !final_loss.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("Q-learning loss at update {updates}, episode {episode}"),
                        });
                    }
                    s.backward(loss)?
                };
                online.params.accumulate(grads)?;
                let lr = cosine_lr(config.learning_rate, steps, total_steps);
                opt.step(&mut online.params, lr)?;
                updates += 1;
                if updates % config.target_sync == 0 {
                    target = online.clone();
                }
            }
            if step.terminal {
                break;
            }
        }
    }
    let policy = PolicyTable::from_network(&online)?;
    Ok(TrainedAgent {
        network: online,
        policy,
        updates,
        final_loss,
    })
}
