//! One margin-optimization phase on a trained network: deviation probes
//! per candidate margin, the resulting decision process, and the agent's
//! greedy choice.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_margin::{ANCHOR_GROUP, GROUP_COUNT, GROUP_NAMES};
use crate::numerics::{DenseMatrix, ParamStore, Session};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rl_margin::{
    compute_d_inter, compute_d_intra, next_margin_bucket, policy_agreement, return_signal, reward, tabular_q_iteration,
    train_agent, Action, AgentConfig, DeviationSpace, Environment, MdpState, PolicyTable, StateSpace, Step, TabularMdp,
    ADJUSTABLE_GROUPS,
};

use super::config::RlConfig;
use super::model::{AgeModel, NECK_KEY};

/// Measured deviations of each adjustable group from the anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// `inter[slot][m]` with slots in [`ADJUSTABLE_GROUPS`] order.
    pub inter: Vec<Vec<f64>>,
    pub intra: Vec<Vec<f64>>,
}

/// Deterministic margin MDP whose deviations come from a [`Probe`].
#[derive(Clone, Debug)]
pub struct MarginEnv {
    pub space: StateSpace,
    pub probe: Probe,
    /// Rewards are divided by the largest signal gap in the table, which
    /// leaves every optimal policy unchanged.
    pub reward_scale: f64,
    state: usize,
}

impl MarginEnv {
    pub fn new(space: StateSpace, probe: Probe) -> Result<Self> {
        space.validate()?;
        let nm = space.margins.len();
        if probe.inter.len() != ADJUSTABLE_GROUPS.len()
            || probe.intra.len() != ADJUSTABLE_GROUPS.len()
            || probe.inter.iter().chain(&probe.intra).any(|r| r.len() != nm)
        {
            return Err(Error::Shape("probe table does not match the state space".into()));
        }
        let mut env = Self {
            space,
            probe,
            reward_scale: 1.0,
            state: 0,
        };
        let mut spread: f64 = 0.0;
        for &g in &ADJUSTABLE_GROUPS {
            for a in 0..nm {
                for b in 0..nm {
                    spread = spread.max((env.signal(g, a) - env.signal(g, b)).abs());
                }
            }
        }
        if !spread.is_finite() {
            return Err(Error::NonFinite {
                context: "probe deviations".into(),
            });
        }
        if spread > 0.0 {
            env.reward_scale = 1.0 / spread;
        }
        Ok(env)
    }

    fn slot(group: usize) -> usize {
        ADJUSTABLE_GROUPS.iter().position(|&g| g == group).expect("adjustable group")
    }

    fn signal(&self, group: usize, m: usize) -> f64 {
        let slot = Self::slot(group);
        return_signal(self.probe.inter[slot][m], self.probe.intra[slot][m])
    }

    /// The state a group is in when its margin sits in bucket `m`.
    pub fn observed(&self, group: usize, m: usize) -> Result<usize> {
        let d = self.space.deviations.bucket(self.probe.inter[Self::slot(group)][m]);
        self.space.index(MdpState {
            group,
            d_bucket: d,
            m_bucket: m,
        })
    }

    fn transition(&self, index: usize, action: Action) -> Result<(usize, f64)> {
        let s = self.space.state(index)?;
        let m = next_margin_bucket(s, action, &self.space.margins);
        let r = self.reward_scale * reward(self.signal(s.group, s.m_bucket), self.signal(s.group, m));
        Ok((self.observed(s.group, m)?, r))
    }

    pub fn to_tabular(&self) -> Result<TabularMdp> {
        let n = self.space.len();
        let mut next = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        for s in 0..n {
            let (mut ns, mut rs) = ([0; 3], [0.0; 3]);
            for a in Action::ALL {
                let (t, r) = self.transition(s, a)?;
                ns[a.index()] = t;
                rs[a.index()] = r;
            }
            next.push(ns);
            rewards.push(rs);
        }
        TabularMdp::new(next, rewards)
    }
}

impl Environment for MarginEnv {
    fn state_count(&self) -> usize {
        self.space.len()
    }

    fn encoding(&self) -> DenseMatrix {
        self.space.factored_encoding()
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<usize> {
        self.state = rng.random_range(0..self.space.len());
        Ok(self.state)
    }

    fn step(&mut self, action: Action) -> Result<Step> {
        let (next, r) = self.transition(self.state, action)?;
        self.state = next;
        Ok(Step {
            state: next,
            reward: r,
            terminal: false,
        })
    }
}

/// Fine-tunes copies of the neck, head and margin curve with one group's
/// margin replaced, then measures that group's deviations.
pub fn probe_deviations(
    model: &AgeModel,
    store: &ParamStore,
    margins: &[f64; GROUP_COUNT],
    embeddings: &DenseMatrix,
    ages: &[u32],
    groups: &[usize],
    config: &RlConfig,
) -> Result<Probe> {
    let keys = [
        NECK_KEY,
        model.head.key.as_str(),
        model.margin_keys.a.as_str(),
        model.margin_keys.h.as_str(),
        model.margin_keys.k.as_str(),
    ];
    let mut base = ParamStore::new();
    for k in keys {
        base.insert(k, store.get(k)?.clone());
    }
    let nm = config.margin_space.len();
    let mut probe = Probe {
        inter: vec![vec![0.0; nm]; ADJUSTABLE_GROUPS.len()],
        intra: vec![vec![0.0; nm]; ADJUSTABLE_GROUPS.len()],
    };
    for (slot, &g) in ADJUSTABLE_GROUPS.iter().enumerate() {
        for m in 0..nm {
            let mut trial = *margins;
            trial[g] = config.margin_space.value(m);
            let mut local = base.clone();
            local.get_mut(&model.margin_keys.h)?.value = DenseMatrix::row_vector(&trial);
            let mut opt = Optimizer::new(OptimizerConfig {
                kind: OptimizerKind::Sgd,
                learning_rate: config.probe_learning_rate,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            })?;
            let subset = balanced_subset(groups, g, config.probe_min_anchor);
            let sub_x = DenseMatrix::from_rows(&subset.iter().map(|&i| embeddings.row(i).to_vec()).collect::<Vec<_>>())?;
            let sub_ages: Vec<u32> = subset.iter().map(|&i| ages[i]).collect();
            let sub_groups: Vec<usize> = subset.iter().map(|&i| groups[i]).collect();
            for step in 0..config.probe_steps {
                let grads = {
                    let mut s = Session::new(&local);
                    let x = s.constant(sub_x.clone());
                    let f = model.neck(&mut s, x)?;
                    let loss = model.loss(&mut s, f, &sub_ages, &sub_groups)?;
                    if !s.scalar(loss).is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("probe loss for {} at margin {} step {step}", GROUP_NAMES[g], trial[g]),
                        });
                    }
                    s.backward(loss)?
                };
                local.accumulate(grads)?;
                opt.step(&mut local, config.probe_learning_rate)?;
            }
            let features = embeddings.matmul(local.value(NECK_KEY)?)?;
            let per_group = split_by_group(&features, groups)?;
            probe.inter[slot][m] = compute_d_inter(&per_group, g, config.inter_statistic)?;
            probe.intra[slot][m] = compute_d_intra(&per_group, g)?;
        }
    }
    Ok(probe)
}

/// Every sample of `group` plus as many anchor samples (at least
/// `min_anchor`), taken in dataset order.
pub fn balanced_subset(groups: &[usize], group: usize, min_anchor: usize) -> Vec<usize> {
    let members: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == group).collect();
    let want = members.len().max(min_anchor);
    let mut out = members;
    out.extend((0..groups.len()).filter(|&i| groups[i] == ANCHOR_GROUP).take(want));
    out.sort_unstable();
    out
}

pub fn split_by_group(features: &DenseMatrix, groups: &[usize]) -> Result<Vec<DenseMatrix>> {
    if features.rows() != groups.len() {
        return Err(Error::Shape(format!("{} feature rows for {} groups", features.rows(), groups.len())));
    }
    (0..GROUP_COUNT)
        .map(|g| {
            let rows: Vec<Vec<f64>> = (0..groups.len())
                .filter(|&i| groups[i] == g)
                .map(|i| features.row(i).to_vec())
                .collect();
            if rows.is_empty() {
                Ok(DenseMatrix::zeros(0, features.cols()))
            } else {
                DenseMatrix::from_rows(&rows)
            }
        })
        .collect()
}

/// What one phase measured and decided.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub after_epoch: usize,
    pub margins_before: [f64; GROUP_COUNT],
    pub margins_after: [f64; GROUP_COUNT],
    pub probe: Probe,
    pub deviations: DeviationSpace,
    /// Share of states where the agent picks an exactly optimal action.
    pub oracle_agreement: f64,
    pub agent_updates: usize,
}

pub struct PhaseResult {
    pub log: PhaseLog,
    pub space: StateSpace,
    pub policy: PolicyTable,
}

pub fn run_margin_phase(
    model: &AgeModel,
    store: &ParamStore,
    margins: &[f64; GROUP_COUNT],
    embeddings: &DenseMatrix,
    ages: &[u32],
    groups: &[usize],
    config: &RlConfig,
    after_epoch: usize,
    rng: &mut dyn RngCore,
) -> Result<PhaseResult> {
    let probe = probe_deviations(model, store, margins, embeddings, ages, groups, config)?;
    let observed: Vec<f64> = probe.inter.iter().flatten().copied().collect();
    let deviations = DeviationSpace::from_observed(&observed, config.deviation_buckets)?;
    let space = StateSpace {
        margins: config.margin_space.clone(),
        deviations: deviations.clone(),
    };
    let mut env = MarginEnv::new(space.clone(), probe.clone())?;
    let agent_config = AgentConfig {
        gamma: config.gamma,
        episodes: config.episodes,
        episode_steps: config.episode_steps,
        epsilon_decay_steps: (config.episodes * config.episode_steps / 2).max(1),
        hidden: config.hidden,
        learning_rate: config.learning_rate,
        ..AgentConfig::default()
    };
    let agent = train_agent(&mut env, &agent_config, rng)?;
    let oracle = tabular_q_iteration(&env.to_tabular()?, config.gamma, 1e-10, 100_000)?;
    let oracle_agreement = policy_agreement(&agent.policy, &oracle, 1e-6)?;

    let mut next = *margins;
    for &g in &ADJUSTABLE_GROUPS {
        let mut m = space.margins.nearest(margins[g]);
        for _ in 0..config.rollout_steps {
            let state = env.observed(g, m)?;
            let action = agent.policy.action(state).expect("policy covers every state");
            m = next_margin_bucket(space.state(state)?, action, &space.margins);
        }
        next[g] = space.margins.value(m);
    }
    Ok(PhaseResult {
        log: PhaseLog {
            after_epoch,
            margins_before: *margins,
            margins_after: next,
            probe,
            deviations,
            oracle_agreement,
            agent_updates: agent.updates,
        },
        space,
        policy: agent.policy,
    })
}
