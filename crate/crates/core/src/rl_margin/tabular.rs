//! Exact Bellman solutions for small deterministic decision processes,
//! used to check what the Q-network learns.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};

use super::{Action, Environment, PolicyTable, Step};

/// Deterministic finite MDP: `next[s][a]`, `reward[s][a]`, `terminal[s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub next: Vec<[usize; 3]>,
    pub reward: Vec<[f64; 3]>,
    pub terminal: Vec<[bool; 3]>,
}

impl TabularMdp {
    pub fn new(next: Vec<[usize; 3]>, reward: Vec<[f64; 3]>) -> Result<Self> {
        let terminal = vec![[false; 3]; next.len()];
        let mdp = Self { next, reward, terminal };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn state_count(&self) -> usize {
        self.next.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.next.len();
        if n == 0 || self.reward.len() != n || self.terminal.len() != n {
            return Err(Error::InvalidArgument("tabular MDP tables disagree in size".into()));
        }
        if self.next.iter().flatten().any(|&s| s >= n) {
            return Err(Error::InvalidArgument("transition to a state out of range".into()));
        }
        Ok(())
    }
}

/// Runs a [`TabularMdp`] as an environment with uniform random starts.
#[derive(Clone, Debug)]
pub struct TabularEnv {
    pub mdp: TabularMdp,
    state: usize,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp) -> Self {
        Self { mdp, state: 0 }
    }
}

impl Environment for TabularEnv {
    fn state_count(&self) -> usize {
        self.mdp.state_count()
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<usize> {
        self.state = rng.random_range(0..self.mdp.state_count());
        Ok(self.state)
    }

    fn step(&mut self, action: Action) -> Result<Step> {
        let a = action.index();
        let s = self.state;
        self.state = self.mdp.next[s][a];
        Ok(Step {
            state: self.state,
            reward: self.mdp.reward[s][a],
            terminal: self.mdp.terminal[s][a],
        })
    }
}

/// Q-values per state, indexed by [`Action::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    pub q: Vec<[f64; 3]>,
}

impl QTable {
    /// Actions whose value is within `tol` of the best, in index order.
    pub fn optimal_actions(&self, state: usize, tol: f64) -> Vec<Action> {
        let row = self.q[state];
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Action::ALL.iter().copied().filter(|a| row[a.index()] >= best - tol).collect()
    }

    /// Lowest-index optimal action.
    pub fn greedy(&self, state: usize) -> Action {
        self.optimal_actions(state, 0.0)[0]
    }
}

/// Fraction of states where `policy` picks one of the oracle's optimal
/// actions (ties within `tol` all count).
pub fn policy_agreement(policy: &PolicyTable, oracle: &QTable, tol: f64) -> Result<f64> {
    if policy.entries.len() != oracle.q.len() || oracle.q.is_empty() {
        return Err(Error::Shape(format!(
            "policy over {} states, oracle over {}",
            policy.entries.len(),
            oracle.q.len()
        )));
    }
    let hits = policy
        .entries
        .iter()
        .filter(|e| oracle.optimal_actions(e.state, tol).contains(&e.action))
        .count();
    Ok(hits as f64 / oracle.q.len() as f64)
}

/// Synchronous Q-iteration until the sup-norm update drops below `tol`.
pub fn tabular_q_iteration(mdp: &TabularMdp, gamma: f64, tol: f64, max_iters: usize) -> Result<QTable> {
    mdp.validate()?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("γ = {gamma} outside [0, 1)")));
    }
    let n = mdp.state_count();
    let mut q = vec![[0.0; 3]; n];
    for _ in 0..max_iters {
        let v: Vec<f64> = q.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut delta: f64 = 0.0;
        let mut next = vec![[0.0; 3]; n];
        for s in 0..n {
            for a in 0..3 {
                let boot = if mdp.terminal[s][a] { 0.0 } else { gamma * v[mdp.next[s][a]] };
                next[s][a] = mdp.reward[s][a] + boot;
                delta = delta.max((next[s][a] - q[s][a]).abs());
            }
        }
        q = next;
        // the remaining error is at most γ/(1-γ) times the last update
        if delta * gamma / (1.0 - gamma) < tol || delta == 0.0 {
            return Ok(QTable { q });
        }
    }
    Err(Error::NoConvergence {
        op: "tabular Q-iteration",
        iterations: max_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_state_geometric_series() {
        let mdp = TabularMdp::new(vec![[0; 3]], vec![[1.0; 3]]).unwrap();
        let q = tabular_q_iteration(&mdp, 0.5, 1e-12, 1000).unwrap();
        for a in 0..3 {
            assert!((q.q[0][a] - 2.0).abs() < 1e-11);
        }
    }

    #[test]
    fn two_state_chain_closed_form() {
        // state 0: Decrease stays (r=0), Keep/Increase move to 1 (r=1);
        // state 1: every action returns to 0 with reward 2, except Keep
        // which stays with reward 0.5
        let mdp = TabularMdp::new(vec![[0, 1, 1], [0, 1, 0]], vec![[0.0, 1.0, 1.0], [2.0, 0.5, 2.0]]).unwrap();
        let g: f64 = 0.9;
        let q = tabular_q_iteration(&mdp, g, 1e-12, 10_000).unwrap();
        // optimal cycle 0 -> 1 -> 0: V0 = 1 + g V1, V1 = 2 + g V0
        let v0 = (1.0 + 2.0 * g) / (1.0 - g * g);
        let v1 = 2.0 + g * v0;
        let want = [[g * v0, 1.0 + g * v1, 1.0 + g * v1], [2.0 + g * v0, 0.5 + g * v1, 2.0 + g * v0]];
        for s in 0..2 {
            for a in 0..3 {
                assert!((q.q[s][a] - want[s][a]).abs() < 1e-10, "Q({s},{a})");
            }
        }
        assert_eq!(q.greedy(0), Action::Keep);
        assert_eq!(q.optimal_actions(1, 1e-9), vec![Action::Decrease, Action::Increase]);
    }

    #[test]
    fn myopic_limit_is_immediate_reward() {
        let mdp = TabularMdp::new(vec![[1, 0, 1], [0, 0, 1]], vec![[0.3, -1.0, 2.0], [4.0, 0.0, -0.5]]).unwrap();
        let q = tabular_q_iteration(&mdp, 0.0, 1e-12, 10).unwrap();
        assert_eq!(q.q, mdp.reward);
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let mdp = TabularMdp::new(vec![[0; 3]], vec![[1.0; 3]]).unwrap();
        assert!(matches!(
            tabular_q_iteration(&mdp, 0.99, 1e-12, 5),
            Err(Error::NoConvergence { .. })
        ));
        assert!(TabularMdp::new(vec![[3; 3]], vec![[0.0; 3]]).is_err());
    }
}
