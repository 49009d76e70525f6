//! A synthetic stand-in for measuring feature deviations: each group has
//! a preferred margin, and the deviation relaxes toward a value that grows
//! with the distance from it.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

use super::{next_margin_bucket, reward, return_signal, Action, Environment, MdpState, StateSpace, Step, TabularMdp, ADJUSTABLE_GROUPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationSimulator {
    pub space: StateSpace,
    /// Preferred margin bucket per adjustable group.
    pub preferred: [usize; 3],
    /// Deviation at the preferred margin, per adjustable group.
    pub floor: [f64; 3],
    /// Deviation added per margin bucket away from the preferred one.
    pub slope: f64,
    /// Weight of the previous deviation in the next one.
    pub inertia: f64,
    /// Intra-group deviation per margin bucket away from the preferred one.
    pub intra_slope: f64,
    state: usize,
}

impl Default for DeviationSimulator {
    fn default() -> Self {
        Self::new(StateSpace::default(), [3, 2, 1], [0.05, 0.15, 0.1], 0.3, 0.3, 0.15)
    }
}

impl DeviationSimulator {
    pub fn new(space: StateSpace, preferred: [usize; 3], floor: [f64; 3], slope: f64, inertia: f64, intra_slope: f64) -> Self {
        Self {
            space,
            preferred,
            floor,
            slope,
            inertia,
            intra_slope,
            state: 0,
        }
    }

    fn slot(group: usize) -> usize {
        ADJUSTABLE_GROUPS.iter().position(|&g| g == group).expect("adjustable group")
    }

    fn distance(&self, s: MdpState) -> f64 {
        (s.m_bucket as f64 - self.preferred[Self::slot(s.group)] as f64).abs()
    }

    /// `ℛ` of a state: the inter deviation is its bucket center.
    fn signal(&self, s: MdpState) -> f64 {
        let inter = self.space.deviations.center(s.d_bucket);
        let intra = self.intra_slope * self.distance(s);
        return_signal(inter, intra)
    }

    fn transition(&self, index: usize, action: Action) -> Result<(usize, f64)> {
        let s = self.space.state(index)?;
        let m = next_margin_bucket(s, action, &self.space.margins);
        let probe = MdpState { m_bucket: m, ..s };
        let target = self.floor[Self::slot(s.group)] + self.slope * self.distance(probe);
        let d = self.inertia * self.space.deviations.center(s.d_bucket) + (1.0 - self.inertia) * target;
        let next = MdpState {
            d_bucket: self.space.deviations.bucket(d),
            ..probe
        };
        let r = reward(self.signal(s), self.signal(next));
        Ok((self.space.index(next)?, r))
    }

    /// The same dynamics as an explicit table.
    pub fn to_tabular(&self) -> Result<TabularMdp> {
        let n = self.space.len();
        let mut next = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        for s in 0..n {
            let mut ns = [0; 3];
            let mut rs = [0.0; 3];
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

impl Environment for DeviationSimulator {
    fn state_count(&self) -> usize {
        self.space.len()
    }

    fn encoding(&self) -> DenseMatrix {
        self.space.factored_encoding()
    }

    /// Starts anywhere in the state space, uniformly.
    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<usize> {
        if self.space.is_empty() {
            return Err(Error::Config("empty state space".into()));
        }
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
