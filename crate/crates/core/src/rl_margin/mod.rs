//! The margin-adjustment decision process: discrete state space over
//! `{group, deviation bucket, margin}`, three-way actions, the feature
//! deviation statistics behind the reward, and a deep Q-learning agent.

pub mod dqn;
pub mod simulator;
pub mod tabular;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_margin::{ANCHOR_GROUP, GROUP_COUNT};
use crate::numerics::{cosine, DenseMatrix};

pub use dqn::{
    dqn_loss, dqn_loss_value, epsilon_greedy, greedy_action, td_targets, train_agent, AgentConfig, PolicyEntry,
    PolicyTable, QNetwork, ReplayBuffer, TrainedAgent, Transition,
};
pub use simulator::DeviationSimulator;
pub use tabular::{policy_agreement, tabular_q_iteration, QTable, TabularEnv, TabularMdp};

/// Long-tailed groups whose margins the agent adjusts.
pub const ADJUSTABLE_GROUPS: [usize; 3] = [0, 1, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Decrease,
    Keep,
    Increase,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Decrease, Action::Keep, Action::Increase];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("action index {i}")))
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Action::Decrease => "-1",
            Action::Keep => "O",
            Action::Increase => "+1",
        }
    }

    fn offset(self) -> isize {
        self.index() as isize - 1
    }
}

/// Strictly increasing, evenly spaced margin values; the spacing is `κ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSpace {
    pub values: Vec<f64>,
}

impl Default for MarginSpace {
    fn default() -> Self {
        Self {
            values: vec![0.2, 0.4, 0.6, 0.8],
        }
    }
}

impl MarginSpace {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(Error::Config("margin space needs at least two values".into()));
        }
        let kappa = self.values[1] - self.values[0];
        for w in self.values.windows(2) {
            let step = w[1] - w[0];
            if !(step > 0.0) || (step - kappa).abs() > 1e-9 {
                return Err(Error::Config(format!("margin space {:?} is not evenly increasing", self.values)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn kappa(&self) -> f64 {
        self.values[1] - self.values[0]
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Index of the closest value.
    pub fn nearest(&self, m: f64) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if (v - m).abs() < (self.values[best] - m).abs() {
                best = i;
            }
        }
        best
    }
}

/// Equal-width deviation buckets over `[lo, hi]`; values outside fall in
/// the end buckets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationSpace {
    pub lo: f64,
    pub hi: f64,
    pub buckets: usize,
}

impl Default for DeviationSpace {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 1.0,
            buckets: 4,
        }
    }
}

impl DeviationSpace {
    /// Buckets spanning the observed range of `values`.
    pub fn from_observed(values: &[f64], buckets: usize) -> Result<Self> {
        if buckets == 0 || values.is_empty() {
            return Err(Error::InvalidArgument("deviation space needs buckets and observations".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NonFinite {
                context: "observed deviations".into(),
            });
        }
        if hi <= lo {
            hi = lo + 1e-6;
        }
        Ok(Self { lo, hi, buckets })
    }

    pub fn validate(&self) -> Result<()> {
        if self.buckets == 0 || !(self.hi > self.lo) {
            return Err(Error::Config(format!("deviation space {self:?} is empty")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.buckets as f64
    }

    pub fn bucket(&self, d: f64) -> usize {
        let i = ((d - self.lo) / self.width()).floor();
        if i.is_nan() || i < 0.0 {
            0
        } else {
            (i as usize).min(self.buckets - 1)
        }
    }

    pub fn center(&self, bucket: usize) -> f64 {
        self.lo + (bucket as f64 + 0.5) * self.width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MdpState {
    /// Group id, one of [`ADJUSTABLE_GROUPS`].
    pub group: usize,
    pub d_bucket: usize,
    pub m_bucket: usize,
}

/// The full discrete state space and its flat indexing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct StateSpace {
    pub margins: MarginSpace,
    pub deviations: DeviationSpace,
}


impl StateSpace {
    pub fn validate(&self) -> Result<()> {
        self.margins.validate()?;
        self.deviations.validate()
    }

    pub fn len(&self) -> usize {
        ADJUSTABLE_GROUPS.len() * self.deviations.buckets * self.margins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, s: MdpState) -> Result<usize> {
        let slot = ADJUSTABLE_GROUPS
            .iter()
            .position(|&g| g == s.group)
            .ok_or_else(|| Error::InvalidArgument(format!("group {} is not adjustable", s.group)))?;
        if s.d_bucket >= self.deviations.buckets || s.m_bucket >= self.margins.len() {
            return Err(Error::InvalidArgument(format!("state {s:?} out of range")));
        }
        Ok((slot * self.deviations.buckets + s.d_bucket) * self.margins.len() + s.m_bucket)
    }

    pub fn state(&self, index: usize) -> Result<MdpState> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!("state index {index} of {}", self.len())));
        }
        let nm = self.margins.len();
        let nd = self.deviations.buckets;
        Ok(MdpState {
            group: ADJUSTABLE_GROUPS[index / (nd * nm)],
            d_bucket: (index / nm) % nd,
            m_bucket: index % nm,
        })
    }

    /// Concatenated one-hots of group, deviation bucket and margin bucket.
    pub fn factored_encoding(&self) -> DenseMatrix {
        let (ng, nd, nm) = (ADJUSTABLE_GROUPS.len(), self.deviations.buckets, self.margins.len());
        let mut e = DenseMatrix::zeros(self.len(), ng + nd + nm);
        for (i, s) in self.states().enumerate() {
            let slot = ADJUSTABLE_GROUPS.iter().position(|&g| g == s.group).expect("adjustable");
            e.set(i, slot, 1.0);
            e.set(i, ng + s.d_bucket, 1.0);
            e.set(i, ng + nd + s.m_bucket, 1.0);
        }
        e
    }

    pub fn states(&self) -> impl Iterator<Item = MdpState> + '_ {
        (0..self.len()).map(|i| self.state(i).expect("index in range"))
    }
}

/// Margin bucket after `action`, clamped to the ends of the space.
pub fn next_margin_bucket(state: MdpState, action: Action, margins: &MarginSpace) -> usize {
    let m = state.m_bucket as isize + action.offset();
    m.clamp(0, margins.len() as isize - 1) as usize
}

/// `m - κ`, `m` or `m + κ`, clamped to `[min 𝕄, max 𝕄]`.
pub fn apply_action(state: MdpState, action: Action, margins: &MarginSpace) -> f64 {
    let m = margins.value(state.m_bucket) + action.offset() as f64 * margins.kappa();
    let (lo, hi) = (margins.values[0], margins.values[margins.len() - 1]);
    m.clamp(lo, hi)
}

/// Which between-group statistic feeds the deviation `D_inter`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterStatistic {
    /// `(1/N_i) Σ max_k cos(x_k, c_i)`, taken literally: the summand does
    /// not depend on the summation index, so this is `max_k cos(x_k, c_i)`.
    #[default]
    Literal,
    /// `1 - cos(c_i, c_2)`, the angular gap between group centers.
    CenterDistance,
}

/// Mean of the unit-normalized rows, renormalized.
pub fn group_center(features: &DenseMatrix) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::InvalidArgument("center of an empty group".into()));
    }
    let unit = features.normalize_rows();
    let mean = unit.mean_rows();
    let norm = mean.frobenius();
    if !(norm > 0.0) {
        return Err(Error::InvalidArgument("group features cancel to a zero center".into()));
    }
    Ok(mean.data().iter().map(|v| v / norm).collect())
}

fn nonempty(groups: &[DenseMatrix], i: usize) -> Result<&DenseMatrix> {
    match groups.get(i) {
        Some(m) if m.rows() > 0 => Ok(m),
        _ => Err(Error::EmptyGroup(i)),
    }
}

fn inter_statistic(groups: &[DenseMatrix], i: usize, mode: InterStatistic) -> Result<f64> {
    let x = nonempty(groups, i)?;
    let c = group_center(x)?;
    match mode {
        InterStatistic::Literal => Ok((0..x.rows()).map(|k| cosine(x.row(k), &c)).fold(f64::NEG_INFINITY, f64::max)),
        InterStatistic::CenterDistance => {
            let anchor = group_center(nonempty(groups, ANCHOR_GROUP)?)?;
            Ok(1.0 - cosine(&c, &anchor))
        }
    }
}

/// `d_intra^i = (1/N_i) Σ_k cos(x_k, c_i)`.
pub fn intra_statistic(groups: &[DenseMatrix], i: usize) -> Result<f64> {
    let x = nonempty(groups, i)?;
    let c = group_center(x)?;
    Ok((0..x.rows()).map(|k| cosine(x.row(k), &c)).sum::<f64>() / x.rows() as f64)
}

/// `|d_inter^i - d_inter^2|` over per-group feature matrices.
pub fn compute_d_inter(groups: &[DenseMatrix], i: usize, mode: InterStatistic) -> Result<f64> {
    check_group_count(groups, i)?;
    Ok((inter_statistic(groups, i, mode)? - inter_statistic(groups, ANCHOR_GROUP, mode)?).abs())
}

/// `|d_intra^i - d_intra^2|`.
pub fn compute_d_intra(groups: &[DenseMatrix], i: usize) -> Result<f64> {
    check_group_count(groups, i)?;
    Ok((intra_statistic(groups, i)? - intra_statistic(groups, ANCHOR_GROUP)?).abs())
}

fn check_group_count(groups: &[DenseMatrix], i: usize) -> Result<()> {
    if groups.len() != GROUP_COUNT || i >= GROUP_COUNT {
        return Err(Error::InvalidArgument(format!(
            "group {i} of {} feature sets",
            groups.len()
        )));
    }
    Ok(())
}

/// `ℛ = -(D_intra + D_inter)`.
pub fn return_signal(d_inter: f64, d_intra: f64) -> f64 {
    -(d_intra + d_inter)
}

/// `r = ℛ_{t+1} - ℛ_t`.
pub fn reward(r_t: f64, r_next: f64) -> f64 {
    r_next - r_t
}

/// Result of one environment transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: usize,
    pub reward: f64,
    pub terminal: bool,
}

/// A discrete environment over flat state indices and the three actions.
pub trait Environment {
    fn state_count(&self) -> usize;

    /// Network input per state, one row each. Plain one-hot by default.
    fn encoding(&self) -> DenseMatrix {
        DenseMatrix::identity(self.state_count())
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<usize>;
    fn step(&mut self, action: Action) -> Result<Step>;
}
