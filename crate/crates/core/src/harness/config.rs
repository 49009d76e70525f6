use serde::{Deserialize, Serialize};

use crate::emagcn::DiffusionConfig;
use crate::error::{Error, Result};
use crate::group_margin::{GroupMarginParams, GROUP_COUNT};
use crate::optim::OptimizerKind;
use crate::rl_margin::{InterStatistic, MarginSpace};

/// Share of each group in a long-tailed face corpus: children, teenager,
/// adult, senior.
pub const MIVIA_PROPORTIONS: [f64; GROUP_COUNT] = [0.006, 0.044, 0.887, 0.063];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Each sample is `nodes x dim` node features.
    Vector,
    /// Each sample is an RGB grid cut into square patches.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub min_age: u32,
    pub max_age: u32,
    pub proportions: [f64; GROUP_COUNT],
    /// Proportions for the test split; uniform by default so every group
    /// is measured.
    pub test_proportions: [f64; GROUP_COUNT],
    pub mode: FeatureMode,
    /// Node count in vector mode.
    pub nodes: usize,
    /// Node feature width (the model width).
    pub dim: usize,
    /// Grid side in pixels and patch side, grid mode only.
    pub grid_size: usize,
    pub patch_size: usize,
    /// Neighbors per node in the k-NN graph.
    pub knn: usize,
    /// Distance between group centers.
    pub separation: f64,
    /// Length of the within-group age direction.
    pub age_gradient: f64,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 1000,
            test_samples: 400,
            min_age: 0,
            max_age: 80,
            proportions: MIVIA_PROPORTIONS,
            test_proportions: [0.25; GROUP_COUNT],
            mode: FeatureMode::Vector,
            nodes: 8,
            dim: 16,
            grid_size: 16,
            patch_size: 4,
            knn: 3,
            separation: 1.5,
            age_gradient: 2.0,
            noise: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub diffusion: DiffusionConfig,
    pub margins: GroupMarginParams,
    /// Weight of the classification term in the joint loss.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            diffusion: DiffusionConfig {
                hops: 3,
                heads: 2,
                layers: 1,
                drop_ratio: 0.1,
                ..DiffusionConfig::default()
            },
            margins: GroupMarginParams::default(),
            lambda: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub enabled: bool,
    /// Epochs of network training between margin phases.
    pub every: usize,
    pub gamma: f64,
    pub margin_space: MarginSpace,
    pub deviation_buckets: usize,
    pub inter_statistic: InterStatistic,
    pub episodes: usize,
    pub episode_steps: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    /// Greedy policy steps taken from the current margin.
    pub rollout_steps: usize,
    /// Fine-tuning steps of the neck and head per probed margin.
    pub probe_steps: usize,
    pub probe_learning_rate: f64,
    /// Lower bound on anchor samples in each probe's fine-tuning set.
    pub probe_min_anchor: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            every: 4,
            gamma: 0.9,
            margin_space: MarginSpace::default(),
            deviation_buckets: 4,
            inter_statistic: InterStatistic::Literal,
            episodes: 400,
            episode_steps: 64,
            hidden: 128,
            learning_rate: 2e-3,
            rollout_steps: 3,
            probe_steps: 40,
            probe_learning_rate: 0.02,
            probe_min_anchor: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub rl: RlConfig,
    pub train: TrainConfig,
}

fn check_proportions(name: &str, p: &[f64; GROUP_COUNT]) -> Result<()> {
    if p.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Config(format!("{name} {p:?} must all be positive")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name} sum to {total}, not 1")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check_proportions("proportions", &d.proportions)?;
        check_proportions("test proportions", &d.test_proportions)?;
        if d.train_samples == 0 || d.test_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if d.max_age <= d.min_age {
            return Err(Error::Config(format!("age range {}..={} is empty", d.min_age, d.max_age)));
        }
        if d.dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        match d.mode {
            FeatureMode::Vector => {
                if d.nodes < 2 {
                    return Err(Error::Config("at least two nodes per sample".into()));
                }
            }
            FeatureMode::Grid => {
                if d.patch_size == 0 || !d.grid_size.is_multiple_of(d.patch_size) || d.grid_size / d.patch_size < 2 {
                    return Err(Error::Config(format!(
                        "grid {} does not split into at least 2x2 patches of {}",
                        d.grid_size, d.patch_size
                    )));
                }
            }
        }
        if d.knn == 0 || d.knn >= self.node_count() {
            return Err(Error::Config(format!("knn {} needs 1 <= k < {} nodes", d.knn, self.node_count())));
        }
        if !(d.noise >= 0.0) || !d.separation.is_finite() || !d.age_gradient.is_finite() {
            return Err(Error::Config("noise must be non-negative and shape constants finite".into()));
        }
        self.model.diffusion.validate(d.dim)?;
        self.model.margins.validate()?;
        if !(0.0..=1.0).contains(&self.model.lambda) {
            return Err(Error::Config(format!("λ = {} outside [0, 1]", self.model.lambda)));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(t.learning_rate > 0.0) || !(t.weight_decay >= 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("learning rate, weight decay or momentum out of range".into()));
        }
        let r = &self.rl;
        if r.enabled {
            r.margin_space.validate()?;
            if r.every == 0 || r.deviation_buckets == 0 || r.episodes == 0 || r.episode_steps == 0 || r.hidden == 0 {
                return Err(Error::Config("RL phase sizes must be positive".into()));
            }
            if !(0.0..1.0).contains(&r.gamma) {
                return Err(Error::Config(format!("γ = {} outside [0, 1)", r.gamma)));
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        match self.data.mode {
            FeatureMode::Vector => self.data.nodes,
            FeatureMode::Grid => {
                let side = self.data.grid_size / self.data.patch_size.max(1);
                side * side
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "run config",
            detail: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
