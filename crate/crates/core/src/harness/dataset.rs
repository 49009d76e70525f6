//! Synthetic long-tailed age data: one Gaussian cluster per age group in
//! node-feature space, with an age direction inside each group and a
//! shared trend across groups.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::group_margin::{group_of_age, AgeGroups, GROUP_COUNT};
use crate::numerics::{sigmoid, DenseMatrix};
use crate::patch_graph::{knn_graph, PatchGraph, PatchGrid};

use super::config::{DataConfig, FeatureMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFeatures {
    Vector(DenseMatrix),
    Grid(PatchGrid),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub features: SampleFeatures,
    pub age: u32,
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: u32,
    pub seed: u64,
    pub config: DataConfig,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// Counts per group for `total` samples under the largest-remainder rule;
/// equal remainders go to the lower group id.
pub fn largest_remainder_counts(total: usize, proportions: &[f64; GROUP_COUNT]) -> Result<[usize; GROUP_COUNT]> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts = [0usize; GROUP_COUNT];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..GROUP_COUNT).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &g in order.iter().take(total.saturating_sub(assigned)) {
        counts[g] += 1;
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup(g));
    }
    Ok(counts)
}

/// Inclusive age range of each group clipped to `min_age..=max_age`.
pub fn group_age_ranges(min_age: u32, max_age: u32) -> Result<[(u32, u32); GROUP_COUNT]> {
    let starts = AgeGroups::default().starts;
    let mut out = [(0, 0); GROUP_COUNT];
    for g in 0..GROUP_COUNT {
        let lo = if g == 0 { 0 } else { starts[g - 1] };
        let hi = if g + 1 < GROUP_COUNT { starts[g] - 1 } else { u32::MAX };
        let (lo, hi) = (lo.max(min_age), hi.min(max_age));
        if lo > hi {
            return Err(Error::Config(format!("age range {min_age}..={max_age} leaves group {g} empty")));
        }
        out[g] = (lo, hi);
    }
    Ok(out)
}

/// Fixed geometry shared by every sample of one dataset.
struct Layout {
    centers: Vec<Vec<f64>>,
    age_dirs: Vec<Vec<f64>>,
    trend: Vec<f64>,
    node_offsets: DenseMatrix,
    decoder: Option<DenseMatrix>,
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl Layout {
    fn draw<R: Rng + ?Sized>(config: &DataConfig, nodes: usize, rng: &mut R) -> Self {
        let d = config.dim;
        let centers = (0..GROUP_COUNT)
            .map(|_| unit_vector(d, rng).into_iter().map(|x| x * config.separation).collect())
            .collect();
        let age_dirs = (0..GROUP_COUNT).map(|_| unit_vector(d, rng)).collect();
        let trend = unit_vector(d, rng);
        let node_offsets = DenseMatrix::random_normal(nodes, d, 0.5, rng);
        let decoder = match config.mode {
            FeatureMode::Vector => None,
            FeatureMode::Grid => {
                let per = config.patch_size * config.patch_size * PatchGrid::CHANNELS;
                Some(DenseMatrix::random_normal(d, per, 1.0 / (d as f64).sqrt(), rng))
            }
        };
        Self {
            centers,
            age_dirs,
            trend,
            node_offsets,
            decoder,
        }
    }

    fn nodes<R: Rng + ?Sized>(&self, config: &DataConfig, age: u32, group: usize, range: (u32, u32), rng: &mut R) -> DenseMatrix {
        let (lo, hi) = range;
        let within = (f64::from(age - lo) + 0.5) / f64::from(hi - lo + 1) - 0.5;
        let across = f64::from(age - config.min_age) / f64::from(config.max_age - config.min_age) - 0.5;
        let mut x = self.node_offsets.clone();
        for r in 0..x.rows() {
            for (c, v) in x.row_mut(r).iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(rng);
                *v += self.centers[group][c]
                    + config.age_gradient * (within * self.age_dirs[group][c] + across * self.trend[c])
                    + config.noise * noise;
            }
        }
        x
    }

    fn render(&self, config: &DataConfig, nodes: &DenseMatrix) -> Result<PatchGrid> {
        let decoder = self.decoder.as_ref().expect("grid layout has a decoder");
        let patches = nodes.matmul(decoder)?;
        let (side, p) = (config.grid_size, config.patch_size);
        let across = side / p;
        let mut pixels = vec![0.0; side * side * PatchGrid::CHANNELS];
        for patch in 0..patches.rows() {
            let (py, px) = (patch / across, patch % across);
            let mut i = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..PatchGrid::CHANNELS {
                        let y = py * p + dy;
                        let x = px * p + dx;
                        pixels[(y * side + x) * PatchGrid::CHANNELS + c] = sigmoid(patches.get(patch, i));
                        i += 1;
                    }
                }
            }
        }
        PatchGrid::new(side, side, pixels)
    }
}

fn split<R: Rng + ?Sized>(
    config: &DataConfig,
    layout: &Layout,
    total: usize,
    proportions: &[f64; GROUP_COUNT],
    rng: &mut R,
) -> Result<Vec<SyntheticSample>> {
    let counts = largest_remainder_counts(total, proportions)?;
    let ranges = group_age_ranges(config.min_age, config.max_age)?;
    let mut out = Vec::with_capacity(total);
    for g in 0..GROUP_COUNT {
        let (lo, hi) = ranges[g];
        for _ in 0..counts[g] {
            let age = rng.random_range(lo..=hi);
            let nodes = layout.nodes(config, age, g, ranges[g], rng);
            let features = match config.mode {
                FeatureMode::Vector => SampleFeatures::Vector(nodes),
                FeatureMode::Grid => SampleFeatures::Grid(layout.render(config, &nodes)?),
            };
            out.push(SyntheticSample { features, age, group: g });
        }
    }
    // interleave groups so batches see the natural mix
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    Ok(out)
}

pub const DATASET_SCHEMA: u32 = 1;

/// Draws train and test splits with exact per-group counts.
pub fn generate_synthetic_dataset<R: Rng + ?Sized>(config: &DataConfig, seed: u64, rng: &mut R) -> Result<Dataset> {
    let nodes = match config.mode {
        FeatureMode::Vector => config.nodes,
        FeatureMode::Grid => (config.grid_size / config.patch_size).pow(2),
    };
    let layout = Layout::draw(config, nodes, rng);
    let train = split(config, &layout, config.train_samples, &config.proportions, rng)?;
    let test = split(config, &layout, config.test_samples, &config.test_proportions, rng)?;
    Ok(Dataset {
        schema: DATASET_SCHEMA,
        seed,
        config: config.clone(),
        train,
        test,
    })
}

impl Dataset {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let data: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "dataset",
            detail: e.to_string(),
        })?;
        data.check_groups()?;
        Ok(data)
    }

    /// Hex SHA-256 of the serialized dataset.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_json().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every group id must match its age label.
    pub fn check_groups(&self) -> Result<()> {
        for (i, s) in self.train.iter().chain(&self.test).enumerate() {
            let g = group_of_age(f64::from(s.age))?;
            if g != s.group {
                return Err(Error::Format {
                    what: "dataset",
                    detail: format!("sample {i} has age {} but group {}", s.age, s.group),
                });
            }
        }
        Ok(())
    }

    pub fn group_counts(samples: &[SyntheticSample]) -> [usize; GROUP_COUNT] {
        let mut c = [0; GROUP_COUNT];
        for s in samples {
            c[s.group] += 1;
        }
        c
    }
}

/// A sample ready for the network: node input and its k-NN graph.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: DenseMatrix,
    pub graph: PatchGraph,
    pub age: u32,
    pub group: usize,
}

pub fn prepare(samples: &[SyntheticSample], config: &DataConfig) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let input = match &s.features {
                SampleFeatures::Vector(x) => x.clone(),
                SampleFeatures::Grid(g) => g.patchify(config.patch_size)?,
            };
            let graph = knn_graph(&input, config.knn)?;
            Ok(Prepared {
                input,
                graph,
                age: s.age,
                group: s.group,
            })
        })
        .collect()
}
