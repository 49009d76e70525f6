//! The age network: optional patch embedding, EMAGCN, a linear neck and
//! the cosine classifier with group-aware margins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::emagcn::Emagcn;
use crate::error::{Error, Result};
use crate::group_margin::{
    dgm_loss_grouped, expectation_mae, joint_loss_on_tape, predict_age_expectation, ClassifierHead, GroupMarginParams,
    MarginKeys,
};
use crate::numerics::{DenseMatrix, ParamStore, Parameter, Session, Var};
use crate::patch_graph::PatchGrid;

use super::config::{FeatureMode, RunConfig};
use super::dataset::Prepared;

pub const NECK_KEY: &str = "neck.weight";
pub const EMBED_WEIGHT_KEY: &str = "embed.weight";
pub const EMBED_BIAS_KEY: &str = "embed.bias";

#[derive(Clone, Debug)]
pub struct AgeModel {
    pub extractor: Emagcn,
    pub head: ClassifierHead,
    pub margin_keys: MarginKeys,
    pub scale: f64,
    pub lambda: f64,
    /// Input width of the patch embedding in grid mode.
    pub patch_width: Option<usize>,
}

impl AgeModel {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let d = config.data.dim;
        let patch_width = match config.data.mode {
            FeatureMode::Vector => None,
            FeatureMode::Grid => Some(config.data.patch_size * config.data.patch_size * PatchGrid::CHANNELS),
        };
        Ok(Self {
            extractor: Emagcn::new("emagcn", d, config.model.diffusion.clone())?,
            head: ClassifierHead::new("head", config.data.min_age, config.data.max_age, d)?,
            margin_keys: MarginKeys::new("margin"),
            scale: config.model.margins.scale,
            lambda: config.model.lambda,
            patch_width,
        })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, margins: &GroupMarginParams, rng: &mut R) -> ParamStore {
        let d = self.head.dim;
        let mut store = ParamStore::new();
        if let Some(w) = self.patch_width {
            store.insert(EMBED_WEIGHT_KEY, Parameter::new(DenseMatrix::random_normal(w, d, 1.0 / (w as f64).sqrt(), rng)));
            store.insert(EMBED_BIAS_KEY, Parameter::new(DenseMatrix::zeros(1, d)));
        }
        self.extractor.init_params(&mut store, rng);
        store.insert(NECK_KEY, Parameter::new(DenseMatrix::identity(d)));
        self.head.init_params(&mut store, rng);
        margins.init_params(&self.margin_keys, &mut store);
        store
    }

    fn input(&self, s: &mut Session<'_>, sample: &Prepared) -> Result<Var> {
        let x = s.constant(sample.input.clone());
        if self.patch_width.is_none() {
            return Ok(x);
        }
        let w = s.param(EMBED_WEIGHT_KEY)?;
        let b = s.param(EMBED_BIAS_KEY)?;
        let xw = s.tape.matmul(x, w)?;
        s.tape.add_row(xw, b)
    }

    /// Pooled extractor output for a batch, `B x d`.
    pub fn embed<R: Rng + ?Sized>(&self, s: &mut Session<'_>, batch: &[&Prepared], rng: &mut R, training: bool) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        for sample in batch {
            let x = self.input(s, sample)?;
            rows.push(self.extractor.forward_from(s, x, &sample.graph, rng, training)?);
        }
        s.tape.vcat(&rows)
    }

    pub fn neck(&self, s: &mut Session<'_>, embeddings: Var) -> Result<Var> {
        let w = s.param(NECK_KEY)?;
        s.tape.matmul(embeddings, w)
    }

    /// `λ · dgm + (1 - λ) · expectation MAE` on neck features.
    pub fn loss(&self, s: &mut Session<'_>, features: Var, ages: &[u32], groups: &[usize]) -> Result<Var> {
        let classes = ages.iter().map(|&a| self.head.class_of(a)).collect::<Result<Vec<_>>>()?;
        let ce = dgm_loss_grouped(s, features, &classes, groups, &self.head, &self.margin_keys, self.scale)?;
        let cos = self.head.cosines(s, features)?;
        let logits = s.tape.scale(cos, self.scale);
        let labels: Vec<f64> = ages.iter().map(|&a| f64::from(a)).collect();
        let mae = expectation_mae(&mut s.tape, logits, &self.head.ages(), &labels)?;
        joint_loss_on_tape(&mut s.tape, ce, mae, self.lambda)
    }

    /// Expected age for each row of neck features.
    pub fn predict_from_features(&self, s: &mut Session<'_>, features: Var) -> Result<Vec<f64>> {
        let cos = self.head.cosines(s, features)?;
        let logits = s.tape.scale(cos, self.scale);
        let ages = self.head.ages();
        let l = s.value(logits);
        (0..l.rows()).map(|r| predict_age_expectation(l.row(r), &ages)).collect()
    }

    /// Extractor embeddings of every sample in evaluation mode, `N x d`.
    pub fn embed_all(&self, store: &ParamStore, samples: &[Prepared], chunk: usize) -> Result<DenseMatrix> {
        let mut parts = Vec::new();
        // evaluation never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in samples.chunks(chunk.max(1)) {
            let mut s = Session::new(store);
            let refs: Vec<&Prepared> = c.iter().collect();
            let e = self.embed(&mut s, &refs, &mut rng, false)?;
            parts.push(s.value(e).clone());
        }
        let refs: Vec<&DenseMatrix> = parts.iter().collect();
        DenseMatrix::vcat(&refs)
    }

    /// Test-time age predictions.
    pub fn predict(&self, store: &ParamStore, samples: &[Prepared]) -> Result<Vec<f64>> {
        let e = self.embed_all(store, samples, 64)?;
        let mut s = Session::new(store);
        let x = s.constant(e);
        let f = self.neck(&mut s, x)?;
        let out = self.predict_from_features(&mut s, f)?;
        if let Some(i) = out.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("prediction for sample {i}"),
            });
        }
        Ok(out)
    }
}
