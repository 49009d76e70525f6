//! Age groups, the cosine classifier head and the group-aware margin
//! losses, plus softmax-expectation age regression.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, ParamStore, Parameter, Session, Tape, Var};

pub const GROUP_COUNT: usize = 4;
/// The head class whose margin stays fixed.
pub const ANCHOR_GROUP: usize = 2;
pub const GROUP_NAMES: [&str; GROUP_COUNT] = ["children", "teenager", "adult", "senior"];

/// First age of each group after children: teenager 13, adult 18, senior 66.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeGroups {
    pub starts: [u32; GROUP_COUNT - 1],
}

impl Default for AgeGroups {
    fn default() -> Self {
        Self { starts: [13, 18, 66] }
    }
}

impl AgeGroups {
    pub fn group_of(&self, age: f64) -> Result<usize> {
        if !(age >= 0.0) {
            return Err(Error::InvalidArgument(format!("age {age} is negative or NaN")));
        }
        let years = age.floor();
        Ok(self.starts.iter().take_while(|&&s| years >= s as f64).count())
    }
}

/// Group id of an age in years under the default boundaries.
pub fn group_of_age(age: f64) -> Result<usize> {
    AgeGroups::default().group_of(age)
}

/// Cosine classifier with one weight row per integer age in
/// `min_age..=max_age`. Weights are stored raw and normalized on use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub key: String,
    pub min_age: u32,
    pub max_age: u32,
    pub dim: usize,
}

impl ClassifierHead {
    pub fn new(prefix: &str, min_age: u32, max_age: u32, dim: usize) -> Result<Self> {
        if max_age < min_age {
            return Err(Error::Config(format!("age range {min_age}..={max_age} is empty")));
        }
        Ok(Self {
            key: format!("{prefix}.weight"),
            min_age,
            max_age,
            dim,
        })
    }

    pub fn classes(&self) -> usize {
        (self.max_age - self.min_age + 1) as usize
    }

    /// Age value of each class, in class order.
    pub fn ages(&self) -> Vec<f64> {
        (self.min_age..=self.max_age).map(f64::from).collect()
    }

    pub fn class_of(&self, age: u32) -> Result<usize> {
        if age < self.min_age || age > self.max_age {
            return Err(Error::InvalidArgument(format!(
                "age {age} outside classifier range {}..={}",
                self.min_age, self.max_age
            )));
        }
        Ok((age - self.min_age) as usize)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(&self.key, Parameter::new(DenseMatrix::random_normal(self.classes(), self.dim, 1.0, rng)));
    }

    /// `cos θ_j` between each feature row and each class weight, `B x C`.
    pub fn cosines(&self, s: &mut Session<'_>, features: Var) -> Result<Var> {
        let w = s.param(&self.key)?;
        let t = &mut s.tape;
        let f = t.normalize_rows(features);
        let w = t.normalize_rows(w);
        let wt = t.transpose(w);
        t.matmul(f, wt)
    }

    /// Angles `θ_j ∈ [0, π]`.
    pub fn angles(&self, s: &mut Session<'_>, features: Var) -> Result<Var> {
        let c = self.cosines(s, features)?;
        Ok(s.tape.acos(c))
    }
}

/// Parameter paths of the per-group quadratic margin `(a, h, k)`, each a
/// `1 x 4` row indexed by group id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginKeys {
    pub a: String,
    pub h: String,
    pub k: String,
}

impl MarginKeys {
    pub fn new(prefix: &str) -> Self {
        Self {
            a: format!("{prefix}.a"),
            h: format!("{prefix}.h"),
            k: format!("{prefix}.k"),
        }
    }
}

/// Scale and the current per-group margins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMarginParams {
    pub scale: f64,
    pub margins: [f64; GROUP_COUNT],
}

impl Default for GroupMarginParams {
    fn default() -> Self {
        Self {
            scale: 16.0,
            margins: [0.4; GROUP_COUNT],
        }
    }
}

impl GroupMarginParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        if self.margins.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("margins must be finite".into()));
        }
        Ok(())
    }

    /// Inserts `a = -s/2`, `k = s` (trainable) and `h = m` (held fixed;
    /// the margin agent sets it).
    pub fn init_params(&self, keys: &MarginKeys, store: &mut ParamStore) {
        let s = self.scale;
        store.insert(&keys.a, Parameter::new(DenseMatrix::filled(1, GROUP_COUNT, -s / 2.0)));
        store.insert(&keys.k, Parameter::new(DenseMatrix::filled(1, GROUP_COUNT, s)));
        self.write_margins(keys, store);
    }

    /// Copies `margins` into the vertex row `h`, keeping its grad flag.
    pub fn write_margins(&self, keys: &MarginKeys, store: &mut ParamStore) {
        let value = DenseMatrix::row_vector(&self.margins);
        match store.get_mut(&keys.h) {
            Ok(p) => p.value = value,
            Err(_) => store.insert(&keys.h, Parameter::frozen(value)),
        }
    }
}

/// Group-aware margin loss with group ids given directly.
///
/// The target logit is `a_g (θ_y - h_g)² + k_g`; every other class keeps
/// `s cos θ_j`. Returns mean cross-entropy over the batch.
pub fn dgm_loss_grouped(
    s: &mut Session<'_>,
    features: Var,
    classes: &[usize],
    groups: &[usize],
    head: &ClassifierHead,
    keys: &MarginKeys,
    scale: f64,
) -> Result<Var> {
    if classes.len() != groups.len() || classes.len() != s.value(features).rows() {
        return Err(Error::Shape(format!(
            "{} feature rows, {} classes, {} groups",
            s.value(features).rows(),
            classes.len(),
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().find(|&&g| g >= GROUP_COUNT) {
        return Err(Error::InvalidArgument(format!("group id {g}")));
    }
    let a = s.param(&keys.a)?;
    let h = s.param(&keys.h)?;
    let k = s.param(&keys.k)?;
    let cos = head.cosines(s, features)?;
    let t = &mut s.tape;
    let logits = t.scale(cos, scale);
    let cos_y = t.pick_per_row(cos, classes)?;
    let theta_y = t.acos(cos_y);
    let (ab, hb, kb) = (t.gather(a, groups)?, t.gather(h, groups)?, t.gather(k, groups)?);
    let diff = t.sub(theta_y, hb)?;
    let sq = t.square(diff);
    let quad = t.mul(ab, sq)?;
    let target = t.add(quad, kb)?;
    if let Some(i) = t.value(target).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("target exponent a_g(θ_y - h_g)² + k_g of sample {i}"),
        });
    }
    let logits = t.replace_per_row(logits, classes, target)?;
    t.cross_entropy(logits, classes)
}

/// [`dgm_loss_grouped`] with groups and classes derived from integer ages.
pub fn dgm_loss(
    s: &mut Session<'_>,
    features: Var,
    ages: &[u32],
    head: &ClassifierHead,
    keys: &MarginKeys,
    scale: f64,
) -> Result<Var> {
    let classes = ages.iter().map(|&a| head.class_of(a)).collect::<Result<Vec<_>>>()?;
    let groups = ages.iter().map(|&a| group_of_age(f64::from(a))).collect::<Result<Vec<_>>>()?;
    dgm_loss_grouped(s, features, &classes, &groups, head, keys, scale)
}

/// Baseline margin-softmax target logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginVariant {
    /// `s cos θ`
    Softmax,
    /// `s (cos θ - m)`
    CosMargin,
    /// `s cos(min(θ + m, π))`
    ArcMargin,
}

impl FromStr for MarginVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "cos-margin" => Ok(Self::CosMargin),
            "arc-margin" => Ok(Self::ArcMargin),
            other => Err(Error::InvalidArgument(format!("unknown margin variant `{other}`"))),
        }
    }
}

impl fmt::Display for MarginVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::CosMargin => "cos-margin",
            Self::ArcMargin => "arc-margin",
        })
    }
}

pub fn unified_margin_loss(
    s: &mut Session<'_>,
    features: Var,
    classes: &[usize],
    head: &ClassifierHead,
    margin: f64,
    scale: f64,
    variant: MarginVariant,
) -> Result<Var> {
    let cos = head.cosines(s, features)?;
    let t = &mut s.tape;
    let logits = t.scale(cos, scale);
    let cos_y = t.pick_per_row(cos, classes)?;
    let target = match variant {
        MarginVariant::Softmax => t.scale(cos_y, scale),
        MarginVariant::CosMargin => {
            let shifted = t.add_scalar(cos_y, -margin);
            t.scale(shifted, scale)
        }
        MarginVariant::ArcMargin => {
            let theta = t.acos(cos_y);
            let shifted = t.add_scalar(theta, margin);
            let clamped = t.min_const(shifted, std::f64::consts::PI);
            let c = t.cos(clamped);
            t.scale(c, scale)
        }
    };
    let logits = t.replace_per_row(logits, classes, target)?;
    t.cross_entropy(logits, classes)
}

/// `Σ_i y_i softmax(logits)_i` for one sample.
pub fn predict_age_expectation(logits: &[f64], ages: &[f64]) -> Result<f64> {
    if logits.is_empty() || logits.len() != ages.len() {
        return Err(Error::Shape(format!("{} logits for {} age labels", logits.len(), ages.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(weights.iter().zip(ages).map(|(w, a)| w / z * a).sum())
}

/// Expected age per row of `logits` (`B x C`), as a `B x 1` column.
pub fn expected_ages(t: &mut Tape, logits: Var, ages: &[f64]) -> Result<Var> {
    let p = t.row_softmax(logits, None)?;
    let col = t.constant(DenseMatrix::col_vector(ages));
    t.matmul(p, col)
}

/// Mean absolute error between expected ages and labels, on the tape.
pub fn expectation_mae(t: &mut Tape, logits: Var, ages: &[f64], labels: &[f64]) -> Result<Var> {
    let pred = expected_ages(t, logits, ages)?;
    let y = t.constant(DenseMatrix::col_vector(labels));
    let diff = t.sub(pred, y)?;
    let abs = t.abs(diff);
    Ok(t.mean(abs))
}

/// `λ ce + (1 - λ) mae`.
pub fn joint_loss(ce: f64, mae: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * ce + (1.0 - lambda) * mae)
}

pub fn joint_loss_on_tape(t: &mut Tape, ce: Var, mae: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = t.scale(ce, lambda);
    let b = t.scale(mae, 1.0 - lambda);
    t.add(a, b)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("λ = {lambda} outside [0, 1]")));
    }
    Ok(())
}
