//! Enhanced multi-hop attention graph convolution.
//!
//! One layer runs
//!
//! 1. `Ĥ = LN(H)`, split column-wise across heads;
//! 2. per head, edge attention `A` and adaptive-decay diffusion
//!    `Σ_k δ_k Aᵏ Ĥ_i` with `δ_k = sigmoid(ω_k)`;
//! 3. head concatenation mixed by `W_h` giving the message `M`;
//! 4. DropMessage on `M` (training only) and the residual `H + M̃`;
//! 5. the initial residual `+ H⁽⁰⁾` and a LeakyReLU feed-forward sublayer
//!    with its own residual.
//!
//! The face embedding is the mean of the final node states.

pub mod attention;
pub mod power;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, ParamStore, Parameter, Session, Var, LEAKY_SLOPE};
use crate::patch_graph::PatchGraph;

pub use attention::{edge_attention, multi_hop_diffuse, power_diffuse, HeadKeys};
pub use power::{power_iterate, power_iterate_with, row_normalize, PowerVariant, DEFAULT_THETA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Maximum hop count `K`.
    pub hops: usize,
    pub heads: usize,
    pub layers: usize,
    pub drop_ratio: f64,
    pub use_power_iteration: bool,
    pub power_iters: usize,
    /// Contraction applied to the attention matrix on the power path.
    pub power_theta: f64,
    /// Feed-forward hidden width as a multiple of the model width.
    pub ffn_mult: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            hops: 4,
            heads: 2,
            layers: 2,
            drop_ratio: 0.1,
            use_power_iteration: false,
            power_iters: 8,
            power_theta: DEFAULT_THETA,
            ffn_mult: 2,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("at least one attention head is required".into()));
        }
        if !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return Err(Error::Config(format!("drop ratio {} outside [0, 1)", self.drop_ratio)));
        }
        if self.use_power_iteration && self.power_iters == 0 {
            return Err(Error::Config("power iteration needs at least one iteration".into()));
        }
        if !(self.power_theta > 0.0 && self.power_theta < 1.0) {
            return Err(Error::Config(format!("power theta {} outside (0, 1)", self.power_theta)));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter paths of one layer.
#[derive(Clone, Debug)]
pub struct LayerKeys {
    pub ln_gain: String,
    pub ln_bias: String,
    pub heads: Vec<HeadKeys>,
    /// `ω_k`, `1 x (K+1)`, shared by all heads.
    pub decay: String,
    pub mix: String,
    pub ffn_ln_gain: String,
    pub ffn_ln_bias: String,
    pub ffn_w1: String,
    pub ffn_w2: String,
}

impl LayerKeys {
    pub fn new(prefix: &str, heads: usize) -> Self {
        Self {
            ln_gain: format!("{prefix}.ln.gain"),
            ln_bias: format!("{prefix}.ln.bias"),
            heads: (0..heads).map(|i| HeadKeys::new(&format!("{prefix}.head{i}"))).collect(),
            decay: format!("{prefix}.decay"),
            mix: format!("{prefix}.mix"),
            ffn_ln_gain: format!("{prefix}.ffn.ln.gain"),
            ffn_ln_bias: format!("{prefix}.ffn.ln.bias"),
            ffn_w1: format!("{prefix}.ffn.w1"),
            ffn_w2: format!("{prefix}.ffn.w2"),
        }
    }
}

/// The layer stack: configuration plus the parameter paths it reads.
#[derive(Clone, Debug)]
pub struct Emagcn {
    pub config: DiffusionConfig,
    pub dim: usize,
    pub layers: Vec<LayerKeys>,
}

impl Emagcn {
    pub fn new(prefix: &str, dim: usize, config: DiffusionConfig) -> Result<Self> {
        config.validate(dim)?;
        let layers = (0..config.layers)
            .map(|l| LayerKeys::new(&format!("{prefix}.layer{l}"), config.heads))
            .collect();
        Ok(Self { config, dim, layers })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.config.heads
    }

    /// Inserts freshly initialized parameters for every layer.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.dim;
        let dh = self.head_dim();
        let hidden = d * self.config.ffn_mult;
        let proj_std = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            store.insert(&layer.ln_gain, Parameter::new(DenseMatrix::ones(1, d)));
            store.insert(&layer.ln_bias, Parameter::new(DenseMatrix::zeros(1, d)));
            for head in &layer.heads {
                store.insert(&head.w_src, Parameter::new(DenseMatrix::random_normal(dh, dh, proj_std, rng)));
                store.insert(&head.w_dst, Parameter::new(DenseMatrix::random_normal(dh, dh, proj_std, rng)));
                store.insert(&head.a_src, Parameter::new(DenseMatrix::random_normal(dh, 1, proj_std, rng)));
                store.insert(&head.a_dst, Parameter::new(DenseMatrix::random_normal(dh, 1, proj_std, rng)));
            }
            store.insert(&layer.decay, Parameter::new(DenseMatrix::zeros(1, self.config.hops + 1)));
            let mix = DenseMatrix::identity(d).add(&DenseMatrix::random_normal(d, d, 0.1 / (d as f64).sqrt(), rng));
            store.insert(&layer.mix, Parameter::new(mix.expect("square mix")));
            store.insert(&layer.ffn_ln_gain, Parameter::new(DenseMatrix::ones(1, d)));
            store.insert(&layer.ffn_ln_bias, Parameter::new(DenseMatrix::zeros(1, d)));
            store.insert(
                &layer.ffn_w1,
                Parameter::new(DenseMatrix::random_normal(d, hidden, 1.0 / (d as f64).sqrt(), rng)),
            );
            store.insert(
                &layer.ffn_w2,
                Parameter::new(DenseMatrix::random_normal(hidden, d, 0.5 / (hidden as f64).sqrt(), rng)),
            );
        }
    }

    /// Decay factors `δ_k = sigmoid(ω_k)` of a layer as a `1 x (K+1)` node.
    pub fn decay(&self, s: &mut Session<'_>, layer: usize) -> Result<Var> {
        let omega = s.param(&self.layers[layer].decay)?;
        Ok(s.tape.sigmoid(omega))
    }

    /// `(‖_i head_i) W_h` over `Ĥ = LN(H)`.
    pub fn multi_head_diffusion(&self, s: &mut Session<'_>, h: Var, graph: &PatchGraph, layer: usize) -> Result<Var> {
        let keys = &self.layers[layer];
        let (n, d) = s.value(h).shape();
        if d != self.dim || n != graph.node_count() {
            return Err(Error::Shape(format!(
                "node states {:?} for a {}-node graph of width {}",
                (n, d),
                graph.node_count(),
                self.dim
            )));
        }
        let gain = s.param(&keys.ln_gain)?;
        let bias = s.param(&keys.ln_bias)?;
        let normed = s.tape.layer_norm(h, gain, bias)?;
        let decay = self.decay(s, layer)?;
        let dh = self.head_dim();
        let mut heads = Vec::with_capacity(keys.heads.len());
        for (i, head) in keys.heads.iter().enumerate() {
            let slice = s.tape.col_slice(normed, i * dh, dh)?;
            let att = edge_attention(s, slice, &graph.adjacency, head)?;
            let out = if self.config.use_power_iteration {
                power_diffuse(s, att, slice, decay, self.config.power_theta, self.config.power_iters)?
            } else {
                multi_hop_diffuse(s, att, slice, decay, self.config.hops)?
            };
            heads.push(out);
        }
        let cat = s.tape.hcat(&heads)?;
        let mix = s.param(&keys.mix)?;
        s.tape.matmul(cat, mix)
    }

    /// `LeakyReLU(LN(H̃) W_1) W_2 + H̃` with `H̃ = updated + initial`.
    pub fn ffn_block(&self, s: &mut Session<'_>, updated: Var, initial: Var, layer: usize) -> Result<Var> {
        let keys = &self.layers[layer];
        let residual = s.tape.add(updated, initial)?;
        let gain = s.param(&keys.ffn_ln_gain)?;
        let bias = s.param(&keys.ffn_ln_bias)?;
        let w1 = s.param(&keys.ffn_w1)?;
        let w2 = s.param(&keys.ffn_w2)?;
        let t = &mut s.tape;
        let normed = t.layer_norm(residual, gain, bias)?;
        let hidden = t.matmul(normed, w1)?;
        let hidden = t.leaky_relu(hidden, LEAKY_SLOPE);
        let out = t.matmul(hidden, w2)?;
        t.add(out, residual)
    }

    /// One full layer.
    pub fn layer<R: Rng + ?Sized>(
        &self,
        s: &mut Session<'_>,
        h: Var,
        initial: Var,
        graph: &PatchGraph,
        layer: usize,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let message = self.multi_head_diffusion(s, h, graph, layer)?;
        let dropped = if training {
            drop_message(s, message, self.config.drop_ratio, rng)?
        } else {
            message
        };
        let updated = update_nodes(s, h, dropped)?;
        self.ffn_block(s, updated, initial, layer)
    }

    /// Final node states after every layer.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        s: &mut Session<'_>,
        input: Var,
        graph: &PatchGraph,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let mut h = input;
        for l in 0..self.layers.len() {
            h = self.layer(s, h, input, graph, l, rng, training)?;
        }
        Ok(h)
    }

    /// Mean-pooled face embedding, `1 x dim`, from the graph's own features.
    pub fn forward<R: Rng + ?Sized>(&self, s: &mut Session<'_>, graph: &PatchGraph, rng: &mut R, training: bool) -> Result<Var> {
        let input = s.constant(graph.features.clone());
        self.forward_from(s, input, graph, rng, training)
    }

    /// As [`Emagcn::forward`] with node features supplied as a tape node.
    pub fn forward_from<R: Rng + ?Sized>(
        &self,
        s: &mut Session<'_>,
        input: Var,
        graph: &PatchGraph,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let nodes = self.encode(s, input, graph, rng, training)?;
        Ok(s.tape.mean_rows(nodes))
    }
}

/// Inverted-dropout mask with entries `ε / (1 - ϱ)`, `ε ~ Bernoulli(1 - ϱ)`.
pub fn drop_mask<R: Rng + ?Sized>(rows: usize, cols: usize, ratio: f64, rng: &mut R) -> DenseMatrix {
    let keep = 1.0 - ratio;
    let scale = 1.0 / keep;
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("mask buffer has rows * cols entries")
}

/// Applies a draw of [`drop_mask`] to a message matrix. `ϱ = 0` returns the
/// input unchanged.
pub fn drop_message_matrix<R: Rng + ?Sized>(message: &DenseMatrix, ratio: f64, rng: &mut R) -> Result<DenseMatrix> {
    check_ratio(ratio)?;
    if ratio == 0.0 {
        return Ok(message.clone());
    }
    message.hadamard(&drop_mask(message.rows(), message.cols(), ratio, rng))
}

/// DropMessage on a tape node.
pub fn drop_message<R: Rng + ?Sized>(s: &mut Session<'_>, message: Var, ratio: f64, rng: &mut R) -> Result<Var> {
    check_ratio(ratio)?;
    if ratio == 0.0 {
        return Ok(message);
    }
    let (r, c) = s.value(message).shape();
    let mask = s.constant(drop_mask(r, c, ratio, rng));
    s.tape.mul(message, mask)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("drop ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// `h_i + M̃_i` for every node.
pub fn update_nodes(s: &mut Session<'_>, h: Var, message: Var) -> Result<Var> {
    s.tape.add(h, message)
}
