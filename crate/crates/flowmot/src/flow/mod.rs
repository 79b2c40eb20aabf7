//! Conditional normalizing flow over association deltas.
//!
//! The flow maps the 5-vector `[dx, dy, dw, dh, dd]` (or any configured
//! dimensionality) to a standard Gaussian through a stack of blocks, each
//! consisting of a masked autoregressive transform, an actnorm layer and a
//! fixed reversal permutation. The density direction is the parallel pass;
//! sampling inverts it dimension by dimension. Conditioning enters every
//! block through one shared context vector produced by
//! [`crate::context::encode_context_batch`].

mod factorized;
mod train;

pub use factorized::{factorized_log_prob, factorized_train, FactorizedBaseline};
pub use train::{batch_nll, grad_nll, named_tensors, named_tensors_mut, train, EpochStats, GradSet, TrainResult};

use crate::context::{ContextParams, SceneClusterModel, TrackWindow};
use crate::error::{Error, Result};
use crate::types::DeltaFeatures;
use ndarray::{Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Smooth clamp bound for the per-dimension log-scale outputs.
pub const ALPHA_CLAMP: f64 = 7.0;
/// Checkpoint format tag.
pub const CHECKPOINT_VERSION: u32 = 1;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Hyperparameters of the flow and its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub input_dim: usize,
    /// Number of flow blocks L.
    pub blocks: usize,
    /// Hidden units per masked network layer.
    pub hidden: usize,
    /// Context vector dimensionality fed to every block.
    pub ctx_dim: usize,
    /// Hidden size of the gated recurrent history encoder.
    pub encoder_hidden: usize,
    /// Scene embedding width.
    pub emb_dim: usize,
    /// Number of scene clusters |C|.
    pub clusters: usize,
    /// When false the encoder substitutes its learned no-scene embedding for
    /// every sample and the likelihood ignores the cluster id.
    pub scene_conditioning: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of the dataset held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            input_dim: 5,
            blocks: 16,
            hidden: 64,
            ctx_dim: 16,
            encoder_hidden: 32,
            emb_dim: 8,
            clusters: 16,
            scene_conditioning: true,
            learning_rate: 1e-3,
            batch_size: 512,
            epochs: 30,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Per-dimension affine standardization applied ahead of the first block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array2::zeros((1, dim)),
            std: Array2::ones((1, dim)),
        }
    }

    /// Population statistics with a guard that maps degenerate (constant)
    /// dimensions to unit scale.
    pub fn fit(data: &Array2<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let mean = data.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        let mut var = Array2::<f64>::zeros((1, data.ncols()));
        for row in data.rows() {
            for (j, v) in row.iter().enumerate() {
                let d = v - mean[[0, j]];
                var[[0, j]] += d * d;
            }
        }
        var /= n;
        let std = var.mapv(|v| {
            let s = v.sqrt();
            if s < 1e-8 {
                1.0
            } else {
                s
            }
        });
        Self { mean, std }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn invert(&self, u: &Array2<f64>) -> Array2<f64> {
        u * &self.std + &self.mean
    }

    /// Log-determinant contribution of the standardization, per sample.
    pub fn log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// One flow block: masked autoregressive network plus actnorm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MadeBlock {
    /// Actnorm log-scale, stored in log space so the scale stays positive.
    pub log_s: Array2<f64>,
    /// Actnorm bias.
    pub b: Array2<f64>,
    pub w1: Array2<f64>,
    pub v1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w3: Array2<f64>,
    pub v3: Array2<f64>,
    pub b3: Array2<f64>,
}

impl MadeBlock {
    fn zeros(d: usize, h: usize, c: usize) -> Self {
        Self {
            log_s: Array2::zeros((1, d)),
            b: Array2::zeros((1, d)),
            w1: Array2::zeros((d, h)),
            v1: Array2::zeros((c, h)),
            b1: Array2::zeros((1, h)),
            w2: Array2::zeros((h, h)),
            b2: Array2::zeros((1, h)),
            w3: Array2::zeros((h, 2 * d)),
            v3: Array2::zeros((c, 2 * d)),
            b3: Array2::zeros((1, 2 * d)),
        }
    }

    fn init(d: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut block = Self::zeros(d, h, c);
        let fill = |m: &mut Array2<f64>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let s = 1.0 / (fan_in.max(1) as f64).sqrt();
            m.mapv_inplace(|_| rng.random_range(-s..s));
        };
        fill(&mut block.w1, d, rng);
        fill(&mut block.v1, c, rng);
        fill(&mut block.w2, h, rng);
        // w3/v3/b3 stay zero: the block starts as the identity map.
        block
    }
}

/// Autoregressive masks for a `(d, hidden)` masked network.
///
/// Output degree of both the location and log-scale heads for dimension `i`
/// is `i + 1`; a unit of degree `m` reads inputs with degree `<= m` and
/// feeds outputs with degree `> m`, so output `i` depends only on inputs
/// before `i` (plus the unmasked context paths).
pub fn made_masks(d: usize, hidden: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let span = (d - 1).max(1);
    let hdeg: Vec<usize> = (0..hidden).map(|k| (k % span) + 1).collect();
    let m1 = Array2::from_shape_fn((d, hidden), |(j, k)| f64::from(hdeg[k] >= j + 1));
    let m2 = Array2::from_shape_fn((hidden, hidden), |(k, l)| f64::from(hdeg[l] >= hdeg[k]));
    let m3 = Array2::from_shape_fn((hidden, 2 * d), |(k, i)| {
        let out_deg = (i % d) + 1;
        f64::from(out_deg > hdeg[k])
    });
    (m1, m2, m3)
}

pub(crate) fn squash_alpha(raw: f64) -> f64 {
    ALPHA_CLAMP * (raw / ALPHA_CLAMP).tanh()
}

/// The trained model: flow blocks, context encoder, standardization and the
/// scene-cluster model, all of which ship together in one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowModel {
    pub version: u32,
    pub config: FlowConfig,
    pub standardize: Standardization,
    pub blocks: Vec<MadeBlock>,
    pub context: ContextParams,
    pub scene_clusters: Option<SceneClusterModel>,
}

impl FlowModel {
    /// Randomly initialized model; the masked networks start as the identity
    /// transform (zero output heads) so the flow is the identity at step 0.
    pub fn init(config: &FlowConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..config.blocks)
            .map(|_| MadeBlock::init(config.input_dim, config.hidden, config.ctx_dim, &mut rng))
            .collect();
        let context = ContextParams::init(
            config.encoder_hidden,
            config.emb_dim,
            config.clusters,
            config.ctx_dim,
            rng.random(),
        );
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            standardize: Standardization::identity(config.input_dim),
            blocks,
            context,
            scene_clusters: None,
        }
    }

    /// Exact identity flow with a zeroed context encoder; the log-density is
    /// the standard normal for any input. Test instrumentation.
    pub fn identity(config: &FlowConfig) -> Self {
        let mut model = Self::init(config, 0);
        for (_, t) in named_tensors_mut(&mut model) {
            t.fill(0.0);
        }
        model.standardize = Standardization::identity(config.input_dim);
        model
    }

    pub fn dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::CheckpointFormat(format!("serialize: {e}")))?;
        crate::sim::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let model: FlowModel = serde_json::from_str(&raw)
            .map_err(|e| Error::CheckpointFormat(format!("{}: {e}", path.display())))?;
        if model.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported checkpoint version {} (expected {})",
                model.version, CHECKPOINT_VERSION
            )));
        }
        Ok(model)
    }

    /// Cluster id for a scene descriptor, respecting the conditioning flag.
    pub fn scene_for(&self, descriptor: Option<&crate::context::SceneDescriptor>) -> Option<usize> {
        if !self.config.scene_conditioning {
            return None;
        }
        match (&self.scene_clusters, descriptor) {
            (Some(model), Some(d)) => Some(crate::context::assign_cluster(d, model)),
            _ => None,
        }
    }
}

/// One training sample: an input vector plus its conditioning information.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x: Vec<f64>,
    pub window: TrackWindow,
    pub scene: Option<usize>,
}

/// A correct track–detection association paired with its context, the unit
/// of the inlier training set.
#[derive(Debug, Clone)]
pub struct AssociationSample {
    pub deltas: DeltaFeatures,
    pub window: TrackWindow,
    pub scene: Option<usize>,
}

impl AssociationSample {
    pub fn to_train(&self) -> TrainSample {
        TrainSample {
            x: self.deltas.to_array().to_vec(),
            window: self.window,
            scene: self.scene,
        }
    }

    /// Reduced `[|Δp|, |Δwh|, Δd]` representation for the factorized
    /// baseline and its matched joint model.
    pub fn to_train_reduced(&self) -> TrainSample {
        TrainSample {
            x: self.deltas.to_norms().to_vec(),
            window: self.window,
            scene: self.scene,
        }
    }
}

pub(crate) fn made_forward(
    u: &Array2<f64>,
    ctx: &Array2<f64>,
    block: &MadeBlock,
    masks: &(Array2<f64>, Array2<f64>, Array2<f64>),
) -> (Array2<f64>, Array2<f64>) {
    let d = block.log_s.ncols();
    let w1 = &block.w1 * &masks.0;
    let w2 = &block.w2 * &masks.1;
    let w3 = &block.w3 * &masks.2;
    let h1 = (u.dot(&w1) + ctx.dot(&block.v1) + &block.b1).mapv(f64::tanh);
    let h2 = (h1.dot(&w2) + &block.b2).mapv(f64::tanh);
    let out = h2.dot(&w3) + ctx.dot(&block.v3) + &block.b3;
    let mu = out.slice(ndarray::s![.., ..d]).to_owned();
    let alpha = out.slice(ndarray::s![.., d..]).mapv(squash_alpha);
    (mu, alpha)
}

pub(crate) fn reverse_cols(x: &Array2<f64>) -> Array2<f64> {
    x.slice(ndarray::s![.., ..;-1]).to_owned()
}

/// Density-direction pass for a batch: returns the base-space codes and the
/// per-sample log-determinant (standardization included).
///
/// Per block: masked autoregressive inverse, then inverse actnorm, then the
/// reversal permutation. The whole pass is parallel in the batch.
pub fn density_pass_batch(
    x: &Array2<f64>,
    ctx: &Array2<f64>,
    model: &FlowModel,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let d = model.dim();
    debug_assert_eq!(x.ncols(), d);
    let masks = made_masks(d, model.config.hidden);
    let mut u = model.standardize.apply(x);
    let mut log_det = Array1::from_elem(x.nrows(), model.standardize.log_det());

    for (bi, block) in model.blocks.iter().enumerate() {
        let (mu, alpha) = made_forward(&u, ctx, block, &masks);
        let z = (&u - &mu) * alpha.mapv(|a| (-a).exp());
        log_det -= &alpha.sum_axis(Axis(1));
        let s_inv = block.log_s.mapv(|l| (-l).exp());
        let v = (&z - &block.b) * &s_inv;
        log_det -= block.log_s.sum();
        u = reverse_cols(&v);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite activations in flow block {bi}"
            )));
        }
    }
    Ok((u, log_det))
}

/// Density pass for a single vector.
pub fn density_pass(x: &[f64], ctx: &[f64], model: &FlowModel) -> Result<(Vec<f64>, f64)> {
    let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    let cb = Array2::from_shape_vec((1, ctx.len()), ctx.to_vec()).unwrap();
    let (z, ld) = density_pass_batch(&xb, &cb, model)?;
    Ok((z.row(0).to_vec(), ld[0]))
}

/// Exact log-density of a batch of inputs under the flow.
pub fn log_prob_batch(x: &Array2<f64>, ctx: &Array2<f64>, model: &FlowModel) -> Result<Array1<f64>> {
    let d = model.dim() as f64;
    let (z, log_det) = density_pass_batch(x, ctx, model)?;
    let quad = z.mapv(|v| v * v).sum_axis(Axis(1));
    Ok(quad.mapv(|q| -0.5 * q - 0.5 * d * LN_2PI) + &log_det)
}

/// Exact log-density of one input vector.
pub fn log_prob(x: &[f64], ctx: &[f64], model: &FlowModel) -> Result<f64> {
    let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    let cb = Array2::from_shape_vec((1, ctx.len()), ctx.to_vec()).unwrap();
    Ok(log_prob_batch(&xb, &cb, model)?[0])
}

/// Draws one sample by running the blocks in the forward direction; the
/// masked autoregressive inversion is sequential per dimension.
pub fn sample(ctx: &[f64], model: &FlowModel, rng: &mut impl Rng) -> Vec<f64> {
    let d = model.dim();
    let masks = made_masks(d, model.config.hidden);
    let cb = Array2::from_shape_vec((1, ctx.len()), ctx.to_vec()).unwrap();
    let normal = rand_distr::StandardNormal;
    let mut z: Array2<f64> = Array2::from_shape_fn((1, d), |_| rng.sample(normal));

    for block in model.blocks.iter().rev() {
        // Permutation inverse (reversal is an involution), then actnorm.
        let v = reverse_cols(&z);
        let zp = &v * &block.log_s.mapv(f64::exp) + &block.b;
        // Sequential masked-autoregressive forward.
        let mut x = Array2::<f64>::zeros((1, d));
        for i in 0..d {
            let (mu, alpha) = made_forward(&x, &cb, block, &masks);
            x[[0, i]] = zp[[0, i]] * alpha[[0, i]].exp() + mu[[0, i]];
        }
        z = x;
    }
    model.standardize.invert(&z).row(0).to_vec()
}
