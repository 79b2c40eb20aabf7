//! Maximum-likelihood training: tape construction, exact gradients, Adam.

use super::{
    made_forward, made_masks, reverse_cols, FlowModel, Standardization, TrainSample,
    ALPHA_CLAMP, LN_2PI,
};
use crate::autodiff::{Graph, Var};
use crate::context::{encode_context_batch, encode_context_graph, ContextVars, TrackWindow};
use crate::derive_seed;
use crate::error::{Error, Result};
use ndarray::{Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Gradients for every model tensor, aligned with [`named_tensors`] order.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub tensors: Vec<Array2<f64>>,
}

/// Per-epoch mean negative log-likelihoods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

/// Outcome of a training run: the best-validation model and the NLL trace.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: FlowModel,
    pub trace: Vec<EpochStats>,
    pub best_val_nll: f64,
    pub init_val_nll: f64,
}

/// Every trainable tensor with a stable name, blocks first then context.
pub fn named_tensors(m: &FlowModel) -> Vec<(String, &Array2<f64>)> {
    let mut out = Vec::new();
    for (i, b) in m.blocks.iter().enumerate() {
        out.push((format!("block{i}.log_s"), &b.log_s));
        out.push((format!("block{i}.b"), &b.b));
        out.push((format!("block{i}.w1"), &b.w1));
        out.push((format!("block{i}.v1"), &b.v1));
        out.push((format!("block{i}.b1"), &b.b1));
        out.push((format!("block{i}.w2"), &b.w2));
        out.push((format!("block{i}.b2"), &b.b2));
        out.push((format!("block{i}.w3"), &b.w3));
        out.push((format!("block{i}.v3"), &b.v3));
        out.push((format!("block{i}.b3"), &b.b3));
    }
    let c = &m.context;
    for (name, t) in [
        ("wr", &c.wr),
        ("ur", &c.ur),
        ("br", &c.br),
        ("wz", &c.wz),
        ("uz", &c.uz),
        ("bz", &c.bz),
        ("wn", &c.wn),
        ("un", &c.un),
        ("bn", &c.bn),
        ("emb", &c.emb),
        ("no_scene", &c.no_scene),
        ("w_out", &c.w_out),
        ("b_out", &c.b_out),
    ] {
        out.push((format!("context.{name}"), t));
    }
    out
}

/// Mutable twin of [`named_tensors`]; same order.
pub fn named_tensors_mut(m: &mut FlowModel) -> Vec<(String, &mut Array2<f64>)> {
    let mut out: Vec<(String, &mut Array2<f64>)> = Vec::new();
    for (i, b) in m.blocks.iter_mut().enumerate() {
        out.push((format!("block{i}.log_s"), &mut b.log_s));
        out.push((format!("block{i}.b"), &mut b.b));
        out.push((format!("block{i}.w1"), &mut b.w1));
        out.push((format!("block{i}.v1"), &mut b.v1));
        out.push((format!("block{i}.b1"), &mut b.b1));
        out.push((format!("block{i}.w2"), &mut b.w2));
        out.push((format!("block{i}.b2"), &mut b.b2));
        out.push((format!("block{i}.w3"), &mut b.w3));
        out.push((format!("block{i}.v3"), &mut b.v3));
        out.push((format!("block{i}.b3"), &mut b.b3));
    }
    let c = &mut m.context;
    for (name, t) in [
        ("wr", &mut c.wr),
        ("ur", &mut c.ur),
        ("br", &mut c.br),
        ("wz", &mut c.wz),
        ("uz", &mut c.uz),
        ("bz", &mut c.bz),
        ("wn", &mut c.wn),
        ("un", &mut c.un),
        ("bn", &mut c.bn),
        ("emb", &mut c.emb),
        ("no_scene", &mut c.no_scene),
        ("w_out", &mut c.w_out),
        ("b_out", &mut c.b_out),
    ] {
        out.push((format!("context.{name}"), t));
    }
    out
}

fn batch_arrays(samples: &[TrainSample], dim: usize) -> (Array2<f64>, Vec<TrackWindow>, Vec<Option<usize>>) {
    let x = Array2::from_shape_fn((samples.len(), dim), |(i, j)| samples[i].x[j]);
    let windows: Vec<TrackWindow> = samples.iter().map(|s| s.window).collect();
    let scenes: Vec<Option<usize>> = samples.iter().map(|s| s.scene).collect();
    (x, windows, scenes)
}

/// Mean NLL of a sample set under the model, via the non-tape forward path.
pub fn batch_nll(model: &FlowModel, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let (x, windows, scenes) = batch_arrays(samples, model.dim());
    let ctx = encode_context_batch(&windows, &scenes, &model.context);
    let lp = super::log_prob_batch(&x, &ctx, model)?;
    Ok(-lp.mean().unwrap())
}

/// Builds the full NLL tape for one batch. Returns the graph, the scalar
/// loss node and the parameter leaves in [`named_tensors`] order.
fn nll_tape(model: &FlowModel, samples: &[TrainSample]) -> (Graph, Var, Vec<Var>) {
    let d = model.dim();
    let b = samples.len();
    let masks = made_masks(d, model.config.hidden);
    let (x_raw, windows, scenes) = batch_arrays(samples, d);
    let x_std = model.standardize.apply(&x_raw);

    let mut g = Graph::new();

    // Parameter leaves, blocks first then context, matching named_tensors.
    struct BlockVars {
        log_s: Var,
        b: Var,
        w1: Var,
        v1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
        w3: Var,
        v3: Var,
        b3: Var,
    }
    let mut block_vars = Vec::with_capacity(model.blocks.len());
    let mut param_vars = Vec::new();
    for blk in &model.blocks {
        let bv = BlockVars {
            log_s: g.leaf(blk.log_s.clone()),
            b: g.leaf(blk.b.clone()),
            w1: g.leaf(blk.w1.clone()),
            v1: g.leaf(blk.v1.clone()),
            b1: g.leaf(blk.b1.clone()),
            w2: g.leaf(blk.w2.clone()),
            b2: g.leaf(blk.b2.clone()),
            w3: g.leaf(blk.w3.clone()),
            v3: g.leaf(blk.v3.clone()),
            b3: g.leaf(blk.b3.clone()),
        };
        param_vars.extend([
            bv.log_s, bv.b, bv.w1, bv.v1, bv.b1, bv.w2, bv.b2, bv.w3, bv.v3, bv.b3,
        ]);
        block_vars.push(bv);
    }
    let ctx_vars = ContextVars::leaves(&mut g, &model.context);
    param_vars.extend(ctx_vars.all());

    let ctx = encode_context_graph(&mut g, &ctx_vars, &model.context, &windows, &scenes);

    let mut u = g.leaf(x_std);
    // Per-sample log-determinant accumulator (tape part only).
    let mut ld = g.leaf(Array2::zeros((b, 1)));
    let ones_bd = Array2::<f64>::ones((b, d));

    for bv in &block_vars {
        let w1m = g.mul_const(bv.w1, masks.0.clone());
        let xw = g.matmul(u, w1m);
        let cw = g.matmul(ctx, bv.v1);
        let pre1 = g.add(xw, cw);
        let pre1 = g.add_row(pre1, bv.b1);
        let h1 = g.tanh(pre1);

        let w2m = g.mul_const(bv.w2, masks.1.clone());
        let pre2 = g.matmul(h1, w2m);
        let pre2 = g.add_row(pre2, bv.b2);
        let h2 = g.tanh(pre2);

        let w3m = g.mul_const(bv.w3, masks.2.clone());
        let hw = g.matmul(h2, w3m);
        let cv = g.matmul(ctx, bv.v3);
        let out = g.add(hw, cv);
        let out = g.add_row(out, bv.b3);

        let mu = g.slice_cols(out, 0, d);
        let raw_alpha = g.slice_cols(out, d, 2 * d);
        let scaled = g.scale(raw_alpha, 1.0 / ALPHA_CLAMP);
        let squashed = g.tanh(scaled);
        let alpha = g.scale(squashed, ALPHA_CLAMP);

        let diff = g.sub(u, mu);
        let neg_alpha = g.neg(alpha);
        let exp_na = g.exp(neg_alpha);
        let z = g.mul(diff, exp_na);

        let alpha_sum = g.sum_cols(alpha);
        ld = g.sub(ld, alpha_sum);

        // Inverse actnorm: (z - b) / s with per-sample log|det| -= sum log s.
        let neg_b = g.neg(bv.b);
        let zb = g.add_row(z, neg_b);
        let neg_ls = g.neg(bv.log_s);
        let s_inv = g.exp(neg_ls);
        let v = g.mul_row(zb, s_inv);

        let ones = g.leaf(ones_bd.clone());
        let ls_rows = g.mul_row(ones, bv.log_s);
        let ls_sum = g.sum_cols(ls_rows);
        ld = g.sub(ld, ls_sum);

        u = g.reverse_cols(v);
    }

    let z_sq = g.square(u);
    let quad = g.sum_cols(z_sq);
    let half_quad = g.scale(quad, 0.5);
    let nll = g.sub(half_quad, ld);
    // Base-measure constant and the (constant) standardization log-det.
    let constant = 0.5 * d as f64 * LN_2PI - model.standardize.log_det();
    let nll = g.add_scalar(nll, constant);
    let loss = g.mean_all(nll);
    (g, loss, param_vars)
}

/// Exact mean-NLL gradient for a batch, for every parameter tensor.
pub fn grad_nll(model: &FlowModel, samples: &[TrainSample]) -> Result<(f64, GradSet)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let (g, loss, param_vars) = nll_tape(model, samples);
    let loss_value = g.value(loss)[[0, 0]];
    if !loss_value.is_finite() {
        return Err(Error::Numerical("non-finite training loss".into()));
    }
    let all = g.backward(loss);
    let names = named_tensors(model);
    let mut tensors = Vec::with_capacity(param_vars.len());
    for (var, (name, _)) in param_vars.iter().zip(names.iter()) {
        let grad = all[var.index()].clone();
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter group {name}"
            )));
        }
        tensors.push(grad);
    }
    Ok((loss_value, GradSet { tensors }))
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &FlowModel, lr: f64) -> Self {
        let zeros: Vec<Array2<f64>> = named_tensors(model)
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, model: &mut FlowModel, grads: &GradSet) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (i, (_, p)) in named_tensors_mut(model).into_iter().enumerate() {
            let g = &grads.tensors[i];
            self.m[i] = &self.m[i] * Self::BETA1 + &(g * (1.0 - Self::BETA1));
            self.v[i] = &self.v[i] * Self::BETA2 + &(g.mapv(|x| x * x) * (1.0 - Self::BETA2));
            let mhat = &self.m[i] / bc1;
            let vhat = &self.v[i] / bc2;
            let update = mhat / (vhat.mapv(f64::sqrt) + Self::EPS);
            *p -= &(update * self.lr);
        }
    }
}

/// Data-dependent actnorm initialization: run the first batch block by
/// block and set each actnorm so its output has zero mean and unit
/// variance per dimension.
fn actnorm_init(model: &mut FlowModel, samples: &[TrainSample]) {
    let d = model.dim();
    let masks = made_masks(d, model.config.hidden);
    let (x_raw, windows, scenes) = batch_arrays(samples, d);
    let ctx = encode_context_batch(&windows, &scenes, &model.context);
    let mut u = model.standardize.apply(&x_raw);
    let n = u.nrows() as f64;
    for block in &mut model.blocks {
        let (mu, alpha) = made_forward(&u, &ctx, block, &masks);
        let z = (&u - &mu) * alpha.mapv(|a| (-a).exp());
        let mean = z.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        let mut var = Array2::<f64>::zeros((1, d));
        for row in z.rows() {
            for (j, v) in row.iter().enumerate() {
                let diff = v - mean[[0, j]];
                var[[0, j]] += diff * diff;
            }
        }
        var /= n;
        block.b = mean;
        block.log_s = var.mapv(|v| v.sqrt().max(1e-6).ln());
        let v = (&z - &block.b) * &block.log_s.mapv(|l| (-l).exp());
        u = reverse_cols(&v);
    }
}

/// Trains a flow by Adam on the mean batch NLL.
///
/// The dataset is split into train/validation by the config seed, the input
/// standardization is fitted on the training split, actnorm is initialized
/// from the first batch, and the returned model carries the parameters of
/// the best validation epoch (never worse than the initialization).
pub fn train(samples: &[TrainSample], config: &super::FlowConfig) -> Result<TrainResult> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty training dataset".into()));
    }
    if samples.len() < config.batch_size {
        return Err(Error::InvalidInput(format!(
            "dataset of {} samples is smaller than the batch size {}",
            samples.len(),
            config.batch_size
        )));
    }
    if samples.iter().any(|s| s.x.len() != config.input_dim) {
        return Err(Error::InvalidInput(
            "sample dimensionality does not match the flow config".into(),
        ));
    }

    // Scene conditioning off: drop cluster ids before they reach the model.
    let samples: Vec<TrainSample> = samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if !config.scene_conditioning {
                s.scene = None;
            }
            s
        })
        .collect();

    // Fixed validation split.
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "flow-split"));
    idx.shuffle(&mut split_rng);
    let n_val = ((samples.len() as f64 * config.val_fraction).round() as usize)
        .clamp(1, samples.len() - 1);
    let val_idx = &idx[..n_val];
    let train_idx = &idx[n_val..];
    let val_set: Vec<TrainSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let train_set: Vec<TrainSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();

    let mut model = FlowModel::init(config, derive_seed(config.seed, "flow-init"));
    let x_train = Array2::from_shape_fn((train_set.len(), config.input_dim), |(i, j)| {
        train_set[i].x[j]
    });
    model.standardize = Standardization::fit(&x_train);

    // First-batch statistics initialize the actnorm layers.
    let first = &train_set[..config.batch_size.min(train_set.len())];
    actnorm_init(&mut model, first);

    let init_val_nll = batch_nll(&model, &val_set)?;
    let mut best_val_nll = init_val_nll;
    let mut best_model = model.clone();

    let mut adam = Adam::new(&model, config.learning_rate);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("flow-epoch{epoch}")));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = grad_nll(&model, &batch)?;
            adam.step(&mut model, &grads);
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let train_nll = total / count as f64;
        let val_nll = batch_nll(&model, &val_set)?;
        if !train_nll.is_finite() || !val_nll.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite NLL at epoch {epoch}"
            )));
        }
        if val_nll < best_val_nll {
            best_val_nll = val_nll;
            best_model = model.clone();
        }
        trace.push(EpochStats {
            epoch,
            train_nll,
            val_nll,
        });
    }

    Ok(TrainResult {
        model: best_model,
        trace,
        best_val_nll,
        init_val_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::build_window;
    use crate::flow::FlowConfig;
    use approx::assert_relative_eq;

    fn small_config(dim: usize) -> FlowConfig {
        FlowConfig {
            input_dim: dim,
            blocks: 2,
            hidden: 8,
            ctx_dim: 4,
            encoder_hidden: 6,
            emb_dim: 3,
            clusters: 3,
            batch_size: 16,
            epochs: 3,
            seed: 7,
            ..FlowConfig::default()
        }
    }

    fn toy_samples(n: usize, dim: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let hist: Vec<[f64; 5]> = (0..4)
                    .map(|t| {
                        let base = (i % 5) as f64;
                        [
                            base + t as f64,
                            0.5 * t as f64,
                            3.0,
                            4.0,
                            5.0 + 0.1 * t as f64,
                        ]
                    })
                    .collect();
                TrainSample {
                    x: (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
                    window: build_window(&hist).unwrap(),
                    scene: Some(i % 3),
                }
            })
            .collect()
    }

    #[test]
    fn tape_loss_agrees_with_forward_nll() {
        let config = small_config(3);
        let mut model = FlowModel::init(&config, 11);
        for block in &mut model.blocks {
            block.w3.mapv_inplace(|_| 0.1);
            block.log_s.mapv_inplace(|_| 0.05);
        }
        let samples = toy_samples(12, 3, 2);
        let (loss, _) = grad_nll(&model, &samples).unwrap();
        let direct = batch_nll(&model, &samples).unwrap();
        assert_relative_eq!(loss, direct, epsilon = 1e-10);
    }

    #[test]
    fn gradients_match_central_finite_differences_for_every_tensor() {
        let config = small_config(3);
        let mut model = FlowModel::init(&config, 13);
        // Perturb away from the identity so no gradient is trivially zero.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for (_, t) in named_tensors_mut(&mut model) {
            t.mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
        }
        let samples = toy_samples(6, 3, 3);
        let (_, grads) = grad_nll(&model, &samples).unwrap();

        let eps = 1e-5;
        let names: Vec<String> = named_tensors(&model)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for (ti, name) in names.iter().enumerate() {
            let shape = named_tensors(&model)[ti].1.dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut mp = model.clone();
                    named_tensors_mut(&mut mp)[ti].1[[r, c]] += eps;
                    let lp = batch_nll(&mp, &samples).unwrap();
                    let mut mm = model.clone();
                    named_tensors_mut(&mut mm)[ti].1[[r, c]] -= eps;
                    let lm = batch_nll(&mm, &samples).unwrap();
                    let fd = (lp - lm) / (2.0 * eps);
                    let an = grads.tensors[ti][[r, c]];
                    let denom = fd.abs().max(an.abs());
                    let rel = if denom < 1e-10 {
                        0.0
                    } else {
                        (fd - an).abs() / denom.max(1e-6)
                    };
                    assert!(
                        rel < 1e-4,
                        "{name}[{r},{c}]: fd={fd:.8} analytic={an:.8} rel={rel:.2e}"
                    );
                }
            }
        }
    }

    #[test]
    fn symmetric_batch_gives_zero_actnorm_bias_gradient() {
        let config = small_config(5);
        let model = FlowModel::identity(&config);
        let x = vec![0.7, -0.3, 1.1, 0.2, -0.9];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let mk = |x: Vec<f64>| TrainSample {
            x,
            window: TrackWindow::empty(),
            scene: None,
        };
        let (_, grads) = grad_nll(&model, &[mk(x), mk(neg)]).unwrap();
        let names: Vec<String> = named_tensors(&model).into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            if name.ends_with(".b") {
                for v in grads.tensors[i].iter() {
                    assert!(v.abs() < 1e-12, "{name} gradient {v}");
                }
            }
        }
    }

    #[test]
    fn duplicating_the_batch_preserves_the_mean_gradient() {
        let config = small_config(3);
        let model = FlowModel::init(&config, 19);
        let samples = toy_samples(5, 3, 6);
        let mut doubled = samples.clone();
        doubled.extend(samples.clone());
        let (l1, g1) = grad_nll(&model, &samples).unwrap();
        let (l2, g2) = grad_nll(&model, &doubled).unwrap();
        assert_relative_eq!(l1, l2, epsilon = 1e-12);
        for (a, b) in g1.tensors.iter().zip(g2.tensors.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_relative_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn masked_window_steps_have_zero_gradient_effect() {
        // Two sample sets differing only in masked step contents produce
        // identical losses and gradients.
        let config = small_config(3);
        let model = FlowModel::init(&config, 23);
        let mut a = toy_samples(4, 3, 8);
        for s in &mut a {
            s.window = build_window(&[[1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        }
        let mut b = a.clone();
        for s in &mut b {
            for t in 0..crate::context::WINDOW_LEN {
                if !s.window.mask[t] {
                    s.window.steps[t] = [8.0, -8.0, 8.0, -8.0, 8.0];
                }
            }
        }
        let (la, ga) = grad_nll(&model, &a).unwrap();
        let (lb, gb) = grad_nll(&model, &b).unwrap();
        assert_eq!(la, lb);
        for (x, y) in ga.tensors.iter().zip(gb.tensors.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn training_runs_deterministically_and_improves_validation() {
        let mut config = small_config(2);
        config.epochs = 5;
        config.batch_size = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let normal = rand_distr::StandardNormal;
        let samples: Vec<TrainSample> = (0..256)
            .map(|_| {
                let a: f64 = rng.sample(normal);
                let b: f64 = rng.sample(normal);
                TrainSample {
                    x: vec![2.0 * a + 1.0, 0.5 * b - 2.0],
                    window: TrackWindow::empty(),
                    scene: None,
                }
            })
            .collect();
        let r1 = train(&samples, &config).unwrap();
        let r2 = train(&samples, &config).unwrap();
        assert_eq!(r1.trace.len(), config.epochs);
        assert_eq!(
            r1.trace.last().unwrap().val_nll,
            r2.trace.last().unwrap().val_nll
        );
        assert!(r1.best_val_nll <= r1.init_val_nll);
        for e in &r1.trace {
            assert!(e.train_nll.is_finite() && e.val_nll.is_finite());
        }
    }

    #[test]
    fn train_rejects_small_or_empty_datasets() {
        let config = small_config(2);
        assert!(train(&[], &config).is_err());
        let few = toy_samples(4, 2, 1);
        assert!(train(&few, &config).is_err());
    }

    #[test]
    fn standardization_yields_unit_variance_under_identity_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let data = Array2::from_shape_fn((400, 3), |(_, j)| {
            rng.random_range(-1.0..1.0) * (j as f64 + 1.0) * 4.0 + j as f64
        });
        let std = Standardization::fit(&data);
        let z = std.apply(&data);
        for j in 0..3 {
            let col = z.column(j);
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 400.0;
            assert!((0.9..=1.1).contains(&var), "variance {var}");
        }
        // Degenerate dimensions map to exact zeros under the guard.
        let flat = Array2::from_elem((50, 2), 3.25);
        let stdf = Standardization::fit(&flat);
        let zf = stdf.apply(&flat);
        assert!(zf.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn actnorm_init_normalizes_post_activation_stats() {
        let config = small_config(3);
        let mut model = FlowModel::init(&config, 61);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let samples: Vec<TrainSample> = (0..128)
            .map(|_| TrainSample {
                x: vec![
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(2.0..9.0),
                ],
                window: TrackWindow::empty(),
                scene: None,
            })
            .collect();
        let x = Array2::from_shape_fn((samples.len(), 3), |(i, j)| samples[i].x[j]);
        model.standardize = Standardization::fit(&x);
        actnorm_init(&mut model, &samples);

        // Replay the pass and check the post-actnorm statistics per block.
        let masks = made_masks(3, config.hidden);
        let ctx = encode_context_batch(
            &samples.iter().map(|s| s.window).collect::<Vec<_>>(),
            &samples.iter().map(|s| s.scene).collect::<Vec<_>>(),
            &model.context,
        );
        let mut u = model.standardize.apply(&x);
        for block in &model.blocks {
            let (mu, alpha) = made_forward(&u, &ctx, block, &masks);
            let z = (&u - &mu) * alpha.mapv(|a| (-a).exp());
            let v = (&z - &block.b) * &block.log_s.mapv(|l| (-l).exp());
            for j in 0..3 {
                let col = v.column(j);
                let mean = col.mean().unwrap();
                let var =
                    col.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / col.len() as f64;
                assert!(mean.abs() < 1e-9, "post-init mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "post-init variance {var}");
            }
            u = reverse_cols(&v);
        }
    }
}
