//! Conditioning context: track-history windows, scene clustering, and the
//! gated recurrent encoder that turns both into the flow's context vector.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of displacement steps kept per track.
pub const WINDOW_LEN: usize = 8;
/// Features per displacement step: `[dx, dy, dw, dh, dd]`.
pub const WINDOW_FEATURES: usize = 5;

/// Up to [`WINDOW_LEN`] relative displacements between consecutive matched
/// observations, zero-padded at the front with a validity mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackWindow {
    pub steps: [[f64; WINDOW_FEATURES]; WINDOW_LEN],
    pub mask: [bool; WINDOW_LEN],
}

impl TrackWindow {
    /// All-masked window used for newborn tracks with a single observation.
    pub fn empty() -> Self {
        Self {
            steps: [[0.0; WINDOW_FEATURES]; WINDOW_LEN],
            mask: [false; WINDOW_LEN],
        }
    }

    pub fn valid_steps(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Builds the displacement window from a track's matched observation values
/// `[cx, cy, w, h, d]`, oldest first. Consecutive differences of the last up
/// to `WINDOW_LEN + 1` observations, newest at the back.
pub fn build_window(history: &[[f64; WINDOW_FEATURES]]) -> Result<TrackWindow> {
    if history.is_empty() {
        return Err(Error::InvalidInput(
            "cannot build a window from an empty track history".into(),
        ));
    }
    let mut w = TrackWindow::empty();
    let n_steps = (history.len() - 1).min(WINDOW_LEN);
    let tail = &history[history.len() - (n_steps + 1)..];
    for s in 0..n_steps {
        let slot = WINDOW_LEN - n_steps + s;
        for f in 0..WINDOW_FEATURES {
            w.steps[slot][f] = tail[s + 1][f] - tail[s][f];
        }
        w.mask[slot] = true;
    }
    Ok(w)
}

/// Fixed-length vector of scenario features used for scene clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor(pub Vec<f64>);

/// K-means model over z-normalized scene descriptors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneClusterModel {
    /// Centroids in normalized descriptor space, one row per cluster.
    pub centroids: Array2<f64>,
    pub feature_mean: Array1<f64>,
    pub feature_std: Array1<f64>,
}

impl SceneClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    fn normalize(&self, d: &SceneDescriptor) -> Array1<f64> {
        let x = Array1::from_vec(d.0.clone());
        (&x - &self.feature_mean) / &self.feature_std
    }
}

fn sq_dist(a: &Array1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding over z-normalized descriptors.
///
/// Deterministic given the seed; fails if fewer than `k` distinct
/// descriptors are provided. The within-cluster sum of squares is asserted
/// to be non-increasing across iterations.
pub fn kmeans_fit(
    descriptors: &[SceneDescriptor],
    k: usize,
    seed: u64,
) -> Result<SceneClusterModel> {
    if descriptors.is_empty() || k == 0 {
        return Err(Error::InvalidInput("kmeans needs data and k >= 1".into()));
    }
    let dim = descriptors[0].0.len();
    if descriptors.iter().any(|d| d.0.len() != dim) {
        return Err(Error::InvalidInput(
            "scene descriptors must share one dimensionality".into(),
        ));
    }

    let n = descriptors.len();
    let mut mean = Array1::<f64>::zeros(dim);
    for d in descriptors {
        mean += &Array1::from_vec(d.0.clone());
    }
    mean /= n as f64;
    let mut var = Array1::<f64>::zeros(dim);
    for d in descriptors {
        let x = Array1::from_vec(d.0.clone());
        var += &(&x - &mean).mapv(|v| v * v);
    }
    var /= n as f64;
    let std = var.mapv(|v| if v.sqrt() < 1e-12 { 1.0 } else { v.sqrt() });

    let points: Vec<Array1<f64>> = descriptors
        .iter()
        .map(|d| (&Array1::from_vec(d.0.clone()) - &mean) / &std)
        .collect();

    let mut distinct: Vec<&Array1<f64>> = Vec::new();
    for p in &points {
        if !distinct.iter().any(|q| q.iter().eq(p.iter())) {
            distinct.push(p);
        }
    }
    if distinct.len() < k {
        return Err(Error::InvalidInput(format!(
            "kmeans needs at least k={k} distinct descriptors, got {}",
            distinct.len()
        )));
    }

    // k-means++ seeding.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f64>::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points[first]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.row_mut(c).assign(&points[next]);
        for (i, p) in points.iter().enumerate() {
            let dist = sq_dist(p, centroids.row(c));
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut prev_wcss = f64::INFINITY;
    for _iter in 0..100 {
        // Assignment step; ties go to the lowest index.
        let mut wcss = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = sq_dist(p, centroids.row(0));
            for c in 1..k {
                let d = sq_dist(p, centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
            wcss += best_d;
        }
        assert!(
            wcss <= prev_wcss + 1e-9,
            "k-means WCSS increased: {wcss} > {prev_wcss}"
        );
        prev_wcss = wcss;

        // Update step; empty clusters keep their centroid.
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let c = assignment[i];
            let mut row = sums.row_mut(c);
            row += p;
            counts[c] += 1;
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new = &sums.row(c) / counts[c] as f64;
            shift += sq_dist(&new.to_owned(), centroids.row(c)).sqrt();
            centroids.row_mut(c).assign(&new);
        }
        if shift < 1e-6 {
            break;
        }
    }

    Ok(SceneClusterModel {
        centroids,
        feature_mean: mean,
        feature_std: std,
    })
}

/// Index of the nearest centroid in L2; exact ties break to the lower index.
pub fn assign_cluster(descriptor: &SceneDescriptor, model: &SceneClusterModel) -> usize {
    let x = model.normalize(descriptor);
    let mut best = 0usize;
    let mut best_d = sq_dist(&x, model.centroids.row(0));
    for c in 1..model.k() {
        let d = sq_dist(&x, model.centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Gated recurrent encoder weights plus the scene embedding table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextParams {
    pub wr: Array2<f64>,
    pub ur: Array2<f64>,
    pub br: Array2<f64>,
    pub wz: Array2<f64>,
    pub uz: Array2<f64>,
    pub bz: Array2<f64>,
    pub wn: Array2<f64>,
    pub un: Array2<f64>,
    pub bn: Array2<f64>,
    /// Scene embedding table, one row per cluster.
    pub emb: Array2<f64>,
    /// Learned embedding used when scene conditioning is off or unavailable.
    pub no_scene: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

impl ContextParams {
    pub fn init(hidden: usize, emb_dim: usize, clusters: usize, ctx_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize, fan_in: usize| {
            let s = 1.0 / (fan_in.max(1) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-s..s))
        };
        let f = WINDOW_FEATURES;
        Self {
            wr: mat(f, hidden, f),
            ur: mat(hidden, hidden, hidden),
            br: Array2::zeros((1, hidden)),
            wz: mat(f, hidden, f),
            uz: mat(hidden, hidden, hidden),
            bz: Array2::zeros((1, hidden)),
            wn: mat(f, hidden, f),
            un: mat(hidden, hidden, hidden),
            bn: Array2::zeros((1, hidden)),
            emb: mat(clusters, emb_dim, emb_dim),
            no_scene: mat(1, emb_dim, emb_dim),
            w_out: mat(hidden + emb_dim, ctx_dim, hidden + emb_dim),
            b_out: Array2::zeros((1, ctx_dim)),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.ur.nrows()
    }

    pub fn emb_dim(&self) -> usize {
        self.emb.ncols()
    }

    pub fn ctx_dim(&self) -> usize {
        self.w_out.ncols()
    }

    pub fn clusters(&self) -> usize {
        self.emb.nrows()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Encodes a batch of windows into context vectors without building a tape.
///
/// `scenes[i]` is the cluster index for sample `i`, or `None` to use the
/// learned no-scene embedding (newborn/no-conditioning case).
pub fn encode_context_batch(
    windows: &[TrackWindow],
    scenes: &[Option<usize>],
    params: &ContextParams,
) -> Array2<f64> {
    let b = windows.len();
    let hidden = params.hidden_dim();
    let mut h = Array2::<f64>::zeros((b, hidden));

    for t in 0..WINDOW_LEN {
        let x = Array2::from_shape_fn((b, WINDOW_FEATURES), |(i, f)| windows[i].steps[t][f]);
        let r_pre = x.dot(&params.wr) + h.dot(&params.ur) + &params.br;
        let z_pre = x.dot(&params.wz) + h.dot(&params.uz) + &params.bz;
        let r = r_pre.mapv(sigmoid);
        let z = z_pre.mapv(sigmoid);
        let n_pre = x.dot(&params.wn) + (&r * &h).dot(&params.un) + &params.bn;
        let n = n_pre.mapv(f64::tanh);
        let h_new = (1.0 - &z) * &n + &z * &h;
        for i in 0..b {
            if windows[i].mask[t] {
                h.row_mut(i).assign(&h_new.row(i));
            }
        }
    }

    let emb_dim = params.emb_dim();
    let mut e = Array2::<f64>::zeros((b, emb_dim));
    for i in 0..b {
        match scenes[i] {
            Some(c) => e.row_mut(i).assign(&params.emb.row(c)),
            None => e.row_mut(i).assign(&params.no_scene.row(0)),
        }
    }

    let mut cat = Array2::<f64>::zeros((b, hidden + emb_dim));
    cat.slice_mut(ndarray::s![.., ..hidden]).assign(&h);
    cat.slice_mut(ndarray::s![.., hidden..]).assign(&e);
    cat.dot(&params.w_out) + &params.b_out
}

/// Single-window convenience wrapper around [`encode_context_batch`].
pub fn encode_context(
    window: &TrackWindow,
    scene: Option<usize>,
    params: &ContextParams,
) -> Array1<f64> {
    let out = encode_context_batch(std::slice::from_ref(window), &[scene], params);
    out.row(0).to_owned()
}

/// Tape handles for the context parameters, used during training.
pub struct ContextVars {
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wn: Var,
    pub un: Var,
    pub bn: Var,
    pub emb: Var,
    pub no_scene: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl ContextVars {
    pub fn leaves(g: &mut Graph, p: &ContextParams) -> Self {
        Self {
            wr: g.leaf(p.wr.clone()),
            ur: g.leaf(p.ur.clone()),
            br: g.leaf(p.br.clone()),
            wz: g.leaf(p.wz.clone()),
            uz: g.leaf(p.uz.clone()),
            bz: g.leaf(p.bz.clone()),
            wn: g.leaf(p.wn.clone()),
            un: g.leaf(p.un.clone()),
            bn: g.leaf(p.bn.clone()),
            emb: g.leaf(p.emb.clone()),
            no_scene: g.leaf(p.no_scene.clone()),
            w_out: g.leaf(p.w_out.clone()),
            b_out: g.leaf(p.b_out.clone()),
        }
    }

    /// All parameter vars in a fixed order matching
    /// [`super::flow::context_param_names`].
    pub fn all(&self) -> [Var; 13] {
        [
            self.wr, self.ur, self.br, self.wz, self.uz, self.bz, self.wn, self.un, self.bn,
            self.emb, self.no_scene, self.w_out, self.b_out,
        ]
    }
}

/// Builds the context encoding on the tape. Returns the `(B, ctx_dim)` node.
///
/// Step inputs enter as constant leaves; masked steps multiply the hidden
/// update by zero, so their gradients vanish identically.
pub fn encode_context_graph(
    g: &mut Graph,
    vars: &ContextVars,
    params: &ContextParams,
    windows: &[TrackWindow],
    scenes: &[Option<usize>],
) -> Var {
    let b = windows.len();
    let hidden = params.hidden_dim();
    let emb_dim = params.emb_dim();

    let mut h = g.leaf(Array2::zeros((b, hidden)));
    for t in 0..WINDOW_LEN {
        let x_val = Array2::from_shape_fn((b, WINDOW_FEATURES), |(i, f)| windows[i].steps[t][f]);
        let x = g.leaf(x_val);
        let xr = g.matmul(x, vars.wr);
        let hr = g.matmul(h, vars.ur);
        let r_sum = g.add(xr, hr);
        let r_pre = g.add_row(r_sum, vars.br);
        let r = g.sigmoid(r_pre);

        let xz = g.matmul(x, vars.wz);
        let hz = g.matmul(h, vars.uz);
        let z_sum = g.add(xz, hz);
        let z_pre = g.add_row(z_sum, vars.bz);
        let z = g.sigmoid(z_pre);

        let rh = g.mul(r, h);
        let xn = g.matmul(x, vars.wn);
        let hn = g.matmul(rh, vars.un);
        let n_sum = g.add(xn, hn);
        let n_pre = g.add_row(n_sum, vars.bn);
        let n = g.tanh(n_pre);

        let zn = g.mul(z, n);
        let keep = g.mul(z, h);
        let drop = g.sub(n, zn);
        let h_new = g.add(drop, keep);

        let m = Array2::from_shape_fn((b, hidden), |(i, _)| f64::from(windows[i].mask[t]));
        let inv = m.mapv(|v| 1.0 - v);
        let gated_new = g.mul_const(h_new, m);
        let gated_old = g.mul_const(h, inv);
        h = g.add(gated_new, gated_old);
    }

    // Scene embedding rows; `None` rows take the no-scene vector.
    let ids: Vec<usize> = scenes.iter().map(|s| s.unwrap_or(0)).collect();
    let have = Array2::from_shape_fn((b, emb_dim), |(i, _)| f64::from(scenes[i].is_some()));
    let missing = have.mapv(|v| 1.0 - v);
    let picked = g.gather(vars.emb, ids);
    let picked = g.mul_const(picked, have);
    let ones = g.leaf(Array2::ones((b, emb_dim)));
    let ns = g.mul_row(ones, vars.no_scene);
    let ns = g.mul_const(ns, missing);
    let e = g.add(picked, ns);

    let cat = g.concat(h, e);
    let proj = g.matmul(cat, vars.w_out);
    g.add_row(proj, vars.b_out)
}
