//! Association cost matrices, normalization and assignment.
//!
//! Cost cells come from pluggable providers (IoU, Euclidean distance, the
//! joint flow, or the factorized baseline); lower is always better. The
//! normalization applies a temperature softmax along rows and columns of
//! the raw cost and keeps the cell-wise minimum, after which the Hungarian
//! solver produces the minimum-cost assignment over ungated cells.

use crate::context::{encode_context, TrackWindow};
use crate::flow::{factorized_log_prob, log_prob_batch, FactorizedBaseline, FlowModel};
use crate::types::{iou, DeltaFeatures, Detection};
use ndarray::Array2;

/// Large finite cost standing in for forbidden cells inside the solver.
const GATED_COST: f64 = 1e9;

/// Gating thresholds applied before any provider cost is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    /// Maximum center distance between prediction and candidate, pixels.
    pub center_px: f64,
    /// Maximum absolute distance delta, meters.
    pub dist_m: f64,
}

impl Default for Gate {
    fn default() -> Self {
        Self {
            center_px: 150.0,
            dist_m: 10.0,
        }
    }
}

/// Everything the cost providers need to know about one live track.
#[derive(Debug, Clone)]
pub struct TrackSnapshot {
    pub id: u32,
    /// One-step-ahead predicted measurement `[cx, cy, w, h, d]`.
    pub predicted: [f64; 5],
    pub window: TrackWindow,
    /// Scene cluster id, when scene conditioning is active.
    pub scene: Option<usize>,
}

/// Cost providers; every provider reports lower costs for better matches.
pub enum CostProvider<'a> {
    /// 1 - IoU of the predicted box against the candidate box.
    Iou,
    /// Euclidean center distance in pixels.
    Euclidean,
    /// Negative log-likelihood of the association deltas under the flow.
    Flow(&'a FlowModel),
    /// Negative log-likelihood under the factorized baseline.
    Factorized(&'a FactorizedBaseline),
}

impl CostProvider<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            CostProvider::Iou => "iou",
            CostProvider::Euclidean => "euclidean",
            CostProvider::Flow(_) => "flow",
            CostProvider::Factorized(_) => "factorized",
        }
    }
}

/// `|D| x |T|` cost matrix with row/column identities and a gate mask.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub costs: Array2<f64>,
    pub masked: Array2<bool>,
    /// Detection index per row.
    pub det_rows: Vec<usize>,
    /// Track id per column.
    pub track_cols: Vec<u32>,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.costs.nrows()
    }

    pub fn cols(&self) -> usize {
        self.costs.ncols()
    }
}

/// Per-call diagnostics; provider failures mask cells instead of aborting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostDiagnostics {
    pub gated_cells: usize,
    pub failed_cells: usize,
}

/// Signed component differences prediction minus candidate.
pub fn compute_deltas(predicted: &[f64; 5], det: &Detection) -> DeltaFeatures {
    DeltaFeatures {
        dx: predicted[0] - det.bbox.cx,
        dy: predicted[1] - det.bbox.cy,
        dw: predicted[2] - det.bbox.w,
        dh: predicted[3] - det.bbox.h,
        dd: predicted[4] - det.dist_mean,
    }
}

fn gate_ok(predicted: &[f64; 5], det: &Detection, gate: &Gate) -> bool {
    let dx = predicted[0] - det.bbox.cx;
    let dy = predicted[1] - det.bbox.cy;
    let dd = predicted[4] - det.dist_mean;
    dx.hypot(dy) <= gate.center_px && dd.abs() <= gate.dist_m
}

/// Fills the cost matrix for all (detection, track) pairs that pass the
/// gate. Flow costs are evaluated in one batched likelihood call per track
/// (all candidates share that track's context vector).
pub fn build_cost_matrix(
    tracks: &[TrackSnapshot],
    detections: &[Detection],
    provider: &CostProvider,
    gate: &Gate,
) -> (CostMatrix, CostDiagnostics) {
    let n = detections.len();
    let m = tracks.len();
    let mut costs = Array2::from_elem((n, m), GATED_COST);
    let mut masked = Array2::from_elem((n, m), true);
    let mut diag = CostDiagnostics::default();

    for (col, track) in tracks.iter().enumerate() {
        let candidates: Vec<usize> = (0..n)
            .filter(|&row| gate_ok(&track.predicted, &detections[row], gate))
            .collect();
        diag.gated_cells += n - candidates.len();
        if candidates.is_empty() {
            continue;
        }
        match provider {
            CostProvider::Iou => {
                let pred_box = crate::types::BBox::new(
                    track.predicted[0],
                    track.predicted[1],
                    track.predicted[2].max(1e-6),
                    track.predicted[3].max(1e-6),
                );
                for &row in &candidates {
                    costs[[row, col]] = 1.0 - iou(&pred_box, &detections[row].bbox);
                    masked[[row, col]] = false;
                }
            }
            CostProvider::Euclidean => {
                for &row in &candidates {
                    let d = &detections[row];
                    costs[[row, col]] =
                        (track.predicted[0] - d.bbox.cx).hypot(track.predicted[1] - d.bbox.cy);
                    masked[[row, col]] = false;
                }
            }
            CostProvider::Flow(model) => {
                let ctx_row = encode_context(&track.window, track.scene, &model.context);
                let dim = model.dim();
                let x = Array2::from_shape_fn((candidates.len(), dim), |(i, j)| {
                    let deltas = compute_deltas(&track.predicted, &detections[candidates[i]]);
                    if dim == 3 {
                        deltas.to_norms()[j]
                    } else {
                        deltas.to_array()[j]
                    }
                });
                let ctx =
                    Array2::from_shape_fn((candidates.len(), ctx_row.len()), |(_, j)| ctx_row[j]);
                match log_prob_batch(&x, &ctx, model) {
                    Ok(lp) => {
                        for (i, &row) in candidates.iter().enumerate() {
                            if lp[i].is_finite() {
                                costs[[row, col]] = -lp[i];
                                masked[[row, col]] = false;
                            } else {
                                diag.failed_cells += 1;
                            }
                        }
                    }
                    Err(_) => {
                        // Whole-column failure: retry per cell so one bad
                        // candidate cannot mask its neighbours.
                        for &row in &candidates {
                            let deltas = compute_deltas(&track.predicted, &detections[row]);
                            let xi = if dim == 3 {
                                deltas.to_norms().to_vec()
                            } else {
                                deltas.to_array().to_vec()
                            };
                            match crate::flow::log_prob(&xi, ctx_row.as_slice().unwrap(), model) {
                                Ok(lp) if lp.is_finite() => {
                                    costs[[row, col]] = -lp;
                                    masked[[row, col]] = false;
                                }
                                _ => diag.failed_cells += 1,
                            }
                        }
                    }
                }
            }
            CostProvider::Factorized(model) => {
                for &row in &candidates {
                    let deltas = compute_deltas(&track.predicted, &detections[row]);
                    match factorized_log_prob(model, &deltas.to_norms()) {
                        Ok(lp) if lp.is_finite() => {
                            costs[[row, col]] = -lp;
                            masked[[row, col]] = false;
                        }
                        _ => diag.failed_cells += 1,
                    }
                }
            }
        }
    }

    (
        CostMatrix {
            costs,
            masked,
            det_rows: (0..n).collect(),
            track_cols: tracks.iter().map(|t| t.id).collect(),
        },
        diag,
    )
}

/// Spread cap for one softmax pass, in temperature units. Entries worse
/// than the best of their row/column by more than this are clamped so the
/// exponentials of competitive cells stay representable; unbounded spreads
/// would flush every good cell to exactly 0 and reduce the assignment to
/// tie-breaking.
const SOFTMAX_SPREAD_CAP: f64 = 30.0;

/// Temperature-softmax normalization of a raw cost matrix.
///
/// Row and column softmaxes of `cost/sigma` are combined by the cell-wise
/// minimum; masked cells are excluded from the denominators and stay
/// masked. With `negate` the softmax runs over `-cost/sigma` (high weight
/// meaning a good match) and the returned matrix is `1 - weight`, which
/// keeps the lower-is-better cost convention either way.
pub fn normalize_cost(matrix: &CostMatrix, sigma: f64, negate: bool) -> CostMatrix {
    assert!(sigma > 0.0, "temperature must be positive");
    let (n, m) = (matrix.rows(), matrix.cols());
    let sign = if negate { -1.0 } else { 1.0 };

    // One softmax over the live entries of a line (row or column). The
    // values are shifted by the line minimum, which both stabilizes the
    // exponentials and realizes the documented shift invariance exactly.
    let softmax_line = |vals: &[(usize, f64)]| -> Vec<(usize, f64)> {
        let min = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let shifted: Vec<(usize, f64)> = vals
            .iter()
            .map(|&(k, v)| (k, (v - min).min(SOFTMAX_SPREAD_CAP)))
            .collect();
        let denom: f64 = shifted.iter().map(|v| v.1.exp()).sum();
        shifted.into_iter().map(|(k, v)| (k, v.exp() / denom)).collect()
    };

    let mut row_soft = Array2::from_elem((n, m), f64::NAN);
    for i in 0..n {
        let vals: Vec<(usize, f64)> = (0..m)
            .filter(|&j| !matrix.masked[[i, j]])
            .map(|j| (j, sign * matrix.costs[[i, j]] / sigma))
            .collect();
        if vals.is_empty() {
            continue;
        }
        for (j, v) in softmax_line(&vals) {
            row_soft[[i, j]] = v;
        }
    }
    let mut col_soft = Array2::from_elem((n, m), f64::NAN);
    for j in 0..m {
        let vals: Vec<(usize, f64)> = (0..n)
            .filter(|&i| !matrix.masked[[i, j]])
            .map(|i| (i, sign * matrix.costs[[i, j]] / sigma))
            .collect();
        if vals.is_empty() {
            continue;
        }
        for (i, v) in softmax_line(&vals) {
            col_soft[[i, j]] = v;
        }
    }

    let mut out = matrix.clone();
    for i in 0..n {
        for j in 0..m {
            if matrix.masked[[i, j]] {
                out.costs[[i, j]] = GATED_COST;
                continue;
            }
            let combined = row_soft[[i, j]].min(col_soft[[i, j]]);
            out.costs[[i, j]] = if negate { 1.0 - combined } else { combined };
        }
    }
    out
}

/// Renders a raw/normalized cost-matrix pair as tab-separated diagnostics:
/// one line per ungated cell, `frame det_row track_id raw norm`.
pub fn matrices_to_tsv(frame: u32, raw: &CostMatrix, normalized: &CostMatrix) -> String {
    let mut out = String::new();
    for i in 0..raw.rows() {
        for j in 0..raw.cols() {
            if raw.masked[[i, j]] {
                continue;
            }
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\n",
                frame,
                raw.det_rows[i],
                raw.track_cols[j],
                raw.costs[[i, j]],
                normalized.costs[[i, j]]
            ));
        }
    }
    out
}

/// Assignment result: matched `(detection row, track column)` index pairs
/// plus the unmatched leftovers, all in matrix-local indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Minimum-total-cost assignment over the ungated cells of a rectangular
/// matrix, by the shortest augmenting path algorithm with potentials.
/// Pairs forced through the gate mask are dropped from the result.
pub fn hungarian(matrix: &CostMatrix) -> Assignment {
    let (n, m) = (matrix.rows(), matrix.cols());
    if n == 0 || m == 0 {
        return Assignment {
            pairs: Vec::new(),
            unmatched_rows: (0..n).collect(),
            unmatched_cols: (0..m).collect(),
        };
    }

    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let cost_at = |r: usize, c: usize| -> f64 {
        let (i, j) = if transpose { (c, r) } else { (r, c) };
        if matrix.masked[[i, j]] {
            GATED_COST
        } else {
            matrix.costs[[i, j]]
        }
    };

    // Potentials formulation; p[j] holds the row assigned to column j.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost_at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    let mut matched_rows = vec![false; n];
    let mut matched_cols = vec![false; m];
    for j in 1..=cols {
        if p[j] == 0 {
            continue;
        }
        let (row, col) = if transpose {
            (j - 1, p[j] - 1)
        } else {
            (p[j] - 1, j - 1)
        };
        if matrix.masked[[row, col]] {
            continue;
        }
        pairs.push((row, col));
        matched_rows[row] = true;
        matched_cols[col] = true;
    }
    pairs.sort_unstable();
    Assignment {
        pairs,
        unmatched_rows: (0..n).filter(|&r| !matched_rows[r]).collect(),
        unmatched_cols: (0..m).filter(|&c| !matched_cols[c]).collect(),
    }
}
