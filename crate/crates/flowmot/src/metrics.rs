//! Tracking and distance-estimation metrics.
//!
//! Tracking quality follows the CLEAR conventions: per-frame box matching
//! at IoU >= 0.5 with continuity preference, ID switches counted as
//! mismatches, MOTA from pooled error counts, and IDF1 from the global
//! identity bipartite matching that maximizes the number of co-localized
//! frames. Distance quality covers the threshold accuracies, relative
//! errors, RMSE variants, the occlusion-binned ALOE and the Gaussian NLL
//! of (mean, variance) estimates.

use crate::assoc::{hungarian, CostMatrix};
use crate::error::{Error, Result};
use crate::sim::GroundTruth;
use crate::types::{iou, BBox};
use ndarray::Array2;
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// One tracker output row.
#[derive(Debug, Clone, PartialEq)]
pub struct PredRow {
    pub frame: u32,
    pub id: u32,
    pub bbox: BBox,
    pub distance: f64,
    /// Reported distance variance when the source provides one (detector
    /// output); tracker output usually does not.
    pub dist_var: Option<f64>,
}

/// Ground-truth eval filters mirroring the dataset-cleaning conventions:
/// annotations farther than `max_distance` are dropped, and targets hidden
/// (occlusion above the threshold) for more than `max_occluded_frames`
/// consecutive frames are disabled until they reappear, keeping their id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalFilter {
    pub max_distance: Option<f64>,
    pub max_occluded_frames: Option<u32>,
    pub occlusion_hidden_threshold: f64,
}

impl Default for EvalFilter {
    fn default() -> Self {
        Self {
            max_distance: None,
            max_occluded_frames: None,
            occlusion_hidden_threshold: 0.9,
        }
    }
}

const IOU_MATCH_THRESHOLD: f64 = 0.5;
/// ALP thresholds in meters, fixed by the report schema.
pub const ALP_THRESHOLDS: [f64; 3] = [0.5, 1.0, 2.0];

/// Raw tracking counts; every rate is derived from these so reports can be
/// pooled exactly across sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrackingCounts {
    pub gt_total: usize,
    pub pred_total: usize,
    pub idtp: usize,
    pub matches: usize,
    pub fn_total: usize,
    pub fp_total: usize,
    pub idsw: usize,
}

/// Raw distance-error sums over matched pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DistanceCounts {
    pub n: usize,
    pub delta_125: usize,
    pub alp: [usize; 3],
    pub sum_abs_rel: f64,
    pub sum_sq_rel: f64,
    pub sum_sq_err: f64,
    pub sum_sq_log_err: f64,
    pub gnll_sum: f64,
    pub gnll_n: usize,
}

/// Mean absolute distance error restricted to one occlusion band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AloeBin {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub sum_abs_err: f64,
}

impl AloeBin {
    pub fn mean(&self) -> Option<f64> {
        if self.n == 0 {
            None
        } else {
            Some(self.sum_abs_err / self.n as f64)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub tracking: TrackingCounts,
    pub distance: DistanceCounts,
    pub aloe: Vec<AloeBin>,
}

impl MetricsReport {
    pub fn idf1(&self) -> Option<f64> {
        if self.tracking.gt_total == 0 {
            return None;
        }
        let idtp = self.tracking.idtp as f64;
        let idfp = (self.tracking.pred_total - self.tracking.idtp) as f64;
        let idfn = (self.tracking.gt_total - self.tracking.idtp) as f64;
        Some(2.0 * idtp / (2.0 * idtp + idfp + idfn))
    }

    pub fn mota(&self) -> Option<f64> {
        if self.tracking.gt_total == 0 {
            return None;
        }
        Some(
            1.0 - (self.tracking.fn_total + self.tracking.fp_total + self.tracking.idsw) as f64
                / self.tracking.gt_total as f64,
        )
    }

    pub fn delta_125(&self) -> Option<f64> {
        if self.distance.n == 0 {
            None
        } else {
            Some(self.distance.delta_125 as f64 / self.distance.n as f64)
        }
    }

    pub fn alp(&self, i: usize) -> Option<f64> {
        if self.distance.n == 0 {
            None
        } else {
            Some(self.distance.alp[i] as f64 / self.distance.n as f64)
        }
    }

    pub fn abs_rel(&self) -> Option<f64> {
        (self.distance.n > 0).then(|| self.distance.sum_abs_rel / self.distance.n as f64)
    }

    pub fn sq_rel(&self) -> Option<f64> {
        (self.distance.n > 0).then(|| self.distance.sum_sq_rel / self.distance.n as f64)
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.distance.n > 0).then(|| (self.distance.sum_sq_err / self.distance.n as f64).sqrt())
    }

    pub fn rmse_log(&self) -> Option<f64> {
        (self.distance.n > 0)
            .then(|| (self.distance.sum_sq_log_err / self.distance.n as f64).sqrt())
    }

    pub fn mean_gnll(&self) -> Option<f64> {
        (self.distance.gnll_n > 0).then(|| self.distance.gnll_sum / self.distance.gnll_n as f64)
    }

    /// Pools raw counts; the aggregate of sequences equals the metrics of
    /// their concatenation (CLEAR accumulation rule).
    pub fn merge(&mut self, other: &Self) {
        self.tracking.gt_total += other.tracking.gt_total;
        self.tracking.pred_total += other.tracking.pred_total;
        self.tracking.idtp += other.tracking.idtp;
        self.tracking.matches += other.tracking.matches;
        self.tracking.fn_total += other.tracking.fn_total;
        self.tracking.fp_total += other.tracking.fp_total;
        self.tracking.idsw += other.tracking.idsw;
        self.distance.n += other.distance.n;
        self.distance.delta_125 += other.distance.delta_125;
        for i in 0..3 {
            self.distance.alp[i] += other.distance.alp[i];
        }
        self.distance.sum_abs_rel += other.distance.sum_abs_rel;
        self.distance.sum_sq_rel += other.distance.sum_sq_rel;
        self.distance.sum_sq_err += other.distance.sum_sq_err;
        self.distance.sum_sq_log_err += other.distance.sum_sq_log_err;
        self.distance.gnll_sum += other.distance.gnll_sum;
        self.distance.gnll_n += other.distance.gnll_n;
        if self.aloe.is_empty() {
            self.aloe = other.aloe.clone();
        } else {
            for (a, b) in self.aloe.iter_mut().zip(other.aloe.iter()) {
                a.n += b.n;
                a.sum_abs_err += b.sum_abs_err;
            }
        }
    }

    /// Key-value text rendering; absent metrics print as `undefined`.
    pub fn to_text(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"))
        }
        let mut out = String::from("# metrics report v1\n");
        out.push_str(&format!("gt_total = {}\n", self.tracking.gt_total));
        out.push_str(&format!("pred_total = {}\n", self.tracking.pred_total));
        out.push_str(&format!("idtp = {}\n", self.tracking.idtp));
        out.push_str(&format!("idf1 = {}\n", opt(self.idf1())));
        out.push_str(&format!("id_switches = {}\n", self.tracking.idsw));
        out.push_str(&format!("mota = {}\n", opt(self.mota())));
        out.push_str(&format!("false_negatives = {}\n", self.tracking.fn_total));
        out.push_str(&format!("false_positives = {}\n", self.tracking.fp_total));
        out.push_str(&format!("distance_pairs = {}\n", self.distance.n));
        out.push_str(&format!("delta_1.25 = {}\n", opt(self.delta_125())));
        for (i, tau) in ALP_THRESHOLDS.iter().enumerate() {
            out.push_str(&format!("alp@{tau} = {}\n", opt(self.alp(i))));
        }
        out.push_str(&format!("abs_rel = {}\n", opt(self.abs_rel())));
        out.push_str(&format!("sq_rel = {}\n", opt(self.sq_rel())));
        out.push_str(&format!("rmse = {}\n", opt(self.rmse())));
        out.push_str(&format!("rmse_log = {}\n", opt(self.rmse_log())));
        out.push_str(&format!("mean_gnll = {}\n", opt(self.mean_gnll())));
        for bin in &self.aloe {
            let value = bin
                .mean()
                .map_or_else(|| "absent".into(), |m| format!("{m:.6}"));
            out.push_str(&format!("aloe[{},{}] = {}\n", bin.lo, bin.hi, value));
        }
        out
    }
}

/// Gaussian negative log-likelihood of a (mean, variance) distance estimate.
pub fn gnll(d: f64, d_var: f64, d_true: f64) -> Result<f64> {
    if d_var <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "distance variance must be positive, got {d_var}"
        )));
    }
    let r = d - d_true;
    Ok(0.5 * (d_var.ln() + r * r / d_var))
}

fn apply_filter(gt: &GroundTruth, filter: &EvalFilter) -> GroundTruth {
    let mut rows = gt.rows.clone();
    if let Some(max_d) = filter.max_distance {
        rows.retain(|r| r.distance <= max_d);
    }
    if let Some(max_hidden) = filter.max_occluded_frames {
        // Per id: count consecutive hidden frames; rows beyond the budget
        // are disabled until the target becomes visible again.
        let mut by_id: BTreeMap<u32, Vec<&crate::sim::GtRow>> = BTreeMap::new();
        for r in &rows {
            by_id.entry(r.id).or_default().push(r);
        }
        let mut keep: BTreeSet<(u32, u32)> = BTreeSet::new();
        for (id, mut id_rows) in by_id {
            id_rows.sort_by_key(|r| r.frame);
            let mut hidden_streak = 0u32;
            for r in id_rows {
                if r.occlusion >= filter.occlusion_hidden_threshold {
                    hidden_streak += 1;
                } else {
                    hidden_streak = 0;
                }
                if hidden_streak <= max_hidden {
                    keep.insert((r.frame, id));
                }
            }
        }
        rows.retain(|r| keep.contains(&(r.frame, r.id)));
    }
    GroundTruth { rows }
}

struct FrameMatchState {
    /// Most recent predicted id matched to each ground-truth id.
    last_pred: HashMap<u32, u32>,
}

/// CLEAR per-frame matching: carry over last frame's correspondences that
/// still overlap, then solve the rest by Hungarian on 1 - IoU.
fn match_frame(
    gts: &[(u32, BBox)],
    preds: &[(u32, BBox)],
    state: &FrameMatchState,
) -> Vec<(usize, usize)> {
    let mut matched_gt = vec![false; gts.len()];
    let mut matched_pred = vec![false; preds.len()];
    let mut pairs = Vec::new();

    let pred_index: HashMap<u32, usize> = preds.iter().enumerate().map(|(i, p)| (p.0, i)).collect();
    for (gi, (gt_id, gt_box)) in gts.iter().enumerate() {
        if let Some(&last) = state.last_pred.get(gt_id) {
            if let Some(&pi) = pred_index.get(&last) {
                if !matched_pred[pi] && iou(gt_box, &preds[pi].1) >= IOU_MATCH_THRESHOLD {
                    matched_gt[gi] = true;
                    matched_pred[pi] = true;
                    pairs.push((gi, pi));
                }
            }
        }
    }

    let free_gt: Vec<usize> = (0..gts.len()).filter(|&i| !matched_gt[i]).collect();
    let free_pred: Vec<usize> = (0..preds.len()).filter(|&i| !matched_pred[i]).collect();
    if !free_gt.is_empty() && !free_pred.is_empty() {
        let costs = Array2::from_shape_fn((free_gt.len(), free_pred.len()), |(a, b)| {
            1.0 - iou(&gts[free_gt[a]].1, &preds[free_pred[b]].1)
        });
        let masked = costs.mapv(|c| c > 1.0 - IOU_MATCH_THRESHOLD);
        let matrix = CostMatrix {
            costs,
            masked,
            det_rows: (0..free_gt.len()).collect(),
            track_cols: (0..free_pred.len() as u32).collect(),
        };
        for (a, b) in hungarian(&matrix).pairs {
            pairs.push((free_gt[a], free_pred[b]));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Maximum total identity overlap between ground-truth and predicted
/// trajectories (IDTP), via the assignment solver. Matching a pair with
/// zero overlap adds nothing, so the rectangular solve is equivalent to
/// the padded square formulation.
fn solve_idtp(overlap: &BTreeMap<(u32, u32), usize>, gt_ids: &[u32], pred_ids: &[u32]) -> usize {
    if gt_ids.is_empty() || pred_ids.is_empty() {
        return 0;
    }
    let max_ov = overlap.values().copied().max().unwrap_or(0) as f64;
    let costs = Array2::from_shape_fn((gt_ids.len(), pred_ids.len()), |(i, j)| {
        max_ov - *overlap.get(&(gt_ids[i], pred_ids[j])).unwrap_or(&0) as f64
    });
    let masked = Array2::from_elem(costs.dim(), false);
    let matrix = CostMatrix {
        costs,
        masked,
        det_rows: (0..gt_ids.len()).collect(),
        track_cols: (0..pred_ids.len() as u32).collect(),
    };
    hungarian(&matrix)
        .pairs
        .iter()
        .map(|&(i, j)| *overlap.get(&(gt_ids[i], pred_ids[j])).unwrap_or(&0))
        .sum()
}

/// Evaluates a prediction table against ground truth.
pub fn evaluate(
    gt: &GroundTruth,
    pred: &[PredRow],
    aloe_bins: &[(f64, f64)],
    filter: &EvalFilter,
) -> Result<MetricsReport> {
    let gt = apply_filter(gt, filter);
    for r in &gt.rows {
        if r.distance <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "ground-truth distance must be positive (frame {}, id {})",
                r.frame, r.id
            )));
        }
    }

    let mut gt_frames: BTreeMap<u32, Vec<(u32, BBox, f64, f64)>> = BTreeMap::new();
    for r in &gt.rows {
        gt_frames
            .entry(r.frame)
            .or_default()
            .push((r.id, r.bbox, r.distance, r.occlusion));
    }
    let mut pred_frames: BTreeMap<u32, Vec<(u32, BBox, f64, Option<f64>)>> = BTreeMap::new();
    for r in pred {
        pred_frames
            .entry(r.frame)
            .or_default()
            .push((r.id, r.bbox, r.distance, r.dist_var));
    }

    let mut counts = TrackingCounts {
        gt_total: gt.rows.len(),
        pred_total: pred.len(),
        ..Default::default()
    };
    let mut dist = DistanceCounts::default();
    let mut aloe: Vec<AloeBin> = aloe_bins
        .iter()
        .map(|&(lo, hi)| AloeBin {
            lo,
            hi,
            n: 0,
            sum_abs_err: 0.0,
        })
        .collect();
    let mut overlap: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut state = FrameMatchState {
        last_pred: HashMap::new(),
    };

    let frames: BTreeSet<u32> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();
    for frame in frames {
        let empty_gt = Vec::new();
        let empty_pred = Vec::new();
        let gts = gt_frames.get(&frame).unwrap_or(&empty_gt);
        let preds = pred_frames.get(&frame).unwrap_or(&empty_pred);

        // Identity overlap counts for IDF1 (independent of the CLEAR
        // assignment): a frame contributes to a (gt, pred) trajectory pair
        // when the two boxes co-localize.
        for (gid, gbox, _, _) in gts {
            for (pid, pbox, _, _) in preds {
                if iou(gbox, pbox) >= IOU_MATCH_THRESHOLD {
                    *overlap.entry((*gid, *pid)).or_default() += 1;
                }
            }
        }

        let g_slim: Vec<(u32, BBox)> = gts.iter().map(|g| (g.0, g.1)).collect();
        let p_slim: Vec<(u32, BBox)> = preds.iter().map(|p| (p.0, p.1)).collect();
        let pairs = match_frame(&g_slim, &p_slim, &state);

        counts.matches += pairs.len();
        counts.fn_total += gts.len() - pairs.len();
        counts.fp_total += preds.len() - pairs.len();

        for (gi, pi) in pairs {
            let (gt_id, _, d_true, occ) = gts[gi];
            let (pred_id, _, d_pred, d_var) = preds[pi];
            if let Some(&last) = state.last_pred.get(&gt_id) {
                if last != pred_id {
                    counts.idsw += 1;
                }
            }
            state.last_pred.insert(gt_id, pred_id);

            // Distance metrics over matched pairs.
            dist.n += 1;
            let abs_err = (d_pred - d_true).abs();
            if (d_pred / d_true).max(d_true / d_pred) < 1.25 {
                dist.delta_125 += 1;
            }
            for (i, tau) in ALP_THRESHOLDS.iter().enumerate() {
                if abs_err < *tau {
                    dist.alp[i] += 1;
                }
            }
            dist.sum_abs_rel += abs_err / d_true;
            dist.sum_sq_rel += (d_pred - d_true) * (d_pred - d_true) / d_true;
            dist.sum_sq_err += (d_pred - d_true) * (d_pred - d_true);
            if d_pred > 0.0 {
                let le = d_pred.ln() - d_true.ln();
                dist.sum_sq_log_err += le * le;
            }
            if let Some(var) = d_var {
                dist.gnll_sum += gnll(d_pred, var, d_true)?;
                dist.gnll_n += 1;
            }
            for bin in aloe.iter_mut() {
                if occ >= bin.lo && occ <= bin.hi {
                    bin.n += 1;
                    bin.sum_abs_err += abs_err;
                }
            }
        }
    }

    let gt_ids: Vec<u32> = gt.rows.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let pred_ids: Vec<u32> = pred.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    counts.idtp = solve_idtp(&overlap, &gt_ids, &pred_ids);

    Ok(MetricsReport {
        tracking: counts,
        distance: dist,
        aloe,
    })
}
