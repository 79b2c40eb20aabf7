//! SORT-style track lifecycle with pluggable association costs, plus the
//! extraction of the inlier training set from ground truth.

use crate::assoc::{
    build_cost_matrix, compute_deltas, hungarian, normalize_cost, CostMatrix, CostProvider, Gate,
    TrackSnapshot,
};
use crate::context::{build_window, SceneDescriptor, TrackWindow, WINDOW_LEN};
use crate::error::Result;
use crate::flow::AssociationSample;
use crate::kalman::{kf_init, kf_predict, kf_update, KalmanParams, KalmanState, Measurement};
use crate::sim::{GroundTruth, MotRow};
use crate::types::{iou, BBox, Detection, FrameObservations};
use ndarray::Array2;

/// Second-stage association settings (low-confidence recovery pass).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStageParams {
    /// Detections at or above this confidence enter the first stage.
    pub high_conf: f64,
    /// Detections in `[low_conf, high_conf)` enter the second stage.
    pub low_conf: f64,
    /// Minimum IoU for a second-stage match.
    pub min_iou: f64,
}

impl Default for TwoStageParams {
    fn default() -> Self {
        Self {
            high_conf: 0.6,
            low_conf: 0.1,
            min_iou: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerParams {
    /// Minimum confidence for a detection to be considered at all.
    pub det_conf: f64,
    /// Consecutive hits required to confirm a tentative track.
    pub n_init: u32,
    /// Frames a track survives unmatched before removal.
    pub max_age: u32,
    pub gate: Gate,
    /// Softmax temperature of the cost normalization.
    pub sigma: f64,
    /// Matches with a normalized cost above this are rejected.
    pub match_threshold: f64,
    /// Absolute plausibility bound for likelihood providers: any match
    /// whose negative log-likelihood exceeds this is rejected, normalized
    /// cost notwithstanding. The softmax is purely relative, so without an
    /// absolute bound a row of uniformly absurd candidates would still
    /// produce an accepted match.
    pub nll_cap: f64,
    /// Minimum raw overlap for matches under the IoU provider.
    pub min_iou: f64,
    /// Run the softmax over negated costs (likelihood-proportional mode).
    pub negate_before_softmax: bool,
    /// Use the last raw distance observation instead of the filtered state
    /// as the track's predicted distance.
    pub raw_last_distance: bool,
    /// Collect per-frame raw and normalized cost matrices into the
    /// diagnostics (tab-separated; one line per ungated cell).
    pub dump_matrices: bool,
    pub two_stage: Option<TwoStageParams>,
    pub kalman: KalmanParams,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            det_conf: 0.5,
            n_init: 3,
            max_age: 30,
            gate: Gate::default(),
            sigma: 1.0,
            match_threshold: 0.9,
            nll_cap: 200.0,
            min_iou: 0.0,
            negate_before_softmax: false,
            raw_last_distance: false,
            dump_matrices: false,
            two_stage: None,
            kalman: KalmanParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrackStatus {
    Tentative,
    Confirmed,
}

#[derive(Debug, Clone)]
struct Track {
    id: u32,
    state: KalmanState,
    status: TrackStatus,
    consecutive_hits: u32,
    time_since_update: u32,
    /// Matched observation values `[cx, cy, w, h, d]`, oldest first,
    /// capped to what the window builder consumes.
    history: Vec<[f64; 5]>,
    predicted: [f64; 5],
}

impl Track {
    fn observation(det: &Detection) -> [f64; 5] {
        [
            det.bbox.cx,
            det.bbox.cy,
            det.bbox.w,
            det.bbox.h,
            det.dist_mean,
        ]
    }

    fn new(id: u32, det: &Detection, kalman: &KalmanParams, n_init: u32) -> Self {
        let state = kf_init(det, kalman);
        let obs = Self::observation(det);
        Self {
            id,
            state,
            status: if n_init <= 1 {
                TrackStatus::Confirmed
            } else {
                TrackStatus::Tentative
            },
            consecutive_hits: 1,
            time_since_update: 0,
            history: vec![obs],
            predicted: obs,
        }
    }

    fn push_history(&mut self, det: &Detection) {
        self.history.push(Self::observation(det));
        let cap = WINDOW_LEN + 1;
        if self.history.len() > cap {
            let excess = self.history.len() - cap;
            self.history.drain(..excess);
        }
    }
}

/// One confirmed-track output row.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputRow {
    pub frame: u32,
    pub id: u32,
    pub bbox: BBox,
    pub distance: f64,
}

/// One association decision, for the diagnostics log.
#[derive(Debug, Clone, PartialEq)]
pub struct AssocEvent {
    pub frame: u32,
    pub track_id: u32,
    pub det_index: usize,
    pub raw_cost: f64,
    pub norm_cost: f64,
    pub accepted: bool,
    pub stage: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackDiagnostics {
    pub gated_cells: usize,
    pub failed_cells: usize,
    pub assoc_log: Vec<AssocEvent>,
    /// Cost-matrix dump when [`TrackerParams::dump_matrices`] is set.
    pub matrix_dump: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackOutput {
    pub rows: Vec<OutputRow>,
    pub diagnostics: TrackDiagnostics,
}

impl TrackOutput {
    pub fn to_pred_rows(&self) -> Vec<crate::metrics::PredRow> {
        self.rows
            .iter()
            .map(|r| crate::metrics::PredRow {
                frame: r.frame,
                id: r.id,
                bbox: r.bbox,
                distance: r.distance,
                dist_var: None,
            })
            .collect()
    }

    pub fn to_mot_rows(&self) -> Vec<MotRow> {
        self.rows
            .iter()
            .map(|r| MotRow {
                frame: r.frame,
                id: r.id,
                bbox: r.bbox,
                conf: 1.0,
            })
            .collect()
    }
}

/// Renders the association log in its documented tab-separated format.
pub fn assoc_log_to_tsv(log: &[AssocEvent]) -> String {
    let mut out = String::from("frame\tstage\ttrack_id\tdet_index\traw_cost\tnorm_cost\taccepted\n");
    for e in log {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\n",
            e.frame, e.stage, e.track_id, e.det_index, e.raw_cost, e.norm_cost, e.accepted as u8
        ));
    }
    out
}

fn snapshot(track: &Track, scene: Option<usize>, raw_last_distance: bool) -> TrackSnapshot {
    let mut predicted = track.predicted;
    if raw_last_distance {
        if let Some(last) = track.history.last() {
            predicted[4] = last[4];
        }
    }
    TrackSnapshot {
        id: track.id,
        predicted,
        window: build_window(&track.history).unwrap_or_else(|_| TrackWindow::empty()),
        scene,
    }
}

/// Cells that are the only ungated entry in both their row and column
/// carry no softmax information (the normalized value is exactly 1 for any
/// raw cost), so the normalized threshold does not apply to them; the raw
/// plausibility floor still does.
fn doubly_singleton(matrix: &CostMatrix, row: usize, col: usize) -> bool {
    let row_live = (0..matrix.cols())
        .filter(|&j| !matrix.masked[[row, j]])
        .count();
    let col_live = (0..matrix.rows())
        .filter(|&i| !matrix.masked[[i, col]])
        .count();
    row_live == 1 && col_live == 1
}

/// Provider-level raw plausibility floor applied to every match.
fn raw_cost_ok(provider: &CostProvider, raw_cost: f64, params: &TrackerParams) -> bool {
    match provider {
        CostProvider::Flow(_) | CostProvider::Factorized(_) => raw_cost <= params.nll_cap,
        CostProvider::Iou => raw_cost <= 1.0 - params.min_iou,
        CostProvider::Euclidean => true,
    }
}

/// Runs the full lifecycle loop over a sequence.
///
/// Per frame: Kalman-predict all live tracks, build the gated cost matrix
/// with the provider, normalize, solve the assignment, accept matches under
/// the threshold, update matched tracks, age the rest, start tentative
/// tracks from leftover confident detections, confirm after `n_init`
/// consecutive hits and retire after `max_age` unmatched frames.
pub fn track_sequence(
    frames: &[FrameObservations],
    provider: &CostProvider,
    scene_descriptor: Option<&SceneDescriptor>,
    params: &TrackerParams,
) -> Result<TrackOutput> {
    let scene = match provider {
        CostProvider::Flow(model) => model.scene_for(scene_descriptor),
        _ => None,
    };

    let mut tracks: Vec<Track> = Vec::new();
    let mut next_id: u32 = 1;
    let mut output = TrackOutput::default();

    for frame_obs in frames {
        let frame = frame_obs.frame;
        // Stage split.
        let (high_thr, low_thr) = match &params.two_stage {
            Some(ts) => (ts.high_conf, ts.low_conf),
            None => (params.det_conf, f64::INFINITY),
        };
        let stage1: Vec<Detection> = frame_obs
            .detections
            .iter()
            .filter(|d| d.confidence >= high_thr)
            .cloned()
            .collect();
        let stage2: Vec<Detection> = match &params.two_stage {
            Some(_) => frame_obs
                .detections
                .iter()
                .filter(|d| d.confidence >= low_thr && d.confidence < high_thr)
                .cloned()
                .collect(),
            None => Vec::new(),
        };

        // Predict every live track once per frame.
        for track in tracks.iter_mut() {
            let (state, z) = kf_predict(&track.state, &params.kalman);
            track.state = state;
            track.predicted = [z[0], z[1], z[2], z[3], z[4]];
        }

        let snapshots: Vec<TrackSnapshot> = tracks
            .iter()
            .map(|t| snapshot(t, scene, params.raw_last_distance))
            .collect();

        let (matrix, diag) = build_cost_matrix(&snapshots, &stage1, provider, &params.gate);
        output.diagnostics.gated_cells += diag.gated_cells;
        output.diagnostics.failed_cells += diag.failed_cells;
        let normalized = normalize_cost(&matrix, params.sigma, params.negate_before_softmax);
        if params.dump_matrices {
            output
                .diagnostics
                .matrix_dump
                .push_str(&crate::assoc::matrices_to_tsv(frame, &matrix, &normalized));
        }
        let assignment = hungarian(&normalized);

        let mut matched_tracks = vec![false; tracks.len()];
        let mut matched_dets = vec![false; stage1.len()];
        for (row, col) in assignment.pairs {
            let norm_cost = normalized.costs[[row, col]];
            let raw_cost = matrix.costs[[row, col]];
            let accepted = raw_cost_ok(provider, raw_cost, params)
                && (norm_cost <= params.match_threshold
                    || doubly_singleton(&matrix, row, col));
            output.diagnostics.assoc_log.push(AssocEvent {
                frame,
                track_id: tracks[col].id,
                det_index: row,
                raw_cost: matrix.costs[[row, col]],
                norm_cost,
                accepted,
                stage: 1,
            });
            if !accepted {
                continue;
            }
            let det = &stage1[row];
            let z = Measurement::from(Track::observation(det));
            let track = &mut tracks[col];
            track.state = kf_update(&track.state, &z, det.dist_var, &params.kalman)?;
            track.push_history(det);
            track.consecutive_hits += 1;
            track.time_since_update = 0;
            if track.status == TrackStatus::Tentative && track.consecutive_hits >= params.n_init {
                track.status = TrackStatus::Confirmed;
            }
            matched_tracks[col] = true;
            matched_dets[row] = true;
        }

        // Second stage: leftover tracks vs low-confidence detections, raw
        // IoU cost, no normalization. Low detections never start tracks.
        if let Some(ts) = &params.two_stage {
            let free_tracks: Vec<usize> =
                (0..tracks.len()).filter(|&i| !matched_tracks[i]).collect();
            if !free_tracks.is_empty() && !stage2.is_empty() {
                let costs = Array2::from_shape_fn((stage2.len(), free_tracks.len()), |(r, c)| {
                    let t = &tracks[free_tracks[c]];
                    let pred_box = BBox::new(
                        t.predicted[0],
                        t.predicted[1],
                        t.predicted[2].max(1e-6),
                        t.predicted[3].max(1e-6),
                    );
                    1.0 - iou(&pred_box, &stage2[r].bbox)
                });
                let masked = costs.mapv(|c| c > 1.0 - ts.min_iou);
                let m2 = CostMatrix {
                    costs,
                    masked,
                    det_rows: (0..stage2.len()).collect(),
                    track_cols: free_tracks.iter().map(|&i| tracks[i].id).collect(),
                };
                for (row, col) in hungarian(&m2).pairs {
                    let ti = free_tracks[col];
                    output.diagnostics.assoc_log.push(AssocEvent {
                        frame,
                        track_id: tracks[ti].id,
                        det_index: row,
                        raw_cost: m2.costs[[row, col]],
                        norm_cost: m2.costs[[row, col]],
                        accepted: true,
                        stage: 2,
                    });
                    let det = &stage2[row];
                    let z = Measurement::from(Track::observation(det));
                    let track = &mut tracks[ti];
                    track.state = kf_update(&track.state, &z, det.dist_var, &params.kalman)?;
                    track.push_history(det);
                    track.consecutive_hits += 1;
                    track.time_since_update = 0;
                    if track.status == TrackStatus::Tentative
                        && track.consecutive_hits >= params.n_init
                    {
                        track.status = TrackStatus::Confirmed;
                    }
                    matched_tracks[ti] = true;
                }
            }
        }

        // Age unmatched tracks.
        for (i, track) in tracks.iter_mut().enumerate() {
            if !matched_tracks[i] {
                track.time_since_update += 1;
                track.consecutive_hits = 0;
            }
        }
        let max_age = params.max_age;
        tracks.retain(|t| t.time_since_update <= max_age);

        // Start tentative tracks from unmatched confident detections.
        for (row, det) in stage1.iter().enumerate() {
            if !matched_dets[row] && det.confidence >= params.det_conf {
                tracks.push(Track::new(next_id, det, &params.kalman, params.n_init));
                next_id += 1;
            }
        }

        // Emit confirmed tracks matched this frame.
        for track in &tracks {
            if track.status == TrackStatus::Confirmed && track.time_since_update == 0 {
                let m = &track.state.mean;
                output.rows.push(OutputRow {
                    frame,
                    id: track.id,
                    bbox: BBox::new(m[0], m[1], m[2].max(1e-6), m[3].max(1e-6)),
                    distance: m[4].max(1e-6),
                });
            }
        }
    }
    Ok(output)
}

/// Per-frame matching of detections to ground-truth boxes at IoU >= 0.5,
/// used to recover correspondence for training data.
fn match_detections_to_gt(
    gts: &[(u32, BBox)],
    dets: &[Detection],
) -> Vec<(u32, usize)> {
    if gts.is_empty() || dets.is_empty() {
        return Vec::new();
    }
    let costs = Array2::from_shape_fn((dets.len(), gts.len()), |(r, c)| {
        1.0 - iou(&dets[r].bbox, &gts[c].1)
    });
    let masked = costs.mapv(|c| c > 0.5);
    let matrix = CostMatrix {
        costs,
        masked,
        det_rows: (0..dets.len()).collect(),
        track_cols: (0..gts.len() as u32).collect(),
    };
    hungarian(&matrix)
        .pairs
        .into_iter()
        .map(|(det_row, gt_col)| (gts[gt_col].0, det_row))
        .collect()
}

/// Extracts one training sample per (identity, frame) where the identity
/// has at least `min_history` matched detections behind it and a true next
/// detection in front: the Kalman filter runs along the identity's past
/// detections and the deltas are measured against the next one.
pub fn build_inlier_dataset(
    frames: &[FrameObservations],
    gt: &GroundTruth,
    scene: Option<usize>,
    kalman: &KalmanParams,
    min_history: usize,
    raw_last_distance: bool,
) -> Vec<AssociationSample> {
    use std::collections::BTreeMap;

    let mut gt_by_frame: BTreeMap<u32, Vec<(u32, BBox)>> = BTreeMap::new();
    for r in &gt.rows {
        gt_by_frame.entry(r.frame).or_default().push((r.id, r.bbox));
    }

    struct IdState {
        kf: KalmanState,
        history: Vec<[f64; 5]>,
        matched: usize,
    }
    let mut states: BTreeMap<u32, IdState> = BTreeMap::new();
    let mut samples = Vec::new();

    for frame_obs in frames {
        let matches = match gt_by_frame.get(&frame_obs.frame) {
            Some(gts) => match_detections_to_gt(gts, &frame_obs.detections),
            None => Vec::new(),
        };
        let matched_by_id: BTreeMap<u32, usize> = matches.into_iter().collect();

        // Advance every filter once per frame (prediction spans detector
        // gaps), then update and possibly emit on matches.
        for (id, st) in states.iter_mut() {
            let (next, z) = kf_predict(&st.kf, kalman);
            st.kf = next;
            if let Some(&det_row) = matched_by_id.get(id) {
                let det = &frame_obs.detections[det_row];
                if st.matched >= min_history {
                    let mut predicted = [z[0], z[1], z[2], z[3], z[4]];
                    if raw_last_distance {
                        if let Some(last) = st.history.last() {
                            predicted[4] = last[4];
                        }
                    }
                    if let Ok(window) = build_window(&st.history) {
                        samples.push(AssociationSample {
                            deltas: compute_deltas(&predicted, det),
                            window,
                            scene,
                        });
                    }
                }
                let zm = Measurement::from(Track::observation(det));
                if let Ok(updated) = kf_update(&st.kf, &zm, det.dist_var, kalman) {
                    st.kf = updated;
                }
                st.history.push(Track::observation(det));
                if st.history.len() > WINDOW_LEN + 1 {
                    let excess = st.history.len() - (WINDOW_LEN + 1);
                    st.history.drain(..excess);
                }
                st.matched += 1;
            }
        }

        // Initialize filters for identities seen for the first time.
        for (id, det_row) in &matched_by_id {
            if states.contains_key(id) {
                continue;
            }
            let det = &frame_obs.detections[*det_row];
            states.insert(
                *id,
                IdState {
                    kf: kf_init(det, kalman),
                    history: vec![Track::observation(det)],
                    matched: 1,
                },
            );
        }
    }
    samples
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{evaluate, EvalFilter};
    use crate::sim::{generate_scenario, render_detections, ScenarioConfig};

    /// Noiseless scenario with pedestrians on separated depth lanes, so no
    /// provider ever faces an ambiguous association.
    fn quiet_scenario(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            ped_count_min: 2,
            ped_count_max: 2,
            frames: 80,
            miss_base: 0.0,
            miss_occlusion_slope: 0.0,
            false_positive_rate: 0.0,
            box_jitter_std: 0.0,
            dist_noise_std: 0.0,
            heading_noise_std: 0.0,
            world: [-8.0, 8.0, 5.0, 26.0],
            lane_crossing: true,
            seed,
            ..ScenarioConfig::default()
        }
    }

    /// Gate tight enough that the two quiet-scenario lanes never share a
    /// candidate (their image separation stays above 140 px).
    fn quiet_gate() -> Gate {
        Gate {
            center_px: 100.0,
            dist_m: 10.0,
        }
    }

    fn run(
        config: &ScenarioConfig,
        provider: &CostProvider,
        params: &TrackerParams,
    ) -> (TrackOutput, GroundTruth) {
        let scenario = generate_scenario(config).unwrap();
        let (frames, gt) = render_detections(&scenario, "seq").unwrap();
        let out = track_sequence(&frames, provider, Some(&scenario.descriptor), params).unwrap();
        (out, gt)
    }

    #[test]
    fn noiseless_sequence_tracks_perfectly_with_iou_and_euclidean() {
        let config = quiet_scenario(3);
        let params = TrackerParams {
            n_init: 1,
            gate: quiet_gate(),
            ..TrackerParams::default()
        };
        for provider in [CostProvider::Iou, CostProvider::Euclidean] {
            let (out, gt) = run(&config, &provider, &params);
            let report = evaluate(&gt, &out.to_pred_rows(), &[], &EvalFilter::default()).unwrap();
            assert_eq!(
                report.idf1().unwrap(),
                1.0,
                "provider {} IDF1",
                provider.name()
            );
            assert_eq!(report.tracking.idsw, 0);
        }
    }

    #[test]
    fn empty_sequence_gives_empty_output() {
        let out = track_sequence(&[], &CostProvider::Iou, None, &TrackerParams::default()).unwrap();
        assert!(out.rows.is_empty());
    }

    #[test]
    fn track_retires_after_max_age_and_reappearance_gets_new_id() {
        let config = quiet_scenario(7);
        let scenario = generate_scenario(&config).unwrap();
        let (mut frames, _) = render_detections(&scenario, "seq").unwrap();
        // Withhold every detection for max_age + 1 frames in the middle.
        let params = TrackerParams {
            n_init: 1,
            max_age: 5,
            gate: quiet_gate(),
            ..TrackerParams::default()
        };
        let gap = 20..(20 + params.max_age as usize + 2);
        for f in gap.clone() {
            frames[f].detections.clear();
        }
        let out = track_sequence(
            &frames,
            &CostProvider::Iou,
            Some(&scenario.descriptor),
            &params,
        )
        .unwrap();
        let ids_before: std::collections::BTreeSet<u32> = out
            .rows
            .iter()
            .filter(|r| (r.frame as usize) < gap.start)
            .map(|r| r.id)
            .collect();
        let ids_after: std::collections::BTreeSet<u32> = out
            .rows
            .iter()
            .filter(|r| (r.frame as usize) >= gap.end)
            .map(|r| r.id)
            .collect();
        assert!(!ids_before.is_empty() && !ids_after.is_empty());
        assert!(
            ids_before.is_disjoint(&ids_after),
            "retired ids must not be reused: {ids_before:?} vs {ids_after:?}"
        );
    }

    #[test]
    fn removed_tracks_never_emit_again() {
        // Lifecycle monotonicity over the retirement test output.
        let config = quiet_scenario(8);
        let scenario = generate_scenario(&config).unwrap();
        let (mut frames, _) = render_detections(&scenario, "seq").unwrap();
        let params = TrackerParams {
            n_init: 1,
            max_age: 3,
            gate: quiet_gate(),
            ..TrackerParams::default()
        };
        for f in 30..45 {
            frames[f].detections.clear();
        }
        let out = track_sequence(
            &frames,
            &CostProvider::Euclidean,
            Some(&scenario.descriptor),
            &params,
        )
        .unwrap();
        let mut last_frame: std::collections::HashMap<u32, u32> = Default::default();
        let mut first_frame: std::collections::HashMap<u32, u32> = Default::default();
        for r in &out.rows {
            first_frame.entry(r.id).or_insert(r.frame);
            last_frame.insert(r.id, r.frame);
        }
        for (id, &last) in &last_frame {
            let first = first_frame[id];
            let span_rows: Vec<u32> = out
                .rows
                .iter()
                .filter(|r| r.id == *id)
                .map(|r| r.frame)
                .collect();
            for w in span_rows.windows(2) {
                assert!(
                    w[1] - w[0] <= params.max_age + 1,
                    "track {id} re-emitted after retirement ({first}..{last})"
                );
            }
        }
    }

    #[test]
    fn provider_swap_changes_only_association_decisions() {
        // On an unambiguous scenario both providers make identical
        // decisions, so the matched-pair logs and outputs coincide.
        let config = quiet_scenario(11);
        let params = TrackerParams {
            n_init: 1,
            gate: quiet_gate(),
            ..TrackerParams::default()
        };
        let (out_iou, _) = run(&config, &CostProvider::Iou, &params);
        let (out_euc, _) = run(&config, &CostProvider::Euclidean, &params);
        let pairs = |o: &TrackOutput| {
            o.diagnostics
                .assoc_log
                .iter()
                .filter(|e| e.accepted)
                .map(|e| (e.frame, e.track_id, e.det_index))
                .collect::<Vec<_>>()
        };
        assert_eq!(pairs(&out_iou), pairs(&out_euc));
        assert_eq!(out_iou.rows, out_euc.rows);
    }

    #[test]
    fn no_track_id_maps_to_two_gt_ids_in_one_frame() {
        let config = ScenarioConfig {
            seed: 21,
            ..ScenarioConfig::default()
        };
        let (out, gt) = run(&config, &CostProvider::Iou, &TrackerParams::default());
        // For every frame, a track id appears at most once.
        let mut seen: std::collections::HashSet<(u32, u32)> = Default::default();
        for r in &out.rows {
            assert!(seen.insert((r.frame, r.id)), "duplicate row {r:?}");
        }
        let _ = gt;
    }

    #[test]
    fn two_stage_reduces_to_single_stage_without_low_detections() {
        let config = quiet_scenario(13);
        let scenario = generate_scenario(&config).unwrap();
        let (frames, _) = render_detections(&scenario, "seq").unwrap();
        // All detections in the quiet scenario have confidence ~0.95.
        let single = TrackerParams {
            n_init: 1,
            det_conf: 0.6,
            gate: quiet_gate(),
            ..TrackerParams::default()
        };
        let two = TrackerParams {
            two_stage: Some(TwoStageParams {
                high_conf: 0.6,
                low_conf: 0.1,
                min_iou: 0.3,
            }),
            ..single.clone()
        };
        // Pin every confidence above the high threshold so the second
        // stage sees no detections at all.
        let mut frames = frames;
        for f in frames.iter_mut() {
            for d in f.detections.iter_mut() {
                d.confidence = 0.95;
            }
        }
        let a = track_sequence(&frames, &CostProvider::Iou, None, &single).unwrap();
        let b = track_sequence(&frames, &CostProvider::Iou, None, &two).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn two_stage_keeps_tracks_alive_through_low_confidence_stretches() {
        let config = quiet_scenario(17);
        let scenario = generate_scenario(&config).unwrap();
        let (mut frames, _) = render_detections(&scenario, "seq").unwrap();
        // Degrade confidence to 0.3 for a stretch of frames.
        for f in 30..50 {
            for d in frames[f].detections.iter_mut() {
                d.confidence = 0.3;
            }
        }
        let single = TrackerParams {
            n_init: 1,
            det_conf: 0.6,
            max_age: 40,
            gate: quiet_gate(),
            ..TrackerParams::default()
        };
        let two = TrackerParams {
            two_stage: Some(TwoStageParams::default()),
            ..single.clone()
        };
        let a = track_sequence(&frames, &CostProvider::Iou, None, &single).unwrap();
        let b = track_sequence(&frames, &CostProvider::Iou, None, &two).unwrap();
        let rows_in_gap =
            |o: &TrackOutput| o.rows.iter().filter(|r| (30..50).contains(&(r.frame as usize))).count();
        assert_eq!(rows_in_gap(&a), 0, "single stage drops the stretch");
        assert!(rows_in_gap(&b) > 0, "second stage recovers the stretch");
        // Determinism under identical inputs.
        let b2 = track_sequence(&frames, &CostProvider::Iou, None, &two).unwrap();
        assert_eq!(b.rows, b2.rows);
    }

    #[test]
    fn inlier_deltas_vanish_on_noiseless_constant_velocity_motion() {
        // Hand-built observations whose five observables are all exactly
        // linear in time, with a noise-matched filter: every delta after
        // the two-observation warmup must vanish.
        let mut frames = Vec::new();
        let mut gt = GroundTruth::default();
        for f in 0..30u32 {
            let t = f as f64;
            let mk = |cx: f64, cy: f64, w: f64, h: f64, d: f64| Detection {
                bbox: BBox::new(cx, cy, w, h),
                dist_mean: d,
                dist_var: 1e-6,
                confidence: 0.95,
                frame: f,
                gt_id: None,
            };
            let a = mk(100.0 + 3.0 * t, 200.0 + 1.0 * t, 30.0, 60.0 + 0.2 * t, 15.0 - 0.1 * t);
            let b = mk(800.0 - 2.0 * t, 400.0, 40.0 + 0.1 * t, 80.0, 10.0 + 0.05 * t);
            for (id, d) in [(0u32, &a), (1u32, &b)] {
                gt.rows.push(crate::sim::GtRow {
                    frame: f,
                    id,
                    bbox: d.bbox,
                    distance: d.dist_mean,
                    occlusion: 0.0,
                });
            }
            frames.push(FrameObservations {
                frame: f,
                detections: vec![a, b],
                scene_id: "seq".into(),
            });
        }
        let samples = build_inlier_dataset(
            &frames,
            &gt,
            None,
            &KalmanParams {
                process_pos: 0.0,
                process_size: 0.0,
                process_dist: 0.0,
                process_vel: 0.0,
                meas_pos: 1e-9,
                meas_size: 1e-9,
                meas_dist_floor: 1e-12,
                init_vel_var: 1000.0,
            },
            2,
            false,
        );
        assert_eq!(samples.len(), 2 * (30 - 2));
        for s in &samples {
            for v in s.deltas.to_array() {
                assert!(v.abs() < 1e-6, "delta {v} on noiseless CV motion");
            }
        }
    }

    #[test]
    fn inlier_sample_count_contract() {
        let config = quiet_scenario(23);
        let scenario = generate_scenario(&config).unwrap();
        let (frames, gt) = render_detections(&scenario, "seq").unwrap();
        let min_history = 2;
        let samples = build_inlier_dataset(
            &frames,
            &gt,
            None,
            &KalmanParams::default(),
            min_history,
            false,
        );
        // Visible span per id (all detected in the noiseless config).
        let mut spans: std::collections::HashMap<u32, usize> = Default::default();
        for r in &gt.rows {
            *spans.entry(r.id).or_default() += 1;
        }
        let expected: usize = spans
            .values()
            .map(|&s| s.saturating_sub(min_history))
            .sum();
        assert_eq!(samples.len(), expected);
    }

    #[test]
    fn inlier_jitter_propagates_into_delta_spread() {
        let config = ScenarioConfig {
            box_jitter_std: 2.0,
            miss_base: 0.0,
            miss_occlusion_slope: 0.0,
            false_positive_rate: 0.0,
            dist_noise_std: 0.0,
            heading_noise_std: 0.0,
            frames: 300,
            ped_count_min: 4,
            ped_count_max: 4,
            speed_min: 0.6,
            speed_max: 0.9,
            world: [-10.0, 10.0, 10.0, 26.0],
            lane_crossing: true,
            seed: 29,
            ..ScenarioConfig::default()
        };
        let scenario = generate_scenario(&config).unwrap();
        let (frames, gt) = render_detections(&scenario, "seq").unwrap();
        let samples =
            build_inlier_dataset(&frames, &gt, None, &KalmanParams::default(), 2, false);
        assert!(samples.len() > 500);
        let dx: Vec<f64> = samples.iter().map(|s| s.deltas.dx).collect();
        let mean = dx.iter().sum::<f64>() / dx.len() as f64;
        let std =
            (dx.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dx.len() as f64).sqrt();
        assert!(
            (1.5..=3.5).contains(&std),
            "jittered dx std {std} outside the Monte-Carlo propagation band"
        );
    }
}
