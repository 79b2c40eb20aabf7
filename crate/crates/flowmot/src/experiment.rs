//! Experiment orchestration: scenario presets, the flow training pipeline,
//! file-level commands and the compare/ablate harnesses.

use crate::assoc::CostProvider;
use crate::config::ExperimentConfig;
use crate::context::{kmeans_fit, SceneClusterModel, SceneDescriptor};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::flow::{
    factorized_train, train, AssociationSample, FactorizedBaseline, FlowConfig, FlowModel,
    TrainResult,
};
use crate::kalman::KalmanParams;
use crate::metrics::{evaluate, EvalFilter, MetricsReport};
use crate::sim::{
    generate_scenario, load_sequence, render_detections, save_sequence, write_atomic,
    GroundTruth, ScenarioConfig, SequenceMeta,
};
use crate::track::{build_inlier_dataset, track_sequence, TrackOutput, TrackerParams};
use crate::types::FrameObservations;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Built-in scenario families of increasing association difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Few well-separated wanderers, mild noise.
    Easy,
    /// Denser wandering crowd, moderate detector noise.
    Moderate,
    /// Depth-lane crossings with occlusion-driven misses: the regime where
    /// image-plane costs are ambiguous and camera distance disambiguates.
    Hard,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "easy" => Some(Preset::Easy),
            "moderate" => Some(Preset::Moderate),
            "hard" => Some(Preset::Hard),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Easy => "easy",
            Preset::Moderate => "moderate",
            Preset::Hard => "hard",
        }
    }

    pub fn scenario(self, seed: u64) -> ScenarioConfig {
        match self {
            Preset::Easy => ScenarioConfig {
                ped_count_min: 4,
                ped_count_max: 4,
                frames: 200,
                speed_min: 0.8,
                speed_max: 1.4,
                world: [-8.0, 8.0, 10.0, 24.0],
                miss_base: 0.02,
                miss_occlusion_slope: 0.3,
                false_positive_rate: 0.05,
                box_jitter_std: 1.0,
                dist_noise_std: 0.5,
                seed,
                ..ScenarioConfig::default()
            },
            Preset::Moderate => ScenarioConfig {
                ped_count_min: 7,
                ped_count_max: 7,
                frames: 220,
                speed_min: 0.9,
                speed_max: 1.9,
                world: [-9.0, 9.0, 7.0, 22.0],
                miss_base: 0.05,
                miss_occlusion_slope: 0.6,
                false_positive_rate: 0.2,
                box_jitter_std: 2.0,
                dist_noise_std: 0.5,
                seed,
                ..ScenarioConfig::default()
            },
            Preset::Hard => ScenarioConfig {
                ped_count_min: 8,
                ped_count_max: 8,
                frames: 240,
                speed_min: 1.1,
                speed_max: 1.9,
                world: [-8.0, 8.0, 7.0, 21.0],
                lane_crossing: true,
                miss_base: 0.05,
                miss_occlusion_slope: 0.9,
                false_positive_rate: 0.15,
                box_jitter_std: 1.5,
                dist_noise_std: 0.5,
                seed,
                ..ScenarioConfig::default()
            },
        }
    }
}

/// Number of built-in scenario archetypes with distinct motion statistics.
pub const ARCHETYPE_COUNT: usize = 4;

/// Scenario archetypes for the scene-conditioning study; each family has
/// clearly distinct motion and noise statistics.
pub fn archetype(index: usize, seed: u64) -> ScenarioConfig {
    match index % ARCHETYPE_COUNT {
        0 => ScenarioConfig {
            // Slow strollers, quiet detector.
            ped_count_min: 5,
            ped_count_max: 5,
            frames: 200,
            speed_min: 0.5,
            speed_max: 0.9,
            heading_noise_std: 0.02,
            world: [-8.0, 8.0, 9.0, 22.0],
            miss_base: 0.02,
            miss_occlusion_slope: 0.4,
            false_positive_rate: 0.05,
            box_jitter_std: 0.8,
            dist_noise_std: 0.3,
            seed,
            ..ScenarioConfig::default()
        },
        1 => ScenarioConfig {
            // Fast erratic joggers.
            ped_count_min: 5,
            ped_count_max: 5,
            frames: 200,
            speed_min: 2.2,
            speed_max: 3.0,
            heading_noise_std: 0.12,
            world: [-11.0, 11.0, 8.0, 24.0],
            miss_base: 0.03,
            miss_occlusion_slope: 0.4,
            false_positive_rate: 0.1,
            box_jitter_std: 1.2,
            dist_noise_std: 0.5,
            seed,
            ..ScenarioConfig::default()
        },
        2 => ScenarioConfig {
            // Panning camera: global image motion on top of walking.
            ped_count_min: 5,
            ped_count_max: 5,
            frames: 200,
            speed_min: 1.0,
            speed_max: 1.8,
            world: [-10.0, 10.0, 9.0, 23.0],
            camera: crate::sim::CameraConfig {
                pan_rate: 0.12,
                ..crate::sim::CameraConfig::default()
            },
            miss_base: 0.03,
            miss_occlusion_slope: 0.4,
            false_positive_rate: 0.1,
            box_jitter_std: 1.0,
            dist_noise_std: 0.4,
            seed,
            ..ScenarioConfig::default()
        },
        _ => ScenarioConfig {
            // Far field seen from a high camera: coarse boxes, noisy range.
            ped_count_min: 5,
            ped_count_max: 5,
            frames: 200,
            speed_min: 0.9,
            speed_max: 1.6,
            world: [-12.0, 12.0, 16.0, 34.0],
            camera: crate::sim::CameraConfig {
                height: 7.0,
                pitch: 0.35,
                ..crate::sim::CameraConfig::default()
            },
            miss_base: 0.04,
            miss_occlusion_slope: 0.4,
            false_positive_rate: 0.1,
            box_jitter_std: 2.5,
            dist_noise_std: 0.8,
            dist_noise_prop: 0.01,
            seed,
            ..ScenarioConfig::default()
        },
    }
}

/// Cost providers by name, including the ground-truth-distance variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Iou,
    Euclidean,
    Factorized,
    Flow,
    /// Flow provider fed with ground-truth distances end to end (sensor
    /// bypass in both training and evaluation).
    FlowGt,
}

impl ProviderKind {
    pub fn parse(s: &str) -> Option<ProviderKind> {
        match s {
            "iou" => Some(ProviderKind::Iou),
            "euclidean" => Some(ProviderKind::Euclidean),
            "factorized" => Some(ProviderKind::Factorized),
            "flow" => Some(ProviderKind::Flow),
            "flow-gt" => Some(ProviderKind::FlowGt),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProviderKind::Iou => "iou",
            ProviderKind::Euclidean => "euclidean",
            ProviderKind::Factorized => "factorized",
            ProviderKind::Flow => "flow",
            ProviderKind::FlowGt => "flow-gt",
        }
    }

    pub fn needs_training(self) -> bool {
        matches!(
            self,
            ProviderKind::Factorized | ProviderKind::Flow | ProviderKind::FlowGt
        )
    }

    /// Conditioning only applies to the joint flow variants.
    pub fn conditionable(self) -> bool {
        matches!(self, ProviderKind::Flow | ProviderKind::FlowGt)
    }
}

/// One simulated sequence held in memory.
#[derive(Debug, Clone)]
pub struct SimSequence {
    pub name: String,
    pub config: ScenarioConfig,
    pub descriptor: SceneDescriptor,
    pub frames: Vec<FrameObservations>,
    pub gt: GroundTruth,
}

pub fn simulate_sequence(name: &str, config: &ScenarioConfig) -> Result<SimSequence> {
    let scenario = generate_scenario(config)?;
    let (frames, gt) = render_detections(&scenario, name)?;
    Ok(SimSequence {
        name: name.to_string(),
        config: config.clone(),
        descriptor: scenario.descriptor,
        frames,
        gt,
    })
}

/// Replaces detection distance readings with ground-truth distances (the
/// sensor bypass). True detections are resolved by their simulator identity
/// when present, otherwise by per-frame box overlap; false positives keep
/// their sensor reading.
pub fn bypass_distances(seq: &mut SimSequence) {
    let mut gt_by_key: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut gt_by_frame: BTreeMap<u32, Vec<(u32, crate::types::BBox)>> = BTreeMap::new();
    for r in &seq.gt.rows {
        gt_by_key.insert((r.frame, r.id), r.distance);
        gt_by_frame.entry(r.frame).or_default().push((r.id, r.bbox));
    }
    for frame in seq.frames.iter_mut() {
        for det in frame.detections.iter_mut() {
            let truth = match det.gt_id {
                Some(id) => gt_by_key.get(&(det.frame, id)).copied(),
                None => gt_by_frame.get(&det.frame).and_then(|gts| {
                    gts.iter()
                        .map(|(_, b)| (crate::types::iou(&det.bbox, b), b))
                        .filter(|(ov, _)| *ov >= 0.5)
                        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                        .map(|(_, b)| {
                            // Recover the id via exact box identity.
                            gts.iter()
                                .find(|(_, bb)| bb == b)
                                .map(|(id, _)| gt_by_key[&(det.frame, *id)])
                                .unwrap()
                        })
                }),
            };
            if let Some(d) = truth {
                det.dist_mean = d;
                det.dist_var = 1e-4;
            }
        }
    }
}

/// Fits the scene-cluster model over the descriptors of a sequence set,
/// capping k at the number of distinct descriptors.
pub fn fit_scene_clusters(
    seqs: &[SimSequence],
    k: usize,
    seed: u64,
) -> Result<SceneClusterModel> {
    let descriptors: Vec<SceneDescriptor> =
        seqs.iter().map(|s| s.descriptor.clone()).collect();
    let mut distinct = 0usize;
    let mut seen: Vec<&SceneDescriptor> = Vec::new();
    for d in &descriptors {
        if !seen.iter().any(|q| q.0 == d.0) {
            seen.push(d);
            distinct += 1;
        }
    }
    kmeans_fit(&descriptors, k.min(distinct).max(1), seed)
}

/// Builds the inlier training set over a sequence collection.
pub fn build_inliers_for(
    seqs: &[SimSequence],
    clusters: Option<&SceneClusterModel>,
    kalman: &KalmanParams,
    raw_last_distance: bool,
) -> Vec<AssociationSample> {
    let mut samples = Vec::new();
    for seq in seqs {
        let scene =
            clusters.map(|model| crate::context::assign_cluster(&seq.descriptor, model));
        samples.extend(build_inlier_dataset(
            &seq.frames,
            &seq.gt,
            scene,
            kalman,
            2,
            raw_last_distance,
        ));
    }
    samples
}

/// A trained joint flow with its training statistics.
pub struct TrainedFlow {
    pub model: FlowModel,
    pub result: TrainResult,
}

/// Full training pipeline: scene clustering, inlier extraction, training,
/// and attaching the cluster model to the checkpoint.
pub fn train_flow_model(
    seqs: &[SimSequence],
    config: &FlowConfig,
    kalman: &KalmanParams,
    raw_last_distance: bool,
) -> Result<TrainedFlow> {
    let clusters = if config.scene_conditioning {
        Some(fit_scene_clusters(
            seqs,
            config.clusters,
            derive_seed(config.seed, "scene-kmeans"),
        )?)
    } else {
        None
    };
    let samples = build_inliers_for(seqs, clusters.as_ref(), kalman, raw_last_distance);
    let train_samples: Vec<_> = samples.iter().map(|s| s.to_train()).collect();
    let mut result = train(&train_samples, config)?;
    result.model.scene_clusters = clusters;
    let model = result.model.clone();
    Ok(TrainedFlow { model, result })
}

/// Trains the factorized baseline over the reduced deltas; returns the
/// model and the summed best validation NLL of the three marginals.
pub fn train_factorized_model(
    seqs: &[SimSequence],
    config: &FlowConfig,
    kalman: &KalmanParams,
    raw_last_distance: bool,
) -> Result<(FactorizedBaseline, f64)> {
    let samples = build_inliers_for(seqs, None, kalman, raw_last_distance);
    let reduced: Vec<[f64; 3]> = samples.iter().map(|s| s.deltas.to_norms()).collect();
    let (model, traces) = factorized_train(&reduced, config)?;
    let val: f64 = traces
        .iter()
        .map(|t| {
            t.iter()
                .map(|e| e.val_nll)
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok((model, val))
}

/// Tracks every sequence with the provider and pools the evaluation.
pub fn track_and_evaluate(
    seqs: &[SimSequence],
    provider: &CostProvider,
    params: &TrackerParams,
    aloe_bins: &[(f64, f64)],
    filter: &EvalFilter,
) -> Result<(MetricsReport, Vec<TrackOutput>)> {
    let mut aggregate = MetricsReport::default();
    let mut outputs = Vec::new();
    for seq in seqs {
        let out = track_sequence(&seq.frames, provider, Some(&seq.descriptor), params)?;
        let report = evaluate(&seq.gt, &out.to_pred_rows(), aloe_bins, filter)?;
        aggregate.merge(&report);
        outputs.push(out);
    }
    Ok((aggregate, outputs))
}

/// Configuration of the compare grid.
#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub presets: Vec<Preset>,
    pub providers: Vec<ProviderKind>,
    pub conditioning: Vec<bool>,
    pub seeds: u32,
    pub base_seed: u64,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub flow: FlowConfig,
    pub tracker: TrackerParams,
    pub aloe_bins: Vec<(f64, f64)>,
    pub eval_filter: EvalFilter,
}

impl CompareConfig {
    /// Desk-scale defaults: a small flow that trains in seconds.
    pub fn desk_default() -> Self {
        Self {
            presets: vec![Preset::Hard],
            providers: vec![ProviderKind::Iou, ProviderKind::Flow],
            conditioning: vec![true],
            seeds: 5,
            base_seed: 0,
            train_sequences: 2,
            eval_sequences: 2,
            flow: desk_flow_config(0),
            tracker: TrackerParams::default(),
            aloe_bins: vec![(0.0, 0.3), (0.3, 0.6), (0.6, 1.0)],
            eval_filter: EvalFilter::default(),
        }
    }

    pub fn from_experiment(cfg: &ExperimentConfig) -> Result<Self> {
        let mut presets = Vec::new();
        for p in &cfg.settings.presets {
            presets.push(Preset::parse(p).ok_or_else(|| {
                Error::InvalidInput(format!("unknown preset `{p}` (easy|moderate|hard)"))
            })?);
        }
        let mut providers = Vec::new();
        for p in &cfg.settings.providers {
            providers.push(ProviderKind::parse(p).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown provider `{p}` (iou|euclidean|factorized|flow|flow-gt)"
                ))
            })?);
        }
        Ok(Self {
            presets,
            providers,
            conditioning: cfg.settings.conditioning.clone(),
            seeds: cfg.settings.seeds,
            base_seed: cfg.settings.seed,
            train_sequences: cfg.settings.train_sequences,
            eval_sequences: cfg.settings.eval_sequences,
            flow: cfg.flow.clone(),
            tracker: cfg.tracker.clone(),
            aloe_bins: cfg.settings.aloe_bins.clone(),
            eval_filter: EvalFilter {
                max_distance: cfg.settings.max_gt_distance,
                ..EvalFilter::default()
            },
        })
    }
}

/// Small flow configuration for desk-scale experiments.
pub fn desk_flow_config(seed: u64) -> FlowConfig {
    FlowConfig {
        input_dim: 5,
        blocks: 4,
        hidden: 24,
        ctx_dim: 12,
        encoder_hidden: 16,
        emb_dim: 4,
        clusters: 4,
        scene_conditioning: true,
        learning_rate: 1e-3,
        batch_size: 256,
        epochs: 12,
        val_fraction: 0.1,
        seed,
    }
}

/// One grid cell result for one replicate seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub preset: String,
    pub provider: String,
    /// `None` for providers without a conditioning axis.
    pub conditioned: Option<bool>,
    /// Tracker-knob label for ablation rows; empty for the plain grid.
    pub variant: String,
    pub seed_index: u32,
    pub idf1: Option<f64>,
    pub idsw: usize,
    pub mota: Option<f64>,
    pub val_nll: Option<f64>,
    pub dist_rmse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub cells: Vec<CellResult>,
    pub table: String,
}

struct SeedJob {
    preset: Preset,
    seed_index: u32,
}

fn run_seed_job(
    config: &CompareConfig,
    job: &SeedJob,
    variant: &str,
) -> Result<Vec<CellResult>> {
    let preset = job.preset;
    let rep_seed = derive_seed(
        config.base_seed,
        &format!("{}-rep{}", preset.name(), job.seed_index),
    );

    let mut train_seqs = Vec::with_capacity(config.train_sequences);
    for t in 0..config.train_sequences {
        let s = preset.scenario(derive_seed(rep_seed, &format!("train{t}")));
        train_seqs.push(simulate_sequence(&format!("train_{t}"), &s)?);
    }
    let mut eval_seqs = Vec::with_capacity(config.eval_sequences);
    for t in 0..config.eval_sequences {
        let s = preset.scenario(derive_seed(rep_seed, &format!("eval{t}")));
        eval_seqs.push(simulate_sequence(&format!("eval_{t}"), &s)?);
    }

    // Ground-truth-distance twins, built lazily.
    let mut gt_train: Option<Vec<SimSequence>> = None;
    let mut gt_eval: Option<Vec<SimSequence>> = None;
    fn ensure_gt(
        gt_train: &mut Option<Vec<SimSequence>>,
        gt_eval: &mut Option<Vec<SimSequence>>,
        train_seqs: &[SimSequence],
        eval_seqs: &[SimSequence],
    ) {
        if gt_train.is_none() {
            let mut t = train_seqs.to_vec();
            t.iter_mut().for_each(bypass_distances);
            let mut e = eval_seqs.to_vec();
            e.iter_mut().for_each(bypass_distances);
            *gt_train = Some(t);
            *gt_eval = Some(e);
        }
    }

    let mut cells = Vec::new();
    for &provider in &config.providers {
        let cond_axis: Vec<Option<bool>> = if provider.conditionable() {
            config.conditioning.iter().map(|&c| Some(c)).collect()
        } else {
            vec![None]
        };
        for conditioned in cond_axis {
            let mut flow_config = config.flow.clone();
            flow_config.seed = derive_seed(rep_seed, "flow-train");
            flow_config.scene_conditioning = conditioned.unwrap_or(false);

            let (report, val_nll) = match provider {
                ProviderKind::Iou => {
                    let (r, _) = track_and_evaluate(
                        &eval_seqs,
                        &CostProvider::Iou,
                        &config.tracker,
                        &config.aloe_bins,
                        &config.eval_filter,
                    )?;
                    (r, None)
                }
                ProviderKind::Euclidean => {
                    let (r, _) = track_and_evaluate(
                        &eval_seqs,
                        &CostProvider::Euclidean,
                        &config.tracker,
                        &config.aloe_bins,
                        &config.eval_filter,
                    )?;
                    (r, None)
                }
                ProviderKind::Factorized => {
                    let (model, val) = train_factorized_model(
                        &train_seqs,
                        &flow_config,
                        &config.tracker.kalman,
                        config.tracker.raw_last_distance,
                    )?;
                    let (r, _) = track_and_evaluate(
                        &eval_seqs,
                        &CostProvider::Factorized(&model),
                        &config.tracker,
                        &config.aloe_bins,
                        &config.eval_filter,
                    )?;
                    (r, Some(val))
                }
                ProviderKind::Flow => {
                    let trained = train_flow_model(
                        &train_seqs,
                        &flow_config,
                        &config.tracker.kalman,
                        config.tracker.raw_last_distance,
                    )?;
                    let (r, _) = track_and_evaluate(
                        &eval_seqs,
                        &CostProvider::Flow(&trained.model),
                        &config.tracker,
                        &config.aloe_bins,
                        &config.eval_filter,
                    )?;
                    (r, Some(trained.result.best_val_nll))
                }
                ProviderKind::FlowGt => {
                    ensure_gt(&mut gt_train, &mut gt_eval, &train_seqs, &eval_seqs);
                    let trained = train_flow_model(
                        gt_train.as_ref().unwrap(),
                        &flow_config,
                        &config.tracker.kalman,
                        config.tracker.raw_last_distance,
                    )?;
                    let (r, _) = track_and_evaluate(
                        gt_eval.as_ref().unwrap(),
                        &CostProvider::Flow(&trained.model),
                        &config.tracker,
                        &config.aloe_bins,
                        &config.eval_filter,
                    )?;
                    (r, Some(trained.result.best_val_nll))
                }
            };

            cells.push(CellResult {
                preset: preset.name().to_string(),
                provider: provider.name().to_string(),
                conditioned,
                variant: variant.to_string(),
                seed_index: job.seed_index,
                idf1: report.idf1(),
                idsw: report.tracking.idsw,
                mota: report.mota(),
                val_nll,
                dist_rmse: report.rmse(),
            });
        }
    }
    Ok(cells)
}

fn cond_label(c: Option<bool>) -> &'static str {
    match c {
        Some(true) => "on",
        Some(false) => "off",
        None => "-",
    }
}

/// Aggregates per-seed cells into the report table. Win rates are paired
/// per seed against the IoU baseline of the same preset and variant.
pub fn render_table(cells: &[CellResult]) -> String {
    let mut groups: BTreeMap<(String, String, String, String), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        groups
            .entry((
                c.preset.clone(),
                c.variant.clone(),
                c.provider.clone(),
                cond_label(c.conditioned).to_string(),
            ))
            .or_default()
            .push(c);
    }
    // Baseline idf1 by (preset, variant, seed).
    let mut baseline: BTreeMap<(String, String, u32), f64> = BTreeMap::new();
    for c in cells {
        if c.provider == "iou" {
            if let Some(idf1) = c.idf1 {
                baseline.insert((c.preset.clone(), c.variant.clone(), c.seed_index), idf1);
            }
        }
    }

    fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
        let vals: Vec<f64> = v.collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
    fn fmt(v: Option<f64>) -> String {
        v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
    }

    let mut out = String::from(
        "# compare report v1\n\
         # columns: preset variant provider cond seeds idf1 idsw mota val_nll dist_rmse win_vs_iou\n",
    );
    for ((preset, variant, provider, cond), rows) in &groups {
        let seeds = rows.len();
        let idf1 = mean(rows.iter().filter_map(|r| r.idf1));
        let idsw = rows.iter().map(|r| r.idsw as f64).sum::<f64>() / seeds as f64;
        let mota = mean(rows.iter().filter_map(|r| r.mota));
        let val_nll = mean(rows.iter().filter_map(|r| r.val_nll));
        let rmse = mean(rows.iter().filter_map(|r| r.dist_rmse));
        let win = if provider == "iou" {
            None
        } else {
            let mut wins = 0usize;
            let mut total = 0usize;
            for r in rows {
                if let (Some(b), Some(v)) = (
                    baseline.get(&(preset.clone(), variant.clone(), r.seed_index)),
                    r.idf1,
                ) {
                    total += 1;
                    if v > *b {
                        wins += 1;
                    }
                }
            }
            if total > 0 {
                Some(wins as f64 / total as f64)
            } else {
                None
            }
        };
        let variant_label = if variant.is_empty() { "-" } else { variant };
        out.push_str(&format!(
            "{preset} {variant_label} {provider} {cond} {seeds} {} {idsw:.2} {} {} {} {}\n",
            fmt(idf1),
            fmt(mota),
            fmt(val_nll),
            fmt(rmse),
            fmt(win),
        ));
    }
    out
}

/// Runs the full provider grid over presets and replicate seeds.
pub fn compare(config: &CompareConfig) -> Result<CompareOutcome> {
    let jobs: Vec<SeedJob> = config
        .presets
        .iter()
        .flat_map(|&preset| {
            (0..config.seeds).map(move |seed_index| SeedJob { preset, seed_index })
        })
        .collect();
    let results: Vec<Result<Vec<CellResult>>> = jobs
        .par_iter()
        .map(|job| run_seed_job(config, job, ""))
        .collect();
    let mut cells = Vec::new();
    for r in results {
        cells.extend(r?);
    }
    let table = render_table(&cells);
    Ok(CompareOutcome { cells, table })
}

/// One-factor tracker-knob sweeps around a base configuration.
#[derive(Debug, Clone)]
pub struct AblateConfig {
    pub base: CompareConfig,
    pub sigmas: Vec<f64>,
    pub match_thresholds: Vec<f64>,
    pub negate: Vec<bool>,
    pub raw_last_distance: Vec<bool>,
    pub n_init: Vec<u32>,
    pub max_age: Vec<u32>,
}

impl AblateConfig {
    pub fn desk_default() -> Self {
        Self {
            base: CompareConfig {
                providers: vec![
                    ProviderKind::Iou,
                    ProviderKind::Euclidean,
                    ProviderKind::Factorized,
                    ProviderKind::Flow,
                    ProviderKind::FlowGt,
                ],
                conditioning: vec![true, false],
                ..CompareConfig::desk_default()
            },
            sigmas: vec![0.5, 2.0],
            match_thresholds: vec![0.7, 1.01],
            negate: vec![true],
            raw_last_distance: vec![true],
            n_init: vec![1],
            max_age: vec![10],
        }
    }
}

/// Runs the provider grid plus one-factor knob sweeps for the flow
/// provider, all under the same seeds.
pub fn ablate(config: &AblateConfig) -> Result<CompareOutcome> {
    let mut cells = compare(&config.base)?.cells;

    let mut variants: Vec<(String, TrackerParams)> = Vec::new();
    for &sigma in &config.sigmas {
        let mut t = config.base.tracker.clone();
        t.sigma = sigma;
        variants.push((format!("sigma={sigma}"), t));
    }
    for &thr in &config.match_thresholds {
        let mut t = config.base.tracker.clone();
        t.match_threshold = thr;
        variants.push((format!("match_threshold={thr}"), t));
    }
    for &neg in &config.negate {
        let mut t = config.base.tracker.clone();
        t.negate_before_softmax = neg;
        variants.push((format!("negate={neg}"), t));
    }
    for &raw in &config.raw_last_distance {
        let mut t = config.base.tracker.clone();
        t.raw_last_distance = raw;
        variants.push((format!("raw_last_distance={raw}"), t));
    }
    for &n in &config.n_init {
        let mut t = config.base.tracker.clone();
        t.n_init = n;
        variants.push((format!("n_init={n}"), t));
    }
    for &age in &config.max_age {
        let mut t = config.base.tracker.clone();
        t.max_age = age;
        variants.push((format!("max_age={age}"), t));
    }

    for (label, tracker) in variants {
        let sweep = CompareConfig {
            providers: vec![ProviderKind::Iou, ProviderKind::Flow],
            conditioning: vec![true],
            tracker,
            ..config.base.clone()
        };
        let jobs: Vec<SeedJob> = sweep
            .presets
            .iter()
            .flat_map(|&preset| {
                (0..sweep.seeds).map(move |seed_index| SeedJob { preset, seed_index })
            })
            .collect();
        let results: Vec<Result<Vec<CellResult>>> = jobs
            .par_iter()
            .map(|job| run_seed_job(&sweep, job, &label))
            .collect();
        for r in results {
            cells.extend(r?);
        }
    }

    let table = render_table(&cells);
    Ok(CompareOutcome { cells, table })
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() && path.join("seqinfo.txt").exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no sequence directories under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

/// Writes every scenario as a sequence directory. Deterministic for a
/// fixed config, so reruns are byte-identical.
pub fn cmd_simulate(
    scenarios: &[(String, ScenarioConfig)],
    out_dir: &Path,
) -> Result<Vec<String>> {
    if scenarios.is_empty() {
        return Err(Error::InvalidInput(
            "no [scenario] sections in the config".into(),
        ));
    }
    let mut names = Vec::new();
    for (name, config) in scenarios {
        let seq = simulate_sequence(name, config)?;
        let meta = SequenceMeta {
            name: name.clone(),
            frames: config.frames,
            frame_rate: config.frame_rate,
            seed: config.seed,
            descriptor: seq.descriptor.clone(),
        };
        save_sequence(&out_dir.join(name), &meta, &seq.frames, &seq.gt)?;
        names.push(name.clone());
    }
    Ok(names)
}

/// Loads every sequence directory under a data root.
pub fn load_sequence_dirs(root: &Path) -> Result<Vec<SimSequence>> {
    let mut seqs = Vec::new();
    for dir in sequence_dirs(root)? {
        let loaded = load_sequence(&dir)?;
        seqs.push(SimSequence {
            name: loaded.meta.name.clone(),
            config: ScenarioConfig {
                frames: loaded.meta.frames,
                frame_rate: loaded.meta.frame_rate,
                seed: loaded.meta.seed,
                ..ScenarioConfig::default()
            },
            descriptor: loaded.meta.descriptor.clone(),
            frames: loaded.frames,
            gt: loaded.gt,
        });
    }
    Ok(seqs)
}

/// Trains a flow checkpoint from simulated sequence directories and writes
/// it with its per-epoch NLL trace.
pub fn cmd_train_flow(
    data_dir: &Path,
    flow_config: &FlowConfig,
    kalman: &KalmanParams,
    raw_last_distance: bool,
    out_checkpoint: &Path,
) -> Result<TrainedFlow> {
    let seqs = load_sequence_dirs(data_dir)?;
    let trained = train_flow_model(&seqs, flow_config, kalman, raw_last_distance)?;
    trained.model.save(out_checkpoint)?;
    let mut trace = String::from("# epoch train_nll val_nll\n");
    for e in &trained.result.trace {
        trace.push_str(&format!("{} {:.6} {:.6}\n", e.epoch, e.train_nll, e.val_nll));
    }
    write_atomic(&out_checkpoint.with_extension("trace.txt"), trace.as_bytes())?;
    Ok(trained)
}

/// Tracks every sequence under `data_dir`, writing one prediction directory
/// per sequence (MOT rows, distance sidecar and the association log).
pub fn cmd_track(
    data_dir: &Path,
    provider: ProviderKind,
    checkpoint: Option<&Path>,
    params: &TrackerParams,
    out_dir: &Path,
) -> Result<()> {
    let flow_model = match provider {
        ProviderKind::Flow | ProviderKind::FlowGt => {
            let path = checkpoint
                .ok_or_else(|| Error::MissingCheckpoint(provider.name().to_string()))?;
            Some(FlowModel::load(path)?)
        }
        _ => None,
    };
    let factorized_model = match provider {
        ProviderKind::Factorized => {
            let path = checkpoint
                .ok_or_else(|| Error::MissingCheckpoint(provider.name().to_string()))?;
            Some(FactorizedBaseline::load(path)?)
        }
        _ => None,
    };

    let mut seqs = load_sequence_dirs(data_dir)?;
    if provider == ProviderKind::FlowGt {
        seqs.iter_mut().for_each(bypass_distances);
    }
    for seq in &seqs {
        let cost_provider = match provider {
            ProviderKind::Iou => CostProvider::Iou,
            ProviderKind::Euclidean => CostProvider::Euclidean,
            ProviderKind::Flow | ProviderKind::FlowGt => {
                CostProvider::Flow(flow_model.as_ref().unwrap())
            }
            ProviderKind::Factorized => {
                CostProvider::Factorized(factorized_model.as_ref().unwrap())
            }
        };
        let out = track_sequence(&seq.frames, &cost_provider, Some(&seq.descriptor), params)?;
        let dir = out_dir.join(&seq.name);
        write_atomic(
            &dir.join("pred.txt"),
            crate::sim::export_mot(&out.to_mot_rows()).as_bytes(),
        )?;
        let mut dist = String::new();
        for r in &out.rows {
            dist.push_str(&format!("{},{},{:.6},{:.6}\n", r.frame + 1, r.id + 1, r.distance, 0.0));
        }
        write_atomic(&dir.join("pred_dist.txt"), dist.as_bytes())?;
        write_atomic(
            &dir.join("assoc_log.tsv"),
            crate::track::assoc_log_to_tsv(&out.diagnostics.assoc_log).as_bytes(),
        )?;
        if params.dump_matrices {
            write_atomic(
                &dir.join("cost_matrices.tsv"),
                out.diagnostics.matrix_dump.as_bytes(),
            )?;
        }
    }
    Ok(())
}

/// Evaluates prediction directories against ground-truth directories,
/// writing one report per sequence plus the pooled aggregate.
pub fn cmd_evaluate(
    gt_dir: &Path,
    pred_dir: &Path,
    aloe_bins: &[(f64, f64)],
    filter: &EvalFilter,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let mut aggregate = MetricsReport::default();
    for dir in sequence_dirs(gt_dir)? {
        let loaded = load_sequence(&dir)?;
        let name = loaded.meta.name.clone();
        let pred_path = pred_dir.join(&name).join("pred.txt");
        if !pred_path.exists() {
            return Err(Error::SequenceMismatch(format!(
                "missing predictions for sequence `{name}` at {}",
                pred_path.display()
            )));
        }
        let rows = crate::sim::import_mot(&pred_path)?;
        let dist_path = pred_dir.join(&name).join("pred_dist.txt");
        let dists = if dist_path.exists() {
            crate::sim::import_dist(&dist_path)?
        } else {
            BTreeMap::new()
        };
        let preds: Vec<crate::metrics::PredRow> = rows
            .iter()
            .map(|r| crate::metrics::PredRow {
                frame: r.frame,
                id: r.id,
                bbox: r.bbox,
                distance: dists
                    .get(&(r.frame, r.id))
                    .map(|&(m, _)| m)
                    .unwrap_or(1.0),
                dist_var: None,
            })
            .collect();
        let report = evaluate(&loaded.gt, &preds, aloe_bins, filter)?;
        write_atomic(
            &out_dir.join(format!("{name}.metrics.txt")),
            report.to_text().as_bytes(),
        )?;
        aggregate.merge(&report);
    }
    write_atomic(
        &out_dir.join("aggregate.metrics.txt"),
        aggregate.to_text().as_bytes(),
    )?;
    Ok(aggregate)
}

/// Runs the compare grid and writes the table plus per-cell rows.
pub fn cmd_compare(config: &CompareConfig, out_dir: &Path) -> Result<CompareOutcome> {
    let outcome = compare(config)?;
    write_outcome(&outcome, config.base_seed, out_dir)
}

/// Runs the ablation sweeps and writes the table plus per-cell rows.
pub fn cmd_ablate(config: &AblateConfig, out_dir: &Path) -> Result<CompareOutcome> {
    let outcome = ablate(config)?;
    write_outcome(&outcome, config.base.base_seed, out_dir)
}

fn write_outcome(
    outcome: &CompareOutcome,
    seed: u64,
    out_dir: &Path,
) -> Result<CompareOutcome> {
    let mut table = format!("# seed = {seed}\n");
    table.push_str(&outcome.table);
    write_atomic(&out_dir.join("table.txt"), table.as_bytes())?;
    let mut cells = String::from(
        "preset\tvariant\tprovider\tcond\tseed\tidf1\tidsw\tmota\tval_nll\tdist_rmse\n",
    );
    fn fmt(v: Option<f64>) -> String {
        v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
    }
    for c in &outcome.cells {
        cells.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            c.preset,
            if c.variant.is_empty() { "-" } else { &c.variant },
            c.provider,
            cond_label(c.conditioned),
            c.seed_index,
            fmt(c.idf1),
            c.idsw,
            fmt(c.mota),
            fmt(c.val_nll),
            fmt(c.dist_rmse),
        ));
    }
    write_atomic(&out_dir.join("cells.tsv"), cells.as_bytes())?;
    Ok(outcome.clone())
}
