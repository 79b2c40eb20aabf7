//! Plain-text experiment configuration.
//!
//! Grammar: `key = value` lines grouped under `[section]` headers, with
//! `#` comments and blank lines ignored. Section names may carry an
//! argument (`[scenario hard_custom]`). Unknown keys fail with the file
//! and line so typos never pass silently.
//!
//! ```text
//! [experiment]
//! seed = 42
//! seeds = 8
//! presets = hard
//! providers = iou, flow
//!
//! [flow]
//! blocks = 4
//! hidden = 24
//!
//! [tracker]
//! n_init = 3
//!
//! [scenario crossing]
//! pedestrians = 8
//! frames = 300
//! lane_crossing = true
//! ```

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::sim::ScenarioConfig;
use crate::track::{TrackerParams, TwoStageParams};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub arg: Option<String>,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct ConfigFile {
    pub path: String,
    pub sections: Vec<Section>,
}

impl ConfigFile {
    pub fn parse_str(path: &str, raw: &str) -> Result<ConfigFile> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(header) = line.strip_prefix('[') {
                let header = header.strip_suffix(']').ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line: lineno,
                    msg: "unterminated section header".into(),
                })?;
                let mut parts = header.trim().splitn(2, ' ');
                let name = parts.next().unwrap_or("").to_string();
                let arg = parts.next().map(|s| s.trim().to_string());
                if name.is_empty() {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: lineno,
                        msg: "empty section name".into(),
                    });
                }
                sections.push(Section {
                    name,
                    arg,
                    line: lineno,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: lineno,
                msg: "expected `key = value`".into(),
            })?;
            let section = sections.last_mut().ok_or_else(|| Error::Parse {
                path: path.into(),
                line: lineno,
                msg: "key outside of any [section]".into(),
            })?;
            section.entries.push(Entry {
                key: key.trim().to_string(),
                value: value.trim().to_string(),
                line: lineno,
            });
        }
        Ok(ConfigFile {
            path: path.into(),
            sections,
        })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let raw = std::fs::read_to_string(path)?;
        Self::parse_str(&path.display().to_string(), &raw)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn sections_named(&self, name: &str) -> Vec<&Section> {
        self.sections.iter().filter(|s| s.name == name).collect()
    }
}

fn bad_value(path: &str, e: &Entry, what: &str) -> Error {
    Error::Parse {
        path: path.into(),
        line: e.line,
        msg: format!("invalid {what} `{}` for key `{}`", e.value, e.key),
    }
}

fn parse_f64(path: &str, e: &Entry) -> Result<f64> {
    e.value.parse().map_err(|_| bad_value(path, e, "number"))
}

fn parse_u64(path: &str, e: &Entry) -> Result<u64> {
    e.value.parse().map_err(|_| bad_value(path, e, "integer"))
}

fn parse_u32(path: &str, e: &Entry) -> Result<u32> {
    e.value.parse().map_err(|_| bad_value(path, e, "integer"))
}

fn parse_usize(path: &str, e: &Entry) -> Result<usize> {
    e.value.parse().map_err(|_| bad_value(path, e, "integer"))
}

fn parse_bool(path: &str, e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad_value(path, e, "boolean")),
    }
}

/// Parses `a..b` (range) or a single value `a` as `(a, a)`.
fn parse_range(path: &str, e: &Entry) -> Result<(f64, f64)> {
    if let Some((lo, hi)) = e.value.split_once("..") {
        let lo: f64 = lo.trim().parse().map_err(|_| bad_value(path, e, "range"))?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad_value(path, e, "range"))?;
        Ok((lo, hi))
    } else {
        let v = parse_f64(path, e)?;
        Ok((v, v))
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn unknown_key(path: &str, e: &Entry) -> Error {
    Error::UnknownKey {
        path: path.into(),
        line: e.line,
        key: e.key.clone(),
    }
}

/// Applies a `[scenario]` section on top of a base config.
pub fn scenario_from_section(
    path: &str,
    section: &Section,
    mut config: ScenarioConfig,
) -> Result<ScenarioConfig> {
    for e in &section.entries {
        match e.key.as_str() {
            "pedestrians" => {
                let (lo, hi) = parse_range(path, e)?;
                config.ped_count_min = lo as u32;
                config.ped_count_max = hi as u32;
            }
            "frames" => config.frames = parse_u32(path, e)?,
            "frame_rate" => config.frame_rate = parse_f64(path, e)?,
            "speed" => {
                let (lo, hi) = parse_range(path, e)?;
                config.speed_min = lo;
                config.speed_max = hi;
            }
            "heading_noise" => config.heading_noise_std = parse_f64(path, e)?,
            "world" => {
                let parts = parse_list(&e.value);
                if parts.len() != 4 {
                    return Err(bad_value(path, e, "world box (x0,x1,y0,y1)"));
                }
                for (i, p) in parts.iter().enumerate() {
                    config.world[i] = p.parse().map_err(|_| bad_value(path, e, "world box"))?;
                }
            }
            "lane_crossing" => config.lane_crossing = parse_bool(path, e)?,
            "focal" => config.camera.focal = parse_f64(path, e)?,
            "principal" => {
                let parts = parse_list(&e.value);
                if parts.len() != 2 {
                    return Err(bad_value(path, e, "principal point (cx,cy)"));
                }
                config.camera.cx = parts[0].parse().map_err(|_| bad_value(path, e, "number"))?;
                config.camera.cy = parts[1].parse().map_err(|_| bad_value(path, e, "number"))?;
            }
            "cam_height" => config.camera.height = parse_f64(path, e)?,
            "pitch" => config.camera.pitch = parse_f64(path, e)?,
            "pan_rate" => config.camera.pan_rate = parse_f64(path, e)?,
            "miss_base" => config.miss_base = parse_f64(path, e)?,
            "miss_slope" => config.miss_occlusion_slope = parse_f64(path, e)?,
            "fp_rate" => config.false_positive_rate = parse_f64(path, e)?,
            "jitter" => config.box_jitter_std = parse_f64(path, e)?,
            "dist_noise" => config.dist_noise_std = parse_f64(path, e)?,
            "dist_noise_prop" => config.dist_noise_prop = parse_f64(path, e)?,
            "miscalibration" => config.miscalibration = parse_f64(path, e)?,
            "seed" => config.seed = parse_u64(path, e)?,
            _ => return Err(unknown_key(path, e)),
        }
    }
    config.validate()?;
    Ok(config)
}

/// Applies a `[flow]` section on top of a base config.
pub fn flow_from_section(
    path: &str,
    section: &Section,
    mut config: FlowConfig,
) -> Result<FlowConfig> {
    for e in &section.entries {
        match e.key.as_str() {
            "input_dim" => config.input_dim = parse_usize(path, e)?,
            "blocks" => config.blocks = parse_usize(path, e)?,
            "hidden" => config.hidden = parse_usize(path, e)?,
            "ctx_dim" => config.ctx_dim = parse_usize(path, e)?,
            "encoder_hidden" => config.encoder_hidden = parse_usize(path, e)?,
            "emb_dim" => config.emb_dim = parse_usize(path, e)?,
            "clusters" => config.clusters = parse_usize(path, e)?,
            "scene_conditioning" => config.scene_conditioning = parse_bool(path, e)?,
            "learning_rate" => config.learning_rate = parse_f64(path, e)?,
            "batch_size" => config.batch_size = parse_usize(path, e)?,
            "epochs" => config.epochs = parse_usize(path, e)?,
            "val_fraction" => config.val_fraction = parse_f64(path, e)?,
            "seed" => config.seed = parse_u64(path, e)?,
            _ => return Err(unknown_key(path, e)),
        }
    }
    Ok(config)
}

/// Applies a `[tracker]` section on top of a base config.
pub fn tracker_from_section(
    path: &str,
    section: &Section,
    mut params: TrackerParams,
) -> Result<TrackerParams> {
    for e in &section.entries {
        match e.key.as_str() {
            "det_conf" => params.det_conf = parse_f64(path, e)?,
            "n_init" => params.n_init = parse_u32(path, e)?,
            "max_age" => params.max_age = parse_u32(path, e)?,
            "gate_px" => params.gate.center_px = parse_f64(path, e)?,
            "gate_m" => params.gate.dist_m = parse_f64(path, e)?,
            "sigma" => params.sigma = parse_f64(path, e)?,
            "match_threshold" => params.match_threshold = parse_f64(path, e)?,
            "negate_before_softmax" => params.negate_before_softmax = parse_bool(path, e)?,
            "raw_last_distance" => params.raw_last_distance = parse_bool(path, e)?,
            "dump_matrices" => params.dump_matrices = parse_bool(path, e)?,
            "nll_cap" => params.nll_cap = parse_f64(path, e)?,
            "min_iou" => params.min_iou = parse_f64(path, e)?,
            "two_stage" => {
                if e.value == "off" {
                    params.two_stage = None;
                } else {
                    let parts = parse_list(&e.value);
                    if parts.len() != 3 {
                        return Err(bad_value(path, e, "two_stage (high,low,min_iou or off)"));
                    }
                    let nums: Vec<f64> = parts
                        .iter()
                        .map(|p| p.parse().map_err(|_| bad_value(path, e, "number")))
                        .collect::<Result<_>>()?;
                    params.two_stage = Some(TwoStageParams {
                        high_conf: nums[0],
                        low_conf: nums[1],
                        min_iou: nums[2],
                    });
                }
            }
            "process_pos" => params.kalman.process_pos = parse_f64(path, e)?,
            "process_size" => params.kalman.process_size = parse_f64(path, e)?,
            "process_dist" => params.kalman.process_dist = parse_f64(path, e)?,
            "process_vel" => params.kalman.process_vel = parse_f64(path, e)?,
            "meas_pos" => params.kalman.meas_pos = parse_f64(path, e)?,
            "meas_size" => params.kalman.meas_size = parse_f64(path, e)?,
            "init_vel_var" => params.kalman.init_vel_var = parse_f64(path, e)?,
            _ => return Err(unknown_key(path, e)),
        }
    }
    Ok(params)
}

/// Experiment-level settings shared by the compare and ablate commands.
#[derive(Debug, Clone)]
pub struct ExperimentSettings {
    pub seed: u64,
    pub seeds: u32,
    pub presets: Vec<String>,
    pub providers: Vec<String>,
    pub conditioning: Vec<bool>,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub aloe_bins: Vec<(f64, f64)>,
    pub max_gt_distance: Option<f64>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 5,
            presets: vec!["hard".into()],
            providers: vec!["iou".into(), "flow".into()],
            conditioning: vec![true],
            train_sequences: 2,
            eval_sequences: 2,
            aloe_bins: vec![(0.0, 0.3), (0.3, 0.6), (0.6, 1.0)],
            max_gt_distance: None,
        }
    }
}

pub fn experiment_from_section(
    path: &str,
    section: &Section,
    mut settings: ExperimentSettings,
) -> Result<ExperimentSettings> {
    for e in &section.entries {
        match e.key.as_str() {
            "seed" => settings.seed = parse_u64(path, e)?,
            "seeds" => settings.seeds = parse_u32(path, e)?,
            "presets" => settings.presets = parse_list(&e.value),
            "providers" => settings.providers = parse_list(&e.value),
            "conditioning" => {
                let items = parse_list(&e.value);
                let mut flags = Vec::new();
                for item in items {
                    match item.as_str() {
                        "on" | "true" => flags.push(true),
                        "off" | "false" => flags.push(false),
                        _ => return Err(bad_value(path, e, "conditioning list")),
                    }
                }
                settings.conditioning = flags;
            }
            "train_sequences" => settings.train_sequences = parse_usize(path, e)?,
            "eval_sequences" => settings.eval_sequences = parse_usize(path, e)?,
            "aloe_bins" => {
                let parts = parse_list(&e.value);
                let mut bins = Vec::new();
                for p in parts {
                    let (lo, hi) = p
                        .split_once(':')
                        .ok_or_else(|| bad_value(path, e, "aloe bins (lo:hi, lo:hi, ...)"))?;
                    bins.push((
                        lo.parse().map_err(|_| bad_value(path, e, "number"))?,
                        hi.parse().map_err(|_| bad_value(path, e, "number"))?,
                    ));
                }
                settings.aloe_bins = bins;
            }
            "max_gt_distance" => settings.max_gt_distance = Some(parse_f64(path, e)?),
            _ => return Err(unknown_key(path, e)),
        }
    }
    Ok(settings)
}

/// Everything a full experiment run needs, collected from one file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub settings: ExperimentSettings,
    pub flow: FlowConfig,
    pub tracker: TrackerParams,
    pub scenarios: Vec<(String, ScenarioConfig)>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let file = ConfigFile::load(path)?;
        Self::from_config_file(&file)
    }

    pub fn from_config_file(file: &ConfigFile) -> Result<Self> {
        let mut settings = ExperimentSettings::default();
        if let Some(s) = file.section("experiment") {
            settings = experiment_from_section(&file.path, s, settings)?;
        }
        let mut flow = FlowConfig::default();
        if let Some(s) = file.section("flow") {
            flow = flow_from_section(&file.path, s, flow)?;
        }
        let mut tracker = TrackerParams::default();
        if let Some(s) = file.section("tracker") {
            tracker = tracker_from_section(&file.path, s, tracker)?;
        }
        let mut scenarios = Vec::new();
        for (i, s) in file.sections_named("scenario").into_iter().enumerate() {
            let name = s.arg.clone().unwrap_or_else(|| format!("scenario_{i}"));
            let config = scenario_from_section(&file.path, s, ScenarioConfig::default())?;
            scenarios.push((name, config));
        }
        Ok(ExperimentConfig {
            settings,
            flow,
            tracker,
            scenarios,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# comment
[experiment]
seed = 7
seeds = 3
presets = easy, hard
providers = iou, flow, factorized
conditioning = on, off

[flow]
blocks = 4
hidden = 24

[tracker]
n_init = 2
two_stage = 0.6, 0.1, 0.3

[scenario crossing]
pedestrians = 8
frames = 120
lane_crossing = true
seed = 5
";

    #[test]
    fn parses_a_full_experiment_file() {
        let file = ConfigFile::parse_str("test.cfg", SAMPLE).unwrap();
        let cfg = ExperimentConfig::from_config_file(&file).unwrap();
        assert_eq!(cfg.settings.seed, 7);
        assert_eq!(cfg.settings.seeds, 3);
        assert_eq!(cfg.settings.presets, vec!["easy", "hard"]);
        assert_eq!(cfg.settings.conditioning, vec![true, false]);
        assert_eq!(cfg.flow.blocks, 4);
        assert_eq!(cfg.flow.hidden, 24);
        assert_eq!(cfg.tracker.n_init, 2);
        assert!(cfg.tracker.two_stage.is_some());
        assert_eq!(cfg.scenarios.len(), 1);
        assert_eq!(cfg.scenarios[0].0, "crossing");
        assert_eq!(cfg.scenarios[0].1.ped_count_min, 8);
        assert!(cfg.scenarios[0].1.lane_crossing);
    }

    #[test]
    fn unknown_key_errors_name_key_and_line() {
        let raw = "[flow]\nblocks = 4\nblokcs = 5\n";
        let file = ConfigFile::parse_str("bad.cfg", raw).unwrap();
        match ExperimentConfig::from_config_file(&file) {
            Err(Error::UnknownKey { line, key, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(key, "blokcs");
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let raw = "[flow]\nblocks 4\n";
        match ConfigFile::parse_str("bad.cfg", raw) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let raw = "blocks = 4\n";
        assert!(ConfigFile::parse_str("bad.cfg", raw).is_err());
    }

    #[test]
    fn invalid_scenario_values_are_rejected() {
        let raw = "[scenario x]\nframes = 0\n";
        let file = ConfigFile::parse_str("bad.cfg", raw).unwrap();
        assert!(ExperimentConfig::from_config_file(&file).is_err());
    }
}
