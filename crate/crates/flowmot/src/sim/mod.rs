//! Synthetic multi-pedestrian scene simulator.
//!
//! Generates ground-truth world trajectories, projects them through a
//! pinhole camera, and renders per-frame detections with configurable miss
//! probabilities, box jitter, false positives and a calibrated noisy
//! distance sensor. Everything is a pure function of `(config, seed)`.

mod mot_io;

pub use mot_io::{
    export_mot, import_dist, import_mot, load_sequence, save_sequence, write_atomic,
    LoadedSequence, MotRow, SequenceMeta,
};

use crate::context::SceneDescriptor;
use crate::error::{Error, Result};
use crate::types::{occlusion_level, BBox, Detection, FrameObservations};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

/// Nominal person height used by the box model, meters.
pub const PERSON_HEIGHT: f64 = 1.7;
/// Box width as a fraction of box height.
const BOX_ASPECT: f64 = 0.4;
/// Minimum depth in front of the camera for a point to be projectable.
const MIN_DEPTH: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point; the implied image spans `[0, 2cx] x [0, 2cy]`.
    pub cx: f64,
    pub cy: f64,
    /// Camera height above the ground plane, meters.
    pub height: f64,
    /// Downward pitch, radians.
    pub pitch: f64,
    /// Pan rate around the vertical axis, radians per second; 0 is static.
    pub pan_rate: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal: 1000.0,
            cx: 960.0,
            cy: 540.0,
            height: 4.0,
            pitch: 0.25,
            pan_rate: 0.0,
        }
    }
}

/// Full scenario description; the simulator is deterministic given this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub ped_count_min: u32,
    pub ped_count_max: u32,
    pub frames: u32,
    /// Frames per second.
    pub frame_rate: f64,
    /// Walking speed range, m/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Per-frame heading noise, radians.
    pub heading_noise_std: f64,
    /// Ground-plane walkable area `[x_min, x_max, y_min, y_max]`, meters.
    pub world: [f64; 4],
    /// When set, each pedestrian patrols a fixed depth lane between the
    /// world's x extents, producing repeated image-space crossings between
    /// pedestrians at distinct depths.
    pub lane_crossing: bool,
    pub camera: CameraConfig,
    /// Base miss probability of the detector.
    pub miss_base: f64,
    /// Additional miss probability per unit occlusion level.
    pub miss_occlusion_slope: f64,
    /// Expected false positives per frame (Poisson).
    pub false_positive_rate: f64,
    /// Box center/extent jitter, pixels.
    pub box_jitter_std: f64,
    /// Distance sensor noise std, meters.
    pub dist_noise_std: f64,
    /// Distance-proportional part: sigma_eff = std * (1 + prop * distance).
    pub dist_noise_prop: f64,
    /// Reported variance = true variance * miscalibration.
    pub miscalibration: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            ped_count_min: 6,
            ped_count_max: 6,
            frames: 200,
            frame_rate: 10.0,
            speed_min: 0.8,
            speed_max: 1.8,
            heading_noise_std: 0.05,
            world: [-9.0, 9.0, 6.0, 24.0],
            lane_crossing: false,
            camera: CameraConfig::default(),
            miss_base: 0.02,
            miss_occlusion_slope: 0.6,
            false_positive_rate: 0.1,
            box_jitter_std: 1.5,
            dist_noise_std: 0.5,
            dist_noise_prop: 0.0,
            miscalibration: 1.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ped_count_min >= 1
            && self.ped_count_max >= self.ped_count_min
            && self.frames >= 1
            && self.frame_rate > 0.0
            && self.speed_min > 0.0
            && self.speed_max >= self.speed_min
            && self.heading_noise_std >= 0.0
            && self.world[1] > self.world[0]
            && self.world[3] > self.world[2]
            && (0.0..=1.0).contains(&self.miss_base)
            && self.miss_occlusion_slope >= 0.0
            && self.false_positive_rate >= 0.0
            && self.box_jitter_std >= 0.0
            && self.dist_noise_std >= 0.0
            && self.dist_noise_prop >= 0.0
            && self.miscalibration > 0.0
            && self.camera.focal > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("invalid scenario config".into()))
        }
    }
}

/// One simulated pedestrian: a body height and a ground-plane trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pedestrian {
    pub height: f64,
    /// Ground positions `[x, y]` per frame.
    pub positions: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub pedestrians: Vec<Pedestrian>,
    pub descriptor: SceneDescriptor,
}

/// Pinhole camera pose at one instant.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    center: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    forward: [f64; 3],
}

impl Camera {
    /// Camera pose for a given frame, applying the pan rate.
    pub fn at_frame(config: &CameraConfig, frame: u32, frame_rate: f64) -> Self {
        let pan = config.pan_rate * frame as f64 / frame_rate;
        let (st, ct) = pan.sin_cos();
        let (sp, cp) = config.pitch.sin_cos();
        Self {
            focal: config.focal,
            cx: config.cx,
            cy: config.cy,
            center: [0.0, 0.0, config.height],
            right: [ct, -st, 0.0],
            up: [st * sp, ct * sp, cp],
            forward: [st * cp, ct * cp, -sp],
        }
    }

    /// Projects a world point. Returns `None` for points at or behind the
    /// camera plane; visible points yield the pixel position and the
    /// Euclidean distance from the camera center.
    pub fn project(&self, p: [f64; 3]) -> Option<((f64, f64), f64)> {
        let rel = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let depth = dot(self.forward, rel);
        if depth < MIN_DEPTH {
            return None;
        }
        let x = self.focal * dot(self.right, rel) / depth + self.cx;
        let y = self.focal * -dot(self.up, rel) / depth + self.cy;
        let dist = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
        Some(((x, y), dist))
    }
}

fn clamp_to_world(p: &mut [f64; 2], world: &[f64; 4]) {
    p[0] = p[0].clamp(world[0], world[1]);
    p[1] = p[1].clamp(world[2], world[3]);
}

/// Generates world trajectories: waypoint walking at constant speed with
/// per-frame heading noise, confined to the configured world box.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = if config.ped_count_max > config.ped_count_min {
        rng.random_range(config.ped_count_min..=config.ped_count_max)
    } else {
        config.ped_count_min
    } as usize;

    let dt = 1.0 / config.frame_rate;
    let [x_min, x_max, y_min, y_max] = config.world;
    let mut pedestrians = Vec::with_capacity(n);
    let mut speeds = Vec::with_capacity(n);

    for ped in 0..n {
        let height = PERSON_HEIGHT * (1.0 + rng.random_range(-0.1..0.1));
        let speed = rng.random_range(config.speed_min..=config.speed_max);
        speeds.push(speed);

        // Lane geometry: a fixed depth band per pedestrian, endpoints at the
        // world x extents, so trajectories cross in image space while the
        // camera distances stay separated.
        let lane_y = y_min + (y_max - y_min) * (ped as f64 + 0.5) / n as f64;
        let mut pos = if config.lane_crossing {
            let dir: f64 = if ped % 2 == 0 { 0.0 } else { 1.0 };
            [
                x_min + (x_max - x_min) * (dir + rng.random_range(0.0..0.3) - 0.15).clamp(0.0f64, 1.0),
                lane_y,
            ]
        } else {
            [
                rng.random_range(x_min..x_max),
                rng.random_range(y_min..y_max),
            ]
        };
        let mut heading_to_right = ped % 2 == 0;
        let mut waypoint = if config.lane_crossing {
            [if heading_to_right { x_max } else { x_min }, lane_y]
        } else {
            [
                rng.random_range(x_min..x_max),
                rng.random_range(y_min..y_max),
            ]
        };

        let mut positions = Vec::with_capacity(config.frames as usize);
        let noise = Normal::new(0.0, config.heading_noise_std.max(1e-12)).unwrap();
        for _ in 0..config.frames {
            positions.push(pos);
            let to = [waypoint[0] - pos[0], waypoint[1] - pos[1]];
            let reach = (to[0] * to[0] + to[1] * to[1]).sqrt();
            if reach < speed * dt * 1.5 {
                if config.lane_crossing {
                    heading_to_right = !heading_to_right;
                    waypoint = [if heading_to_right { x_max } else { x_min }, lane_y];
                } else {
                    waypoint = [
                        rng.random_range(x_min..x_max),
                        rng.random_range(y_min..y_max),
                    ];
                }
                continue;
            }
            let mut heading = to[1].atan2(to[0]);
            if config.heading_noise_std > 0.0 {
                heading += rng.sample(noise);
            }
            pos = [
                pos[0] + speed * dt * heading.cos(),
                pos[1] + speed * dt * heading.sin(),
            ];
            clamp_to_world(&mut pos, &config.world);
        }
        pedestrians.push(Pedestrian { height, positions });
    }

    let mean_speed = speeds.iter().sum::<f64>() / n as f64;
    let descriptor = SceneDescriptor(vec![
        n as f64,
        mean_speed,
        config.heading_noise_std,
        config.camera.pitch,
        config.camera.height,
        config.camera.pan_rate,
        config.miss_base,
        config.false_positive_rate,
        config.box_jitter_std,
        config.dist_noise_std,
    ]);

    Ok(Scenario {
        config: config.clone(),
        pedestrians,
        descriptor,
    })
}

/// Ground-truth record for one visible pedestrian in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRow {
    pub frame: u32,
    pub id: u32,
    pub bbox: BBox,
    pub distance: f64,
    pub occlusion: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rows: Vec<GtRow>,
}

impl GroundTruth {
    pub fn frames(&self) -> u32 {
        self.rows.iter().map(|r| r.frame + 1).max().unwrap_or(0)
    }
}

fn project_pedestrian(cam: &Camera, ped: &Pedestrian, pos: [f64; 2]) -> Option<(BBox, f64)> {
    // Box center sits at mid-body height; the reported distance is measured
    // to the root (ground) point.
    let center = cam.project([pos[0], pos[1], ped.height / 2.0])?;
    let root = cam.project([pos[0], pos[1], 0.0])?;
    let dist = root.1;
    let h_px = cam.focal * ped.height / dist;
    let w_px = h_px * BOX_ASPECT;
    if h_px < 2.0 {
        return None;
    }
    let (x, y) = center.0;
    if x < 0.0 || x > 2.0 * cam.cx || y < 0.0 || y > 2.0 * cam.cy {
        return None;
    }
    Some((BBox::new(x, y, w_px, h_px), dist))
}

/// Renders detector output and the ground-truth table for a scenario.
///
/// Per frame: project visible pedestrians, compute occlusion levels among
/// the projected boxes (closer pedestrians occlude farther ones), drop each
/// detection with probability `miss_base + slope * occlusion`, jitter the
/// surviving boxes, attach noisy distance readings, and add Poisson false
/// positives with sizes sampled from the true boxes of the frame.
pub fn render_detections(
    scenario: &Scenario,
    scene_id: &str,
) -> Result<(Vec<FrameObservations>, GroundTruth)> {
    let config = &scenario.config;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, "render"));
    let jitter = Normal::new(0.0, config.box_jitter_std.max(1e-12)).unwrap();
    let conf_noise = Normal::new(0.0, 0.03).unwrap();

    let mut frames = Vec::with_capacity(config.frames as usize);
    let mut gt = GroundTruth::default();

    for frame in 0..config.frames {
        let cam = Camera::at_frame(&config.camera, frame, config.frame_rate);
        // Visible pedestrians this frame.
        let mut visible: Vec<(u32, BBox, f64, f64)> = Vec::new(); // id, box, dist, height
        for (id, ped) in scenario.pedestrians.iter().enumerate() {
            if let Some((bbox, dist)) =
                project_pedestrian(&cam, ped, ped.positions[frame as usize])
            {
                visible.push((id as u32, bbox, dist, ped.height));
            }
        }

        let mut detections = Vec::new();
        for (i, (id, bbox, dist, _)) in visible.iter().enumerate() {
            let occluders: Vec<BBox> = visible
                .iter()
                .enumerate()
                .filter(|(j, other)| *j != i && other.2 < *dist)
                .map(|(_, other)| other.1)
                .collect();
            let occ = occlusion_level(bbox, &occluders);
            gt.rows.push(GtRow {
                frame,
                id: *id,
                bbox: *bbox,
                distance: *dist,
                occlusion: occ,
            });

            let p_miss = (config.miss_base + config.miss_occlusion_slope * occ).clamp(0.0, 1.0);
            if rng.random::<f64>() < p_miss {
                continue;
            }

            let mut b = *bbox;
            if config.box_jitter_std > 0.0 {
                b.cx += rng.sample(jitter);
                b.cy += rng.sample(jitter);
                b.w = (b.w + rng.sample(jitter) * 0.5).max(2.0);
                b.h = (b.h + rng.sample(jitter) * 0.5).max(2.0);
            }
            let sigma_eff = config.dist_noise_std * (1.0 + config.dist_noise_prop * dist);
            let noise = if sigma_eff > 0.0 {
                rng.sample(Normal::new(0.0, sigma_eff).unwrap())
            } else {
                0.0
            };
            let dist_mean = (dist + noise).max(0.01);
            let dist_var = (sigma_eff * sigma_eff * config.miscalibration).max(1e-9);
            let confidence = (0.95 - 0.45 * occ + rng.sample(conf_noise)).clamp(0.05, 1.0);
            detections.push(Detection {
                bbox: b,
                dist_mean,
                dist_var,
                confidence,
                frame,
                gt_id: Some(*id),
            });
        }

        // False positives: plausible sizes sampled from the frame's true
        // boxes, distance readings consistent with the size model.
        if config.false_positive_rate > 0.0 {
            let n_fp = rng.sample(Poisson::new(config.false_positive_rate).unwrap()) as usize;
            for _ in 0..n_fp {
                let h_px = if visible.is_empty() {
                    rng.random_range(40.0..160.0)
                } else {
                    let pick = rng.random_range(0..visible.len());
                    visible[pick].1.h * rng.random_range(0.85..1.15)
                };
                let w_px = h_px * BOX_ASPECT;
                let cx = rng.random_range(w_px / 2.0..(2.0 * cam.cx - w_px / 2.0));
                let cy = rng.random_range(h_px / 2.0..(2.0 * cam.cy - h_px / 2.0));
                let implied = cam.focal * PERSON_HEIGHT / h_px;
                let sigma_eff = config.dist_noise_std.max(0.1);
                let dist_mean =
                    (implied + rng.sample(Normal::new(0.0, sigma_eff).unwrap())).max(0.01);
                detections.push(Detection {
                    bbox: BBox::new(cx, cy, w_px, h_px),
                    dist_mean,
                    dist_var: (sigma_eff * sigma_eff * config.miscalibration).max(1e-9),
                    confidence: rng.random_range(0.3..0.7),
                    frame,
                    gt_id: None,
                });
            }
        }

        frames.push(FrameObservations {
            frame,
            detections,
            scene_id: scene_id.to_string(),
        });
    }
    Ok((frames, gt))
}
