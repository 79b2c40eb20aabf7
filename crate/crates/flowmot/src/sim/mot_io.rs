//! MOTChallenge-format text I/O plus the sidecar files the toolkit needs.
//!
//! Box rows follow `frame,id,bb_left,bb_top,w,h,conf,-1,-1,-1` with frames
//! and ids 1-based on disk (0-based in memory). Distances travel in a
//! sidecar `frame,id,dist_mean,dist_var`; ground truth adds an occlusion
//! sidecar `frame,id,occlusion`. Boxes and confidences are written with 4
//! decimals, distances and occlusions with 6; a round trip reproduces the
//! values at that precision.

use super::{GroundTruth, GtRow};
use crate::context::SceneDescriptor;
use crate::error::{Error, Result};
use crate::types::{BBox, Detection, FrameObservations};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// One box row in memory (frames and ids 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct MotRow {
    pub frame: u32,
    pub id: u32,
    pub bbox: BBox,
    pub conf: f64,
}

/// Writes bytes to `path` via a temp file plus rename so interrupted runs
/// never leave partial artifacts.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes box rows in the MOTChallenge text format.
pub fn export_mot(rows: &[MotRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},-1,-1,-1\n",
            r.frame + 1,
            r.id + 1,
            r.bbox.left(),
            r.bbox.top(),
            r.bbox.w,
            r.bbox.h,
            r.conf
        ));
    }
    out
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses a MOTChallenge box file; malformed rows fail with their line
/// number, and non-positive box extents are rejected.
pub fn import_mot(path: &Path) -> Result<Vec<MotRow>> {
    let raw = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 10 comma-separated fields, got {}", parts.len()),
            ));
        }
        let frame: i64 = parts[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad frame number"))?;
        let id: i64 = parts[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad id"))?;
        if frame < 1 || id < 1 {
            return Err(parse_err(path, lineno, "frame and id must be >= 1"));
        }
        let mut f = [0.0f64; 5];
        for (k, part) in parts[2..7].iter().enumerate() {
            f[k] = part
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad numeric field {}", k + 3)))?;
        }
        let [left, top, w, h, conf] = f;
        if w <= 0.0 || h <= 0.0 {
            return Err(parse_err(
                path,
                lineno,
                format!("non-positive box extents w={w} h={h}"),
            ));
        }
        rows.push(MotRow {
            frame: (frame - 1) as u32,
            id: (id - 1) as u32,
            bbox: BBox::from_ltwh(left, top, w, h),
            conf,
        });
    }
    Ok(rows)
}

fn export_dist(rows: &[(u32, u32, f64, f64)]) -> String {
    let mut out = String::new();
    for (frame, id, mean, var) in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", frame + 1, id + 1, mean, var));
    }
    out
}

pub fn import_dist(path: &Path) -> Result<BTreeMap<(u32, u32), (f64, f64)>> {
    let raw = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(parse_err(path, lineno, "expected 4 fields"));
        }
        let frame: u32 = parts[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad frame"))?;
        let id: u32 = parts[1].parse().map_err(|_| parse_err(path, lineno, "bad id"))?;
        let mean: f64 = parts[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad distance"))?;
        let var: f64 = parts[3]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad variance"))?;
        map.insert((frame - 1, id - 1), (mean, var));
    }
    Ok(map)
}

/// Sequence header stored in `seqinfo.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMeta {
    pub name: String,
    pub frames: u32,
    pub frame_rate: f64,
    pub seed: u64,
    pub descriptor: SceneDescriptor,
}

fn export_meta(meta: &SequenceMeta) -> String {
    let desc: Vec<String> = meta.descriptor.0.iter().map(|v| format!("{v}")).collect();
    format!(
        "name = {}\nframes = {}\nframe_rate = {}\nseed = {}\ndescriptor = {}\n",
        meta.name,
        meta.frames,
        meta.frame_rate,
        meta.seed,
        desc.join(",")
    )
}

fn import_meta(path: &Path) -> Result<SequenceMeta> {
    let raw = fs::read_to_string(path)?;
    let mut name = None;
    let mut frames = None;
    let mut frame_rate = None;
    let mut seed = None;
    let mut descriptor = None;
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, lineno, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "name" => name = Some(value.to_string()),
            "frames" => {
                frames =
                    Some(value.parse().map_err(|_| {
                        parse_err(path, lineno, "bad frame count")
                    })?)
            }
            "frame_rate" => {
                frame_rate =
                    Some(value.parse().map_err(|_| {
                        parse_err(path, lineno, "bad frame rate")
                    })?)
            }
            "seed" => {
                seed = Some(
                    value
                        .parse()
                        .map_err(|_| parse_err(path, lineno, "bad seed"))?,
                )
            }
            "descriptor" => {
                let mut values = Vec::new();
                for piece in value.split(',') {
                    values.push(piece.trim().parse().map_err(|_| {
                        parse_err(path, lineno, "bad descriptor value")
                    })?);
                }
                descriptor = Some(SceneDescriptor(values));
            }
            other => {
                return Err(Error::UnknownKey {
                    path: path.display().to_string(),
                    line: lineno,
                    key: other.to_string(),
                })
            }
        }
    }
    Ok(SequenceMeta {
        name: name.ok_or_else(|| parse_err(path, 0, "missing `name`"))?,
        frames: frames.ok_or_else(|| parse_err(path, 0, "missing `frames`"))?,
        frame_rate: frame_rate.ok_or_else(|| parse_err(path, 0, "missing `frame_rate`"))?,
        seed: seed.ok_or_else(|| parse_err(path, 0, "missing `seed`"))?,
        descriptor: descriptor.ok_or_else(|| parse_err(path, 0, "missing `descriptor`"))?,
    })
}

/// Writes one sequence directory: seqinfo, ground truth (+ distance and
/// occlusion sidecars) and detections (+ distance sidecar).
pub fn save_sequence(
    dir: &Path,
    meta: &SequenceMeta,
    frames: &[FrameObservations],
    gt: &GroundTruth,
) -> Result<()> {
    write_atomic(&dir.join("seqinfo.txt"), export_meta(meta).as_bytes())?;

    let gt_rows: Vec<MotRow> = gt
        .rows
        .iter()
        .map(|r| MotRow {
            frame: r.frame,
            id: r.id,
            bbox: r.bbox,
            conf: 1.0,
        })
        .collect();
    write_atomic(&dir.join("gt.txt"), export_mot(&gt_rows).as_bytes())?;
    let gt_dist: Vec<(u32, u32, f64, f64)> = gt
        .rows
        .iter()
        .map(|r| (r.frame, r.id, r.distance, 0.0))
        .collect();
    write_atomic(&dir.join("gt_dist.txt"), export_dist(&gt_dist).as_bytes())?;
    let mut occ = String::new();
    for r in &gt.rows {
        occ.push_str(&format!("{},{},{:.6}\n", r.frame + 1, r.id + 1, r.occlusion));
    }
    write_atomic(&dir.join("gt_occ.txt"), occ.as_bytes())?;

    let mut det_rows = Vec::new();
    let mut det_dist = Vec::new();
    for f in frames {
        for (i, d) in f.detections.iter().enumerate() {
            det_rows.push(MotRow {
                frame: f.frame,
                id: i as u32,
                bbox: d.bbox,
                conf: d.confidence,
            });
            det_dist.push((f.frame, i as u32, d.dist_mean, d.dist_var));
        }
    }
    write_atomic(&dir.join("det.txt"), export_mot(&det_rows).as_bytes())?;
    write_atomic(&dir.join("det_dist.txt"), export_dist(&det_dist).as_bytes())?;
    Ok(())
}

/// A sequence directory loaded back into memory. Imported detections carry
/// no ground-truth identity; training recovers correspondence by box
/// overlap against the ground truth.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub meta: SequenceMeta,
    pub frames: Vec<FrameObservations>,
    pub gt: GroundTruth,
}

pub fn load_sequence(dir: &Path) -> Result<LoadedSequence> {
    let meta = import_meta(&dir.join("seqinfo.txt"))?;

    let det_path = dir.join("det.txt");
    let det_rows = import_mot(&det_path)?;
    let det_dist = import_dist(&dir.join("det_dist.txt"))?;
    let mut frames: Vec<FrameObservations> = (0..meta.frames)
        .map(|frame| FrameObservations {
            frame,
            detections: Vec::new(),
            scene_id: meta.name.clone(),
        })
        .collect();
    for r in &det_rows {
        if r.frame >= meta.frames {
            return Err(Error::SequenceMismatch(format!(
                "{}: detection frame {} beyond seqinfo frame count {}",
                det_path.display(),
                r.frame + 1,
                meta.frames
            )));
        }
        let (mean, var) = *det_dist.get(&(r.frame, r.id)).ok_or_else(|| {
            Error::SequenceMismatch(format!(
                "missing distance sidecar entry for frame {} id {}",
                r.frame + 1,
                r.id + 1
            ))
        })?;
        frames[r.frame as usize].detections.push(Detection {
            bbox: r.bbox,
            dist_mean: mean,
            dist_var: var.max(1e-9),
            confidence: r.conf,
            frame: r.frame,
            gt_id: None,
        });
    }

    let gt_rows = import_mot(&dir.join("gt.txt"))?;
    let gt_dist = import_dist(&dir.join("gt_dist.txt"))?;
    let occ_path = dir.join("gt_occ.txt");
    let occ_raw = fs::read_to_string(&occ_path)?;
    let mut occ_map: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (i, line) in occ_raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(parse_err(&occ_path, i + 1, "expected 3 fields"));
        }
        let frame: u32 = parts[0]
            .parse()
            .map_err(|_| parse_err(&occ_path, i + 1, "bad frame"))?;
        let id: u32 = parts[1]
            .parse()
            .map_err(|_| parse_err(&occ_path, i + 1, "bad id"))?;
        let occ: f64 = parts[2]
            .parse()
            .map_err(|_| parse_err(&occ_path, i + 1, "bad occlusion"))?;
        occ_map.insert((frame - 1, id - 1), occ);
    }
    let mut gt = GroundTruth::default();
    for r in &gt_rows {
        let key = (r.frame, r.id);
        let (distance, _) = *gt_dist.get(&key).ok_or_else(|| {
            Error::SequenceMismatch(format!(
                "missing gt distance for frame {} id {}",
                r.frame + 1,
                r.id + 1
            ))
        })?;
        let occlusion = *occ_map.get(&key).unwrap_or(&0.0);
        gt.rows.push(GtRow {
            frame: r.frame,
            id: r.id,
            bbox: r.bbox,
            distance,
            occlusion,
        });
    }

    Ok(LoadedSequence { meta, frames, gt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scenario, render_detections, ScenarioConfig};
    use approx::assert_relative_eq;

    #[test]
    fn empty_sequence_exports_empty_body() {
        assert_eq!(export_mot(&[]), "");
    }

    #[test]
    fn two_frame_round_trip_is_exact_at_written_precision() {
        let rows = vec![
            MotRow {
                frame: 0,
                id: 0,
                bbox: BBox::from_ltwh(10.5, 20.25, 30.0, 60.0),
                conf: 0.9,
            },
            MotRow {
                frame: 0,
                id: 1,
                bbox: BBox::from_ltwh(100.0, 40.0, 25.5, 51.0),
                conf: 1.0,
            },
            MotRow {
                frame: 1,
                id: 0,
                bbox: BBox::from_ltwh(12.5, 21.25, 30.0, 60.0),
                conf: 0.875,
            },
            MotRow {
                frame: 1,
                id: 1,
                bbox: BBox::from_ltwh(99.0, 41.0, 25.5, 51.0),
                conf: 0.5,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.txt");
        write_atomic(&path, export_mot(&rows).as_bytes()).unwrap();
        let back = import_mot(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn import_rejects_non_positive_extent_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        let body = "1,1,5.0,5.0,10.0,20.0,1.0,-1,-1,-1\n1,2,5.0,5.0,-3.0,20.0,1.0,-1,-1,-1\n";
        write_atomic(&path, body.as_bytes()).unwrap();
        match import_mot(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn import_rejects_malformed_rows_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        write_atomic(&path, b"1,1,5.0,5.0\n").unwrap();
        match import_mot(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn sequence_directory_round_trip() {
        let config = ScenarioConfig {
            frames: 25,
            seed: 31,
            ..ScenarioConfig::default()
        };
        let scenario = generate_scenario(&config).unwrap();
        let (frames, gt) = render_detections(&scenario, "seq_0000").unwrap();
        let meta = SequenceMeta {
            name: "seq_0000".into(),
            frames: config.frames,
            frame_rate: config.frame_rate,
            seed: config.seed,
            descriptor: scenario.descriptor.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        save_sequence(dir.path(), &meta, &frames, &gt).unwrap();
        let loaded = load_sequence(dir.path()).unwrap();
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.frames.len(), frames.len());
        assert_eq!(loaded.gt.rows.len(), gt.rows.len());
        for (a, b) in loaded.gt.rows.iter().zip(gt.rows.iter()) {
            assert_eq!(a.frame, b.frame);
            assert_eq!(a.id, b.id);
            assert_relative_eq!(a.bbox.w, b.bbox.w, epsilon = 1e-3);
            assert_relative_eq!(a.distance, b.distance, epsilon = 1e-5);
            assert_relative_eq!(a.occlusion, b.occlusion, epsilon = 1e-5);
        }
        for (fa, fb) in loaded.frames.iter().zip(frames.iter()) {
            assert_eq!(fa.detections.len(), fb.detections.len());
            for (da, db) in fa.detections.iter().zip(fb.detections.iter()) {
                assert_relative_eq!(da.bbox.cx, db.bbox.cx, epsilon = 1e-3);
                assert_relative_eq!(da.dist_mean, db.dist_mean, epsilon = 1e-5);
                assert_relative_eq!(da.confidence, db.confidence, epsilon = 1e-3);
                assert_eq!(da.gt_id, None);
            }
        }
    }
}
