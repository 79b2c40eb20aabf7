//! Shared domain types and elementary box operations.

use serde::{Deserialize, Serialize};

/// Axis-aligned bounding box stored as center plus extents, in pixels.
///
/// Center/extent storage keeps the box aligned with the Kalman state and the
/// association deltas, which are all defined on center coordinates; corner
/// accessors are provided for intersection arithmetic and file formats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "box extents must be positive");
        Self { cx, cy, w, h }
    }

    /// Builds a box from left/top corner plus extents (MOT file convention).
    pub fn from_ltwh(left: f64, top: f64, w: f64, h: f64) -> Self {
        Self::new(left + w / 2.0, top + h / 2.0, w, h)
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.left().max(other.left());
        let ih = self.bottom().min(other.bottom()) - self.top().max(other.top());
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
///
/// All three areas are computed from the same corner coordinates so that
/// `iou(a, a) == 1.0` holds exactly in floating point.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let area_a = (a.right() - a.left()) * (a.bottom() - a.top());
    let area_b = (b.right() - b.left()) * (b.bottom() - b.top());
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of `target`'s area covered by the union of the occluders.
///
/// The union is computed exactly by coordinate compression: the occluder
/// rectangles are clipped to the target, their edge coordinates split the
/// target into a grid, and covered cells are summed.
pub fn occlusion_level(target: &BBox, occluders: &[BBox]) -> f64 {
    debug_assert!(target.is_valid());
    let clipped: Vec<(f64, f64, f64, f64)> = occluders
        .iter()
        .filter_map(|o| {
            let l = o.left().max(target.left());
            let r = o.right().min(target.right());
            let t = o.top().max(target.top());
            let b = o.bottom().min(target.bottom());
            if r > l && b > t {
                Some((l, r, t, b))
            } else {
                None
            }
        })
        .collect();
    if clipped.is_empty() {
        return 0.0;
    }

    let mut xs: Vec<f64> = clipped.iter().flat_map(|c| [c.0, c.1]).collect();
    let mut ys: Vec<f64> = clipped.iter().flat_map(|c| [c.2, c.3]).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    ys.dedup();

    let mut covered = 0.0;
    for ix in 0..xs.len() - 1 {
        let (x0, x1) = (xs[ix], xs[ix + 1]);
        let mx = 0.5 * (x0 + x1);
        for iy in 0..ys.len() - 1 {
            let (y0, y1) = (ys[iy], ys[iy + 1]);
            let my = 0.5 * (y0 + y1);
            if clipped
                .iter()
                .any(|c| mx > c.0 && mx < c.1 && my > c.2 && my < c.3)
            {
                covered += (x1 - x0) * (y1 - y0);
            }
        }
    }
    (covered / target.area()).clamp(0.0, 1.0)
}

/// One observed box per pedestrian per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Reported camera distance in meters; always positive.
    pub dist_mean: f64,
    /// Reported variance of the distance estimate in meters squared.
    pub dist_var: f64,
    /// Detector confidence in `[0, 1]`.
    pub confidence: f64,
    pub frame: u32,
    /// Ground-truth identity, present only for simulator output; false
    /// positives carry `None`.
    pub gt_id: Option<u32>,
}

impl Detection {
    pub fn is_valid(&self) -> bool {
        self.bbox.is_valid()
            && self.dist_mean > 0.0
            && self.dist_var > 0.0
            && (0.0..=1.0).contains(&self.confidence)
    }
}

/// All detections observed in one frame of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservations {
    pub frame: u32,
    pub detections: Vec<Detection>,
    /// Sequence identifier used to look up the scene descriptor.
    pub scene_id: String,
}

/// The 5-vector of signed differences an association would incur, computed
/// as prediction minus candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaFeatures {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
    pub dd: f64,
}

impl DeltaFeatures {
    pub fn to_array(self) -> [f64; 5] {
        [self.dx, self.dy, self.dw, self.dh, self.dd]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Reduced 3-vector `[|Δp|, |Δwh|, Δd]` used by the factorized baseline.
    pub fn to_norms(self) -> [f64; 3] {
        [
            self.dx.hypot(self.dy),
            self.dw.hypot(self.dh),
            self.dd,
        ]
    }
}
