//! Constant-velocity Kalman filter over box + distance state.
//!
//! The state is the 10-vector `[cx, cy, w, h, d, vcx, vcy, vw, vh, vd]` so
//! that the one-step-ahead prediction exposes exactly the five quantities the
//! association deltas are measured against. Distance is filtered jointly with
//! the box rather than by a separate scalar filter; the cross-covariances come
//! for free.

use crate::error::{Error, Result};
use crate::types::Detection;
use nalgebra::{SMatrix, SVector};

pub type StateVec = SVector<f64, 10>;
pub type StateMat = SMatrix<f64, 10, 10>;
pub type Measurement = SVector<f64, 5>;

/// Noise configuration for the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanParams {
    /// Process noise on cx/cy, px² per frame.
    pub process_pos: f64,
    /// Process noise on w/h, px² per frame.
    pub process_size: f64,
    /// Process noise on d, m² per frame.
    pub process_dist: f64,
    /// Process noise on all velocity components, per frame².
    pub process_vel: f64,
    /// Measurement noise on cx/cy, px².
    pub meas_pos: f64,
    /// Measurement noise on w/h, px².
    pub meas_size: f64,
    /// Floor on the distance measurement variance, m². The per-update
    /// variance comes from the sensor's reported value; the floor only guards
    /// against degenerate zero reports.
    pub meas_dist_floor: f64,
    /// Initial variance of every velocity component.
    pub init_vel_var: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            process_pos: 1.0,
            process_size: 1.0,
            process_dist: 0.25,
            process_vel: 0.01,
            // Matches the simulator's default box jitter (std 2 px).
            meas_pos: 4.0,
            meas_size: 4.0,
            meas_dist_floor: 1e-9,
            init_vel_var: 1000.0,
        }
    }
}

/// Gaussian belief over the track state.
#[derive(Debug, Clone)]
pub struct KalmanState {
    pub mean: StateVec,
    pub cov: StateMat,
}

impl KalmanState {
    /// First five mean components, i.e. the measurement-space estimate.
    pub fn measurement(&self) -> Measurement {
        self.mean.fixed_rows::<5>(0).into_owned()
    }
}

fn transition() -> StateMat {
    let mut f = StateMat::identity();
    for i in 0..5 {
        f[(i, i + 5)] = 1.0;
    }
    f
}

fn process_noise(params: &KalmanParams) -> StateMat {
    let mut q = StateMat::zeros();
    q[(0, 0)] = params.process_pos;
    q[(1, 1)] = params.process_pos;
    q[(2, 2)] = params.process_size;
    q[(3, 3)] = params.process_size;
    q[(4, 4)] = params.process_dist;
    for i in 5..10 {
        q[(i, i)] = params.process_vel;
    }
    q
}

fn symmetrize(p: &mut StateMat) {
    let pt = p.transpose();
    *p = (*p + pt) * 0.5;
}

fn clamp_extent_means(mean: &mut StateVec) {
    // w, h, d must stay positive for downstream geometry.
    for i in 2..5 {
        if mean[i] < 1e-6 {
            mean[i] = 1e-6;
        }
    }
}

/// Initializes a track state from a detection: positions from the
/// measurement, velocities zero, covariance diagonal from the params with the
/// distance entry seeded from the sensor's reported variance.
pub fn kf_init(det: &Detection, params: &KalmanParams) -> KalmanState {
    let mut mean = StateVec::zeros();
    mean[0] = det.bbox.cx;
    mean[1] = det.bbox.cy;
    mean[2] = det.bbox.w;
    mean[3] = det.bbox.h;
    mean[4] = det.dist_mean;

    let mut cov = StateMat::zeros();
    cov[(0, 0)] = params.meas_pos;
    cov[(1, 1)] = params.meas_pos;
    cov[(2, 2)] = params.meas_size;
    cov[(3, 3)] = params.meas_size;
    cov[(4, 4)] = det.dist_var.max(params.meas_dist_floor);
    for i in 5..10 {
        cov[(i, i)] = params.init_vel_var;
    }
    KalmanState { mean, cov }
}

/// One constant-velocity prediction step. Returns the advanced state and the
/// predicted measurement `[cx, cy, w, h, d]`.
pub fn kf_predict(state: &KalmanState, params: &KalmanParams) -> (KalmanState, Measurement) {
    let f = transition();
    let mean = f * state.mean;
    let mut cov = f * state.cov * f.transpose() + process_noise(params);
    symmetrize(&mut cov);
    let next = KalmanState { mean, cov };
    let z = next.measurement();
    (next, z)
}

/// Standard Kalman update with the Joseph-form covariance so the symmetry
/// invariant holds exactly. The distance component of the measurement noise
/// is the sensor's reported variance for this observation.
pub fn kf_update(
    state: &KalmanState,
    z: &Measurement,
    z_dist_var: f64,
    params: &KalmanParams,
) -> Result<KalmanState> {
    let mut r = SMatrix::<f64, 5, 5>::zeros();
    r[(0, 0)] = params.meas_pos;
    r[(1, 1)] = params.meas_pos;
    r[(2, 2)] = params.meas_size;
    r[(3, 3)] = params.meas_size;
    r[(4, 4)] = z_dist_var.max(params.meas_dist_floor);

    // H = [I5 | 0], so HPHᵀ is the top-left block.
    let php = state.cov.fixed_view::<5, 5>(0, 0).into_owned();
    let s = php + r;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Numerical("innovation covariance not positive-definite".into()))?;

    let pht = state.cov.fixed_view::<10, 5>(0, 0).into_owned();
    // K = P Hᵀ S⁻¹  via  Kᵀ = S⁻¹ (P Hᵀ)ᵀ.
    let k = chol.solve(&pht.transpose()).transpose();

    let innovation = z - state.measurement();
    let mut mean = state.mean + k * innovation;
    clamp_extent_means(&mut mean);

    let mut ikh = StateMat::identity();
    let kh = {
        let mut m = StateMat::zeros();
        m.fixed_view_mut::<10, 5>(0, 0).copy_from(&k);
        m
    };
    ikh -= kh;
    let mut cov = ikh * state.cov * ikh.transpose() + k * r * k.transpose();
    symmetrize(&mut cov);

    if !mean.iter().all(|v| v.is_finite()) || !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite state after update".into()));
    }
    Ok(KalmanState { mean, cov })
}
