//! Constant-velocity Kalman filter over the target center, plus the motion
//! map that gates features around the predicted position.
//!
//! State is `[x, y, dx, dy]` in pixels and pixels/frame. Prediction and
//! correction follow the standard time/measurement update pair; the
//! innovation covariance is `S = H P H' + R`. The fused detection peak is
//! the measurement; the filter's own output is only used to center the next
//! search region and motion map, never to overwrite the reported box.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::signal::{hann_profile, SpatialMap};

/// Filter state: estimate and error covariance.
#[derive(Debug, Clone)]
pub struct KalmanState {
    /// `[x, y, dx, dy]`
    pub x_hat: Vector4<f64>,
    /// 4x4 symmetric positive semidefinite error covariance.
    pub p: Matrix4<f64>,
}

impl KalmanState {
    /// State at a known position with unknown velocity: position variance 1,
    /// velocity variance 100.
    pub fn at_position(x: f64, y: f64) -> Self {
        Self {
            x_hat: Vector4::new(x, y, 0.0, 0.0),
            p: Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 100.0, 100.0)),
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x_hat[0], self.x_hat[1])
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.x_hat[2], self.x_hat[3])
    }
}

/// Model matrices of the constant-velocity filter. The control term is
/// fixed to zero.
#[derive(Debug, Clone)]
pub struct KalmanConfig {
    pub f: Matrix4<f64>,
    pub h: Matrix2x4<f64>,
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
}

impl KalmanConfig {
    /// Constant-velocity model with process noise
    /// `q * diag(0.25, 0.25, 1, 1)` and measurement noise `r * I`.
    pub fn constant_velocity(q: f64, r: f64) -> Result<Self> {
        if !(q >= 0.0 && r >= 0.0) {
            return Err(Error::Parameter(format!(
                "noise scales must be nonnegative, got q={q} r={r}"
            )));
        }
        #[rustfmt::skip]
        let f = Matrix4::new(
            1.0, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 1.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        #[rustfmt::skip]
        let h = Matrix2x4::new(
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
        );
        Ok(Self {
            f,
            h,
            q: Matrix4::from_diagonal(&Vector4::new(0.25 * q, 0.25 * q, q, q)),
            r: Matrix2::identity() * r,
        })
    }
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self::constant_velocity(1e-2, 4.0).expect("default noise scales are valid")
    }
}

fn symmetrize(m: &Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

/// Time update: `x <- F x`, `P <- F P F' + Q`, with symmetry re-enforced by
/// averaging with the transpose.
pub fn km_predict(state: &KalmanState, config: &KalmanConfig) -> Result<KalmanState> {
    if !state.x_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("kalman state is non-finite".into()));
    }
    let x_hat = config.f * state.x_hat;
    let p = symmetrize(&(config.f * state.p * config.f.transpose() + config.q));
    Ok(KalmanState { x_hat, p })
}

/// Measurement update with measurement `z = (x, y)`:
/// `y = z - H x`, `S = H P H' + R`, `K = P H' S^-1`, `x <- x + K y`,
/// `P <- (I - K H) P`.
pub fn km_update(state: &KalmanState, z: (f64, f64), config: &KalmanConfig) -> Result<KalmanState> {
    if !(z.0.is_finite() && z.1.is_finite()) {
        return Err(Error::Numeric("measurement is non-finite".into()));
    }
    let z = Vector2::new(z.0, z.1);
    let innovation = z - config.h * state.x_hat;
    let s = config.h * state.p * config.h.transpose() + config.r;
    let s_inv = s.try_inverse().ok_or(Error::Conditioning)?;
    let gain = state.p * config.h.transpose() * s_inv;
    let x_hat = state.x_hat + gain * innovation;
    let p = symmetrize(&((Matrix4::identity() - gain * config.h) * state.p));
    Ok(KalmanState { x_hat, p })
}

/// Innovation `z - H x` for diagnostics.
pub fn innovation(state: &KalmanState, z: (f64, f64), config: &KalmanConfig) -> (f64, f64) {
    let r = Vector2::new(z.0, z.1) - config.h * state.x_hat;
    (r[0], r[1])
}

/// Predicted position for the next search region, clamped to the frame.
/// Does not mutate the stored state; the tracker commits the prediction once
/// per frame.
pub fn predict_search_center(
    state: &KalmanState,
    config: &KalmanConfig,
    frame_bounds: (usize, usize),
) -> Result<(f64, f64)> {
    let predicted = km_predict(state, config)?;
    let (x, y) = predicted.position();
    Ok((
        x.clamp(0.0, (frame_bounds.0 as f64 - 1.0).max(0.0)),
        y.clamp(0.0, (frame_bounds.1 as f64 - 1.0).max(0.0)),
    ))
}

/// Window shape used for the motion prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionMapKind {
    Cosine,
    Gaussian,
}

/// Builds a motion map over a layer grid: values in `[0, 1]` peaking at the
/// cell nearest `center` (given in layer-cell coordinates).
///
/// The cosine kind is a translated Hann window, zero outside its support;
/// when `center` is the grid middle it coincides with
/// [`crate::signal::cosine_window`]. The gaussian kind decays with plain
/// (non-cyclic) distance and `spread` controls its sigma in cells.
pub fn motion_map(
    layer_size: (usize, usize),
    center: (f64, f64),
    kind: MotionMapKind,
    spread: f64,
) -> Result<SpatialMap> {
    let (w, h) = layer_size;
    if w == 0 || h == 0 {
        return Err(Error::Dimension("motion map grid must be nonempty".into()));
    }
    match kind {
        MotionMapKind::Cosine => {
            let px = hann_profile(w)?;
            let py = hann_profile(h)?;
            let mid_x = (w as f64 - 1.0) / 2.0;
            let mid_y = (h as f64 - 1.0) / 2.0;
            let sample = |profile: &[f64], idx: f64| -> f64 {
                if idx < 0.0 || idx > (profile.len() - 1) as f64 {
                    return 0.0;
                }
                let lo = idx.floor() as usize;
                let hi = (lo + 1).min(profile.len() - 1);
                let t = idx - lo as f64;
                profile[lo] * (1.0 - t) + profile[hi] * t
            };
            let mut map = SpatialMap::zeros(w, h);
            for y in 0..h {
                for x in 0..w {
                    let vx = sample(&px, x as f64 - center.0 + mid_x);
                    let vy = sample(&py, y as f64 - center.1 + mid_y);
                    map.set(x, y, vx * vy);
                }
            }
            Ok(map)
        }
        MotionMapKind::Gaussian => {
            if !(spread > 0.0) {
                return Err(Error::Parameter(format!(
                    "gaussian motion map needs positive spread, got {spread}"
                )));
            }
            let inv = 1.0 / (2.0 * spread * spread);
            let mut map = SpatialMap::zeros(w, h);
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 - center.0;
                    let dy = y as f64 - center.1;
                    map.set(x, y, (-(dx * dx + dy * dy) * inv).exp());
                }
            }
            Ok(map)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_velocity_prediction_keeps_position() {
        let config = KalmanConfig::default();
        let state = KalmanState::at_position(5.0, 7.0);
        let predicted = km_predict(&state, &config).unwrap();
        assert_eq!(predicted.position(), (5.0, 7.0));
    }

    #[test]
    fn prediction_takes_one_euler_step() {
        let config = KalmanConfig::default();
        let mut state = KalmanState::at_position(0.0, 0.0);
        state.x_hat[2] = 2.0;
        state.x_hat[3] = -1.0;
        let predicted = km_predict(&state, &config).unwrap();
        assert_eq!(predicted.position(), (2.0, -1.0));
    }

    #[test]
    fn prediction_never_shrinks_trace_with_psd_process_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = KalmanConfig::constant_velocity(0.05, 4.0).unwrap();
        let mut state = KalmanState::at_position(0.0, 0.0);
        for _ in 0..50 {
            let before = state.p.trace();
            state = km_predict(&state, &config).unwrap();
            assert!(state.p.trace() >= before - 1e-12);
            state = km_update(&state, (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)), &config)
                .unwrap();
        }
    }

    #[test]
    fn update_with_exact_prediction_changes_nothing() {
        let config = KalmanConfig::default();
        let state = km_predict(&KalmanState::at_position(3.0, 4.0), &config).unwrap();
        let (px, py) = state.position();
        let updated = km_update(&state, (px, py), &config).unwrap();
        assert!((updated.x_hat[0] - px).abs() < 1e-12);
        assert!((updated.x_hat[1] - py).abs() < 1e-12);
    }

    #[test]
    fn infinite_measurement_noise_ignores_the_measurement() {
        let config = KalmanConfig::constant_velocity(1e-2, 1e12).unwrap();
        let state = km_predict(&KalmanState::at_position(10.0, 10.0), &config).unwrap();
        let updated = km_update(&state, (500.0, -500.0), &config).unwrap();
        let delta = (updated.x_hat - state.x_hat).norm();
        assert!(delta < 1e-6, "state moved by {delta}");
    }

    #[test]
    fn zero_measurement_noise_snaps_position_to_measurement() {
        let config = KalmanConfig::constant_velocity(1e-2, 0.0).unwrap();
        let state = km_predict(&KalmanState::at_position(10.0, 10.0), &config).unwrap();
        let updated = km_update(&state, (12.5, 9.5), &config).unwrap();
        assert!((updated.x_hat[0] - 12.5).abs() < 1e-8);
        assert!((updated.x_hat[1] - 9.5).abs() < 1e-8);
    }

    #[test]
    fn constant_velocity_track_is_recovered_from_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let config = KalmanConfig::default();
        let (vx, vy) = (3.0, 0.0);
        let sigma = 2.0;
        let mut truth: (f64, f64) = (0.0, 0.0);
        let mut state = KalmanState::at_position(0.0, 0.0);
        let mut meas_sq = 0.0;
        let mut est_sq = 0.0;
        let mut vel_err_sum = 0.0;
        let mut n = 0.0;
        for step in 0..200 {
            truth = (truth.0 + vx, truth.1 + vy);
            let gauss = |rng: &mut ChaCha8Rng| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            let z = (truth.0 + sigma * gauss(&mut rng), truth.1 + sigma * gauss(&mut rng));
            state = km_predict(&state, &config).unwrap();
            state = km_update(&state, z, &config).unwrap();
            if step >= 100 {
                let (ex, ey) = state.position();
                meas_sq += (z.0 - truth.0).powi(2) + (z.1 - truth.1).powi(2);
                est_sq += (ex - truth.0).powi(2) + (ey - truth.1).powi(2);
                vel_err_sum += (state.velocity().0 - vx).abs();
                n += 1.0;
            }
        }
        assert!((est_sq / n).sqrt() < (meas_sq / n).sqrt());
        // Settled velocity: the mean error past step 100 and the final
        // estimate both stay within 0.2 of truth.
        assert!(vel_err_sum / n < 0.2);
        assert!((state.velocity().0 - vx).abs() < 0.2);
    }

    #[test]
    fn corrected_trajectory_is_smoother_than_raw_measurements() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let config = KalmanConfig::default();
        let (vx, vy) = (2.0, -1.0);
        let mut truth: (f64, f64) = (0.0, 0.0);
        let mut state = KalmanState::at_position(0.0, 0.0);
        let mut raw = Vec::new();
        let mut corrected = Vec::new();
        for _ in 0..150 {
            truth = (truth.0 + vx, truth.1 + vy);
            let z = (
                truth.0 + rng.gen_range(-2.0..2.0),
                truth.1 + rng.gen_range(-2.0..2.0),
            );
            state = km_predict(&state, &config).unwrap();
            state = km_update(&state, z, &config).unwrap();
            raw.push(z);
            corrected.push(state.position());
        }
        let second_diff_energy = |points: &[(f64, f64)]| -> f64 {
            points
                .windows(3)
                .map(|w| {
                    let ax = w[2].0 - 2.0 * w[1].0 + w[0].0;
                    let ay = w[2].1 - 2.0 * w[1].1 + w[0].1;
                    ax * ax + ay * ay
                })
                .sum()
        };
        assert!(second_diff_energy(&corrected) < second_diff_energy(&raw));
    }

    #[test]
    fn covariance_stays_symmetric_psd_through_many_cycles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = KalmanConfig::default();
        let mut state = KalmanState::at_position(50.0, 50.0);
        for _ in 0..10_000 {
            state = km_predict(&state, &config).unwrap();
            let z = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
            state = km_update(&state, z, &config).unwrap();
            let asym = (state.p - state.p.transpose()).norm();
            assert!(asym < 1e-9);
            let eigen = state.p.symmetric_eigen();
            for v in eigen.eigenvalues.iter() {
                assert!(*v >= -1e-6, "covariance eigenvalue {v} went negative");
            }
        }
    }

    #[test]
    fn search_center_is_clamped_to_frame() {
        let config = KalmanConfig::default();
        let mut state = KalmanState::at_position(5.0, 5.0);
        state.x_hat[2] = -10.0;
        let center = predict_search_center(&state, &config, (100, 100)).unwrap();
        assert_eq!(center.0, 0.0);
        assert_eq!(center.1, 5.0);
    }

    #[test]
    fn search_center_applies_velocity() {
        let config = KalmanConfig::default();
        let mut state = KalmanState::at_position(10.0, 10.0);
        state.x_hat[2] = 4.0;
        state.x_hat[3] = 3.0;
        let center = predict_search_center(&state, &config, (100, 100)).unwrap();
        assert_eq!(center, (14.0, 13.0));
    }

    #[test]
    fn zero_velocity_search_center_is_unchanged() {
        let config = KalmanConfig::default();
        let state = KalmanState::at_position(50.0, 50.0);
        let center = predict_search_center(&state, &config, (100, 100)).unwrap();
        assert_eq!(center, (50.0, 50.0));
    }

    #[test]
    fn centered_cosine_motion_map_matches_cosine_window() {
        let (w, h) = (9, 7);
        let centered = motion_map(
            (w, h),
            ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
            MotionMapKind::Cosine,
            1.0,
        )
        .unwrap();
        let window = crate::signal::cosine_window(w, h).unwrap();
        for (a, b) in centered.data().iter().zip(window.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_gaussian_spread_is_nearly_flat() {
        let map = motion_map((12, 12), (5.5, 5.5), MotionMapKind::Gaussian, 1e6).unwrap();
        for v in map.data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn shifting_the_center_shifts_the_argmax() {
        let base = motion_map((15, 15), (7.0, 7.0), MotionMapKind::Cosine, 1.0).unwrap();
        let moved = motion_map((15, 15), (9.0, 7.0), MotionMapKind::Cosine, 1.0).unwrap();
        let argmax = |m: &SpatialMap| {
            let mut best = (0usize, 0usize);
            let mut bv = f64::NEG_INFINITY;
            for y in 0..m.height() {
                for x in 0..m.width() {
                    if m.at(x, y) > bv {
                        bv = m.at(x, y);
                        best = (x, y);
                    }
                }
            }
            best
        };
        let a = argmax(&base);
        let b = argmax(&moved);
        assert_eq!(b.0, a.0 + 2);
        assert_eq!(b.1, a.1);
    }

    #[test]
    fn gaussian_motion_map_requires_positive_spread() {
        assert!(matches!(
            motion_map((8, 8), (4.0, 4.0), MotionMapKind::Gaussian, 0.0),
            Err(Error::Parameter(_))
        ));
    }
}
