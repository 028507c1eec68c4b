//! Adaptive fusion of per-branch score maps.
//!
//! Each branch gets an energy `E_l = C'C - 2C'y` measuring how well its
//! response `C` on a recent training sample matches its label `y`. The
//! fusion weights minimize `m'E + reg * m'm` over the probability simplex,
//! solved in closed form by a KKT breakpoint scan. Score maps of different
//! resolutions are merged by exact trigonometric (Fourier zero-padding)
//! interpolation onto the finest grid, with phases chosen so that *cell
//! centers* align across grids: output cell `j` samples the input at
//! fractional index `(j + 0.5) * in/out - 0.5`.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::filter::{detect, BranchModel};
use crate::signal::{dft2, idft2_real_lossy, SpatialMap, SpectrumMap};

/// A real-valued response surface over the search region.
pub type ScoreMap = SpatialMap;

/// Simplex-constrained per-branch weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    m: Vec<f64>,
}

impl FusionWeights {
    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Parameter("weight vector must be nonempty".into()));
        }
        Ok(Self { m: vec![1.0 / len as f64; len] })
    }

    pub fn values(&self) -> &[f64] {
        &self.m
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Exponential blend toward `other`, then exact renormalization.
    pub fn blend(&mut self, other: &FusionWeights, t: f64) {
        for (a, b) in self.m.iter_mut().zip(&other.m) {
            *a = (1.0 - t) * *a + t * b;
        }
        let sum: f64 = self.m.iter().sum();
        for v in &mut self.m {
            *v /= sum;
        }
    }
}

/// Branch energy on one sample: `E = C'C - 2 C'y` with `C = detect(sample)`.
/// Equivalently `||C - y||^2 - ||y||^2`, so it is minimized at `-||y||^2`.
pub fn branch_energy(model: &BranchModel, sample: &[SpatialMap]) -> Result<f64> {
    let response = detect(sample, model)?;
    let mut quad = 0.0;
    let mut cross = 0.0;
    for (c, y) in response.data().iter().zip(model.label.data()) {
        quad += c * c;
        cross += c * y;
    }
    Ok(quad - 2.0 * cross)
}

/// Minimizes `m'E + reg * m'm` over the probability simplex.
///
/// KKT conditions give `m_l = max(0, (mu - E_l) / (2 reg))` with `mu` the
/// unique multiplier making the weights sum to 1; `mu` is found by sorting
/// energies and scanning breakpoints. Lower energy never receives a smaller
/// weight. The result is renormalized so the simplex constraints hold
/// exactly.
pub fn solve_weights(energies: &[f64], reg: f64) -> Result<FusionWeights> {
    if energies.is_empty() {
        return Err(Error::Parameter("energy vector must be nonempty".into()));
    }
    if !(reg > 0.0) {
        return Err(Error::Parameter(format!("reg must be positive, got {reg}")));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numeric("branch energies must be finite".into()));
    }
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&a, &b| {
        energies[a]
            .partial_cmp(&energies[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    // With the j lowest energies active: mu_j = (2 reg + sum E_i) / j.
    // Valid when every active weight is positive and the next energy is
    // already at or above mu_j.
    let mut prefix = 0.0;
    let mut mu = 0.0;
    let mut active = energies.len();
    for (j, &idx) in order.iter().enumerate() {
        prefix += energies[idx];
        let candidate = (2.0 * reg + prefix) / (j + 1) as f64;
        let next = order.get(j + 1).map(|&i| energies[i]);
        let positive = candidate > energies[idx];
        let bounded = next.is_none_or(|e| candidate <= e);
        if positive && bounded {
            mu = candidate;
            active = j + 1;
            break;
        }
    }
    let mut m = vec![0.0; energies.len()];
    for &idx in order.iter().take(active) {
        m[idx] = (mu - energies[idx]).max(0.0) / (2.0 * reg);
    }
    let sum: f64 = m.iter().sum();
    for v in &mut m {
        *v /= sum;
    }
    Ok(FusionWeights { m })
}

/// Signed frequency of bin `i` on an axis of length `n`.
fn signed_freq(i: usize, n: usize) -> i64 {
    let i = i as i64;
    let n = n as i64;
    if i <= n / 2 {
        i
    } else {
        i - n
    }
}

/// Exact trigonometric upsampling of a periodic map to `(out_w, out_h)` by
/// Fourier zero-padding, phase-shifted so cell centers align across the two
/// grids. Nyquist bins of even input sizes are split between the positive
/// and negative halves to keep the interpolant real.
pub fn upsample_trig(map: &SpatialMap, out_w: usize, out_h: usize) -> Result<SpatialMap> {
    let (in_w, in_h) = map.dims();
    if out_w < in_w || out_h < in_h {
        return Err(Error::Parameter(format!(
            "output {out_w}x{out_h} must not be smaller than input {in_w}x{in_h}"
        )));
    }
    if (out_w, out_h) == (in_w, in_h) {
        return Ok(map.clone());
    }
    let spec = dft2(map);
    let mut padded = SpectrumMap::zeros(out_w, out_h);

    // Cell-center alignment: output index j samples input position
    // (j + 0.5) in/out - 0.5, i.e. a phase of pi*f*(1/out - 1/in) per axis.
    let phase_x = |f: i64| std::f64::consts::PI * f as f64 * (1.0 / out_w as f64 - 1.0 / in_w as f64);
    let phase_y = |f: i64| std::f64::consts::PI * f as f64 * (1.0 / out_h as f64 - 1.0 / in_h as f64);

    for v in 0..in_h {
        let fy = signed_freq(v, in_h);
        // An even-size Nyquist row splits into +n/2 and -n/2 halves.
        let y_parts: Vec<(i64, f64)> = if in_h % 2 == 0 && v == in_h / 2 {
            vec![(fy, 0.5), (-fy, 0.5)]
        } else {
            vec![(fy, 1.0)]
        };
        for u in 0..in_w {
            let fx = signed_freq(u, in_w);
            let x_parts: Vec<(i64, f64)> = if in_w % 2 == 0 && u == in_w / 2 {
                vec![(fx, 0.5), (-fx, 0.5)]
            } else {
                vec![(fx, 1.0)]
            };
            let value = spec.at(u, v);
            for &(fyy, wy) in &y_parts {
                for &(fxx, wx) in &x_parts {
                    let ou = fxx.rem_euclid(out_w as i64) as usize;
                    let ov = fyy.rem_euclid(out_h as i64) as usize;
                    let rot = Complex::from_polar(1.0, phase_x(fxx) + phase_y(fyy));
                    let current = padded.at(ou, ov);
                    padded.set(ou, ov, current + value * rot * (wx * wy));
                }
            }
        }
    }
    let mut out = idft2_real_lossy(&padded);
    let gain = (out_w * out_h) as f64 / (in_w * in_h) as f64;
    out.scale_in_place(gain);
    Ok(out)
}

/// Resamples every map to `out_size` and forms the weighted sum
/// `sum_l m_l * map_l`.
pub fn fuse_scores(
    maps: &[ScoreMap],
    weights: &FusionWeights,
    out_size: (usize, usize),
) -> Result<ScoreMap> {
    if maps.is_empty() {
        return Err(Error::Parameter("at least one score map is required".into()));
    }
    if maps.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} maps but {} weights",
            maps.len(),
            weights.len()
        )));
    }
    let mut fused = SpatialMap::zeros(out_size.0, out_size.1);
    for (map, &weight) in maps.iter().zip(weights.values()) {
        let resampled = upsample_trig(map, out_size.0, out_size.1)?;
        fused.axpy(weight, &resampled);
    }
    Ok(fused)
}

/// Fits a parabola through three samples at -1, 0, +1 and returns the vertex
/// offset clamped to [-0.5, 0.5].
fn quadratic_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Locates the peak of a score map: integer argmax (ties resolved toward
/// the lowest row, then the lowest column) refined by a separable 3x3
/// quadratic fit over cyclic neighbors. Returns the sub-cell peak and the
/// unrefined peak value.
pub fn localize(score: &ScoreMap) -> Result<((f64, f64), f64)> {
    let (w, h) = score.dims();
    let mut best = f64::NEG_INFINITY;
    let mut bx = 0usize;
    let mut by = 0usize;
    let mut seen_finite = false;
    for y in 0..h {
        for x in 0..w {
            let v = score.at(x, y);
            if v.is_nan() {
                continue;
            }
            seen_finite = true;
            if v > best {
                best = v;
                bx = x;
                by = y;
            }
        }
    }
    if !seen_finite {
        return Err(Error::Numeric("score map contains no finite values".into()));
    }
    let left = score.at((bx + w - 1) % w, by);
    let right = score.at((bx + 1) % w, by);
    let up = score.at(bx, (by + h - 1) % h);
    let down = score.at(bx, (by + 1) % h);
    let dx = quadratic_offset(left, best, right);
    let dy = quadratic_offset(up, best, down);
    Ok(((bx as f64 + dx, by as f64 + dy), best))
}
