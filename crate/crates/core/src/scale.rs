//! Multi-scale search over a geometric size pyramid.
//!
//! Candidate patches of size `alpha^n * (P, R)` for `n` in a symmetric range
//! are extracted around the localized center, resampled to the canonical
//! grid, and scored with the designated branch's filters (the medium layer
//! by default). The best `n` adjusts the target size through a damping
//! exponent to avoid oscillation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{detect, BranchModel};
use crate::frame::Frame;
use crate::signal::SpatialMap;

/// Scale pyramid parameters.
#[derive(Debug, Clone)]
pub struct ScaleConfig {
    /// Scale step, > 1.
    pub alpha: f64,
    /// Half-width of the symmetric exponent range; candidates are
    /// `n = -steps ..= steps`.
    pub steps: usize,
    /// Fraction of the winning exponent actually applied, in (0, 1].
    pub damping: f64,
    /// Index of the branch whose features score the candidates.
    pub branch: usize,
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(Error::Parameter(format!("scale alpha must exceed 1, got {}", self.alpha)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Parameter(format!(
                "scale damping must lie in (0,1], got {}",
                self.damping
            )));
        }
        Ok(())
    }

    pub fn exponents(&self) -> impl Iterator<Item = i32> + '_ {
        -(self.steps as i32)..=self.steps as i32
    }
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self { alpha: 1.03, steps: 5, damping: 0.8, branch: 1 }
    }
}

/// Candidate sizes `alpha^n * (P, R)` in ascending `n`.
pub fn scale_candidates(target_size: (f64, f64), config: &ScaleConfig) -> Result<Vec<(f64, f64)>> {
    config.validate()?;
    if !(target_size.0 > 0.0 && target_size.1 > 0.0) {
        return Err(Error::Parameter(format!(
            "target size must be positive, got {target_size:?}"
        )));
    }
    Ok(config
        .exponents()
        .map(|n| {
            let s = config.alpha.powi(n);
            (s * target_size.0, s * target_size.1)
        })
        .collect())
}

/// Size multiplier actually applied for a winning exponent, damped to
/// `alpha^(damping * n)`.
pub fn damped_ratio(best_n: i32, config: &ScaleConfig) -> f64 {
    config.alpha.powf(config.damping * best_n as f64)
}

/// Scores every candidate extent with the scale branch and returns the best
/// exponent with its score. `extract` maps `(frame, center, source_size)`
/// to the branch's windowed feature channels at the canonical grid.
/// Ties resolve toward smaller `|n|`, then the negative exponent.
pub fn scale_search<F>(
    frame: &Frame,
    center: (f64, f64),
    search_size: (f64, f64),
    extract: F,
    branch: &BranchModel,
    config: &ScaleConfig,
) -> Result<(i32, f64)>
where
    F: Fn(&Frame, (f64, f64), (f64, f64)) -> Result<Vec<SpatialMap>> + Sync,
{
    config.validate()?;
    let exponents: Vec<i32> = config.exponents().collect();
    let scores: Vec<(i32, f64)> = exponents
        .par_iter()
        .map(|&n| {
            let s = config.alpha.powi(n);
            let size = (s * search_size.0, s * search_size.1);
            let channels = extract(frame, center, size)?;
            let response = detect(&channels, branch)?;
            let peak = response
                .data()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((n, peak))
        })
        .collect::<Result<_>>()?;

    let mut best = scores[0];
    for &(n, score) in &scores[1..] {
        let better = score > best.1
            || (score == best.1
                && (n.abs() < best.0.abs() || (n.abs() == best.0.abs() && n < best.0)));
        if better {
            best = (n, score);
        }
    }
    Ok(best)
}
