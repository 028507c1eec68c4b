//! Flat key=value tracker configuration.
//!
//! The file format is one `key = value` pair per line with `#` comments.
//! Every key can also be passed as a CLI flag of the same name (dashes and
//! underscores are interchangeable). Later sources win: defaults, then the
//! config file, then CLI flags.
//!
//! Keys:
//!
//! ```text
//! layers                    name:cell:channels:sigma[,...]
//! lambda                    one value, or one per layer
//! orientation_bins          gradient histogram bins
//! learning_rate             memory sample weight
//! memory_capacity           stored sample cap
//! update_interval           frames between filter updates
//! cg_init_iters             CG budget at init
//! cg_update_iters           CG budget per update
//! cg_formula                fletcher_reeves | polak_ribiere
//! search_area_scale         search area / target area
//! canonical_min             canonical patch edge lower bound, px
//! canonical_max             canonical patch edge upper bound, px
//! scale_alpha               scale pyramid step
//! scale_steps               pyramid half-width
//! scale_damping             applied fraction of the winning exponent
//! scale_branch              layer index used for scale search
//! scale_enabled             true | false
//! kalman_q                  process noise scale
//! kalman_r                  measurement noise scale
//! fusion_reg                weight QP regularizer
//! fusion_weight_ema         weight smoothing, 0 disables
//! fusion_energy_from_memory true: energies over the weighted memory
//! fusion_energy_every_frame false: recompute only on update frames
//! motion_enabled            true | false
//! motion_map_kind           cosine | gaussian | none
//! motion_map_spread_factor  gaussian sigma / grid width
//! motion_map_layers         all, or indices like 0,1
//! confidence_threshold      fused-peak fraction gating state commits
//! confidence_smoothing      EMA rate of the peak baseline
//! confidence_warmup         always-commit steps before the gate arms
//! ```

use std::path::Path;

use mbcf_core::features::LayerSpec;
use mbcf_core::filter::CgFormula;
use mbcf_core::motion::MotionMapKind;
use mbcf_core::tracker::TrackerConfig;

use crate::{BenchError, Result};

/// Reads a config file into normalized key/value pairs.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BenchError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (number, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(BenchError::Input(format!(
                "config line {}: expected key = value, got {raw:?}",
                number + 1
            )));
        };
        pairs.push((normalize_key(key.trim()), value.trim().to_string()));
    }
    Ok(pairs)
}

fn normalize_key(key: &str) -> String {
    key.replace('-', "_").to_ascii_lowercase()
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| BenchError::Input(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(BenchError::Input(format!("config key {key}: expected a bool, got {other:?}"))),
    }
}

fn parse_layers(value: &str) -> Result<Vec<LayerSpec>> {
    let mut layers = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() != 4 {
            return Err(BenchError::Input(format!(
                "layer {part:?}: expected name:cell:channels:sigma"
            )));
        }
        let cell: usize = parse_value("layers.cell", fields[1])?;
        let channels: usize = parse_value("layers.channels", fields[2])?;
        let sigma: f64 = parse_value("layers.sigma", fields[3])?;
        layers.push(
            LayerSpec::new(fields[0], cell, channels, sigma)
                .map_err(|e| BenchError::Input(e.to_string()))?,
        );
    }
    if layers.is_empty() {
        return Err(BenchError::Input("layers list is empty".into()));
    }
    Ok(layers)
}

/// Applies key/value overrides onto a tracker configuration.
pub fn apply_overrides(config: &mut TrackerConfig, pairs: &[(String, String)]) -> Result<()> {
    for (key, value) in pairs {
        let key = normalize_key(key);
        match key.as_str() {
            "layers" => {
                config.layers = parse_layers(value)?;
                if config.lambda.len() != config.layers.len() {
                    let fill = config.lambda.first().copied().unwrap_or(0.01);
                    config.lambda = vec![fill; config.layers.len()];
                }
            }
            "lambda" => {
                let values: Vec<f64> = value
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| parse_value("lambda", p))
                    .collect::<Result<_>>()?;
                config.lambda = match values.len() {
                    1 => vec![values[0]; config.layers.len()],
                    n if n == config.layers.len() => values,
                    n => {
                        return Err(BenchError::Input(format!(
                            "lambda: got {n} values for {} layers",
                            config.layers.len()
                        )))
                    }
                };
            }
            "orientation_bins" => config.orientation_bins = parse_value(&key, value)?,
            "learning_rate" => config.learning_rate = parse_value(&key, value)?,
            "memory_capacity" => config.memory_capacity = parse_value(&key, value)?,
            "update_interval" => config.update_interval = parse_value(&key, value)?,
            "cg_init_iters" => config.cg_init_iters = parse_value(&key, value)?,
            "cg_update_iters" => config.cg_update_iters = parse_value(&key, value)?,
            "cg_formula" => {
                config.cg_formula = match value.to_ascii_lowercase().as_str() {
                    "fletcher_reeves" | "fletcher-reeves" | "fr" => CgFormula::FletcherReeves,
                    "polak_ribiere" | "polak-ribiere" | "pr" => CgFormula::PolakRibiere,
                    other => {
                        return Err(BenchError::Input(format!("unknown CG formula {other:?}")))
                    }
                }
            }
            "search_area_scale" => config.search_area_scale = parse_value(&key, value)?,
            "canonical_min" => config.canonical_min = parse_value(&key, value)?,
            "canonical_max" => config.canonical_max = parse_value(&key, value)?,
            "scale_alpha" => config.scale.alpha = parse_value(&key, value)?,
            "scale_steps" => config.scale.steps = parse_value(&key, value)?,
            "scale_damping" => config.scale.damping = parse_value(&key, value)?,
            "scale_branch" => config.scale.branch = parse_value(&key, value)?,
            "scale_enabled" => config.scale_enabled = parse_bool(&key, value)?,
            "kalman_q" => config.kalman_q = parse_value(&key, value)?,
            "kalman_r" => config.kalman_r = parse_value(&key, value)?,
            "fusion_reg" => config.fusion_reg = parse_value(&key, value)?,
            "fusion_weight_ema" => config.fusion_weight_ema = parse_value(&key, value)?,
            "fusion_energy_from_memory" => {
                config.fusion_energy_from_memory = parse_bool(&key, value)?
            }
            "fusion_energy_every_frame" => {
                config.fusion_energy_every_frame = parse_bool(&key, value)?
            }
            "motion_enabled" => config.motion_enabled = parse_bool(&key, value)?,
            "motion_map_kind" => {
                config.motion_map_kind = match value.to_ascii_lowercase().as_str() {
                    "cosine" => Some(MotionMapKind::Cosine),
                    "gaussian" => Some(MotionMapKind::Gaussian),
                    "none" => None,
                    other => {
                        return Err(BenchError::Input(format!("unknown motion map kind {other:?}")))
                    }
                }
            }
            "motion_map_spread_factor" => config.motion_map_spread_factor = parse_value(&key, value)?,
            "confidence_threshold" => config.confidence_threshold = parse_value(&key, value)?,
            "confidence_smoothing" => config.confidence_smoothing = parse_value(&key, value)?,
            "confidence_warmup" => config.confidence_warmup = parse_value(&key, value)?,
            "motion_map_layers" => {
                config.motion_map_layers = if value.eq_ignore_ascii_case("all") {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(str::trim)
                            .filter(|p| !p.is_empty())
                            .map(|p| parse_value("motion_map_layers", p))
                            .collect::<Result<_>>()?,
                    )
                };
            }
            other => {
                return Err(BenchError::Input(format!("unknown config key {other:?}")));
            }
        }
    }
    Ok(())
}
