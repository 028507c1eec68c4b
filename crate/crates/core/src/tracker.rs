//! The per-frame tracking pipeline.
//!
//! Each step runs: motion prediction, search-patch extraction at the
//! predicted center, feature projection and windowing (cosine window times
//! the motion map), per-branch detection, adaptive fusion and sub-cell
//! localization, multi-scale search, Kalman correction with the localized
//! center as the measurement, memory insertion, and a sparse filter update
//! every `update_interval` frames.
//!
//! The reported box always comes from the fused localization (scale
//! adjusted); the Kalman output only centers the next search region and
//! motion map.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{
    apply_window, extract_handcrafted, ingest_external_features, pca_fit, pca_project,
    FeatureStack, LayerFeatures, LayerSpec, PcaBasis,
};
use crate::filter::{
    build_normal_equations, detect, penalty_window, solve_cg, BranchModel, CgFormula, FilterBank,
    SampleMemory,
};
use crate::frame::{BoundingBox, Frame};
use crate::fusion::{branch_energy, fuse_scores, localize, solve_weights, FusionWeights};
use crate::motion::{
    innovation, km_predict, km_update, motion_map, predict_search_center, KalmanConfig,
    KalmanState, MotionMapKind,
};
use crate::scale::{damped_ratio, scale_search, ScaleConfig};
use crate::signal::{cosine_window, gaussian_label, SpatialMap};

/// Where per-frame features come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    /// Hand-crafted channels extracted from the search patch.
    Handcrafted,
    /// Precomputed full-frame feature grids, one `.mhft` file per frame
    /// named `%06d.mhft` inside the directory. Scale search is disabled in
    /// this mode because grid features cannot be re-extracted at other
    /// scales.
    External(PathBuf),
}

/// Full tracker configuration. Defaults follow the standard three-layer
/// setup; every field is overridable through the CLI config format.
#[derive(Debug, Clone)]
pub struct TrackerConfig {
    pub layers: Vec<LayerSpec>,
    /// Ridge weight per layer.
    pub lambda: Vec<f64>,
    pub orientation_bins: usize,
    /// Weight of a freshly inserted memory sample.
    pub learning_rate: f64,
    pub memory_capacity: usize,
    /// Filters retrain every this many frames.
    pub update_interval: usize,
    pub cg_init_iters: usize,
    pub cg_update_iters: usize,
    pub cg_formula: CgFormula,
    /// Search area as a multiple of the target area.
    pub search_area_scale: f64,
    /// Canonical patch edge bounds in pixels.
    pub canonical_min: usize,
    pub canonical_max: usize,
    pub scale: ScaleConfig,
    pub scale_enabled: bool,
    pub kalman_q: f64,
    pub kalman_r: f64,
    /// Quadratic regularizer of the fusion weight QP.
    pub fusion_reg: f64,
    /// Optional exponential smoothing of fusion weights, 0 disables.
    pub fusion_weight_ema: f64,
    /// Evaluate branch energies on the weighted memory instead of only the
    /// most recent sample.
    pub fusion_energy_from_memory: bool,
    /// Recompute fusion energies every frame (otherwise only on update
    /// frames, reusing the last weights in between).
    pub fusion_energy_every_frame: bool,
    /// Master switch for the motion module: Kalman-centered search plus the
    /// motion map. Disabled, the search centers on the previous box and
    /// features only see the cosine window.
    pub motion_enabled: bool,
    /// Shape of the motion map, `None` for no map even when motion is on.
    pub motion_map_kind: Option<MotionMapKind>,
    /// Gaussian motion-map sigma as a fraction of the layer grid width.
    pub motion_map_spread_factor: f64,
    /// Layers the motion map multiplies; `None` means all.
    pub motion_map_layers: Option<Vec<usize>>,
    /// A frame is confident when the fused peak reaches this fraction of
    /// the running peak baseline. Unconfident frames skip the Kalman
    /// correction, the memory insertion, and the scale change, so the
    /// motion model can carry the tracker through occlusions.
    pub confidence_threshold: f64,
    /// EMA rate of the peak baseline, updated on confident frames.
    pub confidence_smoothing: f64,
    /// Number of initial steps that always commit while the baseline
    /// adapts from the (over-fit) first-frame self-response to realistic
    /// detection peaks.
    pub confidence_warmup: usize,
    pub feature_source: FeatureSource,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            layers: vec![
                LayerSpec::new("shallow", 4, 8, 1.0 / 12.0).expect("valid spec"),
                LayerSpec::new("medium", 8, 8, 1.0 / 12.0).expect("valid spec"),
                LayerSpec::new("deep", 16, 8, 1.0 / 3.0).expect("valid spec"),
            ],
            lambda: vec![0.01; 3],
            orientation_bins: 9,
            learning_rate: 0.012,
            memory_capacity: 50,
            update_interval: 6,
            cg_init_iters: 150,
            cg_update_iters: 5,
            cg_formula: CgFormula::FletcherReeves,
            search_area_scale: 4.0,
            canonical_min: 224,
            canonical_max: 250,
            scale: ScaleConfig::default(),
            scale_enabled: true,
            kalman_q: 1e-2,
            kalman_r: 4.0,
            fusion_reg: 1.0,
            fusion_weight_ema: 0.0,
            fusion_energy_from_memory: false,
            fusion_energy_every_frame: true,
            motion_enabled: true,
            motion_map_kind: Some(MotionMapKind::Cosine),
            motion_map_spread_factor: 0.25,
            motion_map_layers: None,
            confidence_threshold: 0.8,
            confidence_smoothing: 0.1,
            confidence_warmup: 5,
            feature_source: FeatureSource::Handcrafted,
        }
    }
}

impl TrackerConfig {
    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Parameter("at least one layer is required".into()));
        }
        if self.lambda.len() != self.layers.len() {
            return Err(Error::Parameter(format!(
                "{} lambda values for {} layers",
                self.lambda.len(),
                self.layers.len()
            )));
        }
        if self.lambda.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Parameter("lambda must be positive per layer".into()));
        }
        if !(0.0 < self.learning_rate && self.learning_rate < 1.0) {
            return Err(Error::Parameter("learning rate must lie in (0,1)".into()));
        }
        if self.update_interval == 0 {
            return Err(Error::Parameter("update interval must be >= 1".into()));
        }
        if self.cg_init_iters == 0 || self.cg_update_iters == 0 {
            return Err(Error::Parameter("CG iteration budgets must be >= 1".into()));
        }
        if !(self.search_area_scale > 1.0) {
            return Err(Error::Parameter("search area scale must exceed 1".into()));
        }
        if self.canonical_min == 0 || self.canonical_max < self.canonical_min {
            return Err(Error::Parameter("canonical patch bounds are malformed".into()));
        }
        if self.scale.branch >= self.layers.len() {
            return Err(Error::Parameter(format!(
                "scale branch {} out of range for {} layers",
                self.scale.branch,
                self.layers.len()
            )));
        }
        self.scale.validate()?;
        if !(self.fusion_reg > 0.0) {
            return Err(Error::Parameter("fusion reg must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.fusion_weight_ema) {
            return Err(Error::Parameter("fusion weight EMA must lie in [0,1)".into()));
        }
        if let Some(layers) = &self.motion_map_layers {
            if layers.iter().any(|l| *l >= self.layers.len()) {
                return Err(Error::Parameter("motion map layer index out of range".into()));
            }
        }
        if !(0.0..1.0).contains(&self.confidence_threshold) {
            return Err(Error::Parameter("confidence threshold must lie in [0,1)".into()));
        }
        if !(0.0 < self.confidence_smoothing && self.confidence_smoothing <= 1.0) {
            return Err(Error::Parameter("confidence smoothing must lie in (0,1]".into()));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Per-layer grid geometry fixed at init.
#[derive(Debug, Clone)]
struct LayerGeometry {
    grid: (usize, usize),
    /// Frame pixels per cell along each axis; for hand-crafted features this
    /// is `cell_size * search_px / canonical` and changes with scale, so it
    /// is stored as the cell size at canonical resolution instead.
    canonical_cell: f64,
}

/// Feature production shared by detection, training, and scale search.
#[derive(Debug)]
struct FeaturePipeline {
    specs: Vec<LayerSpec>,
    orientation_bins: usize,
    canonical: usize,
    source: FeatureSource,
    pca: PcaBasis,
    hann: Vec<SpatialMap>,
    geometry: Vec<LayerGeometry>,
    /// External mode only: frame pixels per cell of each full-frame grid.
    external_cell_px: Vec<(f64, f64)>,
}

impl FeaturePipeline {
    /// Raw (pre-PCA) stack for a search region. For hand-crafted features
    /// the patch is resampled to the canonical edge; for external features
    /// the per-frame grid file is cropped around the center.
    fn raw_stack(
        &self,
        frame: &Frame,
        center: (f64, f64),
        search_px: f64,
        frame_index: usize,
    ) -> Result<FeatureStack> {
        match &self.source {
            FeatureSource::Handcrafted => {
                let patch = frame.extract_patch(center, (search_px, search_px), self.canonical)?;
                extract_handcrafted(&patch, &self.specs, self.orientation_bins)
            }
            FeatureSource::External(dir) => {
                let path = dir.join(format!("{frame_index:06}.mhft"));
                let full = ingest_external_features(&path, &self.specs)?;
                let mut layers = Vec::with_capacity(full.layers.len());
                for (l, layer) in full.layers.iter().enumerate() {
                    let (cw, ch) = self.geometry[l].grid;
                    let cell = self.external_cell_px[l];
                    let cx = center.0 / cell.0 - 0.5;
                    let cy = center.1 / cell.1 - 0.5;
                    let sx = (cx - (cw as f64 - 1.0) / 2.0).round() as i64;
                    let sy = (cy - (ch as f64 - 1.0) / 2.0).round() as i64;
                    layers.push(crop_layer(layer, (sx, sy), (cw, ch)));
                }
                Ok(FeatureStack { layers })
            }
        }
    }

    /// Projection plus per-layer windowing. `extra` windows (the motion
    /// map) multiply on top of the cosine window for their layers.
    fn finished_stack(
        &self,
        raw: &FeatureStack,
        extra: Option<&[Option<SpatialMap>]>,
    ) -> Result<FeatureStack> {
        let projected = pca_project(raw, &self.pca)?;
        let windows: Vec<SpatialMap> = match extra {
            None => self.hann.clone(),
            Some(extras) => self
                .hann
                .iter()
                .zip(extras)
                .map(|(hann, e)| match e {
                    Some(map) => hann.hadamard(map),
                    None => Ok(hann.clone()),
                })
                .collect::<Result<_>>()?,
        };
        apply_window(&projected, &windows)
    }

    /// Windowed, projected channels of a single layer, used by scale search.
    fn single_layer_channels(
        &self,
        frame: &Frame,
        center: (f64, f64),
        size_px: (f64, f64),
        layer: usize,
    ) -> Result<Vec<SpatialMap>> {
        let patch = frame.extract_patch(center, size_px, self.canonical)?;
        let spec = std::slice::from_ref(&self.specs[layer]);
        let raw = extract_handcrafted(&patch, spec, self.orientation_bins)?;
        let single_basis = PcaBasis { layers: vec![self.pca.layers[layer].clone()] };
        let projected = pca_project(&raw, &single_basis)?;
        projected
            .layer(0)
            .channels
            .iter()
            .map(|c| c.hadamard(&self.hann[layer]))
            .collect()
    }
}

/// Clamped (edge-replicating) crop of a full-frame feature grid.
fn crop_layer(layer: &LayerFeatures, start: (i64, i64), size: (usize, usize)) -> LayerFeatures {
    let (gw, gh) = layer.dims();
    let channels = layer
        .channels
        .iter()
        .map(|c| {
            let mut out = SpatialMap::zeros(size.0, size.1);
            for y in 0..size.1 {
                let sy = (start.1 + y as i64).clamp(0, gh as i64 - 1) as usize;
                for x in 0..size.0 {
                    let sx = (start.0 + x as i64).clamp(0, gw as i64 - 1) as usize;
                    out.set(x, y, c.at(sx, sy));
                }
            }
            out
        })
        .collect();
    LayerFeatures { channels }
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub branch_peaks: Vec<f64>,
    pub energies: Vec<f64>,
    pub weights: Vec<f64>,
    /// Peak value of the fused score map.
    pub fused_peak: f64,
    /// Detection cleared the confidence gate; unconfident frames commit no
    /// measurement, sample, or scale change.
    pub confident: bool,
    /// Filters retrained this frame.
    pub trained: bool,
    pub cg_iterations: Vec<usize>,
    pub cg_final_residuals: Vec<f64>,
    pub kalman_innovation: (f64, f64),
    pub scale_step: i32,
    pub lost: bool,
}

/// Full tracking state; one instance owns one target in one sequence.
pub struct Tracker {
    config: TrackerConfig,
    pipeline: FeaturePipeline,
    branches: Vec<BranchModel>,
    label_energies: Vec<f64>,
    memory: SampleMemory,
    kalman_state: KalmanState,
    kalman_config: KalmanConfig,
    current_box: BoundingBox,
    frame_index: usize,
    last_weights: FusionWeights,
    search_px: f64,
    response_baseline: f64,
    lost: bool,
}

fn search_edge(config: &TrackerConfig, target: (f64, f64)) -> f64 {
    (config.search_area_scale * target.0 * target.1).sqrt()
}

fn choose_canonical(config: &TrackerConfig, raw_edge: f64) -> Result<usize> {
    let step = config
        .layers
        .iter()
        .fold(1usize, |acc, spec| lcm(acc, spec.cell_size));
    let clamped = (raw_edge.round() as usize).clamp(config.canonical_min, config.canonical_max);
    let mut canonical = (clamped / step) * step;
    if canonical < config.canonical_min {
        canonical += step;
    }
    if canonical < config.canonical_min || canonical > config.canonical_max {
        return Err(Error::Parameter(format!(
            "no multiple of cell lcm {step} inside canonical bounds [{}, {}]",
            config.canonical_min, config.canonical_max
        )));
    }
    Ok(canonical)
}

impl Tracker {
    /// Initializes on the first frame: fits PCA, builds labels and penalty
    /// windows, solves the initial filters to convergence, and seeds the
    /// Kalman state at the box center with zero velocity.
    pub fn init(frame: &Frame, init_box: BoundingBox, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        if !init_box.is_finite() || init_box.w < 4.0 || init_box.h < 4.0 {
            return Err(Error::Input(format!(
                "initial box must be finite with w,h >= 4 px, got {init_box:?}"
            )));
        }
        if init_box.x < 0.0
            || init_box.y < 0.0
            || init_box.x + init_box.w > frame.width() as f64
            || init_box.y + init_box.h > frame.height() as f64
        {
            return Err(Error::Input(format!(
                "initial box {init_box:?} not inside {}x{} frame",
                frame.width(),
                frame.height()
            )));
        }

        let target = (init_box.w, init_box.h);
        let search_px = search_edge(&config, target);
        let canonical = choose_canonical(&config, search_px)?;

        // Geometry per layer: grid plus the target extent in cells, which
        // stays constant across scale changes because the search edge is
        // proportional to the target size.
        let mut geometry = Vec::with_capacity(config.layers.len());
        let mut external_cell_px = Vec::new();
        match &config.feature_source {
            FeatureSource::Handcrafted => {
                for spec in &config.layers {
                    let cells = canonical / spec.cell_size;
                    if cells == 0 {
                        return Err(Error::Parameter(format!(
                            "layer {}: cell size {} larger than canonical patch {canonical}",
                            spec.name, spec.cell_size
                        )));
                    }
                    geometry.push(LayerGeometry {
                        grid: (cells, cells),
                        canonical_cell: spec.cell_size as f64,
                    });
                }
            }
            FeatureSource::External(dir) => {
                let path = dir.join("000000.mhft");
                let full = ingest_external_features(&path, &config.layers)?;
                for layer in &full.layers {
                    let (gw, gh) = layer.dims();
                    let cell = (
                        frame.width() as f64 / gw as f64,
                        frame.height() as f64 / gh as f64,
                    );
                    let cw = ((search_px / cell.0).round() as usize).clamp(2, gw);
                    let ch = ((search_px / cell.1).round() as usize).clamp(2, gh);
                    geometry.push(LayerGeometry { grid: (cw, ch), canonical_cell: cell.0 });
                    external_cell_px.push(cell);
                }
            }
        }

        let hann: Vec<SpatialMap> = geometry
            .iter()
            .map(|g| cosine_window(g.grid.0, g.grid.1))
            .collect::<Result<_>>()?;

        let mut pipeline = FeaturePipeline {
            specs: config.layers.clone(),
            orientation_bins: config.orientation_bins,
            canonical,
            source: config.feature_source.clone(),
            pca: PcaBasis { layers: Vec::new() },
            hann,
            geometry,
            external_cell_px,
        };

        let center = init_box.center();
        let raw = pipeline.raw_stack(frame, center, search_px, 0)?;
        pipeline.pca = pca_fit(&raw, &config.layers)?;

        // Labels and penalty windows from the target extent in layer cells.
        let mut branches = Vec::with_capacity(config.layers.len());
        let mut label_energies = Vec::with_capacity(config.layers.len());
        for (l, spec) in config.layers.iter().enumerate() {
            let (gw, gh) = pipeline.geometry[l].grid;
            let (tw_cells, th_cells) = match &config.feature_source {
                FeatureSource::Handcrafted => {
                    let to_canonical = canonical as f64 / search_px;
                    (
                        target.0 * to_canonical / spec.cell_size as f64,
                        target.1 * to_canonical / spec.cell_size as f64,
                    )
                }
                FeatureSource::External(_) => {
                    let cell = pipeline.external_cell_px[l];
                    (target.0 / cell.0, target.1 / cell.1)
                }
            };
            let sigma = (spec.label_sigma_factor * (tw_cells * th_cells).sqrt()).max(0.25);
            let label_center = ((gw as f64 - 1.0) / 2.0, (gh as f64 - 1.0) / 2.0);
            let label = gaussian_label(gw, gh, label_center, sigma)?;
            label_energies.push(label.energy());
            let reg = penalty_window(gw, gh, (tw_cells, th_cells), config.lambda[l])?;
            branches.push(BranchModel::new(
                spec.channels_out,
                reg,
                label,
                config.lambda[l],
                spec.clone(),
            )?);
        }

        let training = pipeline.finished_stack(&raw, None)?;
        let mut memory = SampleMemory::new(config.memory_capacity)?;
        memory.insert(training, config.learning_rate)?;

        let kalman_config = KalmanConfig::constant_velocity(config.kalman_q, config.kalman_r)?;
        let kalman_state = KalmanState::at_position(center.0, center.1);
        let last_weights = FusionWeights::uniform(config.layers.len())?;

        let mut tracker = Self {
            config,
            pipeline,
            branches,
            label_energies,
            memory,
            kalman_state,
            kalman_config,
            current_box: init_box,
            frame_index: 0,
            last_weights,
            search_px,
            response_baseline: 0.0,
            lost: false,
        };
        tracker.retrain(tracker.config.cg_init_iters)?;

        // Self-detection on the first sample seeds the confidence baseline.
        let latest = tracker.memory.latest().expect("memory seeded at init");
        let maps = tracker.detect_all(&latest.stack)?;
        let weights = FusionWeights::uniform(tracker.branches.len())?;
        let fused = fuse_scores(&maps, &weights, tracker.finest_grid())?;
        let (_, peak) = localize(&fused)?;
        tracker.response_baseline = peak;
        Ok(tracker)
    }

    pub fn current_box(&self) -> BoundingBox {
        self.current_box
    }

    pub fn is_lost(&self) -> bool {
        self.lost
    }

    pub fn kalman_velocity(&self) -> (f64, f64) {
        self.kalman_state.velocity()
    }

    pub fn fusion_weights(&self) -> &[f64] {
        self.last_weights.values()
    }

    pub fn memory_len(&self) -> usize {
        self.memory.len()
    }

    pub fn memory_weight_sum(&self) -> f64 {
        self.memory.entries().iter().map(|e| e.weight).sum()
    }

    /// PCA output dimensionality per layer.
    pub fn pca_dims(&self) -> Vec<(usize, usize)> {
        self.pipeline
            .pca
            .layers
            .iter()
            .map(|l| (l.input_channels(), l.output_channels()))
            .collect()
    }

    /// Fused detection at the current state without advancing the tracker;
    /// returns the peak position in frame pixels. Used by tests to verify
    /// self-detection right after init.
    pub fn probe(&self, frame: &Frame) -> Result<(f64, f64)> {
        let center = self.current_box.center();
        let raw = self
            .pipeline
            .raw_stack(frame, center, self.search_px, self.frame_index)?;
        let stack = self.pipeline.finished_stack(&raw, None)?;
        let maps = self.detect_all(&stack)?;
        let weights = FusionWeights::uniform(self.branches.len())?;
        let finest = self.finest_grid();
        let fused = fuse_scores(&maps, &weights, finest)?;
        let (peak, _) = localize(&fused)?;
        Ok(self.peak_to_frame(peak, center))
    }

    fn finest_layer(&self) -> usize {
        let mut best = 0;
        for (l, g) in self.pipeline.geometry.iter().enumerate() {
            if g.grid.0 > self.pipeline.geometry[best].grid.0 {
                best = l;
            }
        }
        best
    }

    fn finest_grid(&self) -> (usize, usize) {
        self.pipeline.geometry[self.finest_layer()].grid
    }

    /// Maps a sub-cell peak on the finest grid to frame pixels around the
    /// search center.
    fn peak_to_frame(&self, peak: (f64, f64), search_center: (f64, f64)) -> (f64, f64) {
        let l = self.finest_layer();
        let (gw, gh) = self.pipeline.geometry[l].grid;
        let label_center = ((gw as f64 - 1.0) / 2.0, (gh as f64 - 1.0) / 2.0);
        // Fold the cyclic peak displacement into the symmetric half-range.
        let fold = |d: f64, n: usize| {
            let n = n as f64;
            let mut d = d.rem_euclid(n);
            if d > n / 2.0 {
                d -= n;
            }
            d
        };
        let dx_cells = fold(peak.0 - label_center.0, gw);
        let dy_cells = fold(peak.1 - label_center.1, gh);
        let cell_px = match &self.pipeline.source {
            FeatureSource::Handcrafted => {
                let c = self.pipeline.geometry[l].canonical_cell;
                let scale = self.search_px / self.pipeline.canonical as f64;
                (c * scale, c * scale)
            }
            FeatureSource::External(_) => self.pipeline.external_cell_px[l],
        };
        (
            search_center.0 + dx_cells * cell_px.0,
            search_center.1 + dy_cells * cell_px.1,
        )
    }

    fn detect_all(&self, stack: &FeatureStack) -> Result<Vec<SpatialMap>> {
        (0..self.branches.len())
            .into_par_iter()
            .map(|l| detect(&stack.layers[l].channels, &self.branches[l]))
            .collect()
    }

    fn branch_energies(&self) -> Result<Vec<f64>> {
        let latest = self.memory.latest().ok_or(Error::EmptyMemory)?;
        (0..self.branches.len())
            .into_par_iter()
            .map(|l| {
                let raw = if self.config.fusion_energy_from_memory {
                    let mut acc = 0.0;
                    for entry in self.memory.entries() {
                        acc += entry.weight
                            * branch_energy(&self.branches[l], &entry.stack.layers[l].channels)?;
                    }
                    acc
                } else {
                    branch_energy(&self.branches[l], &latest.stack.layers[l].channels)?
                };
                Ok(raw / self.label_energies[l].max(1e-12))
            })
            .collect()
    }

    fn motion_windows(&self, pred: (f64, f64), search_center: (f64, f64)) -> Result<Option<Vec<Option<SpatialMap>>>> {
        let kind = match (self.config.motion_enabled, self.config.motion_map_kind) {
            (true, Some(kind)) => kind,
            _ => return Ok(None),
        };
        let mut extras = Vec::with_capacity(self.branches.len());
        for (l, g) in self.pipeline.geometry.iter().enumerate() {
            let wanted = self
                .config
                .motion_map_layers
                .as_ref()
                .is_none_or(|list| list.contains(&l));
            if !wanted {
                extras.push(None);
                continue;
            }
            let (gw, gh) = g.grid;
            let cell_px = match &self.pipeline.source {
                FeatureSource::Handcrafted => {
                    let c = g.canonical_cell * self.search_px / self.pipeline.canonical as f64;
                    (c, c)
                }
                FeatureSource::External(_) => self.pipeline.external_cell_px[l],
            };
            let cx = (pred.0 - search_center.0) / cell_px.0 + (gw as f64 - 1.0) / 2.0;
            let cy = (pred.1 - search_center.1) / cell_px.1 + (gh as f64 - 1.0) / 2.0;
            let spread = self.config.motion_map_spread_factor * gw as f64;
            extras.push(Some(motion_map((gw, gh), (cx, cy), kind, spread)?));
        }
        Ok(Some(extras))
    }

    fn retrain(&mut self, iters: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let memory = &self.memory;
        let formula = self.config.cg_formula;
        let reports: Vec<(usize, f64)> = self
            .branches
            .par_iter_mut()
            .enumerate()
            .map(|(l, model)| {
                let samples = memory.layer_samples(l);
                let system = build_normal_equations(&samples, model)?;
                let init = if model.filters_spatial().norm() > 0.0 {
                    model.filters_spatial()
                } else {
                    FilterBank::zeros(model.channels(), model.dims().0, model.dims().1)
                };
                let (bank, report) = solve_cg(&system, init, iters, formula)?;
                model.set_filters_spatial(&bank);
                let last = report.residuals.last().copied().unwrap_or(f64::NAN);
                Ok((report.iterations, last))
            })
            .collect::<Result<_>>()?;
        Ok(reports.into_iter().unzip())
    }

    /// Advances the tracker by one frame.
    pub fn step(&mut self, frame: &Frame) -> Result<(BoundingBox, StepDiagnostics)> {
        self.frame_index += 1;
        let bounds = (frame.width(), frame.height());

        // (1) Motion prediction; committed exactly once per frame below.
        let predicted = km_predict(&self.kalman_state, &self.kalman_config)?;
        let search_center = if self.config.motion_enabled {
            predict_search_center(&self.kalman_state, &self.kalman_config, bounds)?
        } else {
            self.current_box.center()
        };
        let pred_point = if self.config.motion_enabled {
            predicted.position()
        } else {
            search_center
        };

        // (2)-(3) Features at the predicted center, gated by the motion map.
        let raw = self
            .pipeline
            .raw_stack(frame, search_center, self.search_px, self.frame_index)?;
        let extras = self.motion_windows(pred_point, search_center)?;
        let stack = self.pipeline.finished_stack(&raw, extras.as_deref())?;

        // (4) Per-branch detection.
        let maps = self.detect_all(&stack)?;
        let branch_peaks: Vec<f64> = maps
            .iter()
            .map(|m| m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();

        // (5) Fusion weights, fused map, localization.
        let update_frame = self.frame_index.is_multiple_of(self.config.update_interval);
        let energies = if self.config.fusion_energy_every_frame || update_frame {
            self.branch_energies()?
        } else {
            Vec::new()
        };
        let weights = if energies.is_empty() {
            self.last_weights.clone()
        } else {
            let mut fresh = solve_weights(&energies, self.config.fusion_reg)?;
            if self.config.fusion_weight_ema > 0.0 {
                let mut blended = self.last_weights.clone();
                blended.blend(&fresh, 1.0 - self.config.fusion_weight_ema);
                fresh = blended;
            }
            fresh
        };
        self.last_weights = weights.clone();
        let fused = fuse_scores(&maps, &weights, self.finest_grid())?;
        let (peak, fused_peak) = localize(&fused)?;
        let new_center = self.peak_to_frame(peak, search_center);

        // Confidence gate: a collapsed response peak means the target is
        // not visibly present (occlusion, blur). Such frames commit no
        // measurement, no training sample, and no scale change; the motion
        // model carries the search region until the response recovers. The
        // first few steps always commit while the baseline adapts from the
        // over-fit init self-response down to realistic detection peaks.
        let warming_up = self.frame_index <= self.config.confidence_warmup;
        let confident = warming_up
            || fused_peak >= self.config.confidence_threshold * self.response_baseline;

        // (6) Scale search at the localized center.
        let mut scale_step = 0;
        let mut new_w = self.current_box.w;
        let mut new_h = self.current_box.h;
        if confident
            && self.config.scale_enabled
            && matches!(self.pipeline.source, FeatureSource::Handcrafted)
        {
            let branch = self.config.scale.branch;
            let pipeline = &self.pipeline;
            let (n, _) = scale_search(
                frame,
                new_center,
                (self.search_px, self.search_px),
                |f, c, s| pipeline.single_layer_channels(f, c, s, branch),
                &self.branches[branch],
                &self.config.scale,
            )?;
            scale_step = n;
            let ratio = damped_ratio(n, &self.config.scale);
            new_w *= ratio;
            new_h *= ratio;
        }

        let candidate = BoundingBox::from_center(new_center, new_w, new_h);
        if !candidate.intersects_frame(bounds.0, bounds.1) {
            self.lost = true;
            let diagnostics = StepDiagnostics {
                branch_peaks,
                energies,
                weights: weights.values().to_vec(),
                fused_peak,
                confident,
                trained: false,
                cg_iterations: Vec::new(),
                cg_final_residuals: Vec::new(),
                kalman_innovation: (0.0, 0.0),
                scale_step,
                lost: true,
            };
            return Ok((self.current_box, diagnostics));
        }
        self.lost = false;

        // Keep the box center inside the frame.
        let clamped_center = (
            new_center.0.clamp(0.0, bounds.0 as f64 - 1.0),
            new_center.1.clamp(0.0, bounds.1 as f64 - 1.0),
        );
        self.current_box = BoundingBox::from_center(clamped_center, new_w, new_h);
        self.search_px = search_edge(&self.config, (new_w, new_h));

        let kalman_innovation = innovation(&predicted, clamped_center, &self.kalman_config);
        let mut trained = false;
        let mut cg_iterations = Vec::new();
        let mut cg_final_residuals = Vec::new();
        if confident {
            // (7) Kalman correction with the localized center as measurement.
            self.kalman_state = km_update(&predicted, clamped_center, &self.kalman_config)?;

            // (8) Store the training sample extracted at the new center.
            let train_raw = self
                .pipeline
                .raw_stack(frame, clamped_center, self.search_px, self.frame_index)?;
            let training = self.pipeline.finished_stack(&train_raw, None)?;
            self.memory.insert(training, self.config.learning_rate)?;

            // (9) Sparse filter update.
            if update_frame {
                let reports = self.retrain(self.config.cg_update_iters)?;
                cg_iterations = reports.0;
                cg_final_residuals = reports.1;
                trained = true;
            }

            let beta = if warming_up { 0.5 } else { self.config.confidence_smoothing };
            self.response_baseline = (1.0 - beta) * self.response_baseline + beta * fused_peak;
        } else {
            // Commit only the time update so the prediction keeps moving.
            self.kalman_state = predicted;
        }

        let diagnostics = StepDiagnostics {
            branch_peaks,
            energies,
            weights: weights.values().to_vec(),
            fused_peak,
            confident,
            trained,
            cg_iterations,
            cg_final_residuals,
            kalman_innovation,
            scale_step,
            lost: false,
        };
        Ok((self.current_box, diagnostics))
    }
}

/// Runs a whole sequence: init on the first frame, step on the rest.
/// Deterministic given identical inputs and configuration.
pub fn run_sequence<I>(
    frames: I,
    init_box: BoundingBox,
    config: &TrackerConfig,
) -> Result<Vec<BoundingBox>>
where
    I: IntoIterator<Item = Frame>,
{
    let mut iter = frames.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Input("sequence must contain at least one frame".into()))?;
    let mut tracker = Tracker::init(&first, init_box, config.clone())?;
    let mut trajectory = vec![init_box];
    for frame in iter {
        let (reported, _) = tracker.step(&frame)?;
        trajectory.push(reported);
    }
    Ok(trajectory)
}
