//! Per-layer feature stacks for a search patch.
//!
//! Each configured layer aggregates hand-crafted channels (intensity,
//! gradient magnitude, and an orientation histogram) over cells of the
//! layer's `cell_size`, so coarser layers mimic deeper strides. Stacks can
//! alternatively be ingested from a binary feature file produced by an
//! external extractor. PCA reduces channels per layer; windows multiply in
//! afterwards. Projection happens before windowing throughout this crate.
//!
//! Gradients use cyclic (wrap-around) central differences, which makes cell
//! aggregation exactly translation-covariant for shifts that are multiples
//! of the cell size on cyclically padded patterns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::signal::SpatialMap;

/// Magic bytes of the external feature file format.
pub const FEATURE_FILE_MAGIC: &[u8; 4] = b"MHFT";
/// Format version written by this crate.
pub const FEATURE_FILE_VERSION: u32 = 1;

/// Configuration of one feature hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    /// Pixels per feature cell at the canonical patch resolution.
    pub cell_size: usize,
    /// Channel count after PCA projection.
    pub channels_out: usize,
    /// Label sigma as a fraction of the target size in layer cells.
    pub label_sigma_factor: f64,
}

impl LayerSpec {
    pub fn new(name: &str, cell_size: usize, channels_out: usize, label_sigma_factor: f64) -> Result<Self> {
        if cell_size == 0 {
            return Err(Error::Parameter(format!("layer {name}: cell_size must be >= 1")));
        }
        if channels_out == 0 {
            return Err(Error::Parameter(format!("layer {name}: channels_out must be >= 1")));
        }
        if !(label_sigma_factor > 0.0) {
            return Err(Error::Parameter(format!(
                "layer {name}: label_sigma_factor must be positive"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            cell_size,
            channels_out,
            label_sigma_factor,
        })
    }
}

/// Channels of a single layer; all maps share dimensions.
#[derive(Debug, Clone)]
pub struct LayerFeatures {
    pub channels: Vec<SpatialMap>,
}

impl LayerFeatures {
    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }
}

/// Ordered per-layer channel maps for one patch; layer order always equals
/// the `LayerSpec` list order.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<LayerFeatures>,
}

impl FeatureStack {
    pub fn layer(&self, index: usize) -> &LayerFeatures {
        &self.layers[index]
    }

    /// Weighted in-place blend: `self = (1 - t) * self + t * other`.
    pub fn blend(&mut self, other: &FeatureStack, t: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Dimension("stack layer counts disagree".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.channels.len() != b.channels.len() {
                return Err(Error::Dimension("stack channel counts disagree".into()));
            }
            for (ca, cb) in a.channels.iter_mut().zip(&b.channels) {
                if ca.dims() != cb.dims() {
                    return Err(Error::Dimension("stack channel dims disagree".into()));
                }
                for (va, vb) in ca.data_mut().iter_mut().zip(cb.data()) {
                    *va = (1.0 - t) * *va + t * vb;
                }
            }
        }
        Ok(())
    }
}

/// Raw channel count produced by the hand-crafted extractor.
pub fn handcrafted_channel_count(orientation_bins: usize) -> usize {
    2 + orientation_bins
}

/// Extracts cell-aggregated hand-crafted channels for every layer spec:
/// mean intensity, mean gradient magnitude, and an `orientation_bins`-bin
/// unsigned gradient-orientation histogram per cell.
pub fn extract_handcrafted(
    patch: &SpatialMap,
    specs: &[LayerSpec],
    orientation_bins: usize,
) -> Result<FeatureStack> {
    if orientation_bins == 0 {
        return Err(Error::Parameter("orientation_bins must be >= 1".into()));
    }
    let (pw, ph) = patch.dims();

    // Cyclic central differences at patch resolution, shared by all layers.
    let mut gx = vec![0.0; pw * ph];
    let mut gy = vec![0.0; pw * ph];
    for y in 0..ph {
        for x in 0..pw {
            let xr = patch.at((x + 1) % pw, y);
            let xl = patch.at((x + pw - 1) % pw, y);
            let yd = patch.at(x, (y + 1) % ph);
            let yu = patch.at(x, (y + ph - 1) % ph);
            gx[y * pw + x] = 0.5 * (xr - xl);
            gy[y * pw + x] = 0.5 * (yd - yu);
        }
    }

    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let cs = spec.cell_size;
        let (cw, ch) = (pw / cs, ph / cs);
        if cw == 0 || ch == 0 {
            return Err(Error::Dimension(format!(
                "layer {}: patch {pw}x{ph} smaller than one {cs}px cell",
                spec.name
            )));
        }
        let n_channels = handcrafted_channel_count(orientation_bins);
        let mut channels = vec![SpatialMap::zeros(cw, ch); n_channels];
        let norm = 1.0 / (cs * cs) as f64;
        for cy in 0..ch {
            for cx in 0..cw {
                let mut intensity = 0.0;
                let mut magnitude = 0.0;
                let mut hist = vec![0.0; orientation_bins];
                for dy in 0..cs {
                    for dx in 0..cs {
                        let x = cx * cs + dx;
                        let y = cy * cs + dy;
                        let idx = y * pw + x;
                        intensity += patch.at(x, y);
                        let mag = (gx[idx] * gx[idx] + gy[idx] * gy[idx]).sqrt();
                        magnitude += mag;
                        if mag > 0.0 {
                            // Unsigned orientation folded into [0, pi).
                            let mut angle = gy[idx].atan2(gx[idx]);
                            if angle < 0.0 {
                                angle += std::f64::consts::PI;
                            }
                            let mut bin =
                                (angle / std::f64::consts::PI * orientation_bins as f64) as usize;
                            if bin >= orientation_bins {
                                bin = 0;
                            }
                            hist[bin] += mag;
                        }
                    }
                }
                channels[0].set(cx, cy, intensity * norm);
                channels[1].set(cx, cy, magnitude * norm);
                for (b, v) in hist.iter().enumerate() {
                    channels[2 + b].set(cx, cy, v * norm);
                }
            }
        }
        layers.push(LayerFeatures { channels });
    }
    Ok(FeatureStack { layers })
}

/// Per-layer orthonormal projection fitted on first-frame cell vectors.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub layers: Vec<LayerBasis>,
}

/// Projection for one layer: per-channel mean plus an
/// `input_channels x channels_out` orthonormal column basis.
#[derive(Debug, Clone)]
pub struct LayerBasis {
    pub mean: Vec<f64>,
    pub components: DMatrix<f64>,
}

impl LayerBasis {
    pub fn input_channels(&self) -> usize {
        self.components.nrows()
    }

    pub fn output_channels(&self) -> usize {
        self.components.ncols()
    }
}

/// Fits per-layer PCA bases on the cell vectors of `stack`.
///
/// Deterministic given fixed input: eigenpairs are ordered by descending
/// eigenvalue with ties left in the symmetric solver's stable index order,
/// and each component's sign is canonicalized so its
/// largest-magnitude coefficient is positive.
pub fn pca_fit(stack: &FeatureStack, specs: &[LayerSpec]) -> Result<PcaBasis> {
    if stack.layers.len() != specs.len() {
        return Err(Error::Dimension(format!(
            "stack has {} layers but {} specs were given",
            stack.layers.len(),
            specs.len()
        )));
    }
    let mut layers = Vec::with_capacity(specs.len());
    for (layer, spec) in stack.layers.iter().zip(specs) {
        let d_in = layer.channels.len();
        if spec.channels_out > d_in {
            return Err(Error::Parameter(format!(
                "layer {}: channels_out {} exceeds input channels {}",
                spec.name, spec.channels_out, d_in
            )));
        }
        let (w, h) = layer.dims();
        let n_cells = w * h;

        let mut mean = vec![0.0; d_in];
        for (c, channel) in layer.channels.iter().enumerate() {
            mean[c] = channel.data().iter().sum::<f64>() / n_cells as f64;
        }

        // Channel covariance over cells.
        let mut cov = DMatrix::<f64>::zeros(d_in, d_in);
        for idx in 0..n_cells {
            for a in 0..d_in {
                let va = layer.channels[a].data()[idx] - mean[a];
                for b in a..d_in {
                    let vb = layer.channels[b].data()[idx] - mean[b];
                    cov[(a, b)] += va * vb;
                }
            }
        }
        for a in 0..d_in {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        cov.scale_mut(1.0 / n_cells as f64);

        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..d_in).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        let mut components = DMatrix::<f64>::zeros(d_in, spec.channels_out);
        for (out_idx, &src) in order.iter().take(spec.channels_out).enumerate() {
            let mut col = eig.eigenvectors.column(src).clone_owned();
            let lead = col
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| {
                    a.abs()
                        .partial_cmp(&b.abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(ib.cmp(ia))
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
            if col[lead] < 0.0 {
                col.neg_mut();
            }
            components.set_column(out_idx, &col);
        }
        layers.push(LayerBasis { mean, components });
    }
    Ok(PcaBasis { layers })
}

/// Projects every layer: per-cell mean subtraction followed by the
/// orthonormal basis, yielding `channels_out` channels per layer.
pub fn pca_project(stack: &FeatureStack, basis: &PcaBasis) -> Result<FeatureStack> {
    if stack.layers.len() != basis.layers.len() {
        return Err(Error::Dimension(format!(
            "stack has {} layers but basis has {}",
            stack.layers.len(),
            basis.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(stack.layers.len());
    for (layer, lb) in stack.layers.iter().zip(&basis.layers) {
        let d_in = layer.channels.len();
        if d_in != lb.input_channels() {
            return Err(Error::Dimension(format!(
                "layer has {d_in} channels but basis expects {}",
                lb.input_channels()
            )));
        }
        let (w, h) = layer.dims();
        let d_out = lb.output_channels();
        let mut out = vec![SpatialMap::zeros(w, h); d_out];
        let mut cell = DVector::<f64>::zeros(d_in);
        for idx in 0..w * h {
            for c in 0..d_in {
                cell[c] = layer.channels[c].data()[idx] - lb.mean[c];
            }
            let projected = lb.components.tr_mul(&cell);
            for c in 0..d_out {
                out[c].data_mut()[idx] = projected[c];
            }
        }
        layers.push(LayerFeatures { channels: out });
    }
    Ok(FeatureStack { layers })
}

/// Multiplies every channel of every layer by its layer's window.
pub fn apply_window(stack: &FeatureStack, windows: &[SpatialMap]) -> Result<FeatureStack> {
    if stack.layers.len() != windows.len() {
        return Err(Error::Dimension(format!(
            "stack has {} layers but {} windows were given",
            stack.layers.len(),
            windows.len()
        )));
    }
    let mut layers = Vec::with_capacity(stack.layers.len());
    for (layer, window) in stack.layers.iter().zip(windows) {
        if layer.dims() != window.dims() {
            return Err(Error::Dimension(format!(
                "layer dims {:?} disagree with window dims {:?}",
                layer.dims(),
                window.dims()
            )));
        }
        let channels = layer
            .channels
            .iter()
            .map(|c| c.hadamard(window))
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerFeatures { channels });
    }
    Ok(FeatureStack { layers })
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32(reader: &mut impl Read) -> Result<f32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

/// Reads a feature stack from the binary layout documented in the README:
/// magic `MHFT`, version, layer count, then per layer a length-prefixed
/// UTF-8 name, channel count, width, height, and `channels * width * height`
/// little-endian f32 values in channel-major, row-major order.
///
/// Layer names and counts are validated against `specs`; each layer must
/// supply at least `channels_out` channels and only finite values.
pub fn ingest_external_features(path: &Path, specs: &[LayerSpec]) -> Result<FeatureStack> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != FEATURE_FILE_MAGIC {
        return Err(Error::FeatureFile(format!(
            "bad magic {:?}, expected {:?}",
            magic, FEATURE_FILE_MAGIC
        )));
    }
    let version = read_u32(&mut reader)?;
    if version != FEATURE_FILE_VERSION {
        return Err(Error::FeatureFile(format!(
            "unsupported version {version}, expected {FEATURE_FILE_VERSION}"
        )));
    }
    let layer_count = read_u32(&mut reader)? as usize;
    if layer_count != specs.len() {
        return Err(Error::FeatureFile(format!(
            "file declares {layer_count} layers but {} specs are configured",
            specs.len()
        )));
    }

    let mut layers = Vec::with_capacity(layer_count);
    for spec in specs {
        let name_len = read_u32(&mut reader)? as usize;
        if name_len > 4096 {
            return Err(Error::FeatureFile(format!(
                "layer name length {name_len} is implausible"
            )));
        }
        let mut name_buf = vec![0u8; name_len];
        reader.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::FeatureFile("layer name is not valid UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::FeatureFile(format!(
                "layer name {name:?} does not match configured {:?}",
                spec.name
            )));
        }
        let channels = read_u32(&mut reader)? as usize;
        let width = read_u32(&mut reader)? as usize;
        let height = read_u32(&mut reader)? as usize;
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::FeatureFile(format!(
                "layer {name}: degenerate shape {channels}x{width}x{height}"
            )));
        }
        if channels < spec.channels_out {
            return Err(Error::FeatureFile(format!(
                "layer {name}: {channels} channels cannot supply channels_out {}",
                spec.channels_out
            )));
        }
        let mut maps = Vec::with_capacity(channels);
        for c in 0..channels {
            let mut data = vec![0.0f64; width * height];
            for v in data.iter_mut() {
                let raw = read_f32(&mut reader)?;
                if !raw.is_finite() {
                    return Err(Error::FeatureFile(format!(
                        "layer {name}: non-finite value in channel {c}"
                    )));
                }
                *v = raw as f64;
            }
            maps.push(SpatialMap::new(width, height, data)?);
        }
        layers.push(LayerFeatures { channels: maps });
    }
    Ok(FeatureStack { layers })
}

/// Writes a stack in the same layout `ingest_external_features` reads.
pub fn write_external_features(path: &Path, stack: &FeatureStack, specs: &[LayerSpec]) -> Result<()> {
    if stack.layers.len() != specs.len() {
        return Err(Error::Dimension(format!(
            "stack has {} layers but {} specs were given",
            stack.layers.len(),
            specs.len()
        )));
    }
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    writer.write_all(FEATURE_FILE_MAGIC)?;
    writer.write_all(&FEATURE_FILE_VERSION.to_le_bytes())?;
    writer.write_all(&(stack.layers.len() as u32).to_le_bytes())?;
    for (layer, spec) in stack.layers.iter().zip(specs) {
        let name = spec.name.as_bytes();
        writer.write_all(&(name.len() as u32).to_le_bytes())?;
        writer.write_all(name)?;
        let (w, h) = layer.dims();
        writer.write_all(&(layer.channels.len() as u32).to_le_bytes())?;
        writer.write_all(&(w as u32).to_le_bytes())?;
        writer.write_all(&(h as u32).to_le_bytes())?;
        for channel in &layer.channels {
            for v in channel.data() {
                writer.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn default_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::new("shallow", 4, 8, 1.0 / 12.0).unwrap(),
            LayerSpec::new("medium", 8, 8, 1.0 / 12.0).unwrap(),
        ]
    }

    fn random_patch(rng: &mut ChaCha8Rng, n: usize) -> SpatialMap {
        SpatialMap::new(n, n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_patch_has_zero_gradient_channels() {
        let patch = SpatialMap::filled(16, 16, 0.6);
        let specs = vec![LayerSpec::new("l0", 4, 4, 0.1).unwrap()];
        let stack = extract_handcrafted(&patch, &specs, 9).unwrap();
        let layer = stack.layer(0);
        assert!((layer.channels[0].at(0, 0) - 0.6).abs() < 1e-12);
        for channel in &layer.channels[1..] {
            for v in channel.data() {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn vertical_edge_mass_lands_in_horizontal_bin() {
        // Two vertical step edges (cyclic patch), pure d/dx gradient.
        let mut patch = SpatialMap::zeros(16, 16);
        for y in 0..16 {
            for x in 0..8 {
                patch.set(x, y, 1.0);
            }
        }
        let specs = vec![LayerSpec::new("l0", 4, 4, 0.1).unwrap()];
        let stack = extract_handcrafted(&patch, &specs, 9).unwrap();
        let layer = stack.layer(0);
        let hist_total: f64 = (2..11).map(|c| layer.channels[c].data().iter().sum::<f64>()).sum();
        let bin0: f64 = layer.channels[2].data().iter().sum();
        assert!(hist_total > 0.0);
        assert!((bin0 - hist_total).abs() < 1e-12, "all mass should be in bin 0");
    }

    #[test]
    fn cell_grid_is_integer_division_of_patch_extent() {
        let patch = SpatialMap::filled(16, 16, 0.3);
        let specs = vec![LayerSpec::new("l0", 4, 4, 0.1).unwrap()];
        let stack = extract_handcrafted(&patch, &specs, 9).unwrap();
        assert_eq!(stack.layer(0).dims(), (4, 4));
    }

    #[test]
    fn patch_smaller_than_cell_is_rejected() {
        let patch = SpatialMap::filled(3, 3, 0.3);
        let specs = vec![LayerSpec::new("l0", 4, 4, 0.1).unwrap()];
        assert!(matches!(
            extract_handcrafted(&patch, &specs, 9),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn extraction_is_cell_translation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 24;
        let cs = 4;
        let base = random_patch(&mut rng, n);
        let (dx, dy) = (2 * cs, cs);
        let mut shifted = SpatialMap::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                shifted.set((x + dx) % n, (y + dy) % n, base.at(x, y));
            }
        }
        let specs = vec![LayerSpec::new("l0", cs, 4, 0.1).unwrap()];
        let a = extract_handcrafted(&base, &specs, 9).unwrap();
        let b = extract_handcrafted(&shifted, &specs, 9).unwrap();
        let (cw, ch) = a.layer(0).dims();
        for c in 0..a.layer(0).channels.len() {
            for y in 0..ch {
                for x in 0..cw {
                    let va = a.layer(0).channels[c].at(x, y);
                    let vb = b.layer(0).channels[c].at((x + dx / cs) % cw, (y + dy / cs) % ch);
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    fn random_stack(rng: &mut ChaCha8Rng, channels: usize, w: usize, h: usize) -> FeatureStack {
        let maps = (0..channels)
            .map(|_| {
                SpatialMap::new(w, h, (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        FeatureStack { layers: vec![LayerFeatures { channels: maps }] }
    }

    fn reconstruction_error(stack: &FeatureStack, basis: &PcaBasis) -> f64 {
        // || centered - B B^T centered ||^2 summed over cells.
        let layer = &stack.layers[0];
        let lb = &basis.layers[0];
        let (w, h) = layer.dims();
        let d = layer.channels.len();
        let mut err = 0.0;
        for idx in 0..w * h {
            let mut cell = DVector::<f64>::zeros(d);
            for c in 0..d {
                cell[c] = layer.channels[c].data()[idx] - lb.mean[c];
            }
            let coeffs = lb.components.tr_mul(&cell);
            let recon = &lb.components * coeffs;
            err += (cell - recon).norm_squared();
        }
        err
    }

    #[test]
    fn full_rank_projection_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = random_stack(&mut rng, 5, 6, 6);
        let specs = vec![LayerSpec::new("l0", 1, 5, 0.1).unwrap()];
        let basis = pca_fit(&stack, &specs).unwrap();
        assert!(reconstruction_error(&stack, &basis) < 1e-8);
    }

    #[test]
    fn exact_two_dimensional_subspace_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (8, 8);
        // Channels are linear combinations of two latent maps.
        let latent_a: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let latent_b: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let maps: Vec<SpatialMap> = (0..6)
            .map(|_| {
                let ca = rng.gen_range(-1.0..1.0);
                let cb = rng.gen_range(-1.0..1.0);
                let data = latent_a
                    .iter()
                    .zip(&latent_b)
                    .map(|(a, b)| ca * a + cb * b)
                    .collect();
                SpatialMap::new(w, h, data).unwrap()
            })
            .collect();
        let stack = FeatureStack { layers: vec![LayerFeatures { channels: maps }] };
        let specs = vec![LayerSpec::new("l0", 1, 2, 0.1).unwrap()];
        let basis = pca_fit(&stack, &specs).unwrap();
        assert!(reconstruction_error(&stack, &basis) < 1e-8);
    }

    #[test]
    fn reconstruction_error_is_non_increasing_in_output_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = random_stack(&mut rng, 8, 10, 10);
        let mut previous = f64::INFINITY;
        for k in 1..=8 {
            let specs = vec![LayerSpec::new("l0", 1, k, 0.1).unwrap()];
            let basis = pca_fit(&stack, &specs).unwrap();
            let err = reconstruction_error(&stack, &basis);
            assert!(err <= previous + 1e-9, "error grew at k={k}");
            previous = err;
        }
        // Eigenvalue-sum oracle: residual equals the discarded eigenvalue mass.
        let specs = vec![LayerSpec::new("l0", 1, 3, 0.1).unwrap()];
        let basis = pca_fit(&stack, &specs).unwrap();
        let err = reconstruction_error(&stack, &basis) / 100.0;
        let layer = &stack.layers[0];
        let d = layer.channels.len();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mean: Vec<f64> = (0..d)
            .map(|c| layer.channels[c].data().iter().sum::<f64>() / 100.0)
            .collect();
        for idx in 0..100 {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (layer.channels[a].data()[idx] - mean[a])
                        * (layer.channels[b].data()[idx] - mean[b]);
                }
            }
        }
        cov.scale_mut(1.0 / 100.0);
        let mut eigs: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let discarded: f64 = eigs[3..].iter().sum();
        assert!((err - discarded).abs() < 1e-8);
    }

    #[test]
    fn projection_rejects_excess_channels_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = random_stack(&mut rng, 3, 4, 4);
        let specs = vec![LayerSpec::new("l0", 1, 4, 0.1).unwrap()];
        assert!(matches!(pca_fit(&stack, &specs), Err(Error::Parameter(_))));
    }

    #[test]
    fn basis_columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = random_stack(&mut rng, 7, 9, 9);
        let specs = vec![LayerSpec::new("l0", 1, 4, 0.1).unwrap()];
        let basis = pca_fit(&stack, &specs).unwrap();
        let b = &basis.layers[0].components;
        let gram = b.tr_mul(b);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn projection_is_idempotent_in_the_projected_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stack = random_stack(&mut rng, 6, 8, 8);
        let specs = vec![LayerSpec::new("l0", 1, 3, 0.1).unwrap()];
        let basis = pca_fit(&stack, &specs).unwrap();
        let once = pca_project(&stack, &basis).unwrap();

        // Re-embed the projection and project again.
        let lb = &basis.layers[0];
        let (w, h) = once.layer(0).dims();
        let mut embedded = vec![SpatialMap::zeros(w, h); lb.input_channels()];
        for idx in 0..w * h {
            let coeffs =
                DVector::from_iterator(3, (0..3).map(|c| once.layer(0).channels[c].data()[idx]));
            let cell = &lb.components * coeffs;
            for c in 0..lb.input_channels() {
                embedded[c].data_mut()[idx] = cell[c] + lb.mean[c];
            }
        }
        let embedded = FeatureStack { layers: vec![LayerFeatures { channels: embedded }] };
        let twice = pca_project(&embedded, &basis).unwrap();
        for c in 0..3 {
            for (a, b) in once.layer(0).channels[c]
                .data()
                .iter()
                .zip(twice.layer(0).channels[c].data())
            {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projected_energy_never_exceeds_centered_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stack = random_stack(&mut rng, 6, 8, 8);
        let specs = vec![LayerSpec::new("l0", 1, 3, 0.1).unwrap()];
        let basis = pca_fit(&stack, &specs).unwrap();
        let projected = pca_project(&stack, &basis).unwrap();
        let lb = &basis.layers[0];
        let centered_energy: f64 = (0..64)
            .map(|idx| {
                (0..6)
                    .map(|c| {
                        let v = stack.layer(0).channels[c].data()[idx] - lb.mean[c];
                        v * v
                    })
                    .sum::<f64>()
            })
            .sum();
        let projected_energy: f64 = projected.layer(0).channels.iter().map(|c| c.energy()).sum();
        assert!(projected_energy <= centered_energy + 1e-9);
    }

    #[test]
    fn layer_order_follows_the_spec_list_through_every_operation() {
        let patch = SpatialMap::filled(32, 32, 0.5);
        let specs = vec![
            LayerSpec::new("fine", 2, 3, 0.1).unwrap(),
            LayerSpec::new("coarse", 8, 3, 0.1).unwrap(),
        ];
        let stack = extract_handcrafted(&patch, &specs, 9).unwrap();
        assert_eq!(stack.layer(0).dims(), (16, 16));
        assert_eq!(stack.layer(1).dims(), (4, 4));
        let basis = pca_fit(&stack, &specs).unwrap();
        let projected = pca_project(&stack, &basis).unwrap();
        assert_eq!(projected.layer(0).dims(), (16, 16));
        assert_eq!(projected.layer(1).dims(), (4, 4));
        let windows = vec![SpatialMap::filled(16, 16, 1.0), SpatialMap::filled(4, 4, 1.0)];
        let windowed = apply_window(&projected, &windows).unwrap();
        assert_eq!(windowed.layer(0).dims(), (16, 16));
        assert_eq!(windowed.layer(1).dims(), (4, 4));
    }

    #[test]
    fn projection_commutes_with_post_centering_scaling() {
        // Scaling the centered input scales the projection by the same
        // factor: project(mean + s * (x - mean)) = s * project(x).
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let stack = random_stack(&mut rng, 6, 8, 8);
        let specs = vec![LayerSpec::new("l0", 1, 3, 0.1).unwrap()];
        let basis = pca_fit(&stack, &specs).unwrap();
        let base = pca_project(&stack, &basis).unwrap();

        let s = 1.7;
        let lb = &basis.layers[0];
        let scaled_layers: Vec<SpatialMap> = stack.layer(0)
            .channels
            .iter()
            .enumerate()
            .map(|(c, map)| {
                let data = map
                    .data()
                    .iter()
                    .map(|v| lb.mean[c] + s * (v - lb.mean[c]))
                    .collect();
                SpatialMap::new(8, 8, data).unwrap()
            })
            .collect();
        let scaled = FeatureStack { layers: vec![LayerFeatures { channels: scaled_layers }] };
        let projected = pca_project(&scaled, &basis).unwrap();
        for c in 0..3 {
            for (a, b) in projected.layer(0).channels[c]
                .data()
                .iter()
                .zip(base.layer(0).channels[c].data())
            {
                assert!((a - s * b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn windowing_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack = random_stack(&mut rng, 3, 6, 6);
        let ones = vec![SpatialMap::filled(6, 6, 1.0)];
        let same = apply_window(&stack, &ones).unwrap();
        for c in 0..3 {
            assert_eq!(same.layer(0).channels[c].data(), stack.layer(0).channels[c].data());
        }
        let zeros = vec![SpatialMap::zeros(6, 6)];
        let dark = apply_window(&stack, &zeros).unwrap();
        for c in 0..3 {
            assert!(dark.layer(0).channels[c].data().iter().all(|v| *v == 0.0));
        }
        let cosine = vec![crate::signal::cosine_window(6, 6).unwrap()];
        let tapered = apply_window(&stack, &cosine).unwrap();
        for c in 0..3 {
            for x in 0..6 {
                assert_eq!(tapered.layer(0).channels[c].at(x, 0), 0.0);
                assert_eq!(tapered.layer(0).channels[c].at(x, 5), 0.0);
            }
        }
    }

    #[test]
    fn window_dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let stack = random_stack(&mut rng, 3, 6, 6);
        let wrong = vec![SpatialMap::filled(5, 6, 1.0)];
        assert!(matches!(apply_window(&stack, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn feature_file_round_trips_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dir = std::env::temp_dir().join(format!("mbcf-feat-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.mhft");

        let specs = default_specs();
        let mut layers = Vec::new();
        for (w, h, ch) in [(12usize, 10usize, 9usize), (6, 5, 8)] {
            let channels = (0..ch)
                .map(|_| {
                    // f32-representable values so the round trip is exact.
                    let data: Vec<f64> =
                        (0..w * h).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect();
                    SpatialMap::new(w, h, data).unwrap()
                })
                .collect();
            layers.push(LayerFeatures { channels });
        }
        let stack = FeatureStack { layers };
        write_external_features(&path, &stack, &specs).unwrap();
        let back = ingest_external_features(&path, &specs).unwrap();
        for (la, lb) in stack.layers.iter().zip(&back.layers) {
            assert_eq!(la.channels.len(), lb.channels.len());
            for (ca, cb) in la.channels.iter().zip(&lb.channels) {
                assert_eq!(ca.data(), cb.data());
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn feature_file_declared_shapes_are_honored() {
        let dir = std::env::temp_dir().join(format!("mbcf-feat-shapes-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("shapes.mhft");

        let specs = vec![
            LayerSpec::new("conv1", 2, 64, 1.0 / 12.0).unwrap(),
            LayerSpec::new("res3", 8, 256, 1.0 / 12.0).unwrap(),
            LayerSpec::new("res4", 16, 256, 1.0 / 3.0).unwrap(),
        ];
        let shapes = [(64usize, 112usize, 112usize), (256, 28, 28), (256, 14, 14)];
        let layers = shapes
            .iter()
            .map(|&(ch, w, h)| LayerFeatures {
                channels: vec![SpatialMap::filled(w, h, 0.25); ch],
            })
            .collect();
        let stack = FeatureStack { layers };
        write_external_features(&path, &stack, &specs).unwrap();
        let back = ingest_external_features(&path, &specs).unwrap();
        for (layer, &(ch, w, h)) in back.layers.iter().zip(&shapes) {
            assert_eq!(layer.channels.len(), ch);
            assert_eq!(layer.dims(), (w, h));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn feature_file_nan_is_rejected() {
        let dir = std::env::temp_dir().join(format!("mbcf-feat-nan-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("nan.mhft");

        let specs = vec![LayerSpec::new("l0", 1, 1, 0.1).unwrap()];
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FEATURE_FILE_MAGIC);
        bytes.extend_from_slice(&FEATURE_FILE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(b"l0");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();

        match ingest_external_features(&path, &specs) {
            Err(Error::FeatureFile(msg)) => assert!(msg.contains("l0"), "message: {msg}"),
            other => panic!("expected feature file error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn feature_file_bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join(format!("mbcf-feat-magic-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("magic.mhft");
        std::fs::write(&path, b"NOPE0000").unwrap();
        let specs = vec![LayerSpec::new("l0", 1, 1, 0.1).unwrap()];
        assert!(matches!(
            ingest_external_features(&path, &specs),
            Err(Error::FeatureFile(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
