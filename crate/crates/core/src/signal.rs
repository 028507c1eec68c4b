//! Discrete Fourier transforms, cyclic correlation, and the window/label
//! constructors shared by every other module.
//!
//! # Correlation convention
//!
//! There are two reflected ways to define cyclic cross-correlation. This
//! crate fixes one and uses it everywhere:
//!
//! ```text
//! cyclic_correlate(a, b)[s] = sum_t a[(t + s) mod N] * b[t]
//!                           = idft2( dft2(a) .* conj(dft2(b)) )
//! ```
//!
//! `a` is the signal and `b` is the template that slides over it. Under this
//! convention correlating any map with a unit impulse returns the map itself,
//! and cyclically shifting the *signal* shifts the correlation output by the
//! same amount. Detection inherits the convention: the conjugate falls on the
//! filter side, so a target displacement moves the response peak by exactly
//! that displacement.
//!
//! The forward transform is unnormalized; the inverse carries the full
//! `1/(W*H)` factor.

use std::cell::RefCell;

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// A real-valued map over a small 2D grid (labels, windows, score maps,
/// feature channels). Row-major storage, `data[y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SpatialMap {
    /// Builds a map from row-major data, rejecting empty grids, length
    /// mismatches, and non-finite values.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "spatial map must be nonempty, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "expected {} values for a {width}x{height} map, got {}",
                width * height,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("spatial map contains non-finite values".into()));
        }
        Ok(Self { width, height, data })
    }

    /// All-zero map. Panics on an empty grid; fallible construction goes
    /// through [`SpatialMap::new`].
    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "spatial map must be nonempty");
        Self { width, height, data: vec![0.0; width * height] }
    }

    /// Map filled with a constant.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "spatial map must be nonempty");
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Elementwise product with another map of identical dimensions.
    pub fn hadamard(&self, other: &SpatialMap) -> Result<SpatialMap> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "hadamard operands disagree: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(SpatialMap { width: self.width, height: self.height, data })
    }

    /// Sum of squared values.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &SpatialMap) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &SpatialMap) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale_in_place(&mut self, scale: f64) {
        for v in &mut self.data {
            *v *= scale;
        }
    }
}

/// A complex-valued frequency grid, same layout as [`SpatialMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMap {
    width: usize,
    height: usize,
    data: Vec<Complex<f64>>,
}

impl SpectrumMap {
    pub fn new(width: usize, height: usize, data: Vec<Complex<f64>>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "spectrum must be nonempty, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "expected {} bins for a {width}x{height} spectrum, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "spectrum must be nonempty");
        Self { width, height, data: vec![Complex::new(0.0, 0.0); width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[Complex<f64>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<f64>] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Complex<f64> {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: Complex<f64>) {
        self.data[y * self.width + x] = value;
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2D FFT over row-major complex data: rows first, then columns.
fn fft2_in_place(data: &mut [Complex<f64>], width: usize, height: usize, inverse: bool) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let row_fft = if inverse {
            planner.plan_fft_inverse(width)
        } else {
            planner.plan_fft_forward(width)
        };
        let col_fft = if inverse {
            planner.plan_fft_inverse(height)
        } else {
            planner.plan_fft_forward(height)
        };

        let mut scratch = vec![Complex::new(0.0, 0.0); row_fft.get_inplace_scratch_len()];
        for row in data.chunks_exact_mut(width) {
            row_fft.process_with_scratch(row, &mut scratch);
        }

        let mut column = vec![Complex::new(0.0, 0.0); height];
        let mut scratch = vec![Complex::new(0.0, 0.0); col_fft.get_inplace_scratch_len()];
        for x in 0..width {
            for y in 0..height {
                column[y] = data[y * width + x];
            }
            col_fft.process_with_scratch(&mut column, &mut scratch);
            for y in 0..height {
                data[y * width + x] = column[y];
            }
        }
    });
}

/// Unnormalized 2D DFT of a real map.
pub fn dft2(map: &SpatialMap) -> SpectrumMap {
    let mut data: Vec<Complex<f64>> = map.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2_in_place(&mut data, map.width(), map.height(), false);
    SpectrumMap { width: map.width(), height: map.height(), data }
}

/// Inverse 2D DFT with `1/(W*H)` normalization, demanding a real result.
///
/// The imaginary residue of the inverse is discarded when it stays below
/// `1e-8` relative to the real magnitude; a larger residue means the input
/// was not conjugate-symmetric and is reported as an error.
pub fn idft2(spec: &SpectrumMap) -> Result<SpatialMap> {
    let (real, residue) = idft2_with_residue(spec);
    let scale = real.data().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    if residue > 1e-8 * scale {
        return Err(Error::NotConjugateSymmetric { residue });
    }
    Ok(real)
}

/// Inverse transform returning the real part together with the largest
/// absolute imaginary residue. Used internally where symmetry is known.
pub(crate) fn idft2_with_residue(spec: &SpectrumMap) -> (SpatialMap, f64) {
    let mut data = spec.data().to_vec();
    fft2_in_place(&mut data, spec.width(), spec.height(), true);
    let norm = 1.0 / (spec.width() * spec.height()) as f64;
    let mut residue = 0.0_f64;
    let real: Vec<f64> = data
        .iter()
        .map(|c| {
            residue = residue.max((c.im * norm).abs());
            c.re * norm
        })
        .collect();
    (
        SpatialMap { width: spec.width(), height: spec.height(), data: real },
        residue,
    )
}

/// Inverse transform of a spectrum known (by construction) to be the
/// transform of a real map; the imaginary residue is rounding noise and is
/// dropped without a symmetry check.
pub(crate) fn idft2_real_lossy(spec: &SpectrumMap) -> SpatialMap {
    idft2_with_residue(spec).0
}

/// Cyclic cross-correlation under the module convention:
/// `result[s] = sum_t a[(t + s) mod N] * b[t]`.
pub fn cyclic_correlate(a: &SpatialMap, b: &SpatialMap) -> Result<SpatialMap> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "correlation operands disagree: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut spec_a = dft2(a);
    let spec_b = dft2(b);
    for (va, vb) in spec_a.data_mut().iter_mut().zip(spec_b.data()) {
        *va *= vb.conj();
    }
    Ok(idft2_real_lossy(&spec_a))
}

/// Cyclic wrap-around displacement from `center` to coordinate `i` on a ring
/// of size `n`, folded into `(-n/2, n/2]`.
fn cyclic_delta(i: usize, center: f64, n: usize) -> f64 {
    let n = n as f64;
    let mut d = (i as f64 - center).rem_euclid(n);
    if d > n / 2.0 {
        d -= n;
    }
    d
}

/// Gaussian response label with cyclic distance to `center`, so the label is
/// consistent with the cyclic-shift sample model. Peak amplitude is 1,
/// attained exactly when `center` falls on a cell.
pub fn gaussian_label(
    width: usize,
    height: usize,
    center: (f64, f64),
    sigma: f64,
) -> Result<SpatialMap> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension("label grid must be nonempty".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("label sigma must be positive, got {sigma}")));
    }
    if !(0.0..width as f64).contains(&center.0) || !(0.0..height as f64).contains(&center.1) {
        return Err(Error::Parameter(format!(
            "label center {center:?} outside [0,{width})x[0,{height})"
        )));
    }
    let mut map = SpatialMap::zeros(width, height);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..height {
        let dy = cyclic_delta(y, center.1, height);
        for x in 0..width {
            let dx = cyclic_delta(x, center.0, width);
            map.set(x, y, (-(dx * dx + dy * dy) * inv).exp());
        }
    }
    Ok(map)
}

/// One-dimensional Hann profile: zero at both ends, 1 at the middle for odd
/// lengths. A singleton axis degenerates to `[1.0]` so row and column
/// windows stay usable.
pub fn hann_profile(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Parameter("window axis must have at least one cell".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / denom).cos()))
        .collect())
}

/// Separable 2D Hann window; every border cell is exactly zero (except along
/// singleton axes, which carry the constant profile 1).
pub fn cosine_window(width: usize, height: usize) -> Result<SpatialMap> {
    let wx = hann_profile(width)?;
    let wy = hann_profile(height)?;
    let mut map = SpatialMap::zeros(width, height);
    for (y, vy) in wy.iter().enumerate() {
        for (x, vx) in wx.iter().enumerate() {
            map.set(x, y, vx * vy);
        }
    }
    Ok(map)
}
