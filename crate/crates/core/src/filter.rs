//! Independent correlation-filter learning for one feature layer.
//!
//! Each branch minimizes a weighted multi-sample ridge objective over its
//! filter bank `f = {f_d}`:
//!
//! ```text
//! J(f) = sum_k w_k || sum_d corr(x_{k,d}, f_d) - y ||^2
//!      + lambda * sum_d || w_reg .* f_d ||^2
//! ```
//!
//! where `corr` is [`crate::signal::cyclic_correlate`] (signal first, filter
//! second) and `w_reg` is a spatial penalty window that is cheap at the
//! center and expensive toward the borders. Setting the gradient to zero
//! gives normal equations whose operator is applied matrix-free in the
//! Fourier domain; a conjugate-gradient solver with a selectable momentum
//! formula (Fletcher-Reeves or Polak-Ribiere) drives them to a relative
//! residual of 1e-6, warm-started from the previous filters.
//!
//! The single-sample, single-channel, uniform-window case has a closed-form
//! solution ([`closed_form_single`]) that serves as the analytic oracle for
//! the iterative path.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::features::LayerSpec;
use crate::signal::{cyclic_correlate, dft2, idft2_real_lossy, SpatialMap, SpectrumMap};

/// One layer's learned filter bank plus the ingredients of its objective.
#[derive(Debug, Clone)]
pub struct BranchModel {
    /// Filters in the Fourier domain, one spectrum per channel.
    pub filters: Vec<SpectrumMap>,
    /// Strictly positive spatial penalty window.
    pub reg_window: SpatialMap,
    /// Gaussian response label at layer resolution.
    pub label: SpatialMap,
    pub lambda: f64,
    pub spec: LayerSpec,
}

impl BranchModel {
    /// Fresh model with all-zero filters.
    pub fn new(
        channels: usize,
        reg_window: SpatialMap,
        label: SpatialMap,
        lambda: f64,
        spec: LayerSpec,
    ) -> Result<Self> {
        if reg_window.dims() != label.dims() {
            return Err(Error::Dimension(format!(
                "reg window {:?} and label {:?} disagree",
                reg_window.dims(),
                label.dims()
            )));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda must be nonnegative, got {lambda}")));
        }
        if reg_window.data().iter().any(|v| *v <= 0.0) {
            return Err(Error::Parameter("reg window must be strictly positive".into()));
        }
        let (w, h) = label.dims();
        Ok(Self {
            filters: vec![SpectrumMap::zeros(w, h); channels],
            reg_window,
            label,
            lambda,
            spec,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.label.dims()
    }

    pub fn channels(&self) -> usize {
        self.filters.len()
    }

    /// Spatial-domain view of the filter bank.
    pub fn filters_spatial(&self) -> FilterBank {
        FilterBank {
            channels: self.filters.iter().map(idft2_real_lossy).collect(),
        }
    }

    /// Replaces the filters with the spectra of a spatial bank.
    pub fn set_filters_spatial(&mut self, bank: &FilterBank) {
        self.filters = bank.channels.iter().map(dft2).collect();
    }
}

/// SRDCF-style penalty window: quadratic growth away from the center,
/// normalized by the target half-extent so the penalty reaches about 1 at
/// the target boundary. Clamped to `[min, 1e5 * max(lambda, 1e-5)]`.
pub fn penalty_window(
    width: usize,
    height: usize,
    target_cells: (f64, f64),
    lambda: f64,
) -> Result<SpatialMap> {
    if !(target_cells.0 > 0.0 && target_cells.1 > 0.0) {
        return Err(Error::Parameter("target extent must be positive".into()));
    }
    let min_w = 1e-3;
    let max_w = 1e5 * lambda.max(1e-5);
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let hx = (target_cells.0 / 2.0).max(0.5);
    let hy = (target_cells.1 / 2.0).max(0.5);
    let mut map = SpatialMap::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let dx = (x as f64 - cx) / hx;
            let dy = (y as f64 - cy) / hy;
            let v = (min_w + dx * dx + dy * dy).clamp(min_w, max_w);
            map.set(x, y, v);
        }
    }
    Ok(map)
}

/// A spatial filter bank: one real map per channel, treated as a single
/// vector by the solver.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub channels: Vec<SpatialMap>,
}

impl FilterBank {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Self { channels: vec![SpatialMap::zeros(width, height); channels] }
    }

    pub fn dot(&self, other: &FilterBank) -> f64 {
        self.channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &FilterBank) {
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            a.axpy(scale, b);
        }
    }

    pub fn scale_in_place(&mut self, scale: f64) {
        for c in &mut self.channels {
            c.scale_in_place(scale);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.channels
            .iter()
            .all(|c| c.data().iter().all(|v| v.is_finite()))
    }
}

/// Weighted training samples shared by all branches. Entries hold full
/// feature stacks; branches borrow their layer's slice.
#[derive(Debug, Clone)]
pub struct SampleMemory {
    capacity: usize,
    entries: Vec<MemoryEntry>,
}

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub stack: crate::features::FeatureStack,
    pub weight: f64,
}

impl SampleMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("memory capacity must be positive".into()));
        }
        Ok(Self { capacity, entries: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Newest entry (highest insertion recency), if any.
    pub fn latest(&self) -> Option<&MemoryEntry> {
        self.entries.last()
    }

    /// Weighted samples of one layer, borrowed for a branch.
    pub fn layer_samples(&self, layer: usize) -> Vec<(&[SpatialMap], f64)> {
        self.entries
            .iter()
            .map(|e| (e.stack.layers[layer].channels.as_slice(), e.weight))
            .collect()
    }

    /// Inserts a sample with weight `learning_rate`, scaling existing
    /// weights by `1 - learning_rate`. When the memory would overflow, the
    /// two smallest-weight entries merge by weighted average (the merged
    /// entry keeps the earlier slot). Weights are renormalized to sum to 1.
    pub fn insert(&mut self, stack: crate::features::FeatureStack, learning_rate: f64) -> Result<()> {
        if !(0.0 < learning_rate && learning_rate < 1.0) {
            return Err(Error::Parameter(format!(
                "learning rate must lie in (0,1), got {learning_rate}"
            )));
        }
        for e in &mut self.entries {
            e.weight *= 1.0 - learning_rate;
        }
        if self.entries.len() == self.capacity && self.capacity == 1 {
            self.entries.clear();
        } else if self.entries.len() == self.capacity {
            // Merge the two lightest entries; i < j by construction.
            let (mut i, mut j) = (0, 1);
            if self.entries[j].weight < self.entries[i].weight {
                std::mem::swap(&mut i, &mut j);
            }
            for k in 2..self.entries.len() {
                let wk = self.entries[k].weight;
                if wk < self.entries[i].weight {
                    j = i;
                    i = k;
                } else if wk < self.entries[j].weight {
                    j = k;
                }
            }
            let (lo, hi) = (i.min(j), i.max(j));
            let removed = self.entries.remove(hi);
            let keep = &mut self.entries[lo];
            let total = keep.weight + removed.weight;
            if total > 0.0 {
                let t = removed.weight / total;
                keep.stack.blend(&removed.stack, t)?;
            }
            keep.weight = total;
        }
        self.entries.push(MemoryEntry { stack, weight: learning_rate });
        let sum: f64 = self.entries.iter().map(|e| e.weight).sum();
        for e in &mut self.entries {
            e.weight /= sum;
        }
        Ok(())
    }
}

/// Closed-form single-sample coefficient map (linear kernel):
/// `alpha = idft( dft(y) / (dft(autocorr(x)) + lambda) )`.
pub fn closed_form_single(x: &SpatialMap, y: &SpatialMap, lambda: f64) -> Result<SpatialMap> {
    if x.dims() != y.dims() {
        return Err(Error::Dimension(format!(
            "sample {:?} and label {:?} disagree",
            x.dims(),
            y.dims()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be nonnegative, got {lambda}")));
    }
    let spec_x = dft2(x);
    let spec_y = dft2(y);
    let mut out = SpectrumMap::zeros(x.width(), x.height());
    for ((o, sx), sy) in out.data_mut().iter_mut().zip(spec_x.data()).zip(spec_y.data()) {
        let denom = sx.norm_sqr() + lambda;
        if denom == 0.0 {
            return Err(Error::Singular(
                "autocorrelation spectrum has a zero bin and lambda is 0".into(),
            ));
        }
        *o = sy / denom;
    }
    Ok(idft2_real_lossy(&out))
}

/// Response of a coefficient map on a new single-channel patch `z` given the
/// stored appearance `x`: `idft( dft(alpha) .* dft(z) .* conj(dft(x)) )`.
pub fn response_from_alpha(alpha: &SpatialMap, x: &SpatialMap, z: &SpatialMap) -> Result<SpatialMap> {
    if alpha.dims() != x.dims() || x.dims() != z.dims() {
        return Err(Error::Dimension("alpha, sample, and patch dims disagree".into()));
    }
    let spec_a = dft2(alpha);
    let spec_x = dft2(x);
    let spec_z = dft2(z);
    let mut out = SpectrumMap::zeros(z.width(), z.height());
    for i in 0..out.data().len() {
        let v = spec_a.data()[i] * spec_z.data()[i] * spec_x.data()[i].conj();
        out.data_mut()[i] = v;
    }
    Ok(idft2_real_lossy(&out))
}

/// Detection: correlates every channel of `z` with its filter and sums,
/// `response = idft( sum_d dft(z_d) .* conj(filter_d) )`. Cyclically
/// shifting the target in `z` shifts the response peak by the same amount.
pub fn detect(z: &[SpatialMap], model: &BranchModel) -> Result<SpatialMap> {
    detect_with_filters(z, &model.filters, model.dims())
}

pub(crate) fn detect_with_filters(
    z: &[SpatialMap],
    filters: &[SpectrumMap],
    dims: (usize, usize),
) -> Result<SpatialMap> {
    if z.len() != filters.len() {
        return Err(Error::Dimension(format!(
            "patch has {} channels but model has {}",
            z.len(),
            filters.len()
        )));
    }
    let mut acc = SpectrumMap::zeros(dims.0, dims.1);
    for (zc, fc) in z.iter().zip(filters) {
        if zc.dims() != dims {
            return Err(Error::Dimension(format!(
                "patch channel {:?} does not match model {:?}",
                zc.dims(),
                dims
            )));
        }
        let spec_z = dft2(zc);
        for (a, (vz, vf)) in acc
            .data_mut()
            .iter_mut()
            .zip(spec_z.data().iter().zip(fc.data()))
        {
            *a += vz * vf.conj();
        }
    }
    Ok(idft2_real_lossy(&acc))
}

/// Objective value of the branch on a set of weighted layer samples. Used
/// for monitoring and tests, not in the hot loop.
pub fn branch_objective(model: &BranchModel, samples: &[(&[SpatialMap], f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let spatial = model.filters_spatial();
    let mut energy = 0.0;
    for (channels, weight) in samples {
        let mut response = SpatialMap::zeros(model.dims().0, model.dims().1);
        for (zc, fc) in channels.iter().zip(&spatial.channels) {
            response.axpy(1.0, &cyclic_correlate(zc, fc)?);
        }
        let mut err = 0.0;
        for (r, y) in response.data().iter().zip(model.label.data()) {
            err += (r - y) * (r - y);
        }
        energy += weight * err;
    }
    let mut reg = 0.0;
    for fc in &spatial.channels {
        let weighted = fc.hadamard(&model.reg_window)?;
        reg += weighted.energy();
    }
    Ok(energy + model.lambda * reg)
}

/// Matrix-free normal equations for one branch: the operator applies
/// `f -> sum_k w_k X_k^H (X_k f) + lambda * w_reg^2 .* f` entirely through
/// FFTs and elementwise products, and the right-hand side is
/// `sum_k w_k X_k^H y`.
pub struct NormalEqSystem {
    sample_spectra: Vec<(Vec<SpectrumMap>, f64)>,
    reg_sq: SpatialMap,
    rhs: FilterBank,
    width: usize,
    height: usize,
    channels: usize,
}

/// Builds the system from the branch's layer samples. Requires `lambda > 0`
/// so the operator is positive definite.
pub fn build_normal_equations(
    samples: &[(&[SpatialMap], f64)],
    model: &BranchModel,
) -> Result<NormalEqSystem> {
    if samples.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if !(model.lambda > 0.0) {
        return Err(Error::Parameter("normal equations require lambda > 0".into()));
    }
    let (w, h) = model.dims();
    let channels = model.channels();
    let label_spec = dft2(&model.label);

    let mut sample_spectra = Vec::with_capacity(samples.len());
    let mut rhs = FilterBank::zeros(channels, w, h);
    for (sample, weight) in samples {
        if sample.len() != channels {
            return Err(Error::Dimension(format!(
                "sample has {} channels, model has {channels}",
                sample.len()
            )));
        }
        let spectra: Vec<SpectrumMap> = sample
            .iter()
            .map(|c| {
                if c.dims() != (w, h) {
                    return Err(Error::Dimension(format!(
                        "sample channel {:?} does not match model {:?}",
                        c.dims(),
                        (w, h)
                    )));
                }
                Ok(dft2(c))
            })
            .collect::<Result<_>>()?;
        // rhs_d += w_k * idft( x_kd .* conj(y_spec) )
        for (d, spec) in spectra.iter().enumerate() {
            let mut term = SpectrumMap::zeros(w, h);
            for (t, (sx, sy)) in term
                .data_mut()
                .iter_mut()
                .zip(spec.data().iter().zip(label_spec.data()))
            {
                *t = sx * sy.conj();
            }
            rhs.channels[d].axpy(*weight, &idft2_real_lossy(&term));
        }
        sample_spectra.push((spectra, *weight));
    }

    let reg_sq = {
        let mut m = model.reg_window.clone();
        let lambda = model.lambda;
        for v in m.data_mut() {
            *v = lambda * *v * *v;
        }
        m
    };

    Ok(NormalEqSystem { sample_spectra, reg_sq, rhs, width: w, height: h, channels })
}

impl NormalEqSystem {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn rhs(&self) -> &FilterBank {
        &self.rhs
    }

    /// Applies the Hermitian positive-definite operator to a spatial bank.
    pub fn apply(&self, bank: &FilterBank) -> FilterBank {
        let f_spectra: Vec<SpectrumMap> = bank.channels.iter().map(dft2).collect();
        let mut acc_spectra = vec![SpectrumMap::zeros(self.width, self.height); self.channels];
        for (spectra, weight) in &self.sample_spectra {
            // Response spectrum of this sample under the current filters.
            let mut resp = SpectrumMap::zeros(self.width, self.height);
            for (xs, fs) in spectra.iter().zip(&f_spectra) {
                for (r, (x, f)) in resp
                    .data_mut()
                    .iter_mut()
                    .zip(xs.data().iter().zip(fs.data()))
                {
                    *r += x * f.conj();
                }
            }
            // Adjoint: acc_d += w * x_d .* conj(resp)
            for (xs, acc) in spectra.iter().zip(&mut acc_spectra) {
                for (a, (x, r)) in acc
                    .data_mut()
                    .iter_mut()
                    .zip(xs.data().iter().zip(resp.data()))
                {
                    *a += *weight * x * r.conj();
                }
            }
        }
        let mut out = FilterBank {
            channels: acc_spectra.iter().map(idft2_real_lossy).collect(),
        };
        for (o, f) in out.channels.iter_mut().zip(&bank.channels) {
            for ((ov, fv), rv) in o.data_mut().iter_mut().zip(f.data()).zip(self.reg_sq.data()) {
                *ov += fv * rv;
            }
        }
        out
    }
}

/// Momentum formula for the conjugate-gradient direction update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgFormula {
    FletcherReeves,
    /// Polak-Ribiere with the usual restart clamp `beta = max(0, beta)`.
    PolakRibiere,
}

/// Convergence report of one CG run.
#[derive(Debug, Clone)]
pub struct CgReport {
    pub iterations: usize,
    pub converged: bool,
    /// Residual norm after every iteration, starting with the initial one.
    pub residuals: Vec<f64>,
}

/// Conjugate-gradient state over a [`NormalEqSystem`], stepped manually so
/// callers can watch iterates.
pub struct CgSolver<'a> {
    system: &'a NormalEqSystem,
    x: FilterBank,
    r: FilterBank,
    p: FilterBank,
    rr: f64,
    rhs_norm: f64,
    formula: CgFormula,
    tolerance: f64,
    iterations: usize,
}

impl<'a> CgSolver<'a> {
    pub fn new(system: &'a NormalEqSystem, init: FilterBank, formula: CgFormula) -> Self {
        Self::with_tolerance(system, init, formula, 1e-6)
    }

    /// Solver with a custom relative-residual stop threshold; the production
    /// path uses 1e-6, oracle tests drive it tighter.
    pub fn with_tolerance(
        system: &'a NormalEqSystem,
        init: FilterBank,
        formula: CgFormula,
        tolerance: f64,
    ) -> Self {
        let mut r = system.rhs().clone();
        let ax = system.apply(&init);
        r.axpy(-1.0, &ax);
        let p = r.clone();
        let rr = r.dot(&r);
        let rhs_norm = system.rhs().norm().max(1e-300);
        Self {
            system,
            x: init,
            r,
            p,
            rr,
            rhs_norm,
            formula,
            tolerance,
            iterations: 0,
        }
    }

    pub fn residual_norm(&self) -> f64 {
        self.rr.sqrt()
    }

    pub fn relative_residual(&self) -> f64 {
        self.residual_norm() / self.rhs_norm
    }

    pub fn solution(&self) -> &FilterBank {
        &self.x
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// One CG iteration. Returns `Ok(true)` once converged.
    pub fn step(&mut self) -> Result<bool> {
        if self.relative_residual() < self.tolerance {
            return Ok(true);
        }
        let ap = self.system.apply(&self.p);
        let pap = self.p.dot(&ap);
        if !pap.is_finite() {
            return Err(Error::Divergence { iteration: self.iterations });
        }
        if pap <= 0.0 {
            // Numerically exhausted search direction; treat as converged.
            return Ok(true);
        }
        let alpha = self.rr / pap;
        self.x.axpy(alpha, &self.p);

        let r_old = self.r.clone();
        self.r.axpy(-alpha, &ap);
        let rr_new = self.r.dot(&self.r);
        if !rr_new.is_finite() {
            return Err(Error::Divergence { iteration: self.iterations });
        }
        let beta = match self.formula {
            CgFormula::FletcherReeves => rr_new / self.rr,
            CgFormula::PolakRibiere => {
                let mut diff = self.r.clone();
                diff.axpy(-1.0, &r_old);
                (self.r.dot(&diff) / self.rr).max(0.0)
            }
        };
        let mut p_new = self.r.clone();
        p_new.axpy(beta, &self.p);
        self.p = p_new;
        self.rr = rr_new;
        self.iterations += 1;
        Ok(self.relative_residual() < self.tolerance)
    }
}

/// Runs CG from `init` for at most `max_iters` iterations, returning the
/// solution bank and a report. Returns early at relative residual 1e-6.
pub fn solve_cg(
    system: &NormalEqSystem,
    init: FilterBank,
    max_iters: usize,
    formula: CgFormula,
) -> Result<(FilterBank, CgReport)> {
    solve_cg_tol(system, init, max_iters, formula, 1e-6)
}

/// [`solve_cg`] with an explicit stop threshold.
pub fn solve_cg_tol(
    system: &NormalEqSystem,
    init: FilterBank,
    max_iters: usize,
    formula: CgFormula,
    tolerance: f64,
) -> Result<(FilterBank, CgReport)> {
    if max_iters == 0 {
        return Err(Error::Parameter("max_iters must be >= 1".into()));
    }
    let mut solver = CgSolver::with_tolerance(system, init, formula, tolerance);
    let mut residuals = vec![solver.residual_norm()];
    let mut converged = false;
    for _ in 0..max_iters {
        converged = solver.step()?;
        residuals.push(solver.residual_norm());
        if converged {
            break;
        }
    }
    let iterations = solver.iterations();
    Ok((
        solver.x,
        CgReport { iterations, converged, residuals },
    ))
}

/// Per-bin closed form for the single-sample multi-channel system with a
/// uniform regularization window; used as an oracle wherever the memory has
/// exactly one sample. `filter_d = idft( x_d .* conj(y) / (sum|x|^2 + lambda) )`.
pub fn single_sample_solution(sample: &[SpatialMap], label: &SpatialMap, lambda: f64) -> Result<FilterBank> {
    let (w, h) = label.dims();
    let spectra: Vec<SpectrumMap> = sample.iter().map(dft2).collect();
    let label_spec = dft2(label);
    let mut denom = vec![lambda; w * h];
    for spec in &spectra {
        for (d, v) in denom.iter_mut().zip(spec.data()) {
            *d += v.norm_sqr();
        }
    }
    if denom.contains(&0.0) {
        return Err(Error::Singular("zero bin with lambda = 0".into()));
    }
    let mut bank = Vec::with_capacity(spectra.len());
    for spec in &spectra {
        let mut f = SpectrumMap::zeros(w, h);
        for ((o, x), (y, d)) in f
            .data_mut()
            .iter_mut()
            .zip(spec.data())
            .zip(label_spec.data().iter().zip(&denom))
        {
            *o = x * y.conj() / Complex::new(*d, 0.0);
        }
        bank.push(idft2_real_lossy(&f));
    }
    Ok(FilterBank { channels: bank })
}
