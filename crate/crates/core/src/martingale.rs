//! Continuous square-integrable martingale drivers with prescribed covariance rate.
//!
//! A driver is a finite sum of rank-one pieces `M(t) = Σᵢ βᵢ mᵢ(t)`, where each
//! scalar `mᵢ` is an independent time-changed Brownian motion with
//! `⟨mᵢ⟩ₜ = ∫₀ᵗ αᵢ(s) ds`. Its covariance rate is
//! `Q(t) = Σᵢ αᵢ(t) βᵢ⊗βᵢ`, so any deterministic finite-rank rate is reachable.
//!
//! # Noise bundle file layout
//!
//! [`NoiseBundle::write_to`] emits little-endian data:
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"MPNB"
//! 4       4     format version (u32) = 1
//! 8       8     state dimension (u64)
//! 16      8     steps (u64)
//! 24      8     paths (u64)
//! 32      8     seed (u64)
//! 40      8     horizon T (f64)
//! 48      ...   increments, f64, row-major [path][step][coordinate]
//! ```

use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hilbert::{hs_inner, psd_sqrt, tensor, CovarianceOperator, Operator, StateVec};
use crate::stats::Estimate;

const MAGIC: &[u8; 4] = b"MPNB";
const FORMAT_VERSION: u32 = 1;

/// Uniform time grid `t_k = kT/steps` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGrid {
    horizon: f64,
    steps: usize,
}

impl PathGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("steps must be positive".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.time(k))
    }

    /// Index `k` with `t_k = t`, if `t` is a grid point up to `1e-9·Δt`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        if (x - k).abs() <= 1e-9 && k >= 0.0 && k <= self.steps as f64 {
            Some(k as usize)
        } else {
            None
        }
    }
}

/// Deterministic positive intensity `α(t)` of one scalar driver component.
#[derive(Clone)]
pub struct ScalarIntensity {
    alpha: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    alpha_max: f64,
    label: String,
}

impl fmt::Debug for ScalarIntensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarIntensity")
            .field("label", &self.label)
            .field("alpha_max", &self.alpha_max)
            .finish()
    }
}

impl ScalarIntensity {
    pub fn constant(value: f64) -> Self {
        Self {
            alpha: Arc::new(move |_| value),
            alpha_max: value,
            label: format!("{value}"),
        }
    }

    /// `α(t) = a0 + a1·t` on `[0, horizon]`.
    pub fn affine(a0: f64, a1: f64, horizon: f64) -> Self {
        Self {
            alpha: Arc::new(move |t| a0 + a1 * t),
            alpha_max: a0.max(a0 + a1 * horizon),
            label: format!("{a0} + {a1}*t"),
        }
    }

    pub fn custom(
        alpha: impl Fn(f64) -> f64 + Send + Sync + 'static,
        alpha_max: f64,
        label: impl Into<String>,
    ) -> Self {
        Self {
            alpha: Arc::new(alpha),
            alpha_max,
            label: label.into(),
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        (self.alpha)(t)
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Trapezoid approximation of `∫_{t_k}^{t_{k+1}} α`.
    pub fn step_integral(&self, grid: &PathGrid, k: usize) -> f64 {
        0.5 * grid.dt() * (self.at(grid.time(k)) + self.at(grid.time(k + 1)))
    }

    fn validate_on(&self, grid: &PathGrid) -> Result<()> {
        for t in grid.times() {
            let a = self.at(t);
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::InvalidDriver(format!(
                    "intensity {} is not positive at t = {t} (value {a})",
                    self.label
                )));
            }
            if a > self.alpha_max * (1.0 + 1e-12) {
                return Err(Error::InvalidDriver(format!(
                    "intensity {} exceeds its bound {} at t = {t}",
                    self.label, self.alpha_max
                )));
            }
        }
        Ok(())
    }
}

/// One rank-one piece `β m(t)` of a driver.
#[derive(Debug, Clone)]
pub struct DriverComponent {
    pub direction: StateVec,
    pub intensity: ScalarIntensity,
}

/// K-valued continuous martingale `M = Σᵢ βᵢ mᵢ` with independent scalar parts.
#[derive(Debug, Clone)]
pub struct MartingaleDriver {
    dim: usize,
    horizon: f64,
    components: Vec<DriverComponent>,
}

impl MartingaleDriver {
    pub fn new(dim: usize, horizon: f64, components: Vec<DriverComponent>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDriver("dimension must be positive".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidDriver(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        for (i, c) in components.iter().enumerate() {
            if c.direction.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "driver direction",
                    expected: dim,
                    actual: c.direction.len(),
                });
            }
            if !(c.direction.norm() > 0.0) || c.direction.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDriver(format!(
                    "component {i} has a zero or non-finite direction"
                )));
            }
            if !(c.intensity.alpha_max().is_finite() && c.intensity.alpha_max() > 0.0) {
                return Err(Error::InvalidDriver(format!(
                    "component {i} has a non-positive intensity bound"
                )));
            }
        }
        Ok(Self {
            dim,
            horizon,
            components,
        })
    }

    /// Single component `M(t) = β m(t)` with `⟨m⟩ₜ = ∫α`.
    pub fn rank_one(direction: StateVec, intensity: ScalarIntensity, horizon: f64) -> Result<Self> {
        let dim = direction.len();
        Self::new(
            dim,
            horizon,
            vec![DriverComponent {
                direction,
                intensity,
            }],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn components(&self) -> &[DriverComponent] {
        &self.components
    }

    /// Checks intensities on every grid time and the grid horizon.
    pub fn validate_on(&self, grid: &PathGrid) -> Result<()> {
        if (grid.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(Error::InvalidGrid(format!(
                "grid horizon {} differs from driver horizon {}",
                grid.horizon(),
                self.horizon
            )));
        }
        self.components
            .iter()
            .try_for_each(|c| c.intensity.validate_on(grid))
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= -1e-12 * self.horizon && t <= self.horizon * (1.0 + 1e-12)) {
            return Err(Error::OutsideHorizon {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    fn weighted_sum(&self, weight: impl Fn(&DriverComponent) -> f64) -> Operator {
        let mut q = Operator::zeros(self.dim, self.dim);
        for c in &self.components {
            let w = weight(c);
            q += tensor(&c.direction, &c.direction).expect("validated dims") * w;
        }
        q
    }

    /// Covariance rate `Q(t) = Σᵢ αᵢ(t) βᵢ⊗βᵢ`.
    pub fn cov_rate(&self, t: f64) -> Result<CovarianceOperator> {
        self.check_time(t)?;
        CovarianceOperator::new(self.weighted_sum(|c| c.intensity.at(t)))
    }

    /// `Q^{1/2}(t)`.
    pub fn cov_rate_sqrt(&self, t: f64) -> Result<Operator> {
        Ok(psd_sqrt(&self.cov_rate(t)?))
    }

    /// Dominating operator `Σᵢ αᵢ,max βᵢ⊗βᵢ ≥ Q(t)`.
    pub fn dominating(&self) -> CovarianceOperator {
        CovarianceOperator::new(self.weighted_sum(|c| c.intensity.alpha_max()))
            .expect("sum of PSD rank-one terms")
    }

    /// Covariance of the increment `ΔM_k`, i.e. trapezoid `∫_{t_k}^{t_{k+1}} Q`.
    pub fn step_covariance(&self, grid: &PathGrid, k: usize) -> Operator {
        self.weighted_sum(|c| c.intensity.step_integral(grid, k))
    }

    /// Precomputes `Q^{1/2}(t_k)` and the step covariances over a grid.
    pub fn on_grid(&self, grid: &PathGrid) -> Result<GridCovariance> {
        self.validate_on(grid)?;
        let roots = (0..=grid.steps())
            .map(|k| self.cov_rate_sqrt(grid.time(k)))
            .collect::<Result<Vec<_>>>()?;
        let steps = (0..grid.steps())
            .map(|k| self.step_covariance(grid, k))
            .collect();
        Ok(GridCovariance {
            roots,
            step_covariances: steps,
        })
    }
}

/// Per-grid-time covariance data of a driver.
#[derive(Debug, Clone)]
pub struct GridCovariance {
    /// `Q^{1/2}(t_k)` for `k = 0..=steps`.
    pub roots: Vec<Operator>,
    /// Covariance of `ΔM_k` for `k = 0..steps`.
    pub step_covariances: Vec<Operator>,
}

/// Sampled martingale increments `ΔM_k` for a batch of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    grid: PathGrid,
    dim: usize,
    paths: usize,
    seed: u64,
    increments: Vec<f64>,
}

impl NoiseBundle {
    pub fn grid(&self) -> &PathGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `ΔM_k` on `path`.
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.grid.steps() + step) * self.dim;
        &self.increments[off..off + self.dim]
    }

    /// All increments of one path, `steps × dim` row-major.
    pub fn path(&self, path: usize) -> &[f64] {
        let len = self.grid.steps() * self.dim;
        &self.increments[path * len..(path + 1) * len]
    }

    pub fn raw(&self) -> &[f64] {
        &self.increments
    }

    /// Hash identifying this realization; equal bundles have equal fingerprints.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.dim.hash(&mut h);
        self.paths.hash(&mut h);
        self.seed.hash(&mut h);
        self.grid.steps().hash(&mut h);
        self.grid.horizon().to_bits().hash(&mut h);
        for v in &self.increments {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// The same paths on a grid `factor` times coarser: each coarse increment
    /// is the sum of `factor` consecutive fine ones, so both grids see one noise
    /// realization.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.grid.steps().is_multiple_of(factor) {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.grid.steps()
            )));
        }
        let steps = self.grid.steps() / factor;
        let grid = PathGrid::new(self.grid.horizon(), steps)?;
        let mut increments = vec![0.0; self.paths * steps * self.dim];
        for p in 0..self.paths {
            for k in 0..self.grid.steps() {
                let coarse = (p * steps + k / factor) * self.dim;
                for (i, v) in self.increment(p, k).iter().enumerate() {
                    increments[coarse + i] += v;
                }
            }
        }
        Ok(Self {
            grid,
            dim: self.dim,
            paths: self.paths,
            seed: self.seed,
            increments,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.dim, self.grid.steps(), self.paths] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.grid.horizon().to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.increments.len() * 8);
        for v in &self.increments {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let dim = next_u64(&mut r)? as usize;
        let steps = next_u64(&mut r)? as usize;
        let paths = next_u64(&mut r)? as usize;
        let seed = next_u64(&mut r)?;
        let horizon = f64::from_bits(next_u64(&mut r)?);
        let grid = PathGrid::new(horizon, steps).map_err(|e| Error::Format(e.to_string()))?;
        if dim == 0 || paths == 0 {
            return Err(Error::Format("zero dimension or path count".into()));
        }
        let count = dim
            .checked_mul(steps)
            .and_then(|v| v.checked_mul(paths))
            .ok_or_else(|| Error::Format("size overflow".into()))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != count * 8 {
            return Err(Error::Format(format!(
                "expected {} body bytes, found {}",
                count * 8,
                body.len()
            )));
        }
        let increments = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            grid,
            dim,
            paths,
            seed,
            increments,
        })
    }
}

/// Per-path ChaCha stream derived from `(seed, path)`.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Draws `ΔM_k = Σᵢ βᵢ √(∫_{t_k}^{t_{k+1}} αᵢ) ξᵢ,ₖ` for every path and step.
pub fn sample_increments(
    driver: &MartingaleDriver,
    grid: &PathGrid,
    paths: usize,
    seed: u64,
) -> Result<NoiseBundle> {
    if paths == 0 {
        return Err(Error::Precondition("at least one path is required".into()));
    }
    driver.validate_on(grid)?;
    let dim = driver.dim();
    let steps = grid.steps();
    // scaled directions per step and component
    let scaled: Vec<Vec<StateVec>> = (0..steps)
        .map(|k| {
            driver
                .components()
                .iter()
                .map(|c| &c.direction * c.intensity.step_integral(grid, k).sqrt())
                .collect()
        })
        .collect();
    let mut increments = vec![0.0; paths * steps * dim];
    increments
        .par_chunks_mut(steps * dim)
        .enumerate()
        .for_each(|(p, out)| {
            let mut rng = path_rng(seed, p);
            for (k, dirs) in scaled.iter().enumerate() {
                let cell = &mut out[k * dim..(k + 1) * dim];
                for d in dirs {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    for (o, b) in cell.iter_mut().zip(d.iter()) {
                        *o += b * xi;
                    }
                }
            }
        });
    Ok(NoiseBundle {
        grid: *grid,
        dim,
        paths,
        seed,
        increments,
    })
}

/// Monte Carlo versus quadrature evaluation of the stochastic-integral isometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsometryReport {
    /// Sample mean of `|Σ_k Φ_k ΔM_k|²`.
    pub mc: Estimate,
    /// Trapezoid value of `∫ ‖Φ Q^{1/2}‖₂² dt`.
    pub quadrature: f64,
    pub difference: f64,
}

impl IsometryReport {
    /// Whether the two sides agree within `n_se` standard errors.
    pub fn agrees_within(&self, n_se: f64) -> bool {
        self.difference.abs() <= n_se * self.mc.std_err + 1e-14 * self.quadrature.abs()
    }
}

/// Checks `E|∫Φ dM|² = E∫‖Φ Q^{1/2}‖₂² dt` for a deterministic step integrand
/// `Φ(t) = phi(k)` on `[t_k, t_{k+1})`.
pub fn verify_isometry(
    phi: impl Fn(usize) -> Operator,
    driver: &MartingaleDriver,
    bundle: &NoiseBundle,
) -> Result<IsometryReport> {
    let grid = bundle.grid();
    if bundle.dim() != driver.dim() {
        return Err(Error::DimensionMismatch {
            context: "isometry bundle",
            expected: driver.dim(),
            actual: bundle.dim(),
        });
    }
    let integrand: Vec<Operator> = (0..grid.steps()).map(&phi).collect();
    let rows = integrand.first().map_or(0, |m| m.nrows());
    for m in &integrand {
        if m.ncols() != driver.dim() || m.nrows() != rows {
            return Err(Error::DimensionMismatch {
                context: "isometry integrand",
                expected: driver.dim(),
                actual: m.ncols(),
            });
        }
    }

    let mut quadrature = 0.0;
    let mut left = driver.cov_rate_sqrt(grid.time(0))?;
    for (k, f) in integrand.iter().enumerate() {
        let right = driver.cov_rate_sqrt(grid.time(k + 1))?;
        let a = f * &left;
        let b = f * &right;
        quadrature += 0.5 * grid.dt() * (hs_inner(&a, &a)? + hs_inner(&b, &b)?);
        left = right;
    }

    let squares: Vec<f64> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let mut acc = StateVec::zeros(rows);
            for (k, f) in integrand.iter().enumerate() {
                let dm = nalgebra::DVectorView::from_slice(bundle.increment(p, k), bundle.dim());
                acc += f * dm;
            }
            acc.norm_squared()
        })
        .collect();
    let mc = Estimate::from_samples(&squares);
    Ok(IsometryReport {
        mc,
        quadrature,
        difference: mc.mean - quadrature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, n: usize) -> StateVec {
        let mut v = StateVec::zeros(n);
        v[i] = 1.0;
        v
    }

    #[test]
    fn grid_basics() {
        let g = PathGrid::new(1.0, 40).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(40), 1.0);
        assert_eq!(g.index_of(0.25), Some(10));
        assert_eq!(g.index_of(0.26), None);
        assert!(PathGrid::new(1.0, 0).is_err());
        assert!(PathGrid::new(-1.0, 3).is_err());
    }

    #[test]
    fn cov_rate_single_component() {
        let beta = StateVec::from_vec(vec![1.0, 2.0, 0.0]);
        let d =
            MartingaleDriver::rank_one(beta.clone(), ScalarIntensity::affine(1.0, 0.5, 1.0), 1.0)
                .unwrap();
        let q = d.cov_rate(0.4).unwrap();
        let expected = tensor(&beta, &beta).unwrap() * 1.2;
        assert!((q.as_operator() - expected).norm() < 1e-14);
        assert!(d.cov_rate(1.5).is_err());
        assert!(d.cov_rate(-0.1).is_err());
    }

    #[test]
    fn cov_rate_empty_and_rank_two() {
        let d = MartingaleDriver::new(3, 1.0, vec![]).unwrap();
        assert_eq!(
            d.cov_rate(0.5).unwrap().as_operator(),
            &Operator::zeros(3, 3)
        );

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let u = StateVec::from_vec(vec![s, s, 0.0]);
        let w = StateVec::from_vec(vec![s, -s, 0.0]);
        let comps = [u.clone(), w.clone()]
            .into_iter()
            .map(|direction| DriverComponent {
                direction,
                intensity: ScalarIntensity::constant(1.0),
            })
            .collect();
        let d = MartingaleDriver::new(3, 1.0, comps).unwrap();
        let q = d.cov_rate(0.3).unwrap();
        let oracle = &u * u.transpose() + &w * w.transpose();
        assert!((q.as_operator() - &oracle).norm() < 1e-14);
        // projection
        assert!((q.as_operator() * q.as_operator() - q.as_operator()).norm() < 1e-14);
    }

    #[test]
    fn rejects_zero_direction() {
        assert!(MartingaleDriver::rank_one(
            StateVec::zeros(2),
            ScalarIntensity::constant(1.0),
            1.0
        )
        .is_err());
    }

    #[test]
    fn rejects_intensity_above_bound() {
        let d = MartingaleDriver::rank_one(
            e(0, 2),
            ScalarIntensity::custom(|t| 1.0 + t, 1.5, "1+t"),
            1.0,
        )
        .unwrap();
        let g = PathGrid::new(1.0, 10).unwrap();
        assert!(sample_increments(&d, &g, 10, 1).is_err());
    }

    #[test]
    fn degenerate_intensity_gives_vanishing_increments() {
        let d = MartingaleDriver::rank_one(e(0, 2), ScalarIntensity::constant(1e-30), 1.0).unwrap();
        let g = PathGrid::new(1.0, 20).unwrap();
        let b = sample_increments(&d, &g, 50, 3).unwrap();
        assert!(b.raw().iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = MartingaleDriver::rank_one(e(1, 3), ScalarIntensity::affine(1.0, 0.5, 1.0), 1.0)
            .unwrap();
        let g = PathGrid::new(1.0, 16).unwrap();
        let a = sample_increments(&d, &g, 64, 11).unwrap();
        let b = sample_increments(&d, &g, 64, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = sample_increments(&d, &g, 64, 12).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn single_component_covariance_within_three_se() {
        let d = MartingaleDriver::rank_one(e(0, 2), ScalarIntensity::constant(1.0), 1.0).unwrap();
        let g = PathGrid::new(1.0, 4).unwrap();
        let n = 100_000;
        let b = sample_increments(&d, &g, n, 5).unwrap();
        let s: Vec<f64> = (0..n).map(|p| b.increment(p, 0)[0].powi(2)).collect();
        let est = Estimate::from_samples(&s);
        assert!((est.mean - g.dt()).abs() <= 3.0 * est.std_err, "{est:?}");
        // second coordinate never moves
        assert!((0..n).all(|p| b.increment(p, 0)[1] == 0.0));
    }

    #[test]
    fn sample_covariance_matches_step_covariance() {
        let comps = vec![
            DriverComponent {
                direction: StateVec::from_vec(vec![1.0, 0.5]),
                intensity: ScalarIntensity::affine(1.0, 0.5, 1.0),
            },
            DriverComponent {
                direction: StateVec::from_vec(vec![-0.3, 1.0]),
                intensity: ScalarIntensity::constant(2.0),
            },
        ];
        let d = MartingaleDriver::new(2, 1.0, comps).unwrap();
        let g = PathGrid::new(1.0, 4).unwrap();
        let n = 100_000;
        let b = sample_increments(&d, &g, n, 5).unwrap();
        for k in 0..g.steps() {
            let target = d.step_covariance(&g, k);
            for i in 0..2 {
                for j in 0..2 {
                    let s: Vec<f64> = (0..n)
                        .map(|p| b.increment(p, k)[i] * b.increment(p, k)[j])
                        .collect();
                    let est = Estimate::from_samples(&s);
                    let tol = 4.0 * est.std_err + 1e-15;
                    assert!(
                        (est.mean - target[(i, j)]).abs() <= tol,
                        "step {k} entry ({i},{j}): {} vs {}",
                        est.mean,
                        target[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn increments_on_disjoint_steps_are_uncorrelated() {
        let d = MartingaleDriver::rank_one(
            StateVec::from_vec(vec![1.0, 1.0]),
            ScalarIntensity::affine(1.0, 0.5, 1.0),
            1.0,
        )
        .unwrap();
        let g = PathGrid::new(1.0, 5).unwrap();
        let n = 100_000;
        let b = sample_increments(&d, &g, n, 17).unwrap();
        for (k, j) in [(0, 1), (1, 4), (2, 3)] {
            let s: Vec<f64> = (0..n)
                .map(|p| b.increment(p, k)[0] * b.increment(p, j)[1])
                .collect();
            let est = Estimate::from_samples(&s);
            assert!(
                est.mean.abs() <= 4.0 * est.std_err,
                "steps {k},{j}: {est:?}"
            );
        }
    }

    #[test]
    fn cov_rate_is_dominated() {
        let comps = vec![
            DriverComponent {
                direction: StateVec::from_vec(vec![1.0, 0.5, 0.0]),
                intensity: ScalarIntensity::affine(1.0, 0.5, 2.0),
            },
            DriverComponent {
                direction: StateVec::from_vec(vec![0.0, 1.0, -1.0]),
                intensity: ScalarIntensity::custom(|t| 2.0 - t, 2.0, "2-t"),
            },
        ];
        let d = MartingaleDriver::new(3, 2.0, comps).unwrap();
        let g = PathGrid::new(2.0, 20).unwrap();
        let top = d.dominating();
        let bound: f64 = d
            .components()
            .iter()
            .map(|c| c.intensity.alpha_max() * c.direction.norm_squared())
            .sum();
        assert!(top.trace() <= bound * (1.0 + 1e-12));
        for t in g.times() {
            let q = d.cov_rate(t).unwrap();
            assert!(q.max_eigenvalue() <= top.max_eigenvalue() * (1.0 + 1e-12));
            // Q ≤ Q_max in the Loewner order
            let gap = top.as_operator() - q.as_operator();
            assert!(gap.symmetric_eigen().eigenvalues.min() > -1e-12);
        }
    }

    #[test]
    fn bundle_binary_round_trip() {
        let d = MartingaleDriver::rank_one(e(0, 2), ScalarIntensity::constant(2.0), 0.5).unwrap();
        let g = PathGrid::new(0.5, 8).unwrap();
        let b = sample_increments(&d, &g, 7, 9).unwrap();
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 48 + 7 * 8 * 2 * 8);
        assert_eq!(&buf[..4], b"MPNB");
        let back = NoiseBundle::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, b);
        assert!(NoiseBundle::read_from(&buf[..50]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(NoiseBundle::read_from(bad.as_slice()).is_err());
    }

    #[test]
    fn isometry_zero_integrand() {
        let d = MartingaleDriver::rank_one(e(0, 2), ScalarIntensity::constant(1.0), 1.0).unwrap();
        let g = PathGrid::new(1.0, 10).unwrap();
        let b = sample_increments(&d, &g, 100, 1).unwrap();
        let r = verify_isometry(|_| Operator::zeros(2, 2), &d, &b).unwrap();
        assert_eq!(r.mc.mean, 0.0);
        assert_eq!(r.quadrature, 0.0);
        assert!(verify_isometry(|_| Operator::zeros(2, 3), &d, &b).is_err());
    }

    #[test]
    fn isometry_identity_constant_intensity() {
        let beta = StateVec::from_vec(vec![1.0, -0.5]);
        let d =
            MartingaleDriver::rank_one(beta.clone(), ScalarIntensity::constant(1.0), 1.0).unwrap();
        let g = PathGrid::new(1.0, 20).unwrap();
        let b = sample_increments(&d, &g, 20_000, 2).unwrap();
        let r = verify_isometry(|_| Operator::identity(2, 2), &d, &b).unwrap();
        assert!((r.quadrature - beta.norm_squared()).abs() < 1e-12);
        assert!(r.agrees_within(3.0), "{r:?}");
    }
}
