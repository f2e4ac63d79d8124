//! Closed-form Gaussian transition rows over a uniform grid.
//!
//! With axis-aligned noise the probability of landing in a cell factors
//! into per-axis normal-CDF differences evaluated at the cell faces. Mass
//! outside the state box, together with entries below [`DROP_THRESHOLD`],
//! goes to the sink.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::LinearSubsystem;

/// Entries below this are dropped and their mass moved to the sink.
pub const DROP_THRESHOLD: f64 = 1e-12;

/// Half-width of the evaluated window, in standard deviations. Cells whose
/// nearest face lies further out carry less than `1e-18` mass.
const WINDOW_SIGMAS: f64 = 9.0;

/// Sparse distribution over state cells plus the sink.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbabilityRow {
    pub cells: Vec<u32>,
    pub probs: Vec<f64>,
    pub sink: f64,
}

impl ProbabilityRow {
    pub fn absorbing() -> Self {
        Self {
            cells: Vec::new(),
            probs: Vec::new(),
            sink: 1.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum::<f64>() + self.sink
    }

    /// Dense view over `n_states` cells followed by the sink.
    pub fn to_dense(&self, n_states: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_states + 1];
        for (c, p) in self.cells.iter().zip(&self.probs) {
            out[*c as usize] = *p;
        }
        out[n_states] = self.sink;
        out
    }

    pub fn get(&self, cell: usize) -> f64 {
        self.cells
            .iter()
            .position(|c| *c as usize == cell)
            .map_or(0.0, |i| self.probs[i])
    }
}

/// `P(a ≤ Z < b)` for standard normal `Z`, without cancellation in the tails.
pub fn normal_interval_prob(a: f64, b: f64) -> f64 {
    if !(a < b) {
        return 0.0;
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let p = if a >= 0.0 {
        0.5 * (libm::erfc(a * s) - libm::erfc(b * s))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b * s) - libm::erfc(-a * s))
    } else {
        1.0 - 0.5 * libm::erfc(b * s) - 0.5 * libm::erfc(-a * s)
    };
    p.clamp(0.0, 1.0)
}

/// Per-axis standard deviations of `Nς`; errors if `N Nᵀ` is not diagonal.
pub fn axis_std(sys: &LinearSubsystem) -> Result<Vec<f64>> {
    let n = sys.noise_gain();
    let cov = n * n.transpose();
    for i in 0..cov.nrows() {
        for j in (i + 1)..cov.ncols() {
            let scale = (cov[(i, i)] * cov[(j, j)]).sqrt();
            if cov[(i, j)].abs() > 1e-14 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::CorrelatedNoise {
                    row: i,
                    col: j,
                    value: cov[(i, j)],
                });
            }
        }
    }
    Ok((0..cov.nrows()).map(|i| cov[(i, i)].sqrt()).collect())
}

/// Probabilities of the cells along one axis for `N(mean, std²)`.
/// Returns the first cell index and the window's probabilities.
fn axis_window(grid: &Grid, axis: usize, mean: f64, std: f64, out: &mut Vec<f64>) -> usize {
    out.clear();
    let n = grid.cells_per_dim()[axis];
    let lo = grid.bounds().lo()[axis];
    let hi = grid.bounds().hi()[axis];
    if std == 0.0 {
        if mean >= lo && mean <= hi {
            let j = grid.cell_of_axis(axis, mean);
            out.push(1.0);
            return j;
        }
        return 0;
    }
    let reach = WINDOW_SIGMAS * std;
    if mean + reach < lo || mean - reach > hi {
        return 0;
    }
    let first = grid.cell_of_axis(axis, (mean - reach).max(lo));
    let last = grid.cell_of_axis(axis, (mean + reach).min(hi));
    let inv = 1.0 / std;
    let mut z_lo = (grid.face(axis, first) - mean) * inv;
    for j in first..=last.min(n - 1) {
        let z_hi = (grid.face(axis, j + 1) - mean) * inv;
        out.push(normal_interval_prob(z_lo, z_hi));
        z_lo = z_hi;
    }
    first
}

/// Row of the Gaussian kernel `N(mean, diag(std²))` over `grid`.
pub fn gaussian_row(grid: &Grid, mean: &[f64], std: &[f64]) -> ProbabilityRow {
    let d = grid.dim();
    let mut windows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(d);
    for axis in 0..d {
        let mut probs = Vec::new();
        let first = axis_window(grid, axis, mean[axis], std[axis], &mut probs);
        // entries of a product never exceed any factor
        if probs.iter().all(|p| *p < DROP_THRESHOLD) {
            return ProbabilityRow::absorbing();
        }
        windows.push((first, probs));
    }

    let mut row = ProbabilityRow::default();
    let mut multi = vec![0usize; d];
    loop {
        let mut p = 1.0;
        let mut flat = 0usize;
        for axis in 0..d {
            let (first, ref probs) = windows[axis];
            p *= probs[multi[axis]];
            flat = flat * grid.cells_per_dim()[axis] + first + multi[axis];
        }
        if p >= DROP_THRESHOLD {
            row.cells.push(flat as u32);
            row.probs.push(p);
        }
        // odometer over the window, last axis fastest to keep cells sorted
        let mut axis = d;
        loop {
            if axis == 0 {
                row.sink = (1.0 - row.probs.iter().sum::<f64>()).max(0.0);
                return row;
            }
            axis -= 1;
            multi[axis] += 1;
            if multi[axis] < windows[axis].1.len() {
                break;
            }
            multi[axis] = 0;
        }
    }
}

/// Closed-form transition row `T̂(· | x̂, ν̂, ŵ)`.
pub fn transition_row(
    sys: &LinearSubsystem,
    x_hat: &[f64],
    nu_hat: &[f64],
    w_hat: &[f64],
    state_grid: &Grid,
) -> Result<ProbabilityRow> {
    let std = axis_std(sys)?;
    let mean = sys.mean(x_hat, nu_hat, w_hat)?;
    Ok(gaussian_row(state_grid, mean.as_slice(), &std))
}

/// Monte-Carlo estimate of a transition row for arbitrary noise gains.
pub fn transition_row_monte_carlo(
    sys: &LinearSubsystem,
    x_hat: &[f64],
    nu_hat: &[f64],
    w_hat: &[f64],
    state_grid: &Grid,
    samples: usize,
    seed: u64,
) -> Result<ProbabilityRow> {
    let mean = sys.mean(x_hat, nu_hat, w_hat)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = std::collections::BTreeMap::<u32, usize>::new();
    let mut outside = 0usize;
    let r = sys.noise_dim();
    for _ in 0..samples {
        let z = DVector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
        let next = &mean + sys.noise_gain() * z;
        if state_grid.bounds().contains(next.as_slice()) {
            let c = state_grid.cell_of(next.as_slice())?.index as u32;
            *counts.entry(c).or_default() += 1;
        } else {
            outside += 1;
        }
    }
    let total = samples.max(1) as f64;
    let (cells, probs) = counts.into_iter().map(|(c, k)| (c, k as f64 / total)).unzip();
    Ok(ProbabilityRow {
        cells,
        probs,
        sink: outside as f64 / total,
    })
}

/// Gaussian kernel of one subsystem, evaluated lazily row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    sys: LinearSubsystem,
    std: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(sys: LinearSubsystem) -> Result<Self> {
        let std = axis_std(&sys)?;
        Ok(Self { sys, std })
    }

    pub fn subsystem(&self) -> &LinearSubsystem {
        &self.sys
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn row(&self, grid: &Grid, x_hat: &[f64], nu_hat: &[f64], w_hat: &[f64]) -> ProbabilityRow {
        let mean = self
            .sys
            .mean(x_hat, nu_hat, w_hat)
            .expect("grid dimensions validated when the MDP was built");
        gaussian_row(grid, mean.as_slice(), &self.std)
    }

    /// Rough upper bound on stored entries per row.
    pub fn nnz_estimate(&self, grid: &Grid) -> usize {
        (0..grid.dim())
            .map(|a| {
                let span = (2.0 * WINDOW_SIGMAS * self.std[a] / grid.widths()[a]).ceil() as usize + 2;
                span.min(grid.cells_per_dim()[a])
            })
            .product()
    }
}
