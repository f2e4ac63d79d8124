//! Finite MDP abstraction of a subsystem.
//!
//! Rows are indexed by `(state, input, internal)` triples in row-major order.
//! The sink is the extra state `n_states`; its row is absorbing and is not
//! stored.

mod io;
pub mod kernel;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::grid::Grid;
use crate::model::LinearSubsystem;

pub use io::{dump, load, MDP_FORMAT_VERSION};
pub use kernel::{transition_row, transition_row_monte_carlo, GaussianKernel, ProbabilityRow, DROP_THRESHOLD};

/// Compressed sparse rows with a separate sink column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    probs: Vec<f64>,
    sink: Vec<f64>,
}

impl SparseRows {
    pub fn from_rows(rows: Vec<ProbabilityRow>) -> Self {
        let nnz = rows.iter().map(|r| r.cells.len()).sum();
        let mut out = SparseRows {
            row_ptr: Vec::with_capacity(rows.len() + 1),
            cols: Vec::with_capacity(nnz),
            probs: Vec::with_capacity(nnz),
            sink: Vec::with_capacity(rows.len()),
        };
        out.row_ptr.push(0);
        for r in rows {
            out.cols.extend_from_slice(&r.cells);
            out.probs.extend_from_slice(&r.probs);
            out.sink.push(r.sink);
            out.row_ptr.push(out.cols.len());
        }
        out
    }

    pub(crate) fn from_raw(row_ptr: Vec<usize>, cols: Vec<u32>, probs: Vec<f64>, sink: Vec<f64>) -> Result<Self> {
        if row_ptr.len() != sink.len() + 1
            || row_ptr.first() != Some(&0)
            || row_ptr.last() != Some(&cols.len())
            || cols.len() != probs.len()
            || row_ptr.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Format("inconsistent sparse row arrays".into()));
        }
        Ok(Self {
            row_ptr,
            cols,
            probs,
            sink,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.sink.len()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> ProbabilityRow {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        ProbabilityRow {
            cells: self.cols[span.clone()].to_vec(),
            probs: self.probs[span].to_vec(),
            sink: self.sink[i],
        }
    }

    fn dot(&self, i: usize, values: &[f64], sink_value: f64) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        let mut acc = 0.0;
        for (c, p) in self.cols[span.clone()].iter().zip(&self.probs[span]) {
            acc += p * values[*c as usize];
        }
        acc + self.sink[i] * sink_value
    }

    pub(crate) fn raw(&self) -> (&[usize], &[u32], &[f64], &[f64]) {
        (&self.row_ptr, &self.cols, &self.probs, &self.sink)
    }
}

/// Where transition probabilities live.
#[derive(Debug, Clone, PartialEq)]
pub enum Transitions {
    /// Every row precomputed.
    Stored(SparseRows),
    /// Rows evaluated on demand from the closed-form kernel.
    Gaussian(GaussianKernel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StorageMode {
    /// Store rows when they fit in the memory budget, otherwise evaluate lazily.
    #[default]
    Auto,
    Materialized,
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KernelMode {
    /// Product of per-axis normal CDF differences; needs axis-aligned noise.
    ClosedForm,
    /// Sampled rows, for correlated noise gains.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbstractionOptions {
    pub storage: StorageMode,
    pub memory_budget_bytes: u64,
    pub kernel: KernelMode,
}

impl Default for AbstractionOptions {
    fn default() -> Self {
        Self {
            storage: StorageMode::Auto,
            memory_budget_bytes: 2 << 30,
            kernel: KernelMode::ClosedForm,
        }
    }
}

impl AbstractionOptions {
    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        Self {
            storage: StorageMode::Materialized,
            kernel: KernelMode::MonteCarlo { samples, seed },
            ..Self::default()
        }
    }
}

/// Finite gMDP of one subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    state_grid: Grid,
    input_grid: Grid,
    internal_grid: Grid,
    transitions: Transitions,
}

impl FiniteMdp {
    /// Assembles an MDP from explicit rows, one per `(state, input, internal)`
    /// triple in row-major order. No stochasticity check is made here; use
    /// [`validate_stochastic`].
    pub fn from_rows(state_grid: Grid, input_grid: Grid, internal_grid: Grid, rows: Vec<ProbabilityRow>) -> Result<Self> {
        let expected = state_grid.len() * input_grid.len() * internal_grid.len();
        dim_check("transition rows", expected, rows.len())?;
        if let Some(c) = rows.iter().flat_map(|r| r.cells.iter()).find(|c| **c as usize >= state_grid.len()) {
            return Err(Error::InvalidParameter {
                name: "rows".into(),
                reason: format!("cell index {c} out of range"),
            });
        }
        Ok(Self {
            state_grid,
            input_grid,
            internal_grid,
            transitions: Transitions::Stored(SparseRows::from_rows(rows)),
        })
    }

    pub(crate) fn from_parts(state_grid: Grid, input_grid: Grid, internal_grid: Grid, transitions: Transitions) -> Self {
        Self {
            state_grid,
            input_grid,
            internal_grid,
            transitions,
        }
    }

    pub fn state_grid(&self) -> &Grid {
        &self.state_grid
    }
    pub fn input_grid(&self) -> &Grid {
        &self.input_grid
    }
    pub fn internal_grid(&self) -> &Grid {
        &self.internal_grid
    }
    pub fn transitions(&self) -> &Transitions {
        &self.transitions
    }

    pub fn n_states(&self) -> usize {
        self.state_grid.len()
    }
    pub fn n_inputs(&self) -> usize {
        self.input_grid.len()
    }
    pub fn n_internal(&self) -> usize {
        self.internal_grid.len()
    }

    /// Index of the absorbing sink state.
    pub fn sink_index(&self) -> usize {
        self.n_states()
    }

    /// Number of non-sink rows.
    pub fn n_rows(&self) -> usize {
        self.n_states() * self.n_inputs() * self.n_internal()
    }

    pub fn row_index(&self, state: usize, input: usize, internal: usize) -> usize {
        (state * self.n_inputs() + input) * self.n_internal() + internal
    }

    pub fn split_row_index(&self, row: usize) -> (usize, usize, usize) {
        let internal = row % self.n_internal();
        let rest = row / self.n_internal();
        (rest / self.n_inputs(), rest % self.n_inputs(), internal)
    }

    /// Distribution of the next state. The sink row is absorbing for every input.
    pub fn row(&self, state: usize, input: usize, internal: usize) -> ProbabilityRow {
        if state == self.sink_index() {
            return ProbabilityRow::absorbing();
        }
        match &self.transitions {
            Transitions::Stored(rows) => rows.row(self.row_index(state, input, internal)),
            Transitions::Gaussian(k) => k.row(
                &self.state_grid,
                &self.state_grid.representative(state),
                &self.input_grid.representative(input),
                &self.internal_grid.representative(internal),
            ),
        }
    }

    /// `Σ_x' T(x' | state, input, internal) · values[x']`, the sink weighted by `sink_value`.
    pub fn expected_value(&self, state: usize, input: usize, internal: usize, values: &[f64], sink_value: f64) -> f64 {
        if state == self.sink_index() {
            return sink_value;
        }
        match &self.transitions {
            Transitions::Stored(rows) => rows.dot(self.row_index(state, input, internal), values, sink_value),
            Transitions::Gaussian(_) => {
                let row = self.row(state, input, internal);
                let mut acc = 0.0;
                for (c, p) in row.cells.iter().zip(&row.probs) {
                    acc += p * values[*c as usize];
                }
                acc + row.sink * sink_value
            }
        }
    }

    pub fn is_materialized(&self) -> bool {
        matches!(self.transitions, Transitions::Stored(_))
    }

    /// Copy with every row computed and stored.
    pub fn materialize(&self) -> FiniteMdp {
        match &self.transitions {
            Transitions::Stored(_) => self.clone(),
            Transitions::Gaussian(_) => {
                let rows: Vec<ProbabilityRow> = (0..self.n_rows())
                    .into_par_iter()
                    .map(|i| {
                        let (s, u, w) = self.split_row_index(i);
                        self.row(s, u, w)
                    })
                    .collect();
                Self::from_parts(
                    self.state_grid.clone(),
                    self.input_grid.clone(),
                    self.internal_grid.clone(),
                    Transitions::Stored(SparseRows::from_rows(rows)),
                )
            }
        }
    }
}

/// Rough stored size for the given grids.
fn estimate_bytes(kernel: &GaussianKernel, state: &Grid, inputs: usize, internals: usize) -> u64 {
    let rows = (state.len() as u64) * (inputs as u64) * (internals as u64);
    let nnz = kernel.nnz_estimate(state) as u64;
    rows.saturating_mul(nnz.saturating_mul(12).saturating_add(16))
}

/// Builds the finite abstraction of `sys` on the given grids.
///
/// Rows are evaluated at the representative `(x̂, ν̂, ŵ)`. The refinement
/// `ν = K(x − x̂) + ν̂` acts only on the concrete side, so no feedback term
/// enters the abstract rows.
pub fn abstract_subsystem(
    sys: &LinearSubsystem,
    state_grid: &Grid,
    input_grid: &Grid,
    internal_grid: &Grid,
    opts: &AbstractionOptions,
) -> Result<FiniteMdp> {
    dim_check("state grid", sys.state_dim(), state_grid.dim())?;
    dim_check("input grid", sys.input_dim(), input_grid.dim())?;
    dim_check("internal grid", sys.internal_dim(), internal_grid.dim())?;

    if let KernelMode::MonteCarlo { samples, seed } = opts.kernel {
        if opts.storage == StorageMode::OnDemand {
            return Err(Error::Unsupported("Monte-Carlo rows must be materialized".into()));
        }
        let n_rows = state_grid.len() * input_grid.len() * internal_grid.len();
        let n_in = input_grid.len();
        let n_int = internal_grid.len();
        let rows = (0..n_rows)
            .into_par_iter()
            .map(|i| {
                let w = i % n_int;
                let rest = i / n_int;
                transition_row_monte_carlo(
                    sys,
                    &state_grid.representative(rest / n_in),
                    &input_grid.representative(rest % n_in),
                    &internal_grid.representative(w),
                    state_grid,
                    samples,
                    seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        return FiniteMdp::from_rows(state_grid.clone(), input_grid.clone(), internal_grid.clone(), rows);
    }

    let kernel = GaussianKernel::new(sys.clone())?;
    let lazy = FiniteMdp::from_parts(
        state_grid.clone(),
        input_grid.clone(),
        internal_grid.clone(),
        Transitions::Gaussian(kernel.clone()),
    );
    let needed = estimate_bytes(&kernel, state_grid, input_grid.len(), internal_grid.len());
    let over = needed > opts.memory_budget_bytes;
    match opts.storage {
        StorageMode::OnDemand => Ok(lazy),
        StorageMode::Auto if over => Ok(lazy),
        StorageMode::Materialized if over => Err(Error::MemoryBudget {
            states: state_grid.len(),
            inputs: input_grid.len(),
            internals: internal_grid.len(),
            needed_bytes: needed,
            budget_bytes: opts.memory_budget_bytes,
        }),
        _ => Ok(lazy.materialize()),
    }
}

/// Row-stochasticity audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticAudit {
    pub rows_checked: usize,
    pub max_row_sum_deviation: f64,
    pub min_entry: f64,
    pub max_entry: f64,
    pub min_sink_mass: f64,
    pub max_sink_mass: f64,
    pub mean_sink_mass: f64,
    /// First offending row indices (deviation above `tolerance` or entries outside `[0,1]`).
    pub flagged_rows: Vec<usize>,
    pub flagged_count: usize,
    pub tolerance: f64,
}

impl StochasticAudit {
    pub fn pass(&self) -> bool {
        self.flagged_count == 0
    }
}

pub const ROW_SUM_TOL: f64 = 1e-9;

/// Audits every row, including the absorbing sink row.
pub fn validate_stochastic(mdp: &FiniteMdp) -> StochasticAudit {
    audit_rows(mdp, (0..mdp.n_rows()).collect())
}

/// Audits at most `max_rows` rows spread evenly over the row range, plus the sink.
pub fn validate_stochastic_sampled(mdp: &FiniteMdp, max_rows: usize) -> StochasticAudit {
    let n = mdp.n_rows();
    if max_rows >= n {
        return validate_stochastic(mdp);
    }
    let rows = (0..max_rows).map(|i| i * n / max_rows).collect();
    audit_rows(mdp, rows)
}

fn audit_rows(mdp: &FiniteMdp, rows: Vec<usize>) -> StochasticAudit {
    struct One {
        dev: f64,
        min: f64,
        max: f64,
        sink: f64,
    }
    let per_row: Vec<One> = rows
        .par_iter()
        .map(|&i| {
            let (s, u, w) = mdp.split_row_index(i);
            let r = mdp.row(s, u, w);
            let min = r.probs.iter().copied().fold(r.sink, f64::min);
            let max = r.probs.iter().copied().fold(r.sink, f64::max);
            One {
                dev: (r.total() - 1.0).abs(),
                min,
                max,
                sink: r.sink,
            }
        })
        .collect();

    // the absorbing sink row
    let sink_row = mdp.row(mdp.sink_index(), 0, 0);
    let mut audit = StochasticAudit {
        rows_checked: per_row.len() + 1,
        max_row_sum_deviation: (sink_row.total() - 1.0).abs(),
        min_entry: 1.0,
        max_entry: 1.0,
        min_sink_mass: f64::INFINITY,
        max_sink_mass: f64::NEG_INFINITY,
        mean_sink_mass: 0.0,
        flagged_rows: Vec::new(),
        flagged_count: 0,
        tolerance: ROW_SUM_TOL,
    };
    let mut sink_sum = 0.0;
    for (i, one) in rows.iter().zip(&per_row) {
        audit.max_row_sum_deviation = audit.max_row_sum_deviation.max(one.dev);
        audit.min_entry = audit.min_entry.min(one.min);
        audit.max_entry = audit.max_entry.max(one.max);
        audit.min_sink_mass = audit.min_sink_mass.min(one.sink);
        audit.max_sink_mass = audit.max_sink_mass.max(one.sink);
        sink_sum += one.sink;
        if one.dev > ROW_SUM_TOL || one.min < 0.0 || one.max > 1.0 || one.dev.is_nan() {
            audit.flagged_count += 1;
            if audit.flagged_rows.len() < 16 {
                audit.flagged_rows.push(*i);
            }
        }
    }
    if per_row.is_empty() {
        audit.min_sink_mass = 1.0;
        audit.max_sink_mass = 1.0;
        audit.mean_sink_mass = 1.0;
    } else {
        audit.mean_sink_mass = sink_sum / per_row.len() as f64;
    }
    audit
}
