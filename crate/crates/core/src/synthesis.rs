//! Bounded-horizon safety controllers on finite abstractions and their
//! refinement to concrete controllers.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::interface;
use crate::error::{dim_check, invalid, Error, Result};
use crate::fmt::{g12, g12_point};
use crate::grid::Grid;
use crate::mdp::{FiniteMdp, ProbabilityRow, Transitions};
use crate::model::IntervalBox;

/// Treatment of the abstract internal input during local synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SynthesisMode {
    /// The internal input is chosen adversarially after the control input.
    Robust,
    /// The internal input is fixed at grid point `internal`.
    Nominal { internal: usize },
}

/// States that count as safe. The sink is always unsafe.
#[derive(Debug, Clone, PartialEq)]
pub enum SafeSet {
    All,
    Mask(Vec<bool>),
}

impl SafeSet {
    /// Cells whose representative lies in `safe`.
    pub fn from_box(grid: &Grid, safe: &IntervalBox) -> Self {
        SafeSet::Mask(grid.representatives().map(|x| safe.contains(&x)).collect())
    }

    fn mask(&self, n: usize) -> Result<Vec<bool>> {
        match self {
            SafeSet::All => Ok(vec![true; n]),
            SafeSet::Mask(m) => {
                dim_check("safe-set mask", n, m.len())?;
                Ok(m.clone())
            }
        }
    }
}

/// Time-varying policy from safety value iteration. Actions do not depend
/// on the internal input: robust mode picks the input before the adversary,
/// nominal mode fixes the internal input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub horizon: usize,
    pub mode: SynthesisMode,
    n_states: usize,
    /// `[k * n_states + s]`, `k < horizon`.
    actions: Vec<u32>,
    /// Internal input attaining the inner minimum (robust) or the fixed one.
    internal: Vec<u32>,
    /// `[k * (n_states + 1) + s]`, `k ≤ horizon`, sink last.
    values: Vec<f64>,
}

impl Policy {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn action(&self, k: usize, state: usize) -> Result<usize> {
        if k >= self.horizon {
            return Err(Error::BeyondHorizon { k, horizon: self.horizon });
        }
        if state >= self.n_states {
            return Err(invalid("state", format!("index {state} out of range")));
        }
        Ok(self.actions[k * self.n_states + state] as usize)
    }

    /// Looks up `(k, state, internal)`; the internal index is accepted for
    /// interface completeness and does not change the answer.
    pub fn action_for(&self, k: usize, state: usize, _internal: usize) -> Result<usize> {
        self.action(k, state)
    }

    /// Safety probability over the remaining `horizon − k` steps; the sink
    /// is `n_states`.
    pub fn value(&self, k: usize, state: usize) -> f64 {
        self.values[k * (self.n_states + 1) + state]
    }

    pub fn values_at(&self, k: usize) -> &[f64] {
        &self.values[k * (self.n_states + 1)..(k + 1) * (self.n_states + 1)]
    }

    pub fn internal_at(&self, k: usize, state: usize) -> usize {
        self.internal[k * self.n_states + state] as usize
    }

    /// Step-0 decision rule, for stationary use.
    pub fn stationary(&self) -> Vec<usize> {
        self.actions[..self.n_states].iter().map(|a| *a as usize).collect()
    }

    /// Copy whose every step uses the step-0 rule.
    pub fn to_stationary(&self) -> Policy {
        let mut p = self.clone();
        for k in 1..self.horizon {
            for s in 0..self.n_states {
                p.actions[k * self.n_states + s] = self.actions[s];
                p.internal[k * self.n_states + s] = self.internal[s];
            }
        }
        p
    }

    /// CSV with columns `k,state,internal,input,value`; points are written
    /// as `;`-joined coordinates.
    pub fn write_csv<W: Write>(&self, mdp: &FiniteMdp, mut w: W) -> Result<()> {
        dim_check("policy states", mdp.n_states(), self.n_states)?;
        writeln!(w, "k,state,internal,input,value")?;
        let states: Vec<String> = mdp.state_grid().representatives().map(|x| g12_point(&x)).collect();
        for k in 0..self.horizon {
            for (s, state) in states.iter().enumerate() {
                let u = self.action(k, s)?;
                let wi = self.internal_at(k, s);
                writeln!(
                    w,
                    "{k},{state},{},{},{}",
                    g12_point(&mdp.internal_grid().representative(wi)),
                    g12_point(&mdp.input_grid().representative(u)),
                    g12(self.value(k, s))
                )?;
            }
        }
        Ok(())
    }
}

/// Row memory allowed for caching lazily evaluated rows during synthesis.
pub const ROW_CACHE_BYTES: u64 = 1 << 30;

struct RowCache {
    rows: Vec<ProbabilityRow>,
    n_inputs: usize,
    n_w: usize,
}

impl RowCache {
    fn dot(&self, s: usize, u: usize, wi: usize, values: &[f64], sink_value: f64) -> f64 {
        let row = &self.rows[(s * self.n_inputs + u) * self.n_w + wi];
        let mut acc = 0.0;
        for (c, p) in row.cells.iter().zip(&row.probs) {
            acc += p * values[*c as usize];
        }
        acc + row.sink * sink_value
    }
}

/// Backward safety recursion. `V_Td = 1` on safe states, `0` elsewhere;
/// `V_k(x) = max_ν̂ [min_ŵ | ŵ₀] Σ_x' T(x'|x, ν̂, ŵ) V_{k+1}(x')` on safe
/// states. Ties go to the lowest input index, and to the lowest internal
/// index for the recorded minimizer.
pub fn safety_value_iteration(mdp: &FiniteMdp, safe: &SafeSet, horizon: usize, mode: SynthesisMode) -> Result<Policy> {
    if horizon == 0 {
        return Err(invalid("horizon", "must be at least 1"));
    }
    let n = mdp.n_states();
    let mask = safe.mask(n)?;
    if !mask.iter().any(|b| *b) {
        return Err(Error::EmptySafeSet);
    }
    let internals: Vec<usize> = match mode {
        SynthesisMode::Robust => (0..mdp.n_internal()).collect(),
        SynthesisMode::Nominal { internal } => {
            if internal >= mdp.n_internal() {
                return Err(invalid("internal", format!("grid index {internal} out of range")));
            }
            vec![internal]
        }
    };
    let n_u = mdp.n_inputs();
    let n_w = internals.len();

    let cache = match mdp.transitions() {
        Transitions::Stored(_) => None,
        Transitions::Gaussian(k) => {
            let rows = (n * n_u * n_w) as u64;
            let bytes = rows.saturating_mul(k.nnz_estimate(mdp.state_grid()) as u64 * 12 + 40);
            (bytes <= ROW_CACHE_BYTES).then(|| RowCache {
                rows: (0..n * n_u * n_w)
                    .into_par_iter()
                    .map(|i| {
                        let wi = i % n_w;
                        let u = (i / n_w) % n_u;
                        let s = i / (n_w * n_u);
                        mdp.row(s, u, internals[wi])
                    })
                    .collect(),
                n_inputs: n_u,
                n_w,
            })
        }
    };
    let q = |s: usize, u: usize, wi: usize, v: &[f64]| -> f64 {
        match &cache {
            Some(c) => c.dot(s, u, wi, v, 0.0),
            None => mdp.expected_value(s, u, internals[wi], v, 0.0),
        }
    };

    let stride = n + 1;
    let mut values = vec![0.0; (horizon + 1) * stride];
    for (s, safe) in mask.iter().enumerate() {
        values[horizon * stride + s] = if *safe { 1.0 } else { 0.0 };
    }
    let mut actions = vec![0u32; horizon * n];
    let mut internal = vec![0u32; horizon * n];

    for k in (0..horizon).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * stride);
        let next = &tail[..stride];
        let step: Vec<(f64, u32, u32)> = (0..n)
            .into_par_iter()
            .map(|s| {
                if !mask[s] {
                    return (0.0, 0, internals[0] as u32);
                }
                let mut best = (f64::NEG_INFINITY, 0u32, 0u32);
                for u in 0..n_u {
                    let mut worst = (f64::INFINITY, 0usize);
                    for wi in 0..n_w {
                        let v = q(s, u, wi, next);
                        if v < worst.0 {
                            worst = (v, wi);
                        }
                    }
                    if worst.0 > best.0 {
                        best = (worst.0, u as u32, internals[worst.1] as u32);
                    }
                }
                (best.0.clamp(0.0, 1.0), best.1, best.2)
            })
            .collect();
        let cur = &mut head[k * stride..];
        for (s, (v, u, w)) in step.into_iter().enumerate() {
            cur[s] = v;
            actions[k * n + s] = u;
            internal[k * n + s] = w;
        }
        cur[n] = 0.0;
    }
    Ok(Policy {
        horizon,
        mode,
        n_states: n,
        actions,
        internal,
        values,
    })
}

/// Concrete controller obtained from an abstract policy through the
/// interface `ν = K(x − x̂) + ν̂`.
#[derive(Debug, Clone)]
pub struct Controller {
    policy: Policy,
    state_grid: Grid,
    input_grid: Grid,
    internal_grid: Grid,
    k: DMatrix<f64>,
    input_box: Option<IntervalBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlAction {
    pub nu: Vec<f64>,
    pub nu_hat: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub state_index: usize,
    /// The concrete state was outside the grid and was projected onto it.
    pub state_clamped: bool,
    /// The interface output left the input box and was projected back.
    pub input_clamped: bool,
}

impl Controller {
    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn horizon(&self) -> usize {
        self.policy.horizon
    }

    pub fn state_grid(&self) -> &Grid {
        &self.state_grid
    }

    pub fn internal_grid(&self) -> &Grid {
        &self.internal_grid
    }

    /// Concrete input at step `k` for state `x` and internal input `w`.
    pub fn input(&self, k: usize, x: &[f64], w: &[f64]) -> Result<ControlAction> {
        let qx = self.state_grid.quantize(x)?;
        let qw = self.internal_grid.quantize(w)?;
        let u = self.policy.action_for(k, qx.index, qw.index)?;
        let nu_hat = self.input_grid.representative(u);
        let out = interface(&self.k, x, &qx.point, &nu_hat, self.input_box.as_ref())?;
        Ok(ControlAction {
            nu: out.nu,
            nu_hat,
            x_hat: qx.point,
            state_index: qx.index,
            state_clamped: qx.clamped,
            input_clamped: out.clamped,
        })
    }

    /// Abstract input for abstract state index `state` at step `k`.
    pub fn abstract_input(&self, k: usize, state: usize) -> Result<Vec<f64>> {
        Ok(self.input_grid.representative(self.policy.action(k, state)?))
    }

    /// Input pair when the abstraction runs alongside the concrete system:
    /// `ν̂` from the table at the abstract state `(state, x_hat)` and
    /// `ν = K(x − x̂) + ν̂` for the concrete one.
    pub fn coupled_input(&self, k: usize, x: &[f64], x_hat: &[f64], state: usize) -> Result<ControlAction> {
        let nu_hat = self.abstract_input(k, state)?;
        let out = interface(&self.k, x, x_hat, &nu_hat, self.input_box.as_ref())?;
        Ok(ControlAction {
            nu: out.nu,
            nu_hat,
            x_hat: x_hat.to_vec(),
            state_index: state,
            state_clamped: false,
            input_clamped: out.clamped,
        })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn input_grid(&self) -> &Grid {
        &self.input_grid
    }
}

/// Wraps `policy` into a concrete controller. When `input_box` is given the
/// interface output is projected onto it.
pub fn refine_policy(policy: Policy, mdp: &FiniteMdp, k: DMatrix<f64>, input_box: Option<IntervalBox>) -> Result<Controller> {
    dim_check("policy states", mdp.n_states(), policy.n_states)?;
    dim_check("K rows", mdp.input_grid().dim(), k.nrows())?;
    dim_check("K columns", mdp.state_grid().dim(), k.ncols())?;
    Ok(Controller {
        policy,
        state_grid: mdp.state_grid().clone(),
        input_grid: mdp.input_grid().clone(),
        internal_grid: mdp.internal_grid().clone(),
        k,
        input_box,
    })
}
