//! Linear stochastic control subsystems and their interconnection.
//!
//! A subsystem evolves as
//!
//! ```text
//! x(k+1) = A(ν) x + B ν + D w + N ς + c,      A(ν) = A + Σ_j ν_j E_j
//! y1 = C1 x,  y2 = C2 x
//! ```
//!
//! where `ς` is standard normal, `c` is a constant drift and the `E_j`
//! terms carry input-dependent state coefficients (the heater term of the
//! room model). With no `E_j` and `c = 0` this is the plain linear template
//! `(A, B, C1, C2, D, N)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, invalid, Error, Result};

/// Axis-aligned box `[lo_1, hi_1] x ... x [lo_n, hi_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::InvalidBox(format!(
                "{} lower bounds but {} upper bounds",
                lo.len(),
                hi.len()
            )));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::InvalidBox(format!("non-finite bound in dimension {i}")));
            }
            if l >= h {
                return Err(Error::InvalidBox(format!(
                    "dimension {i} has lower {l} >= upper {h}"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    /// Box that may be degenerate (`lo == hi`), used for interval images.
    fn image(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    /// Euclidean length of the main diagonal.
    pub fn diameter(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.width(i).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// Projects `x` onto the box; returns whether any coordinate moved.
    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            if *v < *l {
                *v = *l;
                moved = true;
            } else if *v > *h {
                *v = *h;
                moved = true;
            }
        }
        moved
    }

    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..(1usize << d))
            .map(|mask| {
                (0..d)
                    .map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] })
                    .collect()
            })
            .collect()
    }

    pub fn product(boxes: &[&IntervalBox]) -> IntervalBox {
        let lo = boxes.iter().flat_map(|b| b.lo.iter().copied()).collect();
        let hi = boxes.iter().flat_map(|b| b.hi.iter().copied()).collect();
        IntervalBox::image(lo, hi)
    }

    /// Tight interval image `{ m x : x in self }`.
    pub fn linear_image(&self, m: &DMatrix<f64>) -> Result<IntervalBox> {
        dim_check("interval image", self.dim(), m.ncols())?;
        let mut lo = vec![0.0; m.nrows()];
        let mut hi = vec![0.0; m.nrows()];
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let a = m[(i, j)] * self.lo[j];
                let b = m[(i, j)] * self.hi[j];
                lo[i] += a.min(b);
                hi[i] += a.max(b);
            }
        }
        Ok(IntervalBox::image(lo, hi))
    }

    pub fn split(&self, dims: &[usize]) -> Vec<IntervalBox> {
        let mut out = Vec::with_capacity(dims.len());
        let mut start = 0;
        for &d in dims {
            out.push(IntervalBox::image(
                self.lo[start..start + d].to_vec(),
                self.hi[start..start + d].to_vec(),
            ));
            start += d;
        }
        out
    }
}

/// One network node: matrices, input-dependent state terms, drift and
/// the bounded operating boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSubsystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    noise: DMatrix<f64>,
    c1: DMatrix<f64>,
    c2: DMatrix<f64>,
    input_state: Vec<DMatrix<f64>>,
    drift: DVector<f64>,
    state_box: IntervalBox,
    input_box: IntervalBox,
    internal_box: IntervalBox,
}

impl LinearSubsystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c1: DMatrix<f64>,
        c2: DMatrix<f64>,
        d: DMatrix<f64>,
        noise: DMatrix<f64>,
        state_box: IntervalBox,
        input_box: IntervalBox,
        internal_box: IntervalBox,
    ) -> Result<Self> {
        let n = a.nrows();
        dim_check("A columns", n, a.ncols())?;
        dim_check("B rows", n, b.nrows())?;
        dim_check("D rows", n, d.nrows())?;
        dim_check("N rows", n, noise.nrows())?;
        dim_check("C1 columns", n, c1.ncols())?;
        dim_check("C2 columns", n, c2.ncols())?;
        dim_check("state box", n, state_box.dim())?;
        dim_check("input box", b.ncols(), input_box.dim())?;
        dim_check("internal box", d.ncols(), internal_box.dim())?;
        for (name, m) in [("A", &a), ("B", &b), ("C1", &c1), ("C2", &c2), ("D", &d), ("N", &noise)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(invalid(name, "non-finite entry"));
            }
        }
        Ok(Self {
            drift: DVector::zeros(n),
            a,
            b,
            d,
            noise,
            c1,
            c2,
            input_state: Vec::new(),
            state_box,
            input_box,
            internal_box,
        })
    }

    /// Constant drift `c` added to every step.
    pub fn with_drift(mut self, drift: DVector<f64>) -> Result<Self> {
        dim_check("drift", self.state_dim(), drift.len())?;
        self.drift = drift;
        Ok(self)
    }

    /// Input-dependent state terms: `A(ν) = A + Σ_j ν_j E_j`, one `E_j` per input.
    pub fn with_input_state_terms(mut self, terms: Vec<DMatrix<f64>>) -> Result<Self> {
        dim_check("input-state terms", self.input_dim(), terms.len())?;
        for e in &terms {
            dim_check("input-state term rows", self.state_dim(), e.nrows())?;
            dim_check("input-state term columns", self.state_dim(), e.ncols())?;
        }
        self.input_state = terms;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn internal_dim(&self) -> usize {
        self.d.ncols()
    }
    pub fn noise_dim(&self) -> usize {
        self.noise.ncols()
    }
    pub fn external_output_dim(&self) -> usize {
        self.c1.nrows()
    }
    pub fn internal_output_dim(&self) -> usize {
        self.c2.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn noise_gain(&self) -> &DMatrix<f64> {
        &self.noise
    }
    pub fn c1(&self) -> &DMatrix<f64> {
        &self.c1
    }
    pub fn c2(&self) -> &DMatrix<f64> {
        &self.c2
    }
    pub fn drift(&self) -> &DVector<f64> {
        &self.drift
    }
    pub fn input_state_terms(&self) -> &[DMatrix<f64>] {
        &self.input_state
    }
    pub fn state_box(&self) -> &IntervalBox {
        &self.state_box
    }
    pub fn input_box(&self) -> &IntervalBox {
        &self.input_box
    }
    pub fn internal_box(&self) -> &IntervalBox {
        &self.internal_box
    }

    pub fn has_input_state_terms(&self) -> bool {
        self.input_state.iter().any(|e| e.iter().any(|v| *v != 0.0))
    }

    /// `A(ν)`.
    pub fn state_matrix(&self, nu: &[f64]) -> DMatrix<f64> {
        let mut a = self.a.clone();
        for (e, v) in self.input_state.iter().zip(nu) {
            a += e * *v;
        }
        a
    }

    /// Box of internal outputs `C2 x` over the state box.
    pub fn internal_output_box(&self) -> IntervalBox {
        self.state_box
            .linear_image(&self.c2)
            .expect("C2 columns checked at construction")
    }

    /// Deterministic part of the step: `A(ν)x + Bν + Dw + c`.
    pub fn mean(&self, x: &[f64], nu: &[f64], w: &[f64]) -> Result<DVector<f64>> {
        dim_check("state", self.state_dim(), x.len())?;
        dim_check("external input", self.input_dim(), nu.len())?;
        dim_check("internal input", self.internal_dim(), w.len())?;
        let x = DVector::from_column_slice(x);
        let nu_v = DVector::from_column_slice(nu);
        let w = DVector::from_column_slice(w);
        let mut out = &self.a * &x + &self.b * &nu_v + &self.d * &w + &self.drift;
        for (e, v) in self.input_state.iter().zip(nu) {
            if *v != 0.0 {
                out += (e * &x) * *v;
            }
        }
        Ok(out)
    }

    /// One unclamped step `A(ν)x + Bν + Dw + Nς + c`.
    pub fn concrete_step(&self, x: &[f64], nu: &[f64], w: &[f64], noise: &[f64]) -> Result<DVector<f64>> {
        dim_check("noise sample", self.noise_dim(), noise.len())?;
        let mut out = self.mean(x, nu, w)?;
        out += &self.noise * DVector::from_column_slice(noise);
        Ok(out)
    }

    pub fn external_output(&self, x: &[f64]) -> DVector<f64> {
        &self.c1 * DVector::from_column_slice(x)
    }

    pub fn internal_output(&self, x: &[f64]) -> DVector<f64> {
        &self.c2 * DVector::from_column_slice(x)
    }
}

/// Subsystems plus the coupling `w = M y2` and the weights `μ_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterconnectionSpec {
    subsystems: Vec<LinearSubsystem>,
    coupling: DMatrix<f64>,
    mu: Vec<f64>,
}

impl InterconnectionSpec {
    pub fn new(subsystems: Vec<LinearSubsystem>, coupling: DMatrix<f64>, mu: Vec<f64>) -> Result<Self> {
        if subsystems.is_empty() {
            return Err(invalid("subsystems", "at least one subsystem is required"));
        }
        let p: usize = subsystems.iter().map(|s| s.internal_dim()).sum();
        let q: usize = subsystems.iter().map(|s| s.internal_output_dim()).sum();
        dim_check("coupling rows (stacked internal inputs)", p, coupling.nrows())?;
        dim_check("coupling columns (stacked internal outputs)", q, coupling.ncols())?;
        dim_check("weights", subsystems.len(), mu.len())?;
        if let Some((i, m)) = mu.iter().enumerate().find(|(_, m)| !(**m > 0.0) || !m.is_finite()) {
            return Err(invalid("mu", format!("weight {i} is {m}, must be positive")));
        }
        Ok(Self {
            subsystems,
            coupling,
            mu,
        })
    }

    pub fn subsystems(&self) -> &[LinearSubsystem] {
        &self.subsystems
    }
    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }
    pub fn len(&self) -> usize {
        self.subsystems.len()
    }
    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn internal_dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(|s| s.internal_dim()).collect()
    }

    pub fn internal_output_dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(|s| s.internal_output_dim()).collect()
    }

    /// Splits `M · [y2_1; ...; y2_N]` into per-subsystem internal inputs.
    pub fn internal_inputs(&self, internal_outputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        couple(&self.coupling, internal_outputs, &self.internal_dims())
    }
}

/// Stacks the outputs, multiplies by `m` and splits by `dims`.
pub fn couple(m: &DMatrix<f64>, outputs: &[DVector<f64>], dims: &[usize]) -> Vec<DVector<f64>> {
    let stacked = DVector::from_iterator(m.ncols(), outputs.iter().flat_map(|y| y.iter().copied()));
    let w = m * stacked;
    let mut out = Vec::with_capacity(dims.len());
    let mut start = 0;
    for &d in dims {
        out.push(w.rows(start, d).into_owned());
        start += d;
    }
    out
}

/// Result of the box-inclusion test `M · Π Y2_i ⊆ Π W_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WellPosednessReport {
    pub pass: bool,
    /// Interval image of the stacked internal-output box under `M`.
    pub image: IntervalBox,
    /// Stacked internal-input box.
    pub target: IntervalBox,
    /// Per-dimension `min(image_lo - target_lo, target_hi - image_hi)`; negative means violation.
    pub slack: Vec<f64>,
}

pub fn validate_interconnection(spec: &InterconnectionSpec) -> Result<WellPosednessReport> {
    let out_boxes: Vec<IntervalBox> = spec.subsystems.iter().map(|s| s.internal_output_box()).collect();
    let refs: Vec<&IntervalBox> = out_boxes.iter().collect();
    let outputs = IntervalBox::product(&refs);
    let image = outputs.linear_image(&spec.coupling)?;
    let in_refs: Vec<&IntervalBox> = spec.subsystems.iter().map(|s| s.internal_box()).collect();
    let target = IntervalBox::product(&in_refs);
    dim_check("stacked internal inputs", target.dim(), image.dim())?;
    let slack: Vec<f64> = (0..image.dim())
        .map(|i| (image.lo[i] - target.lo[i]).min(target.hi[i] - image.hi[i]))
        .collect();
    let pass = slack.iter().enumerate().all(|(i, s)| {
        let scale = 1.0 + target.lo[i].abs().max(target.hi[i].abs());
        *s >= -1e-12 * scale
    });
    Ok(WellPosednessReport {
        pass,
        image,
        target,
        slack,
    })
}

/// Circulant ring coupling: `m[i][i±1] = 1` (indices mod `n`).
pub fn circulant_ring(n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, (i + 1) % n)] = 1.0;
        m[((i + 1) % n, i)] = 1.0;
    }
    m
}

/// Parameters of the ring of heated rooms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomParams {
    /// Conduction between neighbouring rooms.
    pub eta: f64,
    /// Conduction to the environment.
    pub beta: f64,
    /// Conduction from the heater.
    pub gamma: f64,
    pub heater_temp: f64,
    pub outside_temp: f64,
    pub sigma: f64,
    pub temp_lo: f64,
    pub temp_hi: f64,
    pub input_lo: f64,
    pub input_hi: f64,
}

impl RoomParams {
    /// 15-room configuration.
    pub fn rooms15() -> Self {
        Self {
            eta: 0.1,
            beta: 0.022,
            gamma: 0.05,
            heater_temp: 50.0,
            outside_temp: -1.0,
            sigma: 0.28,
            temp_lo: 19.0,
            temp_hi: 21.0,
            input_lo: 0.0,
            input_hi: 0.6,
        }
    }

    /// 200-room scalability configuration.
    pub fn rooms200() -> Self {
        Self {
            beta: 0.4,
            gamma: 0.5,
            sigma: 0.21,
            ..Self::rooms15()
        }
    }

    /// `1 - 2η - β - γν`, the room's self-coefficient at heater input `ν`.
    pub fn lambda(&self, nu: f64) -> f64 {
        1.0 - 2.0 * self.eta - self.beta - self.gamma * nu
    }
}

/// One room: `T' = (1-2η-β)T + γT_h ν - γνT + η w + βT_e + σς`.
pub fn room_subsystem(p: &RoomParams) -> Result<LinearSubsystem> {
    for (name, v) in [("eta", p.eta), ("beta", p.beta), ("gamma", p.gamma)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(invalid(name, format!("conduction factor must be positive, got {v}")));
        }
    }
    if !(p.sigma >= 0.0) || !p.sigma.is_finite() {
        return Err(invalid("sigma", format!("must be non-negative, got {}", p.sigma)));
    }
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let state_box = IntervalBox::interval(p.temp_lo, p.temp_hi)?;
    // each room receives the sum of its two neighbours' temperatures
    let internal_box = IntervalBox::interval(2.0 * p.temp_lo, 2.0 * p.temp_hi)?;
    LinearSubsystem::new(
        one(1.0 - 2.0 * p.eta - p.beta),
        one(p.gamma * p.heater_temp),
        one(1.0),
        one(1.0),
        one(p.eta),
        one(p.sigma),
        state_box,
        IntervalBox::interval(p.input_lo, p.input_hi)?,
        internal_box,
    )?
    .with_drift(DVector::from_element(1, p.beta * p.outside_temp))?
    .with_input_state_terms(vec![one(-p.gamma)])
}

/// `n ≥ 3` identical rooms on a ring with unit weights.
pub fn room_network(n: usize, params: &RoomParams) -> Result<InterconnectionSpec> {
    if n < 3 {
        return Err(invalid("n", format!("a ring of rooms needs at least 3 rooms, got {n}")));
    }
    let room = room_subsystem(params)?;
    InterconnectionSpec::new(vec![room; n], circulant_ring(n), vec![1.0; n])
}
