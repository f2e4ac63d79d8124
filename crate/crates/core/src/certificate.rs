//! Quadratic storage functions `V(x, x̂) = (x − x̂)ᵀ M̃ (x − x̂)` and the
//! matrix inequality that makes `V` a stochastic storage function from the
//! finite abstraction to the concrete subsystem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, invalid, Error, Result};
use crate::linalg::{asymmetry, lambda_max, lambda_min, quad_form, sym_eigenvalues, PSD_TOL};
use crate::model::{IntervalBox, LinearSubsystem};

/// Blocks of the supply-rate matrix `X̄`. `x11` weighs the internal-input
/// mismatch `w − ŵ`, `x22` the internal-output mismatch `C2(x − x̂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplyRate {
    pub x11: DMatrix<f64>,
    pub x12: DMatrix<f64>,
    pub x21: DMatrix<f64>,
    pub x22: DMatrix<f64>,
}

impl SupplyRate {
    pub fn new(x11: DMatrix<f64>, x12: DMatrix<f64>, x21: DMatrix<f64>, x22: DMatrix<f64>) -> Result<Self> {
        let p = x11.nrows();
        let q = x22.nrows();
        dim_check("X11 columns", p, x11.ncols())?;
        dim_check("X22 columns", q, x22.ncols())?;
        dim_check("X12 rows", p, x12.nrows())?;
        dim_check("X12 columns", q, x12.ncols())?;
        dim_check("X21 rows", q, x21.nrows())?;
        dim_check("X21 columns", p, x21.ncols())?;
        let s = Self { x11, x12, x21, x22 };
        let skew = asymmetry(&s.full());
        let scale = 1.0 + s.full().amax();
        if skew > 1e-12 * scale {
            return Err(Error::InconsistentSupply(format!(
                "X̄ is not symmetric (max asymmetry {skew:e}); X12 must equal X21ᵀ"
            )));
        }
        Ok(s)
    }

    /// Scalar blocks.
    pub fn scalar(x11: f64, x12: f64, x22: f64) -> Self {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        Self {
            x11: one(x11),
            x12: one(x12),
            x21: one(x12),
            x22: one(x22),
        }
    }

    pub fn internal_dim(&self) -> usize {
        self.x11.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.x22.nrows()
    }

    pub fn full(&self) -> DMatrix<f64> {
        let p = self.internal_dim();
        let q = self.output_dim();
        let mut m = DMatrix::zeros(p + q, p + q);
        m.view_mut((0, 0), (p, p)).copy_from(&self.x11);
        m.view_mut((0, p), (p, q)).copy_from(&self.x12);
        m.view_mut((p, 0), (q, p)).copy_from(&self.x21);
        m.view_mut((p, p), (q, q)).copy_from(&self.x22);
        m
    }

    /// `[dw; dy]ᵀ X̄ [dw; dy]`.
    pub fn evaluate(&self, dw: &DVector<f64>, dy: &DVector<f64>) -> f64 {
        dw.dot(&(&self.x11 * dw)) + dw.dot(&(&self.x12 * dy)) + dy.dot(&(&self.x21 * dw)) + dy.dot(&(&self.x22 * dy))
    }
}

/// How `X̄` is obtained for a given input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SupplyTemplate {
    Fixed(SupplyRate),
    /// Scalar ring-room supply rate
    /// `[[η²(1+π), ηλ], [ηλ, −g·η(1+π)]]`, with `λ` the subsystem's state
    /// coefficient at the current input and `g` the output gain (3.38 for
    /// the heated-room network).
    RoomConduction { eta: f64, output_gain: f64 },
}

impl SupplyTemplate {
    pub fn room(eta: f64) -> Self {
        SupplyTemplate::RoomConduction { eta, output_gain: 3.38 }
    }

    fn depends_on_input(&self) -> bool {
        matches!(self, SupplyTemplate::RoomConduction { .. })
    }

    pub fn at(&self, sys: &LinearSubsystem, pi: f64, nu: &[f64]) -> Result<SupplyRate> {
        match self {
            SupplyTemplate::Fixed(s) => Ok(s.clone()),
            SupplyTemplate::RoomConduction { eta, output_gain } => {
                if sys.state_dim() != 1 || sys.internal_dim() != 1 || sys.internal_output_dim() != 1 {
                    return Err(Error::Unsupported("the room supply template needs a scalar subsystem".into()));
                }
                let lambda = sys.state_matrix(nu)[(0, 0)];
                Ok(SupplyRate::scalar(
                    eta * eta * (1.0 + pi),
                    eta * lambda,
                    -output_gain * eta * (1.0 + pi),
                ))
            }
        }
    }
}

/// User-supplied certificate candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateParams {
    pub mtilde: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub kappa_hat: f64,
    pub pi: f64,
    pub supply: SupplyTemplate,
}

impl CertificateParams {
    /// `M̃ = 1`, `K = 0` with the room supply template.
    pub fn room(kappa_hat: f64, pi: f64, eta: f64) -> Self {
        Self {
            mtilde: DMatrix::from_element(1, 1, 1.0),
            k: DMatrix::zeros(1, 1),
            kappa_hat,
            pi,
            supply: SupplyTemplate::room(eta),
        }
    }

    fn validate(&self, sys: &LinearSubsystem) -> Result<()> {
        if !(self.kappa_hat > 0.0 && self.kappa_hat < 1.0) {
            return Err(invalid("kappa_hat", format!("must lie in (0,1), got {}", self.kappa_hat)));
        }
        if !(self.pi > 0.0) || !self.pi.is_finite() {
            return Err(invalid("pi", format!("must be positive, got {}", self.pi)));
        }
        let n = sys.state_dim();
        dim_check("M̃ rows", n, self.mtilde.nrows())?;
        dim_check("M̃ columns", n, self.mtilde.ncols())?;
        dim_check("K rows", sys.input_dim(), self.k.nrows())?;
        dim_check("K columns", n, self.k.ncols())?;
        if asymmetry(&self.mtilde) > 1e-12 * (1.0 + self.mtilde.amax()) {
            return Err(invalid("mtilde", "must be symmetric"));
        }
        if !(lambda_min(&self.mtilde) > 0.0) {
            return Err(invalid("mtilde", "must be positive definite"));
        }
        Ok(())
    }
}

/// Matrix-inequality margin at one input vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexMargin {
    pub nu: Vec<f64>,
    /// `λ_max(LHS − RHS)`.
    pub lambda_max: f64,
    /// `λ_max` of the state block of `LHS − RHS`, i.e. the slack left in
    /// `(1+π)(A+BK)ᵀM̃(A+BK) ⪯ κ̂M̃ + C2ᵀX̄²²C2`.
    pub state_block_margin: f64,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiReport {
    pub pass: bool,
    /// Worst `λ_max(LHS − RHS)` over the checked inputs.
    pub margin: f64,
    /// Worst state-block margin over the checked inputs.
    pub state_block_margin: f64,
    /// Input at which `margin` is attained.
    pub worst_nu: Vec<f64>,
    pub vertices: Vec<VertexMargin>,
}

fn lmi_difference(sys: &LinearSubsystem, params: &CertificateParams, nu: &[f64]) -> Result<DMatrix<f64>> {
    let supply = params.supply.at(sys, params.pi, nu)?;
    let n = sys.state_dim();
    let p = sys.internal_dim();
    dim_check("X11 size (internal inputs)", p, supply.internal_dim())?;
    dim_check("X22 size (internal outputs)", sys.internal_output_dim(), supply.output_dim())?;
    let ak = sys.state_matrix(nu) + sys.b() * &params.k;
    let m = &params.mtilde;
    let d = sys.d();
    let c2 = sys.c2();
    let one_pi = 1.0 + params.pi;

    let mut lhs = DMatrix::zeros(n + p, n + p);
    lhs.view_mut((0, 0), (n, n)).copy_from(&(ak.transpose() * m * &ak * one_pi));
    lhs.view_mut((0, n), (n, p)).copy_from(&(ak.transpose() * m * d));
    lhs.view_mut((n, 0), (p, n)).copy_from(&(d.transpose() * m * &ak));
    lhs.view_mut((n, n), (p, p)).copy_from(&(d.transpose() * m * d * one_pi));

    let mut rhs = DMatrix::zeros(n + p, n + p);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(m * params.kappa_hat + c2.transpose() * &supply.x22 * c2));
    rhs.view_mut((0, n), (n, p)).copy_from(&(c2.transpose() * &supply.x21));
    rhs.view_mut((n, 0), (p, n)).copy_from(&(&supply.x12 * c2));
    rhs.view_mut((n, n), (p, p)).copy_from(&supply.x11);

    let diff = lhs - rhs;
    let skew = asymmetry(&diff);
    if skew > 1e-9 * (1.0 + diff.amax()) {
        return Err(Error::InconsistentSupply(format!(
            "LHS − RHS is not symmetric (max asymmetry {skew:e})"
        )));
    }
    Ok(diff)
}

/// Inputs at which the inequality must be checked. The inequality depends
/// affinely on `ν` through `A(ν)` and the supply template, so the input
/// box's vertices suffice.
fn check_points(sys: &LinearSubsystem, params: &CertificateParams) -> Vec<Vec<f64>> {
    if sys.has_input_state_terms() || params.supply.depends_on_input() {
        sys.input_box().vertices()
    } else {
        vec![sys.input_box().lo().to_vec()]
    }
}

/// Checks `LHS ⪯ RHS` of the storage-function matrix inequality.
pub fn check_storage_matrix_inequality(sys: &LinearSubsystem, params: &CertificateParams) -> Result<LmiReport> {
    params.validate(sys)?;
    let n = sys.state_dim();
    let mut vertices = Vec::new();
    for nu in check_points(sys, params) {
        let diff = lmi_difference(sys, params, &nu)?;
        let eigenvalues = sym_eigenvalues(&diff);
        let state_block = diff.view((0, 0), (n, n)).into_owned();
        vertices.push(VertexMargin {
            lambda_max: *eigenvalues.last().expect("non-empty"),
            state_block_margin: lambda_max(&state_block),
            eigenvalues,
            nu,
        });
    }
    let worst = vertices
        .iter()
        .max_by(|a, b| {
            a.lambda_max
                .total_cmp(&b.lambda_max)
                .then(a.state_block_margin.total_cmp(&b.state_block_margin))
        })
        .expect("at least one vertex");
    Ok(LmiReport {
        pass: worst.lambda_max <= PSD_TOL,
        margin: worst.lambda_max,
        state_block_margin: vertices
            .iter()
            .map(|v| v.state_block_margin)
            .fold(f64::NEG_INFINITY, f64::max),
        worst_nu: worst.nu.clone(),
        vertices,
    })
}

/// `ψ = (1 + 2/π) λ_max(M̃) δ²`.
pub fn storage_offset(mtilde: &DMatrix<f64>, pi: f64, delta: f64) -> Result<f64> {
    if !(pi > 0.0) {
        return Err(invalid("pi", format!("must be positive, got {pi}")));
    }
    if !(delta >= 0.0) {
        return Err(invalid("delta", format!("must be non-negative, got {delta}")));
    }
    Ok((1.0 + 2.0 / pi) * lambda_max(mtilde) * delta * delta)
}

/// `λ_min(M̃) / λ_max(C1ᵀC1)`, the coefficient of `α(s) = c·s²`.
pub fn alpha_coefficient(mtilde: &DMatrix<f64>, c1: &DMatrix<f64>) -> Result<f64> {
    let denom = lambda_max(&(c1.transpose() * c1));
    if !(denom > 0.0) {
        return Err(invalid("C1", "C1ᵀC1 must have a positive eigenvalue"));
    }
    Ok(lambda_min(mtilde) / denom)
}

/// `V(x, x̂) = (x − x̂)ᵀ M̃ (x − x̂)`.
pub fn storage_value(mtilde: &DMatrix<f64>, x: &[f64], x_hat: &[f64]) -> f64 {
    let e = DVector::from_iterator(x.len(), x.iter().zip(x_hat).map(|(a, b)| a - b));
    quad_form(mtilde, &e).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceOutput {
    pub nu: Vec<f64>,
    /// Set when `K(x − x̂) + ν̂` left the input box and was projected back.
    pub clamped: bool,
}

/// Refinement `ν = K(x − x̂) + ν̂`, projected onto `input_box` when given.
pub fn interface(
    k: &DMatrix<f64>,
    x: &[f64],
    x_hat: &[f64],
    nu_hat: &[f64],
    input_box: Option<&IntervalBox>,
) -> Result<InterfaceOutput> {
    dim_check("interface state", k.ncols(), x.len())?;
    dim_check("interface abstract state", k.ncols(), x_hat.len())?;
    dim_check("interface abstract input", k.nrows(), nu_hat.len())?;
    let e = DVector::from_iterator(x.len(), x.iter().zip(x_hat).map(|(a, b)| a - b));
    let corr = k * e;
    let mut nu: Vec<f64> = nu_hat.iter().zip(corr.iter()).map(|(n, c)| n + c).collect();
    let clamped = input_box.is_some_and(|b| b.clamp(&mut nu));
    Ok(InterfaceOutput { nu, clamped })
}

/// A verified (or rejected) storage certificate for one subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageCertificate {
    pub mtilde: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub kappa_hat: f64,
    pub pi: f64,
    pub supply: SupplyTemplate,
    /// Resolved `X̄` at each checked input.
    pub supply_at_vertices: Vec<(Vec<f64>, SupplyRate)>,
    pub delta: f64,
    pub psi: f64,
    pub alpha_coeff: f64,
    pub lmi: LmiReport,
}

impl StorageCertificate {
    pub fn verified(&self) -> bool {
        self.lmi.pass
    }

    pub fn value(&self, x: &[f64], x_hat: &[f64]) -> f64 {
        storage_value(&self.mtilde, x, x_hat)
    }

    /// Right-hand side of the one-step storage inequality:
    /// `κ̂ V + [w−ŵ; C2(x−x̂)]ᵀ X̄ [w−ŵ; C2(x−x̂)] + ψ`, the bound on
    /// `E[V(x', x̂')]`.
    pub fn next_value_bound(
        &self,
        sys: &LinearSubsystem,
        nu: &[f64],
        x: &[f64],
        x_hat: &[f64],
        w: &[f64],
        w_hat: &[f64],
    ) -> Result<f64> {
        let supply = self.supply.at(sys, self.pi, nu)?;
        let dw = DVector::from_iterator(w.len(), w.iter().zip(w_hat).map(|(a, b)| a - b));
        let dy = sys.internal_output(x) - sys.internal_output(x_hat);
        Ok(self.kappa_hat * self.value(x, x_hat) + supply.evaluate(&dw, &dy) + self.psi)
    }

    pub fn supply_at(&self, sys: &LinearSubsystem, nu: &[f64]) -> Result<SupplyRate> {
        self.supply.at(sys, self.pi, nu)
    }
}

/// Checks the matrix inequality and derives `ψ` and `α` for grid resolution `delta`.
pub fn certify(sys: &LinearSubsystem, params: &CertificateParams, delta: f64) -> Result<StorageCertificate> {
    let lmi = check_storage_matrix_inequality(sys, params)?;
    let psi = storage_offset(&params.mtilde, params.pi, delta)?;
    let alpha_coeff = alpha_coefficient(&params.mtilde, sys.c1())?;
    let supply_at_vertices = lmi
        .vertices
        .iter()
        .map(|v| Ok((v.nu.clone(), params.supply.at(sys, params.pi, &v.nu)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StorageCertificate {
        mtilde: params.mtilde.clone(),
        k: params.k.clone(),
        kappa_hat: params.kappa_hat,
        pi: params.pi,
        supply: params.supply.clone(),
        supply_at_vertices,
        delta,
        psi,
        alpha_coeff,
        lmi,
    })
}

/// Coarse search over `(κ̂, π)` with `M̃ = 1`, `K = 0` and the room
/// template; returns the feasible pairs with their margins.
pub fn search_room_certificates(
    sys: &LinearSubsystem,
    eta: f64,
    kappas: &[f64],
    pis: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::new();
    for &kappa in kappas {
        for &pi in pis {
            let r = check_storage_matrix_inequality(sys, &CertificateParams::room(kappa, pi, eta))?;
            if r.pass {
                out.push((kappa, pi, r.state_block_margin));
            }
        }
    }
    Ok(out)
}
