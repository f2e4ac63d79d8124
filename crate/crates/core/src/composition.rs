//! Network-level compositionality conditions and aggregation of
//! per-subsystem storage certificates into a simulation function for the
//! interconnection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certificate::{StorageCertificate, SupplyRate};
use crate::error::{dim_check, invalid, Error, Result};
use crate::grid::Grid;
use crate::linalg::{asymmetry, block_diag, lambda_max, symmetrize, PSD_TOL};
use crate::model::{IntervalBox, InterconnectionSpec};

/// Tolerance of the matching condition `GMH = ĜM̂`.
pub const MATCHING_TOL: f64 = 1e-12;
/// Largest tuple count enumerated by the inclusion check.
pub const MAX_INCLUSION_TUPLES: u128 = 10_000_000;
/// Largest number of per-subsystem vertex combinations enumerated by
/// [`network_lmi_over_inputs`].
pub const MAX_VERTEX_COMBINATIONS: u128 = 1 << 16;

/// Network simulation-function parameters for a linear-path certificate
/// family: `κ(r) = κ̂ r`, `α(s) = c s²`, `ρ_ext ≡ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationFunctionParams {
    pub kappa_hat: f64,
    pub psi_hat: f64,
    pub alpha_coeff: f64,
    pub mu: Vec<f64>,
}

impl SimulationFunctionParams {
    pub fn new(kappa_hat: f64, psi_hat: f64, alpha_coeff: f64, mu: Vec<f64>) -> Result<Self> {
        if !(kappa_hat > 0.0 && kappa_hat < 1.0) {
            return Err(invalid("kappa_hat", format!("must lie in (0,1), got {kappa_hat}")));
        }
        if !(psi_hat >= 0.0) || !psi_hat.is_finite() {
            return Err(invalid("psi_hat", format!("must be non-negative, got {psi_hat}")));
        }
        if !(alpha_coeff > 0.0) || !alpha_coeff.is_finite() {
            return Err(invalid("alpha_coeff", format!("must be positive, got {alpha_coeff}")));
        }
        Ok(Self {
            kappa_hat,
            psi_hat,
            alpha_coeff,
            mu,
        })
    }

    pub fn alpha(&self, s: f64) -> f64 {
        self.alpha_coeff * s * s
    }
}

/// Builds `X_cmp`: the `X¹¹` blocks weighted by `μ` on the upper-left block
/// diagonal, `X²²` on the lower-right one and the off-diagonal blocks
/// arranged conformally.
pub fn assemble_xcmp(supplies: &[SupplyRate], mu: &[f64]) -> Result<DMatrix<f64>> {
    dim_check("weights", supplies.len(), mu.len())?;
    if supplies.is_empty() {
        return Err(invalid("supplies", "at least one subsystem is required"));
    }
    let p: usize = supplies.iter().map(SupplyRate::internal_dim).sum();
    let q: usize = supplies.iter().map(SupplyRate::output_dim).sum();
    let mut x = DMatrix::zeros(p + q, p + q);
    let (mut r1, mut r2) = (0, p);
    for (s, &m) in supplies.iter().zip(mu) {
        let (pi, qi) = (s.internal_dim(), s.output_dim());
        if s.x12.shape() != (pi, qi) || s.x21.shape() != (qi, pi) {
            return Err(Error::InconsistentSupply("off-diagonal supply block has the wrong shape".into()));
        }
        x.view_mut((r1, r1), (pi, pi)).copy_from(&(&s.x11 * m));
        x.view_mut((r1, r2), (pi, qi)).copy_from(&(&s.x12 * m));
        x.view_mut((r2, r1), (qi, pi)).copy_from(&(&s.x21 * m));
        x.view_mut((r2, r2), (qi, qi)).copy_from(&(&s.x22 * m));
        r1 += pi;
        r2 += qi;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiConditionReport {
    pub pass: bool,
    pub lambda_max: f64,
}

/// `λ_max([GM; I]ᵀ X_cmp [GM; I])`, passing iff it is at most 1e-10.
pub fn check_lmi_condition(m: &DMatrix<f64>, g: &DMatrix<f64>, xcmp: &DMatrix<f64>) -> Result<LmiConditionReport> {
    let q = m.ncols();
    dim_check("G columns", m.nrows(), g.ncols())?;
    let gm = g * m;
    let p = gm.nrows();
    dim_check("X_cmp rows", p + q, xcmp.nrows())?;
    dim_check("X_cmp columns", p + q, xcmp.ncols())?;
    let mut stacked = DMatrix::zeros(p + q, q);
    stacked.view_mut((0, 0), (p, q)).copy_from(&gm);
    stacked.view_mut((p, 0), (q, q)).fill_with_identity();
    let prod = symmetrize(&(stacked.transpose() * xcmp * &stacked));
    let lm = lambda_max(&prod);
    Ok(LmiConditionReport {
        pass: lm <= PSD_TOL,
        lambda_max: lm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub pass: bool,
    /// `max |GMH − ĜM̂|`, infinite when the shapes disagree.
    pub max_abs_diff: f64,
}

pub fn check_matching_condition(
    g: &DMatrix<f64>,
    m: &DMatrix<f64>,
    h: &DMatrix<f64>,
    g_hat: &DMatrix<f64>,
    m_hat: &DMatrix<f64>,
) -> MatchingReport {
    let compatible = g.ncols() == m.nrows() && m.ncols() == h.nrows() && g_hat.ncols() == m_hat.nrows();
    if !compatible {
        return MatchingReport {
            pass: false,
            max_abs_diff: f64::INFINITY,
        };
    }
    let lhs = g * m * h;
    let rhs = g_hat * m_hat;
    if lhs.shape() != rhs.shape() {
        return MatchingReport {
            pass: false,
            max_abs_diff: f64::INFINITY,
        };
    }
    let d = (lhs - rhs).amax();
    MatchingReport {
        pass: d <= MATCHING_TOL,
        max_abs_diff: d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InclusionMode {
    /// Internal input sets are generated as `M̂ ∏ Ŷ₂ᵢ`.
    Construction,
    /// Every image of a tuple of abstract internal outputs is checked.
    Enumerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub pass: bool,
    pub mode: InclusionMode,
    pub tuples_checked: u128,
    /// First violating `(subsystem, image point)` found.
    pub violation: Option<(usize, Vec<f64>)>,
}

impl InclusionReport {
    pub fn by_construction() -> Self {
        Self {
            pass: true,
            mode: InclusionMode::Construction,
            tuples_checked: 0,
            violation: None,
        }
    }
}

/// Whether `point` coincides with a representative of `grid` up to a small
/// fraction of the cell width.
pub fn is_grid_point(grid: &Grid, point: &[f64]) -> bool {
    if point.len() != grid.dim() {
        return false;
    }
    (0..grid.dim()).all(|a| {
        let x = point[a];
        let lo = grid.bounds().lo()[a];
        let hi = grid.bounds().hi()[a];
        if !(x >= lo && x <= hi) {
            return false;
        }
        let j = grid.cell_of_axis(a, x);
        (x - grid.center(a, j)).abs() <= 1e-9 * grid.widths()[a].max(1e-300) + 1e-12 * x.abs()
    })
}

/// Checks `M̂ ∏ Ŷ₂ᵢ ⊆ ∏ Ŵᵢ` by enumeration. Each internal input only depends
/// on the outputs in the support of its rows of `M̂`, so only those
/// sub-tuples are enumerated; the guard applies to their total count.
pub fn check_internal_inclusion(
    m_hat: &DMatrix<f64>,
    outputs: &[Vec<Vec<f64>>],
    internal_grids: &[Grid],
) -> Result<InclusionReport> {
    let q_dims: Vec<usize> = outputs
        .iter()
        .map(|set| set.first().map_or(0, Vec::len))
        .collect();
    if outputs.iter().any(Vec::is_empty) {
        return Err(invalid("outputs", "every abstract internal output set must be non-empty"));
    }
    let p_dims: Vec<usize> = internal_grids.iter().map(Grid::dim).collect();
    dim_check("M̂ rows", p_dims.iter().sum(), m_hat.nrows())?;
    dim_check("M̂ columns", q_dims.iter().sum(), m_hat.ncols())?;
    let col_owner: Vec<usize> = q_dims
        .iter()
        .enumerate()
        .flat_map(|(j, &q)| std::iter::repeat_n(j, q))
        .collect();
    let col_offset: Vec<usize> = q_dims
        .iter()
        .scan(0, |acc, &q| {
            let o = *acc;
            *acc += q;
            Some(o)
        })
        .collect();

    let mut plan = Vec::new();
    let mut total: u128 = 0;
    let mut row = 0;
    for (i, &p) in p_dims.iter().enumerate() {
        let mut support: Vec<usize> = (row..row + p)
            .flat_map(|r| (0..m_hat.ncols()).filter(move |&c| m_hat[(r, c)] != 0.0))
            .map(|c| col_owner[c])
            .collect();
        support.sort_unstable();
        support.dedup();
        let count = support
            .iter()
            .map(|&j| outputs[j].len() as u128)
            .try_fold(1u128, |acc, n| acc.checked_mul(n))
            .unwrap_or(u128::MAX);
        total = total.saturating_add(count);
        plan.push((i, row, p, support));
        row += p;
    }
    if total > MAX_INCLUSION_TUPLES {
        return Err(Error::TooManyTuples {
            tuples: total,
            limit: MAX_INCLUSION_TUPLES,
        });
    }

    for (i, row, p, support) in plan {
        let mut idx = vec![0usize; support.len()];
        loop {
            let mut image = vec![0.0; p];
            for (r, img) in image.iter_mut().enumerate() {
                for (s, &j) in support.iter().enumerate() {
                    let y = &outputs[j][idx[s]];
                    for (c, yc) in y.iter().enumerate() {
                        *img += m_hat[(row + r, col_offset[j] + c)] * yc;
                    }
                }
            }
            if !is_grid_point(&internal_grids[i], &image) {
                return Ok(InclusionReport {
                    pass: false,
                    mode: InclusionMode::Enumerated,
                    tuples_checked: total,
                    violation: Some((i, image)),
                });
            }
            // odometer over the support
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] < outputs[support[k]].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
    }
    Ok(InclusionReport {
        pass: true,
        mode: InclusionMode::Enumerated,
        tuples_checked: total,
        violation: None,
    })
}

/// Abstract internal outputs `{C2 x̂}` of a subsystem with state grid `grid`.
pub fn abstract_outputs(c2: &DMatrix<f64>, grid: &Grid) -> Vec<Vec<f64>> {
    grid.representatives()
        .map(|x| (c2 * nalgebra::DVector::from_vec(x)).iter().copied().collect())
        .collect()
}

/// For unit-selector `C2ⱼ`, the grid axis each internal output reads.
fn selected_axis(c2: &DMatrix<f64>, row: usize) -> Result<usize> {
    let nz: Vec<usize> = (0..c2.ncols()).filter(|&c| c2[(row, c)] != 0.0).collect();
    match nz.as_slice() {
        [c] if c2[(row, *c)] == 1.0 => Ok(*c),
        _ => Err(Error::Unsupported(
            "construction mode needs each internal output to select one state coordinate".into(),
        )),
    }
}

/// Internal-input grids `Ŵᵢ` generated as `M̂ ∏ Ŷ₂ⱼ`.
///
/// Needs binary `M̂`, unit-selector `C2ⱼ` and, per internal-input
/// coordinate, equal cell widths on the summed axes. The sum of `k` uniform
/// center sets with width `h` is again a uniform center set with width `h`,
/// so the result is an ordinary [`Grid`] whose representatives are exactly
/// the attainable images.
pub fn construct_internal_grids(spec: &InterconnectionSpec, m_hat: &DMatrix<f64>, state_grids: &[Grid]) -> Result<Vec<Grid>> {
    let subs = spec.subsystems();
    dim_check("state grids", subs.len(), state_grids.len())?;
    let q_dims = spec.internal_output_dims();
    let p_dims = spec.internal_dims();
    dim_check("M̂ rows", p_dims.iter().sum(), m_hat.nrows())?;
    dim_check("M̂ columns", q_dims.iter().sum(), m_hat.ncols())?;
    if m_hat.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Unsupported("construction mode needs a binary M̂".into()));
    }
    // (owner subsystem, grid axis) of each stacked output column
    let mut columns = Vec::new();
    for (j, sys) in subs.iter().enumerate() {
        for r in 0..sys.internal_output_dim() {
            columns.push((j, selected_axis(sys.c2(), r)?));
        }
    }
    let mut grids = Vec::with_capacity(subs.len());
    let mut row = 0;
    for &p in &p_dims {
        let mut lo = Vec::with_capacity(p);
        let mut hi = Vec::with_capacity(p);
        let mut cells = Vec::with_capacity(p);
        for r in row..row + p {
            let mut width: Option<f64> = None;
            let mut first_center = 0.0;
            let mut steps = 0usize;
            for (c, &(j, axis)) in columns.iter().enumerate() {
                if m_hat[(r, c)] == 0.0 {
                    continue;
                }
                let g = &state_grids[j];
                let h = g.widths()[axis];
                match width {
                    None => width = Some(h),
                    Some(w) if (w - h).abs() > 1e-12 * w => {
                        return Err(Error::Unsupported(
                            "construction mode needs equal cell widths on the coupled axes".into(),
                        ))
                    }
                    _ => {}
                }
                first_center += g.center(axis, 0);
                steps += g.cells_per_dim()[axis] - 1;
            }
            let h = width.ok_or_else(|| Error::Unsupported("internal input with an empty row of M̂".into()))?;
            let n = steps + 1;
            let l = first_center - 0.5 * h;
            lo.push(l);
            hi.push(l + n as f64 * h);
            cells.push(n);
        }
        grids.push(Grid::partition_box(IntervalBox::new(lo, hi)?, cells)?);
        row += p;
    }
    Ok(grids)
}

/// Aggregates linear-path certificates into network parameters:
/// `κ̂ = minᵢ(1 − κ̂ᵢ)`, `ψ̂ = Σ μᵢψᵢ`, `c = minᵢ μᵢcᵢ`.
pub fn aggregate_simulation_function(certs: &[StorageCertificate], mu: &[f64]) -> Result<SimulationFunctionParams> {
    dim_check("weights", certs.len(), mu.len())?;
    if certs.is_empty() {
        return Err(invalid("certs", "at least one certificate is required"));
    }
    if mu.iter().any(|m| !(*m > 0.0)) {
        return Err(invalid("mu", "weights must be positive"));
    }
    let kappa = certs.iter().map(|c| 1.0 - c.kappa_hat).fold(f64::INFINITY, f64::min);
    let psi = certs.iter().zip(mu).map(|(c, m)| m * c.psi).sum();
    let alpha = certs
        .iter()
        .zip(mu)
        .map(|(c, m)| m * c.alpha_coeff)
        .fold(f64::INFINITY, f64::min);
    SimulationFunctionParams::new(kappa, psi, alpha, mu.to_vec())
}

/// `4η²(1+π) + 4ηλ − 3.38η(1+π)`; negative values guarantee the network
/// matrix inequality for the symmetric ring of rooms, whatever its size.
pub fn gershgorin_margin(eta: f64, pi: f64, lambda: f64) -> f64 {
    4.0 * eta * eta * (1.0 + pi) + 4.0 * eta * lambda - 3.38 * eta * (1.0 + pi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLmiPoint {
    /// Input vertex index used by each subsystem.
    pub vertex: Vec<usize>,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLmiReport {
    pub pass: bool,
    pub worst_lambda_max: f64,
    /// Whether every combination of per-subsystem input vertices was
    /// checked, as opposed to the common vertices only.
    pub exhaustive: bool,
    pub points: Vec<NetworkLmiPoint>,
}

/// Evaluates the network matrix inequality over input vertices. The
/// supply rates are affine in the inputs, so the largest eigenvalue is
/// convex in them and vertex combinations suffice. All combinations are
/// enumerated when there are at most [`MAX_VERTEX_COMBINATIONS`]; otherwise
/// only the common vertices (every subsystem at vertex `v`) are checked.
pub fn network_lmi_over_inputs(
    spec: &InterconnectionSpec,
    certs: &[StorageCertificate],
    g: &DMatrix<f64>,
) -> Result<NetworkLmiReport> {
    let subs = spec.subsystems();
    dim_check("certificates", subs.len(), certs.len())?;
    let vertices: Vec<Vec<Vec<f64>>> = subs.iter().map(|s| s.input_box().vertices()).collect();
    let combos = vertices
        .iter()
        .map(|v| v.len() as u128)
        .try_fold(1u128, |acc, n| acc.checked_mul(n))
        .unwrap_or(u128::MAX);
    let exhaustive = combos <= MAX_VERTEX_COMBINATIONS;

    let eval = |choice: &[usize]| -> Result<f64> {
        let supplies = subs
            .iter()
            .zip(certs)
            .zip(choice)
            .zip(&vertices)
            .map(|(((s, c), &v), vs)| c.supply_at(s, &vs[v]))
            .collect::<Result<Vec<_>>>()?;
        let x = assemble_xcmp(&supplies, spec.mu())?;
        Ok(check_lmi_condition(spec.coupling(), g, &x)?.lambda_max)
    };

    let mut points = Vec::new();
    if exhaustive {
        let mut idx = vec![0usize; subs.len()];
        loop {
            points.push(NetworkLmiPoint {
                lambda_max: eval(&idx)?,
                vertex: idx.clone(),
            });
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] < vertices[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
    } else {
        let common = vertices.iter().map(Vec::len).min().unwrap_or(0);
        for v in 0..common {
            let idx = vec![v; subs.len()];
            points.push(NetworkLmiPoint {
                lambda_max: eval(&idx)?,
                vertex: idx,
            });
        }
    }
    let worst = points.iter().map(|p| p.lambda_max).fold(f64::NEG_INFINITY, f64::max);
    Ok(NetworkLmiReport {
        pass: worst <= PSD_TOL,
        worst_lambda_max: worst,
        exhaustive,
        points,
    })
}

/// `diag(G₁, …, G_N)` of identities sized to the internal inputs.
pub fn identity_gains(spec: &InterconnectionSpec) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = spec.internal_dims().iter().map(|&p| DMatrix::identity(p, p)).collect();
    let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
    block_diag(&refs)
}

/// Rejects `X_cmp` that is not symmetric; used by callers that build it by hand.
pub fn ensure_symmetric(x: &DMatrix<f64>) -> Result<()> {
    let skew = asymmetry(x);
    if skew > 1e-12 * (1.0 + x.amax()) {
        return Err(Error::InconsistentSupply(format!("X_cmp asymmetry {skew:e}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::{certify, CertificateParams};
    use crate::linalg::sym_eigenvalues;
    use crate::model::{circulant_ring, room_network, RoomParams};
    use proptest::prelude::*;

    fn room_xcmp(n: usize, eta: f64, pi: f64, lambda: f64) -> DMatrix<f64> {
        let s = SupplyRate::scalar(eta * eta * (1.0 + pi), eta * lambda, -3.38 * eta * (1.0 + pi));
        assemble_xcmp(&vec![s; n], &vec![1.0; n]).unwrap()
    }

    #[test]
    fn single_subsystem_xcmp_is_its_supply() {
        let s = SupplyRate::scalar(0.3, -0.2, -1.0);
        assert_eq!(assemble_xcmp(std::slice::from_ref(&s), &[1.0]).unwrap(), s.full());
    }

    #[test]
    fn two_scalar_blocks() {
        let s = SupplyRate::scalar(1.0, 2.0, 3.0);
        let x = assemble_xcmp(&[s.clone(), s], &[1.0, 1.0]).unwrap();
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 2.0, 0.0, //
                0.0, 1.0, 0.0, 2.0, //
                2.0, 0.0, 3.0, 0.0, //
                0.0, 2.0, 0.0, 3.0,
            ],
        );
        assert_eq!(x, expect);
    }

    #[test]
    fn xcmp_matches_permutation_construction() {
        // stack block-diag(X̄ᵢ) in subsystem order, then permute into the
        // (all internal inputs, all outputs) ordering
        let supplies: Vec<SupplyRate> = (0..3)
            .map(|i| SupplyRate::scalar(0.01 * (i + 1) as f64, 0.07 + 0.001 * i as f64, -0.35))
            .collect();
        let mu = [1.0, 2.0, 0.5];
        let weighted: Vec<DMatrix<f64>> = supplies.iter().zip(mu).map(|(s, m)| s.full() * m).collect();
        let refs: Vec<&DMatrix<f64>> = weighted.iter().collect();
        let bd = block_diag(&refs);
        let perm = [0, 2, 4, 1, 3, 5];
        let oracle = DMatrix::from_fn(6, 6, |r, c| bd[(perm[r], perm[c])]);
        assert_eq!(assemble_xcmp(&supplies, &mu).unwrap(), oracle);
    }

    #[test]
    fn xcmp_rejects_mismatched_weights() {
        let s = SupplyRate::scalar(1.0, 0.0, -1.0);
        assert!(assemble_xcmp(&[s], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn negative_definite_supply_passes() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, -3.0, 1.0]);
        let x = -DMatrix::identity(4, 4);
        let r = check_lmi_condition(&m, &DMatrix::identity(2, 2), &x).unwrap();
        assert!(r.pass);
        assert!(r.lambda_max <= -1.0 + 1e-12);
    }

    #[test]
    fn ring_200_lmi_matches_gershgorin() {
        let (eta, pi, lambda) = (0.1, 0.98, 0.4);
        let x = room_xcmp(200, eta, pi, lambda);
        let r = check_lmi_condition(&circulant_ring(200), &DMatrix::identity(200, 200), &x).unwrap();
        let g = gershgorin_margin(eta, pi, lambda);
        assert!((g + 0.43004).abs() < 1e-12);
        assert!(r.pass);
        // the circulant eigenvalue 2 attains the Gershgorin estimate
        assert!((r.lambda_max - g).abs() < 1e-9, "{} vs {g}", r.lambda_max);
    }

    #[test]
    fn ring_15_fails_at_zero_input() {
        let x = room_xcmp(15, 0.1, 0.04, 0.778);
        let r = check_lmi_condition(&circulant_ring(15), &DMatrix::identity(15, 15), &x).unwrap();
        assert!(!r.pass);
        assert!((r.lambda_max - 0.00128).abs() < 1e-9);
        assert!((gershgorin_margin(0.1, 0.04, 0.778) - 0.00128).abs() < 1e-12);
        assert!((gershgorin_margin(0.1, 0.04, 0.748) + 0.01072).abs() < 1e-12);
        assert_eq!(gershgorin_margin(0.0, 0.5, 0.7), 0.0);
    }

    #[test]
    fn lmi_dimension_mismatch() {
        let x = room_xcmp(3, 0.1, 0.04, 0.7);
        assert!(check_lmi_condition(&circulant_ring(4), &DMatrix::identity(4, 4), &x).is_err());
    }

    #[test]
    fn matching_condition_cases() {
        let m = circulant_ring(4);
        let i = DMatrix::identity(4, 4);
        assert!(check_matching_condition(&i, &m, &i, &i, &m).pass);
        assert!(!check_matching_condition(&i, &m, &i, &i, &(&m * 2.0)).pass);
        let p = DMatrix::from_fn(4, 4, |r, c| if c == (r + 1) % 4 { 1.0 } else { 0.0 });
        let permuted = &p * DMatrix::from_row_slice(4, 4, &[0., 1., 0., 0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0., 1.]);
        assert!(!check_matching_condition(&i, &m, &i, &i, &permuted).pass);
        assert!(!check_matching_condition(&i, &m, &i, &DMatrix::identity(3, 3), &m).pass);
    }

    fn small_grid(lo: f64, hi: f64, n: usize) -> Grid {
        Grid::partition_box(IntervalBox::interval(lo, hi).unwrap(), vec![n]).unwrap()
    }

    #[test]
    fn identity_inclusion() {
        let g = small_grid(0.0, 1.0, 4);
        let outs = vec![abstract_outputs(&DMatrix::identity(1, 1), &g); 2];
        let r = check_internal_inclusion(&DMatrix::identity(2, 2), &outs, &[g.clone(), g.clone()]).unwrap();
        assert!(r.pass);
        assert_eq!(r.tuples_checked, 8);
        let strict = small_grid(0.0, 0.5, 2);
        let r = check_internal_inclusion(&DMatrix::identity(2, 2), &outs, &[g, strict]).unwrap();
        assert!(!r.pass);
        assert_eq!(r.violation.as_ref().unwrap().0, 1);
    }

    #[test]
    fn constructed_grids_contain_every_image() {
        let params = RoomParams::rooms15();
        let spec = room_network(3, &params).unwrap();
        let sg: Vec<Grid> = (0..3).map(|_| small_grid(19.0, 21.0, 40)).collect();
        let wg = construct_internal_grids(&spec, spec.coupling(), &sg).unwrap();
        assert_eq!(wg[0].len(), 79);
        let outs: Vec<_> = sg.iter().map(|g| abstract_outputs(&DMatrix::identity(1, 1), g)).collect();
        let r = check_internal_inclusion(spec.coupling(), &outs, &wg).unwrap();
        assert!(r.pass);
        assert_eq!(r.tuples_checked, 3 * 1600);
        // and every representative is attained
        for g in &wg {
            for x in g.representatives() {
                let t = (x[0] - 2.0 * 19.025) / 0.05;
                assert!((t - t.round()).abs() < 1e-9 && t >= -1e-9 && t <= 78.0 + 1e-9);
            }
        }
    }

    #[test]
    fn fine_resolution_internal_grid() {
        let spec = room_network(15, &RoomParams::rooms15()).unwrap();
        let sg: Vec<Grid> = (0..15).map(|_| small_grid(19.0, 21.0, 400)).collect();
        let wg = construct_internal_grids(&spec, spec.coupling(), &sg).unwrap();
        assert_eq!(wg[0].len(), 799);
        assert!((wg[0].bounds().lo()[0] - 38.0025).abs() < 1e-9);
        assert!((wg[0].bounds().hi()[0] - 41.9975).abs() < 1e-9);
        assert!((wg[0].center(0, 0) - 38.005).abs() < 1e-9);
        assert!(matches!(
            construct_internal_grids(&spec, &(spec.coupling() * 0.5), &sg),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn inclusion_guard() {
        let g = small_grid(0.0, 1.0, 400);
        let outs = vec![abstract_outputs(&DMatrix::identity(1, 1), &g); 3];
        let ones = DMatrix::from_element(3, 3, 1.0);
        let wide = small_grid(0.0, 3.0, 1200);
        assert!(matches!(
            check_internal_inclusion(&ones, &outs, &[wide.clone(), wide.clone(), wide]),
            Err(Error::TooManyTuples { .. })
        ));
    }

    fn room_certs(n: usize) -> (InterconnectionSpec, Vec<StorageCertificate>) {
        let params = RoomParams::rooms15();
        let spec = room_network(n, &params).unwrap();
        let certs = spec
            .subsystems()
            .iter()
            .map(|s| certify(s, &CertificateParams::room(0.99, 0.04, params.eta), 0.005).unwrap())
            .collect();
        (spec, certs)
    }

    #[test]
    fn aggregate_identical_rooms() {
        let (_, certs) = room_certs(15);
        let p = aggregate_simulation_function(&certs, &[1.0; 15]).unwrap();
        assert!((p.kappa_hat - 0.01).abs() < 1e-15);
        assert!((p.psi_hat - 0.019125).abs() < 1e-14);
        assert_eq!(p.alpha_coeff, 1.0);
        let single = aggregate_simulation_function(&certs[..1], &[1.0]).unwrap();
        assert!((single.psi_hat - certs[0].psi).abs() < 1e-18);
        assert!((single.kappa_hat - (1.0 - certs[0].kappa_hat)).abs() < 1e-15);
    }

    #[test]
    fn heterogeneous_kappa_takes_slowest() {
        let (_, mut certs) = room_certs(3);
        certs[1].kappa_hat = 0.95;
        let p = aggregate_simulation_function(&certs, &[1.0, 1.0, 1.0]).unwrap();
        assert!((p.kappa_hat - 0.01).abs() < 1e-15);
        let scaled = aggregate_simulation_function(&certs, &[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(scaled.kappa_hat, p.kappa_hat);
        assert!((scaled.psi_hat - 3.0 * p.psi_hat).abs() < 1e-15);
    }

    #[test]
    fn network_check_over_vertices() {
        let (spec, certs) = room_certs(3);
        let r = network_lmi_over_inputs(&spec, &certs, &identity_gains(&spec)).unwrap();
        assert!(r.exhaustive);
        assert_eq!(r.points.len(), 8);
        // all rooms at ν = 0 is the worst case; three rooms fail there
        let all_zero = r.points.iter().find(|p| p.vertex == vec![0, 0, 0]).unwrap();
        assert_eq!(all_zero.lambda_max, r.worst_lambda_max);
        assert!(!r.pass);
    }

    #[test]
    fn network_check_200_rooms() {
        let params = RoomParams::rooms200();
        let spec = room_network(200, &params).unwrap();
        let cert = certify(&spec.subsystems()[0], &CertificateParams::room(0.99, 0.98, params.eta), 0.005).unwrap();
        let certs = vec![cert; 200];
        let r = network_lmi_over_inputs(&spec, &certs, &identity_gains(&spec)).unwrap();
        assert!(!r.exhaustive);
        assert!(r.pass);
        assert!((r.worst_lambda_max + 0.43004).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn gershgorin_is_sufficient(
            n in 3usize..30,
            eta in 0.01f64..0.2,
            pi in 0.01f64..1.0,
            lambda in 0.0f64..0.9,
        ) {
            let g = gershgorin_margin(eta, pi, lambda);
            prop_assume!(g < 0.0);
            let x = room_xcmp(n, eta, pi, lambda);
            let r = check_lmi_condition(&circulant_ring(n), &DMatrix::identity(n, n), &x).unwrap();
            prop_assert!(r.pass, "n {} margin {} lmi {}", n, g, r.lambda_max);
        }

        #[test]
        fn relabeling_conjugates_xcmp(shift in 1usize..5, vals in prop::collection::vec(-1.0f64..1.0, 15)) {
            let n = 5;
            let supplies: Vec<SupplyRate> = (0..n)
                .map(|i| SupplyRate::scalar(vals[3 * i], vals[3 * i + 1], vals[3 * i + 2] - 2.0))
                .collect();
            let mu = vec![1.0; n];
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let permuted: Vec<SupplyRate> = perm.iter().map(|&i| supplies[i].clone()).collect();
            let x = assemble_xcmp(&supplies, &mu).unwrap();
            let xp = assemble_xcmp(&permuted, &mu).unwrap();
            let full: Vec<usize> = perm.iter().copied().chain(perm.iter().map(|i| i + n)).collect();
            let conj = DMatrix::from_fn(2 * n, 2 * n, |r, c| x[(full[r], full[c])]);
            prop_assert_eq!(&xp, &conj);
            // LMI margin unchanged under the matching relabeling of M
            let m = DMatrix::from_fn(n, n, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.1);
            let mp = DMatrix::from_fn(n, n, |r, c| m[(perm[r], perm[c])]);
            let i = DMatrix::identity(n, n);
            let a = check_lmi_condition(&m, &i, &x).unwrap().lambda_max;
            let b = check_lmi_condition(&mp, &i, &xp).unwrap().lambda_max;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn psi_is_linear_in_each_weight(w in 0.1f64..5.0, k in 0usize..3) {
            let (_, certs) = room_certs(3);
            let base = aggregate_simulation_function(&certs, &[1.0, 1.0, 1.0]).unwrap();
            let mut mu = vec![1.0; 3];
            mu[k] = w;
            let p = aggregate_simulation_function(&certs, &mu).unwrap();
            prop_assert!((p.psi_hat - (base.psi_hat + (w - 1.0) * certs[k].psi)).abs() < 1e-15);
        }

        #[test]
        fn alpha_closed_form_matches_variational(
            m1 in 0.2f64..3.0, m2 in 0.2f64..3.0, mu1 in 0.2f64..3.0, mu2 in 0.2f64..3.0,
        ) {
            // c = inf over e ≠ 0 of (μ₁m₁e₁² + μ₂m₂e₂²) / (e₁² + e₂²)
            let (_, mut certs) = room_certs(3);
            certs.truncate(2);
            certs[0].alpha_coeff = m1;
            certs[1].alpha_coeff = m2;
            let p = aggregate_simulation_function(&certs, &[mu1, mu2]).unwrap();
            let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![mu1 * m1, mu2 * m2]));
            let variational = sym_eigenvalues(&h)[0];
            prop_assert!((p.alpha_coeff - variational).abs() < 1e-12);
        }
    }
}
