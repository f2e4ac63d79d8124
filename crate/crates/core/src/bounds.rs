//! Probabilistic closeness bounds between the output trajectories of the
//! concrete network and of its abstraction.

use serde::{Deserialize, Serialize};

use crate::certificate::StorageCertificate;
use crate::composition::SimulationFunctionParams;
use crate::error::{dim_check, invalid, Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundBranch {
    /// `α(ε) ≥ ψ̂/κ̂`
    Large,
    /// `α(ε) < ψ̂/κ̂`
    Small,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    /// Bound clamped to `[0, 1]`.
    pub value: f64,
    pub raw: f64,
    pub clamped: bool,
    pub branch: BoundBranch,
}

fn check_params(params: &SimulationFunctionParams) -> Result<()> {
    if !(params.kappa_hat > 0.0 && params.kappa_hat < 1.0) {
        return Err(invalid("kappa_hat", format!("must lie in (0,1), got {}", params.kappa_hat)));
    }
    if !(params.psi_hat >= 0.0) {
        return Err(invalid("psi_hat", "must be non-negative"));
    }
    if !(params.alpha_coeff > 0.0) {
        return Err(invalid("alpha_coeff", "must be positive"));
    }
    Ok(())
}

fn raw_bound(kappa: f64, psi: f64, alpha: f64, v0: f64, td: u32) -> (f64, BoundBranch) {
    if alpha >= psi / kappa {
        let keep = (1.0 - v0 / alpha) * (1.0 - psi / alpha).powi(td as i32);
        (1.0 - keep, BoundBranch::Large)
    } else {
        let decay = (1.0 - kappa).powi(td as i32);
        (v0 / alpha * decay + psi / (kappa * alpha) * (1.0 - decay), BoundBranch::Small)
    }
}

/// Upper bound on `P{sup_{0≤k≤Td} ‖y(k) − ŷ(k)‖ ≥ ε}` for initial storage `v0`.
pub fn closeness_bound(params: &SimulationFunctionParams, v0: f64, epsilon: f64, td: u32) -> Result<BoundValue> {
    check_params(params)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(invalid("epsilon", format!("must be positive, got {epsilon}")));
    }
    if !(v0 >= 0.0) {
        return Err(invalid("v0", format!("must be non-negative, got {v0}")));
    }
    let alpha = params.alpha(epsilon);
    let (raw, branch) = raw_bound(params.kappa_hat, params.psi_hat, alpha, v0, td);
    let value = raw.clamp(0.0, 1.0);
    Ok(BoundValue {
        value,
        raw,
        clamped: value != raw,
        branch,
    })
}

/// `min(1, V0/α(ε))`, valid only when `ψ̂ = 0`.
pub fn infinite_horizon_bound(params: &SimulationFunctionParams, v0: f64, epsilon: f64) -> Result<f64> {
    check_params(params)?;
    if params.psi_hat != 0.0 {
        return Err(Error::Bound(format!(
            "the infinite-horizon bound needs ψ̂ = 0 (no quantization offset and ρ_ext ≡ 0), got ψ̂ = {}",
            params.psi_hat
        )));
    }
    if !(epsilon > 0.0) || !(v0 >= 0.0) {
        return Err(invalid("epsilon", "ε must be positive and V0 non-negative"));
    }
    Ok((v0 / params.alpha(epsilon)).min(1.0))
}

/// Smallest `ε ∈ (0, eps_max]` with `closeness_bound(ε) ≤ 1 − target`, to a
/// relative precision of 1e-9. The bound is nonincreasing in `ε`.
pub fn epsilon_for_confidence(
    params: &SimulationFunctionParams,
    v0: f64,
    td: u32,
    target: f64,
    eps_max: f64,
) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(invalid("target", format!("must lie in (0,1), got {target}")));
    }
    if !(eps_max > 0.0) || !eps_max.is_finite() {
        return Err(invalid("eps_max", "must be positive"));
    }
    let threshold = 1.0 - target;
    let at = |e: f64| closeness_bound(params, v0, e, td).map(|b| b.value);
    let top = at(eps_max)?;
    if top > threshold {
        return Err(Error::InfeasibleTarget {
            target,
            epsilon: eps_max,
            bound: top,
        });
    }
    let mut lo = eps_max * 1e-12;
    if at(lo)? <= threshold {
        return Ok(lo);
    }
    let mut hi = eps_max;
    while hi - lo > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if at(mid)? <= threshold {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `Σ μᵢ Vᵢ(x0ᵢ, Π(x0ᵢ))`, the initial storage when the abstraction starts
/// from the quantized concrete state.
pub fn initial_storage(certs: &[StorageCertificate], mu: &[f64], x0: &[Vec<f64>], grids: &[Grid]) -> Result<f64> {
    dim_check("weights", certs.len(), mu.len())?;
    dim_check("initial states", certs.len(), x0.len())?;
    dim_check("state grids", certs.len(), grids.len())?;
    let mut total = 0.0;
    for ((c, m), (x, g)) in certs.iter().zip(mu).zip(x0.iter().zip(grids)) {
        let q = g.quantize(x)?;
        total += m * c.value(x, &q.point);
    }
    Ok(total)
}
