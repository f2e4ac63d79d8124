//! Pipeline configuration file (TOML).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certificate::{CertificateParams, SupplyRate, SupplyTemplate};
use crate::composition::InclusionMode;
use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::mdp::StorageMode;
use crate::model::{room_network, IntervalBox, InterconnectionSpec, LinearSubsystem, RoomParams};
use crate::sim::ControlSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub grids: GridConfig,
    pub certificate: CertificateConfig,
    #[serde(default)]
    pub composition: CompositionConfig,
    pub bound: BoundConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub audit: Option<AuditConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkConfig {
    /// Ring of identical heated rooms.
    Rooms {
        n: usize,
        #[serde(default)]
        preset: RoomPreset,
        #[serde(default)]
        params: RoomOverrides,
        #[serde(default)]
        mu: Option<Vec<f64>>,
    },
    Inline {
        subsystems: Vec<SubsystemConfig>,
        coupling: Vec<Vec<f64>>,
        #[serde(default)]
        mu: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomPreset {
    #[default]
    Rooms15,
    Rooms200,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomOverrides {
    pub eta: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub heater_temp: Option<f64>,
    pub outside_temp: Option<f64>,
    pub sigma: Option<f64>,
    pub temp_lo: Option<f64>,
    pub temp_hi: Option<f64>,
    pub input_lo: Option<f64>,
    pub input_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxConfig {
    fn build(&self) -> Result<IntervalBox> {
        IntervalBox::new(self.lo.clone(), self.hi.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c1: Vec<Vec<f64>>,
    pub c2: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    #[serde(default)]
    pub drift: Option<Vec<f64>>,
    /// `E_j` in `A(ν) = A + Σ ν_j E_j`.
    #[serde(default)]
    pub input_state_terms: Option<Vec<Vec<Vec<f64>>>>,
    pub state_box: BoxConfig,
    pub input_box: BoxConfig,
    pub internal_box: BoxConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Cells per state axis; alternatively `state_delta`.
    #[serde(default)]
    pub state_cells: Option<Vec<usize>>,
    #[serde(default)]
    pub state_delta: Option<f64>,
    pub input_cells: Vec<usize>,
    /// Internal-input grids: generated from the coupling, or explicit cells.
    #[serde(default)]
    pub internal_cells: Option<Vec<usize>>,
    #[serde(default)]
    pub storage: StorageMode,
    #[serde(default = "default_budget_mib")]
    pub memory_budget_mib: u64,
    /// Rows sampled by the stochasticity audit.
    #[serde(default = "default_audit_rows")]
    pub audit_rows: usize,
}

fn default_budget_mib() -> u64 {
    2048
}

fn default_audit_rows() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SupplyConfig {
    /// Scalar room template; `eta` defaults to the network's.
    Room {
        #[serde(default)]
        eta: Option<f64>,
        #[serde(default = "default_output_gain")]
        output_gain: f64,
    },
    Fixed {
        x11: Vec<Vec<f64>>,
        x12: Vec<Vec<f64>>,
        x21: Vec<Vec<f64>>,
        x22: Vec<Vec<f64>>,
    },
}

fn default_output_gain() -> f64 {
    3.38
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateConfig {
    pub mtilde: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub kappa_hat: f64,
    pub pi: f64,
    pub supply: SupplyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    /// Abstract coupling; defaults to the concrete one.
    #[serde(default)]
    pub m_hat: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_inclusion")]
    pub inclusion: InclusionMode,
    /// Whether a failed matrix inequality fails the stage.
    #[serde(default = "yes")]
    pub strict: bool,
}

fn default_inclusion() -> InclusionMode {
    InclusionMode::Construction
}

fn yes() -> bool {
    true
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            m_hat: None,
            inclusion: InclusionMode::Construction,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub horizon: usize,
    pub epsilons: Vec<f64>,
    /// Initial state, one per subsystem or a single one for all.
    pub x0: Vec<Vec<f64>>,
    /// Confidence level whose ε is reported.
    #[serde(default)]
    pub target: Option<f64>,
    /// Upper end of the ε search for `target`; defaults to the output-box diameter.
    #[serde(default)]
    pub eps_max: Option<f64>,
    /// Overrides of the computed aggregate offset and initial storage.
    #[serde(default)]
    pub psi_hat: Option<f64>,
    #[serde(default)]
    pub v0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Robust,
    Nominal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default)]
    pub mode: ModeName,
    /// Internal-input point fixed in nominal mode (snapped to the grid).
    #[serde(default)]
    pub nominal_internal: Option<Vec<f64>>,
    /// Safe box; defaults to the whole state box.
    #[serde(default)]
    pub safe: Option<BoxConfig>,
    #[serde(default)]
    pub stationary: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            mode: ModeName::Robust,
            nominal_internal: None,
            safe: None,
            stationary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_traj")]
    pub n_traj: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub control: ControlSource,
    /// Trajectories written to the CSV.
    #[serde(default = "default_csv_traj")]
    pub csv_max_traj: usize,
}

fn default_traj() -> usize {
    10_000
}

fn default_csv_traj() -> usize {
    100
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_traj: default_traj(),
            seed: 0,
            control: ControlSource::Coupled,
            csv_max_traj: default_csv_traj(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub points: usize,
    pub noise_draws: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: String,
}

fn default_out() -> String {
    "out".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(invalid(name, "matrix must be non-empty"));
    }
    if rows.iter().any(|r| r.len() != m) {
        return Err(invalid(name, "rows have different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(name, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Range checks that do not need the network built.
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: String| Err(Error::Config(format!("{name}: {reason}")));
        let c = &self.certificate;
        if !(c.kappa_hat > 0.0 && c.kappa_hat < 1.0) {
            return bad("certificate.kappa_hat", format!("must lie in (0,1), got {}", c.kappa_hat));
        }
        if !(c.pi > 0.0) || !c.pi.is_finite() {
            return bad("certificate.pi", format!("must be positive, got {}", c.pi));
        }
        match (&self.grids.state_cells, self.grids.state_delta) {
            (Some(_), Some(_)) => return bad("grids", "give either state_cells or state_delta".into()),
            (None, None) => return bad("grids", "state_cells or state_delta is required".into()),
            (None, Some(d)) if !(d > 0.0) || !d.is_finite() => {
                return bad("grids.state_delta", format!("must be positive, got {d}"))
            }
            (Some(cells), None) if cells.contains(&0) => {
                return bad("grids.state_cells", "cell counts must be positive".into())
            }
            _ => {}
        }
        if self.grids.input_cells.contains(&0) {
            return bad("grids.input_cells", "cell counts must be positive".into());
        }
        if self.bound.horizon == 0 {
            return bad("bound.horizon", "must be at least 1".into());
        }
        if self.bound.epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("bound.epsilons", "must be positive".into());
        }
        if let Some(t) = self.bound.target {
            if !(t > 0.0 && t < 1.0) {
                return bad("bound.target", format!("must lie in (0,1), got {t}"));
            }
        }
        if self.bound.x0.is_empty() {
            return bad("bound.x0", "at least one initial state is required".into());
        }
        if let Some(p) = self.bound.psi_hat {
            if !(p >= 0.0) {
                return bad("bound.psi_hat", "must be non-negative".into());
            }
        }
        if let Some(v) = self.bound.v0 {
            if !(v >= 0.0) {
                return bad("bound.v0", "must be non-negative".into());
            }
        }
        if self.simulation.n_traj == 0 {
            return bad("simulation.n_traj", "must be positive".into());
        }
        if self.synthesis.mode == ModeName::Nominal && self.synthesis.nominal_internal.is_none() {
            return bad("synthesis.nominal_internal", "required in nominal mode".into());
        }
        if let NetworkConfig::Rooms { n, .. } = &self.network {
            if *n < 3 {
                return bad("network.n", format!("a ring needs at least 3 rooms, got {n}"));
            }
        }
        Ok(())
    }

    pub fn room_params(&self) -> Option<RoomParams> {
        match &self.network {
            NetworkConfig::Rooms { preset, params: o, .. } => {
                let mut p = match preset {
                    RoomPreset::Rooms15 => RoomParams::rooms15(),
                    RoomPreset::Rooms200 => RoomParams::rooms200(),
                };
                let set = |dst: &mut f64, v: Option<f64>| {
                    if let Some(v) = v {
                        *dst = v;
                    }
                };
                set(&mut p.eta, o.eta);
                set(&mut p.beta, o.beta);
                set(&mut p.gamma, o.gamma);
                set(&mut p.heater_temp, o.heater_temp);
                set(&mut p.outside_temp, o.outside_temp);
                set(&mut p.sigma, o.sigma);
                set(&mut p.temp_lo, o.temp_lo);
                set(&mut p.temp_hi, o.temp_hi);
                set(&mut p.input_lo, o.input_lo);
                set(&mut p.input_hi, o.input_hi);
                Some(p)
            }
            NetworkConfig::Inline { .. } => None,
        }
    }

    pub fn build_network(&self) -> Result<InterconnectionSpec> {
        match &self.network {
            NetworkConfig::Rooms { n, mu, .. } => {
                let spec = room_network(*n, &self.room_params().expect("rooms"))?;
                match mu {
                    Some(mu) => InterconnectionSpec::new(spec.subsystems().to_vec(), spec.coupling().clone(), mu.clone()),
                    None => Ok(spec),
                }
            }
            NetworkConfig::Inline { subsystems, coupling, mu } => {
                let subs = subsystems
                    .iter()
                    .enumerate()
                    .map(|(i, s)| build_subsystem(s).map_err(|e| Error::Config(format!("network.subsystems[{i}]: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                let n = subs.len();
                InterconnectionSpec::new(subs, matrix("network.coupling", coupling)?, mu.clone().unwrap_or(vec![1.0; n]))
            }
        }
    }

    pub fn m_hat(&self, spec: &InterconnectionSpec) -> Result<DMatrix<f64>> {
        match &self.composition.m_hat {
            Some(rows) => matrix("composition.m_hat", rows),
            None => Ok(spec.coupling().clone()),
        }
    }

    pub fn state_grid(&self, sys: &LinearSubsystem) -> Result<Grid> {
        match (&self.grids.state_cells, self.grids.state_delta) {
            (Some(cells), _) => Grid::partition_box(sys.state_box().clone(), cells.clone()),
            (None, Some(d)) => Grid::with_target_delta(sys.state_box().clone(), d),
            (None, None) => Err(invalid("grids", "no state resolution")),
        }
    }

    pub fn input_grid(&self, sys: &LinearSubsystem) -> Result<Grid> {
        Grid::partition_box(sys.input_box().clone(), self.grids.input_cells.clone())
    }

    pub fn certificate_params(&self) -> Result<CertificateParams> {
        let c = &self.certificate;
        let supply = match &c.supply {
            SupplyConfig::Room { eta, output_gain } => {
                let eta = match (eta, self.room_params()) {
                    (Some(e), _) => *e,
                    (None, Some(p)) => p.eta,
                    (None, None) => return Err(Error::Config("certificate.supply.eta is required for inline networks".into())),
                };
                SupplyTemplate::RoomConduction {
                    eta,
                    output_gain: *output_gain,
                }
            }
            SupplyConfig::Fixed { x11, x12, x21, x22 } => SupplyTemplate::Fixed(SupplyRate::new(
                matrix("x11", x11)?,
                matrix("x12", x12)?,
                matrix("x21", x21)?,
                matrix("x22", x22)?,
            )?),
        };
        Ok(CertificateParams {
            mtilde: matrix("certificate.mtilde", &c.mtilde)?,
            k: matrix("certificate.k", &c.k)?,
            kappa_hat: c.kappa_hat,
            pi: c.pi,
            supply,
        })
    }

    /// Initial states, broadcasting a single entry to every subsystem.
    pub fn initial_states(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        match self.bound.x0.len() {
            1 => Ok(vec![self.bound.x0[0].clone(); n]),
            m if m == n => Ok(self.bound.x0.clone()),
            m => Err(Error::Config(format!("bound.x0 has {m} entries for {n} subsystems"))),
        }
    }
}

fn build_subsystem(s: &SubsystemConfig) -> Result<LinearSubsystem> {
    let mut sys = LinearSubsystem::new(
        matrix("a", &s.a)?,
        matrix("b", &s.b)?,
        matrix("c1", &s.c1)?,
        matrix("c2", &s.c2)?,
        matrix("d", &s.d)?,
        matrix("noise", &s.noise)?,
        s.state_box.build()?,
        s.input_box.build()?,
        s.internal_box.build()?,
    )?;
    if let Some(c) = &s.drift {
        sys = sys.with_drift(DVector::from_vec(c.clone()))?;
    }
    if let Some(terms) = &s.input_state_terms {
        let mats = terms.iter().map(|t| matrix("input_state_terms", t)).collect::<Result<Vec<_>>>()?;
        sys = sys.with_input_state_terms(mats)?;
    }
    Ok(sys)
}
