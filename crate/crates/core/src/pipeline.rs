//! Stage orchestration for the command-line tool.
//!
//! Stages run against artifacts cached in the output directory. Every
//! artifact's SHA-256 is recorded in `manifest.json` together with a hash of
//! the effective configuration, so a rerun with unchanged inputs is skipped
//! and a stage whose upstream changed is recomputed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{closeness_bound, epsilon_for_confidence, initial_storage, BoundValue};
use crate::certificate::{certify, StorageCertificate, SupplyTemplate};
use crate::composition::{
    aggregate_simulation_function, check_internal_inclusion, check_matching_condition, construct_internal_grids,
    abstract_outputs, gershgorin_margin, identity_gains, InclusionMode, InclusionReport, MatchingReport,
    NetworkLmiReport, SimulationFunctionParams,
};
use crate::config::{ModeName, PipelineConfig};
use crate::error::{Error, Result};
use crate::fmt::{g12, g12_point};
use crate::grid::Grid;
use crate::mdp::{self as mdp_io, abstract_subsystem, validate_stochastic_sampled, AbstractionOptions, FiniteMdp, KernelMode, StochasticAudit};
use crate::model::{validate_interconnection, InterconnectionSpec};
use crate::sim::{empirical_exceedance, empirical_supermartingale_check, simulate_closed_loop, DriftReport, Exceedance, SimulationOptions};
use crate::synthesis::{refine_policy, safety_value_iteration, Controller, Policy, SafeSet, SynthesisMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Abstract,
    Certify,
    Compose,
    Bound,
    Synth,
    Simulate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Abstract,
        Stage::Certify,
        Stage::Compose,
        Stage::Bound,
        Stage::Synth,
        Stage::Simulate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Abstract => "abstract",
            Stage::Certify => "certify",
            Stage::Compose => "compose",
            Stage::Bound => "bound",
            Stage::Synth => "synth",
            Stage::Simulate => "simulate",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Process exit code when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Abstract => 3,
            Stage::Certify => 4,
            Stage::Compose => 5,
            Stage::Bound => 6,
            Stage::Synth => 7,
            Stage::Simulate => 8,
        }
    }
}

/// Exit code for errors raised outside any stage.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub pass: bool,
    pub skipped: bool,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StageRecord {
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    pass: bool,
    lines: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AbstractionArtifact {
    classes: Vec<ClassSummary>,
    well_posed: bool,
    well_posedness_slack: Vec<f64>,
    internal_grids_constructed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassSummary {
    subsystems: Vec<usize>,
    states: usize,
    inputs: usize,
    internals: usize,
    delta: f64,
    stored: bool,
    audit: StochasticAudit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CertificateArtifact {
    classes: Vec<StorageCertificate>,
    drift: Vec<Option<DriftReport>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CompositionArtifact {
    lmi: NetworkLmiReport,
    matching: MatchingReport,
    inclusion: InclusionReport,
    gershgorin: Vec<(f64, f64, f64)>,
    params: SimulationFunctionParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoundArtifact {
    v0: f64,
    psi_hat: f64,
    kappa_hat: f64,
    alpha_coeff: f64,
    horizon: usize,
    bounds: Vec<(f64, BoundValue)>,
    target: Option<f64>,
    epsilon_for_target: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimulationArtifact {
    n_traj: usize,
    horizon: usize,
    seed: u64,
    checks: Vec<(Exceedance, f64, bool)>,
    leave_events: u64,
    sink_events: u64,
    concrete_range: (f64, f64),
}

/// Everything derived from the configuration before any stage runs.
pub struct Pipeline {
    cfg: PipelineConfig,
    cfg_hash: String,
    out: PathBuf,
    spec: InterconnectionSpec,
    m_hat: DMatrix<f64>,
    /// Subsystem → class of identical (subsystem, grids) tuples.
    class_of: Vec<usize>,
    /// Class → member subsystems.
    members: Vec<Vec<usize>>,
    state_grids: Vec<Grid>,
    input_grids: Vec<Grid>,
    internal_grids: Vec<Grid>,
    internal_constructed: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = cfg;
        if let Some(s) = seed {
            cfg.simulation.seed = s;
        }
        if let Some(o) = &out {
            cfg.output.dir = o.to_string_lossy().into_owned();
        }
        let out = PathBuf::from(&cfg.output.dir);
        let cfg_hash = sha256_hex(&serde_json::to_vec(&cfg).map_err(|e| Error::Format(e.to_string()))?);
        let spec = cfg.build_network().map_err(as_config)?;
        let m_hat = cfg.m_hat(&spec).map_err(as_config)?;
        let subs = spec.subsystems();
        let state_grids = subs.iter().map(|s| cfg.state_grid(s)).collect::<Result<Vec<_>>>().map_err(as_config)?;
        let input_grids = subs.iter().map(|s| cfg.input_grid(s)).collect::<Result<Vec<_>>>().map_err(as_config)?;
        let (internal_grids, internal_constructed) = match &cfg.grids.internal_cells {
            Some(cells) => (
                subs.iter()
                    .map(|s| Grid::partition_box(s.internal_box().clone(), cells.clone()))
                    .collect::<Result<Vec<_>>>()
                    .map_err(as_config)?,
                false,
            ),
            None => (construct_internal_grids(&spec, &m_hat, &state_grids)?, true),
        };
        let mut class_of = Vec::with_capacity(subs.len());
        let mut members: Vec<Vec<usize>> = Vec::new();
        for i in 0..subs.len() {
            let same = members.iter().position(|m| {
                let j = m[0];
                subs[j] == subs[i]
                    && state_grids[j] == state_grids[i]
                    && input_grids[j] == input_grids[i]
                    && internal_grids[j] == internal_grids[i]
            });
            match same {
                Some(c) => {
                    members[c].push(i);
                    class_of.push(c);
                }
                None => {
                    class_of.push(members.len());
                    members.push(vec![i]);
                }
            }
        }
        Ok(Self {
            cfg,
            cfg_hash,
            out,
            spec,
            m_hat,
            class_of,
            members,
            state_grids,
            input_grids,
            internal_grids,
            internal_constructed,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &InterconnectionSpec {
        &self.spec
    }

    pub fn m_hat(&self) -> &DMatrix<f64> {
        &self.m_hat
    }

    pub fn state_grids(&self) -> &[Grid] {
        &self.state_grids
    }

    pub fn internal_grids(&self) -> &[Grid] {
        &self.internal_grids
    }

    pub fn n_classes(&self) -> usize {
        self.members.len()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_manifest(&self) -> Manifest {
        fs::read(self.path("manifest.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    fn save_manifest(&self, m: &Manifest) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(m).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(self.path("manifest.json"), bytes)?;
        Ok(())
    }

    fn hash_file(&self, name: &str) -> Option<String> {
        fs::read(self.path(name)).ok().map(|b| sha256_hex(&b))
    }

    /// Hash of the configuration sections `stage` reads.
    fn stage_config_hash(&self, stage: Stage) -> Result<String> {
        let v = serde_json::to_value(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        let mut sections = vec!["network", "grids"];
        sections.extend(match stage {
            Stage::Abstract => &[][..],
            Stage::Certify => &["certificate", "audit"][..],
            Stage::Compose => &["composition"][..],
            Stage::Bound => &["bound"][..],
            Stage::Synth => &["synthesis", "bound"][..],
            Stage::Simulate => &["simulation", "bound", "certificate", "composition"][..],
        });
        let subset: serde_json::Map<String, serde_json::Value> =
            sections.iter().map(|k| (k.to_string(), v[*k].clone())).collect();
        Ok(sha256_hex(&serde_json::to_vec(&subset).map_err(|e| Error::Format(e.to_string()))?))
    }

    fn stage_inputs(&self, stage: Stage) -> Vec<String> {
        let mdps = (0..self.n_classes()).map(|c| format!("mdp_c{c}.bin"));
        let policies = (0..self.n_classes()).map(|c| format!("policy_c{c}.json"));
        match stage {
            Stage::Abstract | Stage::Certify => vec![],
            Stage::Compose => vec!["certificates.json".into()],
            Stage::Bound => vec!["certificates.json".into(), "composition.json".into()],
            Stage::Synth => mdps.collect(),
            Stage::Simulate => mdps.chain(policies).chain(["bounds.json".to_string()]).collect(),
        }
    }

    /// Runs one stage, or reports the cached result when the configuration,
    /// inputs and outputs are unchanged and `force` is off.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageOutcome> {
        fs::create_dir_all(&self.out)?;
        let mut manifest = self.load_manifest();
        let cfg_hash = self.stage_config_hash(stage)?;
        let mut inputs = BTreeMap::new();
        for name in self.stage_inputs(stage) {
            match self.hash_file(&name) {
                Some(h) => {
                    inputs.insert(name, h);
                }
                None => return Err(Error::MissingArtifact(self.path(&name).display().to_string())),
            }
        }
        if !force {
            if let Some(rec) = manifest.stages.get(stage.name()) {
                let fresh = rec.config_hash == cfg_hash
                    && rec.inputs == inputs
                    && rec.outputs.iter().all(|(f, h)| self.hash_file(f).as_deref() == Some(h.as_str()));
                if fresh {
                    return Ok(StageOutcome {
                        stage: stage.name().into(),
                        pass: rec.pass,
                        skipped: true,
                        lines: rec.lines.clone(),
                    });
                }
            }
        }
        let mut outputs = BTreeMap::new();
        let (pass, lines) = match stage {
            Stage::Abstract => self.stage_abstract(&mut outputs)?,
            Stage::Certify => self.stage_certify(&mut outputs)?,
            Stage::Compose => self.stage_compose(&mut outputs)?,
            Stage::Bound => self.stage_bound(&mut outputs)?,
            Stage::Synth => self.stage_synth(&mut outputs)?,
            Stage::Simulate => self.stage_simulate(&mut outputs)?,
        };
        manifest.config_hash = self.cfg_hash.clone();
        manifest.stages.insert(
            stage.name().into(),
            StageRecord {
                config_hash: cfg_hash,
                inputs,
                outputs,
                pass,
                lines: lines.clone(),
            },
        );
        self.save_manifest(&manifest)?;
        Ok(StageOutcome {
            stage: stage.name().into(),
            pass,
            skipped: false,
            lines,
        })
    }

    fn write(&self, outputs: &mut BTreeMap<String, String>, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path(name), bytes)?;
        outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize>(&self, outputs: &mut BTreeMap<String, String>, name: &str, v: &T) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
        self.write(outputs, name, &bytes)
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let bytes = fs::read(self.path(name)).map_err(|_| Error::MissingArtifact(self.path(name).display().to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{name}: {e}")))
    }

    fn write_report(&self, outputs: &mut BTreeMap<String, String>, name: &str, lines: &[String]) -> Result<()> {
        let mut text = lines.join("\n");
        text.push('\n');
        self.write(outputs, name, text.as_bytes())
    }

    fn load_mdp(&self, class: usize) -> Result<FiniteMdp> {
        let name = format!("mdp_c{class}.bin");
        let file = fs::File::open(self.path(&name)).map_err(|_| Error::MissingArtifact(self.path(&name).display().to_string()))?;
        let mdp = mdp_io::load(std::io::BufReader::new(file))?;
        let rep = self.members[class][0];
        if mdp.state_grid() != &self.state_grids[rep]
            || mdp.input_grid() != &self.input_grids[rep]
            || mdp.internal_grid() != &self.internal_grids[rep]
        {
            return Err(Error::Format(format!("{name} is stale: its grids differ from the configuration")));
        }
        Ok(mdp)
    }

    fn stage_abstract(&self, outputs: &mut BTreeMap<String, String>) -> Result<(bool, Vec<String>)> {
        let wp = validate_interconnection(&self.spec)?;
        let opts = AbstractionOptions {
            storage: self.cfg.grids.storage,
            memory_budget_bytes: self.cfg.grids.memory_budget_mib << 20,
            kernel: KernelMode::ClosedForm,
        };
        let mut lines = vec![format!(
            "well-posed interconnection: {} (min slack {})",
            wp.pass,
            g12(wp.slack.iter().copied().fold(f64::INFINITY, f64::min))
        )];
        let mut classes = Vec::new();
        let mut pass = wp.pass;
        for (c, m) in self.members.iter().enumerate() {
            let rep = m[0];
            let mdp = abstract_subsystem(
                &self.spec.subsystems()[rep],
                &self.state_grids[rep],
                &self.input_grids[rep],
                &self.internal_grids[rep],
                &opts,
            )?;
            let audit = validate_stochastic_sampled(&mdp, self.cfg.grids.audit_rows);
            pass &= audit.pass();
            let mut buf = Vec::new();
            mdp_io::dump(&mdp, &mut buf)?;
            self.write(outputs, &format!("mdp_c{c}.bin"), &buf)?;
            lines.push(format!(
                "class {c}: {} subsystem(s), {} states x {} inputs x {} internal inputs, delta {}, {} rows, audit {} ({} rows, max row-sum deviation {})",
                m.len(),
                mdp.n_states(),
                mdp.n_inputs(),
                mdp.n_internal(),
                g12(self.state_grids[rep].delta()),
                if mdp.is_materialized() { "stored" } else { "on-demand" },
                if audit.pass() { "pass" } else { "FAIL" },
                audit.rows_checked,
                g12(audit.max_row_sum_deviation)
            ));
            classes.push(ClassSummary {
                subsystems: m.clone(),
                states: mdp.n_states(),
                inputs: mdp.n_inputs(),
                internals: mdp.n_internal(),
                delta: self.state_grids[rep].delta(),
                stored: mdp.is_materialized(),
                audit,
            });
        }
        let art = AbstractionArtifact {
            classes,
            well_posed: wp.pass,
            well_posedness_slack: wp.slack,
            internal_grids_constructed: self.internal_constructed,
        };
        self.write_json(outputs, "abstraction.json", &art)?;
        self.write_report(outputs, "abstraction_report.txt", &lines)?;
        Ok((pass, lines))
    }

    fn stage_certify(&self, outputs: &mut BTreeMap<String, String>) -> Result<(bool, Vec<String>)> {
        let params = self.cfg.certificate_params().map_err(as_config)?;
        let mut certs = Vec::new();
        let mut drift = Vec::new();
        let mut lines = Vec::new();
        let mut pass = true;
        for (c, m) in self.members.iter().enumerate() {
            let rep = m[0];
            let sys = &self.spec.subsystems()[rep];
            let cert = certify(sys, &params, self.state_grids[rep].delta())?;
            pass &= cert.verified();
            lines.push(format!(
                "class {c}: LMI {} lambda_max {} state-block margin {} (worst input {}) psi {} alpha {}",
                if cert.verified() { "pass" } else { "FAIL" },
                g12(cert.lmi.margin),
                g12(cert.lmi.state_block_margin),
                g12_point(&cert.lmi.worst_nu),
                g12(cert.psi),
                g12(cert.alpha_coeff)
            ));
            let report = match &self.cfg.audit {
                Some(a) => {
                    let r = empirical_supermartingale_check(
                        sys,
                        &cert,
                        &self.state_grids[rep],
                        &self.input_grids[rep],
                        &self.internal_grids[rep],
                        a.points,
                        a.noise_draws,
                        a.seed,
                    )?;
                    pass &= r.pass();
                    lines.push(format!(
                        "class {c}: drift audit {} ({} points x {} draws, {} violations, worst slack {})",
                        if r.pass() { "pass" } else { "FAIL" },
                        r.points,
                        r.noise_draws,
                        r.violations,
                        g12(r.worst.slack())
                    ));
                    Some(r)
                }
                None => None,
            };
            drift.push(report);
            certs.push(cert);
        }
        self.write_json(outputs, "certificates.json", &CertificateArtifact { classes: certs, drift })?;
        self.write_report(outputs, "certify_report.txt", &lines)?;
        Ok((pass, lines))
    }

    fn subsystem_certs(&self, art: &CertificateArtifact) -> Result<Vec<StorageCertificate>> {
        if art.classes.len() != self.n_classes() {
            return Err(Error::Format("certificates.json does not match the configured network".into()));
        }
        Ok(self.class_of.iter().map(|c| art.classes[*c].clone()).collect())
    }

    fn stage_compose(&self, outputs: &mut BTreeMap<String, String>) -> Result<(bool, Vec<String>)> {
        let art: CertificateArtifact = self.read_json("certificates.json")?;
        let certs = self.subsystem_certs(&art)?;
        let g = identity_gains(&self.spec);
        let lmi = crate::composition::network_lmi_over_inputs(&self.spec, &certs, &g)?;
        let matching = check_matching_condition(&g, self.spec.coupling(), &identity_output_gains(&self.spec), &g, &self.m_hat);
        let inclusion = if self.internal_constructed && self.cfg.composition.inclusion == InclusionMode::Construction {
            InclusionReport::by_construction()
        } else {
            let outs: Vec<Vec<Vec<f64>>> = self
                .spec
                .subsystems()
                .iter()
                .zip(&self.state_grids)
                .map(|(s, grid)| abstract_outputs(s.c2(), grid))
                .collect();
            check_internal_inclusion(&self.m_hat, &outs, &self.internal_grids)?
        };
        let params = aggregate_simulation_function(&certs, self.spec.mu())?;

        let mut gershgorin = Vec::new();
        if let (Some(rp), SupplyTemplate::RoomConduction { .. }) = (self.cfg.room_params(), &certs[0].supply) {
            for nu in [rp.input_lo, rp.input_hi] {
                let lambda = rp.lambda(nu);
                gershgorin.push((nu, lambda, gershgorin_margin(rp.eta, certs[0].pi, lambda)));
            }
        }

        let mut lines = vec![format!(
            "matrix inequality: {} worst lambda_max {} over {} input vertex combination(s){}",
            if lmi.pass { "pass" } else { "FAIL" },
            g12(lmi.worst_lambda_max),
            lmi.points.len(),
            if lmi.exhaustive { "" } else { " (common vertices only)" }
        )];
        for (nu, lambda, m) in &gershgorin {
            lines.push(format!("gershgorin margin at input {} (lambda {}): {}", g12(*nu), g12(*lambda), g12(*m)));
        }
        lines.push(format!(
            "matching condition: {} max |GMH - G^M^| {}",
            if matching.pass { "pass" } else { "FAIL" },
            g12(matching.max_abs_diff)
        ));
        lines.push(match inclusion.mode {
            InclusionMode::Construction => "internal input inclusion: pass (by construction)".into(),
            InclusionMode::Enumerated => format!(
                "internal input inclusion: {} ({} tuples enumerated)",
                if inclusion.pass { "pass" } else { "FAIL" },
                inclusion.tuples_checked
            ),
        });
        lines.push(format!(
            "aggregate: kappa_hat {} psi_hat {} alpha coefficient {}",
            g12(params.kappa_hat),
            g12(params.psi_hat),
            g12(params.alpha_coeff)
        ));
        let strict_ok = lmi.pass || !self.cfg.composition.strict;
        if !lmi.pass && !self.cfg.composition.strict {
            lines.push("warning: matrix inequality not satisfied; composition is non-strict, continuing".into());
        }
        let pass = strict_ok && matching.pass && inclusion.pass;
        self.write_json(
            outputs,
            "composition.json",
            &CompositionArtifact {
                lmi,
                matching,
                inclusion,
                gershgorin,
                params,
            },
        )?;
        self.write_report(outputs, "composition_report.txt", &lines)?;
        Ok((pass, lines))
    }

    fn stage_bound(&self, outputs: &mut BTreeMap<String, String>) -> Result<(bool, Vec<String>)> {
        let certs_art: CertificateArtifact = self.read_json("certificates.json")?;
        let comp: CompositionArtifact = self.read_json("composition.json")?;
        let certs = self.subsystem_certs(&certs_art)?;
        let b = &self.cfg.bound;
        let x0 = self.cfg.initial_states(self.spec.len()).map_err(as_config)?;
        let mut params = comp.params.clone();
        if let Some(p) = b.psi_hat {
            params.psi_hat = p;
        }
        let v0 = match b.v0 {
            Some(v) => v,
            None => initial_storage(&certs, self.spec.mu(), &x0, &self.state_grids)?,
        };
        let td = b.horizon as u32;
        let mut lines = vec![format!(
            "V0 {} kappa_hat {} psi_hat {} horizon {}",
            g12(v0),
            g12(params.kappa_hat),
            g12(params.psi_hat),
            b.horizon
        )];
        let mut bounds = Vec::new();
        for &eps in &b.epsilons {
            let v = closeness_bound(&params, v0, eps, td)?;
            lines.push(format!(
                "epsilon {}: bound {}{}",
                g12(eps),
                g12(v.value),
                if v.clamped { " (clamped)" } else { "" }
            ));
            bounds.push((eps, v));
        }
        let eps_for_target = match b.target {
            Some(t) => {
                let eps_max = b.eps_max.unwrap_or_else(|| self.output_diameter());
                let e = epsilon_for_confidence(&params, v0, td, t, eps_max)?;
                lines.push(format!("confidence {}: epsilon {}", g12(t), g12(e)));
                Some(e)
            }
            None => None,
        };
        self.write_json(
            outputs,
            "bounds.json",
            &BoundArtifact {
                v0,
                psi_hat: params.psi_hat,
                kappa_hat: params.kappa_hat,
                alpha_coeff: params.alpha_coeff,
                horizon: b.horizon,
                bounds,
                target: b.target,
                epsilon_for_target: eps_for_target,
            },
        )?;
        self.write_report(outputs, "bound_report.txt", &lines)?;
        Ok((true, lines))
    }

    /// Diameter of the stacked external-output box.
    fn output_diameter(&self) -> f64 {
        self.spec
            .subsystems()
            .iter()
            .map(|s| {
                s.state_box()
                    .linear_image(s.c1())
                    .map(|b| b.diameter().powi(2))
                    .unwrap_or(0.0)
            })
            .sum::<f64>()
            .sqrt()
    }

    fn synthesis_mode(&self, mdp: &FiniteMdp) -> Result<SynthesisMode> {
        Ok(match self.cfg.synthesis.mode {
            ModeName::Robust => SynthesisMode::Robust,
            ModeName::Nominal => {
                let w = self.cfg.synthesis.nominal_internal.as_ref().expect("validated");
                SynthesisMode::Nominal {
                    internal: mdp.internal_grid().cell_of(w).map_err(as_config)?.index,
                }
            }
        })
    }

    fn stage_synth(&self, outputs: &mut BTreeMap<String, String>) -> Result<(bool, Vec<String>)> {
        let mut lines = Vec::new();
        for c in 0..self.n_classes() {
            let mdp = self.load_mdp(c)?;
            let safe = match &self.cfg.synthesis.safe {
                Some(b) => SafeSet::from_box(mdp.state_grid(), &crate::model::IntervalBox::new(b.lo.clone(), b.hi.clone()).map_err(as_config)?),
                None => SafeSet::All,
            };
            let mode = self.synthesis_mode(&mdp)?;
            let mut policy = safety_value_iteration(&mdp, &safe, self.cfg.bound.horizon, mode)?;
            if self.cfg.synthesis.stationary {
                policy = policy.to_stationary();
            }
            let mut csv = Vec::new();
            policy.write_csv(&mdp, &mut csv)?;
            self.write(outputs, &format!("policy_c{c}.csv"), &csv)?;
            self.write_json(outputs, &format!("policy_c{c}.json"), &policy)?;
            let v0 = policy.values_at(0);
            let n = mdp.n_states();
            let (best, best_v) = (0..n).fold((0, f64::NEG_INFINITY), |acc, s| if v0[s] > acc.1 { (s, v0[s]) } else { acc });
            let first = policy.stationary();
            let increases = first.windows(2).filter(|w| w[1] > w[0]).count();
            lines.push(format!(
                "class {c}: mode {} horizon {} max safety probability {} at {} (interior: {}), step-0 input {} -> {} with {} increase(s) along the grid",
                match mode {
                    SynthesisMode::Robust => "robust".to_string(),
                    SynthesisMode::Nominal { internal } =>
                        format!("nominal at {}", g12_point(&mdp.internal_grid().representative(internal))),
                },
                policy.horizon,
                g12(best_v),
                g12_point(&mdp.state_grid().representative(best)),
                best > 0 && best + 1 < n,
                g12_point(&mdp.input_grid().representative(first[0])),
                g12_point(&mdp.input_grid().representative(first[n - 1])),
                increases
            ));
        }
        self.write_report(outputs, "synthesis_report.txt", &lines)?;
        Ok((true, lines))
    }

    /// Controllers for every class, with the certificate's interface gain.
    pub fn controllers(&self) -> Result<Vec<Controller>> {
        let params = self.cfg.certificate_params().map_err(as_config)?;
        (0..self.n_classes())
            .map(|c| {
                let mdp = self.load_mdp(c)?;
                let policy: Policy = self.read_json(&format!("policy_c{c}.json"))?;
                let rep = self.members[c][0];
                refine_policy(
                    policy,
                    &mdp,
                    params.k.clone(),
                    Some(self.spec.subsystems()[rep].input_box().clone()),
                )
            })
            .collect()
    }

    fn stage_simulate(&self, outputs: &mut BTreeMap<String, String>) -> Result<(bool, Vec<String>)> {
        let bounds: BoundArtifact = self.read_json("bounds.json")?;
        let controllers = self.controllers()?;
        let per_sub: Vec<&Controller> = self.class_of.iter().map(|c| &controllers[*c]).collect();
        let x0 = self.cfg.initial_states(self.spec.len()).map_err(as_config)?;
        let s = &self.cfg.simulation;
        let opts = SimulationOptions {
            horizon: bounds.horizon,
            n_traj: s.n_traj,
            seed: s.seed,
            control: s.control,
            record_noise: false,
        };
        let batch = simulate_closed_loop(&self.spec, &per_sub, &self.m_hat, &x0, &opts)?;
        let mut csv = Vec::new();
        batch.write_csv(&mut csv, s.csv_max_traj)?;
        self.write(outputs, "trajectories.csv", &csv)?;

        let mut lines = Vec::new();
        let mut pass = true;
        let mut checks = Vec::new();
        for (eps, b) in &bounds.bounds {
            let e = empirical_exceedance(&batch, *eps);
            let se = (b.value * (1.0 - b.value) / e.n as f64).sqrt();
            let ok = e.frequency <= b.value + 3.0 * se;
            pass &= ok;
            lines.push(format!(
                "epsilon {}: exceedance {} (95% CI [{}, {}]) bound {} {}",
                g12(*eps),
                g12(e.frequency),
                g12(e.wilson_lo),
                g12(e.wilson_hi),
                g12(b.value),
                if ok { "sound" } else { "VIOLATED" }
            ));
            checks.push((e, b.value, ok));
        }
        let range = batch.concrete_range();
        lines.push(format!(
            "{} trajectories x {} steps, seed {}: concrete range [{}, {}], leave events {}, abstract sink events {}",
            batch.n_traj,
            batch.horizon,
            batch.seed,
            g12(range.0),
            g12(range.1),
            batch.total_leave_events(),
            batch.total_sink_events()
        ));
        self.write_json(
            outputs,
            "simulation.json",
            &SimulationArtifact {
                n_traj: batch.n_traj,
                horizon: batch.horizon,
                seed: batch.seed,
                checks,
                leave_events: batch.total_leave_events(),
                sink_events: batch.total_sink_events(),
                concrete_range: range,
            },
        )?;
        self.write_report(outputs, "simulation_report.txt", &lines)?;
        Ok((pass, lines))
    }

    /// Runs `stages` in order, stopping at the first failing one, and writes
    /// `summary.txt`. Returns the outcomes and the exit code.
    pub fn run(&self, stages: &[Stage], force: bool) -> (Vec<StageOutcome>, i32) {
        let mut outcomes = Vec::new();
        let mut code = 0;
        for &stage in stages {
            match self.run_stage(stage, force) {
                Ok(o) => {
                    let ok = o.pass;
                    outcomes.push(o);
                    if !ok {
                        code = stage.exit_code();
                        break;
                    }
                }
                Err(e) => {
                    outcomes.push(StageOutcome {
                        stage: stage.name().into(),
                        pass: false,
                        skipped: false,
                        lines: vec![format!("error: {e}")],
                    });
                    code = match e {
                        Error::Config(_) => 2,
                        Error::Io(_) => 1,
                        _ => stage.exit_code(),
                    };
                    break;
                }
            }
        }
        let mut text = String::new();
        for o in &outcomes {
            let _ = writeln!(text, "[{}] {}", o.stage, if o.pass { "pass" } else { "FAIL" });
            for l in &o.lines {
                let _ = writeln!(text, "  {l}");
            }
        }
        let _ = writeln!(text, "exit code {code}");
        let _ = fs::create_dir_all(&self.out).and_then(|_| fs::write(self.path("summary.txt"), text));
        (outcomes, code)
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// `diag(H₁, …, H_N)` of identities sized to the internal outputs.
fn identity_output_gains(spec: &InterconnectionSpec) -> DMatrix<f64> {
    let q: usize = spec.internal_output_dims().iter().sum();
    DMatrix::identity(q, q)
}
