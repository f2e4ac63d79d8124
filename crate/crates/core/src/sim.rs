//! Coupled Monte-Carlo simulation of a concrete network and its
//! abstraction, plus empirical checks of the closeness bound and of the
//! storage-function drift.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{interface, StorageCertificate};
use crate::error::{dim_check, invalid, Error, Result};
use crate::fmt::{g12, g12_point};
use crate::grid::Grid;
use crate::model::{couple, InterconnectionSpec, LinearSubsystem};
use crate::synthesis::Controller;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// How the concrete input is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    /// `ν = K(x − x̂) + ν̂` with `x̂` the state of the coupled abstract run.
    #[default]
    Coupled,
    /// The refined controller quantizes the concrete state itself.
    Quantized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    pub horizon: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub control: ControlSource,
    /// Keep every noise sample, for coupling audits.
    pub record_noise: bool,
}

impl SimulationOptions {
    pub fn new(horizon: usize, n_traj: usize, seed: u64) -> Self {
        Self {
            horizon,
            n_traj,
            seed,
            control: ControlSource::Coupled,
            record_noise: false,
        }
    }
}

/// Per-trajectory RNG: ChaCha8 keyed by the base seed, one stream per trajectory.
pub fn trajectory_rng(seed: u64, traj: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(traj as u64);
    rng
}

/// Coupled trajectories, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub n_traj: usize,
    pub horizon: usize,
    pub seed: u64,
    state_offsets: Vec<usize>,
    input_offsets: Vec<usize>,
    noise_offsets: Vec<usize>,
    states: Vec<f64>,
    abstract_states: Vec<f64>,
    inputs: Vec<f64>,
    abstract_inputs: Vec<f64>,
    /// Network output deviation `‖y − ŷ‖` per `(traj, k)`.
    deviation: Vec<f64>,
    /// Per-subsystem output deviation per `(traj, k, i)`.
    sub_deviation: Vec<f64>,
    /// Concrete steps that left the state box and were clamped, per trajectory.
    pub leave_events: Vec<u32>,
    /// Abstract steps that left the grid, i.e. reached the sink, per trajectory.
    pub sink_events: Vec<u32>,
    /// Concrete inputs projected onto the input box, per trajectory.
    pub input_clamps: Vec<u32>,
    noise: Option<Vec<f64>>,
}

fn offsets(dims: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out = vec![0];
    for d in dims {
        out.push(out.last().unwrap() + d);
    }
    out
}

impl TrajectoryBatch {
    pub fn n_subsystems(&self) -> usize {
        self.state_offsets.len() - 1
    }

    fn state_stride(&self) -> usize {
        *self.state_offsets.last().unwrap()
    }

    fn input_stride(&self) -> usize {
        *self.input_offsets.last().unwrap()
    }

    pub fn state(&self, t: usize, k: usize, i: usize) -> &[f64] {
        let base = (t * (self.horizon + 1) + k) * self.state_stride();
        &self.states[base + self.state_offsets[i]..base + self.state_offsets[i + 1]]
    }

    pub fn abstract_state(&self, t: usize, k: usize, i: usize) -> &[f64] {
        let base = (t * (self.horizon + 1) + k) * self.state_stride();
        &self.abstract_states[base + self.state_offsets[i]..base + self.state_offsets[i + 1]]
    }

    /// Concrete input applied at step `k < horizon`.
    pub fn input(&self, t: usize, k: usize, i: usize) -> &[f64] {
        let base = (t * self.horizon + k) * self.input_stride();
        &self.inputs[base + self.input_offsets[i]..base + self.input_offsets[i + 1]]
    }

    pub fn abstract_input(&self, t: usize, k: usize, i: usize) -> &[f64] {
        let base = (t * self.horizon + k) * self.input_stride();
        &self.abstract_inputs[base + self.input_offsets[i]..base + self.input_offsets[i + 1]]
    }

    pub fn deviation(&self, t: usize, k: usize) -> f64 {
        self.deviation[t * (self.horizon + 1) + k]
    }

    pub fn subsystem_deviation(&self, t: usize, k: usize, i: usize) -> f64 {
        self.sub_deviation[(t * (self.horizon + 1) + k) * self.n_subsystems() + i]
    }

    /// `max_k ‖y(k) − ŷ(k)‖` of trajectory `t`.
    pub fn max_deviation(&self, t: usize) -> f64 {
        let h = self.horizon + 1;
        self.deviation[t * h..(t + 1) * h].iter().copied().fold(0.0, f64::max)
    }

    /// Noise consumed by subsystem `i` at step `k`, when recorded.
    pub fn noise(&self, t: usize, k: usize, i: usize) -> Option<&[f64]> {
        let stride = *self.noise_offsets.last().unwrap();
        self.noise.as_ref().map(|n| {
            let base = (t * self.horizon + k) * stride;
            &n[base + self.noise_offsets[i]..base + self.noise_offsets[i + 1]]
        })
    }

    /// Smallest and largest concrete coordinate over the batch.
    pub fn concrete_range(&self) -> (f64, f64) {
        self.states
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    pub fn total_leave_events(&self) -> u64 {
        self.leave_events.iter().map(|v| *v as u64).sum()
    }

    pub fn total_sink_events(&self) -> u64 {
        self.sink_events.iter().map(|v| *v as u64).sum()
    }

    /// CSV with columns `traj,k,subsystem,concrete,abstract,input,deviation`
    /// for the first `max_traj` trajectories. `input` is empty at the last step.
    pub fn write_csv<W: Write>(&self, mut w: W, max_traj: usize) -> Result<()> {
        writeln!(w, "traj,k,subsystem,concrete,abstract,input,deviation")?;
        for t in 0..self.n_traj.min(max_traj) {
            for k in 0..=self.horizon {
                for i in 0..self.n_subsystems() {
                    let input = if k < self.horizon {
                        g12_point(self.input(t, k, i))
                    } else {
                        String::new()
                    };
                    writeln!(
                        w,
                        "{t},{k},{i},{},{},{input},{}",
                        g12_point(self.state(t, k, i)),
                        g12_point(self.abstract_state(t, k, i)),
                        g12(self.subsystem_deviation(t, k, i))
                    )?;
                }
            }
        }
        Ok(())
    }
}

struct TrajectoryRecord {
    states: Vec<f64>,
    abstract_states: Vec<f64>,
    inputs: Vec<f64>,
    abstract_inputs: Vec<f64>,
    deviation: Vec<f64>,
    sub_deviation: Vec<f64>,
    leaves: u32,
    sinks: u32,
    clamps: u32,
    noise: Vec<f64>,
}

/// Runs `n_traj` coupled trajectories of the concrete network (`w = M y₂`)
/// and the abstract one (`ŵ = M̂ ŷ₂`, `x̂' = Π(f(x̂, ν̂, ŵ, ς))`), both driven
/// by the same noise samples.
pub fn simulate_closed_loop(
    spec: &InterconnectionSpec,
    controllers: &[&Controller],
    m_hat: &DMatrix<f64>,
    x0: &[Vec<f64>],
    opts: &SimulationOptions,
) -> Result<TrajectoryBatch> {
    let subs = spec.subsystems();
    let n = subs.len();
    dim_check("controllers", n, controllers.len())?;
    dim_check("initial states", n, x0.len())?;
    dim_check("M̂ rows", spec.coupling().nrows(), m_hat.nrows())?;
    dim_check("M̂ columns", spec.coupling().ncols(), m_hat.ncols())?;
    if opts.n_traj == 0 {
        return Err(invalid("n_traj", "must be positive"));
    }
    for (c, s) in controllers.iter().zip(subs) {
        if c.horizon() < opts.horizon {
            return Err(Error::BeyondHorizon {
                k: opts.horizon,
                horizon: c.horizon(),
            });
        }
        dim_check("controller state grid", s.state_dim(), c.state_grid().dim())?;
    }
    for (x, s) in x0.iter().zip(subs) {
        dim_check("initial state", s.state_dim(), x.len())?;
    }
    let dims = spec.internal_dims();
    let state_offsets = offsets(subs.iter().map(LinearSubsystem::state_dim));
    let input_offsets = offsets(subs.iter().map(LinearSubsystem::input_dim));
    let noise_offsets = offsets(subs.iter().map(LinearSubsystem::noise_dim));
    let h = opts.horizon;

    let run = |t: usize| -> Result<TrajectoryRecord> {
        let mut rng = trajectory_rng(opts.seed, t);
        let mut rec = TrajectoryRecord {
            states: Vec::with_capacity((h + 1) * state_offsets[n]),
            abstract_states: Vec::with_capacity((h + 1) * state_offsets[n]),
            inputs: Vec::with_capacity(h * input_offsets[n]),
            abstract_inputs: Vec::with_capacity(h * input_offsets[n]),
            deviation: Vec::with_capacity(h + 1),
            sub_deviation: Vec::with_capacity((h + 1) * n),
            leaves: 0,
            sinks: 0,
            clamps: 0,
            noise: Vec::new(),
        };
        let mut x: Vec<Vec<f64>> = x0.to_vec();
        for (xi, s) in x.iter_mut().zip(subs) {
            if s.state_box().clamp(xi) {
                rec.leaves += 1;
            }
        }
        let mut xh = Vec::with_capacity(n);
        let mut idx = Vec::with_capacity(n);
        for (xi, c) in x.iter().zip(controllers) {
            let q = c.state_grid().quantize(xi)?;
            xh.push(q.point);
            idx.push(q.index);
        }
        let record = |rec: &mut TrajectoryRecord, x: &[Vec<f64>], xh: &[Vec<f64>]| {
            let mut total = 0.0;
            for ((xi, xhi), s) in x.iter().zip(xh).zip(subs) {
                rec.states.extend_from_slice(xi);
                rec.abstract_states.extend_from_slice(xhi);
                let d = (s.external_output(xi) - s.external_output(xhi)).norm_squared();
                rec.sub_deviation.push(d.sqrt());
                total += d;
            }
            rec.deviation.push(total.sqrt());
        };
        record(&mut rec, &x, &xh);

        for k in 0..h {
            let y2: Vec<DVector<f64>> = x.iter().zip(subs).map(|(xi, s)| s.internal_output(xi)).collect();
            let y2h: Vec<DVector<f64>> = xh.iter().zip(subs).map(|(xi, s)| s.internal_output(xi)).collect();
            let w = couple(spec.coupling(), &y2, &dims);
            let w_raw = couple(m_hat, &y2h, &dims);
            let mut next_x = Vec::with_capacity(n);
            let mut next_xh = Vec::with_capacity(n);
            let mut next_idx = Vec::with_capacity(n);
            for i in 0..n {
                let s = &subs[i];
                let c = controllers[i];
                let wh = c.internal_grid().quantize(w_raw[i].as_slice())?.point;
                let act = match opts.control {
                    ControlSource::Coupled => c.coupled_input(k, &x[i], &xh[i], idx[i])?,
                    ControlSource::Quantized => {
                        let mut a = c.input(k, &x[i], w[i].as_slice())?;
                        a.nu_hat = c.abstract_input(k, idx[i])?;
                        a
                    }
                };
                if act.input_clamped {
                    rec.clamps += 1;
                }
                rec.inputs.extend_from_slice(&act.nu);
                rec.abstract_inputs.extend_from_slice(&act.nu_hat);
                let noise: Vec<f64> = (0..s.noise_dim()).map(|_| rng.sample(StandardNormal)).collect();
                if opts.record_noise {
                    rec.noise.extend_from_slice(&noise);
                }
                let mut xn: Vec<f64> = s.concrete_step(&x[i], &act.nu, w[i].as_slice(), &noise)?.iter().copied().collect();
                if s.state_box().clamp(&mut xn) {
                    rec.leaves += 1;
                }
                let z = s.concrete_step(&xh[i], &act.nu_hat, &wh, &noise)?;
                let q = c.state_grid().quantize(z.as_slice())?;
                if q.clamped {
                    rec.sinks += 1;
                }
                next_x.push(xn);
                next_xh.push(q.point);
                next_idx.push(q.index);
            }
            x = next_x;
            xh = next_xh;
            idx = next_idx;
            record(&mut rec, &x, &xh);
        }
        Ok(rec)
    };

    let records: Vec<TrajectoryRecord> = (0..opts.n_traj)
        .into_par_iter()
        .map(run)
        .collect::<Result<Vec<_>>>()?;

    let mut batch = TrajectoryBatch {
        n_traj: opts.n_traj,
        horizon: h,
        seed: opts.seed,
        state_offsets,
        input_offsets,
        noise_offsets,
        states: Vec::new(),
        abstract_states: Vec::new(),
        inputs: Vec::new(),
        abstract_inputs: Vec::new(),
        deviation: Vec::new(),
        sub_deviation: Vec::new(),
        leave_events: Vec::with_capacity(opts.n_traj),
        sink_events: Vec::with_capacity(opts.n_traj),
        input_clamps: Vec::with_capacity(opts.n_traj),
        noise: opts.record_noise.then(Vec::new),
    };
    for r in records {
        batch.states.extend(r.states);
        batch.abstract_states.extend(r.abstract_states);
        batch.inputs.extend(r.inputs);
        batch.abstract_inputs.extend(r.abstract_inputs);
        batch.deviation.extend(r.deviation);
        batch.sub_deviation.extend(r.sub_deviation);
        batch.leave_events.push(r.leaves);
        batch.sink_events.push(r.sinks);
        batch.input_clamps.push(r.clamps);
        if let Some(n) = batch.noise.as_mut() {
            n.extend(r.noise);
        }
    }
    Ok(batch)
}

/// Frequency of `max_k ‖y − ŷ‖ ≥ ε` with its Wilson 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub epsilon: f64,
    pub count: usize,
    pub n: usize,
    pub frequency: f64,
    pub std_error: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

pub fn wilson_interval(count: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = count as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if count == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if count == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

pub fn empirical_exceedance(batch: &TrajectoryBatch, epsilon: f64) -> Exceedance {
    let count = (0..batch.n_traj).filter(|&t| batch.max_deviation(t) >= epsilon).count();
    let n = batch.n_traj;
    let p = count as f64 / n as f64;
    let (wilson_lo, wilson_hi) = wilson_interval(count, n);
    Exceedance {
        epsilon,
        count,
        n,
        frequency: p,
        std_error: (p * (1.0 - p) / n as f64).sqrt(),
        wilson_lo,
        wilson_hi,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSample {
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub nu_hat: Vec<f64>,
    pub w: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub mean_next: f64,
    pub std_error: f64,
    pub bound: f64,
}

impl DriftSample {
    /// `bound + 3·SE − mean`; negative is a violation.
    pub fn slack(&self) -> f64 {
        self.bound + 3.0 * self.std_error - self.mean_next
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub points: usize,
    pub noise_draws: usize,
    pub violations: usize,
    pub certificate_verified: bool,
    pub worst: DriftSample,
}

impl DriftReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Samples `(x, x̂, ν̂, w, ŵ)` (concrete points uniformly from the boxes,
/// abstract ones uniformly from the grids) and checks
/// `E[V(x', Π(x̂'))] ≤ κ̂V + supply + ψ` by Monte-Carlo over shared noise,
/// allowing three standard errors. `Π` is the lattice quantizer, so the
/// abstract successor is never projected back into the box.
pub fn empirical_supermartingale_check(
    sys: &LinearSubsystem,
    cert: &StorageCertificate,
    state_grid: &Grid,
    input_grid: &Grid,
    internal_grid: &Grid,
    n_points: usize,
    n_noise: usize,
    seed: u64,
) -> Result<DriftReport> {
    if n_points == 0 || n_noise < 2 {
        return Err(invalid("samples", "need at least one point and two noise draws"));
    }
    let uniform_in = |rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]| -> Vec<f64> {
        lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..=*h)).collect()
    };
    let samples: Vec<DriftSample> = (0..n_points)
        .into_par_iter()
        .map(|p| -> Result<DriftSample> {
            let mut rng = trajectory_rng(seed, p);
            let x = uniform_in(&mut rng, sys.state_box().lo(), sys.state_box().hi());
            let x_hat = state_grid.representative(rng.random_range(0..state_grid.len()));
            let nu_hat = input_grid.representative(rng.random_range(0..input_grid.len()));
            let w = uniform_in(&mut rng, sys.internal_box().lo(), sys.internal_box().hi());
            let w_hat = internal_grid.representative(rng.random_range(0..internal_grid.len()));
            let nu = interface(&cert.k, &x, &x_hat, &nu_hat, None)?.nu;
            let mean_c = sys.mean(&x, &nu, &w)?;
            let mean_a = sys.mean(&x_hat, &nu_hat, &w_hat)?;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut xn = vec![0.0; sys.state_dim()];
            let mut z = vec![0.0; sys.state_dim()];
            for _ in 0..n_noise {
                let draw: Vec<f64> = (0..sys.noise_dim()).map(|_| rng.sample(StandardNormal)).collect();
                let shift = sys.noise_gain() * DVector::from_vec(draw);
                for j in 0..xn.len() {
                    xn[j] = mean_c[j] + shift[j];
                    z[j] = mean_a[j] + shift[j];
                }
                let v = cert.value(&xn, &state_grid.lattice_point(&z)?);
                sum += v;
                sum_sq += v * v;
            }
            let nf = n_noise as f64;
            let mean_next = sum / nf;
            let var = ((sum_sq - nf * mean_next * mean_next) / (nf - 1.0)).max(0.0);
            let bound = cert.next_value_bound(sys, &nu, &x, &x_hat, &w, &w_hat)?;
            Ok(DriftSample {
                x,
                x_hat,
                nu_hat,
                w,
                w_hat,
                mean_next,
                std_error: (var / nf).sqrt(),
                bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let violations = samples.iter().filter(|s| s.slack() < 0.0).count();
    let worst = samples
        .into_iter()
        .min_by(|a, b| a.slack().total_cmp(&b.slack()))
        .expect("at least one point");
    Ok(DriftReport {
        points: n_points,
        noise_draws: n_noise,
        violations,
        certificate_verified: cert.verified(),
        worst,
    })
}
