//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints its own line; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use netabs::bounds::{closeness_bound, initial_storage, BoundBranch};
use netabs::certificate::{certify, CertificateParams, StorageCertificate};
use netabs::composition::{
    check_matching_condition, construct_internal_grids, identity_gains, is_grid_point, network_lmi_over_inputs,
    SimulationFunctionParams,
};
use netabs::config::PipelineConfig;
use netabs::grid::Grid;
use netabs::mdp::kernel::{transition_row, ProbabilityRow};
use netabs::mdp::FiniteMdp;
use netabs::model::{room_network, room_subsystem, IntervalBox, LinearSubsystem, RoomParams};
use netabs::pipeline::{Pipeline, Stage};
use netabs::sim::{empirical_supermartingale_check, simulate_closed_loop, SimulationOptions, TrajectoryBatch};
use netabs::synthesis::{safety_value_iteration, Controller, SafeSet, SynthesisMode};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_s,
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/configs"))
}

fn load_config(name: &str) -> PipelineConfig {
    PipelineConfig::load(&configs_dir().join(name)).expect("bundled config")
}

// ---------------------------------------------------------------------------
// quadrature

fn simpson_rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        left + right + diff / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

/// Adaptive Simpson on `[a, b]`, pre-split into eight panels.
fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let panels = 8;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = if i + 1 == panels { b } else { lo + h };
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson_rec(f, lo, hi, fa, fm, fb, whole, tol / panels as f64, 40)
        })
        .sum()
}

fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

/// Gaussian mass of one grid cell by quadrature (1-D or nested 2-D).
fn cell_mass(lo: &[f64], hi: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    match lo.len() {
        1 => integrate(&|x| normal_pdf(x, mean[0], std[0]), lo[0], hi[0], 1e-13),
        2 => {
            let inner = |x: f64| {
                integrate(
                    &|y| normal_pdf(x, mean[0], std[0]) * normal_pdf(y, mean[1], std[1]),
                    lo[1],
                    hi[1],
                    1e-14,
                )
            };
            integrate(&inner, lo[0], hi[0], 1e-13)
        }
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// 1

fn random_subsystem(rng: &mut ChaCha8Rng, dim: usize) -> (LinearSubsystem, Vec<f64>) {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.7..0.7) / dim as f64);
    let b = DMatrix::from_fn(dim, 1, |_, _| rng.random_range(-0.3..0.3));
    let d = DMatrix::from_fn(dim, 1, |_, _| rng.random_range(-0.3..0.3));
    let c1 = DMatrix::identity(dim, dim);
    let c2 = DMatrix::from_fn(1, dim, |_, j| if j == 0 { 1.0 } else { 0.0 });
    let std: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..0.5)).collect();
    let noise = DMatrix::from_fn(dim, dim, |i, j| if i == j { std[i] } else { 0.0 });
    let drift = DVector::from_fn(dim, |_, _| rng.random_range(-0.2..0.2));
    let sys = LinearSubsystem::new(
        a,
        b,
        c1,
        c2,
        d,
        noise,
        IntervalBox::new(vec![0.0; dim], vec![1.0; dim]).unwrap(),
        IntervalBox::interval(0.0, 1.0).unwrap(),
        IntervalBox::interval(0.0, 1.0).unwrap(),
    )
    .unwrap()
    .with_drift(drift)
    .unwrap();
    (sys, std)
}

fn kernel_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_entry = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut rows = 0;
    for case in 0..20 {
        let dim = 1 + case % 2;
        let (sys, std) = random_subsystem(&mut rng, dim);
        let cells = if dim == 1 { rng.random_range(12..40) } else { rng.random_range(5..10) };
        let grid = Grid::partition_box(sys.state_box().clone(), vec![cells; dim]).unwrap();
        for _ in 0..4 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
            let nu = [rng.random_range(0.0..1.0)];
            let w = [rng.random_range(0.0..1.0)];
            let mean: Vec<f64> = (0..dim)
                .map(|i| {
                    let mut m = sys.drift()[i] + sys.b()[(i, 0)] * nu[0] + sys.d()[(i, 0)] * w[0];
                    for j in 0..dim {
                        m += sys.a()[(i, j)] * x[j];
                    }
                    m
                })
                .collect();
            let row = transition_row(&sys, &x, &nu, &w, &grid).map_err(|e| e.to_string())?;
            let dense = row.to_dense(grid.len());
            let mut inside = 0.0;
            for c in 0..grid.len() {
                let (lo, hi) = grid.cell_bounds(c);
                let q = cell_mass(&lo, &hi, &mean, &std);
                inside += q;
                worst_entry = worst_entry.max((q - dense[c]).abs());
            }
            worst_entry = worst_entry.max(((1.0 - inside) - row.sink).abs());
            worst_sum = worst_sum.max((row.total() - 1.0).abs());
            rows += 1;
        }
    }
    ensure(worst_entry <= 1e-8, format!("max entry error {worst_entry:e}"))?;
    ensure(worst_sum <= 1e-9, format!("max row-sum error {worst_sum:e}"))?;
    within(t.elapsed(), 60.0, "kernel oracle")?;
    Ok(format!(
        "{rows} rows over 20 subsystems, max |closed form - quadrature| {worst_entry:.2e}, max |row sum - 1| {worst_sum:.2e}, {:.2}s",
        t.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2

fn certificate_reproduction() -> Outcome {
    let t = Instant::now();
    let p = RoomParams::rooms15();
    let room = room_subsystem(&p).unwrap();
    let cert = certify(&room, &CertificateParams::room(0.99, 0.04, 0.1), 0.005).map_err(|e| e.to_string())?;
    let lambda: f64 = 1.0 - 2.0 * 0.1 - 0.022;
    // (1+π)λ² - κ̂ - X²² with X²² = -3.38 η (1+π)
    let hand = 1.04 * lambda * lambda - 0.99 + 3.38 * 0.1 * 1.04;
    ensure(cert.verified(), "certificate rejected")?;
    ensure((lambda - 0.778).abs() < 1e-12, "lambda")?;
    ensure(cert.lmi.worst_nu == vec![0.0], format!("worst input {:?}", cert.lmi.worst_nu))?;
    ensure(
        (cert.lmi.state_block_margin - hand).abs() < 1e-9,
        format!("margin {} vs hand {}", cert.lmi.state_block_margin, hand),
    )?;
    ensure((hand + 0.009).abs() < 1e-4, format!("hand value {hand}"))?;
    let control = certify(&room, &CertificateParams::room(0.9, 0.04, 0.1), 0.005).map_err(|e| e.to_string())?;
    ensure(!control.verified(), "kappa 0.9 control passed")?;
    within(t.elapsed(), 1.0, "certificate")?;
    Ok(format!(
        "margin {:.6} (hand {:.6}) at lambda 0.778, full lambda_max {:.1e}; kappa 0.9 control margin {:.4} rejected",
        cert.lmi.state_block_margin, hand, cert.lmi.margin, control.lmi.state_block_margin
    ))
}

// ---------------------------------------------------------------------------
// 3

fn compositionality() -> Outcome {
    let t = Instant::now();
    let p = RoomParams::rooms200();
    let spec = room_network(200, &p).unwrap();
    let certs: Vec<StorageCertificate> = spec
        .subsystems()
        .iter()
        .map(|s| certify(s, &CertificateParams::room(0.99, 0.98, 0.1), 0.005).unwrap())
        .collect();
    let g = identity_gains(&spec);
    let lmi = network_lmi_over_inputs(&spec, &certs, &g).map_err(|e| e.to_string())?;

    // Circulant ring: eigenvalues 2cos(2πj/n); the projected form is
    // x11 θ² + 2 x12 θ + x22 per mode.
    let mut oracle = f64::NEG_INFINITY;
    for nu in [0.0, 0.6] {
        let lam = 1.0 - 2.0 * 0.1 - 0.4 - 0.5 * nu;
        let (x11, x12, x22) = (0.01 * 1.98, 0.1 * lam, -3.38 * 0.1 * 1.98);
        for j in 0..200 {
            let th = 2.0 * (2.0 * std::f64::consts::PI * j as f64 / 200.0).cos();
            oracle = oracle.max(x11 * th * th + 2.0 * x12 * th + x22);
        }
    }
    ensure(lmi.pass, format!("network inequality failed: {}", lmi.worst_lambda_max))?;
    ensure(
        (lmi.worst_lambda_max - oracle).abs() < 1e-9,
        format!("lambda_max {} vs circulant oracle {}", lmi.worst_lambda_max, oracle),
    )?;
    ensure((oracle + 0.43004).abs() < 1e-9, format!("oracle {oracle}"))?;

    let m = spec.coupling().clone();
    let matching = check_matching_condition(&g, &m, &DMatrix::identity(200, 200), &g, &m);
    ensure(matching.pass, "matching condition")?;

    let state_grids: Vec<Grid> = spec
        .subsystems()
        .iter()
        .map(|s| Grid::partition_box(s.state_box().clone(), vec![400]).unwrap())
        .collect();
    let internal = construct_internal_grids(&spec, &m, &state_grids).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let i = rng.random_range(0..200);
        let a = state_grids[(i + 199) % 200].representative(rng.random_range(0..400))[0];
        let b = state_grids[(i + 1) % 200].representative(rng.random_range(0..400))[0];
        ensure(is_grid_point(&internal[i], &[a + b]), format!("{a} + {b} missing from internal grid {i}"))?;
    }
    within(t.elapsed(), 30.0, "composition")?;
    Ok(format!(
        "lambda_max {:.5} (circulant oracle {:.5}), matching max diff {:.1e}, inclusion verified on 10000 sampled neighbour pairs, {:.2}s",
        lmi.worst_lambda_max,
        oracle,
        matching.max_abs_diff,
        t.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 4

fn bound_oracle(kappa: f64, psi: f64, alpha: f64, v0: f64, td: i32) -> f64 {
    let r = if alpha >= psi / kappa {
        1.0 - (1.0 - v0 / alpha) * (1.0 - psi / alpha).powi(td)
    } else {
        v0 / alpha * (1.0 - kappa).powi(td) + psi / (kappa * alpha) * (1.0 - (1.0 - kappa).powi(td))
    };
    r.clamp(0.0, 1.0)
}

fn bound_formula() -> Outcome {
    let p = RoomParams::rooms15();
    let spec = room_network(15, &p).unwrap();
    let certs: Vec<StorageCertificate> = spec
        .subsystems()
        .iter()
        .map(|s| certify(s, &CertificateParams::room(0.99, 0.04, 0.1), 0.005).unwrap())
        .collect();
    let grids: Vec<Grid> = spec
        .subsystems()
        .iter()
        .map(|s| Grid::partition_box(s.state_box().clone(), vec![400]).unwrap())
        .collect();
    let v0 = initial_storage(&certs, spec.mu(), &vec![vec![20.0]; 15], &grids).map_err(|e| e.to_string())?;
    let params = SimulationFunctionParams::new(0.01, 0.019125, 1.0, vec![1.0; 15]).map_err(|e| e.to_string())?;
    ensure((params.alpha(0.63) - 0.3969).abs() < 1e-12, "alpha(0.63)")?;
    let b = closeness_bound(&params, v0, 0.63, 10).map_err(|e| e.to_string())?;
    let oracle = bound_oracle(0.01, 0.019125, 0.3969, 15.0 * 0.0025f64.powi(2), 10);
    ensure((v0 - 15.0 * 0.0025f64.powi(2)).abs() < 1e-15, format!("V0 {v0}"))?;
    ensure((b.value - oracle).abs() < 1e-12, format!("bound {} vs oracle {oracle}", b.value))?;
    ensure((b.value - 0.4608).abs() < 1e-3, format!("bound {}", b.value))?;
    ensure(b.branch == BoundBranch::Small, "branch")?;
    Ok(format!(
        "bound {:.5} (oracle {:.5}, V0 {:.4e}); the formula gives confidence {:.3} at epsilon 0.63, not 0.90",
        b.value,
        oracle,
        v0,
        1.0 - b.value
    ))
}

// ---------------------------------------------------------------------------
// 5

fn unit_grid(n: usize) -> Grid {
    Grid::partition_box(IntervalBox::interval(0.0, n as f64).unwrap(), vec![n]).unwrap()
}

fn random_mdp(rng: &mut ChaCha8Rng, n: usize, nu: usize, nw: usize) -> FiniteMdp {
    let rows = (0..n * nu * nw)
        .map(|_| {
            let raw: Vec<f64> = (0..=n)
                .map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.0..1.0) })
                .collect();
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let mut row = ProbabilityRow::default();
            for (c, v) in raw[..n].iter().enumerate() {
                if *v > 0.0 {
                    row.cells.push(c as u32);
                    row.probs.push(v / total);
                }
            }
            row.sink = 1.0 - row.probs.iter().sum::<f64>();
            row
        })
        .collect();
    FiniteMdp::from_rows(unit_grid(n), unit_grid(nu), unit_grid(nw), rows).unwrap()
}

/// Best value per initial state over every deterministic Markov policy,
/// each evaluated against the adversary's backward best response.
fn enumerate_policies(mdp: &FiniteMdp, mask: &[bool], td: usize, internals: &[usize]) -> Vec<f64> {
    let n = mdp.n_states();
    let nu = mdp.n_inputs();
    let rows: Vec<Vec<Vec<ProbabilityRow>>> = (0..n)
        .map(|s| (0..nu).map(|u| internals.iter().map(|&w| mdp.row(s, u, w)).collect()).collect())
        .collect();
    let safe: Vec<usize> = (0..n).filter(|s| mask[*s]).collect();
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut terminal: Vec<f64> = mask.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    terminal.push(0.0);

    fn step(
        k: usize,
        next: &[f64],
        rows: &[Vec<Vec<ProbabilityRow>>],
        safe: &[usize],
        nu: usize,
        best: &mut [f64],
    ) {
        let n = next.len() - 1;
        let combos = nu.pow(safe.len() as u32);
        let mut cur = vec![0.0; n + 1];
        for code in 0..combos {
            let mut c = code;
            for &s in safe {
                let u = c % nu;
                c /= nu;
                let worst = rows[s][u]
                    .iter()
                    .map(|r| {
                        let mut acc = 0.0;
                        for (cell, p) in r.cells.iter().zip(&r.probs) {
                            acc += p * next[*cell as usize];
                        }
                        acc + r.sink * 0.0
                    })
                    .fold(f64::INFINITY, f64::min);
                cur[s] = worst.clamp(0.0, 1.0);
            }
            if k == 0 {
                for &s in safe {
                    best[s] = best[s].max(cur[s]);
                }
            } else {
                step(k - 1, &cur, rows, safe, nu, best);
            }
        }
    }
    step(td - 1, &terminal, &rows, &safe, nu, &mut best);
    for s in 0..n {
        if !mask[s] {
            best[s] = 0.0;
        }
    }
    best
}

fn synthesis_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..50 {
        let n = rng.random_range(1..=4);
        let nu = rng.random_range(1..=3);
        let nw = rng.random_range(1..=2);
        let td = rng.random_range(1..=4);
        let mdp = random_mdp(&mut rng, n, nu, nw);
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        mask[rng.random_range(0..n)] = true;
        let safe = SafeSet::Mask(mask.clone());
        let robust = safety_value_iteration(&mdp, &safe, td, SynthesisMode::Robust).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..nw).collect();
        let oracle = enumerate_policies(&mdp, &mask, td, &all);
        let w0 = rng.random_range(0..nw);
        let nominal =
            safety_value_iteration(&mdp, &safe, td, SynthesisMode::Nominal { internal: w0 }).map_err(|e| e.to_string())?;
        let oracle_n = enumerate_policies(&mdp, &mask, td, &[w0]);
        for s in 0..n {
            ensure(
                robust.value(0, s) == oracle[s],
                format!("case {case}: robust value {} vs enumeration {} at state {s}", robust.value(0, s), oracle[s]),
            )?;
            ensure(
                nominal.value(0, s) == oracle_n[s],
                format!("case {case}: nominal value {} vs enumeration {} at state {s}", nominal.value(0, s), oracle_n[s]),
            )?;
        }
    }
    let random_time = t.elapsed();
    within(random_time, 60.0, "random MDP enumeration")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(load_config("rooms3.toml"), Some(dir.path().to_path_buf()), None).map_err(|e| e.to_string())?;
    let (_, code) = pipeline.run(&[Stage::Abstract, Stage::Certify, Stage::Synth], true);
    ensure(code == 0, format!("desk pipeline exit code {code}"))?;
    let controllers = pipeline.controllers().map_err(|e| e.to_string())?;
    let policy = controllers[0].policy();
    let grid = controllers[0].state_grid();
    let inputs: Vec<f64> = (0..grid.len())
        .map(|s| controllers[0].input_grid().representative(policy.action(0, s).unwrap())[0])
        .collect();
    let values = policy.values_at(0);
    let rises = inputs.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    let (arg, vmax) = (0..grid.len()).fold((0, f64::NEG_INFINITY), |a, s| if values[s] > a.1 { (s, values[s]) } else { a });
    ensure(inputs[0] > inputs[grid.len() - 1], "input does not decrease across the band")?;
    ensure(rises * 20 <= grid.len(), format!("{rises} increases along {} cells", grid.len()))?;
    ensure(arg > 0 && arg + 1 < grid.len(), "value maximum on the boundary")?;
    ensure(values[0] < vmax && values[grid.len() - 1] < vmax, "flat value")?;
    Ok(format!(
        "50 random MDPs equal to enumeration in both modes ({:.2}s); desk policy {:.2} -> {:.2} with {rises} local increases, value max {:.4} at {:.4}, ends {:.4}/{:.4}",
        random_time.as_secs_f64(),
        inputs[0],
        inputs[grid.len() - 1],
        vmax,
        grid.representative(arg)[0],
        values[0],
        values[grid.len() - 1]
    ))
}

// ---------------------------------------------------------------------------
// 6

/// `sup_k ‖y(k) − ŷ(k)‖` recomputed from the stored states (`C₁ = 1`).
fn max_output_deviation(batch: &TrajectoryBatch, t: usize) -> f64 {
    let n = batch.n_subsystems();
    (0..=batch.horizon)
        .map(|k| {
            (0..n)
                .map(|i| {
                    let d = batch.state(t, k, i)[0] - batch.abstract_state(t, k, i)[0];
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

fn soundness_for(name: &str, limit_s: f64) -> Result<String, String> {
    let t = Instant::now();
    let cfg = load_config(name);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(cfg.clone(), Some(dir.path().to_path_buf()), None).map_err(|e| e.to_string())?;
    let (outcomes, code) = pipeline.run(&Stage::ALL, true);
    ensure(code == 0, format!("{name}: exit code {code}: {:?}", outcomes.last().map(|o| &o.lines)))?;

    let spec = pipeline.spec();
    let n = spec.len();
    let controllers = pipeline.controllers().map_err(|e| e.to_string())?;
    let per_sub: Vec<&Controller> = (0..n).map(|_| &controllers[0]).collect();
    let x0 = vec![vec![20.0]; n];
    let opts = SimulationOptions::new(10, cfg.simulation.n_traj, cfg.simulation.seed);
    ensure(opts.n_traj >= 10_000, "fewer than 10^4 trajectories")?;
    let batch = simulate_closed_loop(spec, &per_sub, pipeline.m_hat(), &x0, &opts).map_err(|e| e.to_string())?;
    let dev: Vec<f64> = (0..batch.n_traj).map(|t| max_output_deviation(&batch, t)).collect();

    let psi = (1.0 + 2.0 / 0.04) * 0.005f64.powi(2);
    let v0 = n as f64 * 0.0025f64.powi(2);
    let mut parts = Vec::new();
    for eps in [0.3, 0.63, 1.0] {
        let bound = bound_oracle(0.01, n as f64 * psi, eps * eps, v0, 10);
        let count = dev.iter().filter(|d| **d >= eps).count();
        let freq = count as f64 / batch.n_traj as f64;
        let se = (bound * (1.0 - bound) / batch.n_traj as f64).sqrt();
        ensure(
            freq <= bound + 3.0 * se,
            format!("{name}: epsilon {eps}: frequency {freq} above bound {bound} + 3se"),
        )?;
        parts.push(format!("eps {eps}: {count}/{} vs bound {:.4}", batch.n_traj, bound));
    }
    let worst = dev.iter().copied().fold(0.0, f64::max);
    within(t.elapsed(), limit_s, name)?;
    Ok(format!(
        "{n} rooms: {} (largest deviation {:.4}), {:.1}s",
        parts.join(", "),
        worst,
        t.elapsed().as_secs_f64()
    ))
}

fn end_to_end_soundness() -> Outcome {
    let a = soundness_for("rooms3.toml", 120.0)?;
    let b = soundness_for("rooms15.toml", 1200.0)?;
    Ok(format!("{a}; {b}"))
}

// ---------------------------------------------------------------------------
// 7

fn drift_audit() -> Outcome {
    let t = Instant::now();
    let p = RoomParams::rooms15();
    let spec = room_network(15, &p).unwrap();
    let room = &spec.subsystems()[0];
    let state_grids: Vec<Grid> = spec
        .subsystems()
        .iter()
        .map(|s| Grid::partition_box(s.state_box().clone(), vec![400]).unwrap())
        .collect();
    let internal = construct_internal_grids(&spec, spec.coupling(), &state_grids).map_err(|e| e.to_string())?;
    let inputs = Grid::partition_box(room.input_box().clone(), vec![15]).unwrap();
    let cert = certify(room, &CertificateParams::room(0.99, 0.04, 0.1), state_grids[0].delta()).map_err(|e| e.to_string())?;
    let report = empirical_supermartingale_check(room, &cert, &state_grids[0], &inputs, &internal[0], 1000, 10_000, 1)
        .map_err(|e| e.to_string())?;
    ensure(report.violations == 0, format!("{} violations", report.violations))?;
    let weak = certify(room, &CertificateParams::room(0.5, 0.04, 0.1), state_grids[0].delta()).map_err(|e| e.to_string())?;
    let control = empirical_supermartingale_check(room, &weak, &state_grids[0], &inputs, &internal[0], 1000, 10_000, 1)
        .map_err(|e| e.to_string())?;
    ensure(control.violations > 0, "kappa 0.5 control found no violations")?;
    within(t.elapsed(), 300.0, "drift audit")?;
    Ok(format!(
        "0 violations over 1000 points x 10000 draws (worst slack {:.3e}); kappa 0.5 control: {} violations, {:.1}s",
        report.worst.slack(),
        control.violations,
        t.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 8

fn scalability() -> Outcome {
    let t = Instant::now();
    let cfg = load_config("rooms200.toml");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(cfg.clone(), Some(dir.path().to_path_buf()), None).map_err(|e| e.to_string())?;
    ensure(pipeline.n_classes() == 1, format!("{} MDP classes", pipeline.n_classes()))?;
    let (_, code) = pipeline.run(&[Stage::Abstract, Stage::Certify, Stage::Compose], true);
    ensure(code == 0, format!("abstract/compose exit code {code}"))?;
    let build = t.elapsed();
    within(build, 300.0, "200-room abstraction and composition")?;

    let t2 = Instant::now();
    let (_, code) = pipeline.run(&[Stage::Bound, Stage::Synth, Stage::Simulate], true);
    ensure(code == 0, format!("synth/simulate exit code {code}"))?;
    let controllers = pipeline.controllers().map_err(|e| e.to_string())?;
    let per_sub: Vec<&Controller> = (0..200).map(|_| &controllers[0]).collect();
    let batch = simulate_closed_loop(
        pipeline.spec(),
        &per_sub,
        pipeline.m_hat(),
        &vec![vec![20.0]; 200],
        &SimulationOptions::new(10, 1000, cfg.simulation.seed),
    )
    .map_err(|e| e.to_string())?;
    within(t2.elapsed(), 600.0, "200-room simulation")?;
    let steps = (batch.n_traj * batch.horizon * 200) as f64;
    let leave = batch.total_leave_events() as f64 / steps;
    let rep: Vec<f64> = (0..batch.n_traj).map(|t| batch.state(t, batch.horizon, 0)[0]).collect();
    let mean = rep.iter().sum::<f64>() / rep.len() as f64;
    ensure(leave < 0.01, format!("{:.3}% of steps leave the band", 100.0 * leave))?;
    ensure((19.0..=21.0).contains(&mean), format!("final mean {mean}"))?;
    Ok(format!(
        "one shared MDP, abstraction + composition {:.1}s, 1000 x 10 simulation + synthesis {:.1}s, {:.3}% band exits, representative room final mean {:.3}",
        build.as_secs_f64(),
        t2.elapsed().as_secs_f64(),
        100.0 * leave,
        mean
    ))
}

// ---------------------------------------------------------------------------
// 9

fn determinism() -> Outcome {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let pipeline =
            Pipeline::new(load_config("rooms3.toml"), Some(dir.path().to_path_buf()), None).map_err(|e| e.to_string())?;
        let (_, code) = pipeline.run(&Stage::ALL, true);
        ensure(code == 0, format!("exit code {code}"))?;
        let read = |f: &str| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string());
        outputs.push((read("trajectories.csv")?, read("policy_c0.csv")?));
    }
    ensure(outputs[0].0 == outputs[1].0, "trajectories.csv differs")?;
    ensure(outputs[0].1 == outputs[1].1, "policy_c0.csv differs")?;
    Ok(format!(
        "trajectories.csv ({} bytes) and policy_c0.csv ({} bytes) byte-identical across two runs",
        outputs[0].0.len(),
        outputs[0].1.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("kernel oracle equivalence", kernel_oracle),
        ("certificate reproduction", certificate_reproduction),
        ("compositionality", compositionality),
        ("bound formula", bound_formula),
        ("synthesis oracle", synthesis_oracle),
        ("end-to-end soundness", end_to_end_soundness),
        ("drift audit", drift_audit),
        ("scalability", scalability),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(msg) => println!("criterion {} ({name}): PASS: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL: {msg}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
