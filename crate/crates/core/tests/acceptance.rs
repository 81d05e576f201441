//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safelearn::edmd::{edmd_fit, BilinearSurrogate, Dictionary, SnapshotSet, EDMD_PINV_TOL};
use safelearn::experiments::{
    run_fl_demo, run_kedmd_convergence, run_sampling_pass, run_setpoint, run_stabilization, validate_trace, zoh_affinity_error, Scenario,
    ScenarioConfig,
};
use safelearn::funnel::{ActivationWindow, SafeguardMode};
use safelearn::kedmd::{fill_distance, plan_reference, square_grid};
use safelearn::koopman_mpc::{objective_and_gradient, OcpProblem, StageCost};
use safelearn::numerics::BoxConstraint;
use safelearn::system::ControlAffineSystem;
use safelearn::{Error, Matrix};

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn safeguard_invariant() -> Outcome {
    let mut notes = Vec::new();
    for scenario in [Scenario::Stabilization, Scenario::Setpoint10, Scenario::Setpoint1] {
        let cfg = ScenarioConfig::defaults(scenario);
        let (run, took) = timed(|| match scenario {
            Scenario::Stabilization => run_stabilization(&cfg, 0),
            _ => run_setpoint(&cfg, 0),
        });
        let run = run.map_err(|e| format!("{scenario}: {e}"))?;
        let rep = validate_trace(&run.trace).map_err(|e| e.to_string())?;
        if !rep.passed() {
            return Err(format!("{scenario}: {} rows outside the funnel", rep.violations.len()));
        }
        if took > Duration::from_secs(60) {
            return Err(format!("{scenario}: took {took:?}"));
        }
        let rows = &run.trace.rows;
        let handover = run.handover.unwrap_or(f64::INFINITY);
        match scenario {
            Scenario::Stabilization => {
                if !rows.iter().any(|r| r.t < handover && r.a_tau > 0.0) {
                    return Err("stabilization: safeguard never intervened during exploration".into());
                }
            }
            Scenario::Setpoint10 => {
                if !rows.iter().any(|r| (6.0..=14.0).contains(&r.t) && r.a_tau > 0.0) {
                    return Err("setpoint10: no activation in [6, 14]".into());
                }
            }
            _ => {
                if rows.iter().any(|r| r.mu.abs() > cfg.u_max + 1e-9) {
                    return Err("setpoint1: recorded μ leaves U".into());
                }
            }
        }
        if rows.iter().filter(|r| r.t >= 18.0).any(|r| (r.x1 - r.y_ref).abs() >= 0.3) {
            return Err(format!("{scenario}: |y − y_ref| ≥ 0.3 after t = 18"));
        }
        notes.push(format!("{scenario} margin {:.3} in {:.1}s", rep.min_margin, took.as_secs_f64()));
    }
    Ok(notes.join(", "))
}

fn safeguard_ablation() -> Outcome {
    let cfg = ScenarioConfig {
        safeguard: SafeguardMode::Disabled,
        probe_only: true,
        ..ScenarioConfig::defaults(Scenario::Stabilization)
    };
    match run_stabilization(&cfg, 0) {
        Err(Error::FunnelViolation { t, .. }) => Ok(format!("probe-only run without safeguard leaves the funnel at t = {t:.2}")),
        Err(e) => Err(format!("unexpected error {e}")),
        Ok(run) => {
            let rep = validate_trace(&run.trace).map_err(|e| e.to_string())?;
            check(
                !rep.passed(),
                format!("{} violating rows", rep.violations.len()),
                "no violation without safeguard".into(),
            )
        }
    }
}

fn fundamental_lemma() -> Outcome {
    let cfg = ScenarioConfig::defaults(Scenario::FlDemo);
    let (rows, took) = timed(|| run_fl_demo(&cfg, 0));
    let rows = rows.map_err(|e| e.to_string())?;
    let fwd = rows.iter().map(|r| r.forward_residual).fold(0.0, f64::max);
    let bwd = rows.iter().map(|r| r.backward_mismatch).fold(0.0, f64::max);
    let pe = rows.iter().all(|r| r.pe_at_order && !r.pe_beyond_capacity);
    let msg = format!(
        "{} systems, forward {fwd:.1e}, backward {bwd:.1e}, {:.2}s",
        rows.len(),
        took.as_secs_f64()
    );
    check(
        rows.len() == 100 && fwd <= 1e-8 && bwd <= 1e-8 && pe && took <= Duration::from_secs(30),
        msg.clone(),
        msg,
    )
}

fn edmd_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for n in 1..=3 {
        let dict = Dictionary::monomials(n, 1).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let mut snap = SnapshotSet::new(vec![0.0], 0.1);
            for _ in 0..=dict.len() {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = (&a * nalgebra::DVector::from_vec(x.clone())).as_slice().to_vec();
                snap.push(x, y);
            }
            let k = edmd_fit(&snap, &dict, EDMD_PINV_TOL).map_err(|e| e.to_string())?.k;
            let mut truth = Matrix::zeros(n + 1, n + 1);
            truth[(0, 0)] = 1.0;
            truth.view_mut((1, 1), (n, n)).copy_from(&a);
            worst = worst.max((k - truth).abs().max());
        }
    }
    check(
        worst <= 1e-10,
        format!("max operator error {worst:.1e}"),
        format!("operator error {worst:.1e}"),
    )
}

fn zoh_order() -> Outcome {
    let e1 = zoh_affinity_error(0.1, 0.05, 200, 200, 7).map_err(|e| e.to_string())?;
    let e2 = zoh_affinity_error(0.1, 0.025, 200, 200, 7).map_err(|e| e.to_string())?;
    let ratio = e1 / e2;
    let msg = format!("error {e1:.2e} -> {e2:.2e}, ratio {ratio:.2}");
    check((3.0..=5.0).contains(&ratio), msg.clone(), msg)
}

fn ocp_gradient() -> Outcome {
    let sys = ControlAffineSystem::van_der_pol(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<Vec<f64>> = (0..60)
        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let dict = Dictionary::monomials(2, 3).map_err(|e| e.to_string())?;
    let sur = BilinearSurrogate::fit(
        &SnapshotSet::generate(&sys, &pts, &[0.0], 0.05, 10).map_err(|e| e.to_string())?,
        &[SnapshotSet::generate(&sys, &pts, &[1.0], 0.05, 10).map_err(|e| e.to_string())?],
        &dict,
        EDMD_PINV_TOL,
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let horizon = rng.random_range(2..=10);
        let p = OcpProblem {
            surrogate: &sur,
            horizon,
            bounds: BoxConstraint::symmetric(2.0, 1).map_err(|e| e.to_string())?,
            x0: vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            k: rng.random_range(0..40),
        };
        let target = rng.random_range(-1.0..1.0);
        let cost = StageCost::new(
            Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1e4, 1.0])),
            Matrix::from_element(1, 1, 1e-4),
            Arc::new(move |k| vec![target + 0.01 * k as f64, 0.0]),
        )
        .map_err(|e| e.to_string())?;
        let u: Vec<f64> = (0..horizon).map(|_| rng.random_range(-1.9..1.9)).collect();
        let (_, g) = objective_and_gradient(&p, &cost, &u).map_err(|e| e.to_string())?;
        let scale = g.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for i in 0..horizon {
            let h = 1e-6;
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += h;
            um[i] -= h;
            let fp = objective_and_gradient(&p, &cost, &up).map_err(|e| e.to_string())?.0;
            let fm = objective_and_gradient(&p, &cost, &um).map_err(|e| e.to_string())?.0;
            worst = worst.max((g[i] - (fp - fm) / (2.0 * h)).abs() / scale);
        }
    }
    check(
        worst <= 1e-4,
        format!("50 instances, worst relative error {worst:.1e}"),
        format!("relative error {worst:.1e}"),
    )
}

fn fill_distance_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst_slack = f64::INFINITY;
    for _ in 0..20 {
        let count = rng.random_range(3..30);
        let pts: Vec<Vec<f64>> = (0..count)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let coarse = fill_distance(&pts, &[-1.0, -1.0], &[1.0, 1.0], 60).map_err(|e| e.to_string())?;
        let fine = fill_distance(&pts, &[-1.0, -1.0], &[1.0, 1.0], 120).map_err(|e| e.to_string())?;
        let slack = coarse.grid_bound - (coarse.value - fine.value).abs();
        worst_slack = worst_slack.min(slack);
    }
    check(
        worst_slack >= 0.0,
        format!("20 sets within bound, min slack {worst_slack:.2e}"),
        format!("bound exceeded by {:.2e}", -worst_slack),
    )
}

fn kedmd_decay() -> Outcome {
    let cfg = ScenarioConfig::defaults(Scenario::KedmdConvergence);
    let levels = run_kedmd_convergence(&cfg).map_err(|e| e.to_string())?;
    let fill_down = levels.windows(2).all(|w| w[1].fill_distance < w[0].fill_distance);
    let err_down = levels.windows(2).all(|w| w[1].max_error <= w[0].max_error);
    let interp = levels.iter().map(|l| l.interpolation_residual).fold(0.0, f64::max);
    let msg = levels
        .iter()
        .map(|l| format!("{}²: h {:.3} err {:.3e}", l.grid, l.fill_distance, l.max_error))
        .collect::<Vec<_>>()
        .join(", ")
        + &format!(", interpolation {interp:.1e}");
    check(levels.len() == 3 && fill_down && err_down && interp <= 1e-8, msg.clone(), msg)
}

fn sampling_pass() -> Outcome {
    // Virtual points (y, ẏ) visited in snake order.
    let grid = square_grid(3, -0.5, 0.5);
    let mut points = Vec::new();
    for row in 0..3 {
        let mut line: Vec<Vec<f64>> = grid
            .iter()
            .filter(|p| (p[1] - (-0.5 + 0.5 * row as f64)).abs() < 1e-12)
            .cloned()
            .collect();
        if row % 2 == 1 {
            line.reverse();
        }
        points.extend(line);
    }
    let eps_c = 1e-2;
    let plan = plan_reference(&points, 1.0, eps_c, 1.0).map_err(|e| e.to_string())?;
    let pass = run_sampling_pass(&plan, 0.1, 100, 400).map_err(|e| e.to_string())?;
    let worst = pass.knot_distances.iter().copied().fold(0.0, f64::max);
    let bound = 3.0 / pass.sigma;
    let msg = format!("{} knots, worst distance {worst:.2e} < 3/σ = {bound:.2e} ≤ ε_c", points.len());
    check(
        worst < bound && bound <= eps_c + 1e-15 && pass.knot_distances.len() == points.len(),
        msg.clone(),
        msg,
    )
}

fn dwell_time() -> Outcome {
    let dt_log = 0.001;
    let tau = 0.025;
    let t0 = 0.3;
    let spike = (t0 / dt_log) as usize;
    let mut w = ActivationWindow::new(tau, 0.75).map_err(|e| e.to_string())?;
    let mut active = Vec::new();
    for k in 0..1000 {
        let t = k as f64 * dt_log;
        let a = w.activation(t, if k == spike { 0.95 } else { 0.1 }).map_err(|e| e.to_string())?;
        if a > 0.0 {
            active.push(t);
        }
    }
    let (first, last) = (active[0], *active.last().unwrap());
    let contiguous = active.windows(2).all(|p| (p[1] - p[0] - dt_log).abs() < 1e-9);
    let msg = format!("active on [{first:.3}, {last:.3}] for spike at {t0}, τ = {tau}");
    check(
        contiguous && (first - t0).abs() <= dt_log && (last - (t0 + tau)).abs() <= dt_log,
        msg.clone(),
        msg,
    )
}

fn determinism() -> Outcome {
    let cfg = ScenarioConfig::defaults(Scenario::Setpoint10);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for i in 0..2 {
        let run = run_setpoint(&cfg, 42).map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("run{i}.csv"));
        run.trace.write(&p).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(&p).map_err(|e| e.to_string())?);
    }
    check(
        bytes[0] == bytes[1],
        format!("two runs, {} identical bytes", bytes[0].len()),
        "trace CSVs differ".into(),
    )
}

fn main() {
    let criteria: [(&str, Criterion); 11] = [
        ("safeguard invariant on all three scenarios", safeguard_invariant),
        ("safeguard ablation produces a violation", safeguard_ablation),
        ("fundamental lemma round trips", fundamental_lemma),
        ("EDMD exactness on linear systems", edmd_exactness),
        ("bilinear ZOH error order", zoh_order),
        ("OCP gradient vs finite differences", ocp_gradient),
        ("fill distance grid certification", fill_distance_oracle),
        ("kernel EDMD decay on nested grids", kedmd_decay),
        ("sampling plan visits every virtual point", sampling_pass),
        ("activation dwell time", dwell_time),
        ("deterministic trace CSV", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", 11 - failed, 11);
    if failed > 0 {
        std::process::exit(1);
    }
}
