//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Results cross the boundary as flat `Float64Array`s so the page needs no
//! serializer. Each function has a plain Rust twin returning `String` errors,
//! which is what the native tests call.

use wasm_bindgen::prelude::*;

use safelearn::experiments::{run_kedmd_convergence, run_sampling_pass, run_tracking, Scenario, ScenarioConfig};
use safelearn::funnel::SafeguardMode;
use safelearn::kedmd::plan_reference;

/// Columns per row of [`simulate`]: `t, y, y_ref, radius, a_tau, mu, u, d`.
pub const SIM_COLUMNS: usize = 8;
/// Columns per row of [`sampling_pass`]: `t, y, dy, y_ref, dy_ref`.
pub const PASS_COLUMNS: usize = 5;
/// Columns per row of [`kedmd_table`]: `grid, fill_distance, max_error, interpolation_residual`.
pub const KEDMD_COLUMNS: usize = 4;

fn parse_mode(s: &str) -> Result<SafeguardMode, String> {
    match s {
        "activated" => Ok(SafeguardMode::Activated),
        "disabled" => Ok(SafeguardMode::Disabled),
        "always-on" => Ok(SafeguardMode::AlwaysOn),
        _ => Err(format!("unknown safeguard mode {s:?}")),
    }
}

pub fn simulate_rows(scenario: &str, safeguard: &str, probe_only: bool, t_end: f64, seed: u64) -> Result<Vec<f64>, String> {
    let scenario: Scenario = scenario.parse().map_err(|e: safelearn::Error| e.to_string())?;
    if !matches!(scenario, Scenario::Stabilization | Scenario::Setpoint10 | Scenario::Setpoint1) {
        return Err(format!("{scenario} has no closed-loop trace"));
    }
    let cfg = ScenarioConfig {
        safeguard: parse_mode(safeguard)?,
        probe_only,
        t_end,
        ..ScenarioConfig::defaults(scenario)
    };
    let run = run_tracking(&cfg, seed).map_err(|e| e.to_string())?;
    Ok(run
        .trace
        .rows
        .iter()
        .flat_map(|r| [r.t, r.x1, r.y_ref, r.funnel_radius, r.a_tau, r.mu, r.u, r.d as f64])
        .collect())
}

pub fn sampling_pass_rows(points: &[f64], dt: f64, eps_c: f64) -> Result<Vec<f64>, String> {
    if points.len() < 2 || !points.len().is_multiple_of(2) {
        return Err("points must be (y, dy) pairs".into());
    }
    let pts: Vec<Vec<f64>> = points.chunks(2).map(<[f64]>::to_vec).collect();
    let plan = plan_reference(&pts, dt, eps_c, 1.0).map_err(|e| e.to_string())?;
    // Step well below the funnel time constant 1/σ.
    let logs = 50;
    let substeps = ((plan.sigma * dt / logs as f64) * 100.0).ceil().max(1.0) as usize;
    let pass = run_sampling_pass(&plan, 0.1, logs, substeps).map_err(|e| e.to_string())?;
    Ok(pass
        .trajectory
        .times
        .iter()
        .zip(&pass.trajectory.states)
        .flat_map(|(&t, x)| {
            let (y, dy, _) = plan.eval(t);
            [t, x[0], x[1], y[0], dy[0]]
        })
        .collect())
}

pub fn kedmd_rows(grids: &[u32]) -> Result<Vec<f64>, String> {
    let cfg = ScenarioConfig {
        kedmd_grids: grids.iter().map(|&g| g as usize).collect(),
        test_grid: 21,
        ..ScenarioConfig::defaults(Scenario::KedmdConvergence)
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let levels = run_kedmd_convergence(&cfg).map_err(|e| e.to_string())?;
    Ok(levels
        .iter()
        .flat_map(|l| [l.grid as f64, l.fill_distance, l.max_error, l.interpolation_residual])
        .collect())
}

/// Closed-loop Van der Pol run; rows of [`SIM_COLUMNS`] values.
#[wasm_bindgen]
pub fn simulate(scenario: &str, safeguard: &str, probe_only: bool, t_end: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    simulate_rows(scenario, safeguard, probe_only, t_end, u64::from(seed)).map_err(|e| JsError::new(&e))
}

/// Funnel pass through `(y, dy)` virtual points; rows of [`PASS_COLUMNS`].
#[wasm_bindgen]
pub fn sampling_pass(points: &[f64], dt: f64, eps_c: f64) -> Result<Vec<f64>, JsError> {
    sampling_pass_rows(points, dt, eps_c).map_err(|e| JsError::new(&e))
}

/// Kernel EDMD errors on square grids; rows of [`KEDMD_COLUMNS`].
#[wasm_bindgen]
pub fn kedmd_table(grids: &[u32]) -> Result<Vec<f64>, JsError> {
    kedmd_rows(grids).map_err(|e| JsError::new(&e))
}
