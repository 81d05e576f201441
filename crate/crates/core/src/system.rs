//! Plants and the closed-loop simulator.
//!
//! [`ControlAffineSystem`] covers second-order systems
//! `ẋ₁ = x₂, ẋ₂ = g₀(x) + G(x)u` with output `y = x₁`; [`DiscreteLti`] is the
//! discrete linear counterpart with the same relative-degree-two block
//! structure.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{self, rk4_step, Matrix, DEFAULT_RANK_TOL};

pub type DriftFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type InputMapFn = Arc<dyn Fn(&[f64]) -> Matrix + Send + Sync>;

/// `ẋ₁ = x₂`, `ẋ₂ = g₀(x₁, x₂) + G(x₁, x₂) u`, `y = x₁`, with `x₁, x₂, u ∈ ℝᵐ`.
#[derive(Clone)]
pub struct ControlAffineSystem {
    m: usize,
    drift: DriftFn,
    input_map: InputMapFn,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem").field("m", &self.m).finish_non_exhaustive()
    }
}

impl ControlAffineSystem {
    pub fn new(m: usize, drift: DriftFn, input_map: InputMapFn) -> Self {
        Self { m, drift, input_map }
    }

    /// Forced Van der Pol oscillator with damping `nu`.
    pub fn van_der_pol(nu: f64) -> Self {
        Self::new(
            1,
            Arc::new(move |x: &[f64]| vec![nu * (1.0 - x[0] * x[0]) * x[1] - x[0]]),
            Arc::new(|_x: &[f64]| Matrix::identity(1, 1)),
        )
    }

    /// `ÿ = u` in every channel.
    pub fn double_integrator(m: usize) -> Self {
        Self::new(
            m,
            Arc::new(move |_x: &[f64]| vec![0.0; m]),
            Arc::new(move |_x: &[f64]| Matrix::identity(m, m)),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn state_dim(&self) -> usize {
        2 * self.m
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.drift)(x)
    }

    pub fn input_matrix(&self, x: &[f64]) -> Matrix {
        (self.input_map)(x)
    }

    pub fn field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let m = self.m;
        let g0 = (self.drift)(x);
        let g = (self.input_map)(x);
        let mut dx = Vec::with_capacity(2 * m);
        dx.extend_from_slice(&x[m..2 * m]);
        for i in 0..m {
            let mut acc = g0[i];
            for j in 0..m {
                acc += g[(i, j)] * u[j];
            }
            dx.push(acc);
        }
        dx
    }

    /// Spot check of `⟨z, G(x) z⟩ > 0` on the given states and directions.
    pub fn input_map_is_positive(&self, states: &[Vec<f64>], directions: &[Vec<f64>]) -> bool {
        states.iter().all(|x| {
            let g = (self.input_map)(x);
            directions
                .iter()
                .filter(|z| numerics::norm(z) > 0.0)
                .all(|z| numerics::quad_form(&g, z) > 0.0)
        })
    }

    pub fn output<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..self.m]
    }

    pub fn output_rate<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.m..2 * self.m]
    }
}

/// `(x₂, ν(1 − x₁²)x₂ − x₁ + u)`.
pub fn vdp_field(x: [f64; 2], u: f64, nu: f64) -> [f64; 2] {
    [x[1], nu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u]
}

/// Flow of the system over `[0, dt]` under the constant input `u`.
pub fn sampled_flow(sys: &ControlAffineSystem, x: &[f64], u: &[f64], dt: f64, substeps: usize) -> Result<Vec<f64>> {
    if !(dt > 0.0) || substeps == 0 {
        return Err(Error::InvalidInput("sampled flow needs dt > 0 and at least one substep".into()));
    }
    if x.len() != sys.state_dim() || u.len() != sys.input_dim() {
        return Err(Error::InvalidInput("state or input dimension mismatch".into()));
    }
    let h = dt / substeps as f64;
    let mut field = |_t: f64, s: &[f64]| Ok(sys.field(s, u));
    let mut state = x.to_vec();
    for j in 0..substeps {
        state = rk4_step(&mut field, j as f64 * h, &state, h)?;
    }
    Ok(state)
}

/// Per-sample controller internals logged alongside the state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub mu: Vec<f64>,
    pub u_fc: Vec<f64>,
    pub a_tau: f64,
    pub data_count: usize,
    pub model_version: usize,
}

/// Continuous-time feedback evaluated at every integrator stage.
pub trait Controller {
    /// Called at each log instant before the next interval is integrated.
    /// Sampled-data components (zero-order hold) update here.
    fn sample(&mut self, _t: f64, _x: &[f64]) -> Result<()> {
        Ok(())
    }

    fn input(&mut self, t: f64, x: &[f64]) -> Result<Vec<f64>>;

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics::default()
    }
}

impl<F> Controller for F
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    fn input(&mut self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self(t, x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimulationOptions {
    pub t_end: f64,
    pub dt_log: f64,
    pub substeps: usize,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            t_end: 20.0,
            dt_log: 0.05,
            substeps: 10,
        }
    }
}

/// Logged closed-loop signals on a uniform grid.
///
/// `inputs[k]` and `diagnostics[k]` are the feedback values at `(times[k],
/// states[k])`; the last entry is evaluated at the final state and never
/// applied.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub diagnostics: Vec<Diagnostics>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Integrates the plant with the feedback evaluated inside every RK4 stage.
pub fn simulate_closed_loop<C: Controller + ?Sized>(
    sys: &ControlAffineSystem,
    x0: &[f64],
    controller: &mut C,
    opts: &SimulationOptions,
) -> Result<Trajectory> {
    if !(opts.dt_log > 0.0) || opts.substeps == 0 || !(opts.t_end >= 0.0) {
        return Err(Error::InvalidInput("simulation needs dt_log > 0, t_end ≥ 0, substeps ≥ 1".into()));
    }
    if x0.len() != sys.state_dim() {
        return Err(Error::InvalidInput("initial state has wrong dimension".into()));
    }
    let steps = (opts.t_end / opts.dt_log).round() as usize;
    let h = opts.dt_log / opts.substeps as f64;
    let mut traj = Trajectory::default();
    let mut x = x0.to_vec();

    for k in 0..=steps {
        let t_k = k as f64 * opts.dt_log;
        controller.sample(t_k, &x)?;
        let u = controller.input(t_k, &x)?;
        if u.len() != sys.input_dim() || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("controller returned an invalid input at t = {t_k}")));
        }
        traj.times.push(t_k);
        traj.states.push(x.clone());
        traj.inputs.push(u);
        traj.diagnostics.push(controller.diagnostics());
        if k == steps {
            break;
        }
        let mut field = |t: f64, s: &[f64]| -> Result<Vec<f64>> {
            let u = controller.input(t, s)?;
            Ok(sys.field(s, &u))
        };
        for j in 0..opts.substeps {
            x = rk4_step(&mut field, t_k + j as f64 * h, &x, h)?;
        }
    }
    Ok(traj)
}

/// `x⁺ = Ax + Bu`, `y = Cx` with `A = [0 I; A₁ A₂]`, `B = [0; B₁]`, `C = [I 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLti {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl DiscreteLti {
    pub fn from_blocks(a1: &Matrix, a2: &Matrix, b1: &Matrix) -> Result<Self> {
        let m = b1.nrows();
        if b1.ncols() != m || a1.shape() != (m, m) || a2.shape() != (m, m) {
            return Err(Error::InvalidInput("LTI blocks must all be m×m".into()));
        }
        if !numerics::is_positive_definite(b1) {
            return Err(Error::InvalidInput("B₁ must be positive definite".into()));
        }
        let n = 2 * m;
        let mut a = Matrix::zeros(n, n);
        a.view_mut((0, m), (m, m)).copy_from(&Matrix::identity(m, m));
        a.view_mut((m, 0), (m, m)).copy_from(a1);
        a.view_mut((m, m), (m, m)).copy_from(a2);
        let mut b = Matrix::zeros(n, m);
        b.view_mut((m, 0), (m, m)).copy_from(b1);
        let mut c = Matrix::zeros(m, n);
        c.view_mut((0, 0), (m, m)).copy_from(&Matrix::identity(m, m));
        Ok(Self { a, b, c })
    }

    /// Random instance with spectral radius below `0.95` and a
    /// well-conditioned positive definite `B₁`.
    pub fn random<R: Rng>(rng: &mut R, m: usize) -> Self {
        loop {
            let a1 = Matrix::from_fn(m, m, |_, _| rng.random_range(-0.9..0.9));
            let a2 = Matrix::from_fn(m, m, |_, _| rng.random_range(-0.9..0.9));
            let r = Matrix::from_fn(m, m, |_, _| rng.random_range(-0.5..0.5));
            let b1 = &r * r.transpose() + Matrix::identity(m, m) * rng.random_range(0.5..1.5);
            let sys = Self::from_blocks(&a1, &a2, &b1).expect("blocks are well formed");
            let radius = sys.a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            if radius < 0.95 {
                return sys;
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xv = DVector::from_column_slice(x);
        let uv = DVector::from_column_slice(u);
        let next = &self.a * &xv + &self.b * uv;
        let y = &self.c * xv;
        (next.iter().copied().collect(), y.iter().copied().collect())
    }

    /// Outputs `y₀ … y_{T−1}` for the input sequence `u₀ … u_{T−1}`.
    pub fn simulate(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut x = x0.to_vec();
        inputs
            .iter()
            .map(|u| {
                let (next, y) = self.step(&x, u);
                x = next;
                y
            })
            .collect()
    }

    pub fn controllability_matrix(&self) -> Matrix {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut out = Matrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for k in 0..n {
            out.view_mut((0, k * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        out
    }

    pub fn observability_matrix(&self) -> Matrix {
        let n = self.state_dim();
        let p = self.output_dim();
        let mut out = Matrix::zeros(n * p, n);
        let mut block = self.c.clone();
        for k in 0..n {
            out.view_mut((k * p, 0), (p, n)).copy_from(&block);
            block *= &self.a;
        }
        out
    }

    pub fn is_minimal(&self) -> bool {
        let n = self.state_dim();
        (numerics::numerical_rank(&self.controllability_matrix(), 1e-10) == Ok(n))
            && (numerics::numerical_rank(&self.observability_matrix(), 1e-10) == Ok(n))
    }

    /// Least-squares initial state explaining `y` under `u` (`len ≥ 2`).
    pub fn estimate_initial_state(&self, inputs: &[Vec<f64>], outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.state_dim();
        let p = self.output_dim();
        let steps = outputs.len();
        let zero_state = vec![0.0; n];
        let forced = self.simulate(&zero_state, inputs);
        let mut obs = Matrix::zeros(steps * p, n);
        let mut rhs = DVector::zeros(steps * p);
        let mut block = self.c.clone();
        for k in 0..steps {
            obs.view_mut((k * p, 0), (p, n)).copy_from(&block);
            block *= &self.a;
            for i in 0..p {
                rhs[k * p + i] = outputs[k][i] - forced[k][i];
            }
        }
        let x0 = numerics::pseudo_inverse(&obs, DEFAULT_RANK_TOL)? * rhs;
        Ok(x0.iter().copied().collect())
    }
}
