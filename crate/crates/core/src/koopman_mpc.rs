//! Receding-horizon MPC on the bilinear EDMD surrogate.
//!
//! The optimal control problem is solved by single shooting over the stacked
//! controls `ū(0..N−1)` with the box projected gradient method; the gradient
//! comes from an adjoint sweep through `x⁺ = S K_u Ψ(x)`.

use std::sync::Arc;

use crate::edmd::BilinearSurrogate;
use crate::error::{Error, Result};
use crate::funnel::{IntervalRecord, Predictor};
use crate::numerics::{self, minimize_box, BoxConstraint, Matrix, MinimizeOptions};

pub type StateReference = Arc<dyn Fn(usize) -> Vec<f64> + Send + Sync>;

/// `ℓ(k, x, u) = ‖x − x_ref(k)‖²_Q + ‖u‖²_R`.
#[derive(Clone)]
pub struct StageCost {
    pub q: Matrix,
    pub r: Matrix,
    pub reference: StateReference,
}

impl std::fmt::Debug for StageCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StageCost")
            .field("q", &self.q)
            .field("r", &self.r)
            .finish_non_exhaustive()
    }
}

impl StageCost {
    pub fn new(q: Matrix, r: Matrix, reference: StateReference) -> Result<Self> {
        if !q.is_square() || !r.is_square() {
            return Err(Error::InvalidInput("Q and R must be square".into()));
        }
        if !numerics::is_positive_definite(&q) || !numerics::is_positive_definite(&r) {
            return Err(Error::InvalidInput("Q and R must be symmetric positive definite".into()));
        }
        Ok(Self { q, r, reference })
    }

    pub fn eval(&self, k: usize, x: &[f64], u: &[f64]) -> f64 {
        let xr = (self.reference)(k);
        let e: Vec<f64> = x.iter().zip(&xr).map(|(a, b)| a - b).collect();
        numerics::quad_form(&self.q, &e) + numerics::quad_form(&self.r, u)
    }
}

/// Surrogate maps restricted to the coordinate rows: `S K₀` and `S(Kᵢ − K₀)`.
#[derive(Debug, Clone)]
struct ReducedModel {
    n: usize,
    m: usize,
    p: usize,
    /// Row-major `n × p`.
    base: Vec<f64>,
    deltas: Vec<Vec<f64>>,
}

impl ReducedModel {
    fn new(sur: &BilinearSurrogate) -> Self {
        let n = sur.state_dim();
        let p = sur.dict.len();
        let pick = |k: &Matrix| -> Vec<f64> { sur.selector.iter().flat_map(|&r| (0..p).map(move |c| k[(r, c)])).collect() };
        let base = pick(&sur.k0);
        let deltas = sur.k_inputs.iter().map(|ki| pick(&(ki - &sur.k0))).collect();
        Self {
            n,
            m: sur.input_dim(),
            p,
            base,
            deltas,
        }
    }

    /// Row-major `S K_u`.
    fn k_u(&self, u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.base);
        for (d, &ui) in self.deltas.iter().zip(u) {
            for (o, v) in out.iter_mut().zip(d) {
                *o += ui * v;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpProblem<'a> {
    pub surrogate: &'a BilinearSurrogate,
    pub horizon: usize,
    /// Bounds for one input sample, repeated over the horizon.
    pub bounds: BoxConstraint,
    pub x0: Vec<f64>,
    pub k: usize,
}

impl OcpProblem<'_> {
    fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::InvalidInput("horizon must be at least 2".into()));
        }
        if self.bounds.dim() != self.surrogate.input_dim() {
            return Err(Error::InvalidInput("input bounds do not match the surrogate".into()));
        }
        if self.x0.len() != self.surrogate.state_dim() || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("initial state must be finite and match the surrogate".into()));
        }
        Ok(())
    }

    fn stacked_bounds(&self) -> BoxConstraint {
        let rep = |v: &[f64]| v.iter().copied().cycle().take(v.len() * self.horizon).collect::<Vec<_>>();
        BoxConstraint {
            lower: rep(&self.bounds.lower),
            upper: rep(&self.bounds.upper),
        }
    }
}

/// Predicted states `x̄(0..N)` under `controls` (flattened `N·m`).
/// Controls outside the box are clamped.
pub fn rollout(problem: &OcpProblem<'_>, controls: &[f64]) -> Result<Vec<Vec<f64>>> {
    problem.validate()?;
    let model = ReducedModel::new(problem.surrogate);
    let mut u = controls.to_vec();
    problem.stacked_bounds().project(&mut u);
    Ok(Shooting::new(problem, &model).forward(&u)?.0)
}

struct Shooting<'p, 'a> {
    problem: &'p OcpProblem<'a>,
    model: &'p ReducedModel,
}

impl<'p, 'a> Shooting<'p, 'a> {
    fn new(problem: &'p OcpProblem<'a>, model: &'p ReducedModel) -> Self {
        Self { problem, model }
    }

    /// States and lifted states along the horizon.
    fn forward(&self, u: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (n, m, p) = (self.model.n, self.model.m, self.model.p);
        let dict = &self.problem.surrogate.dict;
        let mut xs = Vec::with_capacity(self.problem.horizon + 1);
        let mut psis = Vec::with_capacity(self.problem.horizon);
        let mut ku = vec![0.0; n * p];
        xs.push(self.problem.x0.clone());
        for kappa in 0..self.problem.horizon {
            let psi = dict.eval(&xs[kappa]);
            self.model.k_u(&u[kappa * m..(kappa + 1) * m], &mut ku);
            let next: Vec<f64> = (0..n)
                .map(|i| ku[i * p..(i + 1) * p].iter().zip(&psi).map(|(a, b)| a * b).sum())
                .collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::SurrogateBlowup { step: kappa });
            }
            psis.push(psi);
            xs.push(next);
        }
        Ok((xs, psis))
    }

    fn objective(&self, cost: &StageCost, u: &[f64]) -> f64 {
        let m = self.model.m;
        match self.forward(u) {
            Ok((xs, _)) => (0..self.problem.horizon)
                .map(|kappa| cost.eval(self.problem.k + kappa, &xs[kappa], &u[kappa * m..(kappa + 1) * m]))
                .sum(),
            Err(_) => f64::INFINITY,
        }
    }

    /// Reverse sweep: `λ_κ = 2Q(x_κ − r_κ) + (S K_u DΨ(x_κ))ᵀ λ_{κ+1}` with
    /// `λ_N = 0`, and `∂J/∂u_κ,i = 2(R u_κ)_i + (S(Kᵢ−K₀)Ψ(x_κ))·λ_{κ+1}`.
    fn gradient(&self, cost: &StageCost, u: &[f64]) -> Vec<f64> {
        let (n, m, p) = (self.model.n, self.model.m, self.model.p);
        let horizon = self.problem.horizon;
        let Ok((xs, psis)) = self.forward(u) else {
            return vec![f64::NAN; u.len()];
        };
        let dict = &self.problem.surrogate.dict;
        let mut grad = vec![0.0; u.len()];
        let mut lambda = vec![0.0; n];
        let mut ku = vec![0.0; n * p];
        let mut jac = vec![0.0; p * n];
        for kappa in (0..horizon).rev() {
            let uk = &u[kappa * m..(kappa + 1) * m];
            for i in 0..m {
                let ru: f64 = (0..m).map(|j| cost.r[(i, j)] * uk[j]).sum();
                let d = &self.model.deltas[i];
                let sens: f64 = (0..n)
                    .map(|r| lambda[r] * d[r * p..(r + 1) * p].iter().zip(&psis[kappa]).map(|(a, b)| a * b).sum::<f64>())
                    .sum();
                grad[kappa * m + i] = 2.0 * ru + sens;
            }
            if kappa == 0 {
                break;
            }
            // λ_κ from λ_{κ+1}.
            self.model.k_u(uk, &mut ku);
            dict.jacobian_into(&xs[kappa], &mut jac);
            let xr = (cost.reference)(self.problem.k + kappa);
            let mut next = vec![0.0; n];
            for c in 0..n {
                let mut s = 0.0;
                for r in 0..n {
                    let row = &ku[r * p..(r + 1) * p];
                    let col = &jac[c * p..(c + 1) * p];
                    s += lambda[r] * row.iter().zip(col).map(|(a, b)| a * b).sum::<f64>();
                }
                let qe: f64 = (0..n).map(|j| cost.q[(c, j)] * (xs[kappa][j] - xr[j])).sum();
                next[c] = 2.0 * qe + s;
            }
            lambda = next;
        }
        grad
    }
}

/// Objective and adjoint gradient at `controls`.
pub fn objective_and_gradient(problem: &OcpProblem<'_>, cost: &StageCost, controls: &[f64]) -> Result<(f64, Vec<f64>)> {
    problem.validate()?;
    let model = ReducedModel::new(problem.surrogate);
    let sh = Shooting::new(problem, &model);
    Ok((sh.objective(cost, controls), sh.gradient(cost, controls)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub controls: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl OcpSolution {
    pub fn first(&self, m: usize) -> Vec<f64> {
        self.controls[..m].to_vec()
    }
}

pub fn default_ocp_options() -> MinimizeOptions {
    MinimizeOptions {
        max_iters: 500,
        step_tol: 1e-6,
        ..MinimizeOptions::default()
    }
}

/// Minimises `Σ_{κ=0}^{N−1} ℓ(k+κ, x̄(κ), ū(κ))` over the input box.
pub fn solve_ocp(problem: &OcpProblem<'_>, cost: &StageCost, warm_start: Option<&[f64]>, opts: &MinimizeOptions) -> Result<OcpSolution> {
    problem.validate()?;
    let m = problem.surrogate.input_dim();
    let len = problem.horizon * m;
    let bounds = problem.stacked_bounds();
    let model = ReducedModel::new(problem.surrogate);
    let sh = Shooting::new(problem, &model);
    let zeros = {
        let mut z = vec![0.0; len];
        bounds.project(&mut z);
        z
    };
    let mut start = match warm_start {
        Some(w) if w.len() == len => w.to_vec(),
        Some(_) => return Err(Error::InvalidInput("warm start has the wrong length".into())),
        None => zeros.clone(),
    };
    bounds.project(&mut start);
    if !sh.objective(cost, &start).is_finite() {
        start = zeros;
    }
    let res = minimize_box(|u| sh.objective(cost, u), |u| sh.gradient(cost, u), &bounds, &start, opts)?;
    Ok(OcpSolution {
        controls: res.x,
        objective: res.value,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Receding-horizon loop state: warm start and the current surrogate.
///
/// Without a surrogate the controller returns `μ = 0` and the funnel alone
/// acts. Each new surrogate bumps the model version.
#[derive(Debug, Clone)]
pub struct MpcController {
    cost: StageCost,
    horizon: usize,
    bounds: BoxConstraint,
    opts: MinimizeOptions,
    surrogate: Option<BilinearSurrogate>,
    version: usize,
    warm: Option<Vec<f64>>,
    last: Option<OcpSolution>,
}

impl MpcController {
    pub fn new(cost: StageCost, horizon: usize, bounds: BoxConstraint) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::InvalidInput("horizon must be at least 2".into()));
        }
        Ok(Self {
            cost,
            horizon,
            bounds,
            opts: default_ocp_options(),
            surrogate: None,
            version: 0,
            warm: None,
            last: None,
        })
    }

    pub fn with_options(mut self, opts: MinimizeOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn set_surrogate(&mut self, sur: BilinearSurrogate) {
        self.surrogate = Some(sur);
        self.version += 1;
    }

    pub fn surrogate(&self) -> Option<&BilinearSurrogate> {
        self.surrogate.as_ref()
    }

    pub fn version(&self) -> usize {
        self.version
    }

    pub fn last_solution(&self) -> Option<&OcpSolution> {
        self.last.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.bounds.dim()
    }

    /// `μ(k) = ū*(0)` from state `x`; the warm start for `k+1` is the
    /// shifted solution with the last entry duplicated.
    pub fn step(&mut self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.bounds.dim();
        let Some(sur) = self.surrogate.as_ref() else {
            return Ok(vec![0.0; m]);
        };
        let problem = OcpProblem {
            surrogate: sur,
            horizon: self.horizon,
            bounds: self.bounds.clone(),
            x0: x.to_vec(),
            k,
        };
        let sol = solve_ocp(&problem, &self.cost, self.warm.as_deref(), &self.opts)?;
        let mut warm = sol.controls[m..].to_vec();
        warm.extend_from_slice(&sol.controls[sol.controls.len() - m..]);
        self.warm = Some(warm);
        let mu = sol.first(m);
        self.last = Some(sol);
        Ok(mu)
    }
}

impl Predictor for MpcController {
    fn predict(&mut self, k: usize, _t: f64, x: &[f64], _f: Option<&IntervalRecord>) -> Result<Vec<f64>> {
        self.step(k, x)
    }

    fn model_version(&self) -> usize {
        self.version
    }
}
