//! Data-enabled predictive control for the linear plant class.
//!
//! The model is a stack of block-Hankel matrices built from one recorded
//! input/output trajectory. Any length-`L` trajectory of the plant is a
//! linear combination of the Hankel columns provided the recorded input is
//! persistently exciting of order `L + n` (`n = 2m` here), which turns the
//! prediction problem into a least-squares problem over the combination
//! weights `ν`.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::funnel::{IntervalRecord, Predictor};
use crate::numerics::{self, minimize_box, BoxConstraint, Matrix, MinimizeOptions, DEFAULT_RANK_TOL};

/// Ridge weight on `ν` in the equality-constrained formulation.
pub const NU_RIDGE: f64 = 1e-10;

/// Block-Hankel matrix with the length-`depth` windows of `signal` as
/// columns.
pub fn build_hankel(signal: &[Vec<f64>], depth: usize) -> Result<Matrix> {
    let d = signal.len();
    if depth == 0 {
        return Err(Error::InvalidInput("Hankel depth must be positive".into()));
    }
    if d < depth {
        return Err(Error::InsufficientData { needed: depth, got: d });
    }
    let q = signal[0].len();
    if signal.iter().any(|s| s.len() != q) {
        return Err(Error::InvalidInput("signal samples have different dimensions".into()));
    }
    let cols = d - depth + 1;
    let mut h = Matrix::zeros(depth * q, cols);
    for j in 0..cols {
        for i in 0..depth {
            for c in 0..q {
                h[(i * q + c, j)] = signal[j + i][c];
            }
        }
    }
    Ok(h)
}

/// Full row rank of the depth-`order` Hankel matrix.
pub fn is_persistently_exciting(u: &[Vec<f64>], order: usize) -> bool {
    let Some(first) = u.first() else {
        return false;
    };
    let m = first.len();
    match build_hankel(u, order) {
        Ok(h) if h.ncols() >= order * m => numerics::numerical_rank(&h, 1e-10).is_ok_and(|r| r == order * m),
        _ => false,
    }
}

#[derive(Debug, Clone)]
pub struct HankelStack {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    depth: usize,
    hu: Matrix,
    hy: Matrix,
}

impl HankelStack {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>, depth: usize) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::InvalidInput("input and output records differ in length".into()));
        }
        let hu = build_hankel(&inputs, depth)?;
        let hy = build_hankel(&outputs, depth)?;
        Ok(Self {
            inputs,
            outputs,
            depth,
            hu,
            hy,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn columns(&self) -> usize {
        self.hu.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs[0].len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn input_hankel(&self) -> &Matrix {
        &self.hu
    }

    pub fn output_hankel(&self) -> &Matrix {
        &self.hy
    }

    /// `[H_L(u); H_L(y)]`.
    pub fn stacked(&self) -> Matrix {
        let mut s = Matrix::zeros(self.hu.nrows() + self.hy.nrows(), self.columns());
        s.view_mut((0, 0), self.hu.shape()).copy_from(&self.hu);
        s.view_mut((self.hu.nrows(), 0), self.hy.shape()).copy_from(&self.hy);
        s
    }

    /// Same data with the Hankel columns reordered (`perm[j]` is the source
    /// column of column `j`).
    pub fn with_permuted_columns(&self, perm: &[usize]) -> Self {
        let pick = |h: &Matrix| Matrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, perm[j])]);
        Self {
            hu: pick(&self.hu),
            hy: pick(&self.hy),
            ..self.clone()
        }
    }
}

fn stack_samples(parts: &[&[Vec<f64>]]) -> DVector<f64> {
    DVector::from_iterator(
        parts.iter().map(|p| p.iter().map(Vec::len).sum::<usize>()).sum(),
        parts.iter().flat_map(|p| p.iter().flatten().copied()),
    )
}

fn split_samples(v: &[f64], q: usize) -> Vec<Vec<f64>> {
    v.chunks(q).map(<[f64]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Explanation {
    /// The trajectory lies in the column span of the data.
    Explained {
        nu: Vec<f64>,
        residual: f64,
    },
    Infeasible {
        residual: f64,
    },
}

/// Least-squares `ν` with `[u; y] = [H_L(û); H_L(ŷ)]ν`.
///
/// Requires the recorded input to be persistently exciting of order
/// `L + n` with `n = 2m`.
pub fn fl_explain(hankel: &HankelStack, u_test: &[Vec<f64>], y_test: &[Vec<f64>]) -> Result<Explanation> {
    let l = hankel.depth();
    let m = hankel.input_dim();
    if u_test.len() != l || y_test.len() != l {
        return Err(Error::InvalidInput(format!("test trajectory must have length {l}")));
    }
    let order = l + 2 * m;
    if !is_persistently_exciting(hankel.inputs(), order) {
        return Err(Error::NotPersistentlyExciting { order });
    }
    let h = hankel.stacked();
    let w = stack_samples(&[u_test, y_test]);
    let nu = numerics::pseudo_inverse(&h, DEFAULT_RANK_TOL)? * &w;
    let residual = (&h * &nu - &w).norm();
    let data_scale = h.norm().max(w.norm());
    if residual <= 1e-8 * (1.0 + data_scale) {
        Ok(Explanation::Explained {
            nu: nu.iter().copied().collect(),
            residual,
        })
    } else {
        Ok(Explanation::Infeasible { residual })
    }
}

/// `(u, y) = [H_L(û); H_L(ŷ)]ν`.
pub fn fl_generate(hankel: &HankelStack, nu: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if nu.len() != hankel.columns() {
        return Err(Error::InvalidInput(format!("ν must have {} entries", hankel.columns())));
    }
    let v = DVector::from_column_slice(nu);
    let u = hankel.input_hankel() * &v;
    let y = hankel.output_hankel() * &v;
    Ok((
        split_samples(u.as_slice(), hankel.input_dim()),
        split_samples(y.as_slice(), hankel.output_dim()),
    ))
}

#[derive(Debug, Clone)]
pub struct DeepcConfig {
    pub horizon: usize,
    pub q: Matrix,
    pub r: Matrix,
    pub u_max: f64,
}

impl DeepcConfig {
    pub fn past_len(&self, m: usize) -> usize {
        2 * m
    }

    pub fn depth(&self, m: usize) -> usize {
        self.horizon + 2 * m
    }

    pub fn pe_order(&self, m: usize) -> usize {
        self.horizon + 4 * m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepcSolution {
    pub nu: Vec<f64>,
    pub u_pred: Vec<Vec<f64>>,
    pub y_pred: Vec<Vec<f64>>,
    pub objective: f64,
}

/// Condensed DeePC problem.
///
/// With the past window pinned, the minimum-norm `ν` realising future inputs
/// `u_f` is `ν = A⁺[ũ; ỹ; u_f]` with `A = [H_u,past; H_y,past; H_u,fut]`, so
/// the predicted outputs are affine in `u_f` and the optimal control problem
/// reduces to a box-constrained QP in `u_f` alone.
#[derive(Debug, Clone)]
pub struct Deepc {
    hankel: HankelStack,
    cfg: DeepcConfig,
    m: usize,
    p: usize,
    past_len: usize,
    /// `A⁺`.
    eq_pinv: Matrix,
    /// `[H_u,past; H_y,past]`.
    pin: Matrix,
    hu_f: Matrix,
    hy_f: Matrix,
    /// Output prediction from the pinned window: `y_f = g_past·w + g_u·u_f`.
    g_past: Matrix,
    g_u: Matrix,
    q_bar: Matrix,
    r_bar: Matrix,
}

impl Deepc {
    pub fn new(hankel: HankelStack, cfg: DeepcConfig) -> Result<Self> {
        let m = hankel.input_dim();
        let p = hankel.output_dim();
        if cfg.horizon == 0 {
            return Err(Error::InvalidInput("DeePC horizon must be positive".into()));
        }
        if !(cfg.u_max > 0.0) {
            return Err(Error::InvalidInput("u_max must be positive".into()));
        }
        if cfg.q.shape() != (p, p) || cfg.r.shape() != (m, m) {
            return Err(Error::InvalidInput("weight matrices have the wrong size".into()));
        }
        if !numerics::is_positive_definite(&cfg.q) || !numerics::is_positive_definite(&cfg.r) {
            return Err(Error::InvalidInput("Q and R must be symmetric positive definite".into()));
        }
        if hankel.depth() != cfg.depth(m) {
            return Err(Error::InvalidInput(format!("Hankel depth must be N + 2m = {}", cfg.depth(m))));
        }
        let order = cfg.pe_order(m);
        if !is_persistently_exciting(hankel.inputs(), order) {
            return Err(Error::NotPersistentlyExciting { order });
        }
        let past_len = cfg.past_len(m);
        let n_h = cfg.horizon;
        let hu = hankel.input_hankel();
        let hy = hankel.output_hankel();
        let c = hankel.columns();
        let hu_p = hu.rows(0, past_len * m).into_owned();
        let hu_f = hu.rows(past_len * m, n_h * m).into_owned();
        let hy_p = hy.rows(0, past_len * p).into_owned();
        let hy_f = hy.rows(past_len * p, n_h * p).into_owned();

        let pin_rows = past_len * (m + p);
        let mut pin = Matrix::zeros(pin_rows, c);
        pin.rows_mut(0, past_len * m).copy_from(&hu_p);
        pin.rows_mut(past_len * m, past_len * p).copy_from(&hy_p);
        let mut eq = Matrix::zeros(pin_rows + n_h * m, c);
        eq.rows_mut(0, pin_rows).copy_from(&pin);
        eq.rows_mut(pin_rows, n_h * m).copy_from(&hu_f);
        let eq_pinv = numerics::pseudo_inverse(&eq, DEFAULT_RANK_TOL)?;
        let g = &hy_f * &eq_pinv;
        let g_past = g.columns(0, pin_rows).into_owned();
        let g_u = g.columns(pin_rows, n_h * m).into_owned();

        let mut q_bar = Matrix::zeros(n_h * p, n_h * p);
        let mut r_bar = Matrix::zeros(n_h * m, n_h * m);
        for i in 0..n_h {
            q_bar.view_mut((i * p, i * p), (p, p)).copy_from(&cfg.q);
            r_bar.view_mut((i * m, i * m), (m, m)).copy_from(&cfg.r);
        }
        Ok(Self {
            hankel,
            cfg,
            m,
            p,
            past_len,
            eq_pinv,
            pin,
            hu_f,
            hy_f,
            g_past,
            g_u,
            q_bar,
            r_bar,
        })
    }

    pub fn config(&self) -> &DeepcConfig {
        &self.cfg
    }

    pub fn hankel(&self) -> &HankelStack {
        &self.hankel
    }

    pub fn past_len(&self) -> usize {
        self.past_len
    }

    fn check_window(&self, past_u: &[Vec<f64>], past_y: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<()> {
        if past_u.len() != self.past_len || past_y.len() != self.past_len {
            return Err(Error::InvalidInput(format!(
                "past window must hold exactly {} samples",
                self.past_len
            )));
        }
        if reference.len() != self.cfg.horizon {
            return Err(Error::InvalidInput(format!("reference must cover {} steps", self.cfg.horizon)));
        }
        Ok(())
    }

    fn objective_of(&self, y_f: &DVector<f64>, u_f: &DVector<f64>, r: &DVector<f64>) -> f64 {
        let ey = y_f - r;
        (ey.transpose() * &self.q_bar * &ey)[(0, 0)] + (u_f.transpose() * &self.r_bar * u_f)[(0, 0)]
    }

    fn assemble(&self, w_past: &DVector<f64>, u_f: &DVector<f64>, r: &DVector<f64>) -> Result<DeepcSolution> {
        let mut rhs = DVector::zeros(w_past.len() + u_f.len());
        rhs.rows_mut(0, w_past.len()).copy_from(w_past);
        rhs.rows_mut(w_past.len(), u_f.len()).copy_from(u_f);
        let nu = &self.eq_pinv * rhs;
        let residual = (&self.pin * &nu - w_past).norm();
        if residual > 1e-8 * (1.0 + w_past.norm()) {
            return Err(Error::InconsistentHistory { residual });
        }
        let y_f = &self.hy_f * &nu;
        let u_chk = &self.hu_f * &nu;
        Ok(DeepcSolution {
            objective: self.objective_of(&y_f, &u_chk, r),
            u_pred: split_samples(u_chk.as_slice(), self.m),
            y_pred: split_samples(y_f.as_slice(), self.p),
            nu: nu.iter().copied().collect(),
        })
    }

    /// One receding-horizon solve with past window `[k−2m+1, k]` and output
    /// reference for `k+1 … k+N`.
    pub fn step(&self, past_u: &[Vec<f64>], past_y: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<DeepcSolution> {
        self.check_window(past_u, past_y, reference)?;
        let w_past = stack_samples(&[past_u, past_y]);
        let r = stack_samples(&[reference]);
        let offset = &self.g_past * &w_past - &r;
        let hess = (self.g_u.transpose() * &self.q_bar * &self.g_u + &self.r_bar) * 2.0;
        let lin = self.g_u.transpose() * &self.q_bar * &offset * 2.0;
        let n_u = self.cfg.horizon * self.m;

        let unconstrained = hess
            .clone()
            .cholesky()
            .map(|c| c.solve(&(-&lin)))
            .ok_or_else(|| Error::InvalidInput("condensed DeePC Hessian is not positive definite".into()))?;
        let u_max = self.cfg.u_max;
        let within = |u: &DVector<f64>| u.as_slice().chunks(self.m).all(|c| numerics::norm(c) <= u_max);
        let u_f = if within(&unconstrained) {
            unconstrained
        } else {
            let f = |u: &[f64]| {
                let v = DVector::from_column_slice(u);
                0.5 * (v.transpose() * &hess * &v)[(0, 0)] + lin.dot(&v)
            };
            let g = |u: &[f64]| {
                let v = DVector::from_column_slice(u);
                (&hess * v + &lin).iter().copied().collect::<Vec<_>>()
            };
            let opts = MinimizeOptions {
                max_iters: 5000,
                step_tol: 1e-10,
                ..Default::default()
            };
            if self.m == 1 {
                let bounds = BoxConstraint::symmetric(u_max, n_u)?;
                let mut x0: Vec<f64> = unconstrained.iter().copied().collect();
                bounds.project(&mut x0);
                DVector::from_vec(minimize_box(f, g, &bounds, &x0, &opts)?.x)
            } else {
                self.penalized_inputs(&hess, &lin, &unconstrained, &opts)?
            }
        };
        self.assemble(&w_past, &u_f, &r)
    }

    /// Norm-ball input bounds for `m > 1`: quadratic penalty on
    /// `max(0, ‖u_i‖² − u_max²)`, weight ×10 over five rounds, then radial
    /// projection so the bound holds exactly.
    fn penalized_inputs(&self, hess: &Matrix, lin: &DVector<f64>, start: &DVector<f64>, opts: &MinimizeOptions) -> Result<DVector<f64>> {
        let m = self.m;
        let u_max = self.cfg.u_max;
        let bounds = BoxConstraint::unbounded(start.len());
        let mut x: Vec<f64> = start.iter().copied().collect();
        let mut rho = 1.0;
        for _ in 0..5 {
            let f = |u: &[f64]| {
                let v = DVector::from_column_slice(u);
                let pen: f64 = u
                    .chunks(m)
                    .map(|c| (c.iter().map(|a| a * a).sum::<f64>() - u_max * u_max).max(0.0).powi(2))
                    .sum();
                0.5 * (v.transpose() * hess * &v)[(0, 0)] + lin.dot(&v) + rho * pen
            };
            let g = |u: &[f64]| {
                let v = DVector::from_column_slice(u);
                let mut grad: Vec<f64> = (hess * v + lin).iter().copied().collect();
                for (gc, c) in grad.chunks_mut(m).zip(u.chunks(m)) {
                    let excess = c.iter().map(|a| a * a).sum::<f64>() - u_max * u_max;
                    if excess > 0.0 {
                        for (gi, ci) in gc.iter_mut().zip(c) {
                            *gi += rho * 4.0 * excess * ci;
                        }
                    }
                }
                grad
            };
            x = minimize_box(f, g, &bounds, &x, opts)?.x;
            rho *= 10.0;
        }
        for c in x.chunks_mut(m) {
            let nrm = numerics::norm(c);
            if nrm > u_max {
                c.iter_mut().for_each(|v| *v *= u_max / nrm);
            }
        }
        Ok(DVector::from_vec(x))
    }

    /// Equality-constrained formulation over `ν` without input bounds:
    /// minimise `‖y_f − r‖²_Q + ‖u_f‖²_R + 1e-10‖ν‖²` subject to the pinned
    /// past window.
    pub fn step_equality_qp(&self, past_u: &[Vec<f64>], past_y: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<DeepcSolution> {
        self.check_window(past_u, past_y, reference)?;
        let w_past = stack_samples(&[past_u, past_y]);
        let r = stack_samples(&[reference]);
        let c = self.hankel.columns();
        let hess = (self.hy_f.transpose() * &self.q_bar * &self.hy_f
            + self.hu_f.transpose() * &self.r_bar * &self.hu_f
            + Matrix::identity(c, c) * NU_RIDGE)
            * 2.0;
        let lin = self.hy_f.transpose() * &self.q_bar * &r * -2.0;
        let nu = numerics::solve_equality_qp(&hess, lin.as_slice(), &self.pin, w_past.as_slice())?;
        let nu = DVector::from_vec(nu);
        let y_f = &self.hy_f * &nu;
        let u_f = &self.hu_f * &nu;
        Ok(DeepcSolution {
            objective: self.objective_of(&y_f, &u_f, &r),
            u_pred: split_samples(u_f.as_slice(), self.m),
            y_pred: split_samples(y_f.as_slice(), self.p),
            nu: nu.iter().copied().collect(),
        })
    }
}

/// Output reference indexed by discrete time.
pub type IndexedReference = Box<dyn Fn(usize) -> Vec<f64> + Send>;

/// Receding-horizon DeePC with a rolling past window.
///
/// Calling [`DeepcController::step`] at time `k` with the measured `y(k)`
/// returns the input `u(k)` to hold on `[k, k+1)`; it was decided at `k − 1`
/// as the first optimal input of that solve. Until `2m` samples have been
/// recorded the controller outputs zero.
pub struct DeepcController {
    solver: Deepc,
    reference: IndexedReference,
    past_u: VecDeque<Vec<f64>>,
    past_y: VecDeque<Vec<f64>>,
    pending: Vec<f64>,
    last: Option<DeepcSolution>,
}

impl DeepcController {
    pub fn new(solver: Deepc, reference: IndexedReference) -> Self {
        let m = solver.m;
        Self {
            solver,
            reference,
            past_u: VecDeque::new(),
            past_y: VecDeque::new(),
            pending: vec![0.0; m],
            last: None,
        }
    }

    pub fn last_solution(&self) -> Option<&DeepcSolution> {
        self.last.as_ref()
    }

    pub fn step(&mut self, k: usize, y_k: &[f64]) -> Result<Vec<f64>> {
        let u_k = self.pending.clone();
        self.past_u.push_back(u_k.clone());
        self.past_y.push_back(y_k.to_vec());
        let len = self.solver.past_len();
        while self.past_u.len() > len {
            self.past_u.pop_front();
            self.past_y.pop_front();
        }
        if self.past_u.len() == len {
            let horizon = self.solver.cfg.horizon;
            let reference: Vec<Vec<f64>> = (1..=horizon).map(|i| (self.reference)(k + i)).collect();
            let pu: Vec<Vec<f64>> = self.past_u.iter().cloned().collect();
            let py: Vec<Vec<f64>> = self.past_y.iter().cloned().collect();
            let sol = self.solver.step(&pu, &py, &reference)?;
            self.pending = sol.u_pred[0].clone();
            self.last = Some(sol);
        }
        Ok(u_k)
    }
}

impl Predictor for DeepcController {
    fn predict(&mut self, k: usize, _t: f64, x: &[f64], _f: Option<&IntervalRecord>) -> Result<Vec<f64>> {
        let p = self.solver.p;
        self.step(k, &x[..p])
    }

    fn data_count(&self) -> usize {
        self.solver.hankel.inputs.len()
    }
}
