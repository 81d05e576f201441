//! Dense numerical kernels shared by every controller: pseudo-inverse and
//! rank via SVD, a classical RK4 step, an equality-constrained QP solver and
//! a box-constrained projected-gradient method.
//!
//! Everything here is a pure function over value data.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Default relative cutoff for rank decisions and pseudo-inverses.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Thin SVD with singular values sorted in descending order.
#[derive(Debug, Clone)]
pub struct SvdFactorization {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v_t: Matrix,
}

/// One-sided Jacobi on the tall orientation; accurate for rank-deficient
/// and wide inputs.
pub fn svd(m: &Matrix) -> Result<SvdFactorization> {
    ensure_finite(m)?;
    if m.nrows() < m.ncols() {
        let t = svd(&m.transpose())?;
        return Ok(SvdFactorization {
            u: t.v_t.transpose(),
            singular_values: t.singular_values,
            v_t: t.u.transpose(),
        });
    }
    let n = m.ncols();
    let mut a = m.clone();
    let mut v = Matrix::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut u = Matrix::zeros(m.nrows(), n);
    let mut v_t = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        if norms[src] > 0.0 {
            u.set_column(dst, &(a.column(src) / norms[src]));
        }
        v_t.set_row(dst, &v.column(src).transpose());
        s.push(norms[src]);
    }
    Ok(SvdFactorization {
        u,
        singular_values: s,
        v_t,
    })
}

const JACOBI_MAX_SWEEPS: usize = 80;

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * x - s * y;
        m[(i, q)] = s * x + c * y;
    }
}

fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput("matrix has non-finite entries".into()))
    }
}

/// Moore–Penrose inverse. Singular values below `tol` times the largest one
/// are treated as zero.
pub fn pseudo_inverse(m: &Matrix, tol: f64) -> Result<Matrix> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("pseudo-inverse tolerance must be positive".into()));
    }
    let f = svd(m)?;
    let smax = f.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = tol * smax;
    let mut out = Matrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in f.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            // out += v_i * u_i^T / s
            let v = f.v_t.row(i).transpose();
            let u = f.u.column(i);
            out += (v * u.transpose()) / s;
        }
    }
    Ok(out)
}

pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("rank tolerance must be positive".into()));
    }
    let f = svd(m)?;
    let smax = f.singular_values.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(f.singular_values.iter().filter(|&&s| s > tol * smax).count())
}

/// One classical fourth-order Runge–Kutta step of size `h`.
///
/// The field may fail (for instance a feedback law hitting its singular set);
/// such errors are passed through unchanged.
pub fn rk4_step<F>(field: &mut F, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput("step size must be positive".into()));
    }
    let n = x.len();
    let check = |k: &[f64], at: f64| -> Result<()> {
        if k.len() != n {
            return Err(Error::InvalidInput(format!(
                "vector field returned {} components, expected {n}",
                k.len()
            )));
        }
        if k.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::IntegrationBlowup { t: at })
        }
    };
    let shifted = |k: &[f64], a: f64| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };

    let k1 = field(t, x)?;
    check(&k1, t)?;
    let k2 = field(t + 0.5 * h, &shifted(&k1, 0.5 * h))?;
    check(&k2, t + 0.5 * h)?;
    let k3 = field(t + 0.5 * h, &shifted(&k2, 0.5 * h))?;
    check(&k3, t + 0.5 * h)?;
    let k4 = field(t + h, &shifted(&k3, h))?;
    check(&k4, t + h)?;

    let out: Vec<f64> = (0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::IntegrationBlowup { t: t + h })
    }
}

/// Minimizer of `½xᵀHx + gᵀx` subject to `Ax = b`, via the KKT system.
///
/// `eq_matrix` may have zero rows, in which case the problem is
/// unconstrained and `hessian` must be nonsingular.
pub fn solve_equality_qp(hessian: &Matrix, linear: &[f64], eq_matrix: &Matrix, eq_rhs: &[f64]) -> Result<Vec<f64>> {
    let n = hessian.nrows();
    let p = eq_matrix.nrows();
    if hessian.ncols() != n || linear.len() != n || eq_rhs.len() != p || (p > 0 && eq_matrix.ncols() != n) {
        return Err(Error::InvalidInput("equality QP dimensions do not match".into()));
    }
    let mut kkt = Matrix::zeros(n + p, n + p);
    kkt.view_mut((0, 0), (n, n)).copy_from(hessian);
    if p > 0 {
        kkt.view_mut((n, 0), (p, n)).copy_from(eq_matrix);
        kkt.view_mut((0, n), (n, p)).copy_from(&eq_matrix.transpose());
    }
    ensure_finite(&kkt)?;
    let mut rhs = DVector::zeros(n + p);
    for i in 0..n {
        rhs[i] = -linear[i];
    }
    for i in 0..p {
        rhs[n + i] = eq_rhs[i];
    }
    let lu = kkt.clone().full_piv_lu();
    if !lu.is_invertible() {
        return Err(Error::DegenerateConstraints);
    }
    let sol = lu.solve(&rhs).ok_or(Error::DegenerateConstraints)?;
    let residual = (&kkt * &sol - &rhs).norm();
    if !sol.iter().all(|v| v.is_finite()) || residual > 1e-8 * (1.0 + rhs.norm()) {
        return Err(Error::DegenerateConstraints);
    }
    Ok(sol.iter().take(n).copied().collect())
}

/// Axis-aligned box; bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraint {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxConstraint {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidInput("box bounds have different lengths".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidInput("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(radius: f64, dim: usize) -> Result<Self> {
        Self::new(vec![-radius; dim], vec![radius; dim])
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((xi, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(l, u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(xi, (l, u))| *xi >= *l && *xi <= *u)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    pub max_iters: usize,
    /// Stop once `‖x − P(x − ∇f)‖ ≤ step_tol·(1 + |f|)`.
    pub step_tol: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub initial_step: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step_tol: 1e-6,
            armijo: 1e-4,
            backtrack: 0.5,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected gradient descent over a box with Armijo backtracking.
///
/// The trial step starts at `initial_step` and afterwards at the
/// Barzilai–Borwein length of the previous accepted step; backtracking then
/// enforces sufficient decrease, so accepted iterates never increase the
/// objective.
pub fn minimize_box<F, G>(
    mut objective: F,
    mut gradient: G,
    bounds: &BoxConstraint,
    x0: &[f64],
    opts: &MinimizeOptions,
) -> Result<MinimizeResult>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    if bounds.dim() != n {
        return Err(Error::InvalidInput("box dimension does not match x0".into()));
    }
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut fx = objective(&x);
    if !fx.is_finite() {
        return Err(Error::Diverged);
    }
    let mut g = gradient(&x);
    let mut step = opts.initial_step;
    let mut trial = vec![0.0; n];

    for iter in 0..opts.max_iters {
        let pg_norm = {
            let mut s = 0.0;
            for i in 0..n {
                let p = (x[i] - g[i]).clamp(bounds.lower[i], bounds.upper[i]);
                s += (x[i] - p) * (x[i] - p);
            }
            s.sqrt()
        };
        if pg_norm <= opts.step_tol * (1.0 + fx.abs()) {
            return Ok(MinimizeResult {
                x,
                value: fx,
                iterations: iter,
                converged: true,
            });
        }

        let mut alpha = step;
        let mut accepted = false;
        for _ in 0..80 {
            for i in 0..n {
                trial[i] = (x[i] - alpha * g[i]).clamp(bounds.lower[i], bounds.upper[i]);
            }
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
            let ft = objective(&trial);
            if ft.is_finite() && ft <= fx + opts.armijo * decrease && decrease < 0.0 {
                accepted = true;
                break;
            }
            alpha *= opts.backtrack;
        }
        if !accepted {
            // No descent is possible at machine precision.
            return Ok(MinimizeResult {
                x,
                value: fx,
                iterations: iter,
                converged: false,
            });
        }

        let g_new = gradient(&trial);
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..n {
            let s = trial[i] - x[i];
            ss += s * s;
            sy += s * (g_new[i] - g[i]);
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-12, 1e12)
        } else {
            opts.initial_step
        };
        x.copy_from_slice(&trial);
        fx = objective(&x);
        g = g_new;
    }
    Ok(MinimizeResult {
        x,
        value: fx,
        iterations: opts.max_iters,
        converged: false,
    })
}

/// Cholesky-based SPD test.
pub fn is_positive_definite(m: &Matrix) -> bool {
    if m.nrows() != m.ncols() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().is_some()
}

pub fn quad_form(m: &Matrix, v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * v[j];
        }
        s += v[i] * row;
    }
    s
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn penrose_residual(a: &Matrix, p: &Matrix) -> f64 {
        let r1 = (a * p * a - a).abs().max();
        let r2 = (p * a * p - p).abs().max();
        let ap = a * p;
        let pa = p * a;
        let r3 = (&ap - ap.transpose()).abs().max();
        let r4 = (&pa - pa.transpose()).abs().max();
        r1.max(r2).max(r3).max(r4)
    }

    #[test]
    fn pinv_identity_and_diag() {
        let i3 = Matrix::identity(3, 3);
        assert_relative_eq!(pseudo_inverse(&i3, DEFAULT_RANK_TOL).unwrap(), i3, epsilon = 1e-14);
        let d = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(pseudo_inverse(&d, DEFAULT_RANK_TOL).unwrap(), d, epsilon = 1e-14);
    }

    #[test]
    fn pinv_rank_one() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let p = pseudo_inverse(&a, DEFAULT_RANK_TOL).unwrap();
        assert!(penrose_residual(&a, &p) < 1e-12);
        assert_relative_eq!(p, a / 25.0, epsilon = 1e-14);
    }

    #[test]
    fn pinv_rejects_nan() {
        let a = Matrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(pseudo_inverse(&a, 1e-12), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::zeros(2, 2), DEFAULT_RANK_TOL).unwrap(), 0);
        assert_eq!(numerical_rank(&Matrix::identity(4, 4), DEFAULT_RANK_TOL).unwrap(), 4);
        let h = Matrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(numerical_rank(&h, DEFAULT_RANK_TOL).unwrap(), 1);
    }

    #[test]
    fn svd_is_sorted_and_orthonormal() {
        let a = Matrix::from_fn(5, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let f = svd(&a).unwrap();
        assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let utu = f.u.transpose() * &f.u;
        assert!((utu - Matrix::identity(3, 3)).abs().max() < 1e-10);
        let recon = &f.u * Matrix::from_diagonal(&DVector::from_vec(f.singular_values.clone())) * &f.v_t;
        assert!((recon - a).abs().max() < 1e-10);
    }

    #[test]
    fn svd_wide_rank_deficient() {
        // 20×51, rank 12: the shape of a depth-10 input/output Hankel stack.
        let l = Matrix::from_fn(20, 12, |i, j| ((i * 13 + j * 7) % 11) as f64 / 3.0 - 1.4 + (i == j) as u8 as f64);
        let r = Matrix::from_fn(12, 51, |i, j| ((i * 5 + j * 17) % 19) as f64 / 9.0 - 1.0);
        let a = l * r;
        let f = svd(&a).unwrap();
        let recon = &f.u * Matrix::from_diagonal(&DVector::from_vec(f.singular_values.clone())) * &f.v_t;
        assert!((recon - &a).abs().max() < 1e-11);
        assert_eq!(numerical_rank(&a, DEFAULT_RANK_TOL).unwrap(), 12);
        let p = pseudo_inverse(&a, DEFAULT_RANK_TOL).unwrap();
        assert!(penrose_residual(&a, &p) < 1e-9);
    }

    #[test]
    fn rk4_zero_field_and_exponential() {
        let mut zero = |_t: f64, x: &[f64]| Ok(vec![0.0; x.len()]);
        assert_eq!(rk4_step(&mut zero, 0.0, &[1.0, 2.0], 0.1).unwrap(), vec![1.0, 2.0]);

        let mut lin = |_t: f64, x: &[f64]| Ok(x.to_vec());
        let x1 = rk4_step(&mut lin, 0.0, &[1.0], 0.1).unwrap()[0];
        // 1 + h + h²/2 + h³/6 + h⁴/24
        assert_relative_eq!(
            x1,
            1.0 + 0.1 + 0.005 + 0.1f64.powi(3) / 6.0 + 0.1f64.powi(4) / 24.0,
            epsilon = 1e-15
        );
        assert!((x1 - 0.1f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_rotation_preserves_norm() {
        let mut rot = |_t: f64, x: &[f64]| Ok(vec![x[1], -x[0]]);
        let h = 0.01;
        let x = rk4_step(&mut rot, 0.0, &[1.0, 0.0], h).unwrap();
        assert!((norm(&x) - 1.0).abs() < h.powi(5));
        assert!((x[0] - h.cos()).abs() < 1e-11 && (x[1] + h.sin()).abs() < 1e-11);
    }

    #[test]
    fn rk4_reports_blowup_time() {
        let mut bad = |t: f64, _x: &[f64]| Ok(vec![if t > 0.05 { f64::NAN } else { 1.0 }]);
        match rk4_step(&mut bad, 0.0, &[0.0], 0.1) {
            // Stages at t = 0 and 0.05 are fine, the last one at 0.1 is not.
            Err(Error::IntegrationBlowup { t }) => assert_eq!(t, 0.1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rk4_global_order_four() {
        // x' = -x on [0, 1]
        let run = |steps: usize| {
            let h = 1.0 / steps as f64;
            let mut f = |_t: f64, x: &[f64]| Ok(vec![-x[0]]);
            let mut x = vec![1.0];
            for k in 0..steps {
                x = rk4_step(&mut f, k as f64 * h, &x, h).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let ratio = run(10) / run(20);
        assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn equality_qp_examples() {
        let h = Matrix::identity(2, 2) * 2.0;
        let a = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let x = solve_equality_qp(&h, &[0.0, 0.0], &a, &[1.0]).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-12);

        let x = solve_equality_qp(&h, &[-2.0, 0.0], &Matrix::zeros(0, 2), &[]).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn equality_qp_degenerate() {
        let h = Matrix::identity(2, 2);
        let a = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(
            solve_equality_qp(&h, &[0.0, 0.0], &a, &[1.0, 2.0]),
            Err(Error::DegenerateConstraints)
        );
    }

    #[test]
    fn minimize_box_examples() {
        let opts = MinimizeOptions::default();
        let b = BoxConstraint::new(vec![0.0], vec![2.0]).unwrap();
        let r = minimize_box(|x| (x[0] - 1.0).powi(2), |x| vec![2.0 * (x[0] - 1.0)], &b, &[0.0], &opts).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6);
        let r = minimize_box(|x| (x[0] - 3.0).powi(2), |x| vec![2.0 * (x[0] - 3.0)], &b, &[0.0], &opts).unwrap();
        assert_eq!(r.x[0], 2.0);

        let q = Matrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let qc = q.clone();
        let r = minimize_box(
            |x| quad_form(&q, x),
            |x| {
                let g = (&qc + qc.transpose()) * DVector::from_column_slice(x);
                g.iter().copied().collect()
            },
            &BoxConstraint::unbounded(2),
            &[3.0, -1.0],
            &opts,
        )
        .unwrap();
        assert!(norm(&r.x) < 1e-5);
    }

    #[test]
    fn minimize_box_rejects_nonfinite_start() {
        let b = BoxConstraint::unbounded(1);
        let r = minimize_box(|_| f64::NAN, |_| vec![0.0], &b, &[0.0], &MinimizeOptions::default());
        assert!(matches!(r, Err(Error::Diverged)));
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..6, proptest::collection::vec(-1.0f64..1.0, 36), -3i32..3).prop_map(|(r, c, v, scale)| {
            // Conditioning stays well below 1e6 for these sizes and scalings.
            let mut m = Matrix::from_fn(r, c, |i, j| v[i * 6 + j]);
            let k = r.min(c);
            for i in 0..k {
                m[(i, i)] += 2.0 * (i as f64 + 1.0);
            }
            m * 10f64.powi(scale)
        })
    }

    proptest! {
        #[test]
        fn penrose_identities_hold(a in matrix_strategy()) {
            let p = pseudo_inverse(&a, DEFAULT_RANK_TOL).unwrap();
            let scale = a.abs().max().max(p.abs().max()).max(1.0);
            prop_assert!(penrose_residual(&a, &p) <= 1e-8 * scale);
        }

        #[test]
        fn minimize_box_stays_feasible_and_descends(
            c in proptest::collection::vec(-5.0f64..5.0, 3),
            x0 in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let b = BoxConstraint::symmetric(1.0, 3).unwrap();
            let cc = c.clone();
            let f = move |x: &[f64]| x.iter().zip(&cc).map(|(a, b)| (a - b).powi(4) + (a - b).powi(2)).sum::<f64>();
            let f0 = f(&x0);
            let r = minimize_box(
                f,
                |x: &[f64]| x.iter().zip(&c).map(|(a, b)| 4.0 * (a - b).powi(3) + 2.0 * (a - b)).collect(),
                &b, &x0, &MinimizeOptions::default(),
            ).unwrap();
            prop_assert!(b.contains(&r.x));
            prop_assert!(r.value <= f0);
        }

        #[test]
        fn equality_qp_satisfies_constraints(
            hv in proptest::collection::vec(-1.0f64..1.0, 16),
            av in proptest::collection::vec(-1.0f64..1.0, 8),
            g in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            let m = Matrix::from_row_slice(4, 4, &hv);
            let h = &m * m.transpose() + Matrix::identity(4, 4);
            let mut a = Matrix::from_row_slice(2, 4, &av);
            a[(0, 0)] += 3.0;
            a[(1, 1)] += 3.0;
            let x = solve_equality_qp(&h, &g, &a, &b).unwrap();
            let ax = &a * DVector::from_column_slice(&x);
            for i in 0..2 {
                prop_assert!((ax[i] - b[i]).abs() <= 1e-10 * (1.0 + b[i].abs()));
            }
            // Stationarity: H x + g lies in the row space of A.
            let grad = &h * DVector::from_column_slice(&x) + DVector::from_column_slice(&g);
            let lam = pseudo_inverse(&a.transpose(), 1e-12).unwrap() * &grad;
            let resid = grad - a.transpose() * lam;
            prop_assert!(resid.norm() <= 1e-8 * (1.0 + DVector::from_column_slice(&b).norm()));
        }
    }
}
