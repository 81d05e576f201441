//! Kernel EDMD for control-affine systems and the safe sampling planner.
//!
//! Data come in clusters around virtual-observation points `x_i`: a few
//! triplets `(x_ij, u_ij, x⁺_ij)` with `‖x_ij − x_i‖ ≤ ε_c`. Each cluster
//! yields estimates `g̃₀(x_i)`, `G̃(x_i)` of the sampled drift and input maps,
//! which a Wendland-kernel interpolant extends to the whole domain.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, DEFAULT_RANK_TOL};
use crate::system::{sampled_flow, ControlAffineSystem};

/// Compactly supported Wendland function `φ_{ℓ,k}` with `ℓ = ⌊n/2⌋ + k + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WendlandKernel {
    dim: usize,
    smoothness: usize,
    support: f64,
}

impl WendlandKernel {
    pub fn new(dim: usize, smoothness: usize, support: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) || !(1..=2).contains(&smoothness) {
            return Err(Error::UnsupportedKernel { dim, smoothness });
        }
        if !(support > 0.0) || !support.is_finite() {
            return Err(Error::InvalidInput("kernel support radius must be positive".into()));
        }
        Ok(Self { dim, smoothness, support })
    }

    pub fn support(&self) -> f64 {
        self.support
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn ell(&self) -> i32 {
        (self.dim / 2 + self.smoothness + 1) as i32
    }

    /// Radial profile at the scaled radius `r = ‖x − y‖ / support`.
    pub fn profile(&self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        let l = f64::from(self.ell());
        let s = 1.0 - r;
        match self.smoothness {
            1 => s.powi(self.ell() + 1) * ((l + 1.0) * r + 1.0),
            _ => s.powi(self.ell() + 2) * ((l * l + 4.0 * l + 3.0) * r * r + (3.0 * l + 6.0) * r + 3.0) / 3.0,
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        self.profile(d / self.support)
    }

    pub fn gram(&self, points: &[Vec<f64>]) -> Matrix {
        Matrix::from_fn(points.len(), points.len(), |i, j| self.eval(&points[i], &points[j]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FillDistance {
    pub value: f64,
    /// Grid point realising the maximum distance.
    pub witness: Vec<f64>,
    /// Half the diagonal of one grid cell: the scan underestimates the true
    /// fill distance by at most this much.
    pub grid_bound: f64,
}

/// `h = sup_{x∈box} min_i ‖x − x_i‖`, scanned on a grid with `resolution`
/// intervals per axis.
pub fn fill_distance(samples: &[Vec<f64>], lower: &[f64], upper: &[f64], resolution: usize) -> Result<FillDistance> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("fill distance of an empty sample set".into()));
    }
    let n = lower.len();
    if resolution == 0 || upper.len() != n || samples.iter().any(|s| s.len() != n) {
        return Err(Error::InvalidInput("fill distance: bad domain or resolution".into()));
    }
    let steps: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| (u - l) / resolution as f64).collect();
    let total = (resolution + 1).pow(n as u32);
    let mut best = (-1.0, vec![0.0; n]);
    let mut x = vec![0.0; n];
    for idx in 0..total {
        let mut rem = idx;
        for c in 0..n {
            x[c] = lower[c] + (rem % (resolution + 1)) as f64 * steps[c];
            rem /= resolution + 1;
        }
        let nearest = samples
            .iter()
            .map(|s| s.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        if nearest > best.0 {
            best = (nearest, x.clone());
        }
    }
    Ok(FillDistance {
        value: best.0,
        witness: best.1,
        grid_bound: 0.5 * steps.iter().map(|s| s * s).sum::<f64>().sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub x_next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub center: Vec<f64>,
    pub members: Vec<Triplet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualObservationSet {
    pub eps_c: f64,
    pub clusters: Vec<Cluster>,
}

impl VirtualObservationSet {
    pub fn centers(&self) -> Vec<Vec<f64>> {
        self.clusters.iter().map(|c| c.center.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_c > 0.0) {
            return Err(Error::InvalidInput("cluster radius must be positive".into()));
        }
        for (i, a) in self.clusters.iter().enumerate() {
            for b in &self.clusters[..i] {
                if a.center == b.center {
                    return Err(Error::InvalidInput(format!("virtual point {i} is duplicated")));
                }
            }
            for t in &a.members {
                if numerics::norm(&sub(&t.x, &a.center)) > self.eps_c * (1.0 + 1e-12) {
                    return Err(Error::InvalidInput(format!("cluster {i} has a member outside its ε_c-ball")));
                }
            }
        }
        Ok(())
    }

    /// Clusters generated by the sampled flow: member `j` sits at
    /// `x_i + (ε_c/2)·e_{j mod n}` (the first at `x_i` itself) and uses
    /// input `inputs[j]`.
    pub fn generate(
        sys: &ControlAffineSystem,
        centers: &[Vec<f64>],
        eps_c: f64,
        inputs: &[Vec<f64>],
        dt: f64,
        substeps: usize,
    ) -> Result<Self> {
        let n = sys.state_dim();
        let mut clusters = Vec::with_capacity(centers.len());
        for c in centers {
            let mut members = Vec::with_capacity(inputs.len());
            for (j, u) in inputs.iter().enumerate() {
                let mut x = c.clone();
                if j > 0 {
                    x[(j - 1) % n] += 0.5 * eps_c;
                }
                let x_next = sampled_flow(sys, &x, u, dt, substeps)?;
                members.push(Triplet { x, u: u.clone(), x_next });
            }
            clusters.push(Cluster {
                center: c.clone(),
                members,
            });
        }
        Ok(Self { eps_c, clusters })
    }
}

/// Inputs `{0, e₁, …, e_m, 0}`.
pub fn default_cluster_inputs(m: usize) -> Vec<Vec<f64>> {
    let mut v = vec![vec![0.0; m]];
    for i in 0..m {
        v.push((0..m).map(|j| f64::from(u8::from(i == j))).collect());
    }
    v.push(vec![0.0; m]);
    v
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `[g̃₀, G̃] = [x⁺_{i1} … x⁺_{id}] U⁺` with `U` stacking `(1; u_ij)`.
pub fn cluster_regression(cluster: &Cluster, index: usize) -> Result<(Vec<f64>, Matrix)> {
    let Some(first) = cluster.members.first() else {
        return Err(Error::InsufficientData { needed: 2, got: 0 });
    };
    let m = first.u.len();
    let n = first.x_next.len();
    let d = cluster.members.len();
    let mut u = Matrix::zeros(m + 1, d);
    let mut xp = Matrix::zeros(n, d);
    for (j, t) in cluster.members.iter().enumerate() {
        u[(0, j)] = 1.0;
        for i in 0..m {
            u[(i + 1, j)] = t.u[i];
        }
        for i in 0..n {
            xp[(i, j)] = t.x_next[i];
        }
    }
    let rank = numerics::numerical_rank(&u, 1e-10)?;
    if rank < m + 1 {
        return Err(Error::RankDeficientInputs {
            cluster: index,
            rank,
            needed: m + 1,
        });
    }
    let coef = xp * numerics::pseudo_inverse(&u, DEFAULT_RANK_TOL)?;
    let g0 = coef.column(0).iter().copied().collect();
    let g = coef.columns(1, m).into_owned();
    Ok((g0, g))
}

/// Kernel interpolant of the per-point drift and input-map estimates.
#[derive(Debug, Clone)]
pub struct KernelSurrogate {
    pub kernel: WendlandKernel,
    pub points: Vec<Vec<f64>>,
    pub estimates: Vec<(Vec<f64>, Matrix)>,
    /// Interpolation weights, one column per scalar entry of `[g̃₀ G̃]`
    /// (column-major within each point).
    pub coefficients: Matrix,
    pub condition: f64,
    pub m: usize,
}

/// Largest accepted Gram condition number after jitter.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

impl KernelSurrogate {
    pub fn fit(vos: &VirtualObservationSet, kernel: WendlandKernel) -> Result<Self> {
        vos.validate()?;
        if vos.clusters.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let estimates = vos
            .clusters
            .iter()
            .enumerate()
            .map(|(i, c)| cluster_regression(c, i))
            .collect::<Result<Vec<_>>>()?;
        let points = vos.centers();
        let d = points.len();
        let n = estimates[0].0.len();
        let m = estimates[0].1.ncols();
        let width = n * (m + 1);
        let targets = Matrix::from_fn(d, width, |i, c| {
            let (g0, g) = &estimates[i];
            if c < n {
                g0[c]
            } else {
                g[((c - n) % n, (c - n) / n)]
            }
        });

        let gram = kernel.gram(&points);
        let mut jittered = gram.clone();
        let jitter = 1e-10 * gram.trace() / d as f64;
        for i in 0..d {
            jittered[(i, i)] += jitter;
        }
        let sv = numerics::svd(&jittered)?.singular_values;
        let condition = sv[0] / sv[sv.len() - 1];
        if !condition.is_finite() || condition > MAX_GRAM_CONDITION {
            return Err(Error::IllConditioned { condition });
        }
        let chol = jittered.cholesky().ok_or(Error::IllConditioned { condition })?;
        // Refinement against the unjittered Gram restores exact interpolation.
        let mut coefficients = chol.solve(&targets);
        for _ in 0..3 {
            let residual = &targets - &gram * &coefficients;
            coefficients += chol.solve(&residual);
        }
        Ok(Self {
            kernel,
            points,
            estimates,
            coefficients,
            condition,
            m,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.estimates[0].0.len()
    }

    /// `(g₀^ε(x), G^ε(x))`.
    pub fn maps(&self, x: &[f64]) -> (Vec<f64>, Matrix) {
        let n = self.state_dim();
        let kv = DVector::from_iterator(self.points.len(), self.points.iter().map(|p| self.kernel.eval(p, x)));
        let vals = self.coefficients.transpose() * kv;
        let g0 = vals.rows(0, n).iter().copied().collect();
        let g = Matrix::from_fn(n, self.m, |r, c| vals[n + c * n + r]);
        (g0, g)
    }

    /// `F^ε(x, u) = g₀^ε(x) + G^ε(x) u`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (g0, g) = self.maps(x);
        let gu = &g * DVector::from_column_slice(u);
        g0.iter().zip(gu.iter()).map(|(a, b)| a + b).collect()
    }

    /// Largest deviation of the interpolant from the estimates at the points.
    pub fn interpolation_residual(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.estimates)
            .map(|(p, (g0, g))| {
                let (h0, h) = self.maps(p);
                let d0 = numerics::norm(&sub(&h0, g0));
                d0.max((&h - g).amax())
            })
            .fold(0.0, f64::max)
    }
}

fn vos_header(n: usize, m: usize) -> Vec<String> {
    (1..=n)
        .map(|i| format!("c{i}"))
        .chain((1..=n).map(|i| format!("x{i}")))
        .chain((1..=m).map(|i| format!("u{i}")))
        .chain((1..=n).map(|i| format!("xp{i}")))
        .collect()
}

/// Rows `c₁..c_n, x₁..x_n, u₁..u_m, x⁺₁..x⁺_n`, one per cluster member.
pub fn write_vos_csv(vos: &VirtualObservationSet, path: &Path) -> Result<()> {
    let Some(t) = vos.clusters.iter().flat_map(|c| c.members.first()).next() else {
        return Err(Error::InvalidInput("no cluster members to write".into()));
    };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(vos_header(t.x.len(), t.u.len()))?;
    for c in &vos.clusters {
        for t in &c.members {
            let row: Vec<String> = c
                .center
                .iter()
                .chain(&t.x)
                .chain(&t.u)
                .chain(&t.x_next)
                .map(|v| format!("{v:e}"))
                .collect();
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_vos_csv(path: &Path, n: usize, m: usize, eps_c: f64) -> Result<VirtualObservationSet> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != vos_header(n, m) {
        return Err(Error::InvalidInput(format!("unexpected header {header:?}")));
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for rec in r.records() {
        let v = parse_row(&rec?)?;
        let center = v[..n].to_vec();
        let t = Triplet {
            x: v[n..2 * n].to_vec(),
            u: v[2 * n..2 * n + m].to_vec(),
            x_next: v[2 * n + m..3 * n + m].to_vec(),
        };
        match clusters.iter_mut().find(|c| c.center == center) {
            Some(c) => c.members.push(t),
            None => clusters.push(Cluster { center, members: vec![t] }),
        }
    }
    let vos = VirtualObservationSet { eps_c, clusters };
    vos.validate()?;
    Ok(vos)
}

fn parse_row(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad number {f:?}: {e}")))
        })
        .collect()
}

/// Reads virtual points (one per row, `2m` columns, header line required).
pub fn read_points_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    let pts = r.records().map(|rec| parse_row(&rec?)).collect::<Result<Vec<_>>>()?;
    if width % 2 != 0 || pts.iter().any(|p| p.len() != width) {
        return Err(Error::InvalidInput(
            "points need an even number of columns (positions then velocities)".into(),
        ));
    }
    Ok(pts)
}

/// Piecewise cubic Hermite reference through the virtual points.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub dt: f64,
    pub eps_c: f64,
    /// Constant funnel parameter; `3/σ ≤ ε_c` keeps the state inside each
    /// ball at its knot time.
    pub sigma: f64,
    pub knots: Vec<Vec<f64>>,
    /// Per knot, the times around `iΔt` where the reference stays within
    /// `ε_c − 3/σ` of the point, so the state is guaranteed inside the ball.
    pub windows: Vec<(f64, f64)>,
}

impl SamplingPlan {
    pub fn output_dim(&self) -> usize {
        self.knots[0].len() / 2
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        self.knot_time(self.knots.len() - 1)
    }

    /// `(y_ref, ẏ_ref, ÿ_ref)` at `t`; constant-velocity extension outside
    /// the knot range.
    pub fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = self.output_dim();
        let last = self.knots.len() - 1;
        if last == 0 || t <= 0.0 || t >= self.duration() {
            let (k, s) = if last == 0 || t <= 0.0 {
                (0, t.min(0.0))
            } else {
                (last, t - self.duration())
            };
            let p = &self.knots[k];
            return ((0..m).map(|i| p[i] + s * p[m + i]).collect(), p[m..].to_vec(), vec![0.0; m]);
        }
        let i = ((t / self.dt).floor() as usize).min(last - 1);
        let h = self.dt;
        let s = (t - self.knot_time(i)) / h;
        let (a, b) = (&self.knots[i], &self.knots[i + 1]);
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        let d00 = (6.0 * s * s - 6.0 * s) / h;
        let d10 = 3.0 * s * s - 4.0 * s + 1.0;
        let d01 = (-6.0 * s * s + 6.0 * s) / h;
        let d11 = 3.0 * s * s - 2.0 * s;
        let dd00 = (12.0 * s - 6.0) / (h * h);
        let dd10 = (6.0 * s - 4.0) / h;
        let dd01 = (-12.0 * s + 6.0) / (h * h);
        let dd11 = (6.0 * s - 2.0) / h;
        let mut y = vec![0.0; m];
        let mut dy = vec![0.0; m];
        let mut ddy = vec![0.0; m];
        for c in 0..m {
            let (p0, v0, p1, v1) = (a[c], a[m + c], b[c], b[m + c]);
            y[c] = h00 * p0 + h10 * h * v0 + h01 * p1 + h11 * h * v1;
            dy[c] = d00 * p0 + d10 * v0 + d01 * p1 + d11 * v1;
            ddy[c] = dd00 * p0 + dd10 * v0 + dd01 * p1 + dd11 * v1;
        }
        (y, dy, ddy)
    }

    /// Largest `|ÿ_ref|` over the knot range (finite for a `W^{2,∞}` plan).
    pub fn max_acceleration(&self) -> f64 {
        let samples = 200 * self.knots.len().max(1);
        (0..=samples)
            .map(|j| {
                self.eval(self.duration() * j as f64 / samples as f64)
                    .2
                    .iter()
                    .fold(0.0, |a: f64, v| a.max(v.abs()))
            })
            .fold(0.0, f64::max)
    }

    /// Knot table: `i, t, y…, dy…, window_start, window_end, sigma`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let m = self.output_dim();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let cols: Vec<String> = ["i".to_string(), "t".to_string()]
            .into_iter()
            .chain((1..=m).map(|i| format!("y{i}")))
            .chain((1..=m).map(|i| format!("dy{i}")))
            .chain(["window_start".to_string(), "window_end".to_string(), "sigma".to_string()])
            .collect();
        writeln!(f, "{}", cols.join(","))?;
        for (i, k) in self.knots.iter().enumerate() {
            let vals: Vec<String> = k.iter().map(|v| format!("{v}")).collect();
            let (ws, we) = self.windows[i];
            writeln!(f, "{i},{},{},{ws},{we},{}", self.knot_time(i), vals.join(","), self.sigma)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Plans a reference visiting `points` (positions then velocities) at times
/// `iΔt` with funnel parameter `σ = max(3/ε_c, sigma_floor)`.
pub fn plan_reference(points: &[Vec<f64>], dt: f64, eps_c: f64, sigma_floor: f64) -> Result<SamplingPlan> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no virtual points to plan through".into()));
    }
    if !(dt > 0.0) || !(eps_c > 0.0) {
        return Err(Error::InvalidInput("Δt and ε_c must be positive".into()));
    }
    let w = points[0].len();
    if w == 0 || !w.is_multiple_of(2) || points.iter().any(|p| p.len() != w || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput("points must be finite with positions then velocities".into()));
    }
    let m = w / 2;
    for (i, pair) in points.windows(2).enumerate() {
        // A repeated knot is a hold; with nonzero velocity it cannot be one.
        if pair[0] == pair[1] && pair[0][m..].iter().any(|&v| v != 0.0) {
            return Err(Error::InfeasibleSpline(format!(
                "points {i} and {} repeat with nonzero velocity",
                i + 1
            )));
        }
    }
    let sigma = (3.0 / eps_c).max(sigma_floor);
    let mut plan = SamplingPlan {
        dt,
        eps_c,
        sigma,
        knots: points.to_vec(),
        windows: Vec::new(),
    };
    let margin = eps_c - 3.0 / sigma;
    let probe = dt / 1000.0;
    let inside = |plan: &SamplingPlan, i: usize, t: f64| {
        let (y, dy, _) = plan.eval(t);
        let e: Vec<f64> = y.iter().chain(&dy).zip(&plan.knots[i]).map(|(a, b)| a - b).collect();
        numerics::norm(&e) <= margin
    };
    let windows = (0..points.len())
        .map(|i| {
            let t0 = plan.knot_time(i);
            let mut lo = t0;
            while lo - probe >= t0 - dt / 2.0 && lo - probe >= 0.0 && inside(&plan, i, lo - probe) {
                lo -= probe;
            }
            let mut hi = t0;
            while hi + probe <= t0 + dt / 2.0 && inside(&plan, i, hi + probe) {
                hi += probe;
            }
            (lo, hi)
        })
        .collect();
    plan.windows = windows;
    Ok(plan)
}

/// Uniform `g × g` grid on `[lo, hi]²`.
pub fn square_grid(g: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let step = if g > 1 { (hi - lo) / (g - 1) as f64 } else { 0.0 };
    (0..g)
        .flat_map(|i| (0..g).map(move |j| vec![lo + i as f64 * step, lo + j as f64 * step]))
        .collect()
}
