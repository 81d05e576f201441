//! Extended dynamic mode decomposition with a monomial dictionary and the
//! bilinear control decomposition `K_u = K₀ + Σ uᵢ(Kᵢ − K₀)`.

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::funnel::IntervalRecord;
use crate::numerics::{self, Matrix};
use crate::system::{sampled_flow, ControlAffineSystem};

/// Relative cutoff for `Ψ_X⁺`; monomial Gramians are badly conditioned.
pub const EDMD_PINV_TOL: f64 = 1e-10;

/// Monomial observables ordered constant first, then by total degree, then
/// lexicographically (descending powers of the leading coordinate).
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    n: usize,
    exponents: Vec<Vec<u32>>,
}

fn compositions(n: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() == n - 1 {
        let used: u32 = prefix.iter().sum();
        let mut e = prefix.clone();
        e.push(total - used);
        out.push(e);
        return;
    }
    let used: u32 = prefix.iter().sum();
    for p in (0..=total - used).rev() {
        prefix.push(p);
        compositions(n, total, prefix, out);
        prefix.pop();
    }
}

impl Dictionary {
    pub fn monomials(n: usize, max_degree: u32) -> Result<Self> {
        if n == 0 || max_degree == 0 {
            return Err(Error::InvalidInput("dictionary needs n ≥ 1 and degree ≥ 1".into()));
        }
        let mut exponents = Vec::new();
        for deg in 0..=max_degree {
            compositions(n, deg, &mut Vec::new(), &mut exponents);
        }
        Ok(Self { n, exponents })
    }

    /// Observable count `M + 1`.
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Indices of the observables `ψ(x) = x_i`, in coordinate order.
    pub fn coordinate_rows(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                self.exponents
                    .iter()
                    .position(|e| e.iter().enumerate().all(|(j, &p)| p == u32::from(i == j)))
                    .expect("monomial dictionary contains every coordinate")
            })
            .collect()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(x).map(|(&p, &xi)| xi.powi(p as i32)).product();
        }
    }

    /// `DΨ(x)`, shape `(M+1) × n`.
    pub fn jacobian(&self, x: &[f64]) -> Matrix {
        let mut j = Matrix::zeros(self.len(), self.n);
        self.jacobian_into(x, j.as_mut_slice());
        j
    }

    /// Column-major `(M+1) × n` Jacobian into a flat buffer.
    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        let rows = self.len();
        for (r, e) in self.exponents.iter().enumerate() {
            for c in 0..self.n {
                out[c * rows + r] = if e[c] == 0 {
                    0.0
                } else {
                    e.iter()
                        .zip(x)
                        .enumerate()
                        .map(|(j, (&p, &xj))| {
                            if j == c {
                                f64::from(p) * xj.powi(p as i32 - 1)
                            } else {
                                xj.powi(p as i32)
                            }
                        })
                        .product()
                };
            }
        }
    }

    /// `Ψ_X` with one column per sample.
    pub fn lift(&self, xs: &[Vec<f64>]) -> Matrix {
        let mut m = Matrix::zeros(self.len(), xs.len());
        for (j, x) in xs.iter().enumerate() {
            self.eval_into(x, m.column_mut(j).as_mut_slice());
        }
        m
    }
}

/// Snapshot pairs recorded under one constant input.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub input: Vec<f64>,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub successors: Vec<Vec<f64>>,
}

impl SnapshotSet {
    pub fn new(input: Vec<f64>, dt: f64) -> Self {
        Self {
            input,
            dt,
            states: Vec::new(),
            successors: Vec::new(),
        }
    }

    /// Successors computed by the sampled flow of `sys`.
    pub fn generate(sys: &ControlAffineSystem, points: &[Vec<f64>], input: &[f64], dt: f64, substeps: usize) -> Result<Self> {
        let mut s = Self::new(input.to_vec(), dt);
        for p in points {
            s.push(p.clone(), sampled_flow(sys, p, input, dt, substeps)?);
        }
        Ok(s)
    }

    pub fn push(&mut self, x: Vec<f64>, x_next: Vec<f64>) {
        self.states.push(x);
        self.successors.push(x_next);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn csv_header(n: usize, m: usize) -> Vec<String> {
    (1..=n)
        .map(|i| format!("x{i}"))
        .chain((1..=m).map(|i| format!("u{i}")))
        .chain((1..=n).map(|i| format!("xp{i}")))
        .chain(std::iter::once("dt".to_string()))
        .collect()
}

/// Writes the sets as rows `x₁..x_n, u₁..u_m, x⁺₁..x⁺_n, dt`.
pub fn write_snapshots_csv(sets: &[SnapshotSet], path: &Path) -> Result<()> {
    let Some(first) = sets.iter().find(|s| !s.is_empty()) else {
        return Err(Error::InvalidInput("no snapshots to write".into()));
    };
    let n = first.states[0].len();
    let m = first.input.len();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(csv_header(n, m))?;
    for s in sets {
        for (x, xp) in s.states.iter().zip(&s.successors) {
            let row: Vec<String> = x
                .iter()
                .chain(&s.input)
                .chain(xp)
                .chain(std::iter::once(&s.dt))
                .map(|v| format!("{v:e}"))
                .collect();
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads snapshot rows and groups them by `(u, dt)` in order of first
/// appearance.
pub fn read_snapshots_csv(path: &Path, n: usize, m: usize) -> Result<Vec<SnapshotSet>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != csv_header(n, m) {
        return Err(Error::InvalidInput(format!("unexpected snapshot header {header:?}")));
    }
    let mut sets: Vec<SnapshotSet> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("bad number {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let x = vals[..n].to_vec();
        let u = vals[n..n + m].to_vec();
        let xp = vals[n + m..2 * n + m].to_vec();
        let dt = vals[2 * n + m];
        match sets.iter_mut().find(|s| s.input == u && s.dt == dt) {
            Some(s) => s.push(x, xp),
            None => {
                let mut s = SnapshotSet::new(u, dt);
                s.push(x, xp);
                sets.push(s);
            }
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdFit {
    pub k: Matrix,
    /// Numerical rank of `Ψ_X`; below `min(M+1, d)` the fit is not unique.
    pub rank: usize,
}

impl EdmdFit {
    pub fn is_rank_deficient(&self, dict_len: usize, samples: usize) -> bool {
        self.rank < dict_len.min(samples)
    }
}

/// `K = Ψ_{X⁺} Ψ_X⁺`.
pub fn edmd_fit(snap: &SnapshotSet, dict: &Dictionary, tol: f64) -> Result<EdmdFit> {
    if snap.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let psi_x = dict.lift(&snap.states);
    let psi_y = dict.lift(&snap.successors);
    let rank = numerics::numerical_rank(&psi_x, tol)?;
    let k = psi_y * numerics::pseudo_inverse(&psi_x, tol)?;
    Ok(EdmdFit { k, rank })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSurrogate {
    pub dict: Dictionary,
    pub k0: Matrix,
    pub k_inputs: Vec<Matrix>,
    pub dt: f64,
    pub selector: Vec<usize>,
}

impl BilinearSurrogate {
    /// Fits `K₀` on `snap0` (`ũ = 0`) and `Kᵢ` on `snaps[i]` (`ũ = eᵢ`).
    pub fn fit(snap0: &SnapshotSet, snaps: &[SnapshotSet], dict: &Dictionary, tol: f64) -> Result<Self> {
        let m = snaps.len();
        if m == 0 {
            return Err(Error::InvalidInput("need one snapshot set per input channel".into()));
        }
        for (i, s) in snaps.iter().enumerate() {
            if s.dt != snap0.dt {
                return Err(Error::InvalidInput(format!("snapshot set {i} has Δt {} ≠ {}", s.dt, snap0.dt)));
            }
            if s.input.len() != m || s.input.iter().enumerate().any(|(j, &v)| v != f64::from(u8::from(i == j))) {
                return Err(Error::InvalidInput(format!("snapshot set {i} is not labelled with e_{}", i + 1)));
            }
        }
        if snap0.input.iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidInput("autonomous snapshot set must have zero input".into()));
        }
        let k0 = edmd_fit(snap0, dict, tol)?.k;
        let k_inputs = snaps
            .iter()
            .map(|s| edmd_fit(s, dict, tol).map(|f| f.k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dict: dict.clone(),
            k0,
            k_inputs,
            dt: snap0.dt,
            selector: dict.coordinate_rows(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.k_inputs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.dict.state_dim()
    }

    /// `K_u = K₀ + Σ uᵢ (Kᵢ − K₀)`.
    pub fn k_u(&self, u: &[f64]) -> Matrix {
        let mut k = self.k0.clone();
        for (ki, &ui) in self.k_inputs.iter().zip(u) {
            k += (ki - &self.k0) * ui;
        }
        k
    }

    pub fn reproject(&self, lifted: &[f64]) -> Vec<f64> {
        self.selector.iter().map(|&r| lifted[r]).collect()
    }

    /// `x⁺ = S K_u Ψ(x)`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let psi = DVector::from_vec(self.dict.eval(x));
        let lifted = self.k_u(u) * psi;
        self.reproject(lifted.as_slice())
    }
}

/// Safeguard-aware acceptance filter for sampled-data triplets.
///
/// A triplet `(x(kΔt), ũ, x((k+1)Δt))` is kept only when the activation
/// stayed zero on the whole interval, and it is routed to the set whose label
/// equals `ũ` (`0` or a unit vector). Other inputs are silently dropped.
#[derive(Debug, Clone)]
pub struct OnlineCollector {
    pub snap0: SnapshotSet,
    pub snaps: Vec<SnapshotSet>,
    cap: Option<usize>,
}

impl OnlineCollector {
    pub fn new(m: usize, dt: f64, cap: Option<usize>) -> Self {
        Self {
            snap0: SnapshotSet::new(vec![0.0; m], dt),
            snaps: (0..m)
                .map(|i| SnapshotSet::new((0..m).map(|j| f64::from(u8::from(i == j))).collect(), dt))
                .collect(),
            cap,
        }
    }

    pub fn with_initial(snap0: SnapshotSet, snaps: Vec<SnapshotSet>, cap: Option<usize>) -> Self {
        Self { snap0, snaps, cap }
    }

    pub fn total(&self) -> usize {
        self.snap0.len() + self.snaps.iter().map(SnapshotSet::len).sum::<usize>()
    }

    pub fn is_full(&self) -> bool {
        self.cap.is_some_and(|c| self.total() >= c)
    }

    /// Whether the interval passes the filter and is routable.
    pub fn accepts(&self, rec: &IntervalRecord) -> bool {
        !self.is_full() && rec.a_max == 0.0 && rec.dt == self.snap0.dt && self.route(&rec.mu).is_some()
    }

    fn route(&self, u: &[f64]) -> Option<Option<usize>> {
        if u.len() != self.snaps.len() {
            return None;
        }
        if u.iter().all(|&v| v == 0.0) {
            return Some(None);
        }
        self.snaps.iter().position(|s| s.input == u).map(Some)
    }

    /// Returns true if the triplet was stored.
    pub fn offer(&mut self, rec: &IntervalRecord) -> bool {
        if !self.accepts(rec) {
            return false;
        }
        let target = match self.route(&rec.mu) {
            Some(None) => &mut self.snap0,
            Some(Some(i)) => &mut self.snaps[i],
            None => return false,
        };
        target.push(rec.x_start.clone(), rec.x_end.clone());
        true
    }
}

/// Batch form of [`OnlineCollector`].
pub fn collect_online(records: &[IntervalRecord], m: usize, dt: f64, cap: Option<usize>) -> OnlineCollector {
    let mut c = OnlineCollector::new(m, dt, cap);
    for r in records {
        c.offer(r);
    }
    c
}
