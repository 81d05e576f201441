//! Model-free funnel safeguard and the two-component combiner
//! `u = μ + a_τ·u_FC`.
//!
//! The funnel feedback keeps `‖y − y_ref‖ < 1/σ(t)` for relative-degree-two
//! plants with a positive definite input map. The activation gain `a_τ`
//! switches it on only when the auxiliary error `e₂` leaves the safe region
//! `‖e₂‖ ≤ λ`, and holds it for a dwell time `τ`.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::norm;
use crate::system::{Controller, Diagnostics};

/// Errors closer than this to the unit sphere are reported as violations.
pub const SINGULARITY_GUARD: f64 = 1e-9;

/// `σ` with `inf σ > 0`; the admissible error radius is `1/σ(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum FunnelFunction {
    Constant(f64),
    /// Radius 2.3 until `t = 4`, then `2e^{−2(t−4)} + 0.3`.
    ShrinkingExample,
    /// Piecewise-linear interpolation of `(t, σ)` knots, constant outside.
    Piecewise(Vec<(f64, f64)>),
}

impl FunnelFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            FunnelFunction::Constant(s) => *s,
            FunnelFunction::ShrinkingExample => shrinking_sigma(t),
            FunnelFunction::Piecewise(knots) => {
                let first = knots[0];
                if t <= first.0 {
                    return first.1;
                }
                for w in knots.windows(2) {
                    let (t0, s0) = w[0];
                    let (t1, s1) = w[1];
                    if t <= t1 {
                        return s0 + (s1 - s0) * (t - t0) / (t1 - t0);
                    }
                }
                knots[knots.len() - 1].1
            }
        }
    }

    pub fn radius(&self, t: f64) -> f64 {
        1.0 / self.eval(t)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FunnelFunction::Constant(s) if !(*s > 0.0 && s.is_finite()) => {
                Err(Error::InvalidInput("constant funnel parameter must be positive".into()))
            }
            FunnelFunction::Piecewise(knots) => {
                if knots.is_empty() || knots.iter().any(|&(_, s)| !(s > 0.0 && s.is_finite())) {
                    return Err(Error::InvalidInput("piecewise funnel needs positive knots".into()));
                }
                if knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(Error::InvalidInput("funnel knot times must increase".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// The shrinking funnel of the Van der Pol scenarios.
pub fn shrinking_sigma(t: f64) -> f64 {
    if t <= 4.0 {
        1.0 / 2.3
    } else {
        1.0 / (2.0 * (-2.0 * (t - 4.0)).exp() + 0.3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState {
    pub e: Vec<f64>,
    pub de: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
}

/// `e₁ = σe`, `e₂ = σė + e₁/(1 − ‖e₁‖²)`.
pub fn error_vars(t: f64, y: &[f64], dy: &[f64], y_ref: &[f64], dy_ref: &[f64], sigma: &FunnelFunction) -> Result<ErrorState> {
    let s = sigma.eval(t);
    let e: Vec<f64> = y.iter().zip(y_ref).map(|(a, b)| a - b).collect();
    let de: Vec<f64> = dy.iter().zip(dy_ref).map(|(a, b)| a - b).collect();
    let e1: Vec<f64> = e.iter().map(|v| s * v).collect();
    let n1 = norm(&e1);
    if !(n1 < 1.0 - SINGULARITY_GUARD) {
        return Err(Error::FunnelViolation { t, e1: n1, e2: f64::NAN });
    }
    let gain = 1.0 / (1.0 - n1 * n1);
    let e2 = de.iter().zip(&e1).map(|(d, a)| s * d + a * gain).collect();
    Ok(ErrorState { e, de, e1, e2 })
}

/// `−e₂/(1 − ‖e₂‖²)`.
pub fn u_fc(e2: &[f64]) -> Result<Vec<f64>> {
    let n2 = norm(e2);
    if !(n2 < 1.0 - SINGULARITY_GUARD) {
        return Err(Error::FunnelViolation {
            t: f64::NAN,
            e1: f64::NAN,
            e2: n2,
        });
    }
    let gain = 1.0 / (1.0 - n2 * n2);
    Ok(e2.iter().map(|v| -v * gain).collect())
}

/// Running maximum of `‖e₂‖` over the trailing window `[t − τ, t]`.
#[derive(Debug, Clone)]
pub struct ActivationWindow {
    tau: f64,
    lambda: f64,
    samples: VecDeque<(f64, f64)>,
}

impl ActivationWindow {
    pub fn new(tau: f64, lambda: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidInput("dwell time must be positive".into()));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::InvalidInput("activation threshold must lie in (0, 1)".into()));
        }
        Ok(Self {
            tau,
            lambda,
            samples: VecDeque::new(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Records `(t, ‖e₂(t)‖)` and returns `max{0, max_{[t−τ,t]} ‖e₂‖ − λ}`.
    pub fn activation(&mut self, t: f64, e2_norm: f64) -> Result<f64> {
        if let Some(&(last, _)) = self.samples.back() {
            // RK4 stage times and log times may differ in the last bit.
            if t < last - 1e-12 * last.abs().max(1.0) {
                return Err(Error::TimeRegression { previous: last, t });
            }
        }
        self.samples.push_back((t, e2_norm));
        let horizon = t - self.tau - 1e-12 * t.abs().max(1.0);
        while let Some(&(s, _)) = self.samples.front() {
            if s < horizon {
                self.samples.pop_front();
            } else {
                break;
            }
        }
        Ok(self.current())
    }

    /// Activation from the samples currently held.
    pub fn current(&self) -> f64 {
        let peak = self.samples.iter().map(|&(_, v)| v).fold(0.0, f64::max);
        (peak - self.lambda).max(0.0)
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }
}

pub fn combine(mu: &[f64], a: f64, ufc: &[f64]) -> Vec<f64> {
    mu.iter().zip(ufc).map(|(m, f)| m + a * f).collect()
}

/// `t ↦ (y_ref(t), ẏ_ref(t))`.
pub type ReferenceFn = Arc<dyn Fn(f64) -> (Vec<f64>, Vec<f64>) + Send + Sync>;

pub fn constant_reference(value: Vec<f64>) -> ReferenceFn {
    let zero = vec![0.0; value.len()];
    Arc::new(move |_t| (value.clone(), zero.clone()))
}

/// One completed sampling interval `[kΔt, (k+1)Δt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRecord {
    pub index: usize,
    pub dt: f64,
    pub x_start: Vec<f64>,
    /// Predictive input held on the interval.
    pub mu: Vec<f64>,
    pub x_end: Vec<f64>,
    /// Largest activation seen at any integrator stage inside the interval.
    pub a_max: f64,
}

/// Sampled-data predictive component of the combiner.
pub trait Predictor {
    /// Returns `μ` to hold on `[kΔt, (k+1)Δt)`. `finished` describes the
    /// interval that just ended (absent at `k = 0`).
    fn predict(&mut self, k: usize, t: f64, x: &[f64], finished: Option<&IntervalRecord>) -> Result<Vec<f64>>;

    fn data_count(&self) -> usize {
        0
    }

    fn model_version(&self) -> usize {
        0
    }
}

/// `μ ≡ 0`.
#[derive(Debug, Clone)]
pub struct ZeroPredictor(pub usize);

impl Predictor for ZeroPredictor {
    fn predict(&mut self, _k: usize, _t: f64, _x: &[f64], _f: Option<&IntervalRecord>) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.0])
    }
}

impl<F> Predictor for F
where
    F: FnMut(usize, f64, &[f64]) -> Vec<f64>,
{
    fn predict(&mut self, k: usize, t: f64, x: &[f64], _f: Option<&IntervalRecord>) -> Result<Vec<f64>> {
        Ok(self(k, t, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafeguardMode {
    /// `a = a_τ` from the activation window.
    Activated,
    /// `a ≡ 0`: predictive control alone (ablation).
    Disabled,
    /// `a ≡ 1`: plain funnel feedback on top of `μ`.
    AlwaysOn,
}

#[derive(Debug, Clone, Copy)]
pub struct SafeguardConfig {
    pub lambda: f64,
    pub tau: f64,
    pub mode: SafeguardMode,
    /// Sampling time of the predictive component.
    pub dt: f64,
}

/// `u(t) = μ(t) + a(t)·u_FC(t)` with `μ` held constant between samples.
pub struct SafeguardedController<P> {
    m: usize,
    reference: ReferenceFn,
    sigma: FunnelFunction,
    window: ActivationWindow,
    mode: SafeguardMode,
    dt: f64,
    predictor: P,
    mu: Vec<f64>,
    interval_start: Option<(usize, Vec<f64>)>,
    a_max: f64,
    last_ufc: Vec<f64>,
    last_a: f64,
}

impl<P: Predictor> SafeguardedController<P> {
    pub fn new(m: usize, reference: ReferenceFn, sigma: FunnelFunction, cfg: SafeguardConfig, predictor: P) -> Result<Self> {
        sigma.validate()?;
        if !(cfg.dt > 0.0) {
            return Err(Error::InvalidInput("sampling time must be positive".into()));
        }
        Ok(Self {
            m,
            reference,
            sigma,
            window: ActivationWindow::new(cfg.tau, cfg.lambda)?,
            mode: cfg.mode,
            dt: cfg.dt,
            predictor,
            mu: vec![0.0; m],
            interval_start: None,
            a_max: 0.0,
            last_ufc: vec![0.0; m],
            last_a: 0.0,
        })
    }

    pub fn predictor(&self) -> &P {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut P {
        &mut self.predictor
    }

    pub fn into_predictor(self) -> P {
        self.predictor
    }

    pub fn sigma(&self) -> &FunnelFunction {
        &self.sigma
    }

    fn sampling_index(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        ((t - k * self.dt).abs() <= 1e-9 * self.dt.max(t.abs())).then_some(k as usize)
    }
}

impl<P: Predictor> Controller for SafeguardedController<P> {
    fn sample(&mut self, t: f64, x: &[f64]) -> Result<()> {
        let Some(k) = self.sampling_index(t) else {
            return Ok(());
        };
        let record = self.interval_start.take().map(|(index, x_start)| IntervalRecord {
            index,
            dt: self.dt,
            x_start,
            mu: self.mu.clone(),
            x_end: x.to_vec(),
            a_max: self.a_max,
        });
        let mu = self.predictor.predict(k, t, x, record.as_ref())?;
        if mu.len() != self.m || mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("predictor returned an invalid input at t = {t}")));
        }
        self.mu = mu;
        self.a_max = 0.0;
        self.interval_start = Some((k, x.to_vec()));
        Ok(())
    }

    fn input(&mut self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.m;
        let (y_ref, dy_ref) = (self.reference)(t);
        let es = error_vars(t, &x[..m], &x[m..2 * m], &y_ref, &dy_ref, &self.sigma)?;
        let e1 = norm(&es.e1);
        let e2 = norm(&es.e2);
        let violation = |_| Error::FunnelViolation { t, e1, e2 };
        let (a, ufc) = match self.mode {
            SafeguardMode::Activated => {
                let a = self.window.activation(t, e2)?;
                (a, u_fc(&es.e2).map_err(violation)?)
            }
            SafeguardMode::Disabled => (0.0, u_fc(&es.e2).unwrap_or_else(|_| vec![0.0; m])),
            SafeguardMode::AlwaysOn => (1.0, u_fc(&es.e2).map_err(violation)?),
        };
        self.a_max = self.a_max.max(a);
        self.last_a = a;
        let u = combine(&self.mu, a, &ufc);
        self.last_ufc = ufc;
        Ok(u)
    }

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            mu: self.mu.clone(),
            u_fc: self.last_ufc.clone(),
            a_tau: self.last_a,
            data_count: self.predictor.data_count(),
            model_version: self.predictor.model_version(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{simulate_closed_loop, ControlAffineSystem, SimulationOptions};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn error_vars_examples() {
        let s1 = FunnelFunction::Constant(1.0);
        let es = error_vars(0.0, &[0.3], &[0.1], &[0.3], &[0.1], &s1).unwrap();
        assert_eq!(es.e1, vec![0.0]);
        assert_eq!(es.e2, vec![0.0]);

        let es = error_vars(0.0, &[0.4], &[0.0], &[0.0], &[0.0], &FunnelFunction::Constant(0.5)).unwrap();
        assert_relative_eq!(es.e1[0], 0.2, epsilon = 1e-15);
        assert_relative_eq!(es.e2[0], 0.2 / 0.96, epsilon = 1e-15);

        let es = error_vars(0.0, &[0.0], &[0.3], &[0.0], &[0.0], &s1).unwrap();
        assert_eq!(es.e1, vec![0.0]);
        assert_relative_eq!(es.e2[0], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn error_vars_outside_funnel() {
        let r = error_vars(2.0, &[1.5], &[0.0], &[0.0], &[0.0], &FunnelFunction::Constant(1.0));
        assert!(matches!(r, Err(Error::FunnelViolation { t, .. }) if t == 2.0));
    }

    #[test]
    fn u_fc_examples() {
        assert_eq!(u_fc(&[0.0]).unwrap(), vec![0.0]);
        assert_relative_eq!(u_fc(&[0.5]).unwrap()[0], -0.5 / 0.75, epsilon = 1e-15);
        assert!(u_fc(&[1.0]).is_err());
        let mut prev = 0.0;
        for k in 1..100 {
            let v = u_fc(&[k as f64 / 100.0]).unwrap()[0].abs();
            assert!(v > prev);
            prev = v;
        }
        assert!(prev > 40.0);
    }

    #[test]
    fn shrinking_sigma_values() {
        assert_relative_eq!(shrinking_sigma(0.0), 1.0 / 2.3);
        assert_relative_eq!(shrinking_sigma(4.0), 1.0 / 2.3);
        assert_relative_eq!(shrinking_sigma(4.0 + 1e-12), 1.0 / 2.3, epsilon = 1e-10);
        assert_relative_eq!(shrinking_sigma(60.0), 1.0 / 0.3, epsilon = 1e-12);
        assert!((1..100).all(|i| shrinking_sigma(i as f64 * 0.1) >= shrinking_sigma((i - 1) as f64 * 0.1)));
    }

    #[test]
    fn piecewise_funnel() {
        let f = FunnelFunction::Piecewise(vec![(0.0, 1.0), (2.0, 3.0)]);
        f.validate().unwrap();
        assert_eq!(f.eval(-1.0), 1.0);
        assert_eq!(f.eval(1.0), 2.0);
        assert_eq!(f.eval(5.0), 3.0);
        assert!(FunnelFunction::Piecewise(vec![(0.0, -1.0)]).validate().is_err());
    }

    #[test]
    fn activation_examples() {
        let mut w = ActivationWindow::new(0.025, 0.75).unwrap();
        for k in 0..10 {
            assert_eq!(w.activation(k as f64 * 0.01, 0.5).unwrap(), 0.0);
        }
        let mut w = ActivationWindow::new(0.025, 0.75).unwrap();
        for k in 0..10 {
            assert_relative_eq!(w.activation(k as f64 * 0.01, 0.9).unwrap(), 0.15, epsilon = 1e-12);
        }
        assert!(matches!(w.activation(0.0, 0.1), Err(Error::TimeRegression { .. })));
    }

    #[test]
    fn activation_dwell_time_after_spike() {
        // Window-max oracle: a(t) > 0 iff the spike time lies in [t − τ, t].
        let tau = 0.025;
        let dt = 0.001;
        let t0 = 0.5;
        let mut w = ActivationWindow::new(tau, 0.75).unwrap();
        let spike_index = (t0 / dt) as usize;
        for k in 0..1000 {
            let t = k as f64 * dt;
            let v = if k == spike_index { 0.9 } else { 0.0 };
            let a = w.activation(t, v).unwrap();
            let expected_active = k >= spike_index && t - t0 <= tau + 1e-12;
            assert_eq!(a > 0.0, expected_active, "t = {t}");
            if expected_active {
                assert_relative_eq!(a, 0.15, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine(&[1.0], 0.0, &[5.0]), vec![1.0]);
        assert_relative_eq!(combine(&[0.0], 0.25, &[2.0])[0], 0.5);
        assert_relative_eq!(combine(&[1.0], 0.15, &[-2.0])[0], 0.7, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn u_fc_opposes_e2(e in proptest::collection::vec(-0.7f64..0.7, 1..4)) {
            prop_assume!(norm(&e) < 0.99);
            let u = u_fc(&e).unwrap();
            let inner: f64 = u.iter().zip(&e).map(|(a, b)| a * b).sum();
            prop_assert!(inner <= 0.0);
        }

        #[test]
        fn activation_bounded_and_monotone(vals in proptest::collection::vec(0.0f64..0.999, 1..50)) {
            let mut w = ActivationWindow::new(0.1, 0.75).unwrap();
            let mut peak: f64 = 0.0;
            for (k, v) in vals.iter().enumerate() {
                let a = w.activation(k as f64, *v).unwrap();
                prop_assert!((0.0..0.25).contains(&a));
                // τ < 1: window holds only the latest sample.
                peak = peak.max(*v);
                prop_assert!((a - (v - 0.75).max(0.0)).abs() < 1e-15);
            }
            prop_assert!(peak < 1.0);
        }
    }

    #[test]
    fn bounded_mu_stays_inside_funnel_on_vdp() {
        let sys = ControlAffineSystem::van_der_pol(0.1);
        let cfg = SafeguardConfig {
            lambda: 0.75,
            tau: 0.025,
            mode: SafeguardMode::Activated,
            dt: 0.05,
        };
        // Aggressive bounded schedule that leaves the funnel without help.
        let probe = |k: usize, _t: f64, _x: &[f64]| vec![if (k / 20).is_multiple_of(2) { 2.0 } else { -2.0 }];
        let mut ctrl = SafeguardedController::new(1, constant_reference(vec![0.0]), FunnelFunction::ShrinkingExample, cfg, probe).unwrap();
        let traj = simulate_closed_loop(&sys, &[1.0, -1.0], &mut ctrl, &SimulationOptions::default()).unwrap();
        for (t, x) in traj.times.iter().zip(&traj.states) {
            assert!(x[0].abs() < 1.0 / shrinking_sigma(*t));
        }
        assert!(traj.diagnostics.iter().any(|d| d.a_tau > 0.0));
    }
}
