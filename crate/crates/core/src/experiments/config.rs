//! Flat `key = value` scenario configuration.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::funnel::SafeguardMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Stabilization,
    Setpoint10,
    Setpoint1,
    FlDemo,
    KedmdConvergence,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Stabilization,
        Scenario::Setpoint10,
        Scenario::Setpoint1,
        Scenario::FlDemo,
        Scenario::KedmdConvergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Stabilization => "stabilization",
            Scenario::Setpoint10 => "setpoint10",
            Scenario::Setpoint1 => "setpoint1",
            Scenario::FlDemo => "fl-demo",
            Scenario::KedmdConvergence => "kedmd-convergence",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaChoice {
    /// Radius 2.3 until t = 4, then shrinking to 0.3.
    Shrinking,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Zero,
    /// `1 + (erf(t − t̄) + erf(t̄))/√π`.
    Setpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub nu: f64,
    pub x0: [f64; 2],
    pub sigma: SigmaChoice,
    pub lambda: f64,
    /// Defaults to `dt / 2`.
    pub tau: Option<f64>,
    pub dt: f64,
    pub horizon: usize,
    pub q: [f64; 2],
    pub r: f64,
    pub u_max: f64,
    pub dict_degree: u32,
    pub initial_data: usize,
    pub data_cap: usize,
    pub collect_stride: usize,
    /// Exploration ends at the data cap or at this time.
    pub explore_t_max: f64,
    pub data_box: f64,
    pub reference: ReferenceKind,
    pub t_shift: f64,
    pub t_end: f64,
    pub substeps: usize,
    pub safeguard: SafeguardMode,
    /// Never hand over to the MPC (ablation).
    pub probe_only: bool,
    pub solver_max_iters: usize,
    pub solver_tol: f64,
    pub fl_systems: usize,
    pub fl_samples: usize,
    pub fl_depth: usize,
    pub kedmd_grids: Vec<usize>,
    pub kedmd_support: f64,
    pub kedmd_domain: f64,
    pub eps_c: f64,
    pub kedmd_dt: f64,
    pub kedmd_substeps: usize,
    pub test_grid: usize,
    pub fill_resolution: usize,
}

impl ScenarioConfig {
    pub fn defaults(scenario: Scenario) -> Self {
        let mut c = Self {
            scenario,
            nu: 0.1,
            x0: [1.0, -1.0],
            sigma: SigmaChoice::Shrinking,
            lambda: 0.75,
            tau: None,
            dt: 0.05,
            horizon: 30,
            q: [1e4, 1.0],
            r: 1e-4,
            u_max: 2.0,
            dict_degree: 3,
            initial_data: 10,
            data_cap: 25,
            collect_stride: 6,
            explore_t_max: 10.0,
            data_box: 2.0,
            reference: ReferenceKind::Zero,
            t_shift: 10.0,
            t_end: 20.0,
            substeps: 10,
            safeguard: SafeguardMode::Activated,
            probe_only: false,
            solver_max_iters: 500,
            solver_tol: 1e-6,
            fl_systems: 100,
            fl_samples: 60,
            fl_depth: 10,
            kedmd_grids: vec![5, 8, 12],
            kedmd_support: 2.0,
            kedmd_domain: 1.0,
            eps_c: 1e-3,
            kedmd_dt: 0.05,
            kedmd_substeps: 20,
            test_grid: 37,
            fill_resolution: 200,
        };
        match scenario {
            Scenario::Setpoint10 => {
                c.reference = ReferenceKind::Setpoint;
                c.t_shift = 10.0;
            }
            Scenario::Setpoint1 => {
                c.reference = ReferenceKind::Setpoint;
                c.t_shift = 16.0;
                c.initial_data = 1;
                c.data_cap = 100;
                c.collect_stride = 1;
                c.explore_t_max = 6.0;
            }
            _ => {}
        }
        c
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(self.dt / 2.0)
    }

    /// Defaults for `scenario` overridden by the lines of `text`.
    pub fn parse(scenario: Scenario, text: &str) -> Result<Self> {
        let mut c = Self::defaults(scenario);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            c.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "nu" => self.nu = num(key, value)?,
            "x0" => {
                let v = list::<f64>(key, value)?;
                if v.len() != 2 {
                    return Err(Error::Config("x0 needs two entries".into()));
                }
                self.x0 = [v[0], v[1]];
            }
            "sigma" => {
                self.sigma = if value == "shrinking" {
                    SigmaChoice::Shrinking
                } else {
                    SigmaChoice::Constant(num(key, value)?)
                }
            }
            "lambda" => self.lambda = num(key, value)?,
            "tau" => self.tau = Some(num(key, value)?),
            "dt" => self.dt = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "q" => {
                let v = list::<f64>(key, value)?;
                if v.len() != 2 {
                    return Err(Error::Config("q needs two diagonal entries".into()));
                }
                self.q = [v[0], v[1]];
            }
            "r" => self.r = num(key, value)?,
            "u_max" => self.u_max = num(key, value)?,
            "dict_degree" => self.dict_degree = num(key, value)?,
            "initial_data" => self.initial_data = num(key, value)?,
            "data_cap" => self.data_cap = num(key, value)?,
            "collect_stride" => self.collect_stride = num(key, value)?,
            "explore_t_max" => self.explore_t_max = num(key, value)?,
            "data_box" => self.data_box = num(key, value)?,
            "reference" => {
                self.reference = match value {
                    "zero" => ReferenceKind::Zero,
                    "setpoint" => ReferenceKind::Setpoint,
                    _ => return Err(Error::Config(format!("reference must be zero or setpoint, got {value:?}"))),
                }
            }
            "t_shift" => self.t_shift = num(key, value)?,
            "t_end" => self.t_end = num(key, value)?,
            "substeps" => self.substeps = num(key, value)?,
            "safeguard" => {
                self.safeguard = match value {
                    "activated" => SafeguardMode::Activated,
                    "disabled" => SafeguardMode::Disabled,
                    "always-on" => SafeguardMode::AlwaysOn,
                    _ => {
                        return Err(Error::Config(format!(
                            "safeguard must be activated, disabled or always-on, got {value:?}"
                        )))
                    }
                }
            }
            "probe_only" => self.probe_only = num(key, value)?,
            "solver_max_iters" => self.solver_max_iters = num(key, value)?,
            "solver_tol" => self.solver_tol = num(key, value)?,
            "fl_systems" => self.fl_systems = num(key, value)?,
            "fl_samples" => self.fl_samples = num(key, value)?,
            "fl_depth" => self.fl_depth = num(key, value)?,
            "kedmd_grids" => self.kedmd_grids = list(key, value)?,
            "kedmd_support" => self.kedmd_support = num(key, value)?,
            "kedmd_domain" => self.kedmd_domain = num(key, value)?,
            "eps_c" => self.eps_c = num(key, value)?,
            "kedmd_dt" => self.kedmd_dt = num(key, value)?,
            "kedmd_substeps" => self.kedmd_substeps = num(key, value)?,
            "test_grid" => self.test_grid = num(key, value)?,
            "fill_resolution" => self.fill_resolution = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("lambda", self.lambda),
            ("tau", self.tau()),
            ("r", self.r),
            ("u_max", self.u_max),
            ("data_box", self.data_box),
            ("q", self.q[0].min(self.q[1])),
            ("solver_tol", self.solver_tol),
            ("kedmd_support", self.kedmd_support),
            ("kedmd_domain", self.kedmd_domain),
            ("eps_c", self.eps_c),
            ("kedmd_dt", self.kedmd_dt),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if let SigmaChoice::Constant(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::Config("sigma must be positive".into()));
            }
        }
        if self.horizon < 2 {
            return Err(Error::Config("horizon must be at least 2".into()));
        }
        if self.substeps == 0 || self.collect_stride == 0 || self.kedmd_substeps == 0 || self.fill_resolution == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        if !(self.explore_t_max >= 0.0) {
            return Err(Error::Config("explore_t_max must be non-negative".into()));
        }
        if !(self.t_end >= 0.0) {
            return Err(Error::Config("t_end must be non-negative".into()));
        }
        if self.kedmd_grids.is_empty() || self.kedmd_grids.contains(&0) {
            return Err(Error::Config("kedmd_grids must list positive sizes".into()));
        }
        Ok(())
    }

    /// Every setting as `key = value`, in the file syntax.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("scenario", self.scenario.to_string()),
            ("nu", self.nu.to_string()),
            ("x0", join(&self.x0)),
            (
                "sigma",
                match self.sigma {
                    SigmaChoice::Shrinking => "shrinking".into(),
                    SigmaChoice::Constant(s) => s.to_string(),
                },
            ),
            ("lambda", self.lambda.to_string()),
            ("tau", self.tau().to_string()),
            ("dt", self.dt.to_string()),
            ("horizon", self.horizon.to_string()),
            ("q", join(&self.q)),
            ("r", self.r.to_string()),
            ("u_max", self.u_max.to_string()),
            ("dict_degree", self.dict_degree.to_string()),
            ("initial_data", self.initial_data.to_string()),
            ("data_cap", self.data_cap.to_string()),
            ("collect_stride", self.collect_stride.to_string()),
            ("explore_t_max", self.explore_t_max.to_string()),
            ("data_box", self.data_box.to_string()),
            (
                "reference",
                match self.reference {
                    ReferenceKind::Zero => "zero".into(),
                    ReferenceKind::Setpoint => "setpoint".into(),
                },
            ),
            ("t_shift", self.t_shift.to_string()),
            ("t_end", self.t_end.to_string()),
            ("substeps", self.substeps.to_string()),
            (
                "safeguard",
                match self.safeguard {
                    SafeguardMode::Activated => "activated",
                    SafeguardMode::Disabled => "disabled",
                    SafeguardMode::AlwaysOn => "always-on",
                }
                .into(),
            ),
            ("probe_only", self.probe_only.to_string()),
            ("solver_max_iters", self.solver_max_iters.to_string()),
            ("solver_tol", self.solver_tol.to_string()),
            ("fl_systems", self.fl_systems.to_string()),
            ("fl_samples", self.fl_samples.to_string()),
            ("fl_depth", self.fl_depth.to_string()),
            (
                "kedmd_grids",
                self.kedmd_grids.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("kedmd_support", self.kedmd_support.to_string()),
            ("kedmd_domain", self.kedmd_domain.to_string()),
            ("eps_c", self.eps_c.to_string()),
            ("kedmd_dt", self.kedmd_dt.to_string()),
            ("kedmd_substeps", self.kedmd_substeps.to_string()),
            ("test_grid", self.test_grid.to_string()),
            ("fill_resolution", self.fill_resolution.to_string()),
        ]
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(s) => s.clone(),
        other => other.to_string(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value.split(',').map(|v| num(key, v.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_scenarios() {
        let s = ScenarioConfig::defaults(Scenario::Stabilization);
        assert_eq!(s.horizon, 30);
        assert_eq!(s.tau(), 0.025);
        assert_eq!(s.reference, ReferenceKind::Zero);
        let p1 = ScenarioConfig::defaults(Scenario::Setpoint1);
        assert_eq!((p1.initial_data, p1.data_cap, p1.t_shift), (1, 100, 16.0));
        assert_eq!(ScenarioConfig::defaults(Scenario::Setpoint10).t_shift, 10.0);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = ScenarioConfig::parse(
            Scenario::Stabilization,
            "# comment\n\nhorizon = 20\nx0 = 0.5, 0.5  # start\nsigma = 3\nsafeguard = disabled\n",
        )
        .unwrap();
        assert_eq!(c.horizon, 20);
        assert_eq!(c.x0, [0.5, 0.5]);
        assert_eq!(c.sigma, SigmaChoice::Constant(3.0));
        assert_eq!(c.safeguard, SafeguardMode::Disabled);
    }

    #[test]
    fn parse_rejects_unknown_and_malformed() {
        assert!(matches!(ScenarioConfig::parse(Scenario::Stabilization, "horizn = 3"), Err(Error::Config(m)) if m.contains("unknown key")));
        assert!(ScenarioConfig::parse(Scenario::Stabilization, "horizon 3").is_err());
        assert!(ScenarioConfig::parse(Scenario::Stabilization, "horizon = many").is_err());
        assert!(ScenarioConfig::parse(Scenario::Stabilization, "horizon = 1").is_err());
        assert!(ScenarioConfig::parse(Scenario::Stabilization, "dt = -1").is_err());
    }

    #[test]
    fn entries_round_trip_through_parser() {
        let mut c = ScenarioConfig::defaults(Scenario::Setpoint1);
        c.kedmd_grids = vec![3, 4];
        c.sigma = SigmaChoice::Constant(2.5);
        let text: String = c
            .entries()
            .into_iter()
            .filter(|(k, _)| *k != "scenario")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let back = ScenarioConfig::parse(Scenario::Setpoint1, &text).unwrap();
        assert_eq!(back.tau, Some(0.025));
        assert_eq!(ScenarioConfig { tau: None, ..back }, c);
    }

    #[test]
    fn scenario_names() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("nope".parse::<Scenario>().is_err());
    }
}
