//! Run traces: one CSV row per logged sample.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::funnel::{FunnelFunction, ReferenceFn};
use crate::system::Trajectory;

pub const TRACE_HEADER: &str = "t,x1,x2,y_ref,dy_ref,funnel_radius,mu,u_fc,a_tau,u,d,model_version";
pub const TRACE_VERSION_LINE: &str = "# safelearn trace format 1";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x1: f64,
    pub x2: f64,
    pub y_ref: f64,
    pub dy_ref: f64,
    pub funnel_radius: f64,
    pub mu: f64,
    pub u_fc: f64,
    pub a_tau: f64,
    pub u: f64,
    pub d: usize,
    pub model_version: usize,
}

impl TraceRow {
    pub fn margin(&self) -> f64 {
        self.funnel_radius - (self.x1 - self.y_ref).abs()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    /// Single-input traces only.
    pub fn from_trajectory(traj: &Trajectory, reference: &ReferenceFn, sigma: &FunnelFunction) -> Self {
        let rows = traj
            .times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let (y, dy) = reference(t);
                let d = &traj.diagnostics[i];
                TraceRow {
                    t,
                    x1: traj.states[i][0],
                    x2: traj.states[i][1],
                    y_ref: y[0],
                    dy_ref: dy[0],
                    funnel_radius: sigma.radius(t),
                    mu: d.mu[0],
                    u_fc: d.u_fc[0],
                    a_tau: d.a_tau,
                    u: traj.inputs[i][0],
                    d: d.data_count,
                    model_version: d.model_version,
                }
            })
            .collect();
        Self { rows }
    }

    pub fn violations(&self) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !(r.margin() > 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of separate intervals with `a_τ > 0`.
    pub fn activation_episodes(&self) -> usize {
        let mut count = 0;
        let mut active = false;
        for r in &self.rows {
            if r.a_tau > 0.0 && !active {
                count += 1;
            }
            active = r.a_tau > 0.0;
        }
        count
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        s.push_str(TRACE_VERSION_LINE);
        s.push('\n');
        s.push_str(TRACE_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.t, r.x1, r.x2, r.y_ref, r.dy_ref, r.funnel_radius, r.mu, r.u_fc, r.a_tau, r.u, r.d, r.model_version
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line != TRACE_HEADER {
                    return Err(Error::InvalidInput(format!(
                        "line {}: expected header `{TRACE_HEADER}`",
                        lineno + 1
                    )));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 12 {
                return Err(Error::InvalidInput(format!(
                    "line {}: expected 12 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let f = |i: usize| -> Result<f64> {
                fields[i]
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("line {}: bad number {:?}", lineno + 1, fields[i])))
            };
            let n = |i: usize| -> Result<usize> {
                fields[i]
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("line {}: bad count {:?}", lineno + 1, fields[i])))
            };
            rows.push(TraceRow {
                t: f(0)?,
                x1: f(1)?,
                x2: f(2)?,
                y_ref: f(3)?,
                dy_ref: f(4)?,
                funnel_radius: f(5)?,
                mu: f(6)?,
                u_fc: f(7)?,
                a_tau: f(8)?,
                u: f(9)?,
                d: n(10)?,
                model_version: n(11)?,
            });
        }
        if !header_seen {
            return Err(Error::InvalidInput("trace has no header".into()));
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    pub rows: usize,
    pub violations: Vec<usize>,
    pub min_margin: f64,
    pub activation_episodes: usize,
}

impl TraceReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `|y − y_ref| < funnel_radius` on every row and strictly
/// increasing time.
pub fn validate_trace(trace: &RunTrace) -> Result<TraceReport> {
    if trace.rows.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::InvalidInput("trace time column is not strictly increasing".into()));
    }
    Ok(TraceReport {
        rows: trace.rows.len(),
        violations: trace.violations(),
        min_margin: trace.rows.iter().map(TraceRow::margin).fold(f64::INFINITY, f64::min),
        activation_episodes: trace.activation_episodes(),
    })
}

pub fn validate_trace_file(path: &Path) -> Result<TraceReport> {
    validate_trace(&RunTrace::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, x1: f64, a: f64) -> TraceRow {
        TraceRow {
            t,
            x1,
            x2: 0.0,
            y_ref: 0.0,
            dy_ref: 0.0,
            funnel_radius: 0.5,
            mu: 0.0,
            u_fc: 0.0,
            a_tau: a,
            u: 0.0,
            d: 3,
            model_version: 1,
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let tr = RunTrace {
            rows: vec![row(0.0, 0.1, 0.0), row(0.05, -0.2, 0.1), row(0.1, 0.3, 0.0)],
        };
        let s = tr.to_csv_string();
        let mut lines = s.lines();
        assert!(lines.next().unwrap().starts_with('#'));
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        tr.write(&p).unwrap();
        assert_eq!(RunTrace::read(&p).unwrap(), tr);
        let rep = validate_trace_file(&p).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.activation_episodes, 1);
        assert!((rep.min_margin - 0.2).abs() < 1e-15);
    }

    #[test]
    fn validator_flags_violations_and_time_order() {
        let tr = RunTrace {
            rows: vec![row(0.0, 0.1, 0.0), row(0.05, 0.5, 0.0), row(0.1, -0.7, 0.0)],
        };
        assert_eq!(validate_trace(&tr).unwrap().violations, vec![1, 2]);
        let back = RunTrace {
            rows: vec![row(0.1, 0.0, 0.0), row(0.1, 0.0, 0.0)],
        };
        assert!(validate_trace(&back).is_err());
    }

    #[test]
    fn reader_rejects_bad_header_and_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "t,x\n0,1\n").unwrap();
        assert!(RunTrace::read(&p).is_err());
        std::fs::write(&p, format!("{TRACE_HEADER}\n0,1,2\n")).unwrap();
        assert!(RunTrace::read(&p).is_err());
    }
}
