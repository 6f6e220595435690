//! Fixed-step ODE solvers for the flow map on `t ∈ [0, 1]`, with
//! number-of-function-evaluation (NFE) accounting and an empirical
//! convergence-order fit.
//!
//! Euler spends one velocity evaluation per step, midpoint two, and the
//! classic fourth-order Runge-Kutta scheme four; at a matched NFE budget
//! the higher-order methods therefore take proportionally fewer, larger
//! steps.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("solver needs at least one step")]
    ZeroSteps,
    #[error("field returned {actual} components for a state of dimension {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite {stage} at t = {t}{}, state {x:?}", step.map(|s| format!(", step {s}")).unwrap_or_default())]
    NonFinite {
        stage: &'static str,
        t: f64,
        step: Option<usize>,
        x: Vec<f64>,
    },
    #[error("field evaluation failed: {0}")]
    Field(String),
    #[error("unknown solver method {0:?}")]
    UnknownMethod(String),
    #[error("convergence fit needs at least two step counts")]
    TooFewResolutions,
}

// ── velocity fields ─────────────────────────────────────────────────────

/// A velocity field `v(x, t, cond)`. Implemented for plain closures; model
/// adapters live next to the training code.
pub trait Field {
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>, SolverError>;
}

impl<F> Field for F
where
    F: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
{
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>, SolverError> {
        Ok(self(x, t, cond))
    }
}

fn eval_checked<F: Field + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    cond: &[f64],
    stage: &'static str,
) -> Result<Vec<f64>, SolverError> {
    let v = field.velocity(x, t, cond)?;
    if v.len() != x.len() {
        return Err(SolverError::DimMismatch {
            expected: x.len(),
            actual: v.len(),
        });
    }
    if v.iter().any(|c| !c.is_finite()) {
        return Err(SolverError::NonFinite {
            stage,
            t,
            step: None,
            x: x.to_vec(),
        });
    }
    Ok(v)
}

// ── methods and configuration ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

impl Method {
    /// Velocity evaluations consumed by a single step.
    pub fn evals_per_step(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
            Method::Rk4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SolverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            "rk4" => Ok(Method::Rk4),
            _ => Err(SolverError::UnknownMethod(s.to_string())),
        }
    }
}

fn default_steps() -> usize {
    30
}

fn default_method() -> Method {
    Method::Rk4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            steps: default_steps(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.steps == 0 {
            return Err(SolverError::ZeroSteps);
        }
        Ok(())
    }

    pub fn nfe(&self) -> usize {
        self.steps * self.method.evals_per_step()
    }
}

// ── single steps ────────────────────────────────────────────────────────

/// One forward Euler step `x + dt v(x, t)`.
pub fn euler_step<F: Field + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    cond: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let v = eval_checked(field, x, t, cond, "euler velocity")?;
    Ok(x.iter().zip(&v).map(|(xi, vi)| xi + dt * vi).collect())
}

/// One explicit midpoint step: Euler to the half step, then a full step
/// with the midpoint velocity.
pub fn midpoint_step<F: Field + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    cond: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let v1 = eval_checked(field, x, t, cond, "midpoint k1")?;
    let xm: Vec<f64> = x
        .iter()
        .zip(&v1)
        .map(|(xi, vi)| xi + 0.5 * dt * vi)
        .collect();
    let v2 = eval_checked(field, &xm, t + 0.5 * dt, cond, "midpoint k2")?;
    Ok(x.iter().zip(&v2).map(|(xi, vi)| xi + dt * vi).collect())
}

/// One classic fourth-order Runge-Kutta step with increments
/// `k1..k4 = dt * v(..)` and update `x + (k1 + 2 k2 + 2 k3 + k4) / 6`.
pub fn rk4_step<F: Field + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    dt: f64,
    cond: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let half = 0.5 * dt;
    let at = |x: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(xi, ki)| xi + c * ki).collect()
    };
    let k1: Vec<f64> = eval_checked(field, x, t, cond, "k1")?
        .iter()
        .map(|v| dt * v)
        .collect();
    let k2: Vec<f64> = eval_checked(field, &at(x, &k1, 0.5), t + half, cond, "k2")?
        .iter()
        .map(|v| dt * v)
        .collect();
    let k3: Vec<f64> = eval_checked(field, &at(x, &k2, 0.5), t + half, cond, "k3")?
        .iter()
        .map(|v| dt * v)
        .collect();
    let k4: Vec<f64> = eval_checked(field, &at(x, &k3, 1.0), t + dt, cond, "k4")?
        .iter()
        .map(|v| dt * v)
        .collect();
    Ok((0..x.len())
        .map(|i| x[i] + (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0)
        .collect())
}

// ── trajectories ────────────────────────────────────────────────────────

/// A solved path: `steps + 1` states on the uniform grid `t_k = k / steps`,
/// plus the exact number of velocity evaluations spent producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub nfe: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// CSV with header `step,t,x_0..x_{d-1}`, one row per grid point, and a
    /// trailing `nfe,<count>` row. Floats print in shortest round-trip
    /// form.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        write!(w, "step,t")?;
        for i in 0..self.dim() {
            write!(w, ",x_{i}")?;
        }
        writeln!(w)?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            write!(w, "{k},{t}")?;
            for v in x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        writeln!(w, "nfe,{}", self.nfe)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is ascii")
    }
}

/// Integrates the flow ODE from `x0` at `t = 0` to `t = 1` on a uniform
/// grid. NFE is exactly `steps * evals_per_step`.
pub fn integrate<F: Field + ?Sized>(
    field: &F,
    x0: &[f64],
    cond: &[f64],
    config: &SolverConfig,
) -> Result<Trajectory, SolverError> {
    config.validate()?;
    if x0.iter().any(|c| !c.is_finite()) {
        return Err(SolverError::NonFinite {
            stage: "initial state",
            t: 0.0,
            step: Some(0),
            x: x0.to_vec(),
        });
    }
    let n = config.steps;
    let dt = 1.0 / n as f64;
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.to_vec());
    for k in 0..n {
        let t = k as f64 / n as f64;
        let prev = &states[k];
        let next = match config.method {
            Method::Euler => euler_step(field, prev, t, dt, cond),
            Method::Midpoint => midpoint_step(field, prev, t, dt, cond),
            Method::Rk4 => rk4_step(field, prev, t, dt, cond),
        }
        .map_err(|e| match e {
            SolverError::NonFinite {
                stage,
                t,
                step: None,
                x,
            } => SolverError::NonFinite {
                stage,
                t,
                step: Some(k),
                x,
            },
            other => other,
        })?;
        states.push(next);
    }
    Ok(Trajectory {
        times: (0..=n).map(|k| k as f64 / n as f64).collect(),
        states,
        nfe: n * config.method.evals_per_step(),
    })
}

// ── convergence order ───────────────────────────────────────────────────

/// Outcome of an order fit: either a log-log slope, or the statement that
/// the method hit machine precision and no slope is measurable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrderEstimate {
    Slope(f64),
    Exact,
}

impl fmt::Display for OrderEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderEstimate::Slope(s) => write!(f, "{s}"),
            OrderEstimate::Exact => f.write_str("exact"),
        }
    }
}

/// An order estimate together with the terminal errors it was fit to,
/// one `(steps, error)` entry per resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    pub estimate: OrderEstimate,
    pub errors: Vec<(usize, f64)>,
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|c| c * c).sum::<f64>().sqrt()
}

/// Measures the empirical convergence order of `method` against a known
/// terminal state by integrating at each step count and fitting a
/// least-squares line to `log(error)` versus `log(step size)`.
///
/// If any resolution lands within `1e-13 * (1 + |exact|)` of the answer
/// the slope is meaningless (the scheme integrates this field exactly up
/// to rounding) and [`OrderEstimate::Exact`] is reported instead.
pub fn convergence_order<F: Field + ?Sized>(
    field: &F,
    x0: &[f64],
    cond: &[f64],
    exact: &[f64],
    method: Method,
    step_counts: &[usize],
) -> Result<OrderFit, SolverError> {
    if step_counts.len() < 2 {
        return Err(SolverError::TooFewResolutions);
    }
    let scale = 1.0 + l2(exact.iter().copied());
    let mut errors = Vec::with_capacity(step_counts.len());
    for &n in step_counts {
        let config = SolverConfig { method, steps: n };
        let traj = integrate(field, x0, cond, &config)?;
        let err = l2(
            traj.final_state()
                .iter()
                .zip(exact)
                .map(|(a, b)| a - b),
        );
        errors.push((n, err));
    }
    if errors.iter().any(|&(_, e)| e < 1e-13 * scale) {
        return Ok(OrderFit {
            estimate: OrderEstimate::Exact,
            errors,
        });
    }
    let points: Vec<(f64, f64)> = errors
        .iter()
        .map(|&(n, e)| ((1.0 / n as f64).ln(), e.ln()))
        .collect();
    let m = points.len() as f64;
    let mean_x: f64 = points.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y: f64 = points.iter().map(|p| p.1).sum::<f64>() / m;
    let cov: f64 = points
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    let var: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    Ok(OrderFit {
        estimate: OrderEstimate::Slope(cov / var),
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn growth(x: &[f64], _t: f64, _c: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    #[test]
    fn euler_step_hand_value() {
        let x = euler_step(&growth, &[1.0], 0.0, 0.1, &[]).unwrap();
        assert_eq!(x, vec![1.1]);
    }

    #[test]
    fn rk4_step_matches_fourth_order_taylor_on_growth_field() {
        // For dx/dt = x one RK4 step reproduces the degree-4 Taylor
        // polynomial of e^dt exactly.
        let dt = 0.1f64;
        let taylor = 1.0 + dt + dt.powi(2) / 2.0 + dt.powi(3) / 6.0 + dt.powi(4) / 24.0;
        let x = rk4_step(&growth, &[1.0], 0.0, dt, &[]).unwrap();
        assert_relative_eq!(x[0], taylor, max_relative = 1e-15);
    }

    #[test]
    fn time_only_field_single_step_values() {
        // dx/dt = t from 0: midpoint and RK4 land on the exact 1/2 in one
        // unit step; Euler sees only v(0) = 0.
        let field = |_x: &[f64], t: f64, _c: &[f64]| vec![t];
        assert_eq!(euler_step(&field, &[0.0], 0.0, 1.0, &[]).unwrap(), vec![0.0]);
        assert_eq!(
            midpoint_step(&field, &[0.0], 0.0, 1.0, &[]).unwrap(),
            vec![0.5]
        );
        assert_eq!(rk4_step(&field, &[0.0], 0.0, 1.0, &[]).unwrap(), vec![0.5]);
    }

    #[test]
    fn nfe_accounting_per_method() {
        for (method, expected) in [
            (Method::Euler, 30),
            (Method::Midpoint, 60),
            (Method::Rk4, 120),
        ] {
            let config = SolverConfig { method, steps: 30 };
            assert_eq!(config.nfe(), expected);
            let traj = integrate(&growth, &[1.0], &[], &config).unwrap();
            assert_eq!(traj.nfe, expected);
            assert_eq!(traj.states.len(), 31);
            assert_eq!(traj.times.len(), 31);
            assert_eq!(traj.times[0], 0.0);
            assert_eq!(*traj.times.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn integration_accuracy_ranks_methods_on_growth_field() {
        let exact = std::f64::consts::E;
        let config = |method| SolverConfig { method, steps: 20 };
        let err = |method| {
            let traj = integrate(&growth, &[1.0], &[], &config(method)).unwrap();
            (traj.final_state()[0] - exact).abs()
        };
        let (e_euler, e_mid, e_rk4) = (err(Method::Euler), err(Method::Midpoint), err(Method::Rk4));
        assert!(e_euler > e_mid && e_mid > e_rk4);
        assert!(e_rk4 < 1e-6, "rk4 error {e_rk4}");
    }

    #[test]
    fn convergence_orders_on_growth_field() {
        let counts = [5, 10, 20, 40, 80];
        let exact = [std::f64::consts::E];
        let order = |method| {
            match convergence_order(&growth, &[1.0], &[], &exact, method, &counts)
                .unwrap()
                .estimate
            {
                OrderEstimate::Slope(s) => s,
                OrderEstimate::Exact => panic!("unexpected exact report"),
            }
        };
        let euler = order(Method::Euler);
        let midpoint = order(Method::Midpoint);
        let rk4 = order(Method::Rk4);
        assert!((0.85..=1.15).contains(&euler), "euler slope {euler}");
        assert!((1.7..=2.3).contains(&midpoint), "midpoint slope {midpoint}");
        assert!((3.7..=4.3).contains(&rk4), "rk4 slope {rk4}");
    }

    #[test]
    fn exact_integration_is_reported_not_fit() {
        // RK4 integrates polynomial-in-t fields up to cubic exactly.
        let field = |_x: &[f64], t: f64, _c: &[f64]| vec![3.0 * t * t];
        let fit = convergence_order(&field, &[0.0], &[], &[1.0], Method::Rk4, &[5, 10, 20])
            .unwrap();
        assert_eq!(fit.estimate, OrderEstimate::Exact);

        let constant = |_x: &[f64], _t: f64, _c: &[f64]| vec![2.5];
        let fit = convergence_order(&constant, &[0.0], &[], &[2.5], Method::Euler, &[5, 10])
            .unwrap();
        assert_eq!(fit.estimate, OrderEstimate::Exact);
    }

    #[test]
    fn non_finite_field_reports_stage_and_location() {
        let field = |_x: &[f64], t: f64, _c: &[f64]| {
            if t > 0.5 {
                vec![f64::NAN]
            } else {
                vec![1.0]
            }
        };
        let config = SolverConfig {
            method: Method::Rk4,
            steps: 2,
        };
        let err = integrate(&field, &[0.0], &[], &config).unwrap_err();
        match err {
            SolverError::NonFinite { stage, t, step, x } => {
                assert_eq!(step, Some(1));
                assert!(t >= 0.5, "t = {t}");
                assert!(!stage.is_empty());
                assert_eq!(x.len(), 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let field = |_x: &[f64], _t: f64, _c: &[f64]| vec![1.0, 2.0];
        let err = integrate(&field, &[0.0], &[], &SolverConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            SolverError::DimMismatch {
                expected: 1,
                actual: 2
            }
        ));
    }

    #[test]
    fn zero_steps_is_rejected() {
        let config = SolverConfig {
            method: Method::Euler,
            steps: 0,
        };
        assert!(matches!(
            integrate(&growth, &[1.0], &[], &config),
            Err(SolverError::ZeroSteps)
        ));
        assert!(matches!(
            convergence_order(&growth, &[1.0], &[], &[1.0], Method::Euler, &[5]),
            Err(SolverError::TooFewResolutions)
        ));
    }

    #[test]
    fn csv_round_trips_values_exactly() {
        let traj = Trajectory {
            times: vec![0.0, 0.5, 1.0],
            states: vec![vec![0.1, -0.2], vec![0.3, 1.0 / 3.0], vec![0.7, 2.0]],
            nfe: 8,
        };
        let csv = traj.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,t,x_0,x_1");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "nfe,8");
        let fields: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(fields[0], "1");
        assert_eq!(fields[3].parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn method_parse_and_display() {
        for (s, m) in [
            ("euler", Method::Euler),
            ("Midpoint", Method::Midpoint),
            ("RK4", Method::Rk4),
        ] {
            assert_eq!(s.parse::<Method>().unwrap(), m);
        }
        assert!(matches!(
            "rk45".parse::<Method>(),
            Err(SolverError::UnknownMethod(_))
        ));
        assert_eq!(Method::Rk4.to_string(), "rk4");
        assert_eq!(
            serde_json::to_string(&Method::Midpoint).unwrap(),
            "\"midpoint\""
        );
    }

    proptest! {
        #[test]
        fn constant_field_translates_by_velocity(
            x0 in prop::collection::vec(-3.0..3.0f64, 1..4),
            c in -2.0..2.0f64,
            steps in 1..50usize,
        ) {
            let dim = x0.len();
            let field = move |_x: &[f64], _t: f64, _cond: &[f64]| vec![c; dim];
            for method in [Method::Euler, Method::Midpoint, Method::Rk4] {
                let config = SolverConfig { method, steps };
                let traj = integrate(&field, &x0, &[], &config).unwrap();
                prop_assert_eq!(traj.states.len(), steps + 1);
                for i in 0..x0.len() {
                    prop_assert!((traj.final_state()[i] - (x0[i] + c)).abs() < 1e-12);
                }
                for w in traj.times.windows(2) {
                    prop_assert!(w[1] > w[0]);
                }
            }
        }
    }
}
