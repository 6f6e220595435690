//! Regular-grid sampling of a velocity field for export.
//!
//! Rows iterate time on the outer loop and space on the inner loops, so a
//! grid with `t_res` times and `n` spatial points yields `t_res * n` rows.
//! When the task has a closed-form marginal velocity, a `deviation` column
//! records the Euclidean distance between the sampled field and it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use trajflow::solvers::{Field, SolverError};
use trajflow::tasks::Task;

/// One grid axis: `res` evenly spaced points from `min` to `max` inclusive.
#[derive(Debug, Clone, Copy)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub res: usize,
}

impl Axis {
    pub fn validate(&self, name: &str) -> anyhow::Result<()> {
        if self.res == 0 {
            anyhow::bail!("{name} axis needs at least one point");
        }
        if !self.min.is_finite() || !self.max.is_finite() {
            anyhow::bail!("{name} axis bounds must be finite");
        }
        if self.res > 1 && self.min >= self.max {
            anyhow::bail!(
                "{name} axis needs min < max to place {} points, got [{}, {}]",
                self.res,
                self.min,
                self.max
            );
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        if self.res == 1 {
            return vec![self.min];
        }
        let span = self.max - self.min;
        (0..self.res)
            .map(|i| self.min + span * i as f64 / (self.res - 1) as f64)
            .collect()
    }
}

/// A sampled field: header names plus one row of floats per grid point.
#[derive(Debug)]
pub struct FieldGrid {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FieldGrid {
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let mut first = true;
            for value in row {
                if !first {
                    out.push(',');
                }
                first = false;
                let _ = write!(out, "{value}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_csv())
    }
}

/// Samples `field` at every (t, x) grid point under a fixed condition.
///
/// `space` carries one axis per action dimension (one or two). The deviation
/// column appears only when `task.marginal_velocity` is available.
pub fn sample_grid<F: Field + ?Sized>(
    field: &F,
    task: &Task,
    cond: &[f64],
    t_axis: &Axis,
    space: &[Axis],
) -> Result<FieldGrid, SolverError> {
    let dim = space.len();
    let mut columns = vec!["t".to_string()];
    for i in 0..dim {
        columns.push(format!("x_{i}"));
    }
    for i in 0..dim {
        columns.push(format!("v_{i}"));
    }
    let has_oracle = task.marginal_velocity(&vec![0.0; task.action_dim()], 0.5).is_some();
    if has_oracle {
        columns.push("deviation".to_string());
    }

    let spatial: Vec<Vec<f64>> = match space {
        [x] => x.points().into_iter().map(|a| vec![a]).collect(),
        [x, y] => {
            let ys = y.points();
            x.points()
                .into_iter()
                .flat_map(|a| ys.iter().map(move |&b| vec![a, b]))
                .collect()
        }
        _ => unreachable!("callers restrict the grid to one or two spatial axes"),
    };

    let mut rows = Vec::with_capacity(t_axis.res * spatial.len());
    for t in t_axis.points() {
        for point in &spatial {
            let v = field.velocity(point, t, cond)?;
            if v.iter().any(|c| !c.is_finite()) {
                return Err(SolverError::NonFinite {
                    stage: "grid velocity",
                    t,
                    step: None,
                    x: point.clone(),
                });
            }
            let mut row = Vec::with_capacity(columns.len());
            row.push(t);
            row.extend_from_slice(point);
            row.extend_from_slice(&v);
            if has_oracle {
                let oracle = task
                    .marginal_velocity(point, t)
                    .expect("oracle availability is uniform over the domain");
                let dev = v
                    .iter()
                    .zip(&oracle)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                row.push(dev);
            }
            rows.push(row);
        }
    }
    Ok(FieldGrid { columns, rows })
}
