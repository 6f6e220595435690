//! Toy transport tasks: analytically tractable source/target couplings
//! used to train and probe the velocity model.
//!
//! Every task draws the source `x0` from a standard normal. Targets and
//! conditions vary:
//!
//! * `toy1d`: equal-weight point masses at -1 and +1, unconditioned.
//! * `gauss2gauss`: isotropic normal target `N(mu, sigma^2 I)`; the
//!   marginal velocity field of the linear path has a closed form, exposed
//!   as [`Task::marginal_velocity`].
//! * `conditional_modes`: `K` cluster centers on a circle of given radius,
//!   one-hot condition selecting the cluster, small Gaussian jitter.

use crate::flowpath::{FlowPathError, PathPair};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, Write};
use thiserror::Error;

/// Standard deviation of the cluster jitter in `conditional_modes`.
pub const MODE_JITTER_SIGMA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("mu must be finite, got {0}")]
    BadMu(f64),
    #[error("gauss2gauss dimension must be positive")]
    ZeroDim,
    #[error("conditional_modes needs at least two modes, got {0}")]
    TooFewModes(usize),
    #[error("radius must be positive and finite, got {0}")]
    BadRadius(f64),
}

fn default_g2g_dim() -> usize {
    1
}

/// Task selector plus its parameters, as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name")]
pub enum Task {
    #[serde(rename = "toy1d")]
    Toy1d,
    #[serde(rename = "gauss2gauss")]
    Gauss2Gauss {
        mu: f64,
        sigma: f64,
        #[serde(default = "default_g2g_dim")]
        dim: usize,
    },
    #[serde(rename = "conditional_modes")]
    ConditionalModes { num_modes: usize, radius: f64 },
}

/// One coupled draw: source, target, condition, and the cluster label when
/// the task has one.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub cond: Vec<f64>,
    pub mode: Option<usize>,
}

impl TaskSample {
    pub fn path_pair(&self) -> Result<PathPair, FlowPathError> {
        PathPair::new(self.x0.clone(), self.x1.clone())
    }
}

impl Task {
    pub fn toy1d() -> Self {
        Task::Toy1d
    }

    pub fn gauss2gauss(mu: f64, sigma: f64) -> Result<Self, TaskError> {
        let task = Task::Gauss2Gauss { mu, sigma, dim: 1 };
        task.validate()?;
        Ok(task)
    }

    pub fn conditional_modes(num_modes: usize, radius: f64) -> Result<Self, TaskError> {
        let task = Task::ConditionalModes { num_modes, radius };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        match *self {
            Task::Toy1d => Ok(()),
            Task::Gauss2Gauss { mu, sigma, dim } => {
                if !mu.is_finite() {
                    return Err(TaskError::BadMu(mu));
                }
                if !sigma.is_finite() || sigma <= 0.0 {
                    return Err(TaskError::BadSigma(sigma));
                }
                if dim == 0 {
                    return Err(TaskError::ZeroDim);
                }
                Ok(())
            }
            Task::ConditionalModes { num_modes, radius } => {
                if num_modes < 2 {
                    return Err(TaskError::TooFewModes(num_modes));
                }
                if !radius.is_finite() || radius <= 0.0 {
                    return Err(TaskError::BadRadius(radius));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Toy1d => "toy1d",
            Task::Gauss2Gauss { .. } => "gauss2gauss",
            Task::ConditionalModes { .. } => "conditional_modes",
        }
    }

    /// Dimension of the state the model transports.
    pub fn action_dim(&self) -> usize {
        match *self {
            Task::Toy1d => 1,
            Task::Gauss2Gauss { dim, .. } => dim,
            Task::ConditionalModes { .. } => 2,
        }
    }

    /// Dimension of the conditioning vector (zero when unconditioned).
    pub fn cond_dim(&self) -> usize {
        match *self {
            Task::ConditionalModes { num_modes, .. } => num_modes,
            _ => 0,
        }
    }

    /// Center of cluster `k` for `conditional_modes`: the circle point at
    /// angle `2 pi k / K`.
    pub fn mode_center(&self, k: usize) -> Option<Vec<f64>> {
        match *self {
            Task::ConditionalModes { num_modes, radius } if k < num_modes => {
                let theta = 2.0 * PI * k as f64 / num_modes as f64;
                Some(vec![radius * theta.cos(), radius * theta.sin()])
            }
            _ => None,
        }
    }

    /// The discrete set of valid endpoints, for tasks that have one.
    pub fn mode_targets(&self) -> Option<Vec<Vec<f64>>> {
        match *self {
            Task::Toy1d => Some(vec![vec![-1.0], vec![1.0]]),
            Task::Gauss2Gauss { .. } => None,
            Task::ConditionalModes { num_modes, .. } => Some(
                (0..num_modes)
                    .map(|k| self.mode_center(k).expect("k < num_modes"))
                    .collect(),
            ),
        }
    }

    /// One coupled draw. The rng consumption order is fixed: `action_dim`
    /// standard normals for `x0` first, then the target draws (toy1d one
    /// uniform; gauss2gauss `dim` normals; conditional_modes one mode index
    /// then two jitter normals).
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> TaskSample {
        let x0: Vec<f64> = (0..self.action_dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        match *self {
            Task::Toy1d => {
                let u: f64 = rng.random();
                let (x1, mode) = if u < 0.5 {
                    (vec![-1.0], 0)
                } else {
                    (vec![1.0], 1)
                };
                TaskSample {
                    x0,
                    x1,
                    cond: vec![],
                    mode: Some(mode),
                }
            }
            Task::Gauss2Gauss { mu, sigma, dim } => {
                let x1 = (0..dim)
                    .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                TaskSample {
                    x0,
                    x1,
                    cond: vec![],
                    mode: None,
                }
            }
            Task::ConditionalModes { num_modes, .. } => {
                let k = rng.random_range(0..num_modes);
                let center = self.mode_center(k).expect("k < num_modes");
                let x1 = center
                    .iter()
                    .map(|c| c + MODE_JITTER_SIGMA * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut cond = vec![0.0; num_modes];
                cond[k] = 1.0;
                TaskSample {
                    x0,
                    x1,
                    cond,
                    mode: Some(k),
                }
            }
        }
    }

    /// Closed-form marginal velocity of the linear path, available for
    /// `gauss2gauss` only. With `x0 ~ N(0, 1)` and `x1 ~ N(mu, sigma^2)`
    /// independent per coordinate, conditioning the pair on
    /// `x_t = (1 - t) x0 + t x1 = x` gives
    ///
    /// `E[x1 - x0 | x_t = x] = mu + c(t) (x - t mu)`,
    /// `c(t) = (t sigma^2 - (1 - t)) / ((1 - t)^2 + t^2 sigma^2)`.
    pub fn marginal_velocity(&self, x: &[f64], t: f64) -> Option<Vec<f64>> {
        match *self {
            Task::Gauss2Gauss { mu, sigma, .. } => {
                let s2 = sigma * sigma;
                let omt = 1.0 - t;
                let coef = (t * s2 - omt) / (omt * omt + t * t * s2);
                Some(x.iter().map(|xi| mu + coef * (xi - t * mu)).collect())
            }
            _ => None,
        }
    }

    /// Where the marginal-velocity flow carries a start point, in closed
    /// form, available for `gauss2gauss` only. The flow of
    /// [`Self::marginal_velocity`] is `x(t) = t mu + s(t) x0` with
    /// `s(t) = sqrt((1 - t)^2 + t^2 sigma^2)`, so the endpoint at `t = 1`
    /// is `mu + sigma * x0`. Serves as the per-start target when grading
    /// learned transports on this task.
    pub fn flow_endpoint(&self, x0: &[f64]) -> Option<Vec<f64>> {
        match *self {
            Task::Gauss2Gauss { mu, sigma, .. } => {
                Some(x0.iter().map(|&xi| mu + sigma * xi).collect())
            }
            _ => None,
        }
    }
}

// ── frozen datasets ─────────────────────────────────────────────────────

/// A materialised set of coupled draws, for data-of-record training runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    task: Task,
    samples: Vec<TaskSample>,
}

impl Dataset {
    /// Draws `size` samples from the task in order, so the dataset is a
    /// pure function of the rng state.
    pub fn freeze(task: &Task, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let samples = (0..size).map(|_| task.sample(rng)).collect();
        Self {
            task: task.clone(),
            samples,
        }
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn samples(&self) -> &[TaskSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// CSV with one row per sample and columns
    /// `x0_0..,x1_0..,c_0..` (condition columns only when present).
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let d = self.task.action_dim();
        let k = self.task.cond_dim();
        let mut header = Vec::new();
        for i in 0..d {
            header.push(format!("x0_{i}"));
        }
        for i in 0..d {
            header.push(format!("x1_{i}"));
        }
        for i in 0..k {
            header.push(format!("c_{i}"));
        }
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            let row: Vec<String> = s
                .x0
                .iter()
                .chain(&s.x1)
                .chain(&s.cond)
                .map(|v| v.to_string())
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}
