//! Linear probability paths between endpoint pairs, segment partitions for
//! consistency targets, and the time samplers used by the losses.
//!
//! The path is the straight line `x_t = (1 - t) x0 + t x1`, which makes the
//! conditional target velocity the constant `x1 - x0` and the displacement
//! over `[t0, t1]` exactly `(t1 - t0)(x1 - x0)`. All loss terms lean on
//! those identities.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowPathError {
    #[error("endpoint dimensions differ: x0 has {x0}, x1 has {x1}")]
    DimMismatch { x0: usize, x1: usize },
    #[error("endpoints must have at least one coordinate")]
    EmptyPair,
    #[error("non-finite coordinate {value} at {which}[{index}]")]
    NonFiniteCoordinate {
        which: &'static str,
        index: usize,
        value: f64,
    },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("interval [{t0}, {t1}] is reversed")]
    ReversedInterval { t0: f64, t1: f64 },
    #[error("partition needs at least two boundaries, got {0}")]
    PartitionTooShort(usize),
    #[error("partition must span [0, 1], got first {first} and last {last}")]
    PartitionEndpoints { first: f64, last: f64 },
    #[error("partition boundaries must be strictly increasing at index {0}")]
    PartitionNotIncreasing(usize),
    #[error("{what} must lie in (0, 1), got {value}")]
    BadSamplerConfig { what: &'static str, value: f64 },
}

// ── path pairs ──────────────────────────────────────────────────────────

/// A source/target endpoint pair defining one linear path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPair {
    x0: Vec<f64>,
    x1: Vec<f64>,
}

fn check_coords(which: &'static str, v: &[f64]) -> Result<(), FlowPathError> {
    for (index, &value) in v.iter().enumerate() {
        if !value.is_finite() {
            return Err(FlowPathError::NonFiniteCoordinate {
                which,
                index,
                value,
            });
        }
    }
    Ok(())
}

fn check_time(t: f64) -> Result<(), FlowPathError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowPathError::TimeOutOfRange(t));
    }
    Ok(())
}

impl PathPair {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>) -> Result<Self, FlowPathError> {
        if x0.len() != x1.len() {
            return Err(FlowPathError::DimMismatch {
                x0: x0.len(),
                x1: x1.len(),
            });
        }
        if x0.is_empty() {
            return Err(FlowPathError::EmptyPair);
        }
        check_coords("x0", &x0)?;
        check_coords("x1", &x1)?;
        Ok(Self { x0, x1 })
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn x1(&self) -> &[f64] {
        &self.x1
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// Point on the path at time `t`: `(1 - t) x0 + t x1`. At `t = 0` and
    /// `t = 1` this reproduces the endpoints exactly, including in floating
    /// point.
    pub fn interpolate(&self, t: f64) -> Result<Vec<f64>, FlowPathError> {
        check_time(t)?;
        Ok(self
            .x0
            .iter()
            .zip(&self.x1)
            .map(|(&a, &b)| (1.0 - t) * a + t * b)
            .collect())
    }

    /// The conditional target velocity, constant along the linear path.
    pub fn target_velocity(&self) -> Vec<f64> {
        self.x1
            .iter()
            .zip(&self.x0)
            .map(|(&b, &a)| b - a)
            .collect()
    }

    /// Displacement accumulated between `t0 <= t1` under the target field:
    /// `(t1 - t0)(x1 - x0)`.
    pub fn true_displacement(&self, t0: f64, t1: f64) -> Result<Vec<f64>, FlowPathError> {
        check_time(t0)?;
        check_time(t1)?;
        if t1 < t0 {
            return Err(FlowPathError::ReversedInterval { t0, t1 });
        }
        let span = t1 - t0;
        Ok(self.target_velocity().iter().map(|v| span * v).collect())
    }
}

// ── segment partitions ──────────────────────────────────────────────────

/// Strictly increasing boundaries spanning `[0, 1]`. The consistency map
/// pushes a point at time `t` to `segment_endpoint(t)`, the right endpoint
/// of the segment containing `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPartition {
    boundaries: Vec<f64>,
}

impl Default for SegmentPartition {
    /// The single segment `[0, 1]`.
    fn default() -> Self {
        Self {
            boundaries: vec![0.0, 1.0],
        }
    }
}

impl SegmentPartition {
    pub fn new(boundaries: Vec<f64>) -> Result<Self, FlowPathError> {
        if boundaries.len() < 2 {
            return Err(FlowPathError::PartitionTooShort(boundaries.len()));
        }
        let (first, last) = (boundaries[0], boundaries[boundaries.len() - 1]);
        if first != 0.0 || last != 1.0 {
            return Err(FlowPathError::PartitionEndpoints { first, last });
        }
        for i in 1..boundaries.len() {
            if boundaries[i] <= boundaries[i - 1] {
                return Err(FlowPathError::PartitionNotIncreasing(i));
            }
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Right endpoint of the segment containing `t`. An interior boundary
    /// belongs to the segment it terminates, so `segment_endpoint(b) == b`
    /// for every boundary except 0.
    pub fn segment_endpoint(&self, t: f64) -> Result<f64, FlowPathError> {
        check_time(t)?;
        for &b in &self.boundaries[1..] {
            if b >= t {
                return Ok(b);
            }
        }
        Ok(1.0)
    }
}

// ── time samplers ───────────────────────────────────────────────────────

/// Draws the loss time variables: consistency anchors `t` with their
/// shifted partners `r = min(t + delta, 1)`, uniform rectification times,
/// and gapped step intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSampler {
    eps: f64,
    delta: f64,
    min_gap: f64,
}

impl TimeSampler {
    pub fn new(eps: f64, delta: f64, min_gap: f64) -> Result<Self, FlowPathError> {
        for (what, value) in [("eps", eps), ("delta", delta), ("min_gap", min_gap)] {
            if !value.is_finite() || value <= 0.0 || value >= 1.0 {
                return Err(FlowPathError::BadSamplerConfig { what, value });
            }
        }
        Ok(Self {
            eps,
            delta,
            min_gap,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn min_gap(&self) -> f64 {
        self.min_gap
    }

    /// Anchor time for the consistency loss, uniform on `[eps, 1)`.
    pub fn sample_anchor(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.eps + (1.0 - self.eps) * rng.random::<f64>()
    }

    /// Shifted partner of an anchor, clamped at the terminal time.
    pub fn pair_time(&self, t: f64) -> f64 {
        (t + self.delta).min(1.0)
    }

    /// Uniform time on the open interval `(0, 1)`.
    pub fn sample_unit(&self, rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let u = rng.random::<f64>();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Ordered pair `t0 < t1` with `t1 - t0 >= min_gap`, by rejection.
    pub fn sample_step_interval(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        loop {
            let a = rng.random::<f64>();
            let b = rng.random::<f64>();
            if b - a >= self.min_gap {
                return (a, b);
            }
        }
    }
}

/// `count` uniformly spaced times covering `[0, 1]` inclusive. Requires
/// `count >= 2`.
pub fn uniform_times(count: usize) -> Vec<f64> {
    debug_assert!(count >= 2);
    let d = (count - 1) as f64;
    (0..count).map(|i| i as f64 / d).collect()
}
