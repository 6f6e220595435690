//! The training objective: five loss terms over batches of coupled pairs.
//!
//! * consistency: two points on the same path must map to the same segment
//!   endpoint under `f(x, t) = x + (tau(t) - t) v(x, t)`, with a velocity
//!   agreement penalty weighted by `alpha`. Both evaluations receive
//!   gradients; there is no target-side detachment.
//! * rectification: the velocity at an on-path point must match the
//!   constant pair velocity `x1 - x0`.
//! * multistep: an S-step Euler rollout started on the path must cover the
//!   true displacement; gradients flow through every intermediate state.
//! * velocity smoothness: velocities at consecutive grid times along the
//!   path must agree (no magnitude penalty, differences only).
//! * action: an Euler rollout from a fresh source draw must land on the
//!   sample's target endpoint.
//!
//! All terms are always evaluated, regardless of their weights, so runs
//! that differ only in weights consume identical rng streams and stay
//! comparable draw for draw.

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::flowpath::{
    uniform_times, FlowPathError, PathPair, SegmentPartition, TimeSampler,
};
use crate::model::{BoundModel, ModelError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch must contain at least one sample")]
    EmptyBatch,
    #[error("multistep_steps must be at least 1")]
    ZeroMultistepSteps,
    #[error("multistep_segments must be at least 1")]
    ZeroMultistepSegments,
    #[error("vel_times must be at least 2, got {0}")]
    TooFewVelTimes(usize),
    #[error("action_steps must be at least 1")]
    ZeroActionSteps,
    #[error("{what} must be finite and non-negative, got {value}")]
    BadWeight { what: &'static str, value: f64 },
    #[error(transparent)]
    Flow(#[from] FlowPathError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

// ── configuration ───────────────────────────────────────────────────────

/// Loss hyperparameters. The defaults are the reference settings used
/// throughout; ablations zero individual weights without touching the
/// rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the velocity-agreement term inside the consistency loss.
    pub alpha: f64,
    /// Lower edge of the consistency anchor distribution `U[eps, 1)`.
    pub eps: f64,
    /// Anchor shift: the partner time is `min(t + delta, 1)`.
    pub delta: f64,
    /// Minimum length of a multistep interval.
    pub min_gap: f64,
    pub lambda_rect: f64,
    pub lambda_multistep: f64,
    pub lambda_vel: f64,
    pub lambda_action: f64,
    /// Intervals drawn per sample for the multistep term.
    pub multistep_segments: usize,
    /// Euler steps inside each multistep interval.
    pub multistep_steps: usize,
    /// Grid times per sample for the smoothness term.
    pub vel_times: usize,
    /// Euler steps in the action rollout.
    pub action_steps: usize,
    /// Segment boundaries for the consistency map.
    pub partition: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            eps: 5e-3,
            delta: 0.7,
            min_gap: 0.05,
            lambda_rect: 1.0,
            lambda_multistep: 0.5,
            lambda_vel: 0.1,
            lambda_action: 0.1,
            multistep_segments: 3,
            multistep_steps: 4,
            vel_times: 5,
            action_steps: 5,
            partition: vec![0.0, 1.0],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (what, value) in [
            ("alpha", self.alpha),
            ("lambda_rect", self.lambda_rect),
            ("lambda_multistep", self.lambda_multistep),
            ("lambda_vel", self.lambda_vel),
            ("lambda_action", self.lambda_action),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::BadWeight { what, value });
            }
        }
        self.sampler()?;
        self.segment_partition()?;
        if self.multistep_steps == 0 {
            return Err(LossError::ZeroMultistepSteps);
        }
        if self.multistep_segments == 0 {
            return Err(LossError::ZeroMultistepSegments);
        }
        if self.vel_times < 2 {
            return Err(LossError::TooFewVelTimes(self.vel_times));
        }
        if self.action_steps == 0 {
            return Err(LossError::ZeroActionSteps);
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<TimeSampler, FlowPathError> {
        TimeSampler::new(self.eps, self.delta, self.min_gap)
    }

    pub fn segment_partition(&self) -> Result<SegmentPartition, FlowPathError> {
        SegmentPartition::new(self.partition.clone())
    }
}

// ── fields ──────────────────────────────────────────────────────────────

/// Sample-scoped inputs a field may consult: the coupled pair behind the
/// current rollout and the condition node.
pub struct SampleCtx<'a> {
    pub pair: &'a PathPair,
    pub cond: NodeId,
}

/// A velocity field evaluated on the tape. The trained model implements
/// this; reference fields below pin loss values in tests and diagnostics.
pub trait VelocityField {
    fn velocity(
        &self,
        tape: &mut Tape,
        x: NodeId,
        t: f64,
        ctx: &SampleCtx,
    ) -> Result<NodeId, LossError>;
}

impl VelocityField for BoundModel {
    fn velocity(
        &self,
        tape: &mut Tape,
        x: NodeId,
        t: f64,
        ctx: &SampleCtx,
    ) -> Result<NodeId, LossError> {
        Ok(self.forward(tape, x, t, ctx.cond)?)
    }
}

/// The ground-truth transport field for the sample's pair: constantly
/// `x1 - x0`, which drives every loss term to zero.
pub struct ExactTransportField;

impl VelocityField for ExactTransportField {
    fn velocity(
        &self,
        tape: &mut Tape,
        _x: NodeId,
        _t: f64,
        ctx: &SampleCtx,
    ) -> Result<NodeId, LossError> {
        Ok(tape.constant_vector(&ctx.pair.target_velocity())?)
    }
}

/// A field computed by a plain function of the point value and time,
/// entering the tape as a constant (no gradients).
pub struct FnField<G>(pub G)
where
    G: Fn(&[f64], f64) -> Vec<f64>;

impl<G> VelocityField for FnField<G>
where
    G: Fn(&[f64], f64) -> Vec<f64>,
{
    fn velocity(
        &self,
        tape: &mut Tape,
        x: NodeId,
        t: f64,
        _ctx: &SampleCtx,
    ) -> Result<NodeId, LossError> {
        let xv = tape.value(x).data().to_vec();
        Ok(tape.constant_vector(&(self.0)(&xv, t))?)
    }
}

// ── batches ─────────────────────────────────────────────────────────────

/// One batch element: the coupled pair plus its condition already placed
/// on the tape.
pub struct BatchItem {
    pub pair: PathPair,
    pub cond: NodeId,
}

/// Squared Euclidean norm of a rank-1 node, as a `[1]` scalar.
fn sum_sq(tape: &mut Tape, v: NodeId) -> Result<NodeId, LossError> {
    let n = tape.value(v).numel() as f64;
    let m = tape.mean_sq(v)?;
    Ok(tape.scale(m, n)?)
}

/// Mean of scalar nodes in order.
fn mean_scalars(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId, LossError> {
    debug_assert!(!terms.is_empty());
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64)?)
}

fn scalar_value(tape: &Tape, id: NodeId) -> f64 {
    tape.value(id).data()[0]
}

// ── consistency ─────────────────────────────────────────────────────────

/// Consistency loss for one sample at anchor time `t`: with partner
/// `r = min(t + delta, 1)` and `f(x, t) = x + (tau(t) - t) v(x, t)`,
///
/// `||f(x_t, t) - f(x_r, r)||^2 + alpha ||v(x_t, t) - v(x_r, r)||^2`.
pub fn cfm_pair_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    item: &BatchItem,
    t: f64,
    config: &LossConfig,
) -> Result<NodeId, LossError> {
    let partition = config.segment_partition()?;
    let r = (t + config.delta).min(1.0);
    let x_t = item.pair.interpolate(t)?;
    let x_r = item.pair.interpolate(r)?;
    let ctx = SampleCtx {
        pair: &item.pair,
        cond: item.cond,
    };
    let xt_node = tape.constant_vector(&x_t)?;
    let xr_node = tape.constant_vector(&x_r)?;
    let v_t = field.velocity(tape, xt_node, t, &ctx)?;
    let v_r = field.velocity(tape, xr_node, r, &ctx)?;
    let push_t = tape.scale(v_t, partition.segment_endpoint(t)? - t)?;
    let f_t = tape.add(xt_node, push_t)?;
    let push_r = tape.scale(v_r, partition.segment_endpoint(r)? - r)?;
    let f_r = tape.add(xr_node, push_r)?;
    let df = tape.sub(f_t, f_r)?;
    let dv = tape.sub(v_t, v_r)?;
    let df_sq = sum_sq(tape, df)?;
    let dv_sq = sum_sq(tape, dv)?;
    let dv_weighted = tape.scale(dv_sq, config.alpha)?;
    Ok(tape.add(df_sq, dv_weighted)?)
}

/// Batch consistency loss; draws one anchor `t ~ U[eps, 1)` per sample.
pub fn cfm_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    batch: &[BatchItem],
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let sampler = config.sampler()?;
    let mut terms = Vec::with_capacity(batch.len());
    for item in batch {
        let t = sampler.sample_anchor(rng);
        terms.push(cfm_pair_loss(tape, field, item, t, config)?);
    }
    mean_scalars(tape, &terms)
}

// ── rectification ───────────────────────────────────────────────────────

/// Rectification residual for one sample at time `t`:
/// `||v(x_t, t) - (x1 - x0)||^2`.
pub fn rect_point_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    item: &BatchItem,
    t: f64,
) -> Result<NodeId, LossError> {
    let x_t = item.pair.interpolate(t)?;
    let ctx = SampleCtx {
        pair: &item.pair,
        cond: item.cond,
    };
    let xt_node = tape.constant_vector(&x_t)?;
    let v = field.velocity(tape, xt_node, t, &ctx)?;
    let target = tape.constant_vector(&item.pair.target_velocity())?;
    let diff = tape.sub(v, target)?;
    sum_sq(tape, diff)
}

/// Batch rectification loss; one `t ~ U(0, 1)` per sample.
pub fn rect_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    batch: &[BatchItem],
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let sampler = config.sampler()?;
    let mut terms = Vec::with_capacity(batch.len());
    for item in batch {
        let t = sampler.sample_unit(rng);
        terms.push(rect_point_loss(tape, field, item, t)?);
    }
    mean_scalars(tape, &terms)
}

// ── multistep rollout ───────────────────────────────────────────────────

/// Multistep residual for one sample over `[t0, t1]`: roll
/// `multistep_steps` Euler steps from the on-path point `x_{t0}` and
/// compare the accumulated displacement with the true
/// `(t1 - t0)(x1 - x0)`. The rollout states stay on the tape, so the
/// backward pass reaches every velocity evaluation.
pub fn multistep_segment_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    item: &BatchItem,
    t0: f64,
    t1: f64,
    config: &LossConfig,
) -> Result<NodeId, LossError> {
    if config.multistep_steps == 0 {
        return Err(LossError::ZeroMultistepSteps);
    }
    let steps = config.multistep_steps;
    let h = (t1 - t0) / steps as f64;
    let target = item.pair.true_displacement(t0, t1)?;
    let start = item.pair.interpolate(t0)?;
    let ctx = SampleCtx {
        pair: &item.pair,
        cond: item.cond,
    };
    let start_node = tape.constant_vector(&start)?;
    let mut x = start_node;
    for k in 0..steps {
        let tk = t0 + k as f64 * h;
        let v = field.velocity(tape, x, tk, &ctx)?;
        let inc = tape.scale(v, h)?;
        x = tape.add(x, inc)?;
    }
    let disp = tape.sub(x, start_node)?;
    let target_node = tape.constant_vector(&target)?;
    let diff = tape.sub(disp, target_node)?;
    sum_sq(tape, diff)
}

/// Batch multistep loss; `multistep_segments` gapped intervals per sample,
/// averaged over all rollouts.
pub fn multistep_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    batch: &[BatchItem],
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if config.multistep_segments == 0 {
        return Err(LossError::ZeroMultistepSegments);
    }
    let sampler = config.sampler()?;
    let mut terms = Vec::with_capacity(batch.len() * config.multistep_segments);
    for item in batch {
        for _ in 0..config.multistep_segments {
            let (t0, t1) = sampler.sample_step_interval(rng);
            terms.push(multistep_segment_loss(tape, field, item, t0, t1, config)?);
        }
    }
    mean_scalars(tape, &terms)
}

// ── velocity smoothness ─────────────────────────────────────────────────

/// Smoothness loss for one sample: velocities at `vel_times` uniformly
/// spaced on-path times, mean of squared consecutive differences. Purely
/// deterministic; draws nothing.
pub fn vel_smooth_sample_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    item: &BatchItem,
    config: &LossConfig,
) -> Result<NodeId, LossError> {
    if config.vel_times < 2 {
        return Err(LossError::TooFewVelTimes(config.vel_times));
    }
    let ctx = SampleCtx {
        pair: &item.pair,
        cond: item.cond,
    };
    let mut diffs = Vec::with_capacity(config.vel_times - 1);
    let mut prev: Option<NodeId> = None;
    for t in uniform_times(config.vel_times) {
        let x_t = item.pair.interpolate(t)?;
        let x_node = tape.constant_vector(&x_t)?;
        let v = field.velocity(tape, x_node, t, &ctx)?;
        if let Some(p) = prev {
            let d = tape.sub(v, p)?;
            diffs.push(sum_sq(tape, d)?);
        }
        prev = Some(v);
    }
    mean_scalars(tape, &diffs)
}

/// Batch smoothness loss: mean of the per-sample means.
pub fn vel_smooth_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    batch: &[BatchItem],
    config: &LossConfig,
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(batch.len());
    for item in batch {
        terms.push(vel_smooth_sample_loss(tape, field, item, config)?);
    }
    mean_scalars(tape, &terms)
}

// ── action rollout ──────────────────────────────────────────────────────

/// Action residual for one sample: Euler-roll `action_steps` steps over
/// the full `[0, 1]` from the fresh source `x0_free` and penalise the
/// squared miss to the sample's endpoint `x1`. The context pair seen by
/// the field is the rollout's own `(x0_free, x1)`.
pub fn action_sample_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    item: &BatchItem,
    x0_free: &[f64],
    config: &LossConfig,
) -> Result<NodeId, LossError> {
    if config.action_steps == 0 {
        return Err(LossError::ZeroActionSteps);
    }
    let steps = config.action_steps;
    let h = 1.0 / steps as f64;
    let rollout_pair = PathPair::new(x0_free.to_vec(), item.pair.x1().to_vec())?;
    let ctx = SampleCtx {
        pair: &rollout_pair,
        cond: item.cond,
    };
    let mut x = tape.constant_vector(x0_free)?;
    for k in 0..steps {
        let tk = k as f64 * h;
        let v = field.velocity(tape, x, tk, &ctx)?;
        let inc = tape.scale(v, h)?;
        x = tape.add(x, inc)?;
    }
    let target = tape.constant_vector(item.pair.x1())?;
    let diff = tape.sub(x, target)?;
    sum_sq(tape, diff)
}

/// Batch action loss; draws a standard-normal source per sample.
pub fn action_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    batch: &[BatchItem],
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(batch.len());
    for item in batch {
        let x0_free: Vec<f64> = (0..item.pair.dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        terms.push(action_sample_loss(tape, field, item, &x0_free, config)?);
    }
    mean_scalars(tape, &terms)
}

// ── combined objective ──────────────────────────────────────────────────

/// Scalar values of every term and the weighted total for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cfm: f64,
    pub rect: f64,
    pub multistep: f64,
    pub vel: f64,
    pub action: f64,
    pub total: f64,
}

impl LossReport {
    /// Recombines the terms with the config weights in the same
    /// left-to-right association the graph uses, so the result equals
    /// `total` bit for bit.
    pub fn weighted_total(&self, config: &LossConfig) -> f64 {
        (((self.cfm + config.lambda_rect * self.rect)
            + config.lambda_multistep * self.multistep)
            + config.lambda_vel * self.vel)
            + config.lambda_action * self.action
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cfm,
            self.rect,
            self.multistep,
            self.vel,
            self.action,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub const CSV_HEADER: &'static str = "step,cfm,rect,multistep,vel,action,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.cfm, self.rect, self.multistep, self.vel, self.action, self.total
        )
    }
}

/// Builds the full objective on the tape and reports each term's value.
///
/// Terms are evaluated in a fixed order (consistency, rectification,
/// multistep, smoothness, action), each consuming its documented rng
/// draws: per sample one anchor, one unit time, `multistep_segments`
/// rejection-sampled intervals, nothing, and `dim` normals respectively.
/// Weights scale the graph, never the sampling, so ablations replay the
/// same randomness.
pub fn total_loss<F: VelocityField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    batch: &[BatchItem],
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, LossReport), LossError> {
    config.validate()?;
    let cfm = cfm_loss(tape, field, batch, config, rng)?;
    let rect = rect_loss(tape, field, batch, config, rng)?;
    let multistep = multistep_loss(tape, field, batch, config, rng)?;
    let vel = vel_smooth_loss(tape, field, batch, config)?;
    let action = action_loss(tape, field, batch, config, rng)?;

    let mut total = cfm;
    for (term, weight) in [
        (rect, config.lambda_rect),
        (multistep, config.lambda_multistep),
        (vel, config.lambda_vel),
        (action, config.lambda_action),
    ] {
        let scaled = tape.scale(term, weight)?;
        total = tape.add(total, scaled)?;
    }
    let report = LossReport {
        cfm: scalar_value(tape, cfm),
        rect: scalar_value(tape, rect),
        multistep: scalar_value(tape, multistep),
        vel: scalar_value(tape, vel),
        action: scalar_value(tape, action),
        total: scalar_value(tape, total),
    };
    Ok((total, report))
}
