//! The optimization loop: Adam with bias correction, EMA shadow updates,
//! per-step loss reports, and snapshots that let a resumed run replay the
//! original bit for bit.
//!
//! Randomness is organized as numbered streams of one ChaCha generator
//! seeded from the run seed: model init, training draws, evaluation draws,
//! dataset freezing, and one stream per epoch for batch shuffling. Frozen
//! datasets and epoch permutations are recomputed from the seed rather
//! than stored, so a checkpoint stays small and resume stays exact.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::checkpoint::{Checkpoint, CheckpointError, RngState, FORMAT_VERSION};
use crate::flowpath::FlowPathError;
use crate::losses::{total_loss, BatchItem, LossConfig, LossError, LossReport};
use crate::model::{EmaState, ModelError, VelocityModel};
use crate::solvers::{integrate, Field, SolverConfig, SolverError, Trajectory};
use crate::tasks::{Dataset, Task, TaskError};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_EVAL: u64 = 2;
pub const STREAM_FREEZE: u64 = 3;
/// Epoch `e` shuffles with stream `STREAM_EPOCH_BASE + e`.
pub const STREAM_EPOCH_BASE: u64 = 16;

/// One generator per purpose, all derived from the run seed.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch_size must be at least 1")]
    ZeroBatch,
    #[error("learning_rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("adam beta {which} must lie in [0, 1), got {value}")]
    BadBeta { which: &'static str, value: f64 },
    #[error("adam_eps must be positive and finite, got {0}")]
    BadEps(f64),
    #[error("ema_decay must lie in [0, 1), got {0}")]
    BadDecay(f64),
    #[error("grad_clip must be positive and finite, got {0}")]
    BadClip(f64),
    #[error("streaming mode needs steps_per_epoch of at least 1")]
    ZeroStepsPerEpoch,
    #[error("frozen dataset holds {size} samples, smaller than one batch of {batch}")]
    DatasetTooSmall { size: usize, batch: usize },
    #[error("model {what} is {model}, task needs {task}")]
    TaskModelMismatch {
        what: &'static str,
        model: usize,
        task: usize,
    },
    #[error("optimizer state does not mirror the model parameters: {0}")]
    OptimizerGeometry(String),
    #[error("non-finite loss at step {step}: {report:?}")]
    NonFiniteLoss { step: u64, report: LossReport },
    #[error("evaluation needs at least one sample")]
    NoEvalSamples,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Flow(#[from] FlowPathError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

// ── configuration ───────────────────────────────────────────────────────

/// Where training batches come from: fresh draws every step, or a dataset
/// frozen up front and revisited in shuffled epochs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DatasetMode {
    Streaming { steps_per_epoch: u64 },
    Frozen { size: usize },
}

impl Default for DatasetMode {
    fn default() -> Self {
        DatasetMode::Frozen { size: 4096 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub ema_decay: f64,
    /// Global-norm gradient clip; `None` leaves gradients untouched.
    pub grad_clip: Option<f64>,
    /// Checkpoint cadence in steps; 0 disables periodic snapshots.
    pub eval_every: u64,
    pub dataset: DatasetMode,
    pub loss_config: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 3e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            ema_decay: 0.9999,
            grad_clip: None,
            eval_every: 0,
            dataset: DatasetMode::default(),
            loss_config: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::ZeroBatch);
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(TrainError::BadLearningRate(self.learning_rate));
        }
        for (which, value) in [("1", self.adam_betas.0), ("2", self.adam_betas.1)] {
            if !value.is_finite() || !(0.0..1.0).contains(&value) {
                return Err(TrainError::BadBeta { which, value });
            }
        }
        if !self.adam_eps.is_finite() || self.adam_eps <= 0.0 {
            return Err(TrainError::BadEps(self.adam_eps));
        }
        if !self.ema_decay.is_finite() || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(TrainError::BadDecay(self.ema_decay));
        }
        if let Some(c) = self.grad_clip {
            if !c.is_finite() || c <= 0.0 {
                return Err(TrainError::BadClip(c));
            }
        }
        match self.dataset {
            DatasetMode::Streaming { steps_per_epoch } => {
                if steps_per_epoch == 0 {
                    return Err(TrainError::ZeroStepsPerEpoch);
                }
            }
            DatasetMode::Frozen { size } => {
                if size < self.batch_size {
                    return Err(TrainError::DatasetTooSmall {
                        size,
                        batch: self.batch_size,
                    });
                }
            }
        }
        self.loss_config.validate()?;
        Ok(())
    }

    /// Batches per epoch; frozen mode drops the ragged tail.
    pub fn steps_per_epoch(&self) -> u64 {
        match self.dataset {
            DatasetMode::Streaming { steps_per_epoch } => steps_per_epoch,
            DatasetMode::Frozen { size } => (size / self.batch_size) as u64,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch()
    }
}

// ── adam ────────────────────────────────────────────────────────────────

/// First and second moment accumulators plus the update counter, one flat
/// vector per model parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn for_model(model: &VelocityModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .param_tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    fn check_geometry(&self, model: &VelocityModel) -> Result<(), TrainError> {
        let params = model.param_tensors();
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(TrainError::OptimizerGeometry(format!(
                "{} moment tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.numel() || self.v[i].len() != p.numel() {
                return Err(TrainError::OptimizerGeometry(format!(
                    "moment tensor {i} has {} values, parameter has {}",
                    self.m[i].len(),
                    p.numel()
                )));
            }
        }
        Ok(())
    }
}

/// One Adam update with bias correction:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainError::OptimizerGeometry(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].numel() != p.numel() || state.m[i].len() != p.numel() {
            return Err(TrainError::OptimizerGeometry(format!(
                "tensor {i}: parameter {} values, gradient {}, moment {}",
                p.numel(),
                grads[i].numel(),
                state.m[i].len()
            )));
        }
    }
    state.steps += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.steps as i32);
    let c2 = 1.0 - b2.powi(state.steps as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            let m = b1 * state.m[i][j] + (1.0 - b1) * g[j];
            let v = b2 * state.v[i][j] + (1.0 - b2) * g[j] * g[j];
            state.m[i][j] = m;
            state.v[i][j] = v;
            *pv -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales gradients so their joint Euclidean norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64, TrainError> {
    if !max_norm.is_finite() || max_norm <= 0.0 {
        return Err(TrainError::BadClip(max_norm));
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

// ── trainer ─────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    task: Task,
    model: VelocityModel,
    ema: EmaState,
    opt: OptimizerState,
    rng: ChaCha8Rng,
    frozen: Option<Dataset>,
    step: u64,
    perm: Vec<usize>,
    perm_epoch: Option<u64>,
}

fn epoch_permutation(seed: u64, epoch: u64, size: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..size).collect();
    perm.shuffle(&mut seeded_stream(seed, STREAM_EPOCH_BASE + epoch));
    perm
}

impl Trainer {
    pub fn new(model: VelocityModel, task: Task, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Self::check_dims(&model, &task)?;
        let ema = EmaState::new(&model, config.ema_decay)?;
        let opt = OptimizerState::for_model(&model);
        let rng = seeded_stream(config.seed, STREAM_TRAIN);
        let frozen = Self::build_frozen(&task, &config);
        Ok(Self {
            config,
            task,
            model,
            ema,
            opt,
            rng,
            frozen,
            step: 0,
            perm: Vec::new(),
            perm_epoch: None,
        })
    }

    /// Continues a snapshotted run. The snapshot supplies all mutable
    /// state; the config must be the one the run started with (the frozen
    /// dataset is re-derived from its seed).
    pub fn from_checkpoint(
        snapshot: &Checkpoint,
        task: Task,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let model = snapshot.model()?;
        Self::check_dims(&model, &task)?;
        let ema = snapshot.ema()?;
        let opt = snapshot.optimizer.clone();
        opt.check_geometry(&model)?;
        let rng = snapshot.rng();
        let frozen = Self::build_frozen(&task, &config);
        Ok(Self {
            config,
            task,
            model,
            ema,
            opt,
            rng,
            frozen,
            step: snapshot.step,
            perm: Vec::new(),
            perm_epoch: None,
        })
    }

    fn check_dims(model: &VelocityModel, task: &Task) -> Result<(), TrainError> {
        if model.config().action_dim != task.action_dim() {
            return Err(TrainError::TaskModelMismatch {
                what: "action_dim",
                model: model.config().action_dim,
                task: task.action_dim(),
            });
        }
        if model.config().cond_dim != task.cond_dim() {
            return Err(TrainError::TaskModelMismatch {
                what: "cond_dim",
                model: model.config().cond_dim,
                task: task.cond_dim(),
            });
        }
        Ok(())
    }

    fn build_frozen(task: &Task, config: &TrainConfig) -> Option<Dataset> {
        match config.dataset {
            DatasetMode::Streaming { .. } => None,
            DatasetMode::Frozen { size } => Some(Dataset::freeze(
                task,
                size,
                &mut seeded_stream(config.seed, STREAM_FREEZE),
            )),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn model(&self) -> &VelocityModel {
        &self.model
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            step: self.step,
            model: self.model.config().clone(),
            live_params: self.model.export_params(),
            ema_decay: self.ema.decay(),
            ema_params: self.ema.export_params(),
            optimizer: self.opt.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Gathers the batch for the current step. Streaming mode draws fresh
    /// samples from the training stream; frozen mode walks this epoch's
    /// shuffle of the dataset.
    fn next_batch(&mut self) -> Vec<crate::tasks::TaskSample> {
        let b = self.config.batch_size;
        match &self.frozen {
            None => (0..b).map(|_| self.task.sample(&mut self.rng)).collect(),
            Some(ds) => {
                let spe = self.config.steps_per_epoch();
                let epoch = self.step / spe;
                let pos = (self.step % spe) as usize;
                if self.perm_epoch != Some(epoch) {
                    self.perm = epoch_permutation(self.config.seed, epoch, ds.len());
                    self.perm_epoch = Some(epoch);
                }
                self.perm[pos * b..(pos + 1) * b]
                    .iter()
                    .map(|&i| ds.samples()[i].clone())
                    .collect()
            }
        }
    }

    /// One optimization step: batch, total loss, backward, optional clip,
    /// Adam, EMA. Returns the per-term loss report.
    pub fn step_once(&mut self) -> Result<LossReport, TrainError> {
        let samples = self.next_batch();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let mut batch = Vec::with_capacity(samples.len());
        for s in &samples {
            batch.push(BatchItem {
                pair: s.path_pair()?,
                cond: tape.constant_vector(&s.cond)?,
            });
        }
        let (root, report) = total_loss(
            &mut tape,
            &bound,
            &batch,
            &self.config.loss_config,
            &mut self.rng,
        )?;
        if !report.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                report,
            });
        }
        tape.backward(root)?;
        let mut grads = bound.param_grads(&tape)?;
        if let Some(c) = self.config.grad_clip {
            clip_global_norm(&mut grads, c)?;
        }
        adam_step(
            &mut self.model.param_tensors_mut(),
            &grads,
            &mut self.opt,
            self.config.learning_rate,
            self.config.adam_betas,
            self.config.adam_eps,
        )?;
        self.ema.update(&self.model)?;
        self.step += 1;
        Ok(report)
    }

    /// Runs to the configured step budget, reporting each step's losses.
    pub fn run(&mut self, mut log: impl FnMut(u64, &LossReport)) -> Result<(), TrainError> {
        let total = self.config.total_steps();
        while self.step < total {
            let s = self.step;
            let report = self.step_once()?;
            log(s, &report);
        }
        Ok(())
    }
}

// ── evaluation ──────────────────────────────────────────────────────────

/// A velocity model viewed as an ODE field; evaluation wraps the EMA
/// shadow weights this way.
pub struct ModelField<'a> {
    model: &'a VelocityModel,
}

impl<'a> ModelField<'a> {
    pub fn new(model: &'a VelocityModel) -> Self {
        Self { model }
    }
}

impl Field for ModelField<'_> {
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>, SolverError> {
        self.model
            .eval(x, t, cond)
            .map_err(|e| SolverError::Field(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean squared distance from the integrated endpoint to the nearest
    /// valid target of the task.
    pub endpoint_mse: f64,
    /// Fraction of samples whose endpoint lands nearest the conditioned
    /// mode; absent for unconditional tasks.
    pub mode_accuracy: Option<f64>,
    /// Mean over samples of max perpendicular deviation from the
    /// trajectory's chord, divided by chord length.
    pub straightness: f64,
    /// Mean velocity-evaluation count per trajectory.
    pub nfe: f64,
}

/// Max perpendicular distance of interior states from the start-to-end
/// chord, over the chord length. Zero when there are no interior states
/// or the chord vanishes (nothing to measure against).
pub fn straightness(traj: &Trajectory) -> f64 {
    let states = &traj.states;
    if states.len() <= 2 {
        return 0.0;
    }
    let a = &states[0];
    let b = states.last().expect("trajectory is never empty");
    let chord: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let chord_sq: f64 = chord.iter().map(|v| v * v).sum();
    if chord_sq == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for p in &states[1..states.len() - 1] {
        let d: Vec<f64> = p.iter().zip(a).map(|(x, y)| x - y).collect();
        let along = d.iter().zip(&chord).map(|(x, y)| x * y).sum::<f64>() / chord_sq;
        let perp: f64 = d
            .iter()
            .zip(&chord)
            .map(|(x, y)| x - along * y)
            .map(|v| v * v)
            .sum();
        worst = worst.max(perp.sqrt());
    }
    worst / chord_sq.sqrt()
}

/// Integrates `num_samples` flows of `field` on fresh task draws and
/// aggregates endpoint error, mode accuracy, straightness, and NFE.
pub fn evaluate<F: Field + ?Sized>(
    field: &F,
    task: &Task,
    solver: &SolverConfig,
    num_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport, TrainError> {
    if num_samples == 0 {
        return Err(TrainError::NoEvalSamples);
    }
    solver.validate()?;
    let fixed_targets = task.mode_targets();
    let mut mse = 0.0;
    let mut straight = 0.0;
    let mut nfe = 0.0;
    let mut mode_hits = 0usize;
    let mut mode_total = 0usize;
    for _ in 0..num_samples {
        let s = task.sample(rng);
        let traj = integrate(field, &s.x0, &s.cond, solver)?;
        let end = traj.final_state();
        let singleton;
        let targets: &[Vec<f64>] = match &fixed_targets {
            Some(t) => t,
            None => {
                singleton = vec![task.flow_endpoint(&s.x0).unwrap_or_else(|| s.x1.clone())];
                &singleton
            }
        };
        let mut best = f64::INFINITY;
        let mut best_idx = 0;
        for (i, target) in targets.iter().enumerate() {
            let d2: f64 = end
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 < best {
                best = d2;
                best_idx = i;
            }
        }
        mse += best;
        if let Some(k) = s.mode {
            mode_total += 1;
            if best_idx == k {
                mode_hits += 1;
            }
        }
        straight += straightness(&traj);
        nfe += traj.nfe as f64;
    }
    let n = num_samples as f64;
    Ok(EvalReport {
        endpoint_mse: mse / n,
        mode_accuracy: (mode_total > 0).then(|| mode_hits as f64 / mode_total as f64),
        straightness: straight / n,
        nfe: nfe / n,
    })
}

// ── tests ───────────────────────────────────────────────────────────────
