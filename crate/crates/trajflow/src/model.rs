//! The velocity network: an MLP over the state, modulated per hidden layer
//! by FiLM (feature-wise linear modulation) computed from the time
//! embedding and the condition vector.
//!
//! Each hidden layer computes `h' = tanh(gamma ⊙ (W h + b) + beta)` where
//! `gamma = 1 + G e + g` and `beta = B e + c` are affine in the combined
//! embedding `e = [time_embed(t); cond]`. The `1 +` shift makes the
//! modulation start near identity under small random init.
//!
//! The model exists in two forms that must agree exactly: [`VelocityModel::bind`]
//! records the forward pass on a [`Tape`] for training, and
//! [`VelocityModel::eval`] runs the identical floating-point operations
//! without a tape for inference.

use crate::autodiff::{matvec_data, AutodiffError, NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("hidden_dims must be non-empty")]
    NoHiddenLayers,
    #[error("hidden layer {0} has zero width")]
    ZeroWidth(usize),
    #[error("action_dim must be positive")]
    ZeroActionDim,
    #[error("time_embed_dim must be a positive even number, got {0}")]
    BadTimeEmbedDim(usize),
    #[error("embed_base must be finite and greater than 1, got {0}")]
    BadEmbedBase(f64),
    #[error("ema decay must lie in [0, 1), got {0}")]
    BadDecay(f64),
    #[error("input has {actual} coordinates, model expects {expected}")]
    InputDim { expected: usize, actual: usize },
    #[error("condition has {actual} coordinates, model expects {expected}")]
    CondDim { expected: usize, actual: usize },
    #[error("parameter import has wrong geometry: {0}")]
    ParamGeometry(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

// ── configuration ───────────────────────────────────────────────────────

fn default_hidden_dims() -> Vec<usize> {
    vec![64, 64]
}

fn default_time_embed_dim() -> usize {
    128
}

fn default_embed_base() -> f64 {
    10_000.0
}

/// Architecture hyperparameters. `action_dim` and `cond_dim` come from the
/// task; the rest have the standard defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub action_dim: usize,
    pub cond_dim: usize,
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_time_embed_dim")]
    pub time_embed_dim: usize,
    #[serde(default = "default_embed_base")]
    pub embed_base: f64,
}

impl ModelConfig {
    pub fn new(action_dim: usize, cond_dim: usize) -> Self {
        Self {
            action_dim,
            cond_dim,
            hidden_dims: default_hidden_dims(),
            time_embed_dim: default_time_embed_dim(),
            embed_base: default_embed_base(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.action_dim == 0 {
            return Err(ModelError::ZeroActionDim);
        }
        if self.hidden_dims.is_empty() {
            return Err(ModelError::NoHiddenLayers);
        }
        if let Some(i) = self.hidden_dims.iter().position(|&w| w == 0) {
            return Err(ModelError::ZeroWidth(i));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(ModelError::BadTimeEmbedDim(self.time_embed_dim));
        }
        if !self.embed_base.is_finite() || self.embed_base <= 1.0 {
            return Err(ModelError::BadEmbedBase(self.embed_base));
        }
        Ok(())
    }

    /// Width of the combined FiLM input `[time_embed(t); cond]`.
    pub fn embed_cond_dim(&self) -> usize {
        self.time_embed_dim + self.cond_dim
    }
}

/// Sinusoidal time embedding: interleaved `(sin(t w_i), cos(t w_i))` pairs
/// with geometrically spaced frequencies `w_i = base^(-2i/dim)`. Every
/// pair contributes `sin^2 + cos^2 = 1`, so the squared norm is `dim / 2`
/// for any `t`.
pub fn time_embed(t: f64, dim: usize, base: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let omega = base.powf(-2.0 * i as f64 / dim as f64);
        let phase = t * omega;
        out[2 * i] = phase.sin();
        out[2 * i + 1] = phase.cos();
    }
    out
}

// ── parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
struct FilmLayer {
    weight: Tensor,
    bias: Tensor,
    gamma_w: Tensor,
    gamma_b: Tensor,
    beta_w: Tensor,
    beta_b: Tensor,
}

/// The live network. Parameters are enumerated in one canonical order
/// everywhere (per layer: weight, bias, gamma_w, gamma_b, beta_w, beta_b;
/// then the output projection): the optimizer, EMA, checkpoints, and
/// gradient collection all rely on it.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    config: ModelConfig,
    layers: Vec<FilmLayer>,
    out_weight: Tensor,
    out_bias: Tensor,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_op(vec![rows, cols], data)
}

impl VelocityModel {
    /// Fresh network. Weights are uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// with all biases zero; the FiLM projections use the same scheme, so
    /// `gamma` starts near 1 and `beta` near 0. Draw order is the canonical
    /// parameter order, matrices row-major, biases drawing nothing.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let e_dim = config.embed_cond_dim();
        let mut layers = Vec::with_capacity(config.hidden_dims.len());
        let mut in_dim = config.action_dim;
        for &width in &config.hidden_dims {
            layers.push(FilmLayer {
                weight: uniform_matrix(rng, width, in_dim, in_dim),
                bias: Tensor::zeros(vec![width]),
                gamma_w: uniform_matrix(rng, width, e_dim, e_dim),
                gamma_b: Tensor::zeros(vec![width]),
                beta_w: uniform_matrix(rng, width, e_dim, e_dim),
                beta_b: Tensor::zeros(vec![width]),
            });
            in_dim = width;
        }
        let out_weight = uniform_matrix(rng, config.action_dim, in_dim, in_dim);
        let out_bias = Tensor::zeros(vec![config.action_dim]);
        Ok(Self {
            config,
            layers,
            out_weight,
            out_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([
                &l.weight, &l.bias, &l.gamma_w, &l.gamma_b, &l.beta_w, &l.beta_b,
            ]);
        }
        out.push(&self.out_weight);
        out.push(&self.out_bias);
        out
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend([
                &mut l.weight,
                &mut l.bias,
                &mut l.gamma_w,
                &mut l.gamma_b,
                &mut l.beta_w,
                &mut l.beta_b,
            ]);
        }
        out.push(&mut self.out_weight);
        out.push(&mut self.out_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.param_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::ParamGeometry(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.param_tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Parameter data in canonical order, one flat vector per tensor.
    pub fn export_params(&self) -> Vec<Vec<f64>> {
        self.param_tensors()
            .iter()
            .map(|t| t.data().to_vec())
            .collect()
    }

    /// Rebuilds a model from [`Self::export_params`] output.
    pub fn from_params(config: ModelConfig, params: &[Vec<f64>]) -> Result<Self, ModelError> {
        let mut zero_rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(config, &mut zero_rng)?;
        let tensors = model.param_tensors_mut();
        if tensors.len() != params.len() {
            return Err(ModelError::ParamGeometry(format!(
                "{} parameter tensors supplied, model has {}",
                params.len(),
                tensors.len()
            )));
        }
        for (i, (t, p)) in tensors.into_iter().zip(params).enumerate() {
            if t.numel() != p.len() {
                return Err(ModelError::ParamGeometry(format!(
                    "tensor {i} has {} values, expected {}",
                    p.len(),
                    t.numel()
                )));
            }
            t.data_mut().copy_from_slice(p);
        }
        Ok(model)
    }

    fn check_io(&self, x_len: usize, cond_len: usize) -> Result<(), ModelError> {
        if x_len != self.config.action_dim {
            return Err(ModelError::InputDim {
                expected: self.config.action_dim,
                actual: x_len,
            });
        }
        if cond_len != self.config.cond_dim {
            return Err(ModelError::CondDim {
                expected: self.config.cond_dim,
                actual: cond_len,
            });
        }
        Ok(())
    }

    /// Direct forward pass without a tape. Runs the same floating-point
    /// operations in the same order as the bound forward, so the two paths
    /// agree bit for bit.
    pub fn eval(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_io(x.len(), cond.len())?;
        let mut e = time_embed(t, self.config.time_embed_dim, self.config.embed_base);
        e.extend_from_slice(cond);
        let mut h = x.to_vec();
        for l in &self.layers {
            let mut z = matvec_data(&l.weight, &h);
            for (zi, bi) in z.iter_mut().zip(l.bias.data()) {
                *zi += bi;
            }
            let mut gamma = matvec_data(&l.gamma_w, &e);
            for (gi, bi) in gamma.iter_mut().zip(l.gamma_b.data()) {
                *gi = (*gi + bi) + 1.0;
            }
            let mut beta = matvec_data(&l.beta_w, &e);
            for (bi, bb) in beta.iter_mut().zip(l.beta_b.data()) {
                *bi += bb;
            }
            h = z
                .iter()
                .zip(&gamma)
                .zip(&beta)
                .map(|((&zi, &gi), &bi)| (gi * zi + bi).tanh())
                .collect();
        }
        let mut out = matvec_data(&self.out_weight, &h);
        for (oi, bi) in out.iter_mut().zip(self.out_bias.data()) {
            *oi += bi;
        }
        Ok(out)
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weight: tape.var(l.weight.clone()),
                bias: tape.var(l.bias.clone()),
                gamma_w: tape.var(l.gamma_w.clone()),
                gamma_b: tape.var(l.gamma_b.clone()),
                beta_w: tape.var(l.beta_w.clone()),
                beta_b: tape.var(l.beta_b.clone()),
                ones: tape.constant(Tensor::from_op(
                    vec![l.bias.numel()],
                    vec![1.0; l.bias.numel()],
                )),
            })
            .collect();
        BoundModel {
            config: self.config.clone(),
            layers,
            out_weight: tape.var(self.out_weight.clone()),
            out_bias: tape.var(self.out_bias.clone()),
        }
    }
}

// ── tape-bound form ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct BoundLayer {
    weight: NodeId,
    bias: NodeId,
    gamma_w: NodeId,
    gamma_b: NodeId,
    beta_w: NodeId,
    beta_b: NodeId,
    ones: NodeId,
}

/// A [`VelocityModel`] whose parameters live on a tape. Repeated
/// [`BoundModel::forward`] calls share the same parameter leaves, so
/// gradients accumulate across every evaluation in a step.
#[derive(Debug, Clone)]
pub struct BoundModel {
    config: ModelConfig,
    layers: Vec<BoundLayer>,
    out_weight: NodeId,
    out_bias: NodeId,
}

impl BoundModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Forward pass recorded on the tape. `x` and `cond` are rank-1 nodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        t: f64,
        cond: NodeId,
    ) -> Result<NodeId, ModelError> {
        let x_len = tape.value(x).numel();
        let cond_len = tape.value(cond).numel();
        self.check_io(x_len, cond_len)?;
        let embed = time_embed(t, self.config.time_embed_dim, self.config.embed_base);
        let embed = tape.constant_vector(&embed)?;
        let e = tape.concat(&[embed, cond])?;
        let mut h = x;
        for l in &self.layers {
            let z = tape.matvec(l.weight, h)?;
            let z = tape.add(z, l.bias)?;
            let graw = tape.matvec(l.gamma_w, e)?;
            let graw = tape.add(graw, l.gamma_b)?;
            let gamma = tape.add(graw, l.ones)?;
            let beta = tape.matvec(l.beta_w, e)?;
            let beta = tape.add(beta, l.beta_b)?;
            let mod_z = tape.mul(gamma, z)?;
            let mod_z = tape.add(mod_z, beta)?;
            h = tape.tanh(mod_z);
        }
        let out = tape.matvec(self.out_weight, h)?;
        Ok(tape.add(out, self.out_bias)?)
    }

    fn check_io(&self, x_len: usize, cond_len: usize) -> Result<(), ModelError> {
        if x_len != self.config.action_dim {
            return Err(ModelError::InputDim {
                expected: self.config.action_dim,
                actual: x_len,
            });
        }
        if cond_len != self.config.cond_dim {
            return Err(ModelError::CondDim {
                expected: self.config.cond_dim,
                actual: cond_len,
            });
        }
        Ok(())
    }

    /// Parameter node ids in canonical order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([l.weight, l.bias, l.gamma_w, l.gamma_b, l.beta_w, l.beta_b]);
        }
        out.push(self.out_weight);
        out.push(self.out_bias);
        out
    }

    /// Gradients for every parameter in canonical order; requires a prior
    /// successful `backward` on the tape.
    pub fn param_grads(&self, tape: &Tape) -> Result<Vec<Tensor>, ModelError> {
        self.param_ids()
            .into_iter()
            .map(|id| Ok(tape.grad(id)?.clone()))
            .collect()
    }
}

// ── exponential moving average ──────────────────────────────────────────

use rand::SeedableRng;

/// Shadow copy of the parameters updated as
/// `shadow = decay * shadow + (1 - decay) * live` after every optimizer
/// step. Inference always reads the shadow weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    decay: f64,
    shadow: Vec<Tensor>,
}

impl EmaState {
    /// Starts the shadow as an exact copy of the live parameters.
    pub fn new(model: &VelocityModel, decay: f64) -> Result<Self, ModelError> {
        if !decay.is_finite() || !(0.0..1.0).contains(&decay) {
            return Err(ModelError::BadDecay(decay));
        }
        Ok(Self {
            decay,
            shadow: model.param_tensors().into_iter().cloned().collect(),
        })
    }

    /// Rebuilds EMA state from checkpoint data laid out like
    /// [`VelocityModel::export_params`].
    pub fn from_params(
        model: &VelocityModel,
        decay: f64,
        params: &[Vec<f64>],
    ) -> Result<Self, ModelError> {
        let mut ema = Self::new(model, decay)?;
        if params.len() != ema.shadow.len() {
            return Err(ModelError::ParamGeometry(format!(
                "{} ema tensors supplied, model has {}",
                params.len(),
                ema.shadow.len()
            )));
        }
        for (i, (t, p)) in ema.shadow.iter_mut().zip(params).enumerate() {
            if t.numel() != p.len() {
                return Err(ModelError::ParamGeometry(format!(
                    "ema tensor {i} has {} values, expected {}",
                    p.len(),
                    t.numel()
                )));
            }
            t.data_mut().copy_from_slice(p);
        }
        Ok(ema)
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn export_params(&self) -> Vec<Vec<f64>> {
        self.shadow.iter().map(|t| t.data().to_vec()).collect()
    }

    pub fn update(&mut self, model: &VelocityModel) -> Result<(), ModelError> {
        let live = model.param_tensors();
        if live.len() != self.shadow.len() {
            return Err(ModelError::ParamGeometry(
                "ema and model parameter counts differ".into(),
            ));
        }
        for (s, l) in self.shadow.iter_mut().zip(live) {
            if s.numel() != l.numel() {
                return Err(ModelError::ParamGeometry(
                    "ema and model tensor shapes differ".into(),
                ));
            }
            for (sv, &lv) in s.data_mut().iter_mut().zip(l.data()) {
                *sv = self.decay * *sv + (1.0 - self.decay) * lv;
            }
        }
        Ok(())
    }

    /// A model carrying the shadow weights, for inference.
    pub fn shadow_model(&self, model: &VelocityModel) -> Result<VelocityModel, ModelError> {
        let params = self.export_params();
        VelocityModel::from_params(model.config().clone(), &params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            action_dim: 2,
            cond_dim: 3,
            hidden_dims: vec![4],
            time_embed_dim: 8,
            embed_base: 10_000.0,
        }
    }

    fn tiny_model(seed: u64) -> VelocityModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VelocityModel::init(tiny_config(), &mut rng).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(1, 0).validate().is_ok());
        let mut c = tiny_config();
        c.action_dim = 0;
        assert!(matches!(c.validate(), Err(ModelError::ZeroActionDim)));
        let mut c = tiny_config();
        c.hidden_dims = vec![];
        assert!(matches!(c.validate(), Err(ModelError::NoHiddenLayers)));
        let mut c = tiny_config();
        c.time_embed_dim = 7;
        assert!(matches!(c.validate(), Err(ModelError::BadTimeEmbedDim(7))));
        let mut c = tiny_config();
        c.embed_base = 1.0;
        assert!(matches!(c.validate(), Err(ModelError::BadEmbedBase(_))));
    }

    #[test]
    fn time_embed_norm_is_half_the_dimension() {
        for dim in [2, 8, 128] {
            for t in [0.0, 0.37, 0.5, 1.0, 17.0] {
                let e = time_embed(t, dim, 10_000.0);
                let norm_sq: f64 = e.iter().map(|v| v * v).sum();
                assert_relative_eq!(norm_sq, dim as f64 / 2.0, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn time_embed_leading_pair_is_unit_frequency() {
        let t = 0.83;
        let e = time_embed(t, 8, 10_000.0);
        assert_eq!(e[0], t.sin());
        assert_eq!(e[1], t.cos());
    }

    #[test]
    fn parameter_count_matches_hand_tally() {
        // weight 4x2 + bias 4 + two FiLM projections of 4x11 with biases 4,
        // plus output 2x4 + 2 = 118.
        let model = tiny_model(0);
        assert_eq!(model.param_count(), 118);
        assert_eq!(model.param_tensors().len(), 8);
    }

    #[test]
    fn init_respects_bounds_and_zero_biases() {
        let model = tiny_model(5);
        let bound_w = 1.0 / (2.0f64).sqrt();
        let bound_e = 1.0 / (11.0f64).sqrt();
        let l = &model.layers[0];
        assert!(l.weight.data().iter().all(|v| v.abs() <= bound_w));
        assert!(l.gamma_w.data().iter().all(|v| v.abs() <= bound_e));
        assert!(l.beta_w.data().iter().all(|v| v.abs() <= bound_e));
        assert!(l.bias.data().iter().all(|&v| v == 0.0));
        assert!(l.gamma_b.data().iter().all(|&v| v == 0.0));
        assert!(l.beta_b.data().iter().all(|&v| v == 0.0));
        assert!(model.out_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        assert_eq!(tiny_model(42).flat_params(), tiny_model(42).flat_params());
        assert_ne!(tiny_model(42).flat_params(), tiny_model(43).flat_params());
    }

    /// With the FiLM projections zeroed, gamma is exactly 1 and beta 0, so
    /// the output cannot depend on t or the condition.
    #[test]
    fn zeroed_film_is_identity_modulation() {
        let mut model = tiny_model(7);
        for l in &mut model.layers {
            for t in [&mut l.gamma_w, &mut l.beta_w] {
                t.data_mut().fill(0.0);
            }
        }
        let x = [0.4, -1.2];
        let a = model.eval(&x, 0.1, &[1.0, 0.0, 0.0]).unwrap();
        let b = model.eval(&x, 0.9, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_checks_dimensions() {
        let model = tiny_model(1);
        assert!(matches!(
            model.eval(&[0.0], 0.5, &[0.0; 3]),
            Err(ModelError::InputDim {
                expected: 2,
                actual: 1
            })
        ));
        assert!(matches!(
            model.eval(&[0.0; 2], 0.5, &[0.0; 2]),
            Err(ModelError::CondDim {
                expected: 3,
                actual: 2
            })
        ));
    }

    #[test]
    fn bound_forward_matches_direct_eval_bitwise() {
        let model = tiny_model(9);
        let x = [0.3, -0.8];
        let cond = [0.2, -0.5, 1.0];
        for t in [0.0, 0.31, 1.0] {
            let direct = model.eval(&x, t, &cond).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xn = tape.constant_vector(&x).unwrap();
            let cn = tape.constant_vector(&cond).unwrap();
            let out = bound.forward(&mut tape, xn, t, cn).unwrap();
            assert_eq!(tape.value(out).data(), direct.as_slice());
        }
    }

    #[test]
    fn works_without_conditioning() {
        let mut cfg = tiny_config();
        cfg.cond_dim = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = VelocityModel::init(cfg, &mut rng).unwrap();
        let out = model.eval(&[0.1, 0.2], 0.5, &[]).unwrap();
        assert_eq!(out.len(), 2);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xn = tape.constant_vector(&[0.1, 0.2]).unwrap();
        let cn = tape.constant_vector(&[]).unwrap();
        let on = bound.forward(&mut tape, xn, 0.5, cn).unwrap();
        assert_eq!(tape.value(on).data(), out.as_slice());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let model = tiny_model(21);
        let x = [0.5, -0.3];
        let cond = [0.1, 0.7, -0.2];
        let t = 0.4;
        let target = [0.25, -0.75];
        let n = model.param_count();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.set_flat_params(p).map_err(|_| AutodiffError::GradLen {
                expected: n,
                actual: p.len(),
            })?;
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let xn = tape.constant_vector(&x)?;
            let cn = tape.constant_vector(&cond)?;
            let out = bound.forward(&mut tape, xn, t, cn).unwrap();
            let tn = tape.constant_vector(&target)?;
            let diff = tape.sub(out, tn)?;
            let loss = tape.mean_sq(diff)?;
            tape.backward(loss)?;
            let mut grad = Vec::with_capacity(n);
            for g in bound.param_grads(&tape).unwrap() {
                grad.extend_from_slice(g.data());
            }
            Ok((tape.value(loss).data()[0], grad))
        };
        let err = crate::autodiff::grad_check(f, &model.flat_params(), 1e-5).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn input_and_condition_gradients_match_finite_differences() {
        let model = tiny_model(33);
        let t = 0.6;
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xn = tape.var(Tensor::vector(&p[..2])?);
            let cn = tape.var(Tensor::vector(&p[2..])?);
            let out = bound.forward(&mut tape, xn, t, cn).unwrap();
            let loss = tape.mean_sq(out)?;
            tape.backward(loss)?;
            let mut grad = tape.grad(xn)?.data().to_vec();
            grad.extend_from_slice(tape.grad(cn)?.data());
            Ok((tape.value(loss).data()[0], grad))
        };
        let err = crate::autodiff::grad_check(f, &[0.3, -0.9, 0.5, 0.1, -0.4], 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn params_round_trip_through_export() {
        let model = tiny_model(13);
        let rebuilt =
            VelocityModel::from_params(model.config().clone(), &model.export_params()).unwrap();
        assert_eq!(model, rebuilt);

        let mut short = model.export_params();
        short.pop();
        assert!(matches!(
            VelocityModel::from_params(model.config().clone(), &short),
            Err(ModelError::ParamGeometry(_))
        ));
    }

    #[test]
    fn ema_single_update_hand_value() {
        let mut model = tiny_model(2);
        for t in model.param_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut ema = EmaState::new(&model, 0.9999).unwrap();
        for t in model.param_tensors_mut() {
            t.data_mut().fill(1.0);
        }
        ema.update(&model).unwrap();
        for t in &ema.shadow {
            for &v in t.data() {
                assert_relative_eq!(v, 1e-4, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn ema_decay_is_validated() {
        let model = tiny_model(2);
        assert!(matches!(
            EmaState::new(&model, 1.0),
            Err(ModelError::BadDecay(_))
        ));
        assert!(matches!(
            EmaState::new(&model, -0.1),
            Err(ModelError::BadDecay(_))
        ));
        assert!(EmaState::new(&model, 0.0).is_ok());
    }

    #[test]
    fn ema_converges_toward_live_weights() {
        let mut model = tiny_model(4);
        let mut ema = EmaState::new(&model, 0.5).unwrap();
        for t in model.param_tensors_mut() {
            t.data_mut().fill(2.0);
        }
        for _ in 0..60 {
            ema.update(&model).unwrap();
        }
        let shadow = ema.shadow_model(&model).unwrap();
        for t in shadow.param_tensors() {
            for &v in t.data() {
                assert_relative_eq!(v, 2.0, max_relative = 1e-12);
            }
        }
    }
}
