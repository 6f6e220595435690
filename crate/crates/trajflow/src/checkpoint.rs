//! Training snapshots as single self-describing JSON documents: model
//! configuration, live and shadow parameters, optimizer moments, the rng
//! position, and a format version so stale files fail loudly instead of
//! resuming garbage.
//!
//! Floats are written in shortest round-trip decimal form, which recovers
//! every bit on load.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmaState, ModelConfig, ModelError, VelocityModel};
use crate::train::OptimizerState;

/// Version written into every checkpoint. Bump on any layout change.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint has format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u64, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ── rng position ────────────────────────────────────────────────────────

/// Complete position of a `ChaCha8Rng`: restoring it continues the exact
/// draw sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

// ── snapshot document ───────────────────────────────────────────────────

/// Everything a resumed run needs to continue bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub live_params: Vec<Vec<f64>>,
    pub ema_decay: f64,
    pub ema_params: Vec<Vec<f64>>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Reads and validates a snapshot. The version field is checked before
    /// the strict parse so a future layout reports its version rather than
    /// a field error.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(found) = value.get("format_version").and_then(|v| v.as_u64()) {
            if found != u64::from(FORMAT_VERSION) {
                return Err(CheckpointError::VersionMismatch {
                    found,
                    expected: FORMAT_VERSION,
                });
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn model(&self) -> Result<VelocityModel, CheckpointError> {
        Ok(VelocityModel::from_params(
            self.model.clone(),
            &self.live_params,
        )?)
    }

    pub fn ema(&self) -> Result<EmaState, CheckpointError> {
        let model = self.model()?;
        Ok(EmaState::from_params(
            &model,
            self.ema_decay,
            &self.ema_params,
        )?)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        self.rng.restore()
    }
}

// ── tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_checkpoint() -> (Checkpoint, ChaCha8Rng) {
        let config = ModelConfig {
            action_dim: 2,
            cond_dim: 1,
            hidden_dims: vec![4],
            time_embed_dim: 8,
            embed_base: 10_000.0,
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = VelocityModel::init(config.clone(), &mut init_rng).unwrap();
        // Plant values whose decimal forms need full precision.
        let mut flat = model.flat_params();
        flat[0] = 0.1 + 0.2;
        flat[1] = 1.0 / 3.0;
        flat[2] = 1e-300;
        model.set_flat_params(&flat).unwrap();

        let mut ema = EmaState::new(&model, 0.9999).unwrap();
        let mut nudged = model.clone();
        let mut f = nudged.flat_params();
        for v in &mut f {
            *v += 0.5;
        }
        nudged.set_flat_params(&f).unwrap();
        ema.update(&nudged).unwrap();

        let mut opt = OptimizerState::for_model(&model);
        opt.steps = 17;
        opt.m[0][0] = -0.30000000000000004;
        opt.v[0][0] = 2.220446049250313e-16;

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        rng.set_stream(3);
        for _ in 0..7 {
            let _: f64 = rng.random();
        }

        let ckpt = Checkpoint {
            format_version: FORMAT_VERSION,
            step: 500,
            model: config,
            live_params: model.export_params(),
            ema_decay: ema.decay(),
            ema_params: ema.export_params(),
            optimizer: opt,
            rng: RngState::capture(&rng),
        };
        (ckpt, rng)
    }

    fn bits(rows: &[Vec<f64>]) -> Vec<u64> {
        rows.iter().flatten().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_preserves_every_bit_and_the_draw_sequence() {
        let (ckpt, mut live_rng) = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(bits(&ckpt.live_params), bits(&loaded.live_params));
        assert_eq!(bits(&ckpt.ema_params), bits(&loaded.ema_params));
        assert_eq!(bits(&ckpt.optimizer.m), bits(&loaded.optimizer.m));
        assert_eq!(bits(&ckpt.optimizer.v), bits(&loaded.optimizer.v));
        assert_eq!(loaded.optimizer.steps, 17);
        assert_eq!(loaded.step, 500);
        assert_eq!(loaded.ema_decay.to_bits(), ckpt.ema_decay.to_bits());

        // The restored rng continues exactly where the live one is.
        let mut restored = loaded.rng();
        for _ in 0..16 {
            assert_eq!(restored.random::<f64>(), live_rng.random::<f64>());
        }
    }

    #[test]
    fn reconstructed_model_and_ema_evaluate_identically() {
        let (ckpt, _) = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        let model = loaded.model().unwrap();
        let expected = VelocityModel::from_params(ckpt.model.clone(), &ckpt.live_params).unwrap();
        let x = [0.3, -0.8];
        let c = [0.4];
        assert_eq!(model.eval(&x, 0.6, &c).unwrap(), expected.eval(&x, 0.6, &c).unwrap());

        let ema = loaded.ema().unwrap();
        assert_eq!(bits(&ema.export_params()), bits(&ckpt.ema_params));
        assert_eq!(ema.decay(), 0.9999);
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let (ckpt, _) = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        ckpt.save(&path).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(
            err,
            CheckpointError::VersionMismatch {
                found: 9,
                expected: 1
            }
        ));
        assert!(msg.contains('9') && msg.contains('1'), "message: {msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let (ckpt, _) = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        ckpt.save(&path).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"step\": 500", "\"step\": 500, \"stray\": true");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Parse(_))
        ));
    }

    #[test]
    fn word_positions_beyond_64_bits_survive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_word_pos((1u128 << 70) + 3);
        let state = RngState::capture(&rng);
        let json = serde_json::to_string(&state).unwrap();
        let back: RngState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, state);
        let mut restored = back.restore();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn tampered_geometry_fails_reconstruction() {
        let (mut ckpt, _) = sample_checkpoint();
        ckpt.live_params[0].pop();
        assert!(ckpt.model().is_err());
    }
}
