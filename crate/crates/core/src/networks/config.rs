use serde::{Deserialize, Serialize};

use crate::data::HOURS;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Kernel widths of the hyperparameter grid.
pub const GRID_KERNELS: [usize; 6] = [3, 5, 7, 9, 11, 13];
/// Convolutional block counts of the hyperparameter grid.
pub const GRID_BLOCKS: [usize; 3] = [2, 3, 4];
/// Learning rates of the hyperparameter grid.
pub const GRID_LEARNING_RATES: [f64; 6] = [5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5];

/// Every architectural and optimization knob, plus the ablation switches.
///
/// Serialized field names are the public config-file schema; unknown keys
/// are rejected and missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel_size: usize,
    pub n_blocks: usize,
    pub latent_dim: usize,
    pub n_hypotheses: usize,
    pub base_channels: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    /// Latent vector matching term.
    pub use_lm: bool,
    /// Variational bound (KL) term with a reparameterized encoder.
    pub use_vb: bool,
    /// Multiple hypothesis heads with winner-take-all pruning.
    pub use_mh: bool,
    pub threshold_multiplier: f64,
    pub rng_seed: u64,
    /// Stop once the epoch-mean total loss plateaus.
    pub early_stop: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            n_blocks: 3,
            latent_dim: 64,
            n_hypotheses: 4,
            base_channels: 16,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 1000,
            loss_weights: LossWeights::default(),
            use_lm: true,
            use_vb: false,
            use_mh: true,
            threshold_multiplier: 1.5,
            rng_seed: 0,
            early_stop: false,
        }
    }
}

impl ModelConfig {
    /// Full-scale settings: 1000 epochs, 16 base channels.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Reduced profile for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            base_channels: 8,
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    /// Hypothesis count actually built: one head when MH is off.
    pub fn heads(&self) -> usize {
        if self.use_mh {
            self.n_hypotheses
        } else {
            1
        }
    }

    /// Checks invariants and returns the config with derived fields
    /// resolved (`n_hypotheses` forced to 1 without MH).
    pub fn validated(&self) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if !(2..=4).contains(&self.n_blocks) {
            return bad(format!("n_blocks {} must be 2-4", self.n_blocks));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("n_hypotheses", self.n_hypotheses),
            ("base_channels", self.base_channels),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !self.threshold_multiplier.is_finite() {
            return bad("threshold_multiplier must be finite".into());
        }
        self.loss_weights.validate()?;
        let mut out = self.clone();
        out.n_hypotheses = self.heads();
        Ok(out)
    }

    /// Time extent after each encoder block, starting with the input:
    /// 24, 12, 6, 3, 2 for four blocks.
    pub fn time_extents(&self) -> Vec<usize> {
        let mut t = vec![HOURS];
        for _ in 0..self.n_blocks {
            let last = *t.last().expect("non-empty");
            t.push(last.div_ceil(2));
        }
        t
    }

    /// Output channels of encoder block `i`; widths double per block.
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Time extent at the top of the generator; upsampling from here covers
    /// at least 24 steps.
    pub fn generator_seed_extent(&self) -> usize {
        HOURS.div_ceil(1 << self.n_blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_training_settings() {
        let c = ModelConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.learning_rate), (32, 1000, 1e-4));
        assert_eq!(c.loss_weights, LossWeights { w_enc: 1.0, w_gen: 50.0, w_adv: 1.0 });
        assert_eq!(c.threshold_multiplier, 1.5);
    }

    #[test]
    fn extents_for_four_blocks() {
        let c = ModelConfig {
            n_blocks: 4,
            ..ModelConfig::default()
        };
        assert_eq!(c.time_extents(), vec![24, 12, 6, 3, 2]);
        assert_eq!(c.generator_seed_extent(), 2);
    }

    #[test]
    fn mh_off_forces_one_head() {
        let c = ModelConfig {
            use_mh: false,
            n_hypotheses: 6,
            ..ModelConfig::default()
        };
        assert_eq!(c.validated().unwrap().n_hypotheses, 1);
    }

    #[test]
    fn rejects_invalid() {
        for c in [
            ModelConfig { kernel_size: 4, ..Default::default() },
            ModelConfig { n_blocks: 5, ..Default::default() },
            ModelConfig { latent_dim: 0, ..Default::default() },
            ModelConfig { learning_rate: -1.0, ..Default::default() },
        ] {
            assert!(c.validated().is_err());
        }
    }

    #[test]
    fn json_schema_rejects_unknown_keys() {
        let c: ModelConfig = serde_json::from_str(r#"{"kernel_size": 9, "use_vb": true}"#).unwrap();
        assert_eq!(c.kernel_size, 9);
        assert!(c.use_vb);
        assert_eq!(c.n_blocks, 3);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"kernel": 9}"#).is_err());
    }
}
