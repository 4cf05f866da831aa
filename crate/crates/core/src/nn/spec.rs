use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Dims;

/// One convolution level: 3×3×3 same-padded convolution, ReLU, max pooling,
/// optional batch normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLevelSpec {
    pub filters: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// Pool factor per axis; axes shorter than the factor are left unpooled.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default = "default_true")]
    pub batchnorm: bool,
}

fn default_kernel() -> usize {
    3
}

fn default_pool() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Two convolution levels (64, 128 filters at full width).
    TwoLevel,
    /// The five-level simple CNN.
    FullCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    Mlp,
    /// Two self-attention heads over backbone positions, concatenated and
    /// fed to the MLP.
    Mhl {
        backbone: Backbone,
        key_dim: usize,
    },
}

/// Three fully connected layers (`hidden[0]`, `hidden[1]`, 2 classes) with a
/// dropout after each of the first two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: [usize; 2],
    pub dropout: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dims: Dims,
    pub levels: Vec<ConvLevelSpec>,
    pub head: HeadSpec,
    pub mlp: MlpSpec,
}

pub const NUM_CLASSES: usize = 2;

const FULL_FILTERS: [usize; 5] = [64, 128, 256, 256, 256];
const TWO_LEVEL_FILTERS: [usize; 2] = [64, 128];

fn scaled(filters: &[usize], scale: f64) -> Vec<ConvLevelSpec> {
    filters
        .iter()
        .map(|&f| ConvLevelSpec {
            filters: ((f as f64 * scale).round() as usize).max(1),
            kernel_size: 3,
            pool_size: 2,
            batchnorm: true,
        })
        .collect()
}

impl MlpSpec {
    /// First hidden width `w·h` of the input; second a quarter of that.
    pub fn for_input(dims: Dims) -> Self {
        let h1 = dims.w() * dims.h();
        MlpSpec {
            hidden: [h1, (h1 / 4).max(8)],
            dropout: [0.25, 0.25],
        }
    }
}

impl NetworkSpec {
    /// Five-level CNN with an MLP head. `scale` multiplies every filter count.
    pub fn simple_cnn(input_dims: Dims, scale: f64) -> Self {
        NetworkSpec {
            input_dims,
            levels: scaled(&FULL_FILTERS, scale),
            head: HeadSpec::Mlp,
            mlp: MlpSpec::for_input(input_dims),
        }
    }

    /// Five-level CNN backbone followed by two attention heads.
    pub fn simple_mhl(input_dims: Dims, scale: f64, key_dim: usize) -> Self {
        NetworkSpec {
            input_dims,
            levels: scaled(&FULL_FILTERS, scale),
            head: HeadSpec::Mhl {
                backbone: Backbone::FullCnn,
                key_dim,
            },
            mlp: MlpSpec::for_input(input_dims),
        }
    }

    /// Two-level CNN backbone followed by two attention heads.
    pub fn two_cnn_mhl(input_dims: Dims, scale: f64, key_dim: usize) -> Self {
        NetworkSpec {
            input_dims,
            levels: scaled(&TWO_LEVEL_FILTERS, scale),
            head: HeadSpec::Mhl {
                backbone: Backbone::TwoLevel,
                key_dim,
            },
            mlp: MlpSpec::for_input(input_dims),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.0.contains(&0) {
            return Err(Error::InvalidArgument("input dims must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("at least one conv level required".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.filters == 0 {
                return Err(Error::InvalidArgument(format!("level {i}: zero filters")));
            }
            if l.kernel_size != 3 {
                return Err(Error::InvalidArgument(format!(
                    "level {i}: only 3x3x3 kernels are supported, got {}",
                    l.kernel_size
                )));
            }
            if l.pool_size == 0 {
                return Err(Error::InvalidArgument(format!("level {i}: zero pool size")));
            }
        }
        if let HeadSpec::Mhl { key_dim, .. } = self.head {
            if key_dim == 0 {
                return Err(Error::InvalidArgument("attention key dim must be positive".into()));
            }
        }
        if self.mlp.hidden.contains(&0) {
            return Err(Error::InvalidArgument("mlp widths must be positive".into()));
        }
        if self.mlp.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::InvalidArgument("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Spatial dims at the output of level `i` (after pooling).
    pub fn level_output_dims(&self, i: usize) -> Dims {
        let mut d = self.input_dims;
        for l in &self.levels[..=i] {
            d = pooled_dims(d, l.pool_size);
        }
        d
    }

    /// Spatial dims of the last level's convolution output (the maps used by
    /// GradCAM), i.e. before its pooling.
    pub fn last_conv_dims(&self) -> Dims {
        let n = self.levels.len();
        if n == 1 {
            self.input_dims
        } else {
            self.level_output_dims(n - 2)
        }
    }

    pub fn backbone_output(&self) -> (usize, Dims) {
        let n = self.levels.len();
        (self.levels[n - 1].filters, self.level_output_dims(n - 1))
    }

    /// Length of the vector entering the MLP.
    pub fn mlp_input_len(&self) -> usize {
        let (c, d) = self.backbone_output();
        match self.head {
            HeadSpec::Mlp => c * d.len(),
            HeadSpec::Mhl { key_dim, .. } => 2 * key_dim * d.len(),
        }
    }
}

pub(crate) fn pool_factors(dims: Dims, pool: usize) -> [usize; 3] {
    let mut k = [1; 3];
    for a in 0..3 {
        if dims.0[a] >= pool {
            k[a] = pool;
        }
    }
    k
}

pub(crate) fn pooled_dims(dims: Dims, pool: usize) -> Dims {
    let k = pool_factors(dims, pool);
    Dims([dims.0[0] / k[0], dims.0[1] / k[1], dims.0[2] / k[2]])
}

/// Geometric augmentation ranges. All-zero ranges make augmentation the
/// identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation about the volume centre in the x–y plane, uniform in ±degrees.
    pub max_rotation_deg: f64,
    /// Integer shifts along x and y, uniform in ±voxels.
    pub max_shift: usize,
    /// Whiten inputs with a ZCA transform fitted on the training split.
    pub zca: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 15.0,
            max_shift: 2,
            zca: false,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            max_shift: 0,
            zca: false,
        }
    }

    /// Shift range scaled from 20 voxels at a 160-voxel-wide input.
    pub fn for_width(width: usize) -> Self {
        AugmentConfig {
            max_shift: ((20 * width) as f64 / 160.0).round() as usize,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    /// Learning rate reached after the decay phase and held afterwards.
    pub learning_rate: f64,
    /// Multiplicative decay applied every `decay_every` epochs during the
    /// first half of the epoch budget.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    #[serde(default)]
    pub weight_init_scale: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            split: [0.70, 0.20, 0.10],
            learning_rate: 1e-4,
            decay_factor: 0.5,
            decay_every: 10,
            max_epochs: 100,
            patience: 10,
            batch_size: 16,
            augment: AugmentConfig::default(),
            weight_init_scale: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split.iter().any(|f| *f < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be nonnegative and sum to 1, got {:?}",
                self.split
            )));
        }
        if self.patience < 1 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if self.max_epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidArgument(
                "max_epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_every == 0 {
            return Err(Error::InvalidArgument(
                "decay factor must lie in (0, 1] and decay_every be positive".into(),
            ));
        }
        if !(0.0..=180.0).contains(&self.augment.max_rotation_deg) {
            return Err(Error::InvalidArgument("rotation range must lie in [0, 180]".into()));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch: starts at
    /// `lr / decay^(steps)` and decays geometrically to `lr` by the midpoint
    /// of the budget, then stays constant.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let half = self.max_epochs / 2;
        if epoch >= half {
            return self.learning_rate;
        }
        let remaining_steps = (half - epoch) as f64 / self.decay_every as f64;
        self.learning_rate * self.decay_factor.powf(-remaining_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_spec_has_five_levels_with_scaled_widths() {
        let s = NetworkSpec::simple_cnn(Dims::cube(16), 0.125);
        let f: Vec<usize> = s.levels.iter().map(|l| l.filters).collect();
        assert_eq!(f, vec![8, 16, 32, 32, 32]);
        let full = NetworkSpec::simple_cnn(Dims::cube(64), 1.0);
        assert_eq!(
            &full.levels.iter().map(|l| l.filters).collect::<Vec<_>>()[..3],
            &[64, 128, 256]
        );
        let two = NetworkSpec::two_cnn_mhl(Dims::cube(16), 1.0, 8);
        assert_eq!(two.levels.iter().map(|l| l.filters).collect::<Vec<_>>(), vec![64, 128]);
        s.validate().unwrap();
    }

    #[test]
    fn pooling_clamps_at_small_extents() {
        let s = NetworkSpec::simple_cnn(Dims::cube(16), 0.125);
        assert_eq!(s.level_output_dims(3), Dims::cube(1));
        assert_eq!(s.level_output_dims(4), Dims::cube(1));
        assert_eq!(s.last_conv_dims(), Dims::cube(1));
        let two = NetworkSpec::two_cnn_mhl(Dims::cube(16), 0.125, 4);
        assert_eq!(two.last_conv_dims(), Dims::cube(8));
        assert_eq!(two.mlp_input_len(), 2 * 4 * 64);
    }

    #[test]
    fn mlp_width_defaults_to_width_times_height() {
        let s = NetworkSpec::simple_cnn(Dims::new(12, 10, 8), 0.125);
        assert_eq!(s.mlp.hidden[0], 120);
    }

    #[test]
    fn lr_schedule_decays_to_base_then_holds() {
        let cfg = TrainConfig {
            max_epochs: 100,
            ..TrainConfig::default()
        };
        assert!((cfg.learning_rate_at(0) - 1e-4 * 32.0).abs() < 1e-15);
        assert!((cfg.learning_rate_at(40) - 2e-4).abs() < 1e-15);
        assert_eq!(cfg.learning_rate_at(50), 1e-4);
        assert_eq!(cfg.learning_rate_at(99), 1e-4);
        for e in 0..99 {
            assert!(cfg.learning_rate_at(e + 1) <= cfg.learning_rate_at(e));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.split = [0.7, 0.2, 0.2];
        assert!(cfg.validate().is_err());
        cfg.split = [0.7, 0.2, 0.1];
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
    }
}
