//! Run configuration: JSON file merged over defaults, then environment
//! overrides (`XAI3D_SECTION__KEY=value`), then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use xai3d_core::cohort::CohortParams;
use xai3d_core::metrics::PerturbationPolicy;
use xai3d_core::nn::{NetworkSpec, TrainConfig};
use xai3d_core::pipeline::{AggregateConfig, ExplainConfig};
use xai3d_core::volume::{AffineTransform3D, Dims};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "XAI3D_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SimpleCnn,
    SimpleMhl,
    TwoCnnMhl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub architecture: Architecture,
    /// Multiplies every filter count.
    pub scale: f64,
    pub key_dim: usize,
    /// Overrides the two hidden MLP widths.
    pub mlp_hidden: Option<[usize; 2]>,
    pub dropout: [f64; 2],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            architecture: Architecture::TwoCnnMhl,
            scale: 0.125,
            key_dim: 8,
            mlp_hidden: None,
            dropout: [0.25, 0.25],
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self, dims: Dims) -> NetworkSpec {
        let mut spec = match self.architecture {
            Architecture::SimpleCnn => NetworkSpec::simple_cnn(dims, self.scale),
            Architecture::SimpleMhl => NetworkSpec::simple_mhl(dims, self.scale, self.key_dim),
            Architecture::TwoCnnMhl => NetworkSpec::two_cnn_mhl(dims, self.scale, self.key_dim),
        };
        if let Some(h) = self.mlp_hidden {
            spec.mlp.hidden = h;
        }
        spec.mlp.dropout = self.dropout;
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlasConfig {
    pub regions: usize,
    pub thresholds: Vec<f64>,
    /// Explanation-to-atlas transform; identity when absent.
    pub transform: Option<AffineTransform3D>,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            regions: 8,
            thresholds: xai3d_core::atlas::THRESHOLDS.to_vec(),
            transform: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `cohort.seed` is ignored; the cohort seed derives from `seed`.
    pub cohort: CohortParams,
    pub split: [f64; 3],
    pub network: NetworkConfig,
    /// `training.seed` and `training.split` are ignored.
    pub training: TrainConfig,
    pub explain: ExplainConfig,
    pub aggregate: AggregateConfig,
    /// `metrics.seed` is ignored.
    pub metrics: PerturbationPolicy,
    pub atlas: AtlasConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            cohort: CohortParams::default(),
            split: [0.7, 0.2, 0.1],
            network: NetworkConfig::default(),
            training: TrainConfig {
                max_epochs: 30,
                ..TrainConfig::default()
            },
            explain: ExplainConfig::default(),
            aggregate: AggregateConfig::default(),
            metrics: PerturbationPolicy::default(),
            atlas: AtlasConfig::default(),
        }
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `XAI3D_TRAINING__MAX_EPOCHS=5` sets `training.max_epochs`. Values are
/// parsed as JSON, falling back to a plain string.
pub fn apply_env_overrides(doc: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("malformed override variable {key}")));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut patch = value;
        for p in path.iter().rev() {
            let mut m = serde_json::Map::new();
            m.insert(p.clone(), patch);
            patch = Value::Object(m);
        }
        merge(doc, patch);
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, overlaid with the file (if any) and the environment.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, CliError> {
        let mut doc = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            if !file.is_object() {
                return Err(CliError::Config(format!("{}: expected a JSON object", p.display())));
            }
            merge(&mut doc, file);
        }
        apply_env_overrides(&mut doc, env)?;
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.cohort.n_subjects < 20 {
            return bad(format!(
                "cohort.n_subjects must be at least 20, got {}",
                self.cohort.n_subjects
            ));
        }
        if self.cohort.groups.is_empty() {
            return bad("cohort.groups must not be empty".into());
        }
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split.iter().any(|f| *f < 0.0) {
            return bad(format!("split fractions must sum to 1, got {:?}", self.split));
        }
        if !(self.network.scale > 0.0) || self.network.key_dim == 0 {
            return bad("network.scale and network.key_dim must be positive".into());
        }
        self.network
            .spec(self.cohort.dims)
            .validate()
            .map_err(|e| CliError::Config(format!("network: {e}")))?;
        self.training
            .validate()
            .map_err(|e| CliError::Config(format!("training: {e}")))?;
        if self.explain.classes.is_empty() || self.explain.classes.iter().any(|&c| c > 1) {
            return bad("explain.classes must list classes 0 and/or 1".into());
        }
        if self.explain.shap.permutations == 0 {
            return bad("explain.shap.permutations must be positive".into());
        }
        self.metrics
            .validate()
            .map_err(|e| CliError::Config(format!("metrics: {e}")))?;
        if self.atlas.regions == 0 || self.atlas.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("atlas needs regions >= 1 and thresholds in (0, 1)".into());
        }
        if let Some(t) = &self.atlas.transform {
            t.validate()
                .map_err(|e| CliError::Config(format!("atlas.transform: {e}")))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, leaving out the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for one pipeline stage: the first eight bytes (little-endian) of
/// `SHA-256("<stage>:<seed>")`.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let d = Sha256::digest(format!("{stage}:{seed}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_nested_keys() {
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        apply_env_overrides(
            &mut doc,
            vec![
                ("XAI3D_TRAINING__MAX_EPOCHS".to_string(), "5".to_string()),
                ("XAI3D_NETWORK__ARCHITECTURE".to_string(), "simple_cnn".to_string()),
                ("OTHER".to_string(), "x".to_string()),
            ],
        )
        .unwrap();
        let cfg: RunConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.training.max_epochs, 5);
        assert_eq!(cfg.network.architecture, Architecture::SimpleCnn);
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        merge(&mut doc, serde_json::json!({"sed": 3}));
        assert!(serde_json::from_value::<RunConfig>(doc).is_err());
    }

    #[test]
    fn stage_seeds_differ_and_repeat() {
        assert_eq!(stage_seed(7, "train"), stage_seed(7, "train"));
        assert_ne!(stage_seed(7, "train"), stage_seed(7, "cohort"));
        assert_ne!(stage_seed(7, "train"), stage_seed(8, "train"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed = 0;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let env = vec![("XAI3D_SPLIT".to_string(), "[0.5, 0.2, 0.1]".to_string())];
        assert!(matches!(RunConfig::load(None, env), Err(CliError::Config(_))));
        let env = vec![("XAI3D_EXPLAIN__CLASSES".to_string(), "[2]".to_string())];
        assert!(matches!(RunConfig::load(None, env), Err(CliError::Config(_))));
    }
}
