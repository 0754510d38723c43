//! Run configuration: defaults, TOML file loading, `key=value` overrides.
//!
//! Precedence is CLI overrides > config file > `OSAD_DATA_ROOT` env (for
//! `data.root` only) > built-in defaults. The fully resolved tree is
//! serialized verbatim into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory name; derived from the config hash and seed when unset.
    pub run_id: Option<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub dadl: DadlConfig,
    pub train: TrainSettings,
    pub attack: AttackSettings,
    pub openmax: OpenMaxSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: None,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            dadl: DadlConfig::default(),
            train: TrainSettings::default(),
            attack: AttackSettings::default(),
            openmax: OpenMaxSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root for on-disk datasets; not needed for the toy set.
    pub root: Option<PathBuf>,
    /// Where synthesized fixtures (toy OOD images) are materialized.
    pub cache_dir: PathBuf,
    pub dataset: String,
    pub split_index: u32,
    /// Fraction of known-class training data held out for validation.
    pub val_fraction: f64,
    pub batch_size: usize,
    /// Folder of out-of-distribution images for OOD evaluation.
    pub ood_dir: Option<PathBuf>,
    pub ood_center_crop: Option<usize>,
    pub ood_resize: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            cache_dir: PathBuf::from("cache"),
            dataset: "toy".to_string(),
            split_index: 1,
            val_fraction: 0.1,
            batch_size: 32,
            ood_dir: None,
            ood_center_crop: None,
            ood_resize: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserVariant {
    DualAttentive,
    MeanFilter,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `micro`, `toy` or `full`: preset encoder/decoder sizes.
    pub profile: String,
    /// Component toggles; the encoder and open-set classifier are always on.
    pub dec: bool,
    pub dadl: bool,
    pub ssd: bool,
    pub caml: bool,
    pub denoiser_variant: DenoiserVariant,
    /// Per-channel input standardization applied inside the model.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            profile: "toy".to_string(),
            dec: true,
            dadl: true,
            ssd: true,
            caml: true,
            denoiser_variant: DenoiserVariant::DualAttentive,
            input_mean: 0.5,
            input_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DadlConfig {
    pub enabled: bool,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for DadlConfig {
    fn default() -> Self {
        DadlConfig { enabled: true, reduction_ratio: 16, spatial_kernel: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Attack validation images during checkpoint selection.
    pub val_attack: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { epochs: 10, learning_rate: 1e-3, val_attack: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    /// `fgsm`, `pgd`, `roa` or `none`.
    pub family: String,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub pixel_min: f64,
    pub pixel_max: f64,
    /// Loss the attack ascends; only softmax cross-entropy is defined.
    pub loss_target: String,
    pub roa: RoaSettings,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            family: "pgd".to_string(),
            epsilon: 0.3,
            step_size: 0.01,
            iterations: 5,
            pixel_min: 0.0,
            pixel_max: 1.0,
            loss_target: "softmax_ce".to_string(),
            roa: RoaSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoaSettings {
    /// Rectangle size in pixels; `0` means 1/8 of the image side (min 2).
    pub height: usize,
    pub width: usize,
    /// `grid` or `gradient_guided`.
    pub search: String,
    pub inner_steps: usize,
    /// Grid stride; `0` means the rectangle size.
    pub stride: usize,
}

impl Default for RoaSettings {
    fn default() -> Self {
        RoaSettings { height: 0, width: 0, search: "grid".to_string(), inner_steps: 10, stride: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenMaxSettings {
    pub tail_size: usize,
    pub sigma: usize,
    pub threshold: f64,
    /// `latent` or `logits`.
    pub feature_space: String,
}

impl Default for OpenMaxSettings {
    fn default() -> Self {
        OpenMaxSettings {
            tail_size: 20,
            sigma: 3,
            threshold: 0.95,
            feature_space: "latent".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Number of example images rendered into report figures.
    pub report_samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { report_samples: 8 }
    }
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key `{key}` crosses a non-table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override key `{key}` crosses a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw));
    Ok(())
}

impl RunConfig {
    /// Resolve a configuration: defaults, then the file, then the
    /// `OSAD_DATA_ROOT` env var (data.root only), then `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut tree = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::config(format!("default config serialization: {e}")))?;

        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            let overlay: toml::Value = toml::from_str(&text)?;
            merge_toml(&mut tree, overlay);
        }

        if let Ok(root) = std::env::var("OSAD_DATA_ROOT") {
            if !root.is_empty() {
                apply_override(&mut tree, "data.root", &root)?;
            }
        }

        for (k, v) in overrides {
            apply_override(&mut tree, k, v)?;
        }

        let cfg: RunConfig = tree
            .try_into()
            .map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check that every required key is present before a run starts.
    pub fn validate(&self) -> Result<()> {
        crate::data::DatasetId::parse(&self.data.dataset)?;
        if self.data.dataset != "toy" && self.data.root.is_none() {
            return Err(Error::config(format!(
                "missing required key `data.root` (dataset `{}` is read from disk)",
                self.data.dataset
            )));
        }
        match self.model.profile.as_str() {
            "micro" | "toy" | "full" => {}
            other => {
                return Err(Error::config(format!(
                    "unknown model.profile `{other}`; valid options: micro, toy, full"
                )))
            }
        }
        match self.attack.family.as_str() {
            "fgsm" | "pgd" | "roa" | "none" => {}
            other => {
                return Err(Error::config(format!(
                    "unknown attack.family `{other}`; valid options: fgsm, pgd, roa, none"
                )))
            }
        }
        if self.attack.loss_target != "softmax_ce" {
            return Err(Error::config(format!(
                "unknown attack.loss_target `{}`; valid options: softmax_ce",
                self.attack.loss_target
            )));
        }
        if self.attack.pixel_min >= self.attack.pixel_max {
            return Err(Error::config("attack.pixel_min must be below attack.pixel_max"));
        }
        match self.openmax.feature_space.as_str() {
            "latent" | "logits" => {}
            other => {
                return Err(Error::config(format!(
                    "unknown openmax.feature_space `{other}`; valid options: latent, logits"
                )))
            }
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("data.val_fraction must be in [0, 1)"));
        }
        if self.train.learning_rate <= 0.0 {
            return Err(Error::config("train.learning_rate must be positive"));
        }
        if self.train.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.openmax.threshold) {
            return Err(Error::config("openmax.threshold must be in (0, 1)"));
        }
        Ok(())
    }

    /// Canonical TOML serialization of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hex digest of the resolved config.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The run directory name: explicit `run_id` or a hash-derived one.
    pub fn resolved_run_id(&self) -> String {
        match &self.run_id {
            Some(id) => id.clone(),
            None => format!("run-{}-s{}", &self.hash()[..12], self.seed),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.resolved_run_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "seed = 3\n[train]\nepochs = 4\n").unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &[("train.epochs".to_string(), "9".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 9);
    }

    #[test]
    fn missing_data_root_is_named_in_error() {
        let err = RunConfig::load(
            None,
            &[("data.dataset".to_string(), "cifar10".to_string())],
        )
        .unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("data.root"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nlr_schedule = \"cosine\"\n").unwrap();
        let err = RunConfig::load(Some(&path), &[]).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
