//! Run configuration: TOML sections with defaults, dotted-path overrides
//! from the command line, and the canonical serialization whose hash names
//! run directories. Unknown keys are rejected everywhere.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::Visitor;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::snn::{BackboneKind, LifConfig};

/// Shot count for few-shot splits: a fixed per-class count or the whole
/// training set. Written as `k = 5` or `k = "full"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KOrFull {
    K(usize),
    Full,
}

impl KOrFull {
    pub fn as_option(self) -> Option<usize> {
        match self {
            KOrFull::K(n) => Some(n),
            KOrFull::Full => None,
        }
    }
}

impl fmt::Display for KOrFull {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KOrFull::K(n) => write!(f, "{n}"),
            KOrFull::Full => write!(f, "full"),
        }
    }
}

impl Serialize for KOrFull {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KOrFull::K(n) => s.serialize_u64(*n as u64),
            KOrFull::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for KOrFull {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = KOrFull;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a positive integer or the string \"full\"")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<KOrFull, E> {
                Ok(KOrFull::K(v as usize))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<KOrFull, E> {
                if v < 0 {
                    return Err(E::custom("k must be non-negative"));
                }
                Ok(KOrFull::K(v as usize))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<KOrFull, E> {
                if v == "full" {
                    Ok(KOrFull::Full)
                } else {
                    Err(E::custom(format!("expected \"full\", got \"{v}\"")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Where training data comes from and how streams are encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of .evt files with labels.csv; absent means synthetic data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Held-out evaluation directory; absent means a fresh synthetic test
    /// set (synthetic data) or a deterministic holdout (directory data).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dataset: Option<PathBuf>,
    /// Pretraining source for the transfer protocol.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_dataset: Option<PathBuf>,
    /// Event file shown by augment-preview; absent means the first
    /// training sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preview_sample: Option<PathBuf>,
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: u16,
    pub width: u16,
    pub duration_us: u64,
    pub t_bins: usize,
    /// Shape-class offset of the synthetic transfer target, so transfer
    /// fine-tunes on classes the pretraining never saw.
    pub transfer_offset: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: None,
            test_dataset: None,
            pretrain_dataset: None,
            preview_sample: None,
            classes: 3,
            samples_per_class: 67,
            height: 16,
            width: 16,
            duration_us: 10000,
            t_bins: 8,
            transfer_offset: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub proj_dim: usize,
    pub lif: LifConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneKind::MiniSew, proj_dim: 16, lif: LifConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub temperature: f64,
    /// Average the loss over per-step embeddings instead of pooling time
    /// before a single loss.
    pub temporal_loss: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            batch_size: 32,
            lr: 0.05,
            weight_decay: 1e-4,
            momentum: 0.9,
            temperature: 0.5,
            temporal_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig { epochs: 30, batch_size: 32, lr: 0.05, weight_decay: 1e-4, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: KOrFull,
    /// When set, size labeled splits by a stratified per-class fraction
    /// instead of k.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_fraction: Option<f64>,
    /// Encoder checkpoint evaluated by probe/finetune; the literal "none"
    /// means a freshly initialized encoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<String>,
    pub splits: usize,
    /// Per-class size of the fresh synthetic test set.
    pub test_per_class: usize,
    /// Training-set fractions for the data-quantity protocol.
    pub fractions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: KOrFull::K(5),
            label_fraction: None,
            ckpt: None,
            splits: 5,
            test_per_class: 20,
            fractions: vec![0.25, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentPolicy::default(),
            pretrain: PretrainConfig::default(),
            downstream: DownstreamConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.dataset.is_none() {
            if !(2..=10).contains(&d.classes) {
                return Err(Error::config(format!(
                    "synthetic data supports 2..=10 classes, got {}",
                    d.classes
                )));
            }
            if d.samples_per_class == 0 {
                return Err(Error::config("samples_per_class must be at least 1"));
            }
            if d.duration_us == 0 {
                return Err(Error::config("duration_us must be positive"));
            }
        }
        if d.height < 8 || d.width < 8 {
            return Err(Error::config(format!(
                "sensor must be at least 8x8, got {}x{}",
                d.height, d.width
            )));
        }
        if d.t_bins == 0 {
            return Err(Error::config("t_bins must be at least 1"));
        }
        self.model.lif.validate()?;
        if self.model.proj_dim == 0 {
            return Err(Error::config("proj_dim must be at least 1"));
        }
        self.augment.validate()?;
        let p = &self.pretrain;
        if p.batch_size < 2 {
            return Err(Error::config("pretrain batch_size must be at least 2"));
        }
        if !(p.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        for (name, lr, wd, mom) in [
            ("pretrain", p.lr, p.weight_decay, p.momentum),
            ("downstream", self.downstream.lr, self.downstream.weight_decay, self.downstream.momentum),
        ] {
            if lr < 0.0 || wd < 0.0 {
                return Err(Error::config(format!("{name} lr and weight_decay must be non-negative")));
            }
            if !(0.0..1.0).contains(&mom) {
                return Err(Error::config(format!("{name} momentum must be in [0, 1)")));
            }
        }
        if self.downstream.batch_size == 0 {
            return Err(Error::config("downstream batch_size must be at least 1"));
        }
        let e = &self.eval;
        if e.splits == 0 {
            return Err(Error::config("eval.splits must be at least 1"));
        }
        if e.k == KOrFull::K(0) {
            return Err(Error::config("eval.k must be at least 1 (or \"full\")"));
        }
        if e.test_per_class == 0 {
            return Err(Error::config("eval.test_per_class must be at least 1"));
        }
        if let Some(f) = e.label_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!(
                    "eval.label_fraction must lie in (0, 1], got {f}"
                )));
            }
        }
        if e.fractions.is_empty() {
            return Err(Error::config("eval.fractions must not be empty"));
        }
        for &f in &e.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("eval.fractions entries must lie in (0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

/// Set one dotted path in a TOML table, e.g. ("pretrain.epochs", "10").
/// The raw value is parsed as TOML; anything that does not parse is taken
/// as a plain string, so `--eval.k full` works without quoting.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("bad override path '{path}'")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for seg in &segments[..segments.len() - 1] {
        cur = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::config(format!("override path '{path}': '{seg}' is not a table"))
            })?;
    }
    cur.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Read a config file (or start from defaults), apply dotted overrides,
/// deserialize strictly, and validate.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
    let mut table: toml::Table = match path {
        Some(p) => std::fs::read_to_string(p)?
            .parse()
            .map_err(|e| Error::config(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let cfg: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Stable TOML serialization of a resolved config.
pub fn canonical_toml(cfg: &Config) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::config(format!("config serialization failed: {e}")))
}

/// First 12 hex digits of the canonical serialization's SHA-256, used to
/// name run directories.
pub fn config_hash(cfg: &Config) -> Result<String> {
    let text = canonical_toml(cfg)?;
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(12);
    for b in digest.iter().take(6) {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let text = canonical_toml(&cfg).unwrap();
        let parsed: Config = toml::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[pretrain]\nepochz = 3\n").is_err());
        assert!(toml::from_str::<Config>("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let overrides = vec![
            ("seed".to_string(), "42".to_string()),
            ("pretrain.epochs".to_string(), "10".to_string()),
            ("model.lif.beta".to_string(), "0.8".to_string()),
            ("eval.k".to_string(), "full".to_string()),
            ("augment.enabled".to_string(), "[\"spatial\"]".to_string()),
        ];
        let cfg = load_config(None, &overrides).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.pretrain.epochs, 10);
        assert_eq!(cfg.model.lif.beta, 0.8);
        assert_eq!(cfg.eval.k, KOrFull::Full);
        assert_eq!(cfg.augment.enabled, vec![crate::augment::Family::Spatial]);
    }

    #[test]
    fn k_accepts_int_and_full() {
        let cfg: Config = toml::from_str("[eval]\nk = 3\n").unwrap();
        assert_eq!(cfg.eval.k, KOrFull::K(3));
        let cfg: Config = toml::from_str("[eval]\nk = \"full\"\n").unwrap();
        assert_eq!(cfg.eval.k, KOrFull::Full);
        assert!(toml::from_str::<Config>("[eval]\nk = \"some\"\n").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 12);
        b.pretrain.epochs = 41;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }

    #[test]
    fn validation_rejects_bad_sections() {
        let mut cfg = Config::default();
        cfg.pretrain.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.pretrain.temperature = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.data.classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.eval.fractions = vec![0.5, 1.5];
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.eval.k = KOrFull::K(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn file_and_override_compose() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 5\n[pretrain]\nepochs = 12\n").unwrap();
        let overrides = vec![("pretrain.lr".to_string(), "0.1".to_string())];
        let cfg = load_config(Some(&path), &overrides).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.pretrain.epochs, 12);
        assert_eq!(cfg.pretrain.lr, 0.1);
    }
}
