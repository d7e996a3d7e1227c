//! Flat `key = value` text configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use thiserror::Error;

use crate::model::ModelConfig;
use crate::moe::MoeConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Ordered string map. Later assignments override earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: IndexMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            cfg.set(k, v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.get(key)?
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Overlays every entry of `other` on top of `self`.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let p = format!("{prefix}.");
        KvConfig {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Inserts every entry of `other` as `prefix.key`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(ConfigError::Unknown(k.to_string())),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

const MODEL_KEYS: [&str; 8] = [
    "feat_dim",
    "d_model",
    "n_blocks",
    "ffn_hidden",
    "n_heads",
    "vocab_size",
    "downsample_rate",
    "max_len",
];

impl ModelConfig {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("feat_dim", self.feat_dim);
        kv.set("d_model", self.d_model);
        kv.set("n_blocks", self.n_blocks);
        kv.set("ffn_hidden", self.ffn_hidden);
        kv.set("n_heads", self.n_heads);
        kv.set("vocab_size", self.vocab_size);
        kv.set("downsample_rate", self.downsample_rate);
        kv.set("max_len", self.max_len);
        kv
    }

    /// Missing keys fall back to `base`.
    pub fn from_kv(kv: &KvConfig, base: &ModelConfig) -> Result<Self, ConfigError> {
        kv.check_keys(&MODEL_KEYS)?;
        Ok(Self {
            feat_dim: kv.get_or("feat_dim", base.feat_dim)?,
            d_model: kv.get_or("d_model", base.d_model)?,
            n_blocks: kv.get_or("n_blocks", base.n_blocks)?,
            ffn_hidden: kv.get_or("ffn_hidden", base.ffn_hidden)?,
            n_heads: kv.get_or("n_heads", base.n_heads)?,
            vocab_size: kv.get_or("vocab_size", base.vocab_size)?,
            downsample_rate: kv.get_or("downsample_rate", base.downsample_rate)?,
            max_len: kv.get_or("max_len", base.max_len)?,
        })
    }
}

impl MoeConfig {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("n_experts", self.n_experts);
        kv.set("top_k", self.top_k);
        kv.set("alpha", self.alpha);
        kv.set("router_noise_std", self.router_noise_std);
        kv
    }

    pub fn from_kv(kv: &KvConfig, base: &MoeConfig) -> Result<Self, ConfigError> {
        kv.check_keys(&["n_experts", "top_k", "alpha", "router_noise_std"])?;
        Ok(Self {
            n_experts: kv.get_or("n_experts", base.n_experts)?,
            top_k: kv.get_or("top_k", base.top_k)?,
            alpha: kv.get_or("alpha", base.alpha)?,
            router_noise_std: kv.get_or("router_noise_std", base.router_noise_std)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_override() {
        let kv = KvConfig::parse("# header\na = 1\nb=two # trailing\n\na = 3\n").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), Some(3));
        assert_eq!(kv.get_str("b"), Some("two"));
        assert!(kv.get::<u32>("b").is_err());
        assert!(matches!(
            KvConfig::parse("novalue\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn sections() {
        let kv = KvConfig::parse("model.d_model = 32\nmodel.n_heads = 2\ntrain.seed = 4\n").unwrap();
        let m = ModelConfig::from_kv(&kv.section("model"), &ModelConfig::default()).unwrap();
        assert_eq!(m.d_model, 32);
        assert_eq!(m.n_heads, 2);
        assert_eq!(m.n_blocks, ModelConfig::default().n_blocks);
        let bad = KvConfig::parse("d_modle = 3").unwrap();
        assert!(matches!(
            ModelConfig::from_kv(&bad, &ModelConfig::default()),
            Err(ConfigError::Unknown(_))
        ));
    }

    #[test]
    fn model_config_text_round_trip() {
        let m = ModelConfig::default();
        let kv = KvConfig::parse(&m.to_kv().to_text()).unwrap();
        assert_eq!(ModelConfig::from_kv(&kv, &ModelConfig::default()).unwrap(), m);
    }
}
