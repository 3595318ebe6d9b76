//! Run configuration as a flat file of dotted keys (`train.lambda = 0.3`),
//! with command-line overrides layered on top.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSpec;
use crate::backbone::{ModelConfig, SiteId};
use crate::bench::train::TrainConfig;
use crate::bench::BenchConfig;
use crate::error::{Error, Result};

/// The calibrated desk-scale profile shipped with the crate.
pub const REFERENCE: &str = include_str!("../configs/reference.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapters: AdapterSpec,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adapters: AdapterSpec::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}: expected {expected}")))
}

macro_rules! keyed_fields {
    ($($key:literal => $($field:ident).+ : $expected:literal),* $(,)?) => {
        /// Every key a config file or flag may set, in echo order.
        pub const KEYS: &[&str] = &[$($key,)* "adapters.sites", "output_dir"];

        impl RunConfig {
            fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_value(key, value, $expected)?,)*
                    "adapters.sites" => {
                        self.adapters.sites = value
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(SiteId::from_str)
                            .collect::<Result<_>>()?
                    }
                    "output_dir" => self.output_dir = PathBuf::from(value),
                    _ => return Err(unknown_key(key)),
                }
                Ok(())
            }

            fn field(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(show(&self.$($field).+)),)*
                    "adapters.sites" => Some(self.adapters.sites.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
                    "output_dir" => Some(self.output_dir.display().to_string()),
                    _ => None,
                }
            }
        }
    };
}

fn show<T: Display>(v: &T) -> String {
    v.to_string()
}

keyed_fields! {
    "model.vocab_size" => model.vocab_size: "a positive integer",
    "model.d_model" => model.d_model: "a positive integer",
    "model.n_layers" => model.n_layers: "a positive integer",
    "model.n_heads" => model.n_heads: "a positive integer",
    "model.d_ff" => model.d_ff: "a positive integer",
    "model.max_seq_len" => model.max_seq_len: "a positive integer",
    "adapters.mode" => adapters.mode: "none, lora or molora",
    "adapters.N" => adapters.n_blocks: "an integer N ≥ 1",
    "adapters.r" => adapters.r: "an integer r ≥ 1",
    "adapters.alpha_scaling" => adapters.alpha_scaling: "a number",
    "adapters.dropout_p" => adapters.dropout_p: "a number in [0, 1)",
    "adapters.gate" => adapters.gate: "off, softmax or equal_share",
    "train.lr" => train.lr: "a positive number",
    "train.lr_ft" => train.lr_ft: "a positive number",
    "train.batch_size" => train.batch_size: "a positive integer",
    "train.epochs" => train.epochs: "a non-negative integer",
    "train.lambda" => train.lambda: "a number ≥ 0",
    "train.replay_interval" => train.replay_interval: "a positive integer",
    "train.replay_size" => train.replay_size: "a non-negative integer",
    "train.seed" => train.seed: "an unsigned integer",
    "train.weight_decay" => train.weight_decay: "a number ≥ 0",
    "train.max_grad_norm" => train.max_grad_norm: "a number ≥ 0 (0 disables clipping)",
    "train.pretrain_epochs" => train.pretrain_epochs: "a non-negative integer",
    "train.pretrain_lr" => train.pretrain_lr: "a positive number",
    "train.pretrain_seed" => train.pretrain_seed: "an unsigned integer",
    "bench.seed" => bench.seed: "an unsigned integer",
    "bench.gi_train" => bench.gi_train: "a positive integer",
    "bench.gi_eval" => bench.gi_eval: "a positive integer",
    "bench.ei_train" => bench.ei_train: "a positive integer",
    "bench.ei_eval" => bench.ei_eval: "a positive integer",
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown key `{key}`; valid keys: {}", KEYS.join(", ")))
}

/// Maps a flag name to its key: an exact key, or the one key ending in
/// `.name` (so `lambda` means `train.lambda`).
pub fn resolve_key(name: &str) -> Result<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == name) {
        return Ok(k);
    }
    let suffix = format!(".{name}");
    let hits: Vec<&'static str> = KEYS.iter().copied().filter(|k| k.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(unknown_key(name)),
        many => Err(Error::Config(format!("`{name}` is ambiguous; use one of {}", many.join(", ")))),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let text = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => Ok(s.clone()),
                    _ => Err(Error::Config(format!("{key}: expected a list of strings"))),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            toml::Value::Datetime(_) => return Err(Error::Config(format!("{key}: dates are not accepted"))),
        };
        out.push((key, text));
    }
    Ok(())
}

impl RunConfig {
    /// Defaults overlaid with the keys in `text`. Not yet validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.message().to_string()))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs)?;
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn reference() -> Self {
        Self::from_text(REFERENCE).expect("bundled profile parses")
    }

    /// Sets one key from its text form. Keys must be spelled in full.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_field(key, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.field(key)
    }

    /// Applies `(name, value)` flag pairs, resolving short names.
    pub fn apply_overrides<'a>(&mut self, flags: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (name, value) in flags {
            self.set(resolve_key(name)?, value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapters.validate()?;
        self.train.validate()?;
        self.bench.validate()?;
        for site in &self.adapters.sites {
            if site.layer >= self.model.n_layers {
                return Err(Error::Config(format!(
                    "adapters.sites: {site} is outside a {}-layer model",
                    self.model.n_layers
                )));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Every key with its current value, one `key = value` line each; reads
    /// back to an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = self.get(key).expect("listed key");
            let numeric = v.parse::<f64>().is_ok() && !matches!(*key, "adapters.sites" | "output_dir");
            if numeric {
                out.push_str(&format!("{key} = {v}\n"));
            } else {
                out.push_str(&format!("{key} = {}\n", toml::Value::String(v)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterMode, Gate};
    use crate::backbone::SiteKind;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_text("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.adapters.n_blocks, 8);
        assert_eq!(cfg.adapters.r, 4);
        assert_eq!(cfg.train.lambda, 0.1);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.lr, 3e-4);
        assert_eq!(cfg.train.lr_ft, 5e-5);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = RunConfig::from_text("train.lambda = 0.5\n[bench]\nseed = 9\n").unwrap();
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.bench.seed, 9);
        cfg.apply_overrides([("lambda", "2")]).unwrap();
        assert_eq!(cfg.train.lambda, 2.0);
        cfg.apply_overrides([("adapters.gate", "equal_share"), ("N", "3")]).unwrap();
        assert_eq!(cfg.adapters.gate, Gate::EqualShare);
        assert_eq!(cfg.adapters.n_blocks, 3);
    }

    #[test]
    fn zero_blocks_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides([("adapters.mode", "molora"), ("adapters.N", "0")]).unwrap();
        assert_eq!(cfg.adapters.mode, AdapterMode::Molora);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("N ≥ 1"), "{err}");
    }

    #[test]
    fn unknown_and_ambiguous_keys() {
        let err = RunConfig::from_text("train.lamda = 1").unwrap_err().to_string();
        assert!(err.contains("unknown key `train.lamda`") && err.contains("train.lambda"), "{err}");
        let err = resolve_key("seed").unwrap_err().to_string();
        assert!(err.contains("train.seed") && err.contains("bench.seed"), "{err}");
        let err = RunConfig::from_text("train.epochs = \"many\"").unwrap_err().to_string();
        assert!(err.contains("expected a non-negative integer"), "{err}");
        assert!(RunConfig::from_text("train.lambda = ").is_err());
    }

    #[test]
    fn echo_reads_back_identically() {
        let mut cfg = RunConfig::reference();
        cfg.adapters.sites = vec![SiteId::new(0, SiteKind::Query), SiteId::new(1, SiteKind::FfnDown)];
        cfg.output_dir = PathBuf::from("out dir/x");
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn site_lists_accept_arrays_and_check_depth() {
        let cfg = RunConfig::from_text("adapters.sites = [\"layer1.k_proj\"]").unwrap();
        assert_eq!(cfg.adapters.sites, vec![SiteId::new(1, SiteKind::Key)]);
        let cfg = RunConfig::from_text("adapters.sites = \"layer5.q_proj\"").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("layer5.q_proj"));
    }

    #[test]
    fn reference_profile_is_valid() {
        let cfg = RunConfig::reference();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.replay_interval, 1);
        assert_eq!(cfg.adapters, AdapterSpec::default());
    }
}
