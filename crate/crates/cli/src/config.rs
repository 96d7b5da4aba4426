//! Run configuration: built-in defaults, overlaid by an optional TOML file,
//! overlaid by command-line flags.
//!
//! ```toml
//! [synth]
//! n_documents = 200
//! min_pages = 4
//! max_pages = 8
//!
//! [split]
//! fractions = [0.8, 0.1, 0.1]
//! seed = 7
//!
//! [model]
//! d_model = 64
//! max_patches = 64
//!
//! [scorer]
//! n_heads = 16
//! aggregation = "first_vector"
//!
//! [stage1]
//! learning_rate = 0.002
//!
//! [stage2]
//! max_epochs = 40
//! ```
//!
//! Every section is optional and only the keys present override the
//! defaults; unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use docvqa::{ModelConfig, ScorerConfig, SynthConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: [0.8, 0.1, 0.1],
            seed: 7,
        }
    }
}

/// All sections, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub scorer: ScorerConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            scorer: ScorerConfig::for_width(model.d_model),
            model,
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
        }
    }
}

/// Recursively replaces entries of `base` by those present in `patch`.
fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
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

fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<toml::Value>, section: &str) -> Result<T> {
    let Some(patch) = patch else {
        let value = toml::Value::try_from(base).with_context(|| format!("encoding [{section}]"))?;
        return value.try_into().with_context(|| format!("re-decoding [{section}]"));
    };
    let mut value = toml::Value::try_from(base).with_context(|| format!("encoding defaults of [{section}]"))?;
    merge(&mut value, patch);
    value.try_into().with_context(|| format!("invalid [{section}] section"))
}

impl RunConfig {
    /// Defaults overlaid by the file at `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let defaults = RunConfig::default();
        let Some(path) = path else {
            return Ok(defaults);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let defaults = RunConfig::default();
        let toml::Value::Table(mut table) = text.parse::<toml::Value>().context("malformed TOML")? else {
            bail!("configuration must be a table");
        };
        let mut take = |k: &str| table.remove(k);
        let (synth, split, model, scorer, stage1, stage2) = (
            take("synth"),
            take("split"),
            take("model"),
            take("scorer"),
            take("stage1"),
            take("stage2"),
        );
        if let Some(k) = table.keys().next() {
            bail!("unknown section [{k}]");
        }
        let model: ModelConfig = overlay(&defaults.model, model, "model")?;
        // head widths follow the model width unless stated
        let scorer_base = ScorerConfig::for_width(model.d_model);
        Ok(RunConfig {
            synth: overlay(&defaults.synth, synth, "synth")?,
            split: overlay(&defaults.split, split, "split")?,
            scorer: overlay(&scorer_base, scorer, "scorer")?,
            model,
            stage1: overlay(&defaults.stage1, stage1, "stage1")?,
            stage2: overlay(&defaults.stage2, stage2, "stage2")?,
        })
    }
}

/// Parses `a:b` (inclusive) or a single number.
pub fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    match s.split_once(':') {
        Some((a, b)) => {
            let (a, b) = (parse(a)?, parse(b)?);
            if a > b {
                return Err(format!("empty range {a}:{b}"));
            }
            Ok((a, b))
        }
        None => parse(s).map(|v| (v, v)),
    }
}

/// Parses a comma-separated list of numbers or `a:b` ranges.
pub fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (a, b) = parse_range(part)?;
        out.extend(a..=b);
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

pub fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected three fractions, got {}", v.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml("[stage2]\nmax_epochs = 7\n[model]\nd_model = 32\nn_heads = 2\n").unwrap();
        assert_eq!(cfg.stage2.max_epochs, 7);
        assert_eq!(cfg.stage2.stage, 2);
        assert_eq!(cfg.stage2.learning_rate, TrainConfig::stage2().learning_rate);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.scorer.head_dims, vec![32, 16, 1]);
        assert_eq!(cfg.synth, SynthConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nlr = 3\n").is_err());
    }

    #[test]
    fn ranges_and_lists() {
        assert_eq!(parse_range("4:8").unwrap(), (4, 8));
        assert_eq!(parse_range("3").unwrap(), (3, 3));
        assert!(parse_range("5:2").is_err());
        assert_eq!(parse_list("2,4,8,16").unwrap(), vec![2, 4, 8, 16]);
        assert_eq!(parse_list("1:4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_fractions("0.8,0.1,0.1").unwrap(), [0.8, 0.1, 0.1]);
        assert!(parse_fractions("0.8,0.2").is_err());
    }
}
