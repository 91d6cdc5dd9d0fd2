//! Run configuration: one TOML file with `[model]`, `[train]`, `[data]`,
//! `[extend]` and `[output]` sections, plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use interlingua::data::FilterOptions;
use interlingua::training::TrainConfig;
use interlingua::transformer::ModelConfig;
use interlingua::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub extend: Option<ExtendConfig>,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub src_lang: String,
    pub tgt_lang: String,
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    /// BPE merges learned per language.
    pub num_merges: i64,
    pub max_words: usize,
    pub max_tokens: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            src_lang: "x".into(),
            tgt_lang: "y".into(),
            train_src: PathBuf::new(),
            train_tgt: PathBuf::new(),
            test_src: None,
            test_tgt: None,
            num_merges: 1000,
            max_words: 50,
            max_tokens: None,
        }
    }
}

impl DataConfig {
    pub fn filter(&self, model: &ModelConfig) -> FilterOptions {
        // Sequences also need room for BOS on the decoder side.
        let fit = model.max_len.saturating_sub(1);
        FilterOptions { max_words: self.max_words, max_tokens: Some(self.max_tokens.map_or(fit, |m| m.min(fit))) }
    }
}

/// A new language attached to a trained pair through a pivot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendConfig {
    pub language: String,
    /// Existing language the new one is paired with during training.
    pub pivot: String,
    pub train_pivot: PathBuf,
    pub train_new: PathBuf,
    #[serde(default = "default_extend_steps")]
    pub steps: u64,
    /// Optional held-out pair of the new language and the pivot's partner,
    /// never used for training.
    pub test_new: Option<PathBuf>,
    pub test_partner: Option<PathBuf>,
}

fn default_extend_steps() -> u64 {
    1500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Adds per-step wall time to the training log, which then differs
    /// between otherwise identical runs.
    pub log_wall_time: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("run"), log_wall_time: false }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `section.key=value` override. Values parse as TOML and fall
/// back to plain strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form section.key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' has an empty component")));
    }
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads `path`, applies `overrides` in order and resolves relative paths
    /// against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), message };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.train_src, &mut d.train_tgt] {
            resolve(base, p);
        }
        for p in [&mut d.test_src, &mut d.test_tgt].into_iter().flatten() {
            resolve(base, p);
        }
        if let Some(e) = &mut self.extend {
            resolve(base, &mut e.train_pivot);
            resolve(base, &mut e.train_new);
            for p in [&mut e.test_new, &mut e.test_partner].into_iter().flatten() {
                resolve(base, p);
            }
        }
        resolve(base, &mut self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        let bad = |m: String| Err(Error::Config(m));
        if d.src_lang.is_empty() || d.tgt_lang.is_empty() || d.src_lang == d.tgt_lang {
            return bad(format!("data.src_lang '{}' and data.tgt_lang '{}' must be distinct and non-empty", d.src_lang, d.tgt_lang));
        }
        for lang in [&d.src_lang, &d.tgt_lang] {
            if !lang.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(format!("language tag '{lang}' may only contain ASCII letters, digits, '_' and '-'"));
            }
        }
        if d.test_src.is_some() != d.test_tgt.is_some() {
            return bad("data.test_src and data.test_tgt must be given together".into());
        }
        if self.output.dir.as_os_str().is_empty() {
            return bad("output.dir is empty".into());
        }
        if let Some(e) = &self.extend {
            if e.language == d.src_lang || e.language == d.tgt_lang || e.language.is_empty() {
                return bad(format!("extend.language '{}' must be a new language", e.language));
            }
            if e.pivot != d.src_lang && e.pivot != d.tgt_lang {
                return bad(format!("extend.pivot '{}' is not one of the trained languages", e.pivot));
            }
            if e.test_new.is_some() != e.test_partner.is_some() {
                return bad("extend.test_new and extend.test_partner must be given together".into());
            }
        }
        Ok(())
    }

    /// Fails unless every input file named in `[data]` (and `[extend]` when
    /// present) exists.
    pub fn check_inputs(&self) -> Result<()> {
        let d = &self.data;
        let mut inputs = vec![&d.train_src, &d.train_tgt];
        inputs.extend(d.test_src.iter().chain(&d.test_tgt));
        if let Some(e) = &self.extend {
            inputs.extend([&e.train_pivot, &e.train_new]);
            inputs.extend(e.test_new.iter().chain(&e.test_partner));
        }
        for p in inputs {
            if p.as_os_str().is_empty() {
                return Err(Error::Config("a required data path is empty".into()));
            }
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// The language paired with the pivot in the base system.
    pub fn partner_of(&self, pivot: &str) -> &str {
        if pivot == self.data.src_lang {
            &self.data.tgt_lang
        } else {
            &self.data.src_lang
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.learning_rate=0.001").unwrap();
        apply_override(&mut t, "train.distance=max").unwrap();
        apply_override(&mut t, "train.quantize = true").unwrap();
        let train = t["train"].as_table().unwrap();
        assert_eq!(train["learning_rate"].as_float(), Some(0.001));
        assert_eq!(train["distance"].as_str(), Some("max"));
        assert_eq!(train["quantize"].as_bool(), Some(true));
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "train.learning_rate.x=1").is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
