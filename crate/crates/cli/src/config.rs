use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cipherdaug::cipher::{Alphabet, CipherKey};
use cipherdaug::losses::LossConfig;
use cipherdaug::model::{ModelConfig, Precision};
use cipherdaug::trainer::TrainConfig;

use crate::UsageError;

/// Data and preprocessing settings of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding `train.<lang>` and `dev.<lang>`.
    pub dir: PathBuf,
    pub src_lang: String,
    pub tgt_lang: String,
    pub keys: Vec<u32>,
    pub merges: usize,
    /// `de`, `en` or a path to a letters file.
    pub alphabet: String,
    pub lowercase_only: bool,
    pub precision: Precision,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("."),
            src_lang: "de".into(),
            tgt_lang: "en".into(),
            keys: vec![1, 2],
            merges: 1000,
            alphabet: "de".into(),
            lowercase_only: false,
            precision: Precision::F32,
        }
    }
}

impl DataConfig {
    pub fn cipher_keys(&self) -> Vec<CipherKey> {
        self.keys.iter().map(|&k| CipherKey(k)).collect()
    }
}

/// Fully resolved configuration of `train`, also written next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Overlays the tables of a TOML file on top of `self`; keys present in
    /// the file win.
    pub fn overlay_file(&self, path: &Path) -> Result<Self> {
        overlay(self, path, Some(&["data", "model", "train", "loss"]))
    }
}

/// Deserializes `base` with the keys of the TOML file at `path` merged over
/// it. `sections` restricts the allowed top-level keys.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, path: &Path, sections: Option<&[&str]>) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let usage = |m: String| UsageError(format!("config {}: {m}", path.display()));
    let over: toml::Table = text.parse().map_err(|e: toml::de::Error| usage(e.to_string()))?;
    if let Some(allowed) = sections {
        if let Some(k) = over.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(usage(format!("unknown section [{k}]")).into());
        }
    }
    let mut table = toml::Table::try_from(base)?;
    merge(&mut table, over);
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| usage(e.to_string()).into())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn parse_keys(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|_| UsageError(format!("bad key {t:?}")).into()))
        .collect()
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|_| UsageError(format!("bad list entry {t:?}")).into()))
        .collect()
}

pub fn alphabet(spec: &str, lowercase_only: bool) -> Result<Alphabet> {
    let a = match spec {
        "de" | "german" if lowercase_only => Alphabet::lowercase_only("german", cipherdaug::cipher::GERMAN_LETTERS)?,
        "en" | "english" if lowercase_only => Alphabet::lowercase_only("english", cipherdaug::cipher::ENGLISH_LETTERS)?,
        "de" | "german" => Alphabet::german(),
        "en" | "english" => Alphabet::english(),
        path => {
            let p = Path::new(path);
            if !p.exists() {
                bail!(UsageError(format!("alphabet {path:?} is neither de, en nor a file")));
            }
            Alphabet::from_file(p, lowercase_only)?
        }
    };
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_unset_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[loss]\nbeta = 0.0\n[model]\nlayers = 1\n").unwrap();
        let mut base = RunConfig::default();
        base.train.seed = 9;
        let out = base.overlay_file(&p).unwrap();
        assert_eq!(out.loss.beta, 0.0);
        assert_eq!(out.model.layers, 1);
        assert_eq!(out.train.seed, 9);
        assert_eq!(out.model.heads, base.model.heads);
    }

    #[test]
    fn keys_parse() {
        assert_eq!(parse_keys("1, 2").unwrap(), vec![1, 2]);
        assert!(parse_keys("").unwrap().is_empty());
        assert!(parse_keys("x").is_err());
    }
}
