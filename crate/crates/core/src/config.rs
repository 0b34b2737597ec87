//! Run configuration: a TOML file merged with `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{sha256_hex, CorpusSpec};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::model::{ModelSpec, ProsodyMask};
use crate::prosody_encoder::ProsodyEncoderConfig;
use crate::prosody_predictor::PredictorConfig;
use crate::text_encoder::EncoderConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model initialization, batch order and dropout.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub prosody_encoder: ProsodyEncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn to_tree(cfg: &RunConfig) -> toml::Table {
    match toml::Value::try_from(cfg).expect("config serializes to toml") {
        toml::Value::Table(t) => t,
        _ => unreachable!("struct serializes to a table"),
    }
}

/// Reject keys that do not exist in the reference tree, naming the full path.
fn check_keys(tree: &toml::Table, reference: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in tree {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match reference.get(k) {
            None => return Err(Error::config(path, "unknown key")),
            Some(toml::Value::Table(r)) => match v {
                toml::Value::Table(t) => check_keys(t, r, &path)?,
                _ => return Err(Error::config(path, "expected a section")),
            },
            Some(_) => {}
        }
    }
    Ok(())
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

/// Parse one `section.key=value` override; the value is read as a TOML
/// literal, falling back to a bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let path: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::config(spec, "empty key in override path"));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn set_path(tree: &mut toml::Table, path: &[String], value: toml::Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = tree;
    for p in parents {
        node = match node
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            other => {
                *other = toml::Value::Table(toml::Table::new());
                other.as_table_mut().expect("just set")
            }
        };
    }
    node.insert(last.clone(), value);
}

impl RunConfig {
    /// Defaults, then the file (if any), then each override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let reference = to_tree(&RunConfig::default());
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        check_keys(&file, &reference, "")?;
        let mut tree = reference.clone();
        merge(&mut tree, file);
        for o in overrides {
            let (path, value) = parse_override(o)?;
            let mut single = toml::Table::new();
            set_path(&mut single, &path, value);
            check_keys(&single, &reference, "")?;
            merge(&mut tree, single);
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let cfg = cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy the corpus-determined table sizes into the encoder section.
    pub fn resolve(mut self) -> Self {
        self.encoder.phoneme_vocab_size = self.corpus.phoneme_inventory_size;
        self.encoder.num_speakers = self.corpus.num_speakers;
        self.encoder.num_styles = self.corpus.num_styles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            corpus: self.corpus.clone(),
            encoder: self.encoder.clone(),
            predictor: self.predictor.clone(),
            prosody_encoder: self.prosody_encoder.clone(),
            decoder: self.decoder.clone(),
            mask: ProsodyMask::from_names(&self.train.masked_features)?,
        })
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }
}
