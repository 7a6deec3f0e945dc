//! Run configuration files: a `[model]` and an optional `[train]` section of
//! `key = value` lines, plus `section.key=value` command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn invalid(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back to
/// a bare string (`readout=painn_readout`).
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn is_train_key(key: &str) -> bool {
    let defaults = Value::try_from(TrainConfig::default()).expect("serializable");
    key == "grad_clip" || defaults.as_table().is_some_and(|t| t.contains_key(key))
}

/// Applies `section.key=value` to `table`; a key without a section goes to
/// `[train]` when it names a training option, `[model]` otherwise.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (s.to_string(), f.to_string()),
        None => (
            if is_train_key(key) { "train" } else { "model" }.to_string(),
            key.to_string(),
        ),
    };
    if section != "model" && section != "train" {
        return Err(invalid(format!("unknown section `{section}` in override `{spec}`")));
    }
    let entry = table
        .entry(section)
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| invalid("section is not a table"))?;
    entry.insert(field, parse_value(value));
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(invalid)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = Value::Table(table).try_into().map_err(invalid)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(invalid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Readout;

    const TOY: &str = "[model]\nc_s = 32\nc_v = 8\nc_t = 8\nlayers = 3\nhidden = 32\ncutoff = 5.0\nnum_rbf = 8\nvv = true\nsym = true\ntl = true\nlora = true\nlora_rank = 4\navg_neighbors = 4.0\nreadout = \"tensor_channel\"\n\n[train]\nepochs = 5\n";

    #[test]
    fn parses_sections_and_defaults() {
        let c = RunConfig::parse(TOY, &[]).unwrap();
        assert_eq!(c.model, ModelConfig::toy());
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn overrides_win() {
        let o = ["model.vv=false", "rr=true", "train.lr=1e-3", "batch_size = 4"].map(String::from);
        let c = RunConfig::parse(TOY, &o).unwrap();
        assert!(c.model.rr && !c.model.vv);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn bare_string_override() {
        let o = ["model.c_t=0", "model.vv=false", "sym=false", "tl=false", "lora=false", "readout=painn_readout"].map(String::from);
        let c = RunConfig::parse(TOY, &o).unwrap();
        assert_eq!(c.model.readout, Readout::PainnReadout);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("[model]\nc_s = 32\n", &[]), Err(Error::InvalidConfig(_))));
        assert!(RunConfig::parse(TOY, &["model.bogus=1".into()]).is_err());
        assert!(RunConfig::parse(TOY, &["nokey".into()]).is_err());
        assert!(RunConfig::parse(TOY, &["other.x=1".into()]).is_err());
        assert!(RunConfig::parse(TOY, &["model.c_t=0".into()]).is_err());
        assert!(RunConfig::parse("[model\n", &[]).is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::parse(TOY, &[]).unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap(), &[]).unwrap(), c);
    }
}
