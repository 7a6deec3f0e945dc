//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `PTENSOR\0` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `h` (`u64`) |
//! | h     | UTF-8 JSON header |
//! | ...   | payload sections, `f32` values |
//!
//! The header holds the model configuration, the seed, the optional training
//! state (epoch, step, best validation score, free-form metadata), the tensor
//! directory (name, rows, cols in declaration order) and the list of payload
//! sections present. Each section stores every tensor of the directory in
//! order, row-major. Sections are `params`, then, when training state is
//! present, `ema`, `adam_m` and `adam_v`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamSet;
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PTENSOR\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const SECTIONS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

/// Optimizer and schedule state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Free-form JSON (training configuration, history).
    pub metadata: serde_json::Value,
    pub ema: ParamSet<f32>,
    pub adam_m: ParamSet<f32>,
    pub adam_v: ParamSet<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamSet<f32>,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    epoch: usize,
    step: u64,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    training: Option<TrainingHeader>,
    tensors: Vec<TensorEntry>,
    sections: Vec<String>,
}

fn write_section<W: Write>(w: &mut W, p: &ParamSet<f32>) -> Result<()> {
    for m in p.values() {
        for &x in m.data() {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

fn read_section<R: Read>(r: &mut R, config: &ModelConfig, dir: &[TensorEntry]) -> Result<ParamSet<f32>> {
    let mut map = IndexMap::with_capacity(dir.len());
    for e in dir {
        let mut data = vec![0f32; e.rows * e.cols];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|err| Error::Checkpoint(format!("truncated payload in {}: {err}", e.name)))?;
        map.insert(e.name.clone(), Matrix::from_vec(e.rows, e.cols, data)?);
    }
    ParamSet::from_tensors(config, map)
}

impl Checkpoint {
    /// Weights used for evaluation: the moving average when training state
    /// is present, the raw parameters otherwise.
    pub fn inference_params(&self) -> &ParamSet<f32> {
        self.training.as_ref().map_or(&self.params, |t| &t.ema)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let sections: Vec<String> = if self.training.is_some() { &SECTIONS[..] } else { &SECTIONS[..1] }
            .iter()
            .map(|s| s.to_string())
            .collect();
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            training: self.training.as_ref().map(|t| TrainingHeader {
                epoch: t.epoch,
                step: t.step,
                best_val: t.best_val,
                best_epoch: t.best_epoch,
                metadata: t.metadata.clone(),
            }),
            tensors: self
                .params
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
            sections,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        write_section(w, &self.params)?;
        if let Some(t) = &self.training {
            write_section(w, &t.ema)?;
            write_section(w, &t.adam_m)?;
            write_section(w, &t.adam_v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()?;
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json)?;
        header.config.validate()?;
        let params = read_section(r, &header.config, &header.tensors)?;
        let training = match header.training {
            Some(t) => {
                if header.sections.len() != SECTIONS.len() {
                    return Err(Error::Checkpoint("training state without optimizer sections".into()));
                }
                Some(TrainingState {
                    epoch: t.epoch,
                    step: t.step,
                    best_val: t.best_val,
                    best_epoch: t.best_epoch,
                    metadata: t.metadata,
                    ema: read_section(r, &header.config, &header.tensors)?,
                    adam_m: read_section(r, &header.config, &header.tensors)?,
                    adam_v: read_section(r, &header.config, &header.tensors)?,
                })
            }
            None => None,
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            params,
            training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(training: bool) -> Checkpoint {
        let config = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ParamSet::init(&config, &mut rng);
        let training = training.then(|| TrainingState {
            epoch: 4,
            step: 120,
            best_val: Some(0.25),
            best_epoch: Some(3),
            metadata: serde_json::json!({"lr": 5e-4}),
            ema: ParamSet::init(&config, &mut rng),
            adam_m: ParamSet::init(&config, &mut rng),
            adam_v: params.zeros_like(),
        });
        Checkpoint {
            config,
            seed: 42,
            params,
            training,
        }
    }

    #[test]
    fn round_trip_with_and_without_training_state() {
        for training in [false, true] {
            let c = sample(training);
            let mut buf = Vec::new();
            c.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample(true);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        sample(false).write_to(&mut buf).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad_magic.as_slice()), Err(Error::Checkpoint(_))));
        let truncated = &buf[..buf.len() - 4];
        assert!(matches!(Checkpoint::read_from(&mut &truncated[..]), Err(Error::Checkpoint(_))));
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(Checkpoint::read_from(&mut trailing.as_slice()).is_err());
        let mut version = buf;
        version[8] = 9;
        assert!(Checkpoint::read_from(&mut version.as_slice()).is_err());
    }
}
