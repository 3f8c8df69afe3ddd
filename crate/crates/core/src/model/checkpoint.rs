//! Checkpoint container:
//!
//! ```text
//! HARPE-CKPT\n
//! <header byte length, decimal>\n
//! <JSON header>
//! <little-endian f32 data>
//! ```
//!
//! The header holds the model config, training state, optional optimiser
//! hyper-parameters and a tensor table whose offsets count `f32` elements
//! from the start of the data. Optimiser moments follow the weights under
//! the names `adam.m.*` and `adam.v.*`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::optim::{AdamHyper, AdamW};
use super::params::{ParamLayout, Params, TensorInfo};
use crate::error::{HarpeError, Result};

const MAGIC: &str = "HARPE-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub tokens_seen: u64,
    /// Stages of the schedule completed so far.
    pub stages_done: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub state: TrainState,
    pub optimizer: Option<AdamW>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    hyper: AdamHyper,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    state: TrainState,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorInfo>,
    n_floats: usize,
}

/// A freshly initialised model at step 0.
pub fn init_model(config: ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let params = Params::init(&config);
    Ok(Checkpoint {
        config,
        params,
        state: TrainState::default(),
        optimizer: None,
    })
}

fn tensor_table(layout: &ParamLayout, with_moments: bool) -> Vec<TensorInfo> {
    let mut table = layout.tensors().to_vec();
    if with_moments {
        for (prefix, shift) in [("adam.m", layout.total()), ("adam.v", 2 * layout.total())] {
            table.extend(layout.tensors().iter().map(|t| TensorInfo {
                name: format!("{prefix}.{}", t.name),
                shape: t.shape.clone(),
                offset: t.offset + shift,
            }));
        }
    }
    table
}

impl Checkpoint {
    /// Hex digest of the weights.
    pub fn id(&self) -> String {
        format!("{:016x}", self.params.checksum())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = self.params.layout();
        let moments = self.optimizer.as_ref();
        let tensors = tensor_table(layout, moments.is_some());
        let n_floats = layout.total() * if moments.is_some() { 3 } else { 1 };
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            state: self.state.clone(),
            optimizer: moments.map(|o| OptimizerHeader {
                hyper: o.hyper,
                step: o.step,
            }),
            tensors,
            n_floats,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 32 + 4 * n_floats);
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "{}", json.len())?;
        out.extend_from_slice(&json);
        let mut push = |xs: &[f32]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        push(self.params.as_slice());
        if let Some(o) = moments {
            push(o.m.as_slice());
            push(o.v.as_slice());
        }
        Ok(out)
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(HarpeError::NotFound(path.to_path_buf()));
        }
        Self::from_reader(BufReader::new(fs::File::open(path)?))
    }

    pub fn from_reader<R: BufRead>(mut r: R) -> Result<Self> {
        let bad = |m: &str| HarpeError::Checkpoint(m.to_string());
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header_len: usize = line
            .trim_end_matches('\n')
            .parse()
            .map_err(|_| bad("malformed header length"))?;
        let mut json = vec![0u8; header_len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let de = &mut serde_json::Deserializer::from_slice(&json);
        let header: Header = serde_path_to_error::deserialize(de).map_err(|e| HarpeError::Schema {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if header.format_version != FORMAT_VERSION {
            return Err(HarpeError::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        header.config.validate()?;
        let layout = Arc::new(ParamLayout::for_config(&header.config));
        let expected = tensor_table(&layout, header.optimizer.is_some());
        if header.tensors != expected {
            return Err(bad("tensor table does not match the config"));
        }
        let copies = if header.optimizer.is_some() { 3 } else { 1 };
        if header.n_floats != copies * layout.total() {
            return Err(bad("float count does not match the tensor table"));
        }
        let mut raw = Vec::with_capacity(4 * header.n_floats);
        r.read_to_end(&mut raw)?;
        if raw.len() != 4 * header.n_floats {
            return Err(HarpeError::Checkpoint(format!(
                "expected {} data bytes, found {}",
                4 * header.n_floats,
                raw.len()
            )));
        }
        let mut floats = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take = || -> Params<f32> {
            let data: Vec<f32> = floats.by_ref().take(layout.total()).collect();
            Params::from_vec(layout.clone(), data).expect("length checked above")
        };
        let params = take();
        let optimizer = header.optimizer.map(|o| AdamW {
            hyper: o.hyper,
            m: take(),
            v: take(),
            step: o.step,
        });
        Ok(Checkpoint {
            config: header.config,
            params,
            state: header.state,
            optimizer,
        })
    }
}
