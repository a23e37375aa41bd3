//! Binary parameter checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (network config, completed stage, training prior, tensor names
//! and shapes), then
//! every tensor row-major as little-endian `f64`, followed by the three
//! learned loss log-variances.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{param_layout, NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::paths::PriorSpec;

const MAGIC: &[u8; 8] = b"CFLOWCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network parameters together with the training state that later stages
/// resume from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: NetParams,
    /// Highest training stage completed, 0 for untrained parameters.
    pub stage: u8,
    /// `log σ_k²` for translation, rotation and conformation.
    pub log_sigma_sq: [f64; 3],
    /// Prior the parameters were trained against.
    pub prior: Option<PriorSpec>,
}

impl Model {
    pub fn new(config: NetConfig) -> Result<Self> {
        let params = super::init_params(&config)?;
        Ok(Model {
            config,
            params,
            stage: 0,
            log_sigma_sq: [0.0; 3],
            prior: None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    stage: u8,
    #[serde(default)]
    prior: Option<PriorSpec>,
    tensors: Vec<TensorHeader>,
}

pub fn write_checkpoint(model: &Model, out: &mut impl Write) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        stage: model.stage,
        prior: model.prior.clone(),
        tensors: model
            .params
            .entries()
            .iter()
            .map(|(n, m)| TensorHeader {
                name: n.clone(),
                shape: [m.nrows(), m.ncols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::numerical(format!("checkpoint header: {e}")))?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, m) in model.params.entries() {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.write_all(&m[(i, j)].to_le_bytes())?;
            }
        }
    }
    for v in model.log_sigma_sq {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn parse_error(message: impl Into<String>) -> Error {
    Error::Parse {
        location: "checkpoint".into(),
        message: message.into(),
    }
}

fn read_f64(input: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b).map_err(|_| parse_error("truncated tensor payload"))?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| parse_error("file too short"))?;
    if &magic != MAGIC {
        return Err(parse_error("not a checkpoint file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4).map_err(|_| parse_error("missing version"))?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(parse_error(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8).map_err(|_| parse_error("missing header length"))?;
    let len = u64::from_le_bytes(b8) as usize;
    if len > 1 << 28 {
        return Err(parse_error("implausible header length"));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(|_| parse_error("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| parse_error(format!("header: {e}")))?;
    header.config.validate()?;

    let layout = param_layout(&header.config)?;
    let listed: Vec<(String, (usize, usize))> =
        header.tensors.iter().map(|t| (t.name.clone(), (t.shape[0], t.shape[1]))).collect();
    if layout != listed {
        return Err(parse_error("tensor list does not match the network configuration"));
    }
    let mut entries = Vec::with_capacity(listed.len());
    for (name, (r, c)) in listed {
        let mut m = DMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                m[(i, j)] = read_f64(input)?;
            }
        }
        entries.push((name, m));
    }
    let mut log_sigma_sq = [0.0; 3];
    for v in log_sigma_sq.iter_mut() {
        *v = read_f64(input)?;
    }
    Ok(Model {
        config: header.config,
        params: NetParams::from_entries(entries),
        stage: header.stage,
        log_sigma_sq,
        prior: header.prior,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
