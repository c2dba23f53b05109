//! Checkpoint files: a one-line textual header (JSON model config + value
//! count) followed by raw little-endian 64-bit values, student parameters
//! first, then teacher, in flatten order. Round-trips bit-exactly.

use std::io::{Read as _, Write as _};
use std::path::Path;

use thiserror::Error;

use crate::model::{DualModel, ModelConfig, ModelParams};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint payload has {0} values, expected {1}")]
    WrongLength(usize, usize),
}

pub fn save(path: &Path, cfg: &ModelConfig, model: &DualModel) -> Result<(), CheckpointError> {
    let count = model.student.param_count();
    let header = format!(
        "minivlp-checkpoint v1 values={} config={}\n",
        2 * count,
        serde_json::to_string(cfg).expect("config serializes")
    );
    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(2 * count * 8);
    for params in [&model.student, &model.teacher] {
        for t in params.flatten() {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, DualModel), CheckpointError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Header("missing newline".into()))?;
    let header = std::str::from_utf8(&raw[..nl])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let json = header
        .split_once("config=")
        .map(|(_, j)| j)
        .ok_or_else(|| CheckpointError::Header("missing config field".into()))?;
    let cfg: ModelConfig =
        serde_json::from_str(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    cfg.validate().map_err(CheckpointError::Header)?;
    let declared: usize = header
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("values="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Header("missing values field".into()))?;

    let payload = &raw[nl + 1..];
    if payload.len() != declared * 8 {
        return Err(CheckpointError::WrongLength(payload.len() / 8, declared));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));

    let mut fill = |params: &mut ModelParams| -> Result<(), CheckpointError> {
        for t in params.flatten_mut() {
            for v in t.data_mut() {
                *v = values
                    .next()
                    .ok_or(CheckpointError::WrongLength(declared, declared))?;
            }
        }
        Ok(())
    };
    let mut model = DualModel::init(&cfg, 0);
    let expected = 2 * model.student.param_count();
    if declared != expected {
        return Err(CheckpointError::WrongLength(declared, expected));
    }
    fill(&mut model.student)?;
    fill(&mut model.teacher)?;
    Ok((cfg, model))
}
