//! Model parameter files: `DADPARAM`, a little-endian `u32` header length,
//! a JSON header, then the weights as little-endian `f32`.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dad_core::model::{Architecture, ModelParams, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::io;

pub const MAGIC: &[u8; 8] = b"DADPARAM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub architecture: Architecture,
    pub lambda: f64,
    pub seed: u64,
    pub n_weights: usize,
    /// Training configuration, when the weights came out of `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

pub fn encode(params: &ModelParams, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    params.validate()?;
    let header = Header {
        version: VERSION,
        architecture: params.arch.clone(),
        lambda: params.lambda,
        seed: params.seed,
        n_weights: params.weights.len(),
        train: train.copied(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.weights.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(json.len())?.to_le_bytes());
    out.extend_from_slice(&json);
    for w in &params.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, Header)> {
    ensure!(bytes.len() >= 12 && &bytes[..8] == MAGIC, "not a parameter file");
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    ensure!(body.len() >= len, "truncated parameter header");
    let header: Header = serde_json::from_slice(&body[..len]).context("parameter header")?;
    if header.version != VERSION {
        bail!("unsupported parameter file version {} (expected {VERSION})", header.version);
    }
    let payload = &body[len..];
    ensure!(
        payload.len() == 4 * header.n_weights,
        "weight payload has {} bytes, expected {}",
        payload.len(),
        4 * header.n_weights
    );
    let weights = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let params = ModelParams {
        arch: header.architecture.clone(),
        weights,
        lambda: header.lambda,
        seed: header.seed,
    };
    params.validate()?;
    Ok((params, header))
}

pub fn save_params(path: &Path, params: &ModelParams, train: Option<&TrainConfig>) -> Result<()> {
    io::write_atomic(path, &encode(params, train)?)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    Ok(load_with_header(path)?.0)
}

pub fn load_with_header(path: &Path) -> Result<(ModelParams, Header)> {
    decode(&io::read(path)?).with_context(|| format!("loading {}", path.display()))
}
