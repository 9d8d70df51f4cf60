//! GLCK1 checkpoints.
//!
//! ```text
//! "GLCK1\n" | u32 LE header length | JSON header | f32 LE payload
//! ```
//!
//! The header is `{"config": UNetConfig, "blocks": [{"name", "kernel_shape",
//! "bias_len"}]}`. The payload holds each block's kernel then bias, in header
//! order, which must equal the config's canonical block layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, ParamBlock, UNetConfig, UNetError};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"GLCK1\n";

const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockHeader {
    name: String,
    kernel_shape: [usize; 4],
    bias_len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: UNetConfig,
    blocks: Vec<BlockHeader>,
}

fn invalid(msg: impl Into<String>) -> UNetError {
    UNetError::FormatInvalid(msg.into())
}

pub fn encode_checkpoint(config: &UNetConfig, params: &ModelParams<f32>) -> Result<Vec<u8>, UNetError> {
    config.validate()?;
    params.conforms_to(config)?;
    let header = Header {
        config: config.clone(),
        blocks: params
            .blocks
            .iter()
            .map(|b| BlockHeader {
                name: b.name.clone(),
                kernel_shape: b.kernel.shape().as_array(),
                bias_len: b.bias.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + json.len() + 4 * params.num_values());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(UNetConfig, ModelParams<f32>), UNetError> {
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()).ok_or_else(|| invalid("missing GLCK1 magic"))?;
    if rest.len() < 4 {
        return Err(invalid("truncated header length"));
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    if header_len > MAX_HEADER_LEN || header_len > rest.len() - 4 {
        return Err(invalid(format!("header length {header_len} exceeds available bytes")));
    }
    let header: Header =
        serde_json::from_slice(&rest[4..4 + header_len]).map_err(|e| invalid(format!("header: {e}")))?;
    header.config.validate()?;

    let layout = header.config.block_layout();
    if layout.len() != header.blocks.len() {
        return Err(invalid(format!("{} blocks listed, config implies {}", header.blocks.len(), layout.len())));
    }
    for ((name, shape), b) in layout.iter().zip(&header.blocks) {
        if &b.name != name || b.kernel_shape != shape.as_array() || b.bias_len != shape.n {
            return Err(invalid(format!("block {:?} does not match config layout ({name} {shape})", b.name)));
        }
    }

    // Sizes come from a validated config, so they are bounded.
    let total: usize = layout.iter().map(|(_, s)| s.len() + s.n).sum();
    let payload = &rest[4 + header_len..];
    if payload.len() != total * 4 {
        return Err(invalid(format!("payload has {} bytes, expected {}", payload.len(), total * 4)));
    }
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut blocks = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let kernel: Vec<f32> = values.by_ref().take(shape.len()).collect();
        let bias: Vec<f32> = values.by_ref().take(shape.n).collect();
        if kernel.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(invalid(format!("block {name} holds a non-finite value")));
        }
        let kernel = Tensor::from_vec(Shape::new(shape.n, shape.c, shape.h, shape.w), kernel)
            .map_err(|e| invalid(e.to_string()))?;
        blocks.push(ParamBlock { name, kernel, bias });
    }
    Ok((header.config, ModelParams { blocks }))
}

pub fn save_checkpoint(path: &Path, config: &UNetConfig, params: &ModelParams<f32>) -> Result<(), UNetError> {
    let bytes = encode_checkpoint(config, params)?;
    std::fs::write(path, bytes).map_err(|source| UNetError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<(UNetConfig, ModelParams<f32>), UNetError> {
    let bytes = std::fs::read(path).map_err(|source| UNetError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and fails unless it was written for `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &UNetConfig) -> Result<ModelParams<f32>, UNetError> {
    let (config, params) = load_checkpoint(path)?;
    if &config != expected {
        return Err(UNetError::ConfigMismatch(format!(
            "{} holds {}, expected {}",
            path.display(),
            serde_json::to_string(&config).unwrap_or_default(),
            serde_json::to_string(expected).unwrap_or_default()
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::init_params;

    fn small() -> UNetConfig {
        UNetConfig { base_channels: 2, depth: 2, ..Default::default() }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = small();
        let p = init_params(&cfg, 4).unwrap();
        let bytes = encode_checkpoint(&cfg, &p).unwrap();
        let (cfg2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        let a: Vec<u32> = p.values().map(f32::to_bits).collect();
        let b: Vec<u32> = p2.values().map(f32::to_bits).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = small();
        let bytes = encode_checkpoint(&cfg, &init_params(&cfg, 4).unwrap()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(&bytes[..3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_checkpoint(&bad_magic).is_err());
        let mut huge = bytes.clone();
        huge[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_checkpoint(&nan).is_err());
    }

    #[test]
    fn expecting_detects_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.glck");
        let cfg = small();
        save_checkpoint(&path, &cfg, &init_params(&cfg, 1).unwrap()).unwrap();
        assert!(load_checkpoint_expecting(&path, &cfg).is_ok());
        let other = UNetConfig { dropout_p: 0.5, ..cfg };
        assert!(matches!(load_checkpoint_expecting(&path, &other), Err(UNetError::ConfigMismatch(_))));
    }
}
