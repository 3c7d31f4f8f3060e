//! Checkpoint archives: named f64 arrays with a JSON metadata block, written
//! atomically. Keys are prefixed with the network role (`segnet/...`,
//! `regnet/...`).

use std::io::Read;
use std::path::Path;

use crate::domain::{Param, ParamRole, ParameterSet};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

const MAGIC: &[u8; 8] = b"S4RCKPT1";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub stage: usize,
    pub epoch: usize,
    pub seed: u64,
    pub role: ParamRole,
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, meta: &CheckpointMeta) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    let meta_json = serde_json::to_vec(meta).expect("meta serialization");
    bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let prefix = params.role().as_str();
    for (name, p) in params.iter() {
        let key = format!("{prefix}/{name}");
        bytes.extend_from_slice(&(key.len() as u16).to_le_bytes());
        bytes.extend_from_slice(key.as_bytes());
        bytes.push(p.shape.len() as u8);
        for &d in &p.shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, CheckpointMeta)> {
    let mut file = std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::Malformed("checkpoint truncated".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 8)? != MAGIC {
        return Err(Error::Malformed("not a checkpoint archive".into()));
    }
    let meta_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut at, meta_len)?)
        .map_err(|e| Error::Malformed(format!("checkpoint meta: {e}")))?;
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut params = ParameterSet::new(meta.role);
    let prefix = format!("{}/", meta.role.as_str());
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let key = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| Error::Malformed("checkpoint key encoding".into()))?;
        let name = key
            .strip_prefix(&prefix)
            .ok_or_else(|| Error::Malformed(format!("key '{key}' missing '{prefix}' prefix")))?
            .to_string();
        let ndim = take(&mut at, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut at, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Param::new(shape, data)?);
    }
    Ok((params, meta))
}
