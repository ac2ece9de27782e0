//! Checkpoint format: one line of JSON, a newline, then the parameters as
//! little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mlp, MlpConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub architecture: MlpConfig,
    pub arch_hash: String,
    pub seed: u64,
    pub schedule_hash: String,
    pub param_count: usize,
}

pub fn save_checkpoint(path: &Path, net: &Mlp, seed: u64, schedule_hash: &str) -> Result<()> {
    let header = CheckpointHeader {
        architecture: net.config().clone(),
        arch_hash: net.config().digest(),
        seed,
        schedule_hash: schedule_hash.to_string(),
        param_count: net.param_count(),
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    buf.push(b'\n');
    buf.reserve(net.param_count() * 8);
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, requiring its architecture hash to equal `expected`
/// when given.
pub fn load_checkpoint(path: &Path, expected: Option<&MlpConfig>) -> Result<(Mlp, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format { offset: bytes.len(), msg: "missing header terminator".into() })?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format { offset: 0, msg: e.to_string() })?;
    if header.arch_hash != header.architecture.digest() {
        return Err(Error::Format { offset: 0, msg: "architecture hash does not match header".into() });
    }
    if let Some(cfg) = expected {
        if cfg.digest() != header.arch_hash {
            return Err(Error::Format { offset: 0, msg: "checkpoint architecture differs from the requested one".into() });
        }
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != header.param_count * 8 {
        return Err(Error::Format {
            offset: nl + 1,
            msg: format!("expected {} parameter bytes, found {}", header.param_count * 8, blob.len()),
        });
    }
    let params = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    let mut net = Mlp::zeros(header.architecture.clone())?;
    net.set_params(params)?;
    Ok((net, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random;

    fn cfg(h: usize) -> MlpConfig {
        MlpConfig { dim: 2, hidden: vec![h], time_features: 2, cond_features: 1, labels: vec![], prediction: Default::default() }
    }

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = Mlp::init(cfg(5), &mut random::rng(1)).unwrap();
        save_checkpoint(&path, &net, 1, "abc").unwrap();
        let (back, header) = load_checkpoint(&path, Some(&cfg(5))).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(header.seed, 1);
        assert!(load_checkpoint(&path, Some(&cfg(6))).is_err());
    }
}
