//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `HCDCKPT1`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, the raw
//! `f64` little-endian payload (weights, then Adam first and second
//! moments, each in header order), and a 32-byte SHA-256 of every preceding
//! byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointFault, Error, Result};
use crate::network::{ModelConfig, NetworkWeights};
use crate::tensor::{Shape, Tensor};
use crate::train::{MetricRow, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"HCDCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    fingerprint: String,
    step: u64,
    seed: u64,
    history: Vec<MetricRow>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// [`fingerprint`] of the configuration that produced it.
    pub fingerprint: String,
    pub state: TrainState,
}

/// Hex SHA-256 of the canonical JSON of the model and training
/// configuration.
pub fn fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let body = serde_json::json!({ "model": model, "train": train });
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

pub fn save_checkpoint(path: &Path, model: &ModelConfig, train: &TrainConfig, state: &TrainState) -> Result<()> {
    let header = Header {
        model: model.clone(),
        train: train.clone(),
        fingerprint: fingerprint(model, train),
        step: state.step,
        seed: state.seed,
        history: state.history.clone(),
        tensors: state
            .weights
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().as_array(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n = state.weights.param_count();
    let mut buf = Vec::with_capacity(PREFIX + json.len() + 24 * n + DIGEST);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for set in [&state.weights, &state.adam_m, &state.adam_v] {
        for t in set.tensors() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so an interrupted save never leaves a torn file
    // under the final name.
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|(kind, reason)| Error::checkpoint(path, kind, reason))
}

fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, (CheckpointFault, String)> {
    use CheckpointFault::*;
    let len = bytes.len();
    if len < MAGIC.len() {
        return Err((Truncated, format!("{len} bytes is shorter than the magic")));
    }
    if &bytes[..8] != MAGIC {
        return Err((Malformed, "not a checkpoint (bad magic)".into()));
    }
    if len < 12 {
        return Err((Truncated, "file ends inside the version field".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err((VersionMismatch, format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    if len < PREFIX {
        return Err((Truncated, "file ends inside the header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREFIX))
        .ok_or((Malformed, format!("header length {header_len} is not addressable")))?;
    if len < header_end + DIGEST {
        return Err((Truncated, format!("{len} bytes but the header alone needs {}", header_end + DIGEST)));
    }
    let digest_ok = || Sha256::digest(&bytes[..len - DIGEST]).as_slice() == &bytes[len - DIGEST..];
    let header: Header = match serde_json::from_slice(&bytes[PREFIX..header_end]) {
        Ok(h) => h,
        Err(e) if digest_ok() => return Err((Malformed, format!("header: {e}"))),
        Err(_) => return Err((Integrity, "checksum mismatch".into())),
    };
    let shapes: Vec<Shape> = header.tensors.iter().map(|t| Shape::new(t.shape[0], t.shape[1], t.shape[2], t.shape[3])).collect();
    let expected = shapes
        .iter()
        .try_fold(0usize, |acc, s| {
            s.as_array().iter().try_fold(1usize, |p, &d| p.checked_mul(d)).and_then(|l| acc.checked_add(l))
        })
        .and_then(|count| count.checked_mul(24))
        .and_then(|b| b.checked_add(header_end + DIGEST))
        .ok_or((Malformed, "tensor sizes overflow".to_string()))?;
    if len < expected {
        return Err((Truncated, format!("{len} bytes, expected {expected}")));
    }
    if len > expected {
        return Err((Malformed, format!("{} trailing bytes", len - expected)));
    }
    if !digest_ok() {
        return Err((Integrity, "checksum mismatch".into()));
    }
    let mut values = bytes[header_end..len - DIGEST]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read_set = || {
        let entries = header
            .tensors
            .iter()
            .zip(&shapes)
            .map(|(e, &s)| {
                let data: Vec<f64> = values.by_ref().take(s.len()).collect();
                (e.name.clone(), Tensor::from_vec(s, data).expect("length matches shape"))
            })
            .collect();
        NetworkWeights::from_entries(entries)
    };
    let weights = read_set();
    let adam_m = read_set();
    let adam_v = read_set();
    Ok(Checkpoint {
        state: TrainState {
            step: header.step,
            weights,
            adam_m,
            adam_v,
            seed: header.seed,
            history: header.history,
        },
        model: header.model,
        train: header.train,
        fingerprint: header.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Hdn;

    fn sample() -> (ModelConfig, TrainConfig, TrainState) {
        let model = ModelConfig::toy(2, 1);
        let net = Hdn::new(model.clone()).unwrap();
        let mut state = TrainState::new(net.init_weights(), 3);
        state.step = 4;
        state.adam_m.tensors_mut().for_each(|t| t.data_mut().fill(0.25));
        state.adam_v.tensors_mut().for_each(|t| t.data_mut().fill(1e-300));
        state.history.push(MetricRow {
            step: 4,
            lr: 1e-4,
            char: Some(0.1 + 0.2),
            hcl: None,
            total: Some(f64::MIN_POSITIVE),
            val_psnr: None,
            wall_ms: 9,
        });
        (model, TrainConfig::default(), state)
    }

    fn fault(bytes: &[u8]) -> CheckpointFault {
        decode(bytes).err().expect("must fail").0
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.ckpt");
        let (m, t, s) = sample();
        save_checkpoint(&p, &m, &t, &s).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.state, s);
        assert_eq!(ck.model, m);
        assert_eq!(ck.fingerprint, fingerprint(&m, &t));
    }

    #[test]
    fn faults_are_classified() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let (m, t, s) = sample();
        save_checkpoint(&p, &m, &t, &s).unwrap();
        let good = std::fs::read(&p).unwrap();

        for cut in [3, 10, 15, 40, good.len() - 1] {
            assert_eq!(fault(&good[..cut]), CheckpointFault::Truncated, "cut at {cut}");
        }
        let mut v = good.clone();
        v[8] = 2;
        assert_eq!(fault(&v), CheckpointFault::VersionMismatch);
        let mut v = good.clone();
        v[0] = b'X';
        assert_eq!(fault(&v), CheckpointFault::Malformed);
        let last = good.len() - 40;
        let mut v = good.clone();
        v[last] ^= 1;
        assert_eq!(fault(&v), CheckpointFault::Integrity);
        let mut v = good.clone();
        v[PREFIX + 1] ^= 0x40;
        assert_eq!(fault(&v), CheckpointFault::Integrity);

        std::fs::write(&p, &v).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("integrity"), "{err}");
    }
}
