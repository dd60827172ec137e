//! Checkpoint files: a header line carrying the format version and a SHA-256
//! of the body, followed by the JSON body.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::StageRecord;
use crate::netcore::LayerSpec;
use crate::strategies::TrainState;

use super::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "RAWMCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub label: String,
    pub seed: u64,
    pub specs: Vec<LayerSpec>,
    /// Weights, projectors, teacher, EWC anchor and `dataset_index`.
    pub state: TrainState,
    /// Stages evaluated so far.
    pub history: Vec<StageRecord>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_string(self)?;
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        let mut out = format!("{MAGIC} {CHECKPOINT_VERSION} {digest}\n").into_bytes();
        out.extend_from_slice(body.as_bytes());
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Integrity("checkpoint is not UTF-8".into()))?;
        let (header, rest) = text
            .split_once('\n')
            .ok_or_else(|| Error::Integrity("missing checkpoint header".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(MAGIC) {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version: u32 = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Integrity("unreadable checkpoint version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let digest = fields
            .next()
            .ok_or_else(|| Error::Integrity("missing checksum".into()))?;
        let body = rest
            .strip_suffix('\n')
            .ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        if hex::encode(Sha256::digest(body.as_bytes())) != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let ckpt: Checkpoint =
            serde_json::from_str(body).map_err(|e| Error::Integrity(format!("undecodable body: {e}")))?;
        if ckpt.specs != ckpt.state.net.specs() {
            return Err(Error::Integrity("layer specs disagree with stored weights".into()));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{init_network, Activation};
    use crate::strategies::StrategyConfig;

    fn sample() -> Checkpoint {
        let specs = vec![
            LayerSpec::new(3, 4, Activation::Tanh),
            LayerSpec::new(4, 2, Activation::SoftmaxOutput),
        ];
        let net = init_network(&specs, 9).unwrap();
        let mut state = TrainState::new(net, &StrategyConfig::default()).unwrap();
        state.dataset_index = 1;
        Checkpoint {
            label: "rawm".into(),
            seed: 9,
            specs,
            state,
            history: vec![StageRecord {
                name: "S".into(),
                trained: vec![0],
                values: vec![Some(0.1), None],
            }],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ckpt = sample();
        save_checkpoint(&ckpt, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let i = bytes.len() - 20;
        flipped[i] = if flipped[i] == b'1' { b'2' } else { b'1' };
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let text = String::from_utf8(sample().to_bytes().unwrap()).unwrap();
        let bumped = text.replacen("RAWMCKPT 1 ", "RAWMCKPT 2 ", 1);
        assert!(matches!(
            Checkpoint::from_bytes(bumped.as_bytes()),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }
}
