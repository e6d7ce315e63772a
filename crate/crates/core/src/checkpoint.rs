//! Checkpoint files.
//!
//! ```text
//! magic "TALLYCKP" | u32 LE version | u64 LE manifest length | manifest JSON
//! | u64 LE value count | f64 LE values
//! ```
//!
//! The values are the network parameters, the momentum buffers and the
//! prototype bank (committed values and running sums), in that order.
//! Integer and RNG state lives in the manifest. Restoring a checkpoint and
//! continuing training reproduces an uninterrupted run bit for bit.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::prototypes::{BankLayout, PrototypeBank};
use crate::tensor::Tensor;
use crate::training::{EpochLog, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"TALLYCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Format(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Format(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub epoch_loss_sum: f64,
    pub rng: RngState,
    pub bank: BankLayout,
    pub log: Vec<EpochLog>,
    /// SHA-256 of the value blob.
    pub blob_sha256: String,
}

fn blob_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * values.len());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut values: Vec<f64> = Vec::new();
    for t in state.network.parameters().iter().chain(&state.velocity) {
        values.extend_from_slice(t.data());
    }
    values.extend(state.bank.to_flat());
    let blob = blob_bytes(&values);
    let manifest = CheckpointManifest {
        network: state.network.config().clone(),
        train: state.config.clone(),
        seed: state.config.seed,
        epoch: state.epoch,
        step_in_epoch: state.step_in_epoch,
        global_step: state.global_step,
        epoch_loss_sum: state.epoch_loss_sum,
        rng: RngState::capture(&state.rng),
        bank: state.bank.layout(),
        log: state.log.clone(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decode a checkpoint. With `expected`, a different network configuration is
/// an error rather than a silent reinterpretation of the parameters.
pub fn decode(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("manifest length".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(r.take(len)?)?;
    if let Some(exp) = expected {
        if *exp != manifest.network {
            return Err(Error::Config(format!(
                "checkpoint network {:?} does not match requested {:?}",
                manifest.network, exp
            )));
        }
    }
    manifest.network.validate()?;
    let blob = &bytes[r.pos..];
    if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
        return Err(Error::Format("checkpoint value blob is corrupt".into()));
    }
    let count = usize::try_from(r.u64()?).map_err(|_| Error::Format("value count".into()))?;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("value count".into()))?)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint values".into()));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();

    let shapes = manifest.network.parameter_shapes();
    let param_len: usize = manifest.network.parameter_count();
    let bank_len = PrototypeBank::flat_len(&manifest.bank);
    if values.len() != 2 * param_len + bank_len {
        return Err(Error::Format(format!(
            "checkpoint holds {} values, layout needs {}",
            values.len(),
            2 * param_len + bank_len
        )));
    }
    let mut cursor = 0;
    let mut next_tensors = || -> Result<Vec<Tensor>> {
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), values[cursor..cursor + n].to_vec());
                cursor += n;
                t
            })
            .collect()
    };
    let params = next_tensors()?;
    let velocity = next_tensors()?;
    let network = Network::from_parameters(manifest.network.clone(), params)?;
    let bank = PrototypeBank::from_flat(&manifest.bank, &values[2 * param_len..])?;
    Ok(TrainState {
        config: manifest.train,
        network,
        bank,
        velocity,
        epoch: manifest.epoch,
        step_in_epoch: manifest.step_in_epoch,
        global_step: manifest.global_step,
        rng: manifest.rng.restore()?,
        epoch_loss_sum: manifest.epoch_loss_sum,
        log: manifest.log,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, expected: Option<&NetworkConfig>) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, DatasetSpec};
    use crate::training::Trainer;

    fn setup() -> (crate::synthdata::Dataset, NetworkConfig, TrainConfig) {
        let spec = DatasetSpec {
            head_count: 10,
            image_side: 6,
            channels: 2,
            imbalance_ratio: 3.0,
            ..DatasetSpec::new(3, 2)
        };
        let train = generate(&spec).unwrap().train;
        let net = NetworkConfig {
            hidden_channels: 3,
            image_side: 6,
            ..NetworkConfig::new(2, 3)
        };
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 3,
            steps_per_epoch: 3,
            warm_start_epochs: 1,
            ..TrainConfig::default()
        };
        (train, net, cfg)
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (train, net, cfg) = setup();
        let mut full = Trainer::new(&train, None, net.clone(), cfg.clone()).unwrap();
        full.run().unwrap();

        let mut first = Trainer::new(&train, None, net.clone(), cfg).unwrap();
        for _ in 0..5 {
            first.step().unwrap();
        }
        let bytes = encode(first.state()).unwrap();
        let restored = decode(&bytes, Some(&net)).unwrap();
        let mut second = Trainer::resume(&train, None, restored).unwrap();
        second.run().unwrap();

        let (a, b) = (full.state(), second.state());
        assert_eq!(a.network, b.network);
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.log, b.log);
        assert_eq!(a.global_step, b.global_step);
    }

    #[test]
    fn mismatched_network_is_an_error() {
        let (train, net, cfg) = setup();
        let t = Trainer::new(&train, None, net.clone(), cfg).unwrap();
        let bytes = encode(t.state()).unwrap();
        let other = NetworkConfig { hidden_channels: 4, ..net };
        assert!(matches!(decode(&bytes, Some(&other)), Err(Error::Config(_))));
    }

    #[test]
    fn corruption_is_detected() {
        let (train, net, cfg) = setup();
        let t = Trainer::new(&train, None, net, cfg).unwrap();
        let mut bytes = encode(t.state()).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x10;
        assert!(matches!(decode(&bytes, None), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..20], None), Err(Error::Format(_))));
        let mut wrong_version = encode(t.state()).unwrap();
        wrong_version[8] = 9;
        assert!(matches!(decode(&wrong_version, None), Err(Error::Version { .. })));
    }

    #[test]
    fn file_round_trip() {
        let (train, net, cfg) = setup();
        let mut t = Trainer::new(&train, None, net, cfg).unwrap();
        t.step().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(t.state(), &path).unwrap();
        let back = load(&path, None).unwrap();
        assert_eq!(back.network, t.state().network);
        assert_eq!(back.velocity, t.state().velocity);
    }
}
