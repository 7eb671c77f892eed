//! Versioned binary checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a u64
//! header length, a JSON header (spec fields plus the buffer manifest with
//! names and shapes and a SHA-256 of the payload), then the payload: raw
//! little-endian f32 parameter and BN-running-statistic buffers in manifest
//! order.
//!
//! A separate sidecar ([`save_train_state`]) carries the optimizer
//! velocities and epoch counter so an interrupted run can resume bitwise.

use crate::error::{Error, Result};
use crate::model::{Network, NetworkSpec};
use crate::optim::OptimizerState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SDNET\0CK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: NetworkSpec,
    manifest: Vec<ManifestEntry>,
    payload_len: u64,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every stateful buffer of a network in a fixed order: all parameters,
/// then all BN running statistics.
fn collect_buffers(net: &Network) -> Vec<(String, String, Vec<f32>)> {
    let mut out = Vec::new();
    net.visit_params(&mut |p| {
        out.push((p.name.clone(), "param".to_string(), p.value.data().to_vec()));
    });
    net.visit_running_stats(&mut |name, mean, var| {
        out.push((format!("{name}.running_mean"), "running_mean".to_string(), mean.to_vec()));
        out.push((format!("{name}.running_var"), "running_var".to_string(), var.to_vec()));
    });
    out
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let buffers = collect_buffers(net);
    let mut payload = Vec::new();
    for (_, _, data) in &buffers {
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: VERSION,
        spec: net.spec,
        manifest: buffers
            .iter()
            .map(|(name, kind, data)| ManifestEntry {
                name: name.clone(),
                kind: kind.clone(),
                len: data.len(),
            })
            .collect(),
        payload_len: payload.len() as u64,
        sha256: hex(&Sha256::digest(&payload)),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&payload)?;
    Ok(())
}

/// Reads a checkpoint back into a freshly built network.
pub fn load(path: &Path) -> Result<Network> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Checkpoint("file too short for header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("header parse failed: {e}")))?;
    let payload = &bytes[header_end..];
    if payload.len() as u64 != header.payload_len {
        return Err(Error::Checkpoint(format!(
            "payload length {} does not match header {}",
            payload.len(),
            header.payload_len
        )));
    }
    if hex(&Sha256::digest(payload)) != header.sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }

    // The seed is irrelevant: every buffer is overwritten below.
    let mut net = Network::build(header.spec, &mut ChaCha8Rng::seed_from_u64(0))?;

    let expected = collect_buffers(&net);
    if expected.len() != header.manifest.len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} buffers, network needs {}",
            header.manifest.len(),
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(header.manifest.len());
    let mut offset = 0usize;
    for (entry, (name, kind, data)) in header.manifest.iter().zip(&expected) {
        if &entry.name != name || &entry.kind != kind || entry.len != data.len() {
            return Err(Error::Checkpoint(format!(
                "manifest entry {}/{} (len {}) does not match network buffer {}/{} (len {})",
                entry.name,
                entry.kind,
                entry.len,
                name,
                kind,
                data.len()
            )));
        }
        let end = offset + 4 * entry.len;
        if end > payload.len() {
            return Err(Error::Checkpoint("payload shorter than manifest".into()));
        }
        let buf: Vec<f32> = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(buf);
        offset = end;
    }
    if offset != payload.len() {
        return Err(Error::Checkpoint("payload longer than manifest".into()));
    }

    let mut iter = values.into_iter();
    net.visit_params_mut(&mut |p| {
        p.value.data_mut().copy_from_slice(&iter.next().expect("param buffer"));
    });
    net.visit_running_stats_mut(&mut |mean, var| {
        mean.copy_from_slice(&iter.next().expect("mean buffer"));
        var.copy_from_slice(&iter.next().expect("var buffer"));
    });
    Ok(net)
}

#[derive(Serialize, Deserialize)]
struct TrainStateFile {
    version: u32,
    next_epoch: usize,
    velocity: Vec<Vec<f64>>,
}

/// Writes the optimizer state needed to continue training after `epoch`.
pub fn save_train_state(path: &Path, next_epoch: usize, state: &OptimizerState) -> Result<()> {
    let file = TrainStateFile {
        version: VERSION,
        next_epoch,
        velocity: state.velocity.clone(),
    };
    let bytes = serde_json::to_vec(&file)
        .map_err(|e| Error::Checkpoint(format!("train state serialization failed: {e}")))?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads back a training-state sidecar: (next_epoch, optimizer state).
pub fn load_train_state(path: &Path) -> Result<(usize, OptimizerState)> {
    let bytes = fs::read(path)?;
    let file: TrainStateFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("train state parse failed: {e}")))?;
    if file.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported train-state version {}",
            file.version
        )));
    }
    Ok((file.next_epoch, OptimizerState { velocity: file.velocity }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{pinned_gates, Mode, VariantKind};
    use crate::tape::Tape;
    use crate::tensor::{Shape, Tensor};
    use rand::Rng;

    fn toy_network(seed: u64) -> Network {
        let spec = NetworkSpec::new(VariantKind::PyramidSepDrop, 8, 5.0, 0.5, 10);
        Network::build(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn logits(net: &mut Network, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * 3 * 32 * 32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let x = Tensor::from_vec(Shape::new(2, 3, 32, 32), data).unwrap();
        net.set_mode(Mode::Inference);
        let gates = pinned_gates(&net.survival, 0);
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &x, &gates).unwrap();
        tape.value(pass.logits).data().to_vec()
    }

    #[test]
    fn round_trip_reproduces_logits_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut net = toy_network(42);
        // Move running stats off their initial values first.
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..2 * 3 * 32 * 32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let x = Tensor::from_vec(Shape::new(2, 3, 32, 32), data).unwrap();
        let gates = pinned_gates(&net.survival, 0);
        net.forward(&mut tape, &x, &gates).unwrap();

        save(&net, &path).unwrap();
        let mut loaded = load(&path).unwrap();
        assert!(net.params_bitwise_equal(&loaded));
        assert_eq!(logits(&mut net, 9), logits(&mut loaded, 9));
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = toy_network(7);
        save(&net, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn train_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let state = OptimizerState {
            velocity: vec![vec![0.125, -3.5], vec![1.0 / 3.0]],
        };
        save_train_state(&path, 17, &state).unwrap();
        let (epoch, loaded) = load_train_state(&path).unwrap();
        assert_eq!(epoch, 17);
        assert_eq!(loaded.velocity, state.velocity);
    }
}
