//! Checkpoint container: `"S3DC"`, u32 LE version, u64 LE manifest length,
//! UTF-8 JSON manifest, u64 LE blob length, little-endian f32 blob.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::params::Component;
use crate::tensor::{Shape5, Tensor5};

use super::{build_network, Network, NetworkConfig};

const MAGIC: &[u8; 4] = b"S3DC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 5],
    pub component: Component,
    /// Byte offset into the blob.
    pub offset: u64,
}

impl TensorRecord {
    pub fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

/// Enough to rebuild a `ChaCha8Rng` at the exact same position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Free-form run configuration (e.g. the resolved training config).
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    network: NetworkConfig,
    fingerprint: String,
    meta: TrainingMeta,
    params: Vec<TensorRecord>,
    momentum: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    manifest: Manifest,
    params: Vec<Tensor5<f32>>,
    momentum: Vec<Tensor5<f32>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical JSON encoding of a network config.
pub fn config_fingerprint(config: &NetworkConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex(&Sha256::digest(&json))
}

fn record(name: &str, t: &Tensor5<f32>, component: Component, offset: &mut u64) -> TensorRecord {
    let r = TensorRecord {
        name: name.to_string(),
        shape: t.shape().0,
        component,
        offset: *offset,
    };
    *offset += r.byte_len();
    r
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, meta: TrainingMeta, optimizer: Option<&OptimizerState<f32>>) -> Result<Self> {
        let mut offset = 0;
        let mut records = Vec::new();
        let mut params = Vec::new();
        for p in net.params().iter() {
            records.push(record(&p.name, &p.value, p.component, &mut offset));
            params.push(p.value.clone());
        }
        let mut mom_records = Vec::new();
        let mut momentum = Vec::new();
        if let Some(opt) = optimizer {
            opt.check(net.params())?;
            for (p, b) in net.params().iter().zip(&opt.buffers) {
                mom_records.push(record(&p.name, b, p.component, &mut offset));
                momentum.push(b.clone());
            }
        }
        Ok(Checkpoint {
            manifest: Manifest {
                fingerprint: config_fingerprint(net.config()),
                network: net.config().clone(),
                meta,
                params: records,
                momentum: mom_records,
            },
            params,
            momentum,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.manifest.network
    }
    pub fn meta(&self) -> &TrainingMeta {
        &self.manifest.meta
    }
    pub fn records(&self) -> &[TensorRecord] {
        &self.manifest.params
    }
    pub fn has_momentum(&self) -> bool {
        !self.momentum.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<(&TensorRecord, &Tensor5<f32>)> {
        let i = self.manifest.params.iter().position(|r| r.name == name)?;
        Some((&self.manifest.params[i], &self.params[i]))
    }

    /// Swaps in a tensor of possibly different shape, e.g. an adapted stem.
    pub fn replace_tensor(&mut self, name: &str, value: Tensor5<f32>) -> Result<()> {
        let i = self
            .manifest
            .params
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("no tensor named {name}")))?;
        self.manifest.params[i].shape = value.shape().0;
        self.params[i] = value;
        if self.has_momentum() {
            // Buffers no longer line up with the adapted tensor.
            self.manifest.momentum.clear();
            self.momentum.clear();
        }
        self.relayout();
        Ok(())
    }

    fn relayout(&mut self) {
        let mut offset = 0;
        for r in self.manifest.params.iter_mut().chain(self.manifest.momentum.iter_mut()) {
            r.offset = offset;
            offset += r.byte_len();
        }
    }

    /// Rebuilds the network, checking every tensor against the config topology.
    pub fn to_network(&self) -> Result<Network<f32>> {
        let mut net = build_network::<f32>(&self.manifest.network)?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    /// Copies every parameter into `net`; names, order and shapes must match exactly.
    pub fn load_into(&self, net: &mut Network<f32>) -> Result<()> {
        if net.params().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count drift: checkpoint {}, network {}",
                self.params.len(),
                net.params().len()
            )));
        }
        for (p, r) in net.params().iter().zip(&self.manifest.params) {
            if p.name != r.name || p.value.shape().0 != r.shape || p.component != r.component {
                return Err(Error::Checkpoint(format!(
                    "tensor drift at {}: checkpoint {} {:?}, network {} {}",
                    r.name,
                    r.name,
                    r.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, v) in net.params_mut().iter_mut().zip(&self.params) {
            p.value = v.clone();
        }
        Ok(())
    }

    /// Momentum buffers for resuming, if the checkpoint carries them.
    pub fn optimizer_buffers(&self) -> Option<&[Tensor5<f32>]> {
        self.has_momentum().then_some(self.momentum.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let blob_len: u64 = self
            .manifest
            .params
            .iter()
            .chain(&self.manifest.momentum)
            .map(TensorRecord::byte_len)
            .sum();
        let mut out = Vec::with_capacity(24 + manifest.len() + blob_len as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob_len.to_le_bytes());
        for t in self.params.iter().chain(&self.momentum) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mlen = cur.u64()? as usize;
        let manifest: Manifest = serde_json::from_slice(cur.take(mlen)?)
            .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
        let blob_len = cur.u64()?;
        let blob = cur.take(blob_len as usize)?;
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        let fp = config_fingerprint(&manifest.network);
        if fp != manifest.fingerprint {
            return Err(Error::Checkpoint(format!(
                "config fingerprint mismatch: stored {}, computed {fp}",
                manifest.fingerprint
            )));
        }
        validate_layout(&manifest, blob_len)?;
        let read = |r: &TensorRecord| -> Result<Tensor5<f32>> {
            let start = r.offset as usize;
            let raw = &blob[start..start + r.byte_len() as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor5::from_vec(Shape5(r.shape), data)
        };
        let params = manifest.params.iter().map(read).collect::<Result<Vec<_>>>()?;
        let momentum = manifest.momentum.iter().map(read).collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            manifest,
            params,
            momentum,
        })
    }
}

/// Offsets must tile `[0, blob_len)` exactly: aligned, non-overlapping, no gaps.
fn validate_layout(m: &Manifest, blob_len: u64) -> Result<()> {
    if !m.momentum.is_empty() && m.momentum.len() != m.params.len() {
        return Err(Error::Checkpoint(format!(
            "momentum entries {} do not match parameters {}",
            m.momentum.len(),
            m.params.len()
        )));
    }
    let mut spans: Vec<(u64, u64, &str)> = m
        .params
        .iter()
        .chain(&m.momentum)
        .map(|r| (r.offset, r.byte_len(), r.name.as_str()))
        .collect();
    spans.sort_unstable();
    let mut next = 0u64;
    for (offset, len, name) in spans {
        if offset != next {
            let what = if offset < next { "overlaps" } else { "leaves a gap before" };
            return Err(Error::Checkpoint(format!("tensor {name} at offset {offset} {what} byte {next}")));
        }
        next = offset + len;
    }
    if next != blob_len {
        return Err(Error::Checkpoint(format!("manifest covers {next} bytes, blob has {blob_len}")));
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> (Network<f32>, Checkpoint) {
        let net = build_network::<f32>(&NetworkConfig::toy()).unwrap();
        let opt = OptimizerState::new(Default::default(), net.params());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let meta = TrainingMeta {
            steps: 17,
            seed: 5,
            rng: Some(RngState::capture(&rng)),
            run_config: None,
        };
        let ck = Checkpoint::from_network(&net, meta, Some(&opt)).unwrap();
        (net, ck)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (net, ck) = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let rebuilt = back.to_network().unwrap();
        for (a, b) in rebuilt.params().iter().zip(net.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..7 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }

    #[test]
    fn corruption_is_detected() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());

        let mut tampered = ck.clone();
        tampered.manifest.params[1].offset += 4;
        let err = Checkpoint::from_bytes(&tampered.to_bytes().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");

        let mut drift = ck.clone();
        drift.manifest.network.stages[0].width = 5;
        let err = Checkpoint::from_bytes(&drift.to_bytes().unwrap()).unwrap_err();
        assert!(err.to_string().contains("fingerprint"), "{err}");
    }
}
