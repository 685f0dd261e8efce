//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCAC" | u32 version | u64 n | n bytes of JSON metadata
//! u32 array count | per array: u32 name length, name, u32 rank, rank × u64 dims, f64 data
//! u32 CRC-32 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::backbone::{FreezeScope, Network, NetworkConfig};
use crate::datapipe::SamplerState;
use crate::error::{Error, Result};
use crate::layers::RunningStats;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCAC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where training stands: `epoch` epochs of `phase` are complete.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub phase: u8,
    pub epoch: usize,
    pub global_step: u64,
}

/// One epoch's log line without its wall-clock time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub phase: u8,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub network: NetworkConfig,
    pub train: Option<TrainConfig>,
    pub cursor: Option<Cursor>,
    pub frozen: FreezeScope,
    pub optimizer_step: u64,
    pub sampler: Option<SamplerState>,
    pub log_tail: Vec<EpochSummary>,
}

/// Metadata plus named arrays in a fixed order: parameters, batch-norm
/// running statistics, AADS kernels, then optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, Tensor)>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    /// Captures the network's weights, statistics and blur kernels.
    pub fn from_network(net: &Network) -> Self {
        let mut arrays: Vec<(String, Tensor)> = net.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, stats) in net.norm_stats() {
            let c = stats.mean.len();
            arrays.push((format!("{name}.running_mean"), Tensor::new(&[c], stats.mean.clone()).expect("1-d")));
            arrays.push((format!("{name}.running_var"), Tensor::new(&[c], stats.var.clone()).expect("1-d")));
        }
        for (name, k) in net.aads_kernels() {
            arrays.push((format!("{name}.kernel"), k.clone()));
        }
        let frozen = if net.params().iter().any(|p| p.frozen) {
            FreezeScope::AllButHead
        } else {
            FreezeScope::None
        };
        Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_VERSION,
                network: net.config().clone(),
                train: None,
                cursor: None,
                frozen,
                optimizer_step: 0,
                sampler: None,
                log_tail: Vec::new(),
            },
            arrays,
        }
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the network; every parameter, statistic and kernel must be
    /// present with the expected shape.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(self.meta.network.clone(), 0)?;
        self.restore_into(&mut net)?;
        net.set_frozen(self.meta.frozen);
        Ok(net)
    }

    pub fn restore_into(&self, net: &mut Network) -> Result<()> {
        let missing = |name: &str| Error::Checkpoint {
            path: Default::default(),
            reason: format!("array {name} missing or mis-shaped"),
        };
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            self.array(name)
                .filter(|t| t.shape() == shape)
                .cloned()
                .ok_or_else(|| missing(name))
        };
        for p in net.params_mut() {
            p.value = fetch(&p.name, &p.value.shape().to_vec())?;
        }
        for (name, stats) in net.norm_stats_mut() {
            let c = stats.mean.len();
            *stats = RunningStats {
                mean: fetch(&format!("{name}.running_mean"), &[c])?.into_data(),
                var: fetch(&format!("{name}.running_var"), &[c])?.into_data(),
            };
        }
        for (name, k) in net.aads_kernels_mut() {
            *k = fetch(&format!("{name}.kernel"), &k.shape().to_vec())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.meta.format_version.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 4 + 4 {
            return Err(corrupt(path, format!("{} bytes is too short to be a checkpoint", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt(path, "bad magic, not a checkpoint file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt(path, "CRC mismatch, file is truncated or corrupted"));
        }
        let mut r = Reader { buf: body, pos: 4, path };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(
                path,
                format!("format version {version} is not supported (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(path, format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt(path, "array name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank > crate::tensor::MAX_RANK {
                return Err(corrupt(path, format!("array {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt(path, "array size overflows"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| corrupt(path, e.to_string()))?;
            arrays.push((name, t));
        }
        if r.pos != body.len() {
            return Err(corrupt(path, format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { meta, arrays })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(self.path, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
