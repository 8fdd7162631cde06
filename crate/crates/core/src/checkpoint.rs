//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "WRPG"  u32 version
//! u32 meta_len   meta_len bytes of UTF-8 JSON metadata
//! u32 n_arrays
//! n_arrays x { u32 name_len  name  u32 ndim  ndim x u64 dim  prod(dims) x f32 }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneOrigin;
use crate::error::{Error, Result};
use crate::training::EpochStats;

pub const MAGIC: [u8; 4] = *b"WRPG";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// A backbone trained on its own.
    Backbone,
    /// Transform modules plus the backbone they wrap.
    Reprogram,
    /// A bare weight bundle (e.g. extractor weights).
    Weights,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub architecture: String,
    pub config: serde_json::Value,
    pub fingerprint: String,
    pub origin: Option<BackboneOrigin>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub epoch: usize,
    pub seed: u64,
    pub train_kinds: Vec<String>,
    pub backbone: BackboneMeta,
    /// Transform hyper-shape needed to rebuild the model.
    pub model: Option<serde_json::Value>,
    /// Resolved run configuration that produced this checkpoint.
    pub run_config: Option<serde_json::Value>,
    /// Most recent per-epoch statistics.
    pub loss_tail: Vec<EpochStats>,
    /// Set on checkpoints written after an aborted run.
    pub diagnostic: Option<String>,
}

impl CheckpointMeta {
    pub fn bare(kind: CheckpointKind) -> Self {
        CheckpointMeta {
            kind,
            epoch: 0,
            seed: 0,
            train_kinds: Vec::new(),
            backbone: BackboneMeta::default(),
            model: None,
            run_config: None,
            loss_tail: Vec::new(),
            diagnostic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Corrupt(format!("metadata serialization: {e}")))?;
        let mut out = Vec::with_capacity(
            16 + meta.len()
                + self
                    .arrays
                    .iter()
                    .map(|a| a.data.len() * 4 + 64)
                    .sum::<usize>(),
        );
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let expected: usize = a.shape.iter().product();
            if expected != a.data.len() {
                return Err(Error::Schema {
                    array: a.name.clone(),
                    expected: format!("{expected} values for shape {:?}", a.shape),
                    found: format!("{} values", a.data.len()),
                });
            }
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        let n = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(n.min(4096));
        for i in 0..n {
            let name_len = r.u32("array name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "array name")?)
                .map_err(|_| Error::Corrupt(format!("array {i} name is not UTF-8")))?
                .to_string();
            let ndim = r.u32("array rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64(&name)? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("array `{name}` shape overflows")))?;
            let raw = r.take(count.checked_mul(4).unwrap_or(usize::MAX), &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after last array",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { meta, arrays })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len().saturating_sub(self.pos) < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("wrpg.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
