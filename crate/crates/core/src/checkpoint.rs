//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "LVITCKPT"
//! version      u32       1
//! config_len   u64       followed by config_len bytes of UTF-8 key=value text
//! n_tensors    u64
//! per tensor:  u64 name_len, name bytes, u64 rank, rank × u64 dims,
//!              product(dims) × f64 (IEEE-754)
//! ```
//!
//! Metadata (label names, epoch, seed) rides in the config text under `meta.*` keys.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{LvitError, Result};
use crate::kv::KvMap;
use crate::model::{Lvit, ModelConfig};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LVITCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub label_names: Vec<String>,
    pub epoch: Option<usize>,
    pub seed: Option<u64>,
}

impl CheckpointMeta {
    fn write_kv(&self, m: &mut KvMap) -> Result<()> {
        if let Some(bad) = self.label_names.iter().find(|n| n.contains(',') || n.contains('\n')) {
            return Err(LvitError::Contract(format!("label name `{bad}` may not contain ',' or newlines")));
        }
        if !self.label_names.is_empty() {
            m.set("meta.labels", self.label_names.join(","));
        }
        if let Some(e) = self.epoch {
            m.set("meta.epoch", e);
        }
        if let Some(s) = self.seed {
            m.set("meta.seed", s);
        }
        Ok(())
    }

    fn from_kv(m: &KvMap) -> Result<Self> {
        Ok(CheckpointMeta {
            label_names: m
                .get("meta.labels")
                .map(|s| s.split(',').map(str::to_string).collect())
                .unwrap_or_default(),
            epoch: m.get_parsed("meta.epoch")?,
            seed: m.get_parsed("meta.seed")?,
        })
    }
}

pub fn to_bytes(model: &Lvit, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut kv = model.config().to_kv();
    meta.write_kv(&mut kv)?;
    let text = kv.to_text();

    let mut out = Vec::with_capacity(64 + model.store().num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.store().len() as u64).to_le_bytes());
    for p in model.store().iter() {
        out.extend_from_slice(&(p.name().len() as u64).to_le_bytes());
        out.extend_from_slice(p.name().as_bytes());
        let shape = p.value().shape();
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(LvitError::Format(format!(
                "file truncated while reading {what} at byte {} ({n} bytes needed, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        // A length can never exceed what is left in the file.
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| LvitError::Format(format!("implausible {what} {v}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Lvit, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(LvitError::Format("bad magic, not an LVITCKPT checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(LvitError::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.len("config length")?;
    let text = std::str::from_utf8(r.take(cfg_len, "config text")?)
        .map_err(|e| LvitError::Format(format!("config text is not UTF-8: {e}")))?;
    let kv = KvMap::parse(text)?;
    let config = ModelConfig::from_kv(&kv)?;
    let meta = CheckpointMeta::from_kv(&kv)?;

    let count = r.len("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.len("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| LvitError::Format(format!("tensor #{i} name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.len("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("dimension")?);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| LvitError::Format(format!("tensor `{name}` has implausible shape {shape:?}")))?;
        let raw = r.take(n * 8, "tensor values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| LvitError::Format(format!("tensor `{name}`: {e}")))?;
        store.add(name, t).map_err(|e| LvitError::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(LvitError::Format(format!("{} trailing bytes after tensor table", bytes.len() - r.pos)));
    }
    let model = Lvit::from_store(config, store)?;
    Ok((model, meta))
}

/// Write via a temporary sibling file and rename, so readers never see a partial checkpoint.
pub fn save_checkpoint(model: &Lvit, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(Lvit, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| LvitError::io(path, e))?;
    from_bytes(&bytes)
}

/// Write `bytes` to `path` via a `.tmp` sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        LvitError::io(path, e)
    })
}
