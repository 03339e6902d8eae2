//! Binary checkpoint format.
//!
//! ```text
//! "GRCK"  u32 version  u64 config_len  config (canonical JSON)
//! u32 param_count
//! per parameter: u32 name_len  name  u32 ndim  u64 dims…  f64 data…
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GRCK";
pub const VERSION: u32 = 1;

/// Serializes `value` as JSON with object keys sorted.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    // `serde_json::Value` keeps maps in a `BTreeMap`, so keys come out sorted.
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

pub fn encode_checkpoint(config: &PipelineConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let json = canonical_json(config)?;
    let mut out = Vec::with_capacity(16 + json.len() + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {} of {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::Corrupt(format!("{what} {n} out of range")))
    }
}

/// Parses a checkpoint into its configuration and parameters without
/// checking them against each other.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(PipelineConfig, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let json_len = r.len("config length")?;
    let config: PipelineConfig = serde_json::from_slice(r.take(json_len, "config")?)
        .map_err(|e| Error::Corrupt(format!("config: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.u32("rank")? as usize;
        if ndim > 8 {
            return Err(Error::Corrupt(format!("{name}: rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len("extent")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("{name}: shape overflow")))?;
        let raw = r.take(
            numel.checked_mul(8).ok_or_else(|| Error::Corrupt(format!("{name}: size overflow")))?,
            &name,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
        store.add(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, store))
}

/// Writes `bytes` to a sibling temporary file, syncs it, then renames it
/// over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_checkpoint(pipeline: &Pipeline, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(pipeline.config(), pipeline.store())?)
}

/// Rebuilds the pipeline stored at `path`.
pub fn load_checkpoint(path: &Path) -> Result<Pipeline> {
    let (config, store) = decode_checkpoint(&fs::read(path)?)?;
    Pipeline::with_params(config, store)
}

/// Loads parameters into an existing pipeline, rejecting checkpoints whose
/// model sizes or parameter shapes differ from it.
pub fn load_into(pipeline: &mut Pipeline, path: &Path) -> Result<()> {
    let (config, store) = decode_checkpoint(&fs::read(path)?)?;
    if config.dims != pipeline.config().dims || config.n_refine != pipeline.config().n_refine {
        return Err(Error::Checkpoint(format!(
            "checkpoint sizes {:?} (n_refine {}) do not match pipeline {:?} (n_refine {})",
            config.dims,
            config.n_refine,
            pipeline.config().dims,
            pipeline.config().n_refine
        )));
    }
    *pipeline = Pipeline::with_params(pipeline.config().clone(), store)?;
    Ok(())
}
