//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//! `MAGIC`, `u32` version, `u64` config length, config JSON, `u64` parameter
//! count, then per parameter: `u32` name length, name, `u32` rank, `u64` per
//! dimension, `f64` values in row-major order.

use std::path::Path;

use super::{ModelConfig, SteerModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STEERCKP";
const VERSION: u32 = 1;

pub(super) fn encode(model: &SteerModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.store.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).expect("config is plain data");
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for p in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &dim in p.value.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<SteerModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let clen = r.len()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(clen)?).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let mut model = SteerModel::new(config, 0)?;
    let count = r.len()?;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, architecture has {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        let param = model.store.get_mut(id);
        if param.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?}, expected {:?}",
                param.value.shape()
            )));
        }
        let raw = r.take(8 * param.value.len())?;
        for (dst, chunk) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        seen[id.index()] = true;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Checkpoint("duplicate parameter entries".into()));
    }
    Ok(model)
}

pub(super) fn save(model: &SteerModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub(super) fn load(path: &Path) -> Result<SteerModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
