//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "RADFCKPT"
//! version   u32
//! header    u64 length + JSON {config, step, seed, dtype}
//! tensors   u32 count, then per tensor:
//!           u32 name length, name, u8 dtype tag, u8 ndim, u64 dims[ndim], data
//! checksum  u64 FNV-1a of every preceding byte
//! ```
//!
//! Tensors are the parameters in canonical order followed by the Adam
//! moments as `adam.m.<name>` and `adam.v.<name>`.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diff::ParameterSet;
use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"RADFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub state: TrainState<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub step: u64,
    pub seed: u64,
    pub dtype: DType,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn write_set<T: Real>(out: &mut Vec<u8>, set: &ParameterSet<T>, prefix: &str) {
    for (spec, data) in set.specs().iter().zip(set.tensors()) {
        let name = format!("{prefix}{}", spec.name);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(spec.shape.len() as u8);
        for &d in &spec.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            v.write_le(out);
        }
    }
}

pub fn encode_checkpoint<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: ckpt.config.clone(),
        step: ckpt.state.step,
        seed: ckpt.state.seed,
        dtype: T::DTYPE,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(ckpt.state.params.param_count() * 3 * T::DTYPE.size() + header.len() + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let count = ckpt.state.params.specs().len() * 3;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    write_set(&mut out, &ckpt.state.params, "");
    write_set(&mut out, &ckpt.state.adam_m, "adam.m.");
    write_set(&mut out, &ckpt.state.adam_v, "adam.v.");
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::file(&tmp, e))?;
        f.sync_all().map_err(|e| Error::file(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Checks framing and checksum; returns the header and the tensor section.
fn open(bytes: &[u8]) -> Result<(CheckpointHeader, Reader<'_>)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("missing magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 + 8 + 4 + 8 {
        return Err(Error::Corrupt("truncated file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let len = r.u64()? as usize;
    if len > body.len() {
        return Err(Error::Corrupt("header length exceeds file".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
    Ok((header, r))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, mut r) = open(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::InvalidInput(format!(
            "checkpoint stores {:?} tensors, requested {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    header.config.validate()?;
    let template = ParameterSet::<T>::zeros(&header.config.model)?;
    let specs = template.specs();
    let count = r.u32()? as usize;
    if count != specs.len() * 3 {
        return Err(Error::shape("checkpoint tensor count", specs.len() * 3, count));
    }
    let mut sets = [template.clone(), template.clone(), template];
    for (set, prefix) in sets.iter_mut().zip(["", "adam.m.", "adam.v."]) {
        for (spec, dst) in specs.iter().zip(set.tensors_mut()) {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let want = format!("{prefix}{}", spec.name);
            if name != want {
                return Err(Error::Corrupt(format!("expected tensor {want}, found {name}")));
            }
            let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("unknown dtype tag".into()))?;
            if dtype != T::DTYPE {
                return Err(Error::Corrupt(format!("tensor {name} has dtype {dtype:?}")));
            }
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != spec.shape {
                return Err(Error::Corrupt(format!(
                    "tensor {name} has shape {dims:?}, config declares {:?}",
                    spec.shape
                )));
            }
            let size = T::DTYPE.size();
            let data = r.take(dst.len() * size)?;
            for (v, chunk) in dst.iter_mut().zip(data.chunks_exact(size)) {
                *v = T::read_le(chunk);
            }
        }
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Corrupt("trailing bytes after tensor table".into()));
    }
    let [params, adam_m, adam_v] = sets;
    Ok(Checkpoint {
        config: header.config,
        state: TrainState {
            params,
            adam_m,
            adam_v,
            step: header.step,
            seed: header.seed,
        },
    })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_checkpoint(&bytes)
}

/// Reads only the header (after verifying the checksum).
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(open(&bytes)?.0)
}
