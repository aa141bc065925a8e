//! Model checkpoints.
//!
//! Layout (little-endian): `MVSA`, `u32` version, `u32` length plus the model
//! config as `key = value` text, `u32` tensor count, then per tensor a
//! length-prefixed name, `u32` rank, the dims as `u32`, and the values as
//! `f32`. Parameters are stored in construction order.

use std::path::Path;

use mvsa_core::numerics::Tensor;
use mvsa_core::variants::SpeakerModel;

use crate::config::{parse_model_config, write_model_config};
use crate::error::{read, write_atomic, Error, Result};

pub const MAGIC: &[u8; 4] = b"MVSA";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(model: &SpeakerModel) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    put_str(&mut out, &write_model_config(&model.config));
    put_u32(&mut out, model.store.len() as u32);
    for p in model.store.iter() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::format(self.path, format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<SpeakerModel> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let cfg = parse_model_config(r.str("config")?).map_err(|e| Error::format(path, format!("config {e}")))?;
    let mut model = SpeakerModel::new(cfg, 0)?;
    let count = r.u32("tensor count")? as usize;
    if count != model.store.len() {
        return Err(Error::format(
            path,
            format!("expected {} tensors, found {count}", model.store.len()),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str("tensor name")?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "oversized tensor"))?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        values.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    model
        .store
        .load_values(values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(model)
}

/// Refuses parameters that single precision cannot hold, leaving any
/// existing file untouched.
pub fn save(path: &Path, model: &SpeakerModel) -> Result<()> {
    if let Some(p) = model
        .store
        .iter()
        .find(|p| p.value.data().iter().any(|&v| !(v as f32).is_finite()))
    {
        return Err(Error::Core(mvsa_core::Error::Numeric {
            op: "checkpoint",
            detail: format!("parameter `{}` does not fit in f32", p.name),
        }));
    }
    write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<SpeakerModel> {
    decode(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvsa_core::transformer::{ModelConfig, Variant};

    #[test]
    fn round_trip_is_exact_at_single_precision() {
        for v in Variant::ALL {
            let model = SpeakerModel::new(ModelConfig::toy(v), 7).unwrap();
            let bytes = encode(&model);
            let back = decode(&bytes, Path::new("m")).unwrap();
            assert_eq!(back.config, model.config);
            for (a, b) in model.store.iter().zip(back.store.iter()) {
                assert_eq!(a.name, b.name);
                let want: Vec<f64> = a.value.data().iter().map(|&x| x as f32 as f64).collect();
                assert_eq!(b.value.data(), &want[..]);
            }
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let model = SpeakerModel::new(ModelConfig::toy(Variant::AverageEncoderTokens), 1).unwrap();
        let bytes = encode(&model);
        let p = Path::new("m");
        assert!(decode(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, p).is_err());
    }
}
