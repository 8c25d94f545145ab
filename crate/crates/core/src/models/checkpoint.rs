//! `.axck` files: magic `AXCK`, u32 version, u32-length-prefixed
//! `key=value` architecture text, three f32 channel scales, u32 tensor
//! count, then per tensor a u16-prefixed name, u8 rank, u32 dims and f32
//! data. All integers and floats are little-endian.

use std::path::Path;

use super::{build_model, ArchConfig, Model};
use crate::dsp::ChannelScales;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AXCK";
const VERSION: u32 = 1;
const META_PREFIX: &str = "run.";

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut text = model.config.to_kv_text();
    for (k, v) in &model.meta {
        text.push_str(&format!("{META_PREFIX}{k}={v}\n"));
    }
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for s in model.scales.0 {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
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
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::format("checkpoint", "text is not UTF-8"))
    }
}

/// Parses a checkpoint and checks every tensor against the architecture it
/// declares.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = r.utf8(len)?;
    let mut arch = String::new();
    let mut meta = std::collections::BTreeMap::new();
    for line in text.lines() {
        match line.strip_prefix(META_PREFIX).and_then(|kv| kv.split_once('=')) {
            Some((k, v)) => {
                meta.insert(k.to_string(), v.to_string());
            }
            None => {
                arch.push_str(line);
                arch.push('\n');
            }
        }
    }
    let config = ArchConfig::from_kv_text(&arch)?;
    let scales = ChannelScales([r.f32()?, r.f32()?, r.f32()?]);
    let mut model = build_model(&config, 0)?;
    model.scales = scales;
    model.meta = meta;

    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{count} tensors, architecture has {}", model.params.len()),
        ));
    }
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.utf8(n)?;
        let id = model
            .params
            .id(name)
            .ok_or_else(|| Error::format("checkpoint", format!("unexpected tensor {name:?}")))?;
        let rank = r.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let target = model.params.get_mut(id);
        if dims != target.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("tensor {name:?} has shape {dims:?}, expected {:?}", target.shape()),
            ));
        }
        for v in target.data_mut() {
            *v = r.f32()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;

    #[test]
    fn round_trip_every_variant() {
        for v in [Variant::Differential, Variant::NoRef, Variant::Cnn1dLstm, Variant::FeaturesLr] {
            let mut m = build_model(&ArchConfig::for_variant(v), 9).unwrap();
            m.scales = ChannelScales([0.5, 2.0, 3.25]);
            m.meta.insert("seed".into(), "42".into());
            let bytes = encode_checkpoint(&m);
            assert_eq!(decode_checkpoint(&bytes).unwrap(), m, "{v}");
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = build_model(&ArchConfig::default(), 1).unwrap();
        let bytes = encode_checkpoint(&m);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(decode_checkpoint(&longer).is_err());
    }
}
