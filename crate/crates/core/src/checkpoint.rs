//! Named-tensor checkpoint container.
//!
//! Little-endian layout: magic `VTSD0001`, `u32` entry count, then per entry
//! a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` dims and
//! the `f32` payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VTSD0001";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Tensor>,
}

/// Rounds every value to the nearest `f32`, so values survive a checkpoint
/// round trip unchanged.
pub fn snap_to_f32(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn insert(&mut self, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("entry `{name}` name or rank too large")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!("entry `{name}`: dims {dims:?} for {} values", data.len())));
        }
        self.entries.push(Tensor {
            name: name.to_string(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: data.iter().map(|&v| v as f32).collect(),
        });
        Ok(())
    }

    /// Rank-0 entry.
    pub fn insert_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.insert(name, &[], &[value])
    }

    /// Text stored as one byte value per element.
    pub fn insert_text(&mut self, name: &str, text: &str) -> Result<()> {
        let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
        self.insert(name, &[bytes.len()], &bytes)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    /// Payload of `name` as `f64`, checked against the expected length.
    pub fn values(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.data.len() != len {
            return Err(Error::Checkpoint(format!("entry `{name}` has {} values, expected {len}", t.data.len())));
        }
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if !t.dims.is_empty() {
            return Err(Error::Checkpoint(format!("entry `{name}` is not a scalar")));
        }
        Ok(t.data[0] as f64)
    }

    /// Non-negative integer stored as a scalar.
    pub fn count(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("entry `{name}` = {v} is not a count")));
        }
        Ok(v as usize)
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let t = self.get(name)?;
        let bytes: Vec<u8> = t.data.iter().map(|&v| v as u8).collect();
        String::from_utf8(bytes).map_err(|_| Error::Checkpoint(format!("entry `{name}` is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { what: "checkpoint", expected: "VTSD0001" });
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().map(|&d| d as usize).product::<usize>();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if ck.entries.iter().any(|e| e.name == name) {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
            ck.entries.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match std::fs::read(path) {
            Ok(bytes) => Self::from_bytes(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingCheckpoint(path.to_path_buf())),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            what: "checkpoint",
            expected: n,
            found: self.bytes.len() - self.pos,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut ck = Checkpoint::new();
        ck.insert("w", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        ck.insert_scalar("lambda", 0.25).unwrap();
        ck.insert_text("config.text", "seed = 1\n").unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.scalar("lambda").unwrap(), 0.25);
        assert_eq!(back.text("config.text").unwrap(), "seed = 1\n");
        assert_eq!(back.get("w").unwrap().dims, vec![2, 3]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut ck = Checkpoint::new();
        ck.insert("a", &[2], &[1.0, 2.0]).unwrap();
        assert!(ck.insert("a", &[1], &[1.0]).is_err());
        assert!(ck.insert("b", &[3], &[1.0]).is_err());
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[7] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::load("/nonexistent/x.ckpt"), Err(Error::MissingCheckpoint(_))));
    }
}
