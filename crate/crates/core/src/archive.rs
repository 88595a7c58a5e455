//! Binary container for named `f32` arrays plus a key/value header. Used for
//! checkpoints and attention records.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"STYOARCH"  u32 version
//! u32 header_len   header bytes (UTF-8 "key=value\n" lines, sorted)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, u64 dims[ndim], f32 values[prod(dims)]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STYOARCH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub header: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Archive {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("archive", format!("missing header key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::format("archive", format!("bad value {raw:?} for {key:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        });
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::format("archive", format!("missing array {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(FORMAT_VERSION.to_le_bytes());
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header.as_bytes());
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend((a.name.len() as u32).to_le_bytes());
            out.extend(a.name.as_bytes());
            out.extend((a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for v in &a.values {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("archive", "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("archive", format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header_text =
            std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::format("archive", "header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in header_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("archive", format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format("archive", "array name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::format("archive", "array too large"))?,
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("archive", "trailing bytes"));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("archive", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_corruption() {
        let mut a = Archive::default();
        a.set("kind", "checkpoint");
        a.push("w", &[2], vec![1.0, 2.0]);
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Archive::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_bit_exactly(values in prop::collection::vec(any::<u32>(), 0..64), key in "[a-z.]{1,12}", val in "[ -~&&[^=]]{0,20}") {
            let floats: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
            let mut a = Archive::default();
            a.set(&key, &val);
            a.push("x.weight", &[floats.len()], floats.clone());
            let b = Archive::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(b.get(&key).unwrap(), val.as_str());
            let back = &b.array("x.weight").unwrap().values;
            prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), values);
        }
    }
}
