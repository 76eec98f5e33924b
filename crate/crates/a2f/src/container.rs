//! Named-array binary container shared by checkpoints, convention assets and
//! basis files: magic, version, then a directory of named arrays
//! (name length + UTF-8 name + dtype tag + shape + little-endian payload).
//! Entries are written sorted by name so save/load round trips are
//! byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("truncated or malformed container: {0}")]
    Malformed(String),
    #[error("missing entry `{0}`")]
    Missing(String),
    #[error("entry `{name}` has dtype {found}, expected {expected}")]
    WrongType { name: String, expected: &'static str, found: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U32,
    U8,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U32 => 1,
            DType::U8 => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::U32),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::U32 => "u32",
            DType::U8 => "u8",
        }
    }

    fn elem_size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub bytes: Vec<u8>,
}

/// In-memory container keyed by entry name.
#[derive(Clone, Debug)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new(magic: [u8; 4], version: u32) -> Self {
        Container { magic, version, entries: BTreeMap::new() }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn put_f32(&mut self, name: &str, shape: Vec<u64>, values: &[f32]) {
        debug_assert_eq!(shape.iter().product::<u64>() as usize, values.len());
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.insert(name.to_string(), Entry { dtype: DType::F32, shape, bytes });
    }

    pub fn put_u32(&mut self, name: &str, shape: Vec<u64>, values: &[u32]) {
        debug_assert_eq!(shape.iter().product::<u64>() as usize, values.len());
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.insert(name.to_string(), Entry { dtype: DType::U32, shape, bytes });
    }

    pub fn put_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        let shape = vec![bytes.len() as u64];
        self.entries.insert(name.to_string(), Entry { dtype: DType::U8, shape, bytes });
    }

    pub fn put_string(&mut self, name: &str, value: &str) {
        self.put_bytes(name, value.as_bytes().to_vec());
    }

    pub fn entry(&self, name: &str) -> Result<&Entry, ContainerError> {
        self.entries.get(name).ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn f32s(&self, name: &str) -> Result<Vec<f32>, ContainerError> {
        let e = self.entry(name)?;
        if e.dtype != DType::F32 {
            return Err(ContainerError::WrongType {
                name: name.into(),
                expected: "f32",
                found: e.dtype.name(),
            });
        }
        Ok(e.bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>, ContainerError> {
        let e = self.entry(name)?;
        if e.dtype != DType::U32 {
            return Err(ContainerError::WrongType {
                name: name.into(),
                expected: "u32",
                found: e.dtype.name(),
            });
        }
        Ok(e.bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn string(&self, name: &str) -> Result<String, ContainerError> {
        let e = self.entry(name)?;
        if e.dtype != DType::U8 {
            return Err(ContainerError::WrongType {
                name: name.into(),
                expected: "u8",
                found: e.dtype.name(),
            });
        }
        String::from_utf8(e.bytes.clone())
            .map_err(|_| ContainerError::Malformed(format!("entry `{name}` is not UTF-8")))
    }

    pub fn shape(&self, name: &str) -> Result<Vec<usize>, ContainerError> {
        Ok(self.entry(name)?.shape.iter().map(|&d| d as usize).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(e.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(data: &[u8], expected_magic: [u8; 4]) -> Result<Self, ContainerError> {
        let mut cur = Cursor { data, pos: 0 };
        let magic: [u8; 4] = cur
            .take(4)?
            .try_into()
            .map_err(|_| ContainerError::Malformed("short magic".into()))?;
        if magic != expected_magic {
            return Err(ContainerError::BadMagic { expected: expected_magic, found: magic });
        }
        let version = cur.u32()?;
        if version != 1 {
            return Err(ContainerError::BadVersion(version));
        }
        let count = cur.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| ContainerError::Malformed("entry name is not UTF-8".into()))?;
            let tag = cur.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| ContainerError::Malformed(format!("unknown dtype tag {tag}")))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()?);
            }
            let len = cur.u64()? as usize;
            let numel: u64 = shape.iter().product();
            if numel as usize * dtype.elem_size() != len {
                return Err(ContainerError::Malformed(format!(
                    "entry `{name}`: shape {shape:?} disagrees with payload length {len}"
                )));
            }
            let bytes = cur.take(len)?.to_vec();
            entries.insert(name, Entry { dtype, shape, bytes });
        }
        Ok(Container { magic, version, entries })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), ContainerError> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)
            .map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
        f.write_all(&bytes)
            .map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
        Ok(())
    }

    pub fn read_from(path: &Path, expected_magic: [u8; 4]) -> Result<Self, ContainerError> {
        let mut f = std::fs::File::open(path)
            .map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
        let mut data = Vec::new();
        f.read_to_end(&mut data)
            .map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&data, expected_magic)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.data.len() {
            return Err(ContainerError::Malformed(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut c = Container::new(*b"TEST", 1);
        c.put_f32("b.weights", vec![2, 2], &[1.0, -2.5, 3.25, 0.0]);
        c.put_u32("a.indices", vec![3], &[7, 8, 9]);
        c.put_string("z.config", "k = v\n");
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, *b"TEST").unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.f32s("b.weights").unwrap(), vec![1.0, -2.5, 3.25, 0.0]);
        assert_eq!(back.u32s("a.indices").unwrap(), vec![7, 8, 9]);
        assert_eq!(back.string("z.config").unwrap(), "k = v\n");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let c = Container::new(*b"AAAA", 1);
        let bytes = c.to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes, *b"BBBB"),
            Err(ContainerError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let mut c = Container::new(*b"TEST", 1);
        c.put_f32("x", vec![4], &[1.0; 4]);
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3], *b"TEST").is_err());
    }

    #[test]
    fn type_mismatch_is_reported() {
        let mut c = Container::new(*b"TEST", 1);
        c.put_u32("x", vec![1], &[5]);
        assert!(matches!(c.f32s("x"), Err(ContainerError::WrongType { .. })));
        assert!(matches!(c.f32s("missing"), Err(ContainerError::Missing(_))));
    }
}
