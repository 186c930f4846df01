//! The `LBTF` tensor container.
//!
//! ```text
//! magic "LBTF" | u16 version = 1 | u32 entry count
//! per entry: u16 name length | name (UTF-8) | u8 dtype | u8 ndim | ndim × u32 dims | payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = u8, 2 = bool (one byte, 0 or 1). All integers
//! and floats are little-endian; payloads are row-major.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LBTF";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    U8 = 1,
    Bool = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    Bool(Vec<bool>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::Bool(_) => DType::Bool,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<Entry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Adds an entry, replacing any existing entry with the same name.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!("entry {name}: shape {shape:?} does not match {} elements", data.len())));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("entry {name}: name or rank too large")));
        }
        let entry = Entry { name, shape, data };
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    pub fn insert_f64<D: ndarray::Dimension>(&mut self, name: impl Into<String>, array: &ndarray::Array<f64, D>) -> Result<()> {
        let data = array.iter().map(|&v| v as f32).collect();
        self.insert(name, array.shape().to_vec(), TensorData::F32(data))
    }

    pub fn insert_bool<D: ndarray::Dimension>(&mut self, name: impl Into<String>, array: &ndarray::Array<bool, D>) -> Result<()> {
        self.insert(name, array.shape().to_vec(), TensorData::Bool(array.iter().copied().collect()))
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) -> Result<()> {
        self.insert(name, vec![text.len()], TensorData::U8(text.as_bytes().to_vec()))
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing entry {name}")))
    }

    pub fn get_f64(&self, name: &str) -> Result<ArrayD<f64>> {
        let e = self.require(name)?;
        match &e.data {
            TensorData::F32(v) => {
                Ok(ArrayD::from_shape_vec(IxDyn(&e.shape), v.iter().map(|&x| x as f64).collect()).expect("validated shape"))
            }
            _ => Err(Error::Format(format!("entry {name} is not f32"))),
        }
    }

    pub fn get_matrix(&self, name: &str) -> Result<Array2<f64>> {
        self.get_f64(name)?.into_dimensionality().map_err(|_| Error::Format(format!("entry {name} is not two-dimensional")))
    }

    pub fn get_bool(&self, name: &str) -> Result<ArrayD<bool>> {
        let e = self.require(name)?;
        match &e.data {
            TensorData::Bool(v) => Ok(ArrayD::from_shape_vec(IxDyn(&e.shape), v.clone()).expect("validated shape")),
            _ => Err(Error::Format(format!("entry {name} is not bool"))),
        }
    }

    pub fn get_text(&self, name: &str) -> Result<String> {
        let e = self.require(name)?;
        match &e.data {
            TensorData::U8(v) => String::from_utf8(v.clone()).map_err(|_| Error::Format(format!("entry {name} is not UTF-8"))),
            _ => Err(Error::Format(format!("entry {name} is not u8 text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype() as u8);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
                TensorData::Bool(v) => out.extend(v.iter().map(|&b| b as u8)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an LBTF container".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut container = Self::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                1 => TensorData::U8(r.take(n)?.to_vec()),
                2 => TensorData::Bool(
                    r.take(n)?
                        .iter()
                        .map(|&b| match b {
                            0 => Ok(false),
                            1 => Ok(true),
                            _ => Err(Error::Format(format!("entry {name}: bool byte {b}"))),
                        })
                        .collect::<Result<_>>()?,
                ),
                other => return Err(Error::Format(format!("entry {name}: unknown dtype {other}"))),
            };
            container.entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_file(path)?)
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
            .ok_or_else(|| Error::Format(format!("truncated payload: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
