//! The `.fdt` tensor file format and the named-tensor container built on it.
//!
//! ```text
//! tensor:    "FDTN" | version u32 LE | dtype u8 | ndim u8 | dims u32 LE * ndim | data LE row-major
//! container: ( name_len u16 LE | UTF-8 name | tensor )*   until end of input
//! ```
//!
//! dtype tags are 0 for float32 and 1 for float64. A scalar has `ndim = 0`
//! and one element.

use std::fs;
use std::path::Path;

use crate::error::IoError;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: [u8; 4] = *b"FDTN";
pub const VERSION: u32 = 1;

/// A tensor whose element type is known only after reading.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// The tensor as `E`, failing if it was stored with another dtype.
    pub fn into_typed<E: Real>(self) -> Result<Tensor<E>, IoError> {
        let found = self.dtype();
        if found != E::DTYPE {
            return Err(IoError::DTypeMismatch {
                found: found.name(),
                expected: E::DTYPE.name(),
            });
        }
        // same dtype, so the cast is an exact copy
        Ok(match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        })
    }
}

pub fn encode_tensor<E: Real>(t: &Tensor<E>, out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(E::DTYPE.tag());
    let ndim = u8::try_from(t.ndim()).expect("at most 255 dimensions");
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).expect("extent fits in u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * E::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(IoError::Truncated { needed: n - left });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_values<E: Real>(r: &mut Reader<'_>, shape: Vec<usize>, numel: usize) -> Result<Tensor<E>, IoError> {
    let raw = r.take(numel * E::DTYPE.size())?;
    let data = raw.chunks_exact(E::DTYPE.size()).map(E::read_le).collect();
    Ok(Tensor::new(shape, data)?)
}

fn decode_from(r: &mut Reader<'_>) -> Result<AnyTensor, IoError> {
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(IoError::MagicMismatch { found: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(IoError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or(IoError::UnknownDType(tag))?;
    let ndim = r.u8()? as usize;
    let dims: Vec<u32> = (0..ndim).map(|_| r.u32()).collect::<Result<_, _>>()?;
    if dims.contains(&0) {
        return Err(IoError::Malformed(format!("zero extent in {dims:?}")));
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|n| n.checked_mul(dtype.size()).is_some())
        .ok_or_else(|| IoError::DimensionOverflow { dims: dims.clone() })?;
    let shape = dims.iter().map(|&d| d as usize).collect();
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(read_values(r, shape, numel)?),
        DType::F64 => AnyTensor::F64(read_values(r, shape, numel)?),
    })
}

/// Decodes exactly one tensor occupying all of `bytes`.
pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor, IoError> {
    let mut r = Reader { bytes, pos: 0 };
    let t = decode_from(&mut r)?;
    if !r.at_end() {
        return Err(IoError::Malformed(format!(
            "{} trailing bytes after tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(t)
}

pub fn encode_named<E: Real>(entries: &[(&str, &Tensor<E>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in entries {
        let len = u16::try_from(name.len()).expect("name shorter than 64 KiB");
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_named(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>, IoError> {
    let mut r = Reader { bytes, pos: 0 };
    let mut out: Vec<(String, AnyTensor)> = Vec::new();
    while !r.at_end() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| IoError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(IoError::Malformed(format!("duplicate tensor name {name:?}")));
        }
        let t = decode_from(&mut r)?;
        out.push((name, t));
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_tensor<E: Real>(path: &Path, t: &Tensor<E>) -> Result<(), IoError> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    write_bytes(path, &buf)
}

pub fn read_tensor<E: Real>(path: &Path) -> Result<Tensor<E>, IoError> {
    decode_tensor(&read_bytes(path)?)?.into_typed()
}

pub fn write_named<E: Real>(path: &Path, entries: &[(&str, &Tensor<E>)]) -> Result<(), IoError> {
    write_bytes(path, &encode_named(entries))
}

pub fn read_named(path: &Path) -> Result<Vec<(String, AnyTensor)>, IoError> {
    decode_named(&read_bytes(path)?)
}
