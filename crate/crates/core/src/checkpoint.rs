//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  b"MMFASCKP"
//! version          u32      currently 1
//! config_len       u32      followed by that many UTF-8 bytes of TOML
//! provenance       u8       0 = random init, 1 = loaded file, 2 = pretrained
//! tensor_count     u32
//! per tensor:
//!   name_len       u32      followed by that many UTF-8 bytes
//!   ndim           u32
//!   dims           ndim x u32
//!   data           prod(dims) x f32
//! ```
//!
//! Values are stored in `f32` regardless of the in-memory element type, so
//! an `f32` model round-trips bitwise. Readers reject unknown magic or
//! version, truncated files, and trailing bytes.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use indexmap::IndexMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MMFASCKP";
pub const VERSION: u32 = 1;

/// Maximum elements a single stored tensor may declare; guards allocation
/// against corrupt headers.
const MAX_TENSOR_ELEMS: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Random,
    File,
    Pretrained,
}

impl Provenance {
    fn to_u8(self) -> u8 {
        match self {
            Provenance::Random => 0,
            Provenance::File => 1,
            Provenance::Pretrained => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self, TensorError> {
        match v {
            0 => Ok(Provenance::Random),
            1 => Ok(Provenance::File),
            2 => Ok(Provenance::Pretrained),
            other => Err(TensorError::Format(format!(
                "unknown provenance byte {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// TOML text of the run configuration that produced these weights.
    pub config: String,
    pub provenance: Provenance,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    /// Snapshot a parameter map, casting the elements to `f32`.
    pub fn from_params<T: Scalar>(
        config: impl Into<String>,
        provenance: Provenance,
        params: &IndexMap<String, Tensor<T>>,
    ) -> Self {
        Checkpoint {
            config: config.into(),
            provenance,
            tensors: params
                .iter()
                .map(|(name, t)| (name.clone(), t.cast::<f32>()))
                .collect(),
        }
    }

    /// Convert the stored tensors to the requested element type.
    pub fn tensors_as<T: Scalar>(&self) -> IndexMap<String, Tensor<T>> {
        self.tensors
            .iter()
            .map(|(name, t)| (name.clone(), t.cast::<T>()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TensorError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(w, self.config.as_bytes())?;
        w.write_all(&[self.provenance.to_u8()])?;
        w.write_all(&u32_of(self.tensors.len(), "tensor count")?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&u32_of(t.rank(), "tensor rank")?.to_le_bytes())?;
            for &dim in &t.shape {
                w.write_all(&u32_of(dim, "tensor dim")?.to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, TensorError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| TensorError::Format("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(TensorError::Format("bad magic; not a checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(TensorError::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config = String::from_utf8(read_bytes(r)?)
            .map_err(|_| TensorError::Format("config is not valid UTF-8".into()))?;
        let provenance = Provenance::from_u8(read_u8(r)?)?;
        let count = read_u32(r)? as usize;
        let mut tensors = IndexMap::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?)
                .map_err(|_| TensorError::Format("tensor name is not valid UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: u64 = 1;
            for _ in 0..ndim {
                let dim = read_u32(r)? as usize;
                numel = numel.saturating_mul(dim as u64);
                shape.push(dim);
            }
            if numel > MAX_TENSOR_ELEMS {
                return Err(TensorError::Format(format!(
                    "tensor '{name}' declares {numel} elements"
                )));
            }
            let mut data = vec![0f32; numel as usize];
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| TensorError::Format(format!("truncated data in '{name}'")))?;
                *v = f32::from_le_bytes(buf);
            }
            if tensors
                .insert(name.clone(), Tensor::new(shape, data)?)
                .is_some()
            {
                return Err(TensorError::Format(format!("duplicate tensor '{name}'")));
            }
        }
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => Ok(Checkpoint {
                config,
                provenance,
                tensors,
            }),
            Ok(_) => Err(TensorError::Format("trailing bytes after tensors".into())),
            Err(e) => Err(e.into()),
        }
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32, TensorError> {
    u32::try_from(v).map_err(|_| TensorError::Format(format!("{what} {v} exceeds u32")))
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<(), TensorError> {
    w.write_all(&u32_of(bytes.len(), "byte length")?.to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, TensorError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| TensorError::Format("unexpected end of file".into()))?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| TensorError::Format("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, TensorError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| TensorError::Format("unexpected end of file".into()))?;
    Ok(buf)
}
