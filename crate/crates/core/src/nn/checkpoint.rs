//! `MBEV-CK1` named-tensor checkpoints.
//!
//! ```text
//! magic     8 bytes "MBEV-CK1"
//! count     u32
//! entries   count x { u32 name_len, name bytes, u32 rank, rank x u32 dims, f32 data }
//! metadata  u64 byte length, then UTF-8 JSON
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::ParamStore;
use crate::error::{MbevError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MBEV-CK1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorTable {
    pub tensors: BTreeMap<String, NamedTensor>,
    pub metadata: serde_json::Value,
}

impl TensorTable {
    pub fn from_store(store: &ParamStore, metadata: serde_json::Value) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in store.iter() {
            let t = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?;
            tensors.insert(
                name.to_string(),
                NamedTensor {
                    dims: var.dims().to_vec(),
                    data: t.to_vec1::<f32>()?,
                },
            );
        }
        Ok(Self { tensors, metadata })
    }

    /// Copies every tensor of `store` from the table; shapes must agree.
    pub fn load_into(&self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            let nt = self
                .tensors
                .get(name)
                .ok_or_else(|| MbevError::MissingTensor(name.to_string()))?;
            if nt.dims != var.dims() {
                return Err(MbevError::ShapeMismatch(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    nt.dims,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(nt.data.clone(), nt.dims.as_slice(), &Device::Cpu)?
                .to_dtype(store.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact_or(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(MbevError::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let count = read_u32(&mut r, "tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, "tensor name")? as usize;
            let mut name = vec![0u8; name_len];
            read_exact_or(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name)
                .map_err(|e| MbevError::InvalidConfig(format!("tensor name: {e}")))?;
            let rank = read_u32(&mut r, "tensor rank")? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut r, "tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; n * 4];
            read_exact_or(&mut r, &mut buf, "tensor data")?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, NamedTensor { dims, data });
        }
        let mut len = [0u8; 8];
        read_exact_or(&mut r, &mut len, "metadata length")?;
        let mut meta = vec![0u8; u64::from_le_bytes(len) as usize];
        read_exact_or(&mut r, &mut meta, "metadata")?;
        Ok(Self {
            tensors,
            metadata: serde_json::from_slice(&meta)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => MbevError::MissingCheckpoint(path.display().to_string()),
            _ => MbevError::Io(e),
        })?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => MbevError::TruncatedFile(what),
        _ => MbevError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
