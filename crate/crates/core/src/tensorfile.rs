//! Binary tensor file format used for features, embeddings, centroids and
//! checkpoint payloads.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "TNSR"
//! version u8       currently 1
//! rank    u8
//! dims    rank x u32
//! payload product(dims) x f32, row-major
//! ```
//!
//! In-memory math runs in f64; files store f32. Writing truncates, reading
//! widens.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u8 = 1;

/// Raw tensor as read from disk: dims plus a flat row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn from_array1(a: &Array1<f64>) -> Self {
        RawTensor {
            dims: vec![a.len()],
            data: a.to_vec(),
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        RawTensor {
            dims: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn into_array2(self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::TensorFile(format!(
                "expected rank 2, got rank {}",
                self.dims.len()
            )));
        }
        Array2::from_shape_vec((self.dims[0], self.dims[1]), self.data)
            .map_err(|e| Error::TensorFile(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn write_tensor<W: Write>(mut w: W, dims: &[usize], data: &[f64]) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::DimMismatch(format!(
            "tensor payload has {} values but dims {:?} imply {}",
            data.len(),
            dims,
            n
        )));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, dims.len() as u8])?;
    for d in dims {
        let d32 = u32::try_from(*d)
            .map_err(|_| Error::TensorFile(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d32.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(n * 4);
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<RawTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::TensorFile(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(Error::TensorFile(format!(
            "unsupported version {}, expected {VERSION}",
            head[0]
        )));
    }
    let rank = head[1] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        dims.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(RawTensor { dims, data })
}

pub fn save(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, dims, data)?;
    crate::runio::write_atomic(path, &buf)
}

pub fn load(path: &Path) -> Result<RawTensor> {
    let f = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(f))
}
