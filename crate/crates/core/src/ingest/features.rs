//! Binary feature matrices.
//!
//! Layout: `b"CHRN" | version: u16 | n: u64 | dim: u64 | n*dim f32`, all
//! little-endian, rows in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CHRN";
pub const FEATURE_VERSION: u16 = 1;

/// Row-major `n_samples x dim` matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_samples: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n_samples: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if n_samples.checked_mul(dim) != Some(values.len()) {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill a {n_samples}x{dim} matrix",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(FeatureMatrix {
            n_samples,
            dim,
            values,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} values, expected {dim}",
                    r.len()
                )));
            }
            values.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(rows.len(), dim, values)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on zero width
        (0..self.n_samples).map(move |i| self.row(i))
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            n_samples: indices.len(),
            dim: self.dim,
            values,
        }
    }
}

pub fn write_features<W: Write>(mut w: W, m: &FeatureMatrix) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_u16::<LittleEndian>(FEATURE_VERSION)?;
    w.write_u64::<LittleEndian>(m.n_samples as u64)?;
    w.write_u64::<LittleEndian>(m.dim as u64)?;
    for &v in &m.values {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CorruptFile("feature header truncated".into()))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::CorruptFile("not a feature file".into()));
    }
    let header = (|| -> std::io::Result<(u16, u64, u64)> {
        Ok((
            r.read_u16::<LittleEndian>()?,
            r.read_u64::<LittleEndian>()?,
            r.read_u64::<LittleEndian>()?,
        ))
    })()
    .map_err(|_| Error::CorruptFile("feature header truncated".into()))?;
    let (version, n, dim) = header;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let count = usize::try_from(n)
        .ok()
        .zip(usize::try_from(dim).ok())
        .and_then(|(n, d)| n.checked_mul(d))
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| Error::CorruptFile(format!("implausible shape {n}x{dim}")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::ShapeMismatch(format!(
            "header declares {n}x{dim} ({count} values) but the file holds {} bytes of data",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMatrix::new(n as usize, dim as usize, values)
}

pub fn save_features(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    write_features(BufWriter::new(File::create(path)?), m)
}

/// Load a feature file and check its shape against the expected one, when
/// given.
pub fn load_features(
    path: impl AsRef<Path>,
    expected_n: Option<usize>,
    expected_dim: Option<usize>,
) -> Result<FeatureMatrix> {
    let m = read_features(BufReader::new(File::open(path)?))?;
    if expected_n.is_some_and(|n| n != m.n_samples) || expected_dim.is_some_and(|d| d != m.dim) {
        return Err(Error::ShapeMismatch(format!(
            "expected {}x{}, file holds {}x{}",
            expected_n.map_or("?".into(), |n| n.to_string()),
            expected_dim.map_or("?".into(), |d| d.to_string()),
            m.n_samples,
            m.dim
        )));
    }
    Ok(m)
}
