//! Precomputed per-residue language-model embeddings (`SFEMB1` files).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 6] = b"SFEMB1";

/// Layer-stacked embeddings `[N_r, L, d_e]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub n_res: usize,
    pub layers: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Embedding {
    pub fn new(n_res: usize, layers: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_res * layers * dim {
            return Err(CoreError::Shape(format!(
                "embedding payload {} != {n_res}x{layers}x{dim}",
                data.len()
            )));
        }
        Ok(Self {
            n_res,
            layers,
            dim,
            data,
        })
    }

    /// `[L, d_e]` block of one residue.
    pub fn residue(&self, r: usize) -> &[f32] {
        let w = self.layers * self.dim;
        &self.data[r * w..(r + 1) * w]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.layers * self.dim);
        for &r in rows {
            data.extend_from_slice(self.residue(r));
        }
        Self {
            n_res: rows.len(),
            layers: self.layers,
            dim: self.dim,
            data,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for d in [self.n_res, self.layers, self.dim] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Format("not an SFEMB1 embedding file".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *d = usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| CoreError::Format("dimension overflow".into()))?;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CoreError::Format("dimension overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * n {
            return Err(CoreError::Format(format!(
                "payload has {} bytes, header implies {}",
                bytes.len(),
                4 * n
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims[0], dims[1], dims[2], data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
