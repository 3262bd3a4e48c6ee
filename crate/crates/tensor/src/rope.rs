//! Rotary position tables.
//!
//! A [`RopeTable`] holds one angle per (token, channel pair). Rotation acts on
//! consecutive channel pairs `(2j, 2j+1)` of every attention head, so the same
//! table serves all heads of a projection.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Frequency bank `θ_j = scale · base^(-2j / dim)` for `j < dim / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeFreqs {
    pub scale: f64,
    pub base: f64,
}

impl RopeFreqs {
    pub const fn standard(base: f64) -> Self {
        Self { scale: 1.0, base }
    }

    pub fn theta(&self, j: usize, dim: usize) -> f64 {
        self.scale * self.base.powf(-2.0 * j as f64 / dim as f64)
    }
}

impl Default for RopeFreqs {
    fn default() -> Self {
        Self::standard(10_000.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable<T> {
    rows: usize,
    pairs: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Self {
        Self {
            rows,
            pairs,
            cos: angles.iter().map(|a| T::from_f64_lossy(a.cos())).collect(),
            sin: angles.iter().map(|a| T::from_f64_lossy(a.sin())).collect(),
        }
    }

    /// Standard 1-D rotary table: pair `j` of token `n` turns by `θ_j · position_n`.
    pub fn one_d(positions: &[f64], head_dim: usize, freqs: RopeFreqs) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "rotary head dim must be even, got {head_dim}"
            )));
        }
        let pairs = head_dim / 2;
        let mut angles = Vec::with_capacity(positions.len() * pairs);
        for &p in positions {
            for j in 0..pairs {
                angles.push(freqs.theta(j, head_dim) * p);
            }
        }
        Ok(Self::from_angles(positions.len(), pairs, &angles))
    }

    /// Four-axis table: quarters 0..3 of each head follow the x, y, z conformer
    /// coordinates, quarter 3 the residue index.
    pub fn axial_4d(
        coords: &[[f64; 3]],
        residue_index: &[f64],
        head_dim: usize,
        coord_freqs: RopeFreqs,
        index_freqs: RopeFreqs,
    ) -> Result<Self> {
        if head_dim == 0 || head_dim % 8 != 0 {
            return Err(TensorError::Invalid(format!(
                "axial rotary head dim must be divisible by 8, got {head_dim}"
            )));
        }
        if coords.len() != residue_index.len() {
            return Err(TensorError::Invalid(format!(
                "axial rotary: {} coordinates vs {} residue indices",
                coords.len(),
                residue_index.len()
            )));
        }
        let quarter = head_dim / 4;
        let per_axis = quarter / 2;
        let pairs = head_dim / 2;
        let mut angles = Vec::with_capacity(coords.len() * pairs);
        for (c, &r) in coords.iter().zip(residue_index) {
            for j in 0..pairs {
                let axis = j / per_axis;
                let jj = j % per_axis;
                let a = if axis < 3 {
                    coord_freqs.theta(jj, quarter) * c[axis]
                } else {
                    index_freqs.theta(jj, quarter) * r
                };
                angles.push(a);
            }
        }
        Ok(Self::from_angles(coords.len(), pairs, &angles))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// Rotates (or with `inverse`, un-rotates) `[rows, heads · 2 · pairs]` data in place.
    pub(crate) fn apply(&self, data: &mut [T], heads: usize, inverse: bool) {
        let width = heads * self.pairs * 2;
        for (r, row) in data.chunks_exact_mut(width).enumerate() {
            let cos = &self.cos[r * self.pairs..(r + 1) * self.pairs];
            let sin = &self.sin[r * self.pairs..(r + 1) * self.pairs];
            for head in row.chunks_exact_mut(self.pairs * 2) {
                for (j, pair) in head.chunks_exact_mut(2).enumerate() {
                    let (c, s) = (cos[j], if inverse { -sin[j] } else { sin[j] });
                    let (x0, x1) = (pair[0], pair[1]);
                    pair[0] = x0 * c - x1 * s;
                    pair[1] = x0 * s + x1 * c;
                }
            }
        }
    }
}
