//! Binary checkpoints.
//!
//! Layout (little-endian): magic `SFCKPT1`, `u32` version, `u64` step,
//! `u32`-prefixed UTF-8 metadata, then four tree sections in the order
//! live parameters, EMA shadow, Adam first moments, Adam second moments.
//! Each section is a `u8` presence flag followed, when present, by a `u64`
//! entry count and per entry: `u32`-prefixed path, `u32` rank, `u64` dims and
//! the `f32` payload in row-major order.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"SFCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    /// Free-form JSON describing the run (config, phase).
    pub meta: String,
    pub params: ParamTree<f32>,
    pub ema: Option<ParamTree<f32>>,
    pub adam_m: Option<ParamTree<f32>>,
    pub adam_v: Option<ParamTree<f32>>,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        write_str(w, &self.meta)?;
        write_tree(w, Some(&self.params))?;
        write_tree(w, self.ema.as_ref())?;
        write_tree(w, self.adam_m.as_ref())?;
        write_tree(w, self.adam_v.as_ref())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(TensorError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let step = read_u64(r)?;
        let meta = read_str(r)?;
        let params = read_tree(r)?
            .ok_or_else(|| TensorError::Format("checkpoint without parameters".into()))?;
        Ok(Self {
            step,
            meta,
            params,
            ema: read_tree(r)?,
            adam_m: read_tree(r)?,
            adam_v: read_tree(r)?,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tree(w: &mut impl Write, tree: Option<&ParamTree<f32>>) -> Result<()> {
    let Some(tree) = tree else {
        w.write_all(&[0])?;
        return Ok(());
    };
    w.write_all(&[1])?;
    w.write_all(&(tree.len() as u64).to_le_bytes())?;
    for (path, t) in tree.iter() {
        write_str(w, path)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| TensorError::Format(e.to_string()))
}

fn read_tree(r: &mut impl Read) -> Result<Option<ParamTree<f32>>> {
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    match flag[0] {
        0 => return Ok(None),
        1 => {}
        f => return Err(TensorError::Format(format!("bad section flag {f}"))),
    }
    let n = read_u64(r)?;
    let mut tree = ParamTree::new();
    for _ in 0..n {
        let path = read_str(r)?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * numel];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tree.insert(path, Tensor::new(shape, data)?)?;
    }
    Ok(Some(tree))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_section() {
        let mut p = ParamTree::new();
        p.insert("a.weight", Tensor::new(vec![2, 3], vec![1.5f32, -2.0, 0.25, 3.0, 1e-7, -0.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::scalar(7.0f32)).unwrap();
        let ck = Checkpoint {
            step: 42,
            meta: "{\"phase\":\"pretrain\"}".into(),
            ema: Some(p.clone()),
            adam_m: None,
            adam_v: Some(p.zeros_like()),
            params: p,
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..7], b"SFCKPT1");
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_foreign_magic() {
        let err = Checkpoint::read_from(&mut &b"NOTCKPT\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, TensorError::Format(_)));
    }
}
