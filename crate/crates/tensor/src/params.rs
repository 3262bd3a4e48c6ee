use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by path.
///
/// Also used for gradients and optimizer moments, which share the layout of
/// the tree they belong to.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamTree<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
}

impl<T: Scalar> ParamTree<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(TensorError::DuplicatePath(path));
        }
        self.entries.insert(path, tensor);
        Ok(())
    }

    /// Registers a freshly initialized parameter; `shape[0]` is the fan-in.
    pub fn init(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Constant(c) => vec![T::from_f64_lossy(c); numel],
            Init::Normal(std) => sample_normal(numel, std, rng),
            Init::FanIn(gain) => {
                let fan_in = shape.first().copied().unwrap_or(1).max(1);
                sample_normal(numel, gain / (fan_in as f64).sqrt(), rng)
            }
        };
        self.insert(path, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamTree<U> {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// `self += scale · other` over the paths of `other`; unknown paths are added.
    pub fn add_scaled(&mut self, other: &ParamTree<T>, scale: T) {
        for (path, t) in &other.entries {
            match self.entries.get_mut(path) {
                Some(dst) => {
                    for (d, &s) in dst.data_mut().iter_mut().zip(t.data()) {
                        *d += scale * s;
                    }
                }
                None => {
                    self.entries.insert(path.clone(), t.map(|v| v * scale));
                }
            }
        }
    }

    pub fn scale(&mut self, scale: T) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    /// Checks that `other` has the same paths and shapes, naming the first difference.
    pub fn check_compatible<U: Scalar>(&self, other: &ParamTree<U>) -> Result<()> {
        let mut a = self.entries.iter();
        let mut b = other.entries.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((pa, ta)), Some((pb, tb))) => {
                    if pa != pb {
                        let first = pa.min(pb).clone();
                        return Err(TensorError::Incompatible {
                            path: first,
                            detail: "present in only one tree".into(),
                        });
                    }
                    if ta.shape() != tb.shape() {
                        return Err(TensorError::Incompatible {
                            path: pa.clone(),
                            detail: format!("shape {:?} vs {:?}", ta.shape(), tb.shape()),
                        });
                    }
                }
                (Some((p, _)), None) | (None, Some((p, _))) => {
                    return Err(TensorError::Incompatible {
                        path: p.clone(),
                        detail: "present in only one tree".into(),
                    })
                }
            }
        }
    }

    /// Hash of every path, shape and bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (path, t) in &self.entries {
            path.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Subtree of paths starting with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

fn sample_normal<T: Scalar>(n: usize, std: f64, rng: &mut impl Rng) -> Vec<T> {
    if std == 0.0 {
        return vec![T::zero(); n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
}
