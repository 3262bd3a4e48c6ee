//! Parameterized layers built from graph primitives.
//!
//! Each layer stores only the paths of its parameters; weights live in a
//! [`ParamTree`] and are bound into a [`Graph`] at forward time.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamTree};
use crate::rope::RopeTable;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const QK_NORM_EPS: f64 = 1e-6;

/// Affine map with weights stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        tree: &mut ParamTree<T>,
        path: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_init(tree, path, d_in, d_out, bias, Init::FanIn(1.0), rng)
    }

    pub fn with_init<T: Scalar>(
        tree: &mut ParamTree<T>,
        path: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = format!("{path}.weight");
        tree.init(&weight, &[d_in, d_out], init, rng)?;
        let bias = if bias {
            let b = format!("{path}.bias");
            tree.init(&b, &[d_out], Init::Zeros, rng)?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(g.param(b)?),
            None => None,
        };
        g.linear(x, w, b)
    }
}

/// Hidden width of a SwiGLU block matching the parameter count of a `4d` FFN:
/// `8d/3` rounded to the nearest multiple of 8.
pub fn swiglu_hidden(d: usize) -> usize {
    let raw = 8.0 * d as f64 / 3.0;
    (((raw / 8.0).round() as usize).max(1)) * 8
}

/// Bias-free gated feed-forward: `W₃((W₁x) ⊙ silu(W₂x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwiGlu {
    pub value: Linear,
    pub gate: Linear,
    pub out: Linear,
}

impl SwiGlu {
    pub fn new<T: Scalar>(
        tree: &mut ParamTree<T>,
        path: &str,
        d: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            value: Linear::new(tree, &format!("{path}.w1"), d, hidden, false, rng)?,
            gate: Linear::new(tree, &format!("{path}.w2"), d, hidden, false, rng)?,
            out: Linear::new(tree, &format!("{path}.w3"), hidden, d, false, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = self.value.forward(g, x)?;
        let b = self.gate.forward(g, x)?;
        let b = g.silu(b);
        let h = g.mul(a, b)?;
        self.out.forward(g, h)
    }
}

/// Per-block modulation generated from a conditioning vector.
///
/// Produces `chunks` triples `(γ, β, gate)` of width `d` each. Weights start
/// at zero and biases at `γ = 1, β = 0, gate = 0`, so a freshly initialized
/// block is the identity on its residual stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaLn {
    pub proj: Linear,
    pub d: usize,
    pub chunks: usize,
}

/// Modulation for one sub-block.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub gamma: Var,
    pub beta: Var,
    pub gate: Var,
}

impl AdaLn {
    pub fn new<T: Scalar>(
        tree: &mut ParamTree<T>,
        path: &str,
        d_cond: usize,
        d: usize,
        chunks: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let proj = Linear::with_init(tree, path, d_cond, 3 * chunks * d, true, Init::Zeros, rng)?;
        let bias = tree
            .get_mut(proj.bias.as_deref().expect("bias"))
            .expect("just inserted");
        for c in 0..chunks {
            for v in &mut bias.data_mut()[3 * c * d..3 * c * d + d] {
                *v = T::one();
            }
        }
        Ok(Self { proj, d, chunks })
    }

    /// `cond` is `[1, d_cond]`; conditioning passes through SiLU first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, cond: Var) -> Result<Vec<Modulation>> {
        let c = g.silu(cond);
        let m = self.proj.forward(g, c)?;
        let mut out = Vec::with_capacity(self.chunks);
        for i in 0..self.chunks {
            let base = 3 * i * self.d;
            out.push(Modulation {
                gamma: g.slice_cols(m, base, self.d)?,
                beta: g.slice_cols(m, base + self.d, self.d)?,
                gate: g.slice_cols(m, base + 2 * self.d, self.d)?,
            });
        }
        Ok(out)
    }
}

/// `γ ⊙ layer_norm(x) + β`.
pub fn modulate<T: Scalar>(g: &mut Graph<'_, T>, x: Var, m: &Modulation) -> Result<Var> {
    let h = g.layer_norm(x, LN_EPS);
    let h = g.mul_row(h, m.gamma)?;
    g.add_row(h, m.beta)
}

/// `x + gate ⊙ branch`.
pub fn gated_residual<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    branch: Var,
    gate: Var,
) -> Result<Var> {
    let b = g.mul_row(branch, gate)?;
    g.add(x, b)
}

/// Learned-affine layer norm for blocks without adaptive conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new<T: Scalar>(
        tree: &mut ParamTree<T>,
        path: &str,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let gamma = format!("{path}.gamma");
        let beta = format!("{path}.beta");
        tree.init(&gamma, &[d], Init::Constant(1.0), rng)?;
        tree.init(&beta, &[d], Init::Zeros, rng)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        let h = g.layer_norm(x, LN_EPS);
        let h = g.mul_row(h, gamma)?;
        g.add_row(h, beta)
    }
}

/// Multi-head self-attention with QK-normalization.
///
/// Queries and keys are L2-normalized per head and multiplied by learned
/// scalars (initialized to `√head_dim`, so normalized vectors keep unit RMS)
/// before rotary position encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub q_scale: String,
    pub k_scale: String,
    pub heads: usize,
    pub d: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(
        tree: &mut ParamTree<T>,
        path: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(crate::TensorError::Invalid(format!(
                "{d} channels not divisible by {heads} heads"
            )));
        }
        let init_scale = ((d / heads) as f64).sqrt();
        let q_scale = format!("{path}.q_scale");
        let k_scale = format!("{path}.k_scale");
        tree.init(&q_scale, &[1], Init::Constant(init_scale), rng)?;
        tree.init(&k_scale, &[1], Init::Constant(init_scale), rng)?;
        Ok(Self {
            qkv: Linear::new(tree, &format!("{path}.qkv"), d, 3 * d, false, rng)?,
            out: Linear::new(tree, &format!("{path}.out"), d, d, true, rng)?,
            q_scale,
            k_scale,
            heads,
            d,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        rope: Option<&Arc<RopeTable<T>>>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        Ok(self.forward_with_attention(g, x, rope, mask)?.0)
    }

    /// Like [`SelfAttention::forward`], also returning the attention node so
    /// its weights can be read with [`Graph::attention_weights`].
    pub fn forward_with_attention<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        rope: Option<&Arc<RopeTable<T>>>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let qkv = self.qkv.forward(g, x)?;
        let q = g.slice_cols(qkv, 0, self.d)?;
        let k = g.slice_cols(qkv, self.d, self.d)?;
        let v = g.slice_cols(qkv, 2 * self.d, self.d)?;
        let q = g.head_l2_norm(q, self.heads, QK_NORM_EPS)?;
        let k = g.head_l2_norm(k, self.heads, QK_NORM_EPS)?;
        let qs = g.param(&self.q_scale)?;
        let ks = g.param(&self.k_scale)?;
        let mut q = g.scale_by(q, qs)?;
        let mut k = g.scale_by(k, ks)?;
        if let Some(table) = rope {
            q = g.rotary(q, table.clone(), self.heads)?;
            k = g.rotary(k, table.clone(), self.heads)?;
        }
        let o = g.attention(q, k, v, mask, self.heads)?;
        Ok((self.out.forward(g, o)?, o))
    }
}
