//! The velocity network: atom encoder, residue trunk, atom decoder.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use simplefold_tensor::fourier::{fourier_embed, sinusoidal_embedding};
use simplefold_tensor::nn::{self, swiglu_hidden, AdaLn, LayerNorm, Linear, SelfAttention, SwiGlu};
use simplefold_tensor::{Graph, Init, ParamTree, RopeFreqs, RopeTable, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::features::{FeatureBundle, ELEMENT_CLASSES, NAME_CHARS, NAME_CHAR_CLASSES};
use crate::geometry::Point;
use crate::residues::NUM_RESTYPES;

pub const MASK_NEG: f64 = -1e9;
/// Width of the static per-atom reference features.
pub const REF_FEATURES: usize = 3 + 1 + 1 + ELEMENT_CLASSES + NAME_CHARS * NAME_CHAR_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Conditioning {
    Learned,
    /// Precomputed embeddings with `layers` stacked layers of width `dim`.
    Precomputed { layers: usize, dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub atom_dim: usize,
    pub atom_heads: usize,
    pub atom_blocks: usize,
    pub trunk_dim: usize,
    pub trunk_heads: usize,
    pub trunk_blocks: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub time_freq_dim: usize,
    pub local_window: usize,
    pub n_freq: usize,
    pub coord_rope_scale: f64,
    pub coord_rope_base: f64,
    pub index_rope_base: f64,
    pub conditioning: Conditioning,
    pub plddt_blocks: usize,
    pub plddt_heads: usize,
    pub plddt_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            atom_dim: 64,
            atom_heads: 4,
            atom_blocks: 1,
            trunk_dim: 128,
            trunk_heads: 4,
            trunk_blocks: 2,
            cond_dim: 64,
            time_dim: 128,
            time_freq_dim: 256,
            local_window: 4,
            n_freq: 16,
            coord_rope_scale: std::f64::consts::PI / 0.4,
            coord_rope_base: 10_000.0,
            index_rope_base: 10_000.0,
            conditioning: Conditioning::Learned,
            plddt_blocks: 4,
            plddt_heads: 4,
            plddt_bins: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Invalid(m));
        for (name, d, h) in [
            ("atom", self.atom_dim, self.atom_heads),
            ("trunk", self.trunk_dim, self.trunk_heads),
            ("plddt", self.trunk_dim, self.plddt_heads),
        ] {
            if h == 0 || d == 0 || d % h != 0 {
                return bad(format!("{name} width {d} not divisible by {h} heads"));
            }
        }
        if (self.atom_dim / self.atom_heads) % 8 != 0 {
            return bad(format!(
                "atom head width {} must be a multiple of 8 for axial RoPE",
                self.atom_dim / self.atom_heads
            ));
        }
        if (self.trunk_dim / self.trunk_heads) % 2 != 0 || (self.trunk_dim / self.plddt_heads) % 2 != 0 {
            return bad("trunk head width must be even".into());
        }
        if self.time_freq_dim % 2 != 0 || self.time_freq_dim == 0 {
            return bad("time_freq_dim must be even".into());
        }
        if self.plddt_bins == 0 {
            return bad("plddt_bins must be positive".into());
        }
        Ok(())
    }

    fn coord_freqs(&self) -> RopeFreqs {
        RopeFreqs {
            scale: self.coord_rope_scale,
            base: self.coord_rope_base,
        }
    }

    fn index_freqs(&self) -> RopeFreqs {
        RopeFreqs::standard(self.index_rope_base)
    }
}

/// Additive local attention mask over atoms: `0` when the residues of `i`
/// and `j` are at most `window` apart, else `-1e9`.
pub fn local_mask<T: Scalar>(atom_to_residue: &[usize], window: usize) -> Tensor<T> {
    let n = atom_to_residue.len();
    let neg = T::from_f64_lossy(MASK_NEG);
    let mut data = vec![T::zero(); n * n];
    for (i, &ri) in atom_to_residue.iter().enumerate() {
        for (j, &rj) in atom_to_residue.iter().enumerate() {
            if ri.abs_diff(rj) > window {
                data[i * n + j] = neg;
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Bundle-derived tensors reused across every forward pass on one chain.
pub struct ModelInputs<T: Scalar> {
    pub n_res: usize,
    pub n_atoms: usize,
    pub ref_features: Tensor<T>,
    pub atom_rope: Arc<RopeTable<T>>,
    pub residue_rope: Arc<RopeTable<T>>,
    pub mask: Tensor<T>,
    pub segments: Arc<Vec<usize>>,
    pub restype: Tensor<T>,
    /// Embeddings laid out `[N_r · d, L]` for the layer-weighted sum.
    pub embedding: Option<Tensor<T>>,
}

impl<T: Scalar> ModelInputs<T> {
    pub fn new(cfg: &ModelConfig, b: &FeatureBundle) -> Result<Self> {
        b.check()?;
        let na = b.n_atoms();
        let mut feats = Vec::with_capacity(na * REF_FEATURES);
        let elements = b.ref_element_one_hot();
        let names = b.ref_atom_name_one_hot();
        let nw = NAME_CHARS * NAME_CHAR_CLASSES;
        for i in 0..na {
            feats.extend(b.ref_pos[i].iter().map(|&v| T::from_f64_lossy(v)));
            feats.push(T::from_f64_lossy(b.ref_mask[i] as f64));
            feats.push(T::from_f64_lossy(b.ref_charge[i] as f64));
            feats.extend(elements[i * ELEMENT_CLASSES..(i + 1) * ELEMENT_CLASSES].iter().map(|&v| T::from_f64_lossy(v as f64)));
            feats.extend(names[i * nw..(i + 1) * nw].iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let atom_index: Vec<f64> = b.atom_to_residue.iter().map(|&r| b.residue_index[r] as f64).collect();
        let res_index: Vec<f64> = b.residue_index.iter().map(|&r| r as f64).collect();
        let atom_rope = RopeTable::axial_4d(
            &b.ref_pos,
            &atom_index,
            cfg.atom_dim / cfg.atom_heads,
            cfg.coord_freqs(),
            cfg.index_freqs(),
        )?;
        let residue_rope = RopeTable::one_d(&res_index, cfg.trunk_dim / cfg.trunk_heads, cfg.index_freqs())?;
        let restype = Tensor::new(
            vec![b.n_res(), NUM_RESTYPES],
            b.restype_one_hot().iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )?;
        let embedding = match &cfg.conditioning {
            Conditioning::Learned => None,
            Conditioning::Precomputed { layers, dim } => {
                let e = b
                    .esm_embed
                    .as_ref()
                    .ok_or_else(|| CoreError::Invalid(format!("chain {} has no precomputed embedding", b.name)))?;
                if e.layers != *layers || e.dim != *dim {
                    return Err(CoreError::Shape(format!(
                        "embedding is {}x{}, model expects {layers}x{dim}",
                        e.layers, e.dim
                    )));
                }
                let mut data = Vec::with_capacity(e.data.len());
                for r in 0..e.n_res {
                    let block = e.residue(r);
                    for c in 0..e.dim {
                        for l in 0..e.layers {
                            data.push(T::from_f64_lossy(block[l * e.dim + c] as f64));
                        }
                    }
                }
                Some(Tensor::new(vec![e.n_res * e.dim, e.layers], data)?)
            }
        };
        Ok(Self {
            n_res: b.n_res(),
            n_atoms: na,
            ref_features: Tensor::new(vec![na, REF_FEATURES], feats)?,
            atom_rope: Arc::new(atom_rope),
            residue_rope: Arc::new(residue_rope),
            mask: local_mask(&b.atom_to_residue, cfg.local_window),
            segments: Arc::new(b.atom_to_residue.clone()),
            restype,
            embedding,
        })
    }
}

/// Pre-norm transformer block with adaptive modulation of both sub-layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DitBlock {
    pub ada: AdaLn,
    pub attn: SelfAttention,
    pub mlp: SwiGlu,
}

impl DitBlock {
    fn new<T: Scalar>(tree: &mut ParamTree<T>, path: &str, d: usize, heads: usize, d_cond: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ada: AdaLn::new(tree, &format!("{path}.ada"), d_cond, d, 2, rng)?,
            attn: SelfAttention::new(tree, &format!("{path}.attn"), d, heads, rng)?,
            mlp: SwiGlu::new(tree, &format!("{path}.mlp"), d, swiglu_hidden(d), rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        cond: Var,
        rope: &Arc<RopeTable<T>>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let m = self.ada.forward(g, cond)?;
        let h = nn::modulate(g, x, &m[0])?;
        let a = self.attn.forward(g, h, Some(rope), mask)?;
        let x = nn::gated_residual(g, x, a, m[0].gate)?;
        let h = nn::modulate(g, x, &m[1])?;
        let f = self.mlp.forward(g, h)?;
        Ok(nn::gated_residual(g, x, f, m[1].gate)?)
    }

    /// Post-softmax attention weights `[heads, N, N]` of this block for input `x`.
    pub fn attention_probe<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        cond: Var,
        rope: &Arc<RopeTable<T>>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Vec<T>> {
        let m = self.ada.forward(g, cond)?;
        let h = nn::modulate(g, x, &m[0])?;
        let (_, attn) = self.attn.forward_with_attention(g, h, Some(rope), mask)?;
        Ok(g.attention_weights(attn).expect("attention node").to_vec())
    }
}

/// Pre-norm transformer block without conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: SwiGlu,
}

impl PlainBlock {
    fn new<T: Scalar>(tree: &mut ParamTree<T>, path: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(tree, &format!("{path}.ln1"), d, rng)?,
            attn: SelfAttention::new(tree, &format!("{path}.attn"), d, heads, rng)?,
            ln2: LayerNorm::new(tree, &format!("{path}.ln2"), d, rng)?,
            mlp: SwiGlu::new(tree, &format!("{path}.mlp"), d, swiglu_hidden(d), rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, rope: &Arc<RopeTable<T>>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, Some(rope), None)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.mlp.forward(g, h)?;
        Ok(g.add(x, f)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Conditioner {
    Learned { table: String, proj: Linear },
    Precomputed { layer_logits: String, layers: usize, dim: usize, proj: Linear },
}

impl Conditioner {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &ModelInputs<T>) -> Result<Var> {
        match self {
            Conditioner::Learned { table, proj } => {
                let oh = g.constant(inputs.restype.clone());
                let w = g.param(table)?;
                let e = g.matmul(oh, w)?;
                Ok(proj.forward(g, e)?)
            }
            Conditioner::Precomputed { layer_logits, layers, dim, proj } => {
                let emb = inputs
                    .embedding
                    .as_ref()
                    .ok_or_else(|| CoreError::Invalid("precomputed embedding missing".into()))?;
                let logits = g.param(layer_logits)?;
                let w = g.softmax_rows(logits);
                let w = g.reshape(w, &[*layers, 1])?;
                let e = g.constant(emb.clone());
                let mixed = g.matmul(e, w)?;
                let mixed = g.reshape(mixed, &[inputs.n_res, *dim])?;
                Ok(proj.forward(g, mixed)?)
            }
        }
    }
}

/// Layer descriptors of the folding network; weights live in a [`ParamTree`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub time_in: Linear,
    pub time_out: Linear,
    pub atom_in: Linear,
    pub encoder: Vec<DitBlock>,
    pub conditioner: Conditioner,
    pub trunk_in: Linear,
    pub trunk: Vec<DitBlock>,
    pub ungroup: Linear,
    pub decoder: Vec<DitBlock>,
    pub out_norm: LayerNorm,
    pub out: Linear,
}

/// Intermediate tokens of one forward pass.
pub struct Forward {
    pub velocity: Var,
    pub atom_tokens: Var,
    pub residue_tokens: Var,
    pub trunk_tokens: Var,
}

impl Model {
    pub fn new<T: Scalar>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamTree<T>)> {
        cfg.validate()?;
        let mut tree = ParamTree::new();
        let t = &mut tree;
        let (da, dt, dc) = (cfg.atom_dim, cfg.trunk_dim, cfg.time_dim);
        let time_in = Linear::new(t, "time.in", cfg.time_freq_dim, dc, true, rng)?;
        let time_out = Linear::new(t, "time.out", dc, dc, true, rng)?;
        let atom_in = Linear::new(t, "encoder.in", 6 * cfg.n_freq + REF_FEATURES, da, true, rng)?;
        let encoder = (0..cfg.atom_blocks)
            .map(|i| DitBlock::new(t, &format!("encoder.block{i}"), da, cfg.atom_heads, dc, rng))
            .collect::<Result<Vec<_>>>()?;
        let conditioner = match &cfg.conditioning {
            Conditioning::Learned => {
                let table = "cond.restype".to_string();
                t.init(&table, &[NUM_RESTYPES, cfg.cond_dim], Init::Normal(1.0), rng)?;
                Conditioner::Learned {
                    table,
                    proj: Linear::new(t, "cond.proj", cfg.cond_dim, cfg.cond_dim, true, rng)?,
                }
            }
            Conditioning::Precomputed { layers, dim } => {
                let layer_logits = "cond.layer_logits".to_string();
                t.init(&layer_logits, &[1, *layers], Init::Zeros, rng)?;
                Conditioner::Precomputed {
                    layer_logits,
                    layers: *layers,
                    dim: *dim,
                    proj: Linear::new(t, "cond.proj", *dim, cfg.cond_dim, true, rng)?,
                }
            }
        };
        let trunk_in = Linear::new(t, "trunk.in", da + cfg.cond_dim, dt, true, rng)?;
        let trunk = (0..cfg.trunk_blocks)
            .map(|i| DitBlock::new(t, &format!("trunk.block{i}"), dt, cfg.trunk_heads, dc, rng))
            .collect::<Result<Vec<_>>>()?;
        let ungroup = Linear::new(t, "ungroup", dt, da, true, rng)?;
        let decoder = (0..cfg.atom_blocks)
            .map(|i| DitBlock::new(t, &format!("decoder.block{i}"), da, cfg.atom_heads, dc, rng))
            .collect::<Result<Vec<_>>>()?;
        let out_norm = LayerNorm::new(t, "decoder.norm", da, rng)?;
        let out = Linear::new(t, "decoder.out", da, 3, true, rng)?;
        let model = Self {
            cfg: cfg.clone(),
            time_in,
            time_out,
            atom_in,
            encoder,
            conditioner,
            trunk_in,
            trunk,
            ungroup,
            decoder,
            out_norm,
            out,
        };
        Ok((model, tree))
    }

    /// Descriptors only, for loading weights from a checkpoint.
    pub fn skeleton(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(Self::new::<f32>(cfg, &mut rng)?.0)
    }

    pub fn time_embedding<T: Scalar>(&self, g: &mut Graph<'_, T>, t: f64) -> Result<Var> {
        let s = g.constant(sinusoidal_embedding(t, self.cfg.time_freq_dim));
        let h = self.time_in.forward(g, s)?;
        let h = g.silu(h);
        Ok(self.time_out.forward(g, h)?)
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &ModelInputs<T>, x_t: &[Point], cond: Var) -> Result<Var> {
        if x_t.len() != inputs.n_atoms {
            return Err(CoreError::Shape(format!("{} coordinates for {} atoms", x_t.len(), inputs.n_atoms)));
        }
        let four = g.constant(fourier_embed(x_t, self.cfg.n_freq));
        let refs = g.constant(inputs.ref_features.clone());
        let h = g.concat_cols(&[four, refs])?;
        let mut a = self.atom_in.forward(g, h)?;
        for b in &self.encoder {
            a = b.forward(g, a, cond, &inputs.atom_rope, Some(&inputs.mask))?;
        }
        Ok(a)
    }

    pub fn group<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &ModelInputs<T>, atoms: Var) -> Result<Var> {
        Ok(g.segment_mean(atoms, inputs.segments.clone(), inputs.n_res)?)
    }

    pub fn run_trunk<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &ModelInputs<T>, residues: Var, cond: Var) -> Result<Var> {
        let e = self.conditioner.forward(g, inputs)?;
        let h = g.concat_cols(&[residues, e])?;
        let mut r = self.trunk_in.forward(g, h)?;
        for b in &self.trunk {
            r = b.forward(g, r, cond, &inputs.residue_rope, None)?;
        }
        Ok(r)
    }

    pub fn ungroup<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &ModelInputs<T>, trunk: Var, skip: Option<Var>) -> Result<Var> {
        let p = self.ungroup.forward(g, trunk)?;
        let a = g.gather_rows(p, inputs.segments.clone())?;
        match skip {
            Some(s) => Ok(g.add(a, s)?),
            None => Ok(a),
        }
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &ModelInputs<T>, atoms: Var, cond: Var) -> Result<Var> {
        let mut a = atoms;
        for b in &self.decoder {
            a = b.forward(g, a, cond, &inputs.atom_rope, Some(&inputs.mask))?;
        }
        let h = self.out_norm.forward(g, a)?;
        Ok(self.out.forward(g, h)?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &ModelInputs<T>, x_t: &[Point], t: f64) -> Result<Forward> {
        let cond = self.time_embedding(g, t)?;
        let atom_tokens = self.encode(g, inputs, x_t, cond)?;
        let residue_tokens = self.group(g, inputs, atom_tokens)?;
        let trunk_tokens = self.run_trunk(g, inputs, residue_tokens, cond)?;
        let up = self.ungroup(g, inputs, trunk_tokens, Some(atom_tokens))?;
        let velocity = self.decode(g, inputs, up, cond)?;
        Ok(Forward {
            velocity,
            atom_tokens,
            residue_tokens,
            trunk_tokens,
        })
    }

    /// Predicted velocity `[N_a, 3]` in scaled units.
    pub fn predict_velocity<T: Scalar>(&self, params: &ParamTree<T>, inputs: &ModelInputs<T>, x_t: &[Point], t: f64) -> Result<Vec<Point>> {
        let mut g = Graph::new().bind(params, false);
        let f = self.forward(&mut g, inputs, x_t, t)?;
        Ok(g.value(f.velocity).to_points())
    }

    /// Trunk output at timestep 1 for a given structure (scaled units), the
    /// input of the confidence head.
    pub fn trunk_tokens_at_one<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &ModelInputs<T>, x: &[Point]) -> Result<Var> {
        let cond = self.time_embedding(g, 1.0)?;
        let a = self.encode(g, inputs, x, cond)?;
        let r = self.group(g, inputs, a)?;
        self.run_trunk(g, inputs, r, cond)
    }
}

/// The confidence head over trunk tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PlddtHead {
    pub blocks: Vec<PlainBlock>,
    pub norm: LayerNorm,
    pub out: Linear,
    pub bins: usize,
}

impl PlddtHead {
    pub fn new<T: Scalar>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamTree<T>)> {
        cfg.validate()?;
        let mut tree = ParamTree::new();
        let blocks = (0..cfg.plddt_blocks)
            .map(|i| PlainBlock::new(&mut tree, &format!("plddt.block{i}"), cfg.trunk_dim, cfg.plddt_heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut tree, "plddt.norm", cfg.trunk_dim, rng)?;
        let out = Linear::new(&mut tree, "plddt.out", cfg.trunk_dim, cfg.plddt_bins, true, rng)?;
        Ok((
            Self {
                blocks,
                norm,
                out,
                bins: cfg.plddt_bins,
            },
            tree,
        ))
    }

    pub fn skeleton(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(Self::new::<f32>(cfg, &mut rng)?.0)
    }

    /// Logits `[N_r, bins]`; the residue RoPE table must match the trunk's head width.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var, rope: &Arc<RopeTable<T>>) -> Result<Var> {
        let mut x = tokens;
        for b in &self.blocks {
            x = b.forward(g, x, rope)?;
        }
        let h = self.norm.forward(g, x)?;
        Ok(self.out.forward(g, h)?)
    }
}
