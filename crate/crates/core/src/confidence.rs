//! Per-residue confidence: bin targets from realized LDDT-Cα, the expected
//! value readout, and the head's training loop over on-the-fly samples.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use simplefold_tensor::optim::{adamw_step, warmup_lr, AdamWConfig, AdamWState};
use simplefold_tensor::{Graph, ParamTree, Scalar, Tensor};

use crate::error::{CoreError, Result};
use crate::features::{FeatureBundle, COORD_SCALE};
use crate::geometry::Point;
use crate::metrics::{lddt_per_residue, AtomSelector};
use crate::model::{Model, ModelInputs, PlddtHead};
use crate::sampler::{sample, SamplerConfig, PLDDT_TRAIN_TAU};

pub const PLDDT_BINS: usize = 50;
const BIN_WIDTH: f64 = 100.0 / PLDDT_BINS as f64;

/// `⌊v/2⌋` clamped to the last bin, for `v` in `[0, 100]`.
pub fn lddt_bin(v: f64) -> usize {
    ((v / BIN_WIDTH).floor().max(0.0) as usize).min(PLDDT_BINS - 1)
}

pub fn bin_center(i: usize) -> f64 {
    BIN_WIDTH * i as f64 + BIN_WIDTH / 2.0
}

/// Per-residue LDDT-Cα on the 0–100 scale; `None` for residues without a Cα
/// or without any Cα neighbour inside the cutoff.
pub fn per_residue_lddt_ca(
    pred: &[Point],
    gt: &[Point],
    atom_to_residue: &[usize],
    ca: &[Option<usize>],
) -> Result<Vec<Option<f64>>> {
    let idx: Vec<usize> = ca.iter().flatten().copied().collect();
    let per = lddt_per_residue(pred, gt, atom_to_residue, ca.len(), AtomSelector::Indices(&idx))?;
    Ok(per
        .into_iter()
        .zip(ca)
        .map(|(v, c)| c.and(v).map(|v| 100.0 * v))
        .collect())
}

/// Bin targets from a predicted and a reference structure, both in Å.
pub fn plddt_target(
    pred: &[Point],
    gt: &[Point],
    atom_to_residue: &[usize],
    ca: &[Option<usize>],
) -> Result<Vec<Option<usize>>> {
    Ok(per_residue_lddt_ca(pred, gt, atom_to_residue, ca)?
        .into_iter()
        .map(|v| v.map(lddt_bin))
        .collect())
}

/// `Σ softmax(logits)_i·(2i + 1)` for each row of a `[N_r, 50]` tensor.
pub fn expected_plddt<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let (rows, cols) = logits.rows_cols();
    (0..rows)
        .map(|r| {
            let row: Vec<f64> = logits.data()[r * cols..(r + 1) * cols].iter().map(|v| v.as_f64()).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = w.iter().sum();
            w.iter().enumerate().map(|(i, p)| p / z * bin_center(i)).sum()
        })
        .collect()
}

/// Confidence logits for a structure in scaled units, read from the frozen
/// trunk at `t = 1`.
pub fn plddt_logits<T: Scalar>(
    model: &Model,
    folding: &ParamTree<T>,
    head: &PlddtHead,
    head_params: &ParamTree<T>,
    inputs: &ModelInputs<T>,
    x: &[Point],
) -> Result<Tensor<T>> {
    let mut g = Graph::new().bind(folding, false).bind(head_params, false);
    let tokens = model.trunk_tokens_at_one(&mut g, inputs, x)?;
    let logits = head.forward(&mut g, tokens, &inputs.residue_rope)?;
    Ok(g.value(logits).clone())
}

/// Per-residue pLDDT for a structure in Å.
pub fn predict_plddt<T: Scalar>(
    model: &Model,
    folding: &ParamTree<T>,
    head: &PlddtHead,
    head_params: &ParamTree<T>,
    inputs: &ModelInputs<T>,
    x_angstrom: &[Point],
) -> Result<Vec<f64>> {
    let x: Vec<Point> = x_angstrom.iter().map(|p| p.map(|v| v / COORD_SCALE)).collect();
    Ok(expected_plddt(&plddt_logits(model, folding, head, head_params, inputs, &x)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlddtTrainConfig {
    /// Structures drawn from the folding model.
    pub samples: u64,
    /// Head updates per drawn structure; the trunk tokens of a sample are
    /// fixed because the folding model is frozen.
    pub updates_per_sample: u64,
    /// Recent samples kept for updates; the first update of a step uses the
    /// fresh sample, the rest draw uniformly from this buffer.
    pub replay: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for PlddtTrainConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            updates_per_sample: 1,
            replay: 1,
            lr: 1e-4,
            warmup: 100,
            weight_decay: 0.0,
            sampler: SamplerConfig {
                n_steps: 200,
                tau: PLDDT_TRAIN_TAU,
                ..SamplerConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlddtStepReport {
    pub sample: u64,
    pub protein: String,
    pub loss: f64,
    pub mean_target_lddt: f64,
    pub skipped: bool,
}

impl PlddtStepReport {
    pub const CSV_HEADER: &'static str = "sample,protein,loss,mean_target_lddt,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.4},{}",
            self.sample,
            self.protein,
            self.loss,
            self.mean_target_lddt,
            u8::from(self.skipped)
        )
    }
}

/// Trains a confidence head against a frozen folding model. The folding tree
/// is only ever borrowed immutably and bound as non-trainable.
pub struct PlddtTrainer<'a> {
    pub model: &'a Model,
    pub folding: &'a ParamTree<f32>,
    pub head: PlddtHead,
    pub head_params: ParamTree<f32>,
    pub opt: AdamWState<f32>,
    pub cfg: PlddtTrainConfig,
    pub sample_index: u64,
    data: Vec<FeatureBundle>,
    cache: HashMap<usize, Arc<ModelInputs<f32>>>,
    buffer: VecDeque<Replay>,
}

struct Replay {
    tokens: Tensor<f32>,
    targets: Vec<Option<usize>>,
    inputs: Arc<ModelInputs<f32>>,
}

impl<'a> PlddtTrainer<'a> {
    pub fn new(
        model: &'a Model,
        folding: &'a ParamTree<f32>,
        head: PlddtHead,
        head_params: ParamTree<f32>,
        cfg: PlddtTrainConfig,
        data: Vec<FeatureBundle>,
    ) -> Result<Self> {
        cfg.sampler.validate()?;
        if data.is_empty() {
            return Err(CoreError::Invalid("no training proteins".into()));
        }
        if data.iter().any(|b| b.gt_pos.is_none()) {
            return Err(CoreError::MissingCoordinates("confidence targets"));
        }
        if cfg.replay == 0 {
            return Err(CoreError::Invalid("replay buffer needs room for one sample".into()));
        }
        if head.bins != PLDDT_BINS {
            return Err(CoreError::Invalid(format!("confidence head has {} bins, expected {PLDDT_BINS}", head.bins)));
        }
        if let Some(p) = head_params.paths().find(|p| folding.get(p).is_some()) {
            return Err(CoreError::Invalid(format!("head parameter {p} shadows the folding model")));
        }
        Ok(Self {
            opt: AdamWState::new(&head_params),
            model,
            folding,
            head,
            head_params,
            cfg,
            sample_index: 0,
            data,
            cache: HashMap::new(),
            buffer: VecDeque::new(),
        })
    }

    fn inputs(&mut self, idx: usize) -> Result<Arc<ModelInputs<f32>>> {
        if let Some(i) = self.cache.get(&idx) {
            return Ok(i.clone());
        }
        let i = Arc::new(ModelInputs::new(&self.model.cfg, &self.data[idx])?);
        self.cache.insert(idx, i.clone());
        Ok(i)
    }

    /// Draws one structure, builds its targets and runs the configured number
    /// of head updates. Diverged samples are skipped.
    pub fn step(&mut self) -> Result<PlddtStepReport> {
        let k = self.sample_index;
        self.sample_index += 1;
        let idx = (k as usize) % self.data.len();
        let inputs = self.inputs(idx)?;
        let bundle = &self.data[idx];
        let name = bundle.name.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(k);
        let pred = match sample(self.model, self.folding, &inputs, &self.cfg.sampler, &mut rng) {
            Ok(p) => p,
            Err(CoreError::Diverged(at)) => {
                log::warn!("sample {k}: diverged at step {at}, skipped");
                return Ok(PlddtStepReport {
                    sample: k,
                    protein: name,
                    loss: f64::NAN,
                    mean_target_lddt: f64::NAN,
                    skipped: true,
                });
            }
            Err(e) => return Err(e),
        };
        let gt = bundle.gt_angstrom().ok_or(CoreError::MissingCoordinates("confidence targets"))?;
        let realized = per_residue_lddt_ca(&pred, &gt, &bundle.atom_to_residue, &bundle.ca_indices())?;
        let targets: Vec<Option<usize>> = realized.iter().map(|v| v.map(lddt_bin)).collect();
        let known: Vec<f64> = realized.iter().flatten().copied().collect();
        let mean_target_lddt = known.iter().sum::<f64>() / known.len().max(1) as f64;

        let x: Vec<Point> = pred.iter().map(|p| p.map(|v| v / COORD_SCALE)).collect();
        let tokens = {
            let mut g = Graph::new().bind(self.folding, false);
            let t = self.model.trunk_tokens_at_one(&mut g, &inputs, &x)?;
            g.value(t).clone()
        };
        let adam = AdamWConfig {
            weight_decay: self.cfg.weight_decay,
            ..AdamWConfig::default()
        };
        if self.buffer.len() == self.cfg.replay {
            self.buffer.pop_front();
        }
        self.buffer.push_back(Replay { tokens, targets, inputs });
        let mut loss = f64::NAN;
        for u in 0..self.cfg.updates_per_sample {
            let pick = if u == 0 { self.buffer.len() - 1 } else { rng.random_range(0..self.buffer.len()) };
            let item = &self.buffer[pick];
            let mut g = Graph::new().bind(&self.head_params, true);
            let tv = g.constant(item.tokens.clone());
            let logits = self.head.forward(&mut g, tv, &item.inputs.residue_rope)?;
            let ce = g.cross_entropy(logits, &item.targets)?;
            let l = g.value(ce).data()[0].as_f64();
            if u == 0 {
                loss = l;
            }
            g.backward(ce)?;
            let grads = g.param_grads();
            if !l.is_finite() || !grads.all_finite() {
                log::warn!("sample {k}: non-finite head loss, update skipped");
                continue;
            }
            self.opt.step += 1;
            let lr = warmup_lr(self.cfg.lr, self.cfg.warmup, self.opt.step);
            adamw_step(
                &mut self.head_params,
                &mut self.opt.m,
                &mut self.opt.v,
                &grads,
                &adam,
                lr,
                self.opt.step,
            );
        }
        Ok(PlddtStepReport {
            sample: k,
            protein: name,
            loss,
            mean_target_lddt,
            skipped: false,
        })
    }
}
