//! The optimization loop: copies of a protein at different timesteps,
//! combined loss, averaged gradients, AdamW with warmup and an EMA shadow.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use simplefold_tensor::optim::{adamw_step, ema_update, warmup_lr, AdamWConfig, AdamWState};
use simplefold_tensor::{Checkpoint, Graph, ParamTree, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::features::{crop, FeatureBundle};
use crate::flow::{
    alpha_schedule, fm_loss_graph, gaussian_points, rigid_align_target, sample_timestep, smooth_lddt_graph,
    velocity_target, FlowState, LddtPairs, Phase, SMOOTH_LDDT_CUTOFF,
};
use crate::geometry::{random_rotation, Point, RigidTransform};
use crate::model::{Model, ModelConfig, ModelInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Copies of each protein per step, each with its own timestep.
    pub copies: usize,
    pub proteins_per_step: usize,
    pub max_residues: usize,
    pub lr: f64,
    pub warmup: u64,
    pub ema_decay: f64,
    pub lddt_cutoff: f64,
    /// LDDT weight schedule; follows `phase` when unset.
    pub alpha_schedule: Option<Phase>,
    pub weight_decay: f64,
    pub rigid_align: bool,
    pub augment: bool,
    pub steps: u64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain,
            copies: 4,
            proteins_per_step: 1,
            max_residues: 256,
            lr: 1e-4,
            warmup: 5000,
            ema_decay: 0.999,
            lddt_cutoff: SMOOTH_LDDT_CUTOFF,
            alpha_schedule: None,
            weight_decay: 0.0,
            rigid_align: true,
            augment: true,
            steps: 10_000,
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.copies == 0 || self.proteins_per_step == 0 || self.max_residues == 0 {
            return Err(CoreError::Invalid("copies, proteins_per_step and max_residues must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.ema_decay) || !(self.lddt_cutoff > 0.0) {
            return Err(CoreError::Invalid("need lr > 0, 0 ≤ ema_decay < 1, lddt_cutoff > 0".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.copies * self.proteins_per_step
    }

    pub fn alpha(&self, t: f64) -> f64 {
        alpha_schedule(t, self.alpha_schedule.unwrap_or(self.phase))
    }
}

/// Random draws for one copy.
#[derive(Clone, Debug, PartialEq)]
pub struct CopyDraw {
    pub rotation: RigidTransform,
    pub t: f64,
    pub eps: Vec<Point>,
}

impl CopyDraw {
    pub fn sample(rng: &mut impl Rng, n_atoms: usize, augment: bool) -> Self {
        let rotation = if augment { random_rotation(rng) } else { RigidTransform::identity() };
        let t = sample_timestep(rng);
        let eps = gaussian_points(rng, n_atoms);
        Self { rotation, t, eps }
    }

    pub fn flow_state(&self, x: &[Point]) -> FlowState {
        FlowState::new(self.rotation.apply(x), self.eps.clone(), self.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: Var,
    pub fm: f64,
    pub lddt: f64,
    pub alpha: f64,
}

/// `ℓ_FM + α·ℓ_LDDT` for one copy given the predicted velocity. With `align`
/// the clean structure is first superposed onto the (detached) one-step
/// estimate and the velocity target rebuilt from it.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    v_hat: Var,
    state: &FlowState,
    pairs: &Arc<LddtPairs>,
    alpha: f64,
    align: bool,
) -> Result<LossParts> {
    let x_t = g.constant(Tensor::<f64>::from_rows(&state.x_t).cast::<T>());
    let step = g.scale(v_hat, 1.0 - state.t);
    let x_hat = g.add(x_t, step)?;
    let target = if align {
        let estimate = g.value(x_hat).to_points();
        velocity_target(&rigid_align_target(&state.x, &estimate), &state.eps)
    } else {
        state.target_velocity()
    };
    let fm = fm_loss_graph(g, v_hat, &target)?;
    let lddt = smooth_lddt_graph(g, x_hat, pairs);
    let weighted = g.scale(lddt, alpha);
    let total = g.add(fm, weighted)?;
    Ok(LossParts {
        total,
        fm: g.value(fm).data()[0].as_f64(),
        lddt: g.value(lddt).data()[0].as_f64(),
        alpha,
    })
}

/// Loss and gradients of one copy.
pub fn copy_gradients<T: Scalar>(
    model: &Model,
    params: &ParamTree<T>,
    inputs: &ModelInputs<T>,
    state: &FlowState,
    pairs: &Arc<LddtPairs>,
    alpha: f64,
    align: bool,
) -> Result<(f64, f64, f64, ParamTree<T>)> {
    let mut g = Graph::new().bind(params, true);
    let f = model.forward(&mut g, inputs, &state.x_t, state.t)?;
    let parts = combined_loss(&mut g, f.velocity, state, pairs, alpha, align)?;
    let loss = g.value(parts.total).data()[0].as_f64();
    g.backward(parts.total)?;
    Ok((loss, parts.fm, parts.lddt, g.param_grads()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub fm: f64,
    pub lddt: f64,
    pub alpha: f64,
    pub t_min: f64,
    pub t_mean: f64,
    pub t_max: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub skipped: bool,
    /// Per-copy total losses in draw order.
    #[serde(skip)]
    pub copy_losses: Vec<f64>,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,loss,fm,lddt,alpha,t_min,t_mean,t_max,grad_norm,lr,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.4},{:.5},{:.5},{:.5},{:.6e},{:.6e},{}",
            self.step,
            self.loss,
            self.fm,
            self.lddt,
            self.alpha,
            self.t_min,
            self.t_mean,
            self.t_max,
            self.grad_norm,
            self.lr,
            u8::from(self.skipped)
        )
    }
}

struct Prepared {
    inputs: Arc<ModelInputs<f32>>,
    gt: Arc<Vec<Point>>,
    pairs: Arc<LddtPairs>,
}

/// Run description stored in a folding checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adam_step: u64,
}

impl CheckpointMeta {
    pub fn of(ckpt: &Checkpoint) -> Result<Self> {
        serde_json::from_str(&ckpt.meta).map_err(|e| CoreError::Format(format!("checkpoint metadata: {e}")))
    }
}

/// Training state over an in-memory set of featurized proteins.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub params: ParamTree<f32>,
    pub ema: ParamTree<f32>,
    pub opt: AdamWState<f32>,
    pub adam: AdamWConfig,
    /// Completed steps, skipped ones included.
    pub step: u64,
    /// Worker threads for per-copy forward/backward; 1 keeps everything on the caller.
    pub threads: usize,
    data: Vec<FeatureBundle>,
    cache: HashMap<usize, Arc<Prepared>>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig, data: Vec<FeatureBundle>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (model, params) = Model::new::<f32>(model_cfg, &mut rng)?;
        Self::from_params(model, params, None, cfg, data)
    }

    /// Starts from existing weights (for example a pretrain checkpoint) with a fresh optimizer.
    pub fn from_params(
        model: Model,
        params: ParamTree<f32>,
        ema: Option<ParamTree<f32>>,
        cfg: TrainConfig,
        data: Vec<FeatureBundle>,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(CoreError::Invalid("no training proteins".into()));
        }
        for b in &data {
            b.check()?;
            if b.gt_pos.is_none() {
                return Err(CoreError::MissingCoordinates("training target"));
            }
        }
        let skeleton = Model::new::<f32>(&model.cfg, &mut ChaCha8Rng::seed_from_u64(0))?.1;
        skeleton.check_compatible(&params)?;
        let ema = match ema {
            Some(e) => {
                skeleton.check_compatible(&e)?;
                e
            }
            None => params.clone(),
        };
        let adam = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        Ok(Self {
            opt: AdamWState::new(&params),
            model,
            cfg,
            params,
            ema,
            adam,
            step: 0,
            threads: 1,
            data,
            cache: HashMap::new(),
        })
    }

    /// Restores the full state written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, data: Vec<FeatureBundle>) -> Result<Self> {
        let meta = CheckpointMeta::of(ckpt)?;
        let model = Model::skeleton(&meta.model)?;
        let mut tr = Self::from_params(model, ckpt.params.clone(), ckpt.ema.clone(), meta.train, data)?;
        if let (Some(m), Some(v)) = (&ckpt.adam_m, &ckpt.adam_v) {
            tr.params.check_compatible(m)?;
            tr.params.check_compatible(v)?;
            tr.opt = AdamWState {
                m: m.clone(),
                v: v.clone(),
                step: meta.adam_step,
            };
        }
        tr.step = ckpt.step;
        Ok(tr)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            adam_step: self.opt.step,
        };
        Ok(Checkpoint {
            step: self.step,
            meta: serde_json::to_string(&meta)?,
            params: self.params.clone(),
            ema: Some(self.ema.clone()),
            adam_m: Some(self.opt.m.clone()),
            adam_v: Some(self.opt.v.clone()),
        })
    }

    pub fn data(&self) -> &[FeatureBundle] {
        &self.data
    }

    /// Deterministic stream for a given step, independent of history.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        rng
    }

    fn prepare(&mut self, idx: usize, rng: &mut ChaCha8Rng) -> Result<Arc<Prepared>> {
        let bundle = &self.data[idx];
        let needs_crop = bundle.n_res() > self.cfg.max_residues;
        if !needs_crop {
            if let Some(p) = self.cache.get(&idx) {
                return Ok(p.clone());
            }
        }
        let cropped = if needs_crop { crop(bundle, self.cfg.max_residues, rng)? } else { bundle.clone() };
        let gt = cropped.gt_pos.clone().ok_or(CoreError::MissingCoordinates("training target"))?;
        let prepared = Arc::new(Prepared {
            inputs: Arc::new(ModelInputs::new(&self.model.cfg, &cropped)?),
            pairs: Arc::new(LddtPairs::new(&gt, self.cfg.lddt_cutoff)),
            gt: Arc::new(gt),
        });
        if !needs_crop {
            self.cache.insert(idx, prepared.clone());
        }
        Ok(prepared)
    }

    /// One optimizer step. Non-finite losses or gradients skip the update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let mut rng = self.step_rng(step);
        let n = self.data.len();
        let mut jobs = Vec::new();
        for j in 0..self.cfg.proteins_per_step {
            let idx = (step as usize * self.cfg.proteins_per_step + j) % n;
            let prep = self.prepare(idx, &mut rng)?;
            for _ in 0..self.cfg.copies {
                let draw = CopyDraw::sample(&mut rng, prep.inputs.n_atoms, self.cfg.augment);
                let state = draw.flow_state(&prep.gt);
                jobs.push((prep.clone(), state));
            }
        }

        let results = self.run_jobs(&jobs)?;
        let count = jobs.len() as f64;
        let mut grads = self.params.zeros_like();
        let (mut loss, mut fm, mut lddt, mut alpha) = (0.0, 0.0, 0.0, 0.0);
        let mut copy_losses = Vec::with_capacity(jobs.len());
        for ((_, state), (l, f, d, gr)) in jobs.iter().zip(&results) {
            grads.add_scaled(gr, 1.0 / count as f32);
            loss += l / count;
            fm += f / count;
            lddt += d / count;
            alpha += self.cfg.alpha(state.t) / count;
            copy_losses.push(*l);
        }
        let ts: Vec<f64> = jobs.iter().map(|(_, s)| s.t).collect();
        let grad_norm = grads.global_norm();
        let lr = warmup_lr(self.cfg.lr, self.cfg.warmup, step + 1);
        let skipped = !loss.is_finite() || !grad_norm.is_finite();
        if skipped {
            log::warn!("step {step}: non-finite loss or gradient, update skipped");
        } else {
            self.opt.step += 1;
            adamw_step(
                &mut self.params,
                &mut self.opt.m,
                &mut self.opt.v,
                &grads,
                &self.adam,
                lr,
                self.opt.step,
            );
            ema_update(&mut self.ema, &self.params, self.cfg.ema_decay);
        }
        self.step += 1;
        Ok(StepReport {
            step,
            loss,
            fm,
            lddt,
            alpha,
            t_min: ts.iter().cloned().fold(f64::INFINITY, f64::min),
            t_mean: ts.iter().sum::<f64>() / ts.len() as f64,
            t_max: ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            grad_norm,
            lr,
            skipped,
            copy_losses,
        })
    }

    #[allow(clippy::type_complexity)]
    fn run_jobs(&self, jobs: &[(Arc<Prepared>, FlowState)]) -> Result<Vec<(f64, f64, f64, ParamTree<f32>)>> {
        let one = |(prep, state): &(Arc<Prepared>, FlowState)| {
            copy_gradients(
                &self.model,
                &self.params,
                &prep.inputs,
                state,
                &prep.pairs,
                self.cfg.alpha(state.t),
                self.cfg.rigid_align,
            )
        };
        let threads = self.threads.clamp(1, jobs.len().max(1));
        if threads == 1 {
            return jobs.iter().map(one).collect();
        }
        // Contiguous chunks, joined in order, so the reduction above is fixed.
        let per = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(per)
                .map(|chunk| s.spawn(move || chunk.iter().map(one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(jobs.len());
            for h in handles {
                out.extend(h.join().expect("training worker panicked")?);
            }
            Ok(out)
        })
    }
}
