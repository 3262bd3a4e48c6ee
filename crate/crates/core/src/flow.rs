//! Flow-matching algebra: interpolant, timestep law, losses and loss weights.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use simplefold_tensor::{CustomOp, Graph, Scalar, Tensor, Var};

use crate::error::Result;
use crate::features::COORD_SCALE;
use crate::geometry::{distance, kabsch_align, Point};

pub const LOGIT_NORMAL_MEAN: f64 = 0.8;
pub const LOGIT_NORMAL_STD: f64 = 1.7;
pub const LOGIT_NORMAL_WEIGHT: f64 = 0.98;
pub const T_CLAMP: f64 = 1e-5;
pub const SMOOTH_LDDT_CUTOFF: f64 = 15.0;
const SMOOTH_LDDT_OFFSETS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Finetune,
    MdFinetune,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `0.98·LN(0.8, 1.7) + 0.02·U(0, 1)`, clamped away from the endpoints.
pub fn sample_timestep(rng: &mut impl Rng) -> f64 {
    let t = if rng.random::<f64>() < LOGIT_NORMAL_WEIGHT {
        let z: f64 = rng.sample(StandardNormal);
        logistic(LOGIT_NORMAL_MEAN + LOGIT_NORMAL_STD * z)
    } else {
        rng.random::<f64>()
    };
    t.clamp(T_CLAMP, 1.0 - T_CLAMP)
}

pub fn logit_normal_pdf(t: f64, m: f64, s: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let l = (t / (1.0 - t)).ln();
    (-(l - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * t * (1.0 - t))
}

/// Density of the timestep mixture on `(0, 1)`.
pub fn timestep_pdf(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    LOGIT_NORMAL_WEIGHT * logit_normal_pdf(t, LOGIT_NORMAL_MEAN, LOGIT_NORMAL_STD) + (1.0 - LOGIT_NORMAL_WEIGHT)
}

/// A noised sample on the linear path together with its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub x_t: Vec<Point>,
    pub t: f64,
    pub eps: Vec<Point>,
    pub x: Vec<Point>,
}

impl FlowState {
    pub fn new(x: Vec<Point>, eps: Vec<Point>, t: f64) -> Self {
        let x_t = interpolate(&x, &eps, t);
        Self { x_t, t, eps, x }
    }

    pub fn target_velocity(&self) -> Vec<Point> {
        velocity_target(&self.x, &self.eps)
    }
}

pub fn gaussian_points(rng: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.sample(StandardNormal)))
        .collect()
}

/// `t·x + (1 − t)·eps`.
pub fn interpolate(x: &[Point], eps: &[Point], t: f64) -> Vec<Point> {
    x.iter()
        .zip(eps)
        .map(|(a, e)| std::array::from_fn(|k| t * a[k] + (1.0 - t) * e[k]))
        .collect()
}

/// `x − eps`.
pub fn velocity_target(x: &[Point], eps: &[Point]) -> Vec<Point> {
    x.iter()
        .zip(eps)
        .map(|(a, e)| std::array::from_fn(|k| a[k] - e[k]))
        .collect()
}

/// `x_t + (1 − t)·v̂`.
pub fn one_step_denoise(x_t: &[Point], v: &[Point], t: f64) -> Vec<Point> {
    x_t.iter()
        .zip(v)
        .map(|(a, b)| std::array::from_fn(|k| a[k] + (1.0 - t) * b[k]))
        .collect()
}

/// Superposes `x` onto the denoised estimate; unaligned `x` when the
/// geometry does not determine a rotation.
pub fn rigid_align_target(x: &[Point], x_hat: &[Point]) -> Vec<Point> {
    match kabsch_align(x, x_hat) {
        Ok((_, aligned)) => aligned,
        Err(e) => {
            log::debug!("alignment skipped: {e}");
            x.to_vec()
        }
    }
}

/// Mean over atoms of the squared velocity error.
pub fn fm_loss(v_hat: &[Point], v: &[Point]) -> f64 {
    let s: f64 = v_hat
        .iter()
        .zip(v)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    s / v.len() as f64
}

/// Graph form of [`fm_loss`] against a constant target.
pub fn fm_loss_graph<T: Scalar>(g: &mut Graph<'_, T>, v_hat: Var, target: &[Point]) -> Result<Var> {
    let tv = g.constant(Tensor::<f64>::from_rows(target).cast::<T>());
    let d = g.sub(v_hat, tv)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / target.len() as f64))
}

/// `σ(e) = ¼ Σ_k logistic(k − e)` and its derivative.
pub fn smooth_lddt_sigma(e: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut dv = 0.0;
    for k in SMOOTH_LDDT_OFFSETS {
        let s = logistic(k - e);
        v += s;
        dv -= s * (1.0 - s);
    }
    (0.25 * v, 0.25 * dv)
}

/// Atom pairs within the cutoff in the ground truth, with their distances
/// in Å. Distances are rotation invariant, so one set serves every copy.
#[derive(Clone, Debug, PartialEq)]
pub struct LddtPairs {
    pub pairs: Vec<(u32, u32, f64)>,
}

impl LddtPairs {
    /// `gt` in scaled units.
    pub fn new(gt: &[Point], cutoff: f64) -> Self {
        let mut pairs = Vec::new();
        for i in 0..gt.len() {
            for j in i + 1..gt.len() {
                let d = distance(&gt[i], &gt[j]) * COORD_SCALE;
                if d < cutoff {
                    pairs.push((i as u32, j as u32, d));
                }
            }
        }
        Self { pairs }
    }
}

/// `1 − mean σ(|δ − δ̂|)` over atom pairs; `x_hat` in scaled units,
/// distances in Å. Zero (with a warning) when no pair qualifies.
pub fn smooth_lddt_loss(x_hat: &[Point], pairs: &LddtPairs) -> f64 {
    if pairs.pairs.is_empty() {
        log::warn!("smooth LDDT loss has no qualifying pairs");
        return 0.0;
    }
    let total: f64 = pairs
        .pairs
        .iter()
        .map(|&(i, j, d)| {
            let dh = distance(&x_hat[i as usize], &x_hat[j as usize]) * COORD_SCALE;
            smooth_lddt_sigma((d - dh).abs()).0
        })
        .sum();
    1.0 - total / pairs.pairs.len() as f64
}

struct SmoothLddtOp {
    pairs: Arc<LddtPairs>,
}

impl<T: Scalar> CustomOp<T> for SmoothLddtOp {
    fn name(&self) -> &'static str {
        "smooth_lddt"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].to_points();
        let mut grad = vec![0.0f64; x.len() * 3];
        let n = self.pairs.pairs.len();
        if n > 0 {
            let up = grad_out[0].as_f64() / n as f64;
            for &(i, j, d) in &self.pairs.pairs {
                let (i, j) = (i as usize, j as usize);
                let diff: [f64; 3] = std::array::from_fn(|k| x[i][k] - x[j][k]);
                let r = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
                if r == 0.0 {
                    continue;
                }
                let dh = r * COORD_SCALE;
                let e = d - dh;
                let (_, ds) = smooth_lddt_sigma(e.abs());
                // loss = 1 − mean σ(|e|); ∂|e|/∂δ̂ = −sign(e); ∂δ̂/∂xᵢ = 16·diff/r
                let coef = -up * ds * (-e.signum()) * COORD_SCALE / r;
                for k in 0..3 {
                    grad[3 * i + k] += coef * diff[k];
                    grad[3 * j + k] -= coef * diff[k];
                }
            }
        }
        vec![Some(grad.into_iter().map(T::from_f64_lossy).collect())]
    }
}

/// Graph form of [`smooth_lddt_loss`] over a `[N_a, 3]` variable.
pub fn smooth_lddt_graph<T: Scalar>(g: &mut Graph<'_, T>, x_hat: Var, pairs: &Arc<LddtPairs>) -> Var {
    let v = smooth_lddt_loss(&g.value(x_hat).to_points(), pairs);
    g.custom(
        &[x_hat],
        Tensor::scalar(T::from_f64_lossy(v)),
        Box::new(SmoothLddtOp { pairs: pairs.clone() }),
    )
}

/// Weight of the LDDT term.
pub fn alpha_schedule(t: f64, phase: Phase) -> f64 {
    match phase {
        Phase::Pretrain | Phase::MdFinetune => 1.0,
        Phase::Finetune => 1.0 + 8.0 * (t - 0.5).max(0.0),
    }
}
