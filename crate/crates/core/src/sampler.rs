//! Euler–Maruyama integration of the learned field from noise to data.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use simplefold_tensor::{ParamTree, Scalar};

use crate::error::{CoreError, Result};
use crate::features::COORD_SCALE;
use crate::flow::gaussian_points;
use crate::geometry::{center, Point};
use crate::model::{Model, ModelInputs};

pub const FOLD_TAU: f64 = 0.01;
pub const ENSEMBLE_TAU: f64 = 0.8;
pub const PLDDT_TRAIN_TAU: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub tau: f64,
    pub eta: f64,
    pub t_eps: f64,
    pub sde_cutoff: f64,
    pub recenter: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 500,
            tau: FOLD_TAU,
            eta: 0.01,
            t_eps: 1e-4,
            sde_cutoff: 0.99,
            recenter: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 {
            return Err(CoreError::Invalid("n_steps must be at least 1".into()));
        }
        if !(0.0 < self.t_eps && self.t_eps < self.sde_cutoff && self.sde_cutoff < 1.0) {
            return Err(CoreError::Invalid(format!(
                "need 0 < t_eps ({}) < sde_cutoff ({}) < 1",
                self.t_eps, self.sde_cutoff
            )));
        }
        if !(self.tau >= 0.0) || self.eta <= 0.0 {
            return Err(CoreError::Invalid("tau must be ≥ 0 and eta > 0".into()));
        }
        Ok(())
    }
}

/// Log-uniform times from `t_eps` to 1, `n_steps + 1` values, endpoints exact.
pub fn time_grid(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let lo = cfg.t_eps.ln();
    let mut grid: Vec<f64> = (0..=n).map(|k| (lo * (1.0 - k as f64 / n as f64)).exp()).collect();
    grid[0] = cfg.t_eps;
    grid[n] = 1.0;
    Ok(grid)
}

/// `s = (t·v − x)/(1 − t)`.
pub fn score_from_velocity(v: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    if t >= 1.0 {
        return Err(CoreError::Invalid(format!("score is singular at t = {t}")));
    }
    Ok(v.iter().zip(x_t).map(|(v, x)| (t * v - x) / (1.0 - t)).collect())
}

/// `2(1 − t)/(t + η)`, switched off from `t*` on.
pub fn w_schedule(t: f64, eta: f64, t_star: f64) -> f64 {
    if t >= t_star {
        0.0
    } else {
        2.0 * (1.0 - t) / (t + eta)
    }
}

/// One step `x += [v + ½·w·s]·Δt + √(τ·w·Δt)·z` in place; `noise = false`
/// drops the Wiener term.
pub fn em_step(
    x: &mut [f64],
    v: &[f64],
    t: f64,
    dt: f64,
    cfg: &SamplerConfig,
    noise: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(CoreError::Invalid(format!("step size {dt} must be positive")));
    }
    let w = w_schedule(t, cfg.eta, cfg.sde_cutoff);
    if w == 0.0 {
        for (a, b) in x.iter_mut().zip(v) {
            *a += b * dt;
        }
    } else {
        let s = score_from_velocity(v, x, t)?;
        let amp = (cfg.tau * w * dt).sqrt();
        for ((a, b), s) in x.iter_mut().zip(v).zip(&s) {
            *a += (b + 0.5 * w * s) * dt;
            if noise && amp > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *a += amp * z;
            }
        }
    }
    if x.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::Diverged(0))
    }
}

fn recenter_points(x: &mut [f64]) {
    let n = x.len() / 3;
    if n == 0 {
        return;
    }
    let mut c = [0.0; 3];
    for p in x.chunks_exact(3) {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for p in x.chunks_exact_mut(3) {
        for k in 0..3 {
            p[k] -= c[k] / n as f64;
        }
    }
}

/// Integrates `field(x, t)` over the time grid starting from `x0`. When
/// `points` is set the state is a flattened `[N, 3]` array and is recentered
/// after each step if the config asks for it.
pub fn integrate<R: Rng>(
    mut field: impl FnMut(&[f64], f64) -> Result<Vec<f64>>,
    x0: Vec<f64>,
    cfg: &SamplerConfig,
    points: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let grid = time_grid(cfg)?;
    let mut x = x0;
    for k in 0..cfg.n_steps {
        let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
        let v = field(&x, t)?;
        let last = k + 1 == cfg.n_steps;
        em_step(&mut x, &v, t, dt, cfg, !last, rng).map_err(|e| match e {
            CoreError::Diverged(_) => CoreError::Diverged(k),
            e => e,
        })?;
        if points && cfg.recenter {
            recenter_points(&mut x);
        }
    }
    Ok(x)
}

/// Draws one structure in Å from noise with the given (EMA) parameters.
pub fn sample<T: Scalar, R: Rng>(
    model: &Model,
    params: &ParamTree<T>,
    inputs: &ModelInputs<T>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Point>> {
    let mut x0 = gaussian_points(rng, inputs.n_atoms);
    if cfg.recenter {
        x0 = center(&x0);
    }
    let flat = integrate(
        |x, t| {
            let pts: Vec<Point> = x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            let v = model.predict_velocity(params, inputs, &pts, t)?;
            Ok(v.into_iter().flatten().collect())
        },
        x0.into_iter().flatten().collect(),
        cfg,
        true,
        rng,
    )?;
    Ok(flat
        .chunks_exact(3)
        .map(|c| [c[0] * COORD_SCALE, c[1] * COORD_SCALE, c[2] * COORD_SCALE])
        .collect())
}
