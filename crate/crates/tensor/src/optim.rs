use crate::params::ParamTree;
use crate::scalar::Scalar;

/// Hyper-parameters of decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, shape-isomorphic to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: ParamTree<T>,
    pub v: ParamTree<T>,
    /// Number of completed updates.
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ParamTree<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update at 1-based `step`. Parameters without an entry in `grads`
/// are treated as having zero gradient.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamTree<T>,
    m: &mut ParamTree<T>,
    v: &mut ParamTree<T>,
    grads: &ParamTree<T>,
    cfg: &AdamWConfig,
    lr: f64,
    step: u64,
) {
    assert!(step >= 1, "adam steps are 1-based");
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let lr_t = T::from_f64_lossy(lr);
    let decay = T::from_f64_lossy(lr * cfg.weight_decay);
    let eps = T::from_f64_lossy(cfg.eps);
    let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
    for (path, p) in params.iter_mut() {
        let g = grads.get(path);
        let mt = m.get_mut(path).expect("moment tree matches params");
        let vt = v.get_mut(path).expect("moment tree matches params");
        for i in 0..p.numel() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            let mi = b1 * mt.data()[i] + one_b1 * gi;
            let vi = b2 * vt.data()[i] + one_b2 * gi * gi;
            mt.data_mut()[i] = mi;
            vt.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let w = p.data()[i];
            p.data_mut()[i] = w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * w;
        }
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update<T: Scalar>(shadow: &mut ParamTree<T>, params: &ParamTree<T>, decay: f64) {
    let d = T::from_f64_lossy(decay);
    let one_d = T::one() - d;
    for (path, s) in shadow.iter_mut() {
        let p = params.get(path).expect("shadow tree matches params");
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + one_d * pv;
        }
    }
}

/// Linear warmup to `base_lr` over `warmup` steps, constant afterwards.
pub fn warmup_lr(base_lr: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base_lr
    } else {
        base_lr * step as f64 / warmup as f64
    }
}
