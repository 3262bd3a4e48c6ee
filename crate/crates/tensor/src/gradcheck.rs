//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamTree;
use crate::tensor::Tensor;

/// Gradients below this magnitude are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates where one-sided differences disagree (kinks), excluded from the maximum.
    pub skipped: Vec<String>,
    pub worst: Option<String>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

struct Probe {
    fwd: f64,
    bwd: f64,
}

impl Probe {
    fn central(&self, h: f64) -> f64 {
        (self.fwd - self.bwd) / (2.0 * h)
    }

    fn is_kink(&self, f0: f64, h: f64) -> bool {
        let right = (self.fwd - f0) / h;
        let left = (f0 - self.bwd) / h;
        (right - left).abs() > 0.1 * right.abs().max(left.abs()).max(1e-3)
    }
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            skipped: Vec::new(),
            worst: None,
        }
    }

    fn record(&mut self, label: String, analytic: f64, probe: Probe, f0: f64, h: f64) {
        if probe.is_kink(f0, h) {
            self.skipped.push(label);
            return;
        }
        let err = relative_error(analytic, probe.central(h));
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            if err >= self.max_rel_err {
                self.worst = Some(label);
            }
        }
    }
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences of step `h`, elementwise.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    let f0 = g.value(out).data()[0];
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut report = GradCheckReport::new();
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let probe = Probe {
            fwd: eval(&xp)?,
            bwd: eval(&xm)?,
        };
        report.record(format!("x[{i}]"), analytic[i], probe, f0, h);
    }
    Ok(report)
}

/// Parameter version of [`grad_check`]: `f` builds the scalar from a graph
/// bound to the (perturbed) tree. Only the `(path, index)` coordinates in
/// `coords` are probed.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamTree<f64>,
    coords: &[(String, usize)],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |tree: &ParamTree<f64>| -> Result<f64> {
        let mut g = Graph::new().bind(tree, false);
        let out = f(&mut g)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new().bind(params, true);
    let out = f(&mut g)?;
    let f0 = g.value(out).data()[0];
    g.backward(out)?;
    let grads = g.param_grads();
    let mut report = GradCheckReport::new();
    for (path, i) in coords {
        let analytic = grads.get(path).map_or(0.0, |t| t.data()[*i]);
        let mut tp = params.clone();
        tp.get_mut(path).expect("probed path exists").data_mut()[*i] += h;
        let mut tm = params.clone();
        tm.get_mut(path).expect("probed path exists").data_mut()[*i] -= h;
        let probe = Probe {
            fwd: eval(&tp)?,
            bwd: eval(&tm)?,
        };
        report.record(format!("{path}[{i}]"), analytic, probe, f0, h);
    }
    Ok(report)
}

/// Picks up to `per_tensor` evenly spaced coordinates from every tensor.
pub fn spread_coords(params: &ParamTree<f64>, per_tensor: usize) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (path, t) in params.iter() {
        let n = t.numel();
        let k = per_tensor.min(n).max(1);
        for j in 0..k {
            out.push((path.clone(), j * n / k));
        }
    }
    out
}
