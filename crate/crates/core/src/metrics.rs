//! Structure-comparison metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{distance, kabsch_align, rmsd, Point, RigidTransform};
use crate::structure::ProteinRecord;

pub const LDDT_CUTOFF: f64 = 15.0;
pub const LDDT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const GDT_CUTOFFS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
const MAX_REFINE: usize = 20;

#[derive(Clone, Copy, Debug)]
pub enum AtomSelector<'a> {
    All,
    Indices(&'a [usize]),
}

impl AtomSelector<'_> {
    fn indices(&self, n: usize) -> Vec<usize> {
        match self {
            AtomSelector::All => (0..n).collect(),
            AtomSelector::Indices(ix) => ix.to_vec(),
        }
    }
}

fn check_pair(pred: &[Point], gt: &[Point], residue_of: &[usize]) -> Result<()> {
    if pred.len() != gt.len() || gt.len() != residue_of.len() {
        return Err(CoreError::Shape(format!(
            "pred {} / gt {} / residue map {}",
            pred.len(),
            gt.len(),
            residue_of.len()
        )));
    }
    Ok(())
}

/// Pair counts `(total, passed per threshold)` with `i` drawn from `rows`.
fn lddt_counts(pred: &[Point], gt: &[Point], residue_of: &[usize], atoms: &[usize], rows: &[usize]) -> (usize, [usize; 4]) {
    let mut total = 0;
    let mut pass = [0usize; 4];
    for &i in rows {
        for &j in atoms {
            if i == j || residue_of[i] == residue_of[j] {
                continue;
            }
            let d = distance(&gt[i], &gt[j]);
            if d >= LDDT_CUTOFF {
                continue;
            }
            total += 1;
            let e = (d - distance(&pred[i], &pred[j])).abs();
            for (p, &t) in pass.iter_mut().zip(&LDDT_THRESHOLDS) {
                if e < t {
                    *p += 1;
                }
            }
        }
    }
    (total, pass)
}

fn lddt_from_counts(total: usize, pass: [usize; 4]) -> Option<f64> {
    (total > 0).then(|| pass.iter().map(|&p| p as f64 / total as f64).sum::<f64>() / 4.0)
}

/// Distance-only LDDT over the selected atoms; pairs within one residue are
/// excluded and the inclusion radius is taken from `gt` only.
pub fn lddt(pred: &[Point], gt: &[Point], residue_of: &[usize], sel: AtomSelector<'_>) -> Result<f64> {
    check_pair(pred, gt, residue_of)?;
    let atoms = sel.indices(gt.len());
    let (t, p) = lddt_counts(pred, gt, residue_of, &atoms, &atoms);
    lddt_from_counts(t, p).ok_or(CoreError::UndefinedScore("no atom pairs within the LDDT radius"))
}

/// Per-residue LDDT; `None` where a residue has no qualifying pairs.
pub fn lddt_per_residue(
    pred: &[Point],
    gt: &[Point],
    residue_of: &[usize],
    n_res: usize,
    sel: AtomSelector<'_>,
) -> Result<Vec<Option<f64>>> {
    check_pair(pred, gt, residue_of)?;
    let atoms = sel.indices(gt.len());
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_res];
    for &i in &atoms {
        if residue_of[i] >= n_res {
            return Err(CoreError::Shape(format!("residue {} of {n_res}", residue_of[i])));
        }
        rows[residue_of[i]].push(i);
    }
    Ok(rows
        .iter()
        .map(|r| {
            let (t, p) = lddt_counts(pred, gt, residue_of, &atoms, r);
            lddt_from_counts(t, p)
        })
        .collect())
}

pub fn tm_d0(l: usize) -> f64 {
    let d0 = 1.24 * (l as f64 - 15.0).max(0.0).cbrt() - 1.8;
    d0.max(0.5)
}

fn tm_of(dists: &[f64], d0: f64) -> f64 {
    dists.iter().map(|d| 1.0 / (1.0 + (d / d0).powi(2))).sum::<f64>() / dists.len() as f64
}

fn distances_after(tf: &RigidTransform, pred: &[Point], gt: &[Point]) -> Vec<f64> {
    pred.iter().zip(gt).map(|(p, q)| distance(&tf.apply_point(p), q)).collect()
}

fn seed_lengths(l: usize) -> Vec<usize> {
    let mut out = vec![l];
    let mut f = l / 2;
    while f >= 4 {
        out.push(f);
        f /= 2;
    }
    if l > 4 && *out.last().unwrap() > 4 {
        out.push(4);
    }
    out
}

/// Best score over fragment-seeded iterative superpositions. Each seed set
/// is refined to the atoms closer than `cutoff` until it stops changing.
fn superposition_search(pred: &[Point], gt: &[Point], cutoff: f64, score: impl Fn(&[f64]) -> f64) -> f64 {
    let l = gt.len();
    let mut best = f64::NEG_INFINITY;
    for len in seed_lengths(l) {
        for start in 0..=(l - len) {
            let mut set: Vec<usize> = (start..start + len).collect();
            for _ in 0..MAX_REFINE {
                let p: Vec<Point> = set.iter().map(|&i| pred[i]).collect();
                let q: Vec<Point> = set.iter().map(|&i| gt[i]).collect();
                let Ok((tf, _)) = kabsch_align(&p, &q) else { break };
                let d = distances_after(&tf, pred, gt);
                best = best.max(score(&d));
                let mut next: Vec<usize> = (0..l).filter(|&i| d[i] < cutoff).collect();
                if next.len() < 3 {
                    let mut order: Vec<usize> = (0..l).collect();
                    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
                    next = order[..3.min(l)].to_vec();
                    next.sort_unstable();
                }
                if next == set {
                    break;
                }
                set = next;
            }
        }
    }
    best
}

fn check_ca(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(CoreError::Shape(format!("{} vs {} Cα", pred.len(), gt.len())));
    }
    if gt.len() < 3 {
        return Err(CoreError::Invalid(format!("TM/GDT need at least 3 residues, got {}", gt.len())));
    }
    Ok(())
}

pub fn tm_score(pred_ca: &[Point], gt_ca: &[Point]) -> Result<f64> {
    check_ca(pred_ca, gt_ca)?;
    let d0 = tm_d0(gt_ca.len());
    Ok(superposition_search(pred_ca, gt_ca, d0, |d| tm_of(d, d0)))
}

/// TM-score of the single full-length least-squares superposition.
pub fn tm_score_kabsch(pred_ca: &[Point], gt_ca: &[Point]) -> Result<f64> {
    check_ca(pred_ca, gt_ca)?;
    let (tf, _) = kabsch_align(pred_ca, gt_ca)?;
    Ok(tm_of(&distances_after(&tf, pred_ca, gt_ca), tm_d0(gt_ca.len())))
}

pub fn gdt_ts(pred_ca: &[Point], gt_ca: &[Point]) -> Result<f64> {
    check_ca(pred_ca, gt_ca)?;
    let l = gt_ca.len() as f64;
    let total: f64 = GDT_CUTOFFS
        .iter()
        .map(|&c| {
            superposition_search(pred_ca, gt_ca, c, |d| d.iter().filter(|&&x| x <= c).count() as f64 / l)
        })
        .sum();
    Ok(total / GDT_CUTOFFS.len() as f64)
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CoreError::Shape(format!("pearson over {} and {} values", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CoreError::UndefinedScore("zero variance"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub tm_score: f64,
    pub gdt_ts: f64,
    pub lddt: f64,
    pub lddt_ca: f64,
    /// Superposed Cα RMSD in Å.
    pub rmsd: f64,
}

impl TargetMetrics {
    pub const NAMES: [&'static str; 5] = ["tm_score", "gdt_ts", "lddt", "lddt_ca", "rmsd"];

    pub fn values(&self) -> [f64; 5] {
        [self.tm_score, self.gdt_ts, self.lddt, self.lddt_ca, self.rmsd]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: mean(values),
            median: median(values),
        }
    }

    /// `"mean / median"` with three decimals.
    pub fn display(&self) -> String {
        format!("{:.3} / {:.3}", self.mean, self.median)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub targets: BTreeMap<String, TargetMetrics>,
    pub summary: BTreeMap<String, Summary>,
}

pub fn aggregate(targets: BTreeMap<String, TargetMetrics>) -> Result<MetricReport> {
    if targets.is_empty() {
        return Err(CoreError::Invalid("no targets to aggregate".into()));
    }
    let summary = TargetMetrics::NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let vals: Vec<f64> = targets.values().map(|t| t.values()[k]).collect();
            (name.to_string(), Summary::of(&vals))
        })
        .collect();
    Ok(MetricReport { targets, summary })
}

/// All metrics for one prediction (Å) against its ground truth (Å).
/// `ca` holds each residue's Cα atom index where present.
pub fn evaluate(pred: &[Point], gt: &[Point], residue_of: &[usize], ca: &[Option<usize>]) -> Result<TargetMetrics> {
    check_pair(pred, gt, residue_of)?;
    let ca_idx: Vec<usize> = ca.iter().flatten().copied().collect();
    let pca: Vec<Point> = ca_idx.iter().map(|&i| pred[i]).collect();
    let gca: Vec<Point> = ca_idx.iter().map(|&i| gt[i]).collect();
    Ok(TargetMetrics {
        tm_score: tm_score(&pca, &gca)?,
        gdt_ts: gdt_ts(&pca, &gca)?,
        lddt: lddt(pred, gt, residue_of, AtomSelector::All)?,
        lddt_ca: lddt(pred, gt, residue_of, AtomSelector::Indices(&ca_idx))?,
        rmsd: rmsd(&pca, &gca, true)?,
    })
}

/// Scores two records of the same chain. Residues pair by position, atoms
/// by name within a residue; atoms present in only one record are ignored.
pub fn evaluate_records(pred: &ProteinRecord, gt: &ProteinRecord) -> Result<TargetMetrics> {
    if pred.len() != gt.len() {
        return Err(CoreError::Shape(format!("{} vs {} residues", pred.len(), gt.len())));
    }
    if let Some(i) = (0..gt.len()).find(|&i| pred.residues[i].aa != gt.residues[i].aa) {
        return Err(CoreError::Invalid(format!("residue {} differs in type", i + 1)));
    }
    let mut by_name: BTreeMap<(usize, &str), Point> = BTreeMap::new();
    for (a, slot) in pred.atoms.iter().zip(pred.atom_residue_slots()) {
        by_name.insert((slot, a.name.as_str()), a.position);
    }
    let (mut p, mut q, mut residue_of, mut ca) = (Vec::new(), Vec::new(), Vec::new(), vec![None; gt.len()]);
    for (a, slot) in gt.atoms.iter().zip(gt.atom_residue_slots()) {
        if let Some(&x) = by_name.get(&(slot, a.name.as_str())) {
            if a.name == "CA" {
                ca[slot] = Some(p.len());
            }
            p.push(x);
            q.push(a.position);
            residue_of.push(slot);
        }
    }
    evaluate(&p, &q, &residue_of, &ca)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d0_values() {
        assert!((tm_d0(150) - (1.24 * 135f64.cbrt() - 1.8)).abs() < 1e-12);
        assert!((tm_d0(150) - 4.561).abs() < 1e-3);
        assert_eq!(tm_d0(10), 0.5);
    }

    #[test]
    fn two_atom_lddt_hand_case() {
        let gt = [[0.0; 3], [5.0, 0.0, 0.0]];
        let pred = [[0.0; 3], [6.5, 0.0, 0.0]];
        assert_eq!(lddt(&pred, &gt, &[0, 1], AtomSelector::All).unwrap(), 0.5);
        assert!(lddt(&pred, &gt, &[0, 0], AtomSelector::All).is_err());
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(median(&[0.9, 0.2, 0.4]), 0.4);
        assert_eq!(median(&[1.0, 4.0, 2.0, 3.0]), 2.5);
        let s = Summary { mean: 0.8374, median: 0.9162 };
        assert_eq!(s.display(), "0.837 / 0.916");
    }

    #[test]
    fn pearson_cases() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson_r(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson_r(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson_r(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn seeds_cover_halvings() {
        assert_eq!(seed_lengths(150), vec![150, 75, 37, 18, 9, 4]);
        assert_eq!(seed_lengths(10), vec![10, 5, 4]);
        assert_eq!(seed_lengths(3), vec![3]);
    }
}
