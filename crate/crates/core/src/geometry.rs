//! Rigid-body utilities in double precision.

use nalgebra::{Matrix3, SymmetricEigen, Vector3, SVD};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        let v = self.rotation * Vector3::from(*p) + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn apply(&self, pts: &[Point]) -> Vec<Point> {
        pts.iter().map(|p| self.apply_point(p)).collect()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            translation: -(rt * self.translation),
            rotation: rt,
        }
    }

    /// `RᵀR = I` and `det R = +1` within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let r = &self.rotation;
        ((r.transpose() * r) - Matrix3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }
}

/// Uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> RigidTransform {
    let mut q = [0.0f64; 4];
    let norm = loop {
        for v in &mut q {
            *v = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            break n;
        }
    };
    let [w, x, y, z] = q.map(|v| v / norm);
    let r = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    );
    RigidTransform::rotation(r)
}

pub fn centroid(pts: &[Point]) -> Point {
    let mut c = [0.0; 3];
    for p in pts {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = pts.len().max(1) as f64;
    c.map(|v| v / n)
}

pub fn center(pts: &[Point]) -> Vec<Point> {
    let c = centroid(pts);
    pts.iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect()
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_lengths(p: &[Point], q: &[Point]) -> Result<()> {
    if p.len() != q.len() {
        return Err(CoreError::Shape(format!(
            "point sets of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Rigid transform minimizing `Σ‖R·Pᵢ + t − Qᵢ‖²`, and the transformed `P`.
pub fn kabsch_align(p: &[Point], q: &[Point]) -> Result<(RigidTransform, Vec<Point>)> {
    check_lengths(p, q)?;
    if p.len() < 3 {
        return Err(CoreError::DegenerateGeometry(format!(
            "{} points, need at least 3",
            p.len()
        )));
    }
    let cp = Vector3::from(centroid(p));
    let cq = Vector3::from(centroid(q));
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        let a = Vector3::from(*a) - cp;
        let b = Vector3::from(*b) - cq;
        h += a * b.transpose();
        spread += a * a.transpose();
    }
    let mut eig = SymmetricEigen::new(spread).eigenvalues;
    eig.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if eig[0] <= 1e-20 || eig[1] <= 1e-10 * eig[0] {
        return Err(CoreError::DegenerateGeometry("points are collinear".into()));
    }
    let svd = SVD::new(h, true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let tf = RigidTransform {
        rotation: r,
        translation: cq - r * cp,
    };
    let aligned = tf.apply(p);
    Ok((tf, aligned))
}

/// Root mean square deviation, optionally after superposing `p` onto `q`.
pub fn rmsd(p: &[Point], q: &[Point], superpose: bool) -> Result<f64> {
    check_lengths(p, q)?;
    if p.is_empty() {
        return Err(CoreError::Shape("empty point sets".into()));
    }
    let aligned;
    let p = if superpose {
        aligned = kabsch_align(p, q)?.1;
        &aligned[..]
    } else {
        p
    };
    let msd = p
        .iter()
        .zip(q)
        .map(|(a, b)| distance(a, b).powi(2))
        .sum::<f64>()
        / p.len() as f64;
    Ok(msd.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect()
    }

    #[test]
    fn rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            assert!(r.is_proper(1e-9));
            let pts = cloud(&mut rng, 4);
            let back = r.inverse().apply(&r.apply(&pts));
            for (a, b) in pts.iter().zip(&back) {
                assert!(distance(a, b) < 1e-9);
            }
        }
    }

    #[test]
    fn haar_mean_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut acc = Matrix3::zeros();
        let n = 100_000;
        for _ in 0..n {
            acc += random_rotation(&mut rng).rotation;
        }
        assert!((acc / n as f64).abs().max() < 0.02);
    }

    #[test]
    fn kabsch_recovers_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = cloud(&mut rng, 12);
            let mut tf = random_rotation(&mut rng);
            tf.translation = Vector3::new(3.0, -1.0, 7.5);
            let q = tf.apply(&p);
            let (found, aligned) = kabsch_align(&p, &q).unwrap();
            assert!(found.is_proper(1e-9));
            assert!(rmsd(&aligned, &q, false).unwrap() < 1e-6);
        }
        let p = cloud(&mut rng, 5);
        let (tf, aligned) = kabsch_align(&p, &p).unwrap();
        assert!((tf.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(rmsd(&aligned, &p, false).unwrap() < 1e-9);
    }

    #[test]
    fn kabsch_corrects_reflections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = cloud(&mut rng, 8);
        let q: Vec<Point> = p.iter().map(|a| [-a[0], a[1], a[2]]).collect();
        let (tf, _) = kabsch_align(&p, &q).unwrap();
        assert!((tf.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_sets_are_rejected() {
        let line: Vec<Point> = (0..6).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(matches!(kabsch_align(&line, &line), Err(CoreError::DegenerateGeometry(_))));
        let two = [[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(kabsch_align(&two, &two).is_err());
        assert!(rmsd(&two, &two[..1], false).is_err());
    }

    #[test]
    fn rmsd_cases() {
        assert_eq!(rmsd(&[[0.0; 3]], &[[2.0, 0.0, 0.0]], false).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = cloud(&mut rng, 10);
        assert_eq!(rmsd(&p, &p, false).unwrap(), 0.0);
        let q = random_rotation(&mut rng).apply(&p);
        assert!(rmsd(&p, &q, true).unwrap() < 1e-6);
    }

    /// Brute-force oracle: coordinate descent over axis-angle parameters.
    #[test]
    fn kabsch_matches_numerical_minimization() {
        fn rot(w: [f64; 3]) -> Matrix3<f64> {
            nalgebra::Rotation3::new(Vector3::from(w)).into_inner()
        }
        fn cost(w: [f64; 3], p: &[Point], q: &[Point]) -> f64 {
            let r = rot(w);
            let cp = Vector3::from(centroid(p));
            let cq = Vector3::from(centroid(q));
            p.iter()
                .zip(q)
                .map(|(a, b)| (r * (Vector3::from(*a) - cp) - (Vector3::from(*b) - cq)).norm_squared())
                .sum::<f64>()
                / p.len() as f64
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let p = cloud(&mut rng, 10);
            let q: Vec<Point> = random_rotation(&mut rng)
                .apply(&p)
                .iter()
                .map(|a| [a[0] + rng.random_range(-1.0..1.0), a[1], a[2] + rng.random_range(-1.0..1.0)])
                .collect();
            let mut best = ([0.0; 3], f64::INFINITY);
            for _ in 0..20 {
                let mut w = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let mut step = 0.5;
                let mut c = cost(w, &p, &q);
                while step > 1e-9 {
                    let mut improved = false;
                    for k in 0..3 {
                        for s in [step, -step] {
                            let mut trial = w;
                            trial[k] += s;
                            let ct = cost(trial, &p, &q);
                            if ct < c {
                                (w, c, improved) = (trial, ct, true);
                            }
                        }
                    }
                    if !improved {
                        step *= 0.5;
                    }
                }
                if c < best.1 {
                    best = (w, c);
                }
            }
            let kabsch = rmsd(&p, &q, true).unwrap();
            assert!((kabsch - best.1.sqrt()).abs() < 1e-4, "{kabsch} vs {}", best.1.sqrt());
        }
    }
}
