//! Analytic test backbones: moment features with a closed-form Jacobian, and
//! the greedy expert policy for ReAgent.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::features::{Feature, FeatureExtractor};
use crate::lie::{euler_xyz, ApplyMode, RigidTransform};
use crate::reagent::{ActionTable, Head};

/// Monomial exponents `(i, j, k)` for `x^i y^j z^k`, grouped by degree and
/// ordered lexicographically within a degree:
/// `x y z | xx xy xz yy yz zz | xxx xxy xxz xyy xyz xzz yyy yyz yzz zzz`.
fn monomials(max_order: usize) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for degree in 1..=max_order as u32 {
        for i in (0..=degree).rev() {
            for j in (0..=degree - i).rev() {
                out.push([i, j, degree - i - j]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentFeatures {
    max_order: usize,
    exponents: Vec<[u32; 3]>,
}

impl MomentFeatures {
    pub fn new(max_order: usize) -> Result<Self> {
        if !(1..=3).contains(&max_order) {
            return Err(Error::InvalidConfig(format!("moment order {max_order} outside 1..=3")));
        }
        Ok(Self {
            max_order,
            exponents: monomials(max_order),
        })
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    fn monomial(e: &[u32; 3], p: &Point) -> f64 {
        p.x.powi(e[0] as i32) * p.y.powi(e[1] as i32) * p.z.powi(e[2] as i32)
    }

    fn gradient(e: &[u32; 3], p: &Point) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            if e[axis] == 0 {
                continue;
            }
            let mut d = *e;
            d[axis] -= 1;
            g[axis] = e[axis] as f64 * Self::monomial(&d, p);
        }
        g
    }

    pub fn feature(&self, cloud: &PointCloud) -> Feature {
        self.feature_of(cloud.iter().copied(), cloud.len())
    }

    fn feature_of(&self, points: impl Iterator<Item = Point>, n: usize) -> Feature {
        let mut f = DVector::zeros(self.dim());
        for p in points {
            for (k, e) in self.exponents.iter().enumerate() {
                f[k] += Self::monomial(e, &p);
            }
        }
        f / n as f64
    }

    /// `J_kj = −(1/N) Σ_i ∇m_k(p_i) · (ê_j p_i)`, the derivative of
    /// `φ(exp(−s ê_j) P)` at `s = 0`.
    pub fn analytic_jacobian(&self, cloud: &PointCloud) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.dim(), 6);
        for p in cloud {
            let gens: [Vector3<f64>; 6] = [
                Vector3::x().cross(p),
                Vector3::y().cross(p),
                Vector3::z().cross(p),
                Vector3::x(),
                Vector3::y(),
                Vector3::z(),
            ];
            for (k, e) in self.exponents.iter().enumerate() {
                let g = Self::gradient(e, p);
                for (col, c) in gens.iter().enumerate() {
                    j[(k, col)] -= g.dot(c);
                }
            }
        }
        j / cloud.len() as f64
    }
}

impl FeatureExtractor for MomentFeatures {
    fn dim(&self) -> usize {
        self.exponents.len()
    }

    fn extract(&self, cloud: &PointCloud, transform: &RigidTransform, mode: ApplyMode) -> Result<Feature> {
        Ok(self.feature_of(cloud.iter().map(|p| transform.apply_point(p, mode)), cloud.len()))
    }
}

/// Label whose step best cancels `residual`; ties go to the no-op label.
fn best_label(residual: f64, table: &ActionTable) -> usize {
    let center = table.n_act();
    let mut best = center;
    let mut best_err = residual.abs();
    // Visit labels by increasing distance from the no-op so ties keep the smaller step.
    for k in 1..=center {
        for a in [center - k, center + k] {
            let err = (residual - table.step(a)).abs();
            if err < best_err {
                best = a;
                best_err = err;
            }
        }
    }
    best
}

/// Per-axis residual the expert sees: disentangled translation difference, or
/// the `R_x R_y R_z` angles of `R_target R_currentᵀ`.
pub fn expert_residual(current: &RigidTransform, target: &RigidTransform, head: Head) -> Vector3<f64> {
    match head {
        Head::Translation => target.translation - current.translation,
        Head::Rotation => euler_xyz(&(target.rotation * current.rotation.transpose())),
    }
}

/// Greedy per-axis action labels driving `current` toward `target`
/// (both in the disentangled convention).
pub fn expert_action(current: &RigidTransform, target: &RigidTransform, head: Head, table: &ActionTable) -> [usize; 3] {
    let r = expert_residual(current, target, head);
    [best_label(r.x, table), best_label(r.y, table), best_label(r.z, table)]
}
