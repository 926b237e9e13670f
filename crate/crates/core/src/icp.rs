//! Point-to-point ICP baseline with brute-force correspondences.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::cloud::{Point, PointCloud};
use crate::lie::RigidTransform;
use crate::metrics::nearest;
use crate::pointlk::RegistrationResult;

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`, with the
/// reflection case corrected.
pub fn kabsch(src: &[Point], dst: &[Point]) -> RigidTransform {
    let n = src.len().max(1) as f64;
    let cs = src.iter().sum::<Point>() / n;
    let cd = dst.iter().sum::<Point>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d }));
    let r = v * fix * u.transpose();
    RigidTransform::new(r, cd - r * cs)
}

/// Alternates nearest-neighbour matching and alignment until the update
/// changes the transform by less than `tol`.
pub fn icp_pt2pt(source: &PointCloud, template: &PointCloud, max_iters: usize, tol: f64) -> RegistrationResult {
    let mut g = RigidTransform::identity();
    let mut result = RegistrationResult::default();
    for _ in 0..max_iters {
        let moved: Vec<Point> = source.iter().map(|p| g.transform_point(p)).collect();
        let matched: Vec<Point> = moved
            .par_iter()
            .map(|p| template.points()[nearest(p, template).0])
            .collect();
        let step = kabsch(&moved, &matched);
        g = step.compose(&g);
        let change = (step.rotation - Matrix3::identity())
            .amax()
            .max(step.translation.amax());
        result.push(g, change);
        if change < tol {
            result.converged = true;
            break;
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{rot_x, rot_z, ApplyMode};
    use crate::synth::Shape;

    #[test]
    fn identical_clouds_give_identity() {
        let c = Shape::Box.sample(200, 2).unwrap();
        let r = icp_pt2pt(&c, &c, 10, 1e-12);
        assert_eq!(r.iterations, 1);
        assert!(r.transform.approx_eq(&RigidTransform::identity(), 1e-9));
    }

    #[test]
    fn small_translation_recovered_in_one_step() {
        let c = Shape::Sphere.sample(300, 5).unwrap();
        let t = Vector3::new(0.004, -0.003, 0.002);
        let moved = RigidTransform::from_translation(-t).apply(&c, ApplyMode::Standard);
        let r = icp_pt2pt(&moved, &c, 1, 0.0);
        assert!((r.transform.translation - t).amax() < 1e-9);
    }

    #[test]
    fn kabsch_recovers_known_transform() {
        let c = Shape::Table.sample(100, 8).unwrap();
        let g = RigidTransform::new(rot_x(0.7) * rot_z(-1.2), Vector3::new(0.3, -0.1, 0.5));
        let dst: Vec<Point> = c.iter().map(|p| g.transform_point(p)).collect();
        assert!(kabsch(c.points(), &dst).approx_eq(&g, 1e-12));
    }

    #[test]
    fn kabsch_never_returns_a_reflection() {
        let src = [
            Point::new(1.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
            Point::new(0.0, 0.0, 1.0),
            Point::zeros(),
        ];
        let dst: Vec<Point> = src.iter().map(|p| Point::new(-p.x, p.y, p.z)).collect();
        let g = kabsch(&src, &dst);
        assert!((g.rotation.determinant() - 1.0).abs() < 1e-12);
    }
}
