use rayon::prelude::*;

use crate::cloud::{Point, PointCloud};
use crate::lie::RigidTransform;

/// Isotropic error: relative rotation angle in degrees and translation distance.
pub fn iso_error(estimate: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    let r = estimate.rotation * truth.rotation.transpose();
    let cos = ((r.trace().clamp(-1.0, 3.0)) - 1.0) / 2.0;
    let rot = cos.clamp(-1.0, 1.0).acos().to_degrees();
    (rot, (estimate.translation - truth.translation).norm())
}

/// Squared distance from `p` to its nearest neighbour in `cloud`, with its index.
pub fn nearest(p: &Point, cloud: &PointCloud) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, q) in cloud.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn mean_nearest(a: &PointCloud, b: &PointCloud) -> f64 {
    let d: Vec<f64> = a.points().par_iter().map(|p| nearest(p, b).1).collect();
    let sum: f64 = d.iter().sum();
    sum / a.len() as f64
}

/// Symmetric Chamfer distance over squared nearest-neighbour distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    mean_nearest(a, b) + mean_nearest(b, a)
}
