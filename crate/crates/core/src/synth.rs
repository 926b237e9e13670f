//! Seeded synthetic registration pairs.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::lie::{rot_x, rot_y, rot_z, ApplyMode, RigidTransform};

/// Primitive base shapes, sampled on their surfaces and normalized to the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Box,
    /// A table top plus a smaller, lower shelf plane.
    Table,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Sphere, Shape::Box, Shape::Table];

    /// `n` surface samples, deterministic in `seed`.
    pub fn sample(self, n: usize, seed: u64) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Point> = (0..n).map(|_| self.sample_point(&mut rng)).collect();
        Ok(PointCloud::new(points)?.normalized())
    }

    fn sample_point(self, rng: &mut impl Rng) -> Point {
        match self {
            Shape::Sphere => {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                Vector3::new(r * phi.cos(), r * phi.sin(), z)
            }
            Shape::Box => {
                // Half extents (1.0, 0.6, 0.3); faces picked by area.
                let h = [1.0, 0.6, 0.3];
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut u = rng.random_range(0.0..total);
                let mut axis = 0;
                while axis < 2 && u >= areas[axis] {
                    u -= areas[axis];
                    axis += 1;
                }
                let mut p = Vector3::zeros();
                for k in 0..3 {
                    p[k] = rng.random_range(-h[k]..=h[k]);
                }
                p[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
                p
            }
            Shape::Table => {
                if rng.random_bool(0.7) {
                    Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-0.6..=0.6), 0.4)
                } else {
                    Vector3::new(rng.random_range(-0.6..=0.6), rng.random_range(-0.3..=0.3), -0.4)
                }
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Sphere => "sphere",
            Shape::Box => "box",
            Shape::Table => "table",
        })
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "box" => Ok(Shape::Box),
            "table" => Ok(Shape::Table),
            other => Err(Error::InvalidPairSpec(format!("unknown shape '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSpec {
    pub n: usize,
    /// Degrees.
    pub theta_max: f64,
    pub t_max: f64,
    pub r_std: f64,
    pub r_clip: f64,
    pub seed: u64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            n: 1024,
            theta_max: 45.0,
            t_max: 0.5,
            r_std: 0.01,
            r_clip: 0.05,
            seed: 0,
        }
    }
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InvalidPairSpec(format!("N = {} < 4", self.n)));
        }
        if !(0.0..=180.0).contains(&self.theta_max) {
            return Err(Error::InvalidPairSpec(format!(
                "theta_max {} outside [0, 180]",
                self.theta_max
            )));
        }
        if self.t_max.is_nan() || self.t_max < 0.0 {
            return Err(Error::InvalidPairSpec("t_max must be non-negative".into()));
        }
        if !(self.r_std >= 0.0 && self.r_clip >= self.r_std) {
            return Err(Error::InvalidPairSpec("need r_clip >= r_std >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Pair {
    pub source: PointCloud,
    pub template: PointCloud,
    /// Transform taking the source onto the template.
    pub g_star: RigidTransform,
}

/// Per-trial seed derived from a master seed, independent of evaluation order.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random perturbation `G`: Euler angles uniform in `[0, θ_max]` (`R = Rx Ry Rz`)
/// and translation uniform in `[−t_max, t_max]` per axis.
pub fn random_transform(theta_max_deg: f64, t_max: f64, rng: &mut impl Rng) -> RigidTransform {
    let theta = theta_max_deg.to_radians();
    let mut angle = || {
        if theta > 0.0 {
            rng.random_range(0.0..=theta)
        } else {
            0.0
        }
    };
    let (a, b, c) = (angle(), angle(), angle());
    let mut shift = || {
        if t_max > 0.0 {
            rng.random_range(-t_max..=t_max)
        } else {
            0.0
        }
    };
    let t = Vector3::new(shift(), shift(), shift());
    RigidTransform::new(rot_x(a) * rot_y(b) * rot_z(c), t)
}

fn jitter(cloud: &PointCloud, std: f64, clip: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if std <= 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidPairSpec(e.to_string()))?;
    let points = cloud
        .iter()
        .map(|p| p + Vector3::from_fn(|_, _| normal.sample(rng).clamp(-clip, clip)))
        .collect();
    PointCloud::new(points)
}

/// Source and template subsampled independently from `base`; the source is
/// moved by a random `G`, so the transform to recover is `G* = G⁻¹`.
pub fn gen_pair(spec: &PairSpec, base: &PointCloud) -> Result<Pair> {
    spec.validate()?;
    if base.len() < spec.n {
        return Err(Error::InsufficientPoints {
            needed: spec.n,
            available: base.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let src_idx = sample(&mut rng, base.len(), spec.n).into_vec();
    let tpl_idx = sample(&mut rng, base.len(), spec.n).into_vec();
    let g = random_transform(spec.theta_max, spec.t_max, &mut rng);
    let source = g.apply(&base.select(&src_idx)?, ApplyMode::Standard);
    let template = base.select(&tpl_idx)?;
    let source = jitter(&source, spec.r_std, spec.r_clip, &mut rng)?;
    let template = jitter(&template, spec.r_std, spec.r_clip, &mut rng)?;
    Ok(Pair {
        source,
        template,
        g_star: g.inverse(),
    })
}
