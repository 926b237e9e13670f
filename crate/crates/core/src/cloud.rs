//! Point cloud container shared by every solver.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// An ordered set of 3D points. Always non-empty with finite coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinitePoint { index });
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Point::new(r[0], r[1], r[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Point {
        self.points.iter().sum::<Point>() / self.points.len() as f64
    }

    /// Zero-centers the cloud and scales it so the farthest point lies on the unit sphere.
    pub fn normalized(&self) -> Self {
        let c = self.centroid();
        let radius = self.points.iter().map(|p| (p - c).norm()).fold(0.0_f64, f64::max);
        let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        Self {
            points: self.points.iter().map(|p| (p - c) * scale).collect(),
        }
    }

    /// Picks the given indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn map_points(&self, f: impl Fn(&Point) -> Point) -> Self {
        Self {
            points: self.points.iter().map(f).collect(),
        }
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}
