//! The feature-function interface shared by both solvers.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DVector;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::lie::{ApplyMode, RigidTransform};

pub type Feature = DVector<f64>;

/// A global feature function `φ(G · P)`.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;

    fn extract(&self, cloud: &PointCloud, transform: &RigidTransform, mode: ApplyMode) -> Result<Feature>;
}

impl<E: FeatureExtractor + ?Sized> FeatureExtractor for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn extract(&self, cloud: &PointCloud, transform: &RigidTransform, mode: ApplyMode) -> Result<Feature> {
        (**self).extract(cloud, transform, mode)
    }
}

/// Rejects features with NaN or infinite entries.
pub fn check_finite(feature: &Feature, stage: &'static str) -> Result<()> {
    match feature.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteFeature { stage, index }),
        None => Ok(()),
    }
}

/// Wraps an extractor and counts invocations.
pub struct CountingExtractor<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E: FeatureExtractor> CountingExtractor<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<E: FeatureExtractor> FeatureExtractor for CountingExtractor<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn extract(&self, cloud: &PointCloud, transform: &RigidTransform, mode: ApplyMode) -> Result<Feature> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.extract(cloud, transform, mode)
    }
}
