//! Correspondence-free point cloud registration (PointNetLK and ReAgent) with
//! lookup-table quantization, plus accelerator latency/resource models and a
//! design-space search.

pub mod cloud;
pub mod cloud_io;
pub mod dse;
pub mod error;
pub mod featnet;
pub mod features;
pub mod icp;
pub mod lie;
pub mod metrics;
pub mod oracle;
pub mod pointlk;
pub mod quant;
pub mod reagent;
pub mod synth;
pub mod weights;

pub use cloud::{Point, PointCloud};
pub use error::{Error, Result};
pub use features::{Feature, FeatureExtractor};
pub use lie::{ApplyMode, RigidTransform, Twist};
