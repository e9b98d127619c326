//! Surface reconstruction on a dense signed-distance voxel grid.
//!
//! The grid is optimized through NeuS-style volume rendering. Surface normals
//! come from a d-linear blend of per-vertex finite-difference gradients, which
//! keeps them continuous across cube faces. Eikonal and curvature
//! regularizers act directly on grid vertices with closed-form gradients.

pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod image;
pub mod meshing;
pub mod radiance_field;
pub mod regularizer;
pub mod renderer;
pub mod scene_synth;
pub mod sdf_grid;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Aabb, Ray, Vec3};
pub use image::Image;
pub use meshing::TriangleMesh;
pub use radiance_field::{RadianceConfig, RadianceGrad, RadianceParams, ShadeCache};
pub use renderer::{GradientEstimator, RayRender, RenderConfig};
pub use scene_synth::{AnalyticScene, Camera, Dataset, Shape, Texture};
pub use sdf_grid::{InterpolationSample, SdfGrid, VertexGradients};
pub use sparse::{DenseAccumulator, SparseGrad};
pub use training::{Schedules, StepMetrics, TrainConfig, TrainState, Trainer};
