//! Camera pose refinement against a volumetric radiance-field map.
//!
//! The map is an explicit voxel grid ([`radiance_field`]) rendered by
//! numerical quadrature ([`renderer`]) and fitted to posed images by
//! photometric gradient descent ([`field_fit`]). A Monte Carlo particle
//! filter ([`mcl`]) refines a coarse pose ([`initializer`]) by comparing
//! rendered pixels against a query image; [`harness`] runs the synthetic
//! benchmark and aggregates its metrics.

pub mod error;
pub mod field_fit;
pub mod geometry;
pub mod harness;
pub mod initializer;
pub mod mcl;
pub mod radiance_field;
pub mod renderer;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Pixel, Pose, PoseError, Ray, UnitQuaternion, Vec3};
pub use radiance_field::{BoundingBox, GridDims, RadianceField, Rgb, SceneSpec, VoxelGrid};
pub use renderer::{Image, PixelSample, RaySamplingConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` derived from a root `seed`.
///
/// Parallel tasks each take their own stream so results do not depend on
/// scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
