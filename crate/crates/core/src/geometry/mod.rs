//! Camera model, rotation parameterization, triangle meshes and
//! similarity alignment shared by every other module.
//!
//! Conventions: 3D quantities are in meters, 2D quantities in pixels, and
//! pixel `(row i, column j)` has its continuous center at `(j + 0.5, i + 0.5)`.

mod align;
mod camera;
mod mesh;
mod rotation;

pub use align::{kabsch_align, SimilarityTransform};
pub use camera::{project, project_backward, CameraIntrinsics};
pub use mesh::TriMesh;
pub use rotation::{rot6d_backward, rot6d_to_matrix, Rotation6D};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Mean of a point set. Returns the origin for an empty slice.
pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().sum::<Vec3>() / points.len() as f64
}
