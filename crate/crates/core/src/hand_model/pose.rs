use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot6d_backward, Mat3, Rotation6D, Vec3};

/// Rigid pose (plus scale and, for hands, latent articulation) of one entity
/// in one frame, in camera coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub rotation: Rotation6D,
    pub translation: Vec3,
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

impl BodyState {
    pub fn rigid(rotation: Rotation6D, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
            scale: 1.0,
            theta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidScale(self.scale));
        }
        self.rotation.to_matrix().map(|_| ())
    }
}

/// `scale * (R v) + translation` for every centered vertex.
pub fn pose_entity(centered: &[Vec3], state: &BodyState) -> Result<Vec<Vec3>> {
    state.validate()?;
    let r = state.rotation.to_matrix()?;
    Ok(pose_points(centered, &r, state.scale, &state.translation))
}

pub fn pose_points(centered: &[Vec3], r: &Mat3, scale: f64, translation: &Vec3) -> Vec<Vec3> {
    centered
        .iter()
        .map(|v| scale * (r * v) + translation)
        .collect()
}

/// Gradients of a scalar loss with respect to every input of [`pose_entity`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGradient {
    pub rotation: [f64; 6],
    pub rotation_matrix: Mat3,
    pub translation: Vec3,
    pub scale: f64,
    pub centered: Vec<Vec3>,
}

pub fn pose_entity_backward(
    centered: &[Vec3],
    state: &BodyState,
    grad_world: &[Vec3],
) -> Result<PoseGradient> {
    let r = state.rotation.to_matrix()?;
    let (rotation_matrix, translation, scale, centered_grad) =
        pose_points_backward(centered, &r, state.scale, grad_world);
    Ok(PoseGradient {
        rotation: rot6d_backward(&state.rotation, &rotation_matrix)?,
        rotation_matrix,
        translation,
        scale,
        centered: centered_grad,
    })
}

/// Returns `(dL/dR, dL/dD, dL/ds, dL/dcentered)`.
pub fn pose_points_backward(
    centered: &[Vec3],
    r: &Mat3,
    scale: f64,
    grad_world: &[Vec3],
) -> (Mat3, Vec3, f64, Vec<Vec3>) {
    let mut grad_r = Mat3::zeros();
    let mut grad_t = Vec3::zeros();
    let mut grad_s = 0.0;
    let rt = r.transpose();
    let mut grad_c = Vec::with_capacity(centered.len());
    for (v, g) in centered.iter().zip(grad_world) {
        grad_t += g;
        let rv = r * v;
        grad_s += g.dot(&rv);
        grad_r += (scale * g) * v.transpose();
        grad_c.push(scale * (rt * g));
    }
    (grad_r, grad_t, grad_s, grad_c)
}
