use serde::{Deserialize, Serialize};

use super::{Vec2, Vec3};
use crate::error::{Error, Result};

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be at least 1x1".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        Ok(())
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Image diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Intrinsics of the same camera at `1/factor` resolution. Pixel centers
    /// stay consistent: low-res pixel `J` covers full-res `[kJ, kJ + k)`.
    pub fn downscaled(&self, factor: u32) -> Self {
        let k = factor.max(1) as f64;
        Self {
            fx: self.fx / k,
            fy: self.fy / k,
            cx: self.cx / k,
            cy: self.cy / k,
            width: (self.width / factor.max(1)).max(1),
            height: (self.height / factor.max(1)).max(1),
        }
    }

    pub fn project_point(&self, p: &Vec3) -> Option<Vec2> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vec2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Back-projects a pixel to the 3D point at the given depth.
    pub fn unproject(&self, uv: &Vec2, depth: f64) -> Vec3 {
        Vec3::new(
            (uv.x - self.cx) / self.fx * depth,
            (uv.y - self.cy) / self.fy * depth,
            depth,
        )
    }
}

/// Pinhole projection of every point.
pub fn project(cam: &CameraIntrinsics, points: &[Vec3]) -> Result<Vec<Vec2>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            cam.project_point(p)
                .ok_or(Error::BehindCamera { index, z: p.z })
        })
        .collect()
}

/// Vector-Jacobian product of [`project`]: maps pixel-space gradients back
/// to 3D point gradients.
pub fn project_backward(cam: &CameraIntrinsics, points: &[Vec3], grad_uv: &[Vec2]) -> Vec<Vec3> {
    points
        .iter()
        .zip(grad_uv)
        .map(|(p, g)| {
            let iz = 1.0 / p.z;
            let gx = g.x * cam.fx * iz;
            let gy = g.y * cam.fy * iz;
            Vec3::new(gx, gy, -(gx * p.x + gy * p.y) * iz)
        })
        .collect()
}
