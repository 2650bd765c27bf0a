use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{TriMesh, Vec3};

pub const DEFAULT_LATENT_DIM: usize = 16;

/// Index of the middle-finger base (metacarpophalangeal) joint, which the
/// mean shape is centered on. Joint order follows the common 21-joint
/// layout: wrist, then index, middle, pinky, ring and thumb chains of three
/// joints each, then the five fingertips.
pub const CENTER_JOINT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
}

impl HandSide {
    pub fn as_str(&self) -> &'static str {
        match self {
            HandSide::Left => "left",
            HandSide::Right => "right",
        }
    }
}

impl std::str::FromStr for HandSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(HandSide::Left),
            "right" => Ok(HandSide::Right),
            other => Err(Error::InvalidAsset(format!("unknown hand side `{other}`"))),
        }
    }
}

/// Sparse `J x V` matrix; each row is a convex combination of vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl JointRegressor {
    pub fn from_dense(dense: &[f64], joints: usize, vertices: usize) -> Self {
        let rows = (0..joints)
            .map(|j| {
                dense[j * vertices..(j + 1) * vertices]
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(v, &w)| (v as u32, w))
                    .collect()
            })
            .collect();
        Self { rows }
    }

    pub fn to_dense(&self, vertices: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * vertices];
        for (j, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                out[j * vertices + v as usize] = w;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn apply(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(v, w)| vertices[v as usize] * w).sum())
            .collect()
    }
}

/// Hand mesh generator: `vertices(theta) = mean + sum_k theta_k * basis_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricHandModel {
    pub mean_vertices: Vec<Vec3>,
    /// `K` blendshapes, each with one offset per vertex.
    pub pose_basis: Vec<Vec<Vec3>>,
    pub faces: Vec<[u32; 3]>,
    pub joint_regressor: JointRegressor,
    pub side: HandSide,
}

impl ParametricHandModel {
    pub fn latent_dim(&self) -> usize {
        self.pose_basis.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.mean_vertices.len()
    }

    /// Structural checks: shapes agree, faces valid, regressor rows are convex
    /// combinations, and the mean shape is centered on [`CENTER_JOINT`].
    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        if let Some(k) = self.pose_basis.iter().position(|b| b.len() != v) {
            return Err(Error::InvalidAsset(format!(
                "pose basis {k} has {} offsets, expected {v}",
                self.pose_basis[k].len()
            )));
        }
        TriMesh::new(self.mean_vertices.clone(), self.faces.clone())
            .map_err(|e| Error::InvalidAsset(e.to_string()))?;
        for (j, row) in self.joint_regressor.rows.iter().enumerate() {
            if row.iter().any(|&(i, _)| i as usize >= v) {
                return Err(Error::InvalidAsset(format!(
                    "joint regressor row {j} references a missing vertex"
                )));
            }
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidAsset(format!(
                    "joint regressor row {j} sums to {sum}, expected 1"
                )));
            }
        }
        if self.joint_regressor.len() > CENTER_JOINT {
            let center = self.joint_regressor.apply(&self.mean_vertices)[CENTER_JOINT];
            if center.norm() > 1e-6 {
                return Err(Error::InvalidAsset(format!(
                    "mean shape is not centered on joint {CENTER_JOINT} (offset {:.3e} m)",
                    center.norm()
                )));
            }
        }
        Ok(())
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} components, model expects {}",
                theta.len(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    /// Centered vertices for a latent pose.
    pub fn hand_vertices(&self, theta: &[f64]) -> Result<Vec<Vec3>> {
        self.check_theta(theta)?;
        let mut out = self.mean_vertices.clone();
        for (t, basis) in theta.iter().zip(&self.pose_basis) {
            if *t == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(basis) {
                *o += b * *t;
            }
        }
        Ok(out)
    }

    /// `dL/dtheta` from `dL/dvertices`.
    pub fn hand_vertices_backward(&self, grad_vertices: &[Vec3]) -> Vec<f64> {
        self.pose_basis
            .iter()
            .map(|basis| basis.iter().zip(grad_vertices).map(|(b, g)| b.dot(g)).sum())
            .collect()
    }

    pub fn hand_joints(&self, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
        if vertices.len() != self.vertex_count() {
            return Err(Error::DimensionMismatch(format!(
                "got {} vertices, model has {}",
                vertices.len(),
                self.vertex_count()
            )));
        }
        Ok(self.joint_regressor.apply(vertices))
    }

    pub fn mesh(&self, theta: &[f64]) -> Result<TriMesh> {
        Ok(TriMesh {
            vertices: self.hand_vertices(theta)?,
            faces: self.faces.clone(),
        })
    }

    /// The same model for the opposite hand (mirrored across x = 0).
    pub fn mirrored(&self) -> Self {
        let flip = |v: &Vec3| Vec3::new(-v.x, v.y, v.z);
        Self {
            mean_vertices: self.mean_vertices.iter().map(flip).collect(),
            pose_basis: self
                .pose_basis
                .iter()
                .map(|b| b.iter().map(flip).collect())
                .collect(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
            joint_regressor: self.joint_regressor.clone(),
            side: match self.side {
                HandSide::Left => HandSide::Right,
                HandSide::Right => HandSide::Left,
            },
        }
    }
}
