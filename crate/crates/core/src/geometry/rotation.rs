use serde::{Deserialize, Serialize};

use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Continuous 6D rotation: the first two (unnormalized) columns of a
/// rotation matrix, stored column by column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation6D(pub [f64; 6]);

const DEGENERATE_EPS: f64 = 1e-12;

impl Rotation6D {
    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        Self([
            m[(0, 0)],
            m[(1, 0)],
            m[(2, 0)],
            m[(0, 1)],
            m[(1, 1)],
            m[(2, 1)],
        ])
    }

    pub fn first(&self) -> Vec3 {
        Vec3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vec3 {
        Vec3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn to_matrix(&self) -> Result<Mat3> {
        rot6d_to_matrix(self)
    }
}

impl Default for Rotation6D {
    fn default() -> Self {
        Self::identity()
    }
}

struct GramSchmidt {
    b1: Vec3,
    b2: Vec3,
    n1: f64,
    n2: f64,
    a2: Vec3,
}

fn gram_schmidt(r: &Rotation6D) -> Result<GramSchmidt> {
    let a1 = r.first();
    let a2 = r.second();
    let n1 = a1.norm();
    if !(n1 > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation);
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > DEGENERATE_EPS * a2.norm().max(1.0)) {
        return Err(Error::DegenerateRotation);
    }
    Ok(GramSchmidt {
        b1,
        b2: u2 / n2,
        n1,
        n2,
        a2,
    })
}

/// Decodes a 6D rotation with Gram-Schmidt; the third column is the cross
/// product of the first two.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Mat3> {
    let gs = gram_schmidt(r)?;
    Ok(Mat3::from_columns(&[gs.b1, gs.b2, gs.b1.cross(&gs.b2)]))
}

/// Vector-Jacobian product of [`rot6d_to_matrix`]: given `dL/dR`, returns
/// `dL/dr`.
pub fn rot6d_backward(r: &Rotation6D, grad: &Mat3) -> Result<[f64; 6]> {
    let gs = gram_schmidt(r)?;
    let (b1, b2) = (gs.b1, gs.b2);
    let g3: Vec3 = grad.column(2).into();
    // b3 = b1 x b2
    let mut gb1: Vec3 = Vec3::from(grad.column(0)) + b2.cross(&g3);
    let gb2: Vec3 = Vec3::from(grad.column(1)) + g3.cross(&b1);
    // b2 = u2 / |u2|
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / gs.n2;
    // u2 = a2 - (b1.a2) b1
    let proj = b1.dot(&gs.a2);
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 -= gu2 * proj + gs.a2 * b1.dot(&gu2);
    // b1 = a1 / |a1|
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / gs.n1;
    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}
