use nalgebra::SVD;

use super::{centroid, Mat3, Vec3};
use crate::error::{Error, Result};

/// `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn apply_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply(p)).collect()
    }
}

/// Least-squares rigid (or similarity, with `with_scale`) alignment of
/// `source` onto `target` (Kabsch / Umeyama). Returns the aligned source
/// points and the transform.
pub fn kabsch_align(
    source: &[Vec3],
    target: &[Vec3],
    with_scale: bool,
) -> Result<(Vec<Vec3>, SimilarityTransform)> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "kabsch_align: {} source vs {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::AlignmentUnderdetermined(format!(
            "need at least 3 points, got {}",
            source.len()
        )));
    }
    let cs = centroid(source);
    let ct = centroid(target);
    let mut cov = Mat3::zeros();
    let mut source_var = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - cs;
        cov += (t - ct) * ds.transpose();
        source_var += ds.norm_squared();
    }
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(Error::AlignmentUnderdetermined(
                "SVD did not converge".into(),
            ))
        }
    };
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::AlignmentUnderdetermined(
            "points are collinear or coincident".into(),
        ));
    }
    let d = (u * v_t).determinant().signum();
    let correction = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = u * correction * v_t;
    let scale = if with_scale {
        let trace = (Mat3::from_diagonal(&svd.singular_values) * correction).trace();
        trace / source_var
    } else {
        1.0
    };
    let transform = SimilarityTransform {
        rotation,
        translation: ct - scale * (rotation * cs),
        scale,
    };
    Ok((transform.apply_all(source), transform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5))
            .collect()
    }

    fn residual(a: &[Vec3], b: &[Vec3]) -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum()
    }

    #[test]
    fn identical_clouds() {
        let c = cloud(20, 1);
        let (aligned, t) = kabsch_align(&c, &c, true).unwrap();
        assert_relative_eq!(t.rotation, Mat3::identity(), epsilon = 1e-12);
        assert_relative_eq!(t.scale, 1.0, epsilon = 1e-12);
        assert!(residual(&aligned, &c) < 1e-20);
    }

    #[test]
    fn recovers_quarter_turn() {
        let c = cloud(30, 2);
        let r = Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2).into_inner();
        let target: Vec<Vec3> = c.iter().map(|p| r * p).collect();
        let (aligned, t) = kabsch_align(&c, &target, false).unwrap();
        assert_relative_eq!(t.rotation, r, epsilon = 1e-12);
        assert!(residual(&aligned, &target) < 1e-9);
    }

    #[test]
    fn recovers_scale() {
        let c = cloud(30, 3);
        let target: Vec<Vec3> = c.iter().map(|p| 2.0 * p + Vec3::new(0.1, 0.2, 0.3)).collect();
        let (aligned, t) = kabsch_align(&c, &target, true).unwrap();
        assert_relative_eq!(t.scale, 2.0, epsilon = 1e-12);
        assert!(residual(&aligned, &target) < 1e-9);
    }

    #[test]
    fn underdetermined_inputs() {
        let two = vec![Vec3::zeros(), Vec3::x()];
        assert!(matches!(
            kabsch_align(&two, &two, false),
            Err(Error::AlignmentUnderdetermined(_))
        ));
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::x() * i as f64).collect();
        assert!(matches!(
            kabsch_align(&line, &line, true),
            Err(Error::AlignmentUnderdetermined(_))
        ));
        assert!(matches!(
            kabsch_align(&cloud(4, 0), &cloud(5, 0), true),
            Err(Error::DimensionMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn random_similarity_roundtrip(
            seed in 0u64..1000,
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.1f64..3.1,
            scale in 0.2f64..5.0,
            shift in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let axis = Vec3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner();
            let c = cloud(25, seed);
            let target: Vec<Vec3> = c.iter().map(|p| scale * (r * p) + Vec3::from(shift)).collect();
            let (aligned, _) = kabsch_align(&c, &target, true).unwrap();
            prop_assert!(residual(&aligned, &target) < 1e-9);
        }

        #[test]
        fn never_worse_than_unaligned(seed in 0u64..1000, noise in 0.0f64..0.3) {
            let c = cloud(25, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let target: Vec<Vec3> = c
                .iter()
                .map(|p| p + Vec3::new(rng.random(), rng.random(), rng.random()) * noise)
                .collect();
            for with_scale in [false, true] {
                let (aligned, _) = kabsch_align(&c, &target, with_scale).unwrap();
                prop_assert!(residual(&aligned, &target) <= residual(&c, &target) + 1e-12);
            }
        }
    }
}
