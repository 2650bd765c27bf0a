use hofit::geometry::{TriMesh, Vec3};
use hofit::sdf::{is_inside, phi, query_sdf, SdfGrid, DEFAULT_RESOLUTION};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generalized winding number via summed signed solid angles.
fn winding_number(mesh: &TriMesh, p: &Vec3) -> f64 {
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.corners(f).map(|v| v - p);
        let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
        let num = a.dot(&b.cross(&c));
        let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
        total += 2.0 * num.atan2(den);
    }
    total / (4.0 * std::f64::consts::PI)
}

#[test]
fn sphere_field_is_accurate() {
    let r = 0.05;
    let mesh = TriMesh::icosphere(r, 3);
    assert_eq!(mesh.faces.len(), 1280);
    let grid = SdfGrid::build(&mesh, DEFAULT_RESOLUTION).unwrap();
    let (lo, hi) = grid.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let points: Vec<Vec3> = (0..10_000)
        .map(|_| Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z)))
        .collect();
    let (values, _) = query_sdf(&grid, &points);
    let worst = points
        .iter()
        .zip(&values)
        .map(|(p, v)| (v - (p.norm() - r)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1.5 * grid.cell_size, "worst {worst} cell {}", grid.cell_size);
}

#[test]
fn parity_agrees_with_winding_number() {
    let mesh = TriMesh::cube(0.1, 3).transformed(
        &nalgebra::Rotation3::from_euler_angles(0.4, 0.2, -0.7).into_inner(),
        &Vec3::new(0.01, 0.0, 0.02),
        1.0,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let p = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let w = winding_number(&mesh, &p);
        assert_eq!(is_inside(&mesh, &p), w > 0.5, "point {p:?} winding {w}");
    }
}

#[test]
fn gradient_points_outward_on_sphere() {
    let mesh = TriMesh::icosphere(0.05, 3);
    let grid = SdfGrid::build(&mesh, DEFAULT_RESOLUTION).unwrap();
    let pts = [Vec3::new(0.07, 0.0, 0.0), Vec3::new(0.0, -0.03, 0.0), Vec3::new(0.02, 0.02, 0.06)];
    let (_, grads) = query_sdf(&grid, &pts);
    for (p, g) in pts.iter().zip(&grads) {
        assert!(g.normalize().dot(&p.normalize()) > 0.9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn phi_is_nonnegative_and_zero_outside(x in -0.3f64..0.3, y in -0.3f64..0.3, z in -0.3f64..0.3) {
        use std::sync::OnceLock;
        static GRID: OnceLock<SdfGrid> = OnceLock::new();
        let grid = GRID.get_or_init(|| SdfGrid::build(&TriMesh::cube(0.1, 2), 24).unwrap());
        let p = Vec3::new(x, y, z);
        let v = grid.sample(&p).0;
        let f = phi(grid, &[p])[0];
        prop_assert!(f >= 0.0);
        if v >= 0.0 {
            prop_assert_eq!(f, 0.0);
        } else {
            prop_assert_eq!(f, -v);
        }
    }
}
