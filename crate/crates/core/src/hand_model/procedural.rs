//! Deterministic low-poly test hand.
//!
//! The surface is a star-shaped "mitten": an icosphere whose vertices are
//! mapped onto a flattened ellipsoid and pushed outward along thumb and
//! fingertip lobes. Radial displacement keeps the surface free of
//! self-intersections, so the mesh is watertight and has a well-defined
//! inside. The 16 pose blendshapes are seeded random mixtures of smooth,
//! region-localized linearized rotations (finger flex and spread, thumb
//! rotation, palm cup, wrist flex, twist).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{HandSide, JointRegressor, ParametricHandModel, CENTER_JOINT, DEFAULT_LATENT_DIM};
use crate::geometry::{TriMesh, Vec3};

const HALF_WIDTH: f64 = 0.042;
const HALF_LENGTH: f64 = 0.085;
const HALF_THICKNESS: f64 = 0.016;
/// Largest single-vertex offset of each blendshape at `theta_k = 1`.
const BASIS_PEAK: f64 = 0.005;
const BASIS_SEED: u64 = 0x4841_4e44;

fn thumb_direction() -> Vec3 {
    Vec3::new(-0.85, -0.1, 0.0).normalize()
}

/// Finger columns (index, middle, ring, pinky) as fractions of the half width.
const FINGER_COLUMNS: [f64; 4] = [-0.5, -0.17, 0.17, 0.5];

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn lobe(u: &Vec3, dir: &Vec3, width: f64) -> f64 {
    (-(1.0 - u.dot(dir)) / width).exp()
}

fn surface_point(u: &Vec3) -> Vec3 {
    let base = Vec3::new(HALF_WIDTH * u.x, HALF_LENGTH * u.y, HALF_THICKNESS * u.z);
    let mut factor = 1.0 + 0.55 * lobe(u, &thumb_direction(), 0.05);
    for c in FINGER_COLUMNS {
        let dir = Vec3::new(c * 0.6, 1.0, 0.0).normalize();
        factor += 0.1 * lobe(u, &dir, 0.012);
    }
    base * factor
}

fn joint_anchors() -> Vec<Vec3> {
    let (a, b) = (HALF_WIDTH, HALF_LENGTH);
    let finger = |col: f64, y: f64| Vec3::new(col * a, y * b, 0.0);
    let chain = |col: f64| [finger(col, 0.3), finger(col, 0.6), finger(col, 0.82)];
    let thumb_base = Vec3::new(-0.45 * a, -0.25 * b, 0.0);
    let thumb_tip = surface_point(&thumb_direction());
    let thumb = |t: f64| thumb_base + (thumb_tip - thumb_base) * t;
    let [index, middle, ring, pinky] = FINGER_COLUMNS;
    let mut anchors = vec![Vec3::new(0.0, -0.9 * b, 0.0)];
    anchors.extend(chain(index));
    anchors.extend(chain(middle));
    anchors.extend(chain(pinky));
    anchors.extend(chain(ring));
    anchors.extend([thumb(0.15), thumb(0.45), thumb(0.72), thumb(1.0)]);
    for col in [index, middle, ring, pinky] {
        anchors.push(finger(col, 1.15));
    }
    anchors
}

fn nearest_regressor(vertices: &[Vec3], anchors: &[Vec3], k: usize) -> JointRegressor {
    let rows = anchors
        .iter()
        .map(|a| {
            let mut idx: Vec<usize> = (0..vertices.len()).collect();
            idx.sort_by(|&i, &j| {
                (vertices[i] - a)
                    .norm_squared()
                    .total_cmp(&(vertices[j] - a).norm_squared())
                    .then(i.cmp(&j))
            });
            idx.truncate(k);
            idx.sort_unstable();
            idx.into_iter().map(|i| (i as u32, 1.0 / k as f64)).collect()
        })
        .collect();
    JointRegressor { rows }
}

fn generators(vertices: &[Vec3], directions: &[Vec3]) -> Vec<Vec<Vec3>> {
    let (a, b) = (HALF_WIDTH, HALF_LENGTH);
    let top = |v: &Vec3| smoothstep(0.1 * b, 0.45 * b, v.y);
    let column = |v: &Vec3, c: f64| (-((v.x - c * a) / (0.35 * a)).powi(2)).exp();
    let rotation = |axis: Vec3, pivot: Vec3, weight: &dyn Fn(usize, &Vec3) -> f64| -> Vec<Vec3> {
        vertices
            .iter()
            .enumerate()
            .map(|(i, v)| axis.cross(&(v - pivot)) * weight(i, v))
            .collect()
    };
    let mcp = Vec3::new(0.0, 0.3 * b, 0.0);
    let mut out = Vec::new();
    for c in FINGER_COLUMNS {
        out.push(rotation(Vec3::x(), mcp, &|_, v| top(v) * column(v, c)));
        out.push(rotation(
            Vec3::z(),
            Vec3::new(c * a, 0.3 * b, 0.0),
            &|_, v| top(v) * column(v, c),
        ));
    }
    let thumb_base = Vec3::new(-0.45 * a, -0.25 * b, 0.0);
    let thumb_weight = |i: usize, _: &Vec3| lobe(&directions[i], &thumb_direction(), 0.12);
    for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
        out.push(rotation(axis, thumb_base, &thumb_weight));
    }
    out.push(rotation(Vec3::x(), mcp, &|_, v| top(v)));
    out.push(rotation(
        Vec3::x(),
        Vec3::new(0.0, -0.3 * b, 0.0),
        &|_, v| smoothstep(-0.2 * b, -0.7 * b, v.y),
    ));
    out.push(rotation(Vec3::y(), Vec3::zeros(), &|_, v| top(v)));
    // palm cup: both halves fold toward +z around the y axis
    out.push(
        vertices
            .iter()
            .map(|v| Vec3::new(v.z, 0.0, -v.x) * -(v.x / (0.4 * a)).tanh())
            .collect(),
    );
    // finger spread in the palm plane
    out.push(vertices.iter().map(|v| Vec3::new(v.x, 0.0, 0.0) * top(v)).collect());
    out
}

fn normalize_peak(field: &mut [Vec3], peak: f64) {
    let max = field.iter().map(|d| d.norm()).fold(0.0, f64::max);
    if max > 0.0 {
        for d in field {
            *d *= peak / max;
        }
    }
}

fn build_right() -> ParametricHandModel {
    let sphere = TriMesh::icosphere(1.0, 3);
    let directions = sphere.vertices.clone();
    let mut vertices: Vec<Vec3> = directions.iter().map(surface_point).collect();

    let joint_regressor = nearest_regressor(&vertices, &joint_anchors(), 4);
    let center = joint_regressor.apply(&vertices)[CENTER_JOINT];

    let mut gens = generators(&vertices, &directions);
    for g in &mut gens {
        normalize_peak(g, 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED);
    let pose_basis = (0..DEFAULT_LATENT_DIM)
        .map(|_| {
            let coeffs: Vec<f64> = (0..gens.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut field = vec![Vec3::zeros(); vertices.len()];
            for (c, g) in coeffs.iter().zip(&gens) {
                for (f, d) in field.iter_mut().zip(g) {
                    *f += d * *c;
                }
            }
            normalize_peak(&mut field, BASIS_PEAK);
            field
        })
        .collect();

    for v in &mut vertices {
        *v -= center;
    }
    ParametricHandModel {
        mean_vertices: vertices,
        pose_basis,
        faces: sphere.faces,
        joint_regressor,
        side: HandSide::Right,
    }
}

/// The bundled test hand for either side. Deterministic across runs.
pub fn procedural_hand(side: HandSide) -> ParametricHandModel {
    let right = build_right();
    match side {
        HandSide::Right => right,
        HandSide::Left => right.mirrored(),
    }
}
