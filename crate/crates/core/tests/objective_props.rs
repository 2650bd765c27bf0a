use hofit::geometry::{project, CameraIntrinsics, Mat3, Rotation6D, TriMesh, Vec2, Vec3};
use hofit::hand_model::{procedural_hand, HandSide};
use hofit::mask::MaskImage;
use hofit::objective::{
    loss_collision, ClipProblem, CollisionMesh, FrameTarget, LossWeights, Objective, ObjectModel, Stage,
};
use hofit::render::{hard_silhouette, RenderConfig};
use hofit::sdf::{PosedSdf, SdfGrid};
use hofit::state::{ClipState, FramePose, HandTrackState, Layout, ObjectTrackState};
use nalgebra::{Rotation3, Unit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rot(axis: Vec3, angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

fn random_rot(rng: &mut ChaCha8Rng, max_angle: f64) -> Mat3 {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    rot(axis, rng.random_range(-max_angle..max_angle))
}

/// Two-frame cube + hand scene on a 32x32 image, hand overlapping the cube.
fn scene(seed: u64) -> (Objective, ClipState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraIntrinsics::centered(50.0, 32, 32).unwrap();
    let hand = procedural_hand(HandSide::Right);
    let cube = TriMesh::cube(0.08, 2);
    let object = ObjectModel::new(cube.clone(), 32).unwrap();
    let k = hand.latent_dim();
    let t_count = 2;

    let mut hand_frames = Vec::new();
    let mut obj_frames = Vec::new();
    let mut targets = Vec::new();
    let r_obj0 = random_rot(&mut rng, 0.6);
    let r_hand0 = random_rot(&mut rng, 3.0);
    for t in 0..t_count {
        let r_obj = r_obj0 * random_rot(&mut rng, 0.05);
        let d_obj = Vec3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.5 + 0.01 * t as f64);
        let r_hand = r_hand0 * random_rot(&mut rng, 0.05);
        let d_hand = d_obj + Vec3::new(0.05, rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        obj_frames.push(FramePose {
            rotation: Rotation6D::from_matrix(&r_obj),
            translation: d_obj,
            theta: None,
        });
        hand_frames.push(FramePose {
            rotation: Rotation6D::from_matrix(&r_hand),
            translation: d_hand,
            theta: Some(theta.clone()),
        });

        // targets from a nearby pose
        let r_gt = r_obj * random_rot(&mut rng, 0.2);
        let d_gt = d_obj + Vec3::new(0.01, -0.005, 0.02);
        let gt_obj = cube.transformed(&r_gt, &d_gt, 1.0);
        let object_mask = hard_silhouette(&gt_obj.vertices, &gt_obj.faces, &cam, 32, 32).unwrap();
        let hand_world = hand.mesh(&theta).unwrap().transformed(&r_hand, &(d_hand + Vec3::new(0.0, 0.0, 0.03)), 1.0);
        let mut occlusion = MaskImage::zeros(32, 32);
        for r in 0..32 {
            for c in 24..32 {
                occlusion.set(r, c, 1.0);
            }
        }
        let noisy: Vec<Vec2> = project(&cam, &hand_world.vertices)
            .unwrap()
            .into_iter()
            .map(|p| p + Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        targets.push(FrameTarget {
            object_mask: Some(object_mask),
            occlusion,
            hand_2d: vec![Some(noisy)],
            overlap: vec![true],
        });
    }
    let state = ClipState {
        hands: vec![HandTrackState {
            side: HandSide::Right,
            scale: 1.05,
            frames: hand_frames,
        }],
        object: Some(ObjectTrackState {
            scale: 0.95,
            frames: obj_frames,
        }),
        contact_labels: None,
    };
    let problem = ClipProblem {
        camera: cam.clone(),
        render_camera: cam,
        render_config: RenderConfig::new(32, 32).with_culling(true),
        object: Some(object),
        hands: vec![hand],
        frames: targets,
        weights: LossWeights::default(),
        optimize_object_scale: true,
        sdf_resolution: 32,
    };
    (Objective::new(problem), state)
}

// Central differences with one Richardson step. Hand parameters only reach
// the loss through algebraic terms and the trilinear SDF; object parameters
// also go through the soft renderer.
#[test]
fn objective_gradient_matches_finite_differences() {
    let (mut obj, state) = scene(3);
    let (b, grad) = obj.evaluate(&state, Stage::Full).unwrap();
    for v in b.terms() {
        assert!(v > 0.0);
    }
    let layout = Layout::of(&state);
    let x = layout.flatten(&state);
    let object_start = layout.object.as_ref().unwrap().scale;
    let h = 1e-5;
    for i in 0..layout.len {
        let mut central = |h: f64| {
            let mut p = x.clone();
            p[i] += h;
            let fp = obj.evaluate(&layout.unflatten(&p, &state), Stage::Full).unwrap().0.total;
            p[i] -= 2.0 * h;
            let fm = obj.evaluate(&layout.unflatten(&p, &state), Stage::Full).unwrap().0.total;
            (fp - fm) / (2.0 * h)
        };
        let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        let tol = if i >= object_start { 1e-3 } else { 1e-6 };
        assert!(rel < tol, "param {i}: analytic {} vs fd {fd} (rel {rel:e})", grad[i]);
    }
}

#[test]
fn zero_weights_give_zero() {
    let (mut obj, state) = scene(1);
    obj.problem.weights = LossWeights::zero();
    let (b, grad) = obj.evaluate(&state, Stage::Full).unwrap();
    assert_eq!(b.total, 0.0);
    assert!(grad.iter().all(|g| *g == 0.0));
}

#[test]
fn single_weight_total_equals_term() {
    let (mut obj, state) = scene(2);
    let mut w = LossWeights::zero();
    w.lambda_obj = 1.0;
    obj.problem.weights = w;
    let (b, _) = obj.evaluate(&state, Stage::Full).unwrap();
    assert_eq!(b.total, b.obj);
    assert!(b.obj > 0.0);
}

#[test]
fn coarse_stage_skips_interaction_terms() {
    let (mut obj, state) = scene(4);
    let (b, _) = obj.evaluate(&state, Stage::Coarse).unwrap();
    assert_eq!(b.local, 0.0);
    assert_eq!(b.col, 0.0);
    assert_eq!(obj.sdf_rebuilds(), 0);
    let (b, _) = obj.evaluate(&state, Stage::Full).unwrap();
    assert!(b.col > 0.0);
}

#[test]
fn total_is_weighted_sum() {
    let (mut obj, state) = scene(5);
    let (b, _) = obj.evaluate(&state, Stage::Full).unwrap();
    let w = obj.problem.weights.as_array();
    let sum: f64 = b.terms().iter().zip(w).map(|(t, w)| t * w).sum();
    assert!((b.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn collision_is_invariant_to_mesh_order(
        offsets in prop::collection::vec(prop::array::uniform3(-0.06f64..0.06), 3),
        perm in Just([2usize, 0, 1]),
    ) {
        let sphere = TriMesh::icosphere(0.04, 2);
        let cube = TriMesh::cube(0.06, 2);
        let gs = SdfGrid::build(&sphere, 24).unwrap();
        let gc = SdfGrid::build(&cube, 24).unwrap();
        let shapes = [(&sphere, &gs), (&cube, &gc), (&sphere, &gs)];
        let verts: Vec<Vec<Vec3>> = shapes
            .iter()
            .zip(&offsets)
            .map(|((m, _), o)| m.vertices.iter().map(|v| v + Vec3::from(*o)).collect())
            .collect();
        let meshes = |order: &[usize]| -> Vec<CollisionMesh> {
            order
                .iter()
                .map(|&i| CollisionMesh {
                    vertices: &verts[i],
                    sdf: PosedSdf {
                        grid: shapes[i].1,
                        rotation: Mat3::identity(),
                        translation: Vec3::from(offsets[i]),
                        scale: 1.0,
                    },
                })
                .collect()
        };
        let a = loss_collision(&meshes(&[0, 1, 2])).0;
        let b = loss_collision(&meshes(&perm)).0;
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(a >= 0.0);
    }
}
