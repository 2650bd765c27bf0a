use nalgebra::{Quaternion, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::joint::{problem_for_object, run_stage};
use super::{Adam, FitConfig};
use crate::error::{Error, Result};
use crate::evidence::FrameEvidence;
use crate::geometry::{centroid, project, CameraIntrinsics, Mat3, Rotation6D, TriMesh, Vec2, Vec3};
use crate::hand_model::{BodyState, HandSide, ParametricHandModel};
use crate::mask::MaskImage;
use crate::objective::{ObjectModel, Objective, Stage};
use crate::render::{hard_silhouette, mask_iou};
use crate::state::{ClipState, FramePose, Layout, ObjectTrackState};
use crate::tracking::BBox;

fn max_pairwise(points: impl Fn(usize, usize) -> f64, n: usize) -> f64 {
    let mut best = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            best = best.max(points(i, j));
        }
    }
    best
}

/// Hand pose from the frame's hand estimate. Depth comes from matching the
/// largest 3D vertex spread to the largest 2D spread; the in-plane position
/// puts the vertex centroid on the 2D centroid. Scale starts at 1.
pub fn init_hand(
    frame: &FrameEvidence,
    side: HandSide,
    model: &ParametricHandModel,
    cam: &CameraIntrinsics,
) -> Result<BodyState> {
    let init = frame.hand_init.get(&side).ok_or_else(|| {
        Error::MissingEvidence(format!("no {} hand estimate in frame {}", side.as_str(), frame.frame_index))
    })?;
    let centered = model.hand_vertices(&init.theta_init)?;
    let pts = init.points();
    if pts.len() != centered.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} 2D hand vertices, model has {}",
            pts.len(),
            centered.len()
        )));
    }
    let r = init.rotation_init.to_matrix()?;
    let posed: Vec<Vec3> = centered.iter().map(|v| r * v).collect();
    let span3 = max_pairwise(|i, j| (posed[i] - posed[j]).norm(), posed.len());
    let span2 = max_pairwise(|i, j| (pts[i] - pts[j]).norm(), pts.len());
    if !(span2 > 1e-9) {
        return Err(Error::DegenerateEvidence(format!(
            "2D hand vertices in frame {} have no spread",
            frame.frame_index
        )));
    }
    let depth = cam.mean_focal() * span3 / span2;
    let c2 = pts.iter().fold(Vec2::zeros(), |a, p| a + p) / pts.len() as f64;
    let translation = cam.unproject(&c2, depth) - centroid(&posed);
    Ok(BodyState {
        rotation: init.rotation_init,
        translation,
        scale: 1.0,
        theta: Some(init.theta_init.clone()),
    })
}

/// `n` independent uniformly distributed rotations.
pub fn sample_rotations(n: usize, seed: u64) -> Vec<Mat3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let q = Quaternion::new(q[0], q[1], q[2], q[3]);
            if q.norm() > 1e-9 {
                break UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
            }
        })
        .collect()
}

fn projected_box(points: &[Vec3], cam: &CameraIntrinsics) -> Result<BBox> {
    let uv = project(cam, points)?;
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in &uv {
        b = [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)];
    }
    Ok(b)
}

fn box_center(b: &BBox) -> Vec2 {
    Vec2::new(0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]))
}

fn box_diagonal(b: &BBox) -> f64 {
    (b[2] - b[0]).hypot(b[3] - b[1])
}

/// Object translation whose projected tight box matches `bbox`, alternating
/// a depth update from the box diagonals and an in-plane update from the box
/// centers.
pub fn init_object_translation(mesh: &TriMesh, r: &Mat3, bbox: &BBox, cam: &CameraIntrinsics) -> Result<Vec3> {
    if mesh.vertices.is_empty() {
        return Err(Error::EmptyInput("object mesh has no vertices".into()));
    }
    if !(bbox[2] - bbox[0] > 0.0 && bbox[3] - bbox[1] > 0.0) {
        return Err(Error::DegenerateEvidence(format!("object box {bbox:?} has zero area")));
    }
    let rotated: Vec<Vec3> = mesh.vertices.iter().map(|v| r * v).collect();
    let (lo, hi) = rotated.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), v| (lo.inf(v), hi.sup(v)),
    );
    let target_diag = box_diagonal(bbox);
    let target_center = box_center(bbox);
    let depth = cam.mean_focal() * (hi.x - lo.x).hypot(hi.y - lo.y) / target_diag;
    let mut t = cam.unproject(&target_center, depth.max(1e-3));
    let placed = |t: &Vec3| -> Vec<Vec3> { rotated.iter().map(|v| v + t).collect() };
    for _ in 0..50 {
        let prev = t;
        let b = projected_box(&placed(&t), cam)?;
        t *= box_diagonal(&b) / target_diag;
        let b = projected_box(&placed(&t), cam)?;
        let shift = target_center - box_center(&b);
        t.x += shift.x * t.z / cam.fx;
        t.y += shift.y * t.z / cam.fy;
        if (t - prev).norm() < 1e-4 {
            break;
        }
    }
    Ok(t)
}

/// Full-resolution evidence of the object in one frame.
#[derive(Debug, Clone)]
pub struct ObjectFrameTarget {
    pub mask: Option<MaskImage>,
    pub occlusion: MaskImage,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub state: BodyState,
    pub iou: f64,
}

fn visible_iou(
    model: &ObjectModel,
    state: &BodyState,
    mask: &MaskImage,
    occlusion: &MaskImage,
    cam: &CameraIntrinsics,
) -> Result<f64> {
    let r = state.rotation.to_matrix()?;
    let posed = model.mesh.transformed(&r, &state.translation, state.scale);
    let hard = hard_silhouette(&posed.vertices, &posed.faces, cam, cam.width, cam.height)?;
    mask_iou(&hard.masked_out(occlusion)?, &mask.masked_out(occlusion)?)
}

/// Silhouette-only refinement of the object rotation and translation.
pub fn refine_object_silhouette(
    state: &BodyState,
    model: &ObjectModel,
    mask: &MaskImage,
    occlusion: &MaskImage,
    cam: &CameraIntrinsics,
    config: &FitConfig,
) -> Result<RefineResult> {
    let clip = ClipState {
        hands: Vec::new(),
        object: Some(ObjectTrackState {
            scale: state.scale,
            frames: vec![FramePose {
                rotation: state.rotation,
                translation: state.translation,
                theta: None,
            }],
        }),
        contact_labels: None,
    };
    let problem = problem_for_object(model, mask, occlusion, cam, config);
    let layout = Layout::of(&clip);
    let mut adam = Adam::new(
        &layout.groups(false),
        config.lr_pose,
        config.lr_translation_scale,
        config.adam_betas,
        config.adam_epsilon,
    );
    let mut objective = Objective::new(problem);
    let steps = (config.steps_per_stage / 2).max(1);
    let (best, _) = run_stage(&mut objective, &layout, &clip, Stage::Coarse, steps, 0, &mut adam, &mut Vec::new())?;
    let refined = best.object.as_ref().expect("object state").body(0);
    let iou = visible_iou(model, &refined, mask, occlusion, cam)?;
    Ok(RefineResult { state: refined, iou })
}

#[derive(Debug, Clone)]
pub struct MotionInit {
    pub states: Vec<BodyState>,
    /// Index of the winning rotation candidate.
    pub candidate: usize,
    pub mean_iou: f64,
}

fn candidate_motion(
    model: &ObjectModel,
    frames: &[ObjectFrameTarget],
    first: usize,
    rotation: &Mat3,
    cam: &CameraIntrinsics,
    config: &FitConfig,
) -> Result<(Vec<BodyState>, f64)> {
    let f0 = &frames[first];
    let mask0 = f0.mask.as_ref().expect("first frame has a mask");
    let bbox = match f0.bbox {
        Some(b) => b,
        None => mask0
            .bounding_box()
            .ok_or_else(|| Error::DegenerateEvidence("first object mask is empty".into()))?,
    };
    let t0 = init_object_translation(&model.mesh, rotation, &bbox, cam)?;
    let mut current = BodyState::rigid(Rotation6D::from_matrix(rotation), t0);
    let mut states = Vec::with_capacity(frames.len());
    let mut iou_sum = 0.0;
    let mut counted = 0usize;
    for f in &frames[first..] {
        if let Some(mask) = &f.mask {
            let r = refine_object_silhouette(&current, model, mask, &f.occlusion, cam, config)?;
            current = r.state;
            iou_sum += r.iou;
            counted += 1;
        }
        states.push(current.clone());
    }
    let mut out = vec![states[0].clone(); first];
    out.extend(states);
    Ok((out, iou_sum / counted as f64))
}

/// Object motion over the clip: every rotation candidate is placed in the
/// first masked frame and tracked forward by silhouette refinement; the
/// candidate with the best mean IoU wins (lowest index on ties).
pub fn init_object_motion(
    model: &ObjectModel,
    frames: &[ObjectFrameTarget],
    cam: &CameraIntrinsics,
    config: &FitConfig,
) -> Result<MotionInit> {
    let first = frames
        .iter()
        .position(|f| f.mask.is_some())
        .ok_or_else(|| Error::MissingEvidence("no frame has an object mask".into()))?;
    let rotations = sample_rotations(config.n_rotation_candidates, config.seed);
    let results: Vec<(Vec<BodyState>, f64)> = rotations
        .par_iter()
        .map(|r| candidate_motion(model, frames, first, r, cam, config))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, iou)) in results.iter().enumerate() {
        if *iou > results[best].1 {
            best = i;
        }
    }
    let (states, mean_iou) = results.into_iter().nth(best).expect("at least one candidate");
    Ok(MotionInit {
        states,
        candidate: best,
        mean_iou,
    })
}
