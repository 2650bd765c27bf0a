//! Synthetic clips with known ground truth: a rigid object, one or two hands
//! resting against it, rendered masks, detections and 2D hand evidence.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::{
    mask_key, mask_path, ClipEvidence, EvidenceFile, FrameEvidence, FrameRecord, HandInit, EVIDENCE_FILE,
};
use crate::geometry::{centroid, project, CameraIntrinsics, Mat3, Rotation6D, TriMesh, Vec2, Vec3};
use crate::hand_model::{procedural_hand, HandSide, ParametricHandModel};
use crate::io::write_json;
use crate::mask::MaskImage;
use crate::render::hard_silhouette;
use crate::sdf::{closest_point_on_triangle, is_inside};
use crate::state::{ClipState, FramePose, HandTrackState, ObjectTrackState};
use crate::tracking::{BBox, Detection, DetectionKind, ExpectedScene};

pub const GT_FILE: &str = "gt_states.json";
pub const OBJECT_MESH_FILE: &str = "meshes/object.obj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectSpec {
    Cube { size: f64, subdivisions: usize },
    Sphere { radius: f64, level: usize },
    /// OBJ file; relative paths resolve against the working directory.
    Mesh { path: String },
}

impl Default for ObjectSpec {
    fn default() -> Self {
        ObjectSpec::Cube {
            size: 0.08,
            subdivisions: 1,
        }
    }
}

impl ObjectSpec {
    pub fn mesh(&self) -> Result<TriMesh> {
        let mesh = match self {
            ObjectSpec::Cube { size, subdivisions } => TriMesh::cube(*size, *subdivisions),
            ObjectSpec::Sphere { radius, level } => TriMesh::icosphere(*radius, *level),
            ObjectSpec::Mesh { path } => TriMesh::read_obj(Path::new(path))?,
        };
        mesh.check_watertight()?;
        Ok(mesh)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            focal: 600.0,
            width: 640,
            height: 480,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Gaussian noise on 2D hand vertices (px).
    pub pixel_sigma: f64,
    /// Gaussian noise on every detection box coordinate (px).
    pub box_jitter: f64,
    /// Probability that a detection is missing from a frame.
    pub p_drop: f64,
    /// Per frame and mask, a random whole-pixel shift with this standard
    /// deviation (px) per axis.
    pub mask_shift: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.0,
            box_jitter: 0.0,
            p_drop: 0.0,
            mask_shift: 0.0,
        }
    }
}

/// Where hands rest relative to the object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandPlacement {
    /// Beside the object (right hands on the image right), palm toward it.
    #[default]
    Side,
    /// Behind the object along its viewing ray, palm toward the camera. With
    /// two hands both are stacked behind the object.
    Behind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub clip: String,
    pub object: ObjectSpec,
    pub frames: usize,
    pub camera: CameraSpec,
    /// Object center in the first frame (camera coordinates, m).
    pub object_position: [f64; 3],
    /// Object translation per frame (m).
    pub velocity: [f64; 3],
    /// Object rotation per frame (degrees) about `rotation_axis`.
    pub angular_velocity_deg: f64,
    pub rotation_axis: [f64; 3],
    /// Object orientation in the first frame: rotations about the camera x,
    /// then y axis (degrees).
    pub object_tilt_deg: [f64; 2],
    pub hands: Vec<HandSide>,
    pub hand_placement: HandPlacement,
    /// Rotation of the hand about the vertical axis, turning its back toward
    /// the camera (degrees); 0 shows the hand edge-on.
    pub hand_tilt_deg: f64,
    /// Closest hand-to-object surface distance (m); negative values make the
    /// hand penetrate.
    pub hand_gap: f64,
    /// Standard deviation of the latent hand pose.
    pub theta_sigma: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            clip: "synthetic".into(),
            object: ObjectSpec::default(),
            frames: 10,
            camera: CameraSpec::default(),
            object_position: [0.0, 0.0, 0.38],
            velocity: [0.0; 3],
            angular_velocity_deg: 0.0,
            rotation_axis: [0.0, 1.0, 0.0],
            object_tilt_deg: [20.0, 15.0],
            hands: vec![HandSide::Right],
            hand_placement: HandPlacement::Side,
            hand_tilt_deg: 0.0,
            hand_gap: 0.002,
            theta_sigma: 0.3,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames < 1 {
            return fail("frames must be at least 1");
        }
        if !(self.camera.focal > 0.0) || self.camera.width == 0 || self.camera.height == 0 {
            return fail("camera needs a positive focal length and size");
        }
        if !(self.object_position[2] > 0.0) {
            return fail("object must be in front of the camera");
        }
        let n = &self.noise;
        if [n.pixel_sigma, n.box_jitter, n.mask_shift, self.theta_sigma]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return fail("noise levels must be nonnegative");
        }
        if !(0.0..=1.0).contains(&n.p_drop) {
            return fail("p_drop must lie in [0, 1]");
        }
        let mut sides = self.hands.clone();
        sides.sort();
        sides.dedup();
        if sides.len() != self.hands.len() {
            return fail("each hand side may appear once");
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.camera.focal, self.camera.width, self.camera.height)
    }
}

fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    if axis.norm() < 1e-12 || angle == 0.0 {
        return Mat3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

fn signed_distance(mesh: &TriMesh, p: &Vec3) -> f64 {
    let d = (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.corners(f);
            (closest_point_on_triangle(p, &a, &b, &c) - p).norm()
        })
        .fold(f64::INFINITY, f64::min);
    if is_inside(mesh, p) {
        -d
    } else {
        d
    }
}

/// Hand orientation relative to the object motion, fingers up.
fn hand_rest_rotation(side: HandSide, placement: HandPlacement, tilt_deg: f64) -> Mat3 {
    let sign = if side == HandSide::Right { 1.0 } else { -1.0 };
    let base = match placement {
        // palm normal across the image x axis, hand seen edge-on
        HandPlacement::Side => Mat3::from_columns(&[
            Vec3::new(0.0, 0.0, sign),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(sign, 0.0, 0.0),
        ]),
        // palm normal along the viewing axis
        HandPlacement::Behind => Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)),
    };
    axis_angle(&Vec3::y(), -sign * tilt_deg.to_radians()) * base
}

/// Hand translation along `path` (centroid position as a function of a
/// distance parameter) at which the closest hand vertex is `gap` from the
/// object surface.
fn place_hand(object_world: &TriMesh, rotated: &[Vec3], path: impl Fn(f64) -> Vec3, gap: f64) -> Vec3 {
    let mean = centroid(rotated);
    let min_distance = |a: f64| {
        let t = path(a) - mean;
        rotated
            .iter()
            .map(|v| signed_distance(object_world, &(v + t)))
            .fold(f64::INFINITY, f64::min)
    };
    let (mut lo, mut hi) = (0.0, 0.3);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if min_distance(mid) < gap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    path(hi) - mean
}

/// Side placement keeps the hand centroid on the sphere through the camera
/// center and the object center, so that sliding the hand along its viewing
/// ray cannot bring it closer to the object centroid.
fn side_path(object_center: Vec3, lateral: Vec3) -> impl Fn(f64) -> Vec3 {
    let c = object_center.norm();
    let axis = object_center / c;
    let u = (lateral - axis * lateral.dot(&axis)).normalize();
    move |a: f64| {
        let b = 0.5 * (-c + (c * c - 4.0 * a * a).max(0.0).sqrt());
        object_center + u * a + axis * b
    }
}

/// Everything a synthetic clip consists of, before it is written out.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub gt: ClipState,
    pub evidence: EvidenceFile,
    pub object_mesh: TriMesh,
    /// Relative path to mask.
    pub masks: BTreeMap<String, MaskImage>,
    /// Frames (by index) whose object detection was dropped.
    pub dropped: Vec<usize>,
}

fn tight_box(points: &[Vec2]) -> BBox {
    points.iter().fold(
        [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        |b, p| [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)],
    )
}

pub fn synthesize(spec: &SceneSpec) -> Result<SyntheticClip> {
    spec.validate()?;
    let cam = spec.camera()?;
    let mesh = spec.object.mesh()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let models: Vec<ParametricHandModel> = spec.hands.iter().map(|&s| procedural_hand(s)).collect();
    let thetas: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            (0..m.latent_dim())
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    spec.theta_sigma * n
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let [tx, ty] = spec.object_tilt_deg;
    let r0 = axis_angle(&Vec3::y(), ty.to_radians()) * axis_angle(&Vec3::x(), tx.to_radians());
    let axis = Vec3::from(spec.rotation_axis);
    let p0 = Vec3::from(spec.object_position);
    let velocity = Vec3::from(spec.velocity);

    let mut object_frames = Vec::with_capacity(spec.frames);
    let mut hand_frames: Vec<Vec<FramePose>> = vec![Vec::new(); models.len()];
    let mut contact = Vec::with_capacity(spec.frames);
    let mut records = Vec::with_capacity(spec.frames);
    let mut masks = BTreeMap::new();
    let mut dropped = Vec::new();
    let shift = Normal::new(0.0, spec.noise.mask_shift.max(1e-300)).expect("valid sigma");
    let pix = Normal::new(0.0, spec.noise.pixel_sigma.max(1e-300)).expect("valid sigma");
    let jitter = Normal::new(0.0, spec.noise.box_jitter.max(1e-300)).expect("valid sigma");

    for t in 0..spec.frames {
        let motion = axis_angle(&axis, (spec.angular_velocity_deg * t as f64).to_radians());
        let r_obj = motion * r0;
        let d_obj = p0 + velocity * t as f64;
        let obj_world = mesh.transformed(&r_obj, &d_obj, 1.0);
        object_frames.push(FramePose {
            rotation: Rotation6D::from_matrix(&r_obj),
            translation: d_obj,
            theta: None,
        });

        let mut hand_worlds = Vec::new();
        let mut in_contact = false;
        for (h, model) in models.iter().enumerate() {
            let side = model.side;
            let sign = if side == HandSide::Right { 1.0 } else { -1.0 };
            let r_hand = motion * hand_rest_rotation(side, spec.hand_placement, spec.hand_tilt_deg);
            let centered = model.hand_vertices(&thetas[h])?;
            let rotated: Vec<Vec3> = centered.iter().map(|v| r_hand * v).collect();
            let d_hand = match spec.hand_placement {
                HandPlacement::Side => {
                    let lateral = motion * Vec3::new(sign, 0.0, 0.0);
                    place_hand(&obj_world, &rotated, side_path(d_obj, lateral), spec.hand_gap)
                }
                HandPlacement::Behind => {
                    let axis = d_obj.normalize();
                    place_hand(&obj_world, &rotated, |a| d_obj + axis * a, spec.hand_gap)
                }
            };
            let world: Vec<Vec3> = centered.iter().map(|v| r_hand * v + d_hand).collect();
            in_contact |= world.iter().any(|v| signed_distance(&obj_world, v) <= 0.0);
            hand_frames[h].push(FramePose {
                rotation: Rotation6D::from_matrix(&r_hand),
                translation: d_hand,
                theta: Some(thetas[h].clone()),
            });
            hand_worlds.push((side, world));
        }
        contact.push(in_contact);

        // masks; hands are taken to occlude the object
        let obj_mask = hard_silhouette(&obj_world.vertices, &obj_world.faces, &cam, cam.width, cam.height)?;
        let mut occlusion = MaskImage::zeros(cam.width, cam.height);
        let mut frame_masks = BTreeMap::new();
        let mut detections = Vec::new();
        let mut hand_init = BTreeMap::new();
        for ((side, world), model) in hand_worlds.iter().zip(&models) {
            let m = hard_silhouette(world, &model.faces, &cam, cam.width, cam.height)?;
            occlusion = occlusion.union(&m)?;
            let uv = project(&cam, world)?;
            detections.push((DetectionKind::hand(*side), tight_box(&uv)));
            let noisy: Vec<[f64; 2]> = uv
                .iter()
                .map(|p| {
                    if spec.noise.pixel_sigma > 0.0 {
                        [p.x + pix.sample(&mut rng), p.y + pix.sample(&mut rng)]
                    } else {
                        [p.x, p.y]
                    }
                })
                .collect();
            let h = spec.hands.iter().position(|s| s == side).expect("hand side");
            hand_init.insert(
                *side,
                HandInit {
                    theta_init: thetas[h].clone(),
                    rotation_init: hand_frames[h][t].rotation,
                    vertices_2d: noisy,
                },
            );
            frame_masks.insert(Some(*side), m);
        }
        let visible = obj_mask.masked_out(&occlusion)?;
        let obj_uv = project(&cam, &obj_world.vertices)?;
        detections.insert(0, (DetectionKind::Object, tight_box(&obj_uv)));
        frame_masks.insert(None, visible);

        let mut mask_refs = BTreeMap::new();
        for (side, m) in frame_masks {
            let m = if spec.noise.mask_shift > 0.0 {
                let dx = shift.sample(&mut rng).round() as i32;
                let dy = shift.sample(&mut rng).round() as i32;
                m.shifted(dx, dy)
            } else {
                m
            };
            let key = mask_key(side);
            let rel = mask_path(t, key);
            mask_refs.insert(key.to_string(), rel.clone());
            masks.insert(rel, m);
        }

        let mut dets = Vec::new();
        for (kind, b) in detections {
            let drop = spec.noise.p_drop > 0.0 && rng.random::<f64>() < spec.noise.p_drop;
            let b = if spec.noise.box_jitter > 0.0 {
                let j: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
                [b[0] + j[0], b[1] + j[1], b[2] + j[2], b[3] + j[3]]
            } else {
                b
            };
            if drop {
                if kind == DetectionKind::Object {
                    dropped.push(t);
                }
                continue;
            }
            if let Ok(d) = Detection::new(kind, 1.0, b) {
                dets.push(d);
            }
        }
        records.push(FrameRecord {
            frame_index: t,
            detections: dets,
            hand_init,
            masks: mask_refs,
        });
    }

    let gt = ClipState {
        hands: spec
            .hands
            .iter()
            .zip(hand_frames)
            .map(|(&side, frames)| HandTrackState {
                side,
                scale: 1.0,
                frames,
            })
            .collect(),
        object: Some(ObjectTrackState {
            scale: 1.0,
            frames: object_frames,
        }),
        contact_labels: Some(contact),
    };
    let evidence = EvidenceFile {
        clip: spec.clip.clone(),
        camera: cam,
        object_mesh: Some(OBJECT_MESH_FILE.to_string()),
        hand_models: BTreeMap::new(),
        expected: ExpectedScene {
            n_hands: spec.hands.len(),
            sides: spec.hands.clone(),
            object_present: true,
        },
        frames: records,
    };
    Ok(SyntheticClip {
        gt,
        evidence,
        object_mesh: mesh,
        masks,
        dropped,
    })
}

impl SyntheticClip {
    /// The evidence as the fitter would load it from `dir` after [`write`](Self::write).
    pub fn clip_evidence(&self, dir: &Path) -> ClipEvidence {
        let frames = self
            .evidence
            .frames
            .iter()
            .map(|rec| {
                let mut object_mask = None;
                let mut hand_masks = BTreeMap::new();
                for (key, rel) in &rec.masks {
                    let m = self.masks[rel].clone();
                    match key.as_str() {
                        "hand_left" => {
                            hand_masks.insert(HandSide::Left, m);
                        }
                        "hand_right" => {
                            hand_masks.insert(HandSide::Right, m);
                        }
                        _ => object_mask = Some(m),
                    }
                }
                FrameEvidence {
                    frame_index: rec.frame_index,
                    detections: rec.detections.clone(),
                    object_mask,
                    hand_masks,
                    hand_init: rec.hand_init.clone(),
                }
            })
            .collect();
        ClipEvidence {
            dir: dir.to_path_buf(),
            file: self.evidence.clone(),
            frames,
        }
    }

    /// Writes `gt_states.json`, `evidence.json`, `masks/` and `meshes/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
        std::fs::create_dir_all(dir.join("meshes")).map_err(|e| Error::io(dir, e))?;
        self.object_mesh.write_obj(&dir.join(OBJECT_MESH_FILE))?;
        for (rel, m) in &self.masks {
            m.save_png(&dir.join(rel))?;
        }
        write_json(&dir.join(EVIDENCE_FILE), &self.evidence)?;
        write_json(&dir.join(GT_FILE), &self.gt)
    }
}

/// Synthesizes a clip and writes it to `dir`.
pub fn generate_clip(spec: &SceneSpec, dir: &Path) -> Result<SyntheticClip> {
    let clip = synthesize(spec)?;
    clip.write(dir)?;
    Ok(clip)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-9 {
            return v.normalize();
        }
    }
}

/// Offsets every entity by one seeded rigid perturbation shared by all of its
/// frames: a rotation of exactly `rot_deg` about a random axis through the
/// entity origin, a translation of norm `trans_m`, and for hands Gaussian
/// latent noise.
pub fn perturb_state(gt: &ClipState, rot_deg: f64, trans_m: f64, theta_sigma: f64, seed: u64) -> Result<ClipState> {
    if !(rot_deg >= 0.0 && trans_m >= 0.0 && theta_sigma >= 0.0) {
        return Err(Error::Config("perturbation magnitudes must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = gt.clone();
    let mut draw = |latent: usize| {
        let r = axis_angle(&random_unit(&mut rng), rot_deg.to_radians());
        let d = random_unit(&mut rng) * trans_m;
        let noise: Vec<f64> = (0..latent)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut rng);
                theta_sigma * n
            })
            .collect();
        (r, d, noise)
    };
    let apply = |frames: &mut [FramePose], (r, d, noise): &(Mat3, Vec3, Vec<f64>)| -> Result<()> {
        for f in frames {
            if rot_deg > 0.0 {
                f.rotation = Rotation6D::from_matrix(&(r * f.rotation.to_matrix()?));
            }
            f.translation += d;
            if let Some(theta) = &mut f.theta {
                for (x, n) in theta.iter_mut().zip(noise) {
                    *x += n;
                }
            }
        }
        Ok(())
    };
    for h in &mut out.hands {
        let latent = h.frames.first().and_then(|f| f.theta.as_ref()).map_or(0, Vec::len);
        let p = draw(latent);
        apply(&mut h.frames, &p)?;
    }
    if let Some(o) = &mut out.object {
        let p = draw(0);
        apply(&mut o.frames, &p)?;
    }
    Ok(out)
}
