//! Loss terms of the hand-object fit and the clip-level objective with its
//! gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, project, project_backward, rot6d_backward, CameraIntrinsics, Mat3, Vec2, Vec3};
use crate::hand_model::{pose_points, pose_points_backward, ParametricHandModel};
use crate::mask::MaskImage;
use crate::render::{soft_silhouette, RenderConfig};
use crate::sdf::{CachedSdf, PosedSdf, SdfGrid};
use crate::state::{ClipState, Layout};
use crate::geometry::TriMesh;

/// Attraction band outside the object surface (m).
pub const CONTACT_ATTRACTION: f64 = 0.01;
/// Penetration depth up to which repulsion follows the hand vertex (m).
pub const CONTACT_REPULSION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_obj: f64,
    pub lambda_v2d: f64,
    pub lambda_pca: f64,
    pub lambda_scale: f64,
    pub lambda_smooth: f64,
    pub lambda_centroid: f64,
    pub lambda_local: f64,
    pub lambda_col: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_obj: 1.0,
            lambda_v2d: 50.0,
            lambda_pca: 0.004,
            lambda_scale: 0.001,
            lambda_smooth: 2000.0,
            lambda_centroid: 1.0,
            lambda_local: 1.0,
            lambda_col: 0.001,
        }
    }
}

pub const TERM_NAMES: [&str; 8] = ["obj", "v2d", "pca", "scale", "smooth", "centroid", "local", "col"];

impl LossWeights {
    pub fn zero() -> Self {
        Self::from_array([0.0; 8])
    }

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.lambda_obj,
            self.lambda_v2d,
            self.lambda_pca,
            self.lambda_scale,
            self.lambda_smooth,
            self.lambda_centroid,
            self.lambda_local,
            self.lambda_col,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            lambda_obj: a[0],
            lambda_v2d: a[1],
            lambda_pca: a[2],
            lambda_scale: a[3],
            lambda_smooth: a[4],
            lambda_centroid: a[5],
            lambda_local: a[6],
            lambda_col: a[7],
        }
    }

    /// Sets one weight by term name (`obj`) or field name (`lambda_obj`).
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let name = key.strip_prefix("lambda_").unwrap_or(key);
        let idx = TERM_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown loss weight `{key}`")))?;
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Config(format!("weight `{key}` must be nonnegative, got {value}")));
        }
        let mut a = self.as_array();
        a[idx] = value;
        *self = Self::from_array(a);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (n, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("weight `lambda_{n}` must be nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub obj: f64,
    pub v2d: f64,
    pub pca: f64,
    pub scale: f64,
    pub smooth: f64,
    pub centroid: f64,
    pub local: f64,
    pub col: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(terms: [f64; 8], weights: &LossWeights) -> Self {
        let total = terms.iter().zip(weights.as_array()).map(|(t, w)| t * w).sum();
        Self {
            obj: terms[0],
            v2d: terms[1],
            pca: terms[2],
            scale: terms[3],
            smooth: terms[4],
            centroid: terms[5],
            local: terms[6],
            col: terms[7],
            total,
        }
    }

    pub fn terms(&self) -> [f64; 8] {
        [
            self.obj,
            self.v2d,
            self.pca,
            self.scale,
            self.smooth,
            self.centroid,
            self.local,
            self.col,
        ]
    }

    /// Name of the first non-finite entry, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        TERM_NAMES
            .iter()
            .zip(self.terms())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
            .or((!self.total.is_finite()).then_some("total"))
    }
}

/// Occlusion-gated silhouette error and its gradient w.r.t. `rendered`.
pub fn loss_obj(rendered: &MaskImage, target: &MaskImage, occlusion: &MaskImage) -> Result<(f64, Vec<f64>)> {
    rendered.same_shape(target)?;
    rendered.same_shape(occlusion)?;
    let n = rendered.len().max(1) as f64;
    let mut value = 0.0;
    let grad = rendered
        .values
        .iter()
        .zip(&target.values)
        .zip(&occlusion.values)
        .map(|((r, t), o)| {
            let g = 1.0 - o;
            let e = g * (r - t);
            value += e * e;
            2.0 * e * g / n
        })
        .collect();
    Ok((value / n, grad))
}

/// Mean squared pixel offset normalized by the squared image diagonal.
pub fn loss_v2d(projected: &[Vec2], target: &[Vec2], image_diag: f64) -> Result<(f64, Vec<Vec2>)> {
    if projected.len() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} projected vertices vs {} targets",
            projected.len(),
            target.len()
        )));
    }
    let norm = projected.len().max(1) as f64 * image_diag * image_diag;
    let mut value = 0.0;
    let grad = projected
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            value += r.norm_squared();
            r * (2.0 / norm)
        })
        .collect();
    Ok((value / norm, grad))
}

pub fn loss_pca(theta: &[f64]) -> (f64, Vec<f64>) {
    (theta.iter().map(|t| t * t).sum(), theta.iter().map(|t| 2.0 * t).collect())
}

/// `sum (ln s)^2` and its gradient.
pub fn loss_scale(scales: &[f64]) -> Result<(f64, Vec<f64>)> {
    if let Some(&s) = scales.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidScale(s));
    }
    Ok((
        scales.iter().map(|s| s.ln().powi(2)).sum(),
        scales.iter().map(|s| 2.0 * s.ln() / s).collect(),
    ))
}

/// Per entity, the mean over consecutive frame pairs and vertices of the
/// squared displacement, summed over entities. `sequences[e][t][v]`.
pub fn loss_smooth(sequences: &[Vec<Vec<Vec3>>]) -> (f64, Vec<Vec<Vec<Vec3>>>) {
    let mut value = 0.0;
    let grads = sequences
        .iter()
        .map(|seq| {
            let mut g: Vec<Vec<Vec3>> = seq.iter().map(|f| vec![Vec3::zeros(); f.len()]).collect();
            let pairs = seq.len().saturating_sub(1);
            if pairs == 0 {
                return g;
            }
            let v = seq[0].len().max(1) as f64;
            let coef = 1.0 / (pairs as f64 * v);
            for t in 0..pairs {
                for i in 0..seq[t].len() {
                    let d = seq[t + 1][i] - seq[t][i];
                    value += coef * d.norm_squared();
                    g[t + 1][i] += d * (2.0 * coef);
                    g[t][i] -= d * (2.0 * coef);
                }
            }
            g
        })
        .collect();
    (value, grads)
}

/// Squared centroid distance when the boxes overlap, with gradients w.r.t.
/// the hand and object vertices.
pub fn loss_centroid(hand: &[Vec3], object: &[Vec3], boxes_overlap: bool) -> (f64, Vec<Vec3>, Vec<Vec3>) {
    if !boxes_overlap || hand.is_empty() || object.is_empty() {
        return (0.0, vec![Vec3::zeros(); hand.len()], vec![Vec3::zeros(); object.len()]);
    }
    let d = centroid(hand) - centroid(object);
    let gh = d * (2.0 / hand.len() as f64);
    let go = d * (-2.0 / object.len() as f64);
    (d.norm_squared(), vec![gh; hand.len()], vec![go; object.len()])
}

/// Gradient of a scalar w.r.t. the pose placing an SDF in the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfPoseGrad {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for SdfPoseGrad {
    fn default() -> Self {
        Self {
            rotation: Mat3::zeros(),
            translation: Vec3::zeros(),
            scale: 0.0,
        }
    }
}

/// One mesh taking part in the collision term.
pub struct CollisionMesh<'a> {
    pub vertices: &'a [Vec3],
    pub sdf: PosedSdf<'a>,
}

pub struct CollisionGrad {
    pub vertices: Vec<Vec<Vec3>>,
    pub poses: Vec<SdfPoseGrad>,
}

/// Sum over ordered pairs `(k, l)`, `k != l`, of the penetration of mesh
/// `l`'s vertices into mesh `k`.
pub fn loss_collision(meshes: &[CollisionMesh]) -> (f64, CollisionGrad) {
    let mut value = 0.0;
    let mut grad = CollisionGrad {
        vertices: meshes.iter().map(|m| vec![Vec3::zeros(); m.vertices.len()]).collect(),
        poses: vec![SdfPoseGrad::default(); meshes.len()],
    };
    for (k, mk) in meshes.iter().enumerate() {
        for (l, ml) in meshes.iter().enumerate() {
            if k == l {
                continue;
            }
            for (i, v) in ml.vertices.iter().enumerate() {
                let s = mk.sdf.sample(v);
                if s.value < 0.0 {
                    value -= s.value;
                    grad.vertices[l][i] -= s.grad_point;
                    let p = &mut grad.poses[k];
                    p.rotation -= s.grad_rotation;
                    p.translation -= s.grad_translation;
                    p.scale -= s.grad_scale;
                }
            }
        }
    }
    (value, grad)
}

/// Local contact heuristic: hand vertices near or slightly inside the object
/// are pulled to their closest object vertex; deep penetrations contribute a
/// constant. Normalized by the hand vertex count.
pub fn loss_contact(hand: &[Vec3], object: &[Vec3], object_sdf: &PosedSdf) -> (f64, Vec<Vec3>, Vec<Vec3>) {
    let mut gh = vec![Vec3::zeros(); hand.len()];
    let mut go = vec![Vec3::zeros(); object.len()];
    if hand.is_empty() || object.is_empty() {
        return (0.0, gh, go);
    }
    let norm = 1.0 / hand.len() as f64;
    let mut value = 0.0;
    for (i, v) in hand.iter().enumerate() {
        let s = object_sdf.value(v);
        if s > CONTACT_ATTRACTION {
            continue;
        }
        if s < -CONTACT_REPULSION {
            value += CONTACT_REPULSION * CONTACT_REPULSION * norm;
            continue;
        }
        let (j, _) = object
            .iter()
            .enumerate()
            .map(|(j, o)| (j, (v - o).norm_squared()))
            .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
        let d = v - object[j];
        value += d.norm_squared() * norm;
        gh[i] += d * (2.0 * norm);
        go[j] -= d * (2.0 * norm);
    }
    (value, gh, go)
}

/// Canonical object geometry and its SDF.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub mesh: TriMesh,
    pub grid: SdfGrid,
}

impl ObjectModel {
    pub fn new(mesh: TriMesh, sdf_resolution: usize) -> Result<Self> {
        let grid = SdfGrid::build(&mesh, sdf_resolution)?;
        Ok(Self { mesh, grid })
    }
}

/// Evidence of one frame, prepared for the objective.
#[derive(Debug, Clone)]
pub struct FrameTarget {
    /// Object mask at render resolution.
    pub object_mask: Option<MaskImage>,
    /// Union of hand masks at render resolution.
    pub occlusion: MaskImage,
    /// Per hand, 2D vertex targets in full-resolution pixels.
    pub hand_2d: Vec<Option<Vec<Vec2>>>,
    /// Per hand, whether its tracked box overlaps the object's.
    pub overlap: Vec<bool>,
}

/// Which terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Everything but the local contact and collision terms.
    Coarse,
    Full,
}

/// Everything the clip objective needs besides the parameters.
#[derive(Debug, Clone)]
pub struct ClipProblem {
    pub camera: CameraIntrinsics,
    pub render_camera: CameraIntrinsics,
    pub render_config: RenderConfig,
    pub object: Option<ObjectModel>,
    /// Aligned with `ClipState::hands`.
    pub hands: Vec<ParametricHandModel>,
    pub frames: Vec<FrameTarget>,
    pub weights: LossWeights,
    pub optimize_object_scale: bool,
    pub sdf_resolution: usize,
}

impl ClipProblem {
    /// Weights with the terms of inactive stages zeroed.
    pub fn stage_weights(&self, stage: Stage) -> LossWeights {
        let mut w = self.weights;
        if stage == Stage::Coarse {
            w.lambda_local = 0.0;
            w.lambda_col = 0.0;
        }
        w
    }
}

struct FrameOutput {
    terms: [f64; 8],
    grad_object: Vec<Vec3>,
    grad_hands: Vec<Vec<Vec3>>,
    direct_object: SdfPoseGrad,
    direct_hands: Vec<SdfPoseGrad>,
}

/// Clip objective with per-frame hand SDF caches. Terms with zero weight are
/// skipped and reported as 0.
pub struct Objective {
    pub problem: ClipProblem,
    hand_sdfs: Vec<Vec<Option<CachedSdf>>>,
}

struct Posed {
    object: Option<(Mat3, Vec<Vec3>)>,
    hands: Vec<(Mat3, Vec<Vec3>, Vec<Vec3>)>,
}

impl Objective {
    pub fn new(problem: ClipProblem) -> Self {
        let t = problem.frames.len();
        let h = problem.hands.len();
        Self {
            problem,
            hand_sdfs: (0..t).map(|_| (0..h).map(|_| None).collect()).collect(),
        }
    }

    /// Number of hand SDF grid builds so far.
    pub fn sdf_rebuilds(&self) -> usize {
        self.hand_sdfs
            .iter()
            .flatten()
            .flatten()
            .map(|c| c.rebuilds + 1)
            .sum()
    }

    fn check(&self, state: &ClipState) -> Result<()> {
        let p = &self.problem;
        let t = p.frames.len();
        if state.frame_count() != t {
            return Err(Error::DimensionMismatch(format!(
                "state has {} frames, evidence has {t}",
                state.frame_count()
            )));
        }
        if state.hands.len() != p.hands.len() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} hands, problem has {}",
                state.hands.len(),
                p.hands.len()
            )));
        }
        if state.object.is_some() != p.object.is_some() {
            return Err(Error::DimensionMismatch("object presence differs between state and problem".into()));
        }
        let k = p.hands.first().map_or(0, |m| m.latent_dim());
        state.validate(k)
    }

    fn pose_all(&self, state: &ClipState) -> Result<Vec<Posed>> {
        let p = &self.problem;
        (0..p.frames.len())
            .into_par_iter()
            .map(|t| {
                let object = match (&state.object, &p.object) {
                    (Some(o), Some(m)) => {
                        let f = &o.frames[t];
                        let r = f.rotation.to_matrix()?;
                        Some((r, pose_points(&m.mesh.vertices, &r, o.scale, &f.translation)))
                    }
                    _ => None,
                };
                let hands = state
                    .hands
                    .iter()
                    .zip(&p.hands)
                    .map(|(h, model)| {
                        let f = &h.frames[t];
                        let r = f.rotation.to_matrix()?;
                        let centered = model.hand_vertices(f.theta.as_deref().unwrap_or(&[]))?;
                        let world = pose_points(&centered, &r, h.scale, &f.translation);
                        Ok((r, centered, world))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Posed { object, hands })
            })
            .collect()
    }

    /// Loss breakdown and gradient (in [`Layout::of`] order) at `state`.
    pub fn evaluate(&mut self, state: &ClipState, stage: Stage) -> Result<(LossBreakdown, Vec<f64>)> {
        self.check(state)?;
        let weights = self.problem.stage_weights(stage);
        let w = weights.as_array();
        let t_count = self.problem.frames.len();
        let inv_t = 1.0 / t_count.max(1) as f64;
        let posed = self.pose_all(state)?;

        if w[7] > 0.0 {
            self.update_hand_sdfs(&posed)?;
        }

        let p = &self.problem;
        let hand_sdfs = &self.hand_sdfs;
        let outputs: Vec<FrameOutput> = (0..t_count)
            .into_par_iter()
            .map(|t| frame_terms(p, state, &posed[t], &hand_sdfs[t], t, &w, inv_t))
            .collect::<Result<_>>()?;

        let mut terms = [0.0; 8];
        for o in &outputs {
            for k in 0..8 {
                terms[k] += o.terms[k] * inv_t;
            }
        }
        let mut outputs = outputs;

        // smoothness couples frames
        if w[4] > 0.0 && t_count > 1 {
            let mut seqs = Vec::new();
            if posed[0].object.is_some() {
                seqs.push(posed.iter().map(|f| f.object.as_ref().unwrap().1.clone()).collect::<Vec<_>>());
            }
            for h in 0..state.hands.len() {
                seqs.push(posed.iter().map(|f| f.hands[h].2.clone()).collect());
            }
            let (value, grads) = loss_smooth(&seqs);
            terms[4] = value;
            let mut e = 0;
            if posed[0].object.is_some() {
                for (o, g) in outputs.iter_mut().zip(&grads[0]) {
                    for (a, b) in o.grad_object.iter_mut().zip(g) {
                        *a += b * w[4];
                    }
                }
                e = 1;
            }
            for h in 0..state.hands.len() {
                for (o, g) in outputs.iter_mut().zip(&grads[e + h]) {
                    for (a, b) in o.grad_hands[h].iter_mut().zip(g) {
                        *a += b * w[4];
                    }
                }
            }
        }

        let layout = Layout::of(state);
        let mut grad = vec![0.0; layout.len];

        // scale prior
        if w[3] > 0.0 {
            let mut scales: Vec<f64> = state.hands.iter().map(|h| h.scale).collect();
            let mut slots: Vec<usize> = layout.hands.iter().map(|l| l.scale).collect();
            if p.optimize_object_scale {
                if let (Some(o), Some(l)) = (&state.object, &layout.object) {
                    scales.push(o.scale);
                    slots.push(l.scale);
                }
            }
            let (value, g) = loss_scale(&scales)?;
            terms[3] = value;
            for (s, g) in slots.into_iter().zip(g) {
                grad[s] += w[3] * g;
            }
        }

        // chain world-vertex gradients back to the parameters, per frame
        let blocks: Vec<(Option<([f64; 6], Vec3, f64)>, Vec<([f64; 6], Vec3, f64, Vec<f64>)>)> = outputs
            .par_iter()
            .enumerate()
            .map(|(t, out)| {
                let fp = &posed[t];
                let object = match (&state.object, &p.object, &fp.object) {
                    (Some(o), Some(m), Some((r, _))) => {
                        let (mut dr, mut dd, mut ds, _) =
                            pose_points_backward(&m.mesh.vertices, r, o.scale, &out.grad_object);
                        dr += out.direct_object.rotation;
                        dd += out.direct_object.translation;
                        ds += out.direct_object.scale;
                        Some((rot6d_backward(&o.frames[t].rotation, &dr)?, dd, ds))
                    }
                    _ => None,
                };
                let hands = state
                    .hands
                    .iter()
                    .enumerate()
                    .map(|(h, hs)| {
                        let (r, centered, _) = &fp.hands[h];
                        let (mut dr, mut dd, mut ds, dc) =
                            pose_points_backward(centered, r, hs.scale, &out.grad_hands[h]);
                        dr += out.direct_hands[h].rotation;
                        dd += out.direct_hands[h].translation;
                        ds += out.direct_hands[h].scale;
                        let mut dtheta = p.hands[h].hand_vertices_backward(&dc);
                        if w[2] > 0.0 {
                            let theta = hs.frames[t].theta.as_deref().unwrap_or(&[]);
                            for (g, th) in dtheta.iter_mut().zip(theta) {
                                *g += w[2] * inv_t * 2.0 * th;
                            }
                        }
                        Ok((rot6d_backward(&hs.frames[t].rotation, &dr)?, dd, ds, dtheta))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((object, hands))
            })
            .collect::<Result<_>>()?;

        for (t, (object, hands)) in blocks.into_iter().enumerate() {
            if let (Some((dr, dd, ds)), Some(l)) = (object, &layout.object) {
                grad[l.rotation(t)..l.rotation(t) + 6]
                    .iter_mut()
                    .zip(dr)
                    .for_each(|(a, b)| *a += b);
                grad[l.translation(t)..l.translation(t) + 3]
                    .iter_mut()
                    .zip(dd.iter())
                    .for_each(|(a, b)| *a += b);
                if p.optimize_object_scale {
                    grad[l.scale] += ds;
                }
            }
            for ((dr, dd, ds, dth), l) in hands.into_iter().zip(&layout.hands) {
                grad[l.rotation(t)..l.rotation(t) + 6]
                    .iter_mut()
                    .zip(dr)
                    .for_each(|(a, b)| *a += b);
                grad[l.translation(t)..l.translation(t) + 3]
                    .iter_mut()
                    .zip(dd.iter())
                    .for_each(|(a, b)| *a += b);
                grad[l.scale] += ds;
                grad[l.theta(t)..l.theta(t) + dth.len()]
                    .iter_mut()
                    .zip(dth)
                    .for_each(|(a, b)| *a += b);
            }
        }

        Ok((LossBreakdown::from_terms(terms, &weights), grad))
    }

    fn update_hand_sdfs(&mut self, posed: &[Posed]) -> Result<()> {
        let hands = &self.problem.hands;
        let res = self.problem.sdf_resolution;
        self.hand_sdfs
            .par_iter_mut()
            .zip(posed)
            .try_for_each(|(caches, fp)| -> Result<()> {
                for (h, cache) in caches.iter_mut().enumerate() {
                    let centered = &fp.hands[h].1;
                    match cache {
                        Some(c) => {
                            c.update(centered)?;
                        }
                        None => {
                            let mesh = TriMesh {
                                vertices: centered.clone(),
                                faces: hands[h].faces.clone(),
                            };
                            *cache = Some(CachedSdf::new(&mesh, res)?);
                        }
                    }
                }
                Ok(())
            })
    }
}

/// Unweighted per-frame term values and weighted gradients (already divided
/// by the frame count).
fn frame_terms(
    p: &ClipProblem,
    state: &ClipState,
    fp: &Posed,
    hand_sdfs: &[Option<CachedSdf>],
    t: usize,
    w: &[f64; 8],
    inv_t: f64,
) -> Result<FrameOutput> {
    let target = &p.frames[t];
    let nh = state.hands.len();
    let mut terms = [0.0; 8];
    let mut grad_object = fp.object.as_ref().map_or(Vec::new(), |o| vec![Vec3::zeros(); o.1.len()]);
    let mut grad_hands: Vec<Vec<Vec3>> = fp.hands.iter().map(|h| vec![Vec3::zeros(); h.2.len()]).collect();
    let mut direct_object = SdfPoseGrad::default();
    let mut direct_hands = vec![SdfPoseGrad::default(); nh];

    let add = |dst: &mut [Vec3], src: &[Vec3], k: f64| {
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b * k;
        }
    };

    // silhouette
    if let (Some((_, world)), Some(model), Some(mask), true) =
        (&fp.object, &p.object, &target.object_mask, w[0] > 0.0)
    {
        let render = soft_silhouette(world, &model.mesh.faces, &p.render_camera, &p.render_config)?;
        let (value, g_mask) = loss_obj(&render.mask, mask, &target.occlusion)?;
        terms[0] = value;
        let scaled: Vec<f64> = g_mask.iter().map(|g| g * w[0] * inv_t).collect();
        let g = render.backward(world, &p.render_camera, &scaled)?;
        add(&mut grad_object, &g, 1.0);
    }

    // 2D hand vertices
    if w[1] > 0.0 {
        for (h, (_, _, world)) in fp.hands.iter().enumerate() {
            if let Some(t2d) = &target.hand_2d[h] {
                let proj = project(&p.camera, world)?;
                let (value, g_uv) = loss_v2d(&proj, t2d, p.camera.diagonal())?;
                terms[1] += value;
                let g = project_backward(&p.camera, world, &g_uv);
                add(&mut grad_hands[h], &g, w[1] * inv_t);
            }
        }
    }

    if w[2] > 0.0 {
        for h in &state.hands {
            terms[2] += loss_pca(h.frames[t].theta.as_deref().unwrap_or(&[])).0;
        }
    }

    if let (Some((r_obj, obj_world)), Some(model)) = (&fp.object, &p.object) {
        let obj_state = state.object.as_ref().unwrap();
        let obj_sdf = PosedSdf {
            grid: &model.grid,
            rotation: *r_obj,
            translation: obj_state.frames[t].translation,
            scale: obj_state.scale,
        };

        if w[5] > 0.0 {
            for (h, (_, _, world)) in fp.hands.iter().enumerate() {
                let (value, gh, go) = loss_centroid(world, obj_world, target.overlap[h]);
                terms[5] += value;
                add(&mut grad_hands[h], &gh, w[5] * inv_t);
                add(&mut grad_object, &go, w[5] * inv_t);
            }
        }

        if w[6] > 0.0 {
            for (h, (_, _, world)) in fp.hands.iter().enumerate() {
                let (value, gh, go) = loss_contact(world, obj_world, &obj_sdf);
                terms[6] += value;
                add(&mut grad_hands[h], &gh, w[6] * inv_t);
                add(&mut grad_object, &go, w[6] * inv_t);
            }
        }

        if w[7] > 0.0 {
            let mut meshes = vec![CollisionMesh {
                vertices: obj_world,
                sdf: obj_sdf,
            }];
            for (h, (r, _, world)) in fp.hands.iter().enumerate() {
                let hs = &state.hands[h];
                let grid = &hand_sdfs[h].as_ref().expect("hand grids are built before evaluation").grid;
                meshes.push(CollisionMesh {
                    vertices: world,
                    sdf: PosedSdf {
                        grid,
                        rotation: *r,
                        translation: hs.frames[t].translation,
                        scale: hs.scale,
                    },
                });
            }
            let (value, g) = loss_collision(&meshes);
            terms[7] = value;
            let k = w[7] * inv_t;
            add(&mut grad_object, &g.vertices[0], k);
            direct_object = scale_pose_grad(&g.poses[0], k);
            for h in 0..nh {
                add(&mut grad_hands[h], &g.vertices[h + 1], k);
                direct_hands[h] = scale_pose_grad(&g.poses[h + 1], k);
            }
        }
    }

    Ok(FrameOutput {
        terms,
        grad_object,
        grad_hands,
        direct_object,
        direct_hands,
    })
}

fn scale_pose_grad(g: &SdfPoseGrad, k: f64) -> SdfPoseGrad {
    SdfPoseGrad {
        rotation: g.rotation * k,
        translation: g.translation * k,
        scale: g.scale * k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(w: u32, h: u32, x0: u32, y0: u32, side: u32) -> MaskImage {
        let mut m = MaskImage::zeros(w, h);
        for r in y0..y0 + side {
            for c in x0..x0 + side {
                m.set(r, c, 1.0);
            }
        }
        m
    }

    #[test]
    fn obj_examples() {
        let a = square(10, 10, 2, 2, 4);
        let empty = MaskImage::zeros(10, 10);
        assert_eq!(loss_obj(&a, &a, &empty).unwrap().0, 0.0);
        let b = square(10, 10, 3, 2, 4);
        // differences confined to the occluded region
        let occ = square(10, 10, 2, 2, 5);
        assert_eq!(loss_obj(&a, &b, &occ).unwrap().0, 0.0);
        let mut c = a.clone();
        c.set(9, 9, 1.0);
        assert!((loss_obj(&c, &a, &empty).unwrap().0 - 0.01).abs() < 1e-15);
        assert!(loss_obj(&a, &MaskImage::zeros(3, 3), &empty).is_err());
    }

    #[test]
    fn v2d_examples() {
        let p = vec![Vec2::new(1.0, 2.0), Vec2::new(-4.0, 0.5)];
        assert_eq!(loss_v2d(&p, &p, 800.0).unwrap().0, 0.0);
        let q: Vec<Vec2> = p.iter().map(|x| x + Vec2::new(3.0, 4.0)).collect();
        assert!((loss_v2d(&q, &p, 800.0).unwrap().0 - 25.0 / 640000.0).abs() < 1e-18);
        let mut r = p.clone();
        r[1].x += 7.0;
        assert!((loss_v2d(&r, &p, 800.0).unwrap().0 - 49.0 / (2.0 * 640000.0)).abs() < 1e-18);
        assert!(loss_v2d(&p[..1], &p, 800.0).is_err());
    }

    #[test]
    fn algebraic_examples() {
        assert_eq!(loss_pca(&[0.0; 16]).0, 0.0);
        assert_eq!(loss_pca(&[1.0; 16]).0, 16.0);
        let mut th = [0.0; 16];
        th[0] = 3.0;
        th[1] = 4.0;
        assert_eq!(loss_pca(&th).0, 25.0);
        assert_eq!(loss_scale(&[1.0]).unwrap().0, 0.0);
        assert!((loss_scale(&[std::f64::consts::E]).unwrap().0 - 1.0).abs() < 1e-15);
        assert!((loss_scale(&[std::f64::consts::E, 1.0 / std::f64::consts::E]).unwrap().0 - 2.0).abs() < 1e-15);
        assert!(matches!(loss_scale(&[0.0]), Err(Error::InvalidScale(_))));
    }

    #[test]
    fn smooth_examples() {
        let f0 = vec![Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.1, 0.0, 0.5)];
        assert_eq!(loss_smooth(&[vec![f0.clone(); 4]]).0, 0.0);
        assert_eq!(loss_smooth(&[vec![f0.clone()]]).0, 0.0);
        let f1: Vec<Vec3> = f0.iter().map(|v| v + Vec3::new(0.0, 0.0, 0.01)).collect();
        assert!((loss_smooth(&[vec![f0.clone(), f1.clone()]]).0 - 1e-4).abs() < 1e-15);
        // one moving middle frame: both adjacent pairs, mean over 2 pairs
        let seq = vec![f0.clone(), f1, f0];
        assert!((loss_smooth(&[seq]).0 - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn centroid_examples() {
        let h = vec![Vec3::new(0.1, 0.0, 0.5), Vec3::new(0.1, 0.02, 0.5)];
        let o = vec![Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.0, 0.02, 0.5)];
        assert_eq!(loss_centroid(&h, &o, false).0, 0.0);
        assert_eq!(loss_centroid(&h, &h, true).0, 0.0);
        assert!((loss_centroid(&h, &o, true).0 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn collision_of_separated_spheres_is_zero() {
        let mesh = TriMesh::icosphere(0.05, 2);
        let grid = SdfGrid::build(&mesh, 24).unwrap();
        let a: Vec<Vec3> = mesh.vertices.clone();
        let b: Vec<Vec3> = mesh.vertices.iter().map(|v| v + Vec3::new(0.2, 0.0, 0.0)).collect();
        let pose = |d: Vec3| PosedSdf {
            grid: &grid,
            rotation: Mat3::identity(),
            translation: d,
            scale: 1.0,
        };
        let meshes = [
            CollisionMesh { vertices: &a, sdf: pose(Vec3::zeros()) },
            CollisionMesh { vertices: &b, sdf: pose(Vec3::new(0.2, 0.0, 0.0)) },
        ];
        assert_eq!(loss_collision(&meshes).0, 0.0);
    }

    #[test]
    fn collision_single_penetrating_vertex() {
        let sphere = TriMesh::icosphere(0.05, 3);
        let grid = SdfGrid::build(&sphere, 32).unwrap();
        let probe = vec![Vec3::new(0.04, 0.0, 0.0), Vec3::new(0.3, 0.0, 0.0)];
        let far = SdfGrid::build(&TriMesh::cube(0.01, 1), 16).unwrap();
        let meshes = [
            CollisionMesh {
                vertices: &sphere.vertices[..0],
                sdf: PosedSdf {
                    grid: &grid,
                    rotation: Mat3::identity(),
                    translation: Vec3::zeros(),
                    scale: 1.0,
                },
            },
            CollisionMesh {
                vertices: &probe,
                sdf: PosedSdf {
                    grid: &far,
                    rotation: Mat3::identity(),
                    translation: Vec3::new(1.0, 0.0, 0.0),
                    scale: 1.0,
                },
            },
        ];
        let (value, _) = loss_collision(&meshes);
        assert!((value - 0.01).abs() < 1e-3, "{value}");
    }

    #[test]
    fn contact_examples() {
        let cube = TriMesh::cube(0.1, 4);
        let grid = SdfGrid::build(&cube, 32).unwrap();
        let sdf = PosedSdf {
            grid: &grid,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        };
        let far = vec![Vec3::new(0.2, 0.0, 0.0), Vec3::new(0.0, 0.3, 0.0)];
        assert_eq!(loss_contact(&far, &cube.vertices, &sdf).0, 0.0);

        // face vertex at (0.05, 0.025, 0.025); probe 5 mm off the face, 6 mm away
        let lateral = (0.006f64.powi(2) - 0.005f64.powi(2)).sqrt();
        let mut hand = far.clone();
        hand.push(Vec3::new(0.055, 0.025 + lateral, 0.025));
        let (value, gh, _) = loss_contact(&hand, &cube.vertices, &sdf);
        assert!((value - 0.006f64.powi(2) / 3.0).abs() < 1e-15, "{value}");
        assert_eq!(gh[0], Vec3::zeros());

        let on_vertex = vec![Vec3::new(0.05, 0.025, 0.025)];
        assert_eq!(loss_contact(&on_vertex, &cube.vertices, &sdf).0, 0.0);

        let deep = vec![Vec3::new(0.0, 0.0, 0.0)];
        assert!((loss_contact(&deep, &cube.vertices, &sdf).0 - CONTACT_REPULSION.powi(2)).abs() < 1e-18);
    }

    #[test]
    fn weight_overrides() {
        let mut w = LossWeights::default();
        assert_eq!(w.as_array(), [1.0, 50.0, 0.004, 0.001, 2000.0, 1.0, 1.0, 0.001]);
        w.set("col", 0.0).unwrap();
        w.set("lambda_smooth", 5.0).unwrap();
        assert_eq!(w.lambda_col, 0.0);
        assert_eq!(w.lambda_smooth, 5.0);
        assert!(w.set("nope", 1.0).is_err());
        assert!(w.set("obj", -1.0).is_err());
        let b = LossBreakdown::from_terms([1.0; 8], &LossWeights::zero());
        assert_eq!(b.total, 0.0);
    }
}
