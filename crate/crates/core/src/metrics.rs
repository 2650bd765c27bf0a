//! Pose accuracy, surface and contact measures, and the per-clip report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{kabsch_align, TriMesh, Vec3};
use crate::hand_model::{pose_entity, BodyState, HandSide, ParametricHandModel};
use crate::sdf::{phi, SdfGrid};
use crate::state::ClipState;

/// Minimum point count for the surface metrics; sparser meshes are
/// resampled.
pub const MIN_SURFACE_POINTS: usize = 1000;
const SURFACE_SEED: u64 = 0;

fn check_nonempty(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyInput(format!(
            "point sets of size {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn vertex_mean_distance(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted vs {} ground-truth vertices",
            pred.len(),
            gt.len()
        )));
    }
    check_nonempty(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / pred.len() as f64)
}

fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    from.par_iter()
        .map(|p| to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

/// Mean distance from each predicted point to its nearest ground-truth point.
pub fn add_s(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_nonempty(pred, gt)?;
    Ok(nearest_distances(pred, gt).iter().sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Rotation, translation and scale.
    Procrustes,
    /// Translation and scale only.
    ScaleTranslation,
}

fn align_scale_translation(pred: &[Vec3], gt: &[Vec3]) -> Vec<Vec3> {
    let n = pred.len() as f64;
    let cp = pred.iter().sum::<Vec3>() / n;
    let cg = gt.iter().sum::<Vec3>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        num += (p - cp).dot(&(g - cg));
        den += (p - cp).norm_squared();
    }
    let s = if den > 0.0 { num / den } else { 1.0 };
    pred.iter().map(|p| (p - cp) * s + cg).collect()
}

pub fn aligned_error(pred: &[Vec3], gt: &[Vec3], mode: AlignMode) -> Result<f64> {
    let aligned = match mode {
        AlignMode::Procrustes => kabsch_align(pred, gt, true)?.0,
        AlignMode::ScaleTranslation => {
            if pred.len() != gt.len() {
                return Err(Error::DimensionMismatch(format!("{} vs {} points", pred.len(), gt.len())));
            }
            check_nonempty(pred, gt)?;
            align_scale_translation(pred, gt)
        }
    };
    vertex_mean_distance(&aligned, gt)
}

pub fn f_score(pred: &[Vec3], gt: &[Vec3], threshold: f64) -> Result<f64> {
    check_nonempty(pred, gt)?;
    let within = |d: Vec<f64>| d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64;
    let precision = within(nearest_distances(pred, gt));
    let recall = within(nearest_distances(gt, pred));
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Largest penetration of any hand vertex into the object, 0 without
/// penetration.
pub fn penetration_depth(hand: &[Vec3], object: &SdfGrid) -> f64 {
    phi(object, hand).into_iter().fold(0.0, f64::max)
}

/// Whether any hand vertex lies on or inside the object surface.
pub fn contact_flag(hand: &[Vec3], object: &SdfGrid) -> bool {
    hand.iter().any(|v| object.sample(v).0 <= 0.0)
}

pub fn contact_percentage(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::EmptyInput("no frames".into()));
    }
    Ok(100.0 * flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Percentage of frames whose predicted flag agrees with the label.
pub fn contact_accuracy(flags: &[bool], labels: &[bool]) -> Result<f64> {
    if flags.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted vs {} labelled frames",
            flags.len(),
            labels.len()
        )));
    }
    if flags.is_empty() {
        return Err(Error::EmptyInput("no frames".into()));
    }
    Ok(100.0 * flags.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / flags.len() as f64)
}

/// Surface points of a posed mesh at fixed barycentric positions, or the
/// vertices when there are enough of them.
fn surface_points(mesh: &TriMesh, posed: &[Vec3]) -> Vec<Vec3> {
    if posed.len() >= MIN_SURFACE_POINTS {
        return posed.to_vec();
    }
    let samples = mesh.sample_surface(MIN_SURFACE_POINTS, SURFACE_SEED);
    mesh.eval_samples(posed, &samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFrameMetrics {
    pub vertex_mean_distance: f64,
    pub add_s: f64,
    pub f_score_5mm: f64,
    pub f_score_10mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandFrameMetrics {
    pub side: HandSide,
    pub vertex_mean_distance: f64,
    pub procrustes_vertex_error: f64,
    /// Joint error after scale and translation alignment.
    pub aligned_joint_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penetration_depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object: Option<ObjectFrameMetrics>,
    pub hands: Vec<HandFrameMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contact: Option<bool>,
}

/// Clip means of the per-frame values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_vertex_mean_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_add_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_f_score_5mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_f_score_10mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hand_vertex_mean_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hand_procrustes_vertex_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hand_aligned_joint_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penetration_depth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_penetration_depth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contact_percentage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contact_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub aggregate: Aggregate,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn hand_points(model: &ParametricHandModel, body: &BodyState) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let theta = body
        .theta
        .as_ref()
        .ok_or_else(|| Error::DimensionMismatch("hand state without latent pose".into()))?;
    let posed = pose_entity(&model.hand_vertices(theta)?, body)?;
    let joints = model.hand_joints(&posed)?;
    Ok((posed, joints))
}

/// Compares a fitted clip against ground truth. `hands` supplies the model
/// for each hand side present in `gt`.
pub fn evaluate_clip(
    result: &ClipState,
    gt: &ClipState,
    object_mesh: Option<&TriMesh>,
    hands: &[ParametricHandModel],
    sdf_resolution: usize,
) -> Result<MetricReport> {
    let n = gt.frame_count();
    if result.frame_count() != n {
        return Err(Error::DimensionMismatch(format!(
            "result has {} frames, ground truth {n}",
            result.frame_count()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput("ground truth has no frames".into()));
    }
    let object_grid = match object_mesh {
        Some(mesh) if gt.object.is_some() => Some(SdfGrid::build(mesh, sdf_resolution)?),
        _ => None,
    };
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let object_bodies = match (&result.object, &gt.object, object_mesh) {
            (Some(r), Some(g), Some(_)) => Some((r.body(t), g.body(t))),
            (None, Some(_), Some(_)) => {
                return Err(Error::DimensionMismatch("result has no object".into()));
            }
            _ => None,
        };
        let object = match (object_bodies.as_ref(), object_mesh) {
            (Some((r, g)), Some(mesh)) => {
                let pose = |b: &BodyState| -> Result<Vec<Vec3>> {
                    Ok(mesh.transformed(&b.rotation.to_matrix()?, &b.translation, b.scale).vertices)
                };
                let (pv, gv) = (pose(r)?, pose(g)?);
                let (ps, gs) = (surface_points(mesh, &pv), surface_points(mesh, &gv));
                Some(ObjectFrameMetrics {
                    vertex_mean_distance: vertex_mean_distance(&pv, &gv)?,
                    add_s: add_s(&ps, &gs)?,
                    f_score_5mm: f_score(&ps, &gs, 0.005)?,
                    f_score_10mm: f_score(&ps, &gs, 0.010)?,
                })
            }
            _ => None,
        };
        let mut hand_metrics = Vec::new();
        let mut contact = None;
        for g in &gt.hands {
            let model = hands
                .iter()
                .find(|m| m.side == g.side)
                .ok_or_else(|| Error::MissingEvidence(format!("no model for the {} hand", g.side.as_str())))?;
            let r = result
                .hand(g.side)
                .ok_or_else(|| Error::DimensionMismatch(format!("result has no {} hand", g.side.as_str())))?;
            let (pv, pj) = hand_points(model, &r.body(t))?;
            let (gv, gj) = hand_points(model, &g.body(t))?;
            // penetration and contact are measured in the object's canonical frame
            let local = match (&object_grid, object_bodies.as_ref()) {
                (Some(grid), Some((ro, _))) => {
                    let rt = ro.rotation.to_matrix()?.transpose();
                    let local: Vec<Vec3> = pv.iter().map(|v| rt * (v - ro.translation) / ro.scale).collect();
                    Some((grid, local, ro.scale))
                }
                _ => None,
            };
            if let Some((grid, pts, _)) = &local {
                *contact.get_or_insert(false) |= contact_flag(pts, grid);
            }
            hand_metrics.push(HandFrameMetrics {
                side: g.side,
                vertex_mean_distance: vertex_mean_distance(&pv, &gv)?,
                procrustes_vertex_error: aligned_error(&pv, &gv, AlignMode::Procrustes)?,
                aligned_joint_error: aligned_error(&pj, &gj, AlignMode::ScaleTranslation)?,
                penetration_depth: local.map(|(grid, pts, s)| s * penetration_depth(&pts, grid)),
            });
        }
        frames.push(FrameMetrics {
            frame: t,
            object,
            hands: hand_metrics,
            contact,
        });
    }

    let obj = |f: fn(&ObjectFrameMetrics) -> f64| mean(frames.iter().filter_map(|m| m.object.as_ref().map(f)));
    let hand = |f: fn(&HandFrameMetrics) -> f64| mean(frames.iter().flat_map(|m| m.hands.iter().map(f)));
    let depths: Vec<f64> = frames
        .iter()
        .flat_map(|m| m.hands.iter().filter_map(|h| h.penetration_depth))
        .collect();
    let flags: Vec<bool> = frames.iter().filter_map(|m| m.contact).collect();
    let contact_accuracy = match &gt.contact_labels {
        Some(labels) if flags.len() == n => Some(contact_accuracy(&flags, labels)?),
        _ => None,
    };
    let aggregate = Aggregate {
        object_vertex_mean_distance: obj(|m| m.vertex_mean_distance),
        object_add_s: obj(|m| m.add_s),
        object_f_score_5mm: obj(|m| m.f_score_5mm),
        object_f_score_10mm: obj(|m| m.f_score_10mm),
        hand_vertex_mean_distance: hand(|h| h.vertex_mean_distance),
        hand_procrustes_vertex_error: hand(|h| h.procrustes_vertex_error),
        hand_aligned_joint_error: hand(|h| h.aligned_joint_error),
        penetration_depth: mean(depths.iter().copied()),
        max_penetration_depth: depths.iter().copied().reduce(f64::max),
        contact_percentage: if flags.is_empty() {
            None
        } else {
            Some(contact_percentage(&flags)?)
        },
        contact_accuracy,
    };
    Ok(MetricReport { frames, aggregate })
}
