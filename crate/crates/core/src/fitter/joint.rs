use std::collections::BTreeMap;
use std::time::Instant;

use super::init::{init_hand, init_object_motion, MotionInit, ObjectFrameTarget};
use super::{Adam, FitConfig, FitResult, TraceEntry};
use crate::error::{Error, Result};
use crate::evidence::ClipEvidence;
use crate::geometry::{CameraIntrinsics, TriMesh};
use crate::hand_model::{HandSide, ParametricHandModel};
use crate::mask::MaskImage;
use crate::objective::{ClipProblem, FrameTarget, LossBreakdown, LossWeights, ObjectModel, Objective, Stage};
use crate::render::{hard_silhouette, mask_iou, RenderConfig};
use crate::state::{ClipState, HandTrackState, Layout, ObjectTrackState};
use crate::tracking::{
    box_iou, kalman_track, validate_frame, DetectionKind, FrameDetections, Track, TrackerConfig,
};

fn render_setup(cam: &CameraIntrinsics, config: &FitConfig) -> (CameraIntrinsics, RenderConfig) {
    let rc = cam.downscaled(config.render_downscale);
    let cfg = RenderConfig::for_camera(&rc)
        .with_sigma(config.render_sigma)
        .with_culling(config.backface_culling);
    (rc, cfg)
}

/// Single-frame, object-only problem with the silhouette term alone.
pub(crate) fn problem_for_object(
    model: &ObjectModel,
    mask: &MaskImage,
    occlusion: &MaskImage,
    cam: &CameraIntrinsics,
    config: &FitConfig,
) -> ClipProblem {
    let (render_camera, render_config) = render_setup(cam, config);
    let mut weights = LossWeights::zero();
    weights.lambda_obj = 1.0;
    ClipProblem {
        camera: cam.clone(),
        render_camera,
        render_config,
        object: Some(model.clone()),
        hands: Vec::new(),
        frames: vec![FrameTarget {
            object_mask: Some(mask.downscaled(config.render_downscale)),
            occlusion: occlusion.downscaled(config.render_downscale),
            hand_2d: Vec::new(),
            overlap: Vec::new(),
        }],
        weights,
        optimize_object_scale: false,
        sdf_resolution: config.sdf_resolution,
    }
}

/// Runs `steps` Adam updates and returns the lowest-loss iterate (including
/// the one after the last update) with its loss. Losses before each update
/// are appended to `trace`; `step_offset` numbers steps in errors.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_stage(
    objective: &mut Objective,
    layout: &Layout,
    start: &ClipState,
    stage: Stage,
    steps: usize,
    step_offset: usize,
    adam: &mut Adam,
    trace: &mut Vec<TraceEntry>,
) -> Result<(ClipState, LossBreakdown)> {
    let mut params = layout.flatten(start);
    let mut best: Option<(Vec<f64>, LossBreakdown)> = None;
    for step in 0..=steps {
        let state = layout.unflatten(&params, start);
        let (loss, grad) = objective.evaluate(&state, stage)?;
        if let Some(term) = loss.non_finite() {
            return Err(Error::DivergedFit {
                term: term.to_string(),
                step: step_offset + step,
            });
        }
        if best.as_ref().is_none_or(|(_, b)| loss.total < b.total) {
            best = Some((params.clone(), loss));
        }
        if step == steps {
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedFit {
                term: "gradient".into(),
                step: step_offset + step,
            });
        }
        trace.push(TraceEntry { stage, step, loss });
        adam.step(&mut params, &grad);
    }
    let (params, loss) = best.expect("at least one evaluation");
    Ok((layout.unflatten(&params, start), loss))
}

/// Longest track of each kind (earliest start on ties).
#[derive(Debug, Clone, Default)]
pub struct ClipTracks {
    pub object: Option<Track>,
    pub hands: BTreeMap<HandSide, Track>,
}

pub fn primary_tracks(tracks: &[Track]) -> ClipTracks {
    let pick = |kind: DetectionKind| {
        tracks
            .iter()
            .filter(|t| t.kind == kind)
            .fold(None::<&Track>, |best, t| match best {
                Some(b) if b.len() > t.len() || (b.len() == t.len() && b.start <= t.start) => Some(b),
                _ => Some(t),
            })
            .cloned()
    };
    let mut hands = BTreeMap::new();
    for side in [HandSide::Left, HandSide::Right] {
        if let Some(t) = pick(DetectionKind::hand(side)) {
            hands.insert(side, t);
        }
    }
    ClipTracks {
        object: pick(DetectionKind::Object),
        hands,
    }
}

/// Tracks the clip's detections after discarding frames whose detections
/// do not match the expected scene composition.
pub fn track_clip(evidence: &ClipEvidence, config: &TrackerConfig) -> ClipTracks {
    let frames: Vec<FrameDetections> = evidence
        .detections()
        .into_iter()
        .map(|f| FrameDetections {
            frame_index: f.frame_index,
            detections: validate_frame(&f.detections, &evidence.file.expected).unwrap_or_default(),
        })
        .collect();
    primary_tracks(&kalman_track(&frames, config))
}

/// Objective inputs for a clip. `hands` lists the fitted hands in state
/// order.
pub fn build_problem(
    evidence: &ClipEvidence,
    object_mesh: Option<&TriMesh>,
    hands: &[ParametricHandModel],
    tracks: &ClipTracks,
    config: &FitConfig,
) -> Result<ClipProblem> {
    config.validate()?;
    let cam = evidence.camera().clone();
    let (render_camera, render_config) = render_setup(&cam, config);
    let object = match object_mesh {
        Some(mesh) => {
            mesh.check_watertight()?;
            Some(ObjectModel::new(mesh.clone(), config.sdf_resolution)?)
        }
        None => None,
    };
    let k = config.render_downscale;
    let frames = evidence
        .frames
        .iter()
        .map(|f| {
            let object_box = tracks.object.as_ref().and_then(|t| t.box_at(f.frame_index));
            Ok(FrameTarget {
                object_mask: f.object_mask.as_ref().map(|m| m.downscaled(k)),
                occlusion: f.hand_occlusion(cam.width, cam.height)?.downscaled(k),
                hand_2d: hands.iter().map(|m| f.hand_init.get(&m.side).map(|h| h.points())).collect(),
                overlap: hands
                    .iter()
                    .map(|m| {
                        let hand_box = tracks.hands.get(&m.side).and_then(|t| t.box_at(f.frame_index));
                        match (hand_box, object_box) {
                            (Some(h), Some(o)) => box_iou(&h.bbox, &o.bbox) > 0.0,
                            _ => false,
                        }
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipProblem {
        camera: cam,
        render_camera,
        render_config,
        object,
        hands: hands.to_vec(),
        frames,
        weights: config.weights,
        optimize_object_scale: config.optimize_object_scale,
        sdf_resolution: config.sdf_resolution,
    })
}

/// Initial clip state: hands from the per-frame hand estimates, the object
/// from the rotation-candidate search.
pub fn initialize_state(
    evidence: &ClipEvidence,
    problem: &ClipProblem,
    tracks: &ClipTracks,
    config: &FitConfig,
) -> Result<(ClipState, Option<MotionInit>)> {
    let cam = evidence.camera();
    let hands = problem
        .hands
        .iter()
        .map(|model| {
            let frames = evidence
                .frames
                .iter()
                .map(|f| {
                    let b = init_hand(f, model.side, model, cam)?;
                    Ok(crate::state::FramePose {
                        rotation: b.rotation,
                        translation: b.translation,
                        theta: b.theta,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(HandTrackState {
                side: model.side,
                scale: 1.0,
                frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (object, motion) = match &problem.object {
        Some(model) => {
            let targets = evidence
                .frames
                .iter()
                .map(|f| {
                    Ok(ObjectFrameTarget {
                        mask: f.object_mask.clone(),
                        occlusion: f.hand_occlusion(cam.width, cam.height)?,
                        bbox: tracks
                            .object
                            .as_ref()
                            .and_then(|t| t.box_at(f.frame_index))
                            .map(|b| b.bbox),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let motion = init_object_motion(model, &targets, cam, config)?;
            let frames = motion
                .states
                .iter()
                .map(|b| crate::state::FramePose {
                    rotation: b.rotation,
                    translation: b.translation,
                    theta: None,
                })
                .collect();
            (Some(ObjectTrackState { scale: 1.0, frames }), Some(motion))
        }
        None => (None, None),
    };
    Ok((
        ClipState {
            hands,
            object,
            contact_labels: None,
        },
        motion,
    ))
}

/// Two-stage Adam fit of every per-frame pose and the shared scales. Each
/// stage returns its lowest-loss iterate.
pub fn fit_joint(initial: &ClipState, problem: ClipProblem, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let started = Instant::now();
    let layout = Layout::of(initial);
    let mut adam = Adam::new(
        &layout.groups(problem.optimize_object_scale),
        config.lr_pose,
        config.lr_translation_scale,
        config.adam_betas,
        config.adam_epsilon,
    );
    let mut objective = Objective::new(problem);
    let mut state = initial.clone();
    let mut trace = Vec::new();
    let mut stage_final = Vec::new();
    for (i, &stage) in config.stages.stages().iter().enumerate() {
        if i > 0 && !config.carry_adam_state {
            adam.reset();
        }
        let offset = i * config.steps_per_stage;
        let (best, loss) = run_stage(
            &mut objective,
            &layout,
            &state,
            stage,
            config.steps_per_stage,
            offset,
            &mut adam,
            &mut trace,
        )?;
        state = best;
        stage_final.push(loss);
    }
    let frame_iou = frame_ious(&objective.problem, &state)?;
    Ok(FitResult {
        state,
        trace,
        stage_final,
        frame_iou,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Whole pipeline for one clip: tracking, problem setup, initialization
/// (unless `initial` is given) and the joint fit.
pub fn fit_clip(
    evidence: &ClipEvidence,
    initial: Option<&ClipState>,
    config: &FitConfig,
    tracker: &TrackerConfig,
) -> Result<FitResult> {
    config.validate()?;
    let mesh = evidence.object_mesh()?;
    let hands = evidence.hand_models()?;
    let tracks = track_clip(evidence, tracker);
    let problem = build_problem(evidence, mesh.as_ref(), &hands, &tracks, config)?;
    let initial = match initial {
        Some(s) => {
            s.validate(hands.first().map_or(0, |h| h.latent_dim()))?;
            if s.frame_count() != evidence.frames.len() {
                return Err(Error::DimensionMismatch(format!(
                    "initial state has {} frames, evidence has {}",
                    s.frame_count(),
                    evidence.frames.len()
                )));
            }
            let sides: Vec<HandSide> = s.hands.iter().map(|h| h.side).collect();
            let expected: Vec<HandSide> = hands.iter().map(|h| h.side).collect();
            if sides != expected || s.object.is_some() != mesh.is_some() {
                return Err(Error::DimensionMismatch(
                    "initial state entities do not match the clip's hands and object".into(),
                ));
            }
            s.clone()
        }
        None => initialize_state(evidence, &problem, &tracks, config)?.0,
    };
    fit_joint(&initial, problem, config)
}

/// Per-frame hard-silhouette IoU at render resolution, hand pixels removed.
fn frame_ious(problem: &ClipProblem, state: &ClipState) -> Result<Vec<Option<f64>>> {
    let (Some(model), Some(obj)) = (&problem.object, &state.object) else {
        return Ok(Vec::new());
    };
    let cam = &problem.render_camera;
    problem
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let Some(target) = &f.object_mask else {
                return Ok(None);
            };
            let b = obj.body(t);
            let posed = model.mesh.transformed(&b.rotation.to_matrix()?, &b.translation, b.scale);
            let hard = hard_silhouette(&posed.vertices, &posed.faces, cam, cam.width, cam.height)?;
            mask_iou(
                &hard.masked_out(&f.occlusion)?,
                &target.thresholded().masked_out(&f.occlusion)?,
            )
            .map(Some)
        })
        .collect()
}
