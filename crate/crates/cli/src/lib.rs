//! Batch commands behind the `hofit` binary: scene synthesis, detection
//! tracking, clip fitting and evaluation.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 data error,
//! 4 diverged fit.

use std::path::{Path, PathBuf};

use hofit::error::Error;
use hofit::evidence::{mask_key, ClipEvidence, EvidenceFile, EVIDENCE_FILE};
use hofit::fitter::{fit_clip, trace_csv, FitConfig, FitResult, StagePlan};
use hofit::geometry::{CameraIntrinsics, TriMesh};
use hofit::hand_model::{pose_entity, ParametricHandModel};
use hofit::io::{read_json, write_json};
use hofit::mask::MaskImage;
use hofit::metrics::evaluate_clip;
use hofit::objective::LossBreakdown;
use hofit::render::hard_silhouette;
use hofit::state::ClipState;
use hofit::synth::{generate_clip, SceneSpec};
use hofit::tracking::{kalman_track, validate_frame, FrameDetections, Track, TrackerConfig};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

pub const RESULT_FILE: &str = "result_states.json";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const SUMMARY_FILE: &str = "fit_summary.json";

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io { .. } | Error::Json { .. } | Error::DimensionMismatch(_) => 2,
        Error::DivergedFit { .. } => 4,
        _ => 3,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        Some(p) => Ok(read_json(p)?),
        None => Ok(T::default()),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

/// Runs `f` on a pool of `jobs` threads (all cores when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::usage(format!("cannot start {jobs:?} worker threads: {e}")))?;
    Ok(pool.install(f))
}

pub struct SynthArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut spec: SceneSpec = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    generate_clip(&spec, &args.out)?;
    Ok(())
}

/// Contents of a track file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFile {
    pub clip: String,
    /// Frames whose detections did not match the expected scene and were
    /// discarded before tracking.
    pub discarded_frames: Vec<usize>,
    pub tracks: Vec<Track>,
}

pub struct TrackArgs {
    /// Evidence file or the clip directory holding it.
    pub evidence: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn track_evidence(file: &EvidenceFile, config: &TrackerConfig) -> TrackFile {
    let mut discarded = Vec::new();
    let frames: Vec<FrameDetections> = file
        .frames
        .iter()
        .map(|f| {
            let detections = validate_frame(&f.detections, &file.expected).unwrap_or_else(|| {
                discarded.push(f.frame_index);
                Vec::new()
            });
            FrameDetections {
                frame_index: f.frame_index,
                detections,
            }
        })
        .collect();
    TrackFile {
        clip: file.clip.clone(),
        discarded_frames: discarded,
        tracks: kalman_track(&frames, config),
    }
}

pub fn cmd_track(args: &TrackArgs) -> CliResult<TrackFile> {
    let config: TrackerConfig = load_config(args.config.as_deref())?;
    let path = if args.evidence.is_dir() {
        args.evidence.join(EVIDENCE_FILE)
    } else {
        args.evidence.clone()
    };
    let file: EvidenceFile = read_json(&path)?;
    for d in file.frames.iter().flat_map(|f| &f.detections) {
        d.validate()?;
    }
    let tracks = track_evidence(&file, &config);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&args.out, &tracks)?;
    Ok(tracks)
}

pub struct FitArgs {
    pub scene: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub stage: Option<StagePlan>,
    pub weights_override: Vec<String>,
    /// Initial state; otherwise the state is initialized from the evidence.
    pub init: Option<PathBuf>,
}

/// Applies `key=value` weight overrides.
pub fn apply_overrides(config: &mut FitConfig, overrides: &[String]) -> CliResult<()> {
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("weight override `{item}` is not key=value")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("weight override `{item}` has a non-numeric value")))?;
        config.weights.set(key.trim(), value)?;
    }
    Ok(())
}

/// Fit configuration after applying flags over the config file.
pub fn fit_config(args: &FitArgs) -> CliResult<FitConfig> {
    let mut config: FitConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(stage) = args.stage {
        config.stages = stage;
    }
    apply_overrides(&mut config, &args.weights_override)?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub stage_final: Vec<LossBreakdown>,
    pub frame_iou: Vec<Option<f64>>,
    pub mean_iou: Option<f64>,
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<FitResult> {
    let config = fit_config(args)?;
    let evidence = ClipEvidence::load(&args.scene)?;
    let init = args.init.as_deref().map(ClipState::load).transpose()?;
    let result = with_jobs(args.jobs, || {
        fit_clip(&evidence, init.as_ref(), &config, &TrackerConfig::default())
    })??;
    write_fit_outputs(&args.out, &evidence, &result)?;
    Ok(result)
}

fn posed_meshes(
    state: &ClipState,
    object: Option<&TriMesh>,
    hands: &[ParametricHandModel],
    t: usize,
) -> hofit::Result<Vec<(&'static str, TriMesh)>> {
    let mut out = Vec::new();
    if let (Some(o), Some(mesh)) = (&state.object, object) {
        let b = o.body(t);
        out.push(("object", mesh.transformed(&b.rotation.to_matrix()?, &b.translation, b.scale)));
    }
    for h in &state.hands {
        let Some(model) = hands.iter().find(|m| m.side == h.side) else {
            continue;
        };
        let b = h.body(t);
        let theta = b.theta.clone().unwrap_or_default();
        let canonical = model.mesh(&theta)?;
        let vertices = pose_entity(&canonical.vertices, &b)?;
        out.push((mask_key(Some(h.side)), TriMesh::new(vertices, canonical.faces)?));
    }
    Ok(out)
}

/// Red: target object mask. Green: fitted object. Blue: fitted hands.
fn overlay(
    cam: &CameraIntrinsics,
    target: Option<&MaskImage>,
    meshes: &[(&'static str, TriMesh)],
) -> hofit::Result<RgbImage> {
    let (w, h) = (cam.width, cam.height);
    let mut object = MaskImage::zeros(w, h);
    let mut hands = MaskImage::zeros(w, h);
    for (key, mesh) in meshes {
        let sil = hard_silhouette(&mesh.vertices, &mesh.faces, cam, w, h)?;
        if *key == "object" {
            object = object.union(&sil)?;
        } else {
            hands = hands.union(&sil)?;
        }
    }
    let byte = |v: f64| if v >= 0.5 { 255u8 } else { 0 };
    Ok(RgbImage::from_fn(w, h, |x, y| {
        Rgb([
            target.map_or(0, |m| byte(m.get(y, x))),
            byte(object.get(y, x)),
            byte(hands.get(y, x)),
        ])
    }))
}

/// Writes the result state, loss trace, summary, posed meshes and overlays.
pub fn write_fit_outputs(out: &Path, evidence: &ClipEvidence, result: &FitResult) -> CliResult<()> {
    create_dir(&out.join("meshes"))?;
    create_dir(&out.join("overlays"))?;
    result.state.save(&out.join(RESULT_FILE))?;
    write_text(&out.join(TRACE_FILE), &trace_csv(&result.trace))?;
    let ious: Vec<f64> = result.frame_iou.iter().flatten().copied().collect();
    let summary = FitSummary {
        stage_final: result.stage_final.clone(),
        frame_iou: result.frame_iou.clone(),
        mean_iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    let object = evidence.object_mesh()?;
    let hands = evidence.hand_models()?;
    let cam = evidence.camera();
    for (t, frame) in evidence.frames.iter().enumerate() {
        let meshes = posed_meshes(&result.state, object.as_ref(), &hands, t)?;
        for (key, mesh) in &meshes {
            mesh.write_obj(&out.join(format!("meshes/{:04}_{key}.obj", frame.frame_index)))?;
        }
        let img = overlay(cam, frame.object_mask.as_ref(), &meshes)?;
        let path = out.join(format!("overlays/{:04}.png", frame.frame_index));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

pub struct EvalArgs {
    pub result: PathBuf,
    pub gt: PathBuf,
    /// Clip directory supplying the object mesh and hand models.
    pub scene: PathBuf,
    pub out: PathBuf,
    pub sdf_resolution: usize,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<hofit::metrics::MetricReport> {
    let result = ClipState::load(&args.result)?;
    let gt = ClipState::load(&args.gt)?;
    let evidence_file: EvidenceFile = read_json(&args.scene.join(EVIDENCE_FILE))?;
    let evidence = ClipEvidence {
        dir: args.scene.clone(),
        file: evidence_file,
        frames: Vec::new(),
    };
    let object = evidence.object_mesh()?;
    let hands = evidence.hand_models()?;
    let report = evaluate_clip(&result, &gt, object.as_ref(), &hands, args.sdf_resolution)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&args.out, &report)?;
    Ok(report)
}
