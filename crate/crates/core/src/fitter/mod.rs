//! Pose initialization and the two-stage joint fit over a clip.

mod adam;
mod init;
mod joint;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_json;
use crate::objective::{LossBreakdown, LossWeights, Stage};
use crate::state::ClipState;

pub use adam::Adam;
pub use init::{
    init_hand, init_object_motion, init_object_translation, refine_object_silhouette, sample_rotations, MotionInit,
    ObjectFrameTarget, RefineResult,
};
pub use joint::{build_problem, fit_clip, fit_joint, initialize_state, primary_tracks, track_clip, ClipTracks};

/// Which stages [`fit_joint`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StagePlan {
    CoarseOnly,
    #[default]
    Full,
}

impl StagePlan {
    pub fn stages(self) -> &'static [Stage] {
        match self {
            StagePlan::CoarseOnly => &[Stage::Coarse],
            StagePlan::Full => &[Stage::Coarse, Stage::Full],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps_per_stage: usize,
    /// Rotations and latent hand pose.
    pub lr_pose: f64,
    pub lr_translation_scale: f64,
    pub adam_betas: [f64; 2],
    pub adam_epsilon: f64,
    pub n_rotation_candidates: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Silhouettes are rendered at `1/render_downscale` of the camera
    /// resolution.
    pub render_downscale: u32,
    /// Soft rasterizer sharpness, in render pixels.
    pub render_sigma: f64,
    pub backface_culling: bool,
    pub sdf_resolution: usize,
    /// Optimize the object scale (for meshes that only approximate the
    /// object); otherwise it stays at its initial value.
    pub optimize_object_scale: bool,
    /// Keep Adam moments across stages instead of resetting them.
    pub carry_adam_state: bool,
    pub stages: StagePlan,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps_per_stage: 200,
            lr_pose: 0.1,
            lr_translation_scale: 0.01,
            adam_betas: [0.9, 0.999],
            adam_epsilon: 1e-8,
            n_rotation_candidates: 50,
            weights: LossWeights::default(),
            seed: 0,
            render_downscale: 4,
            render_sigma: 1.0,
            backface_culling: true,
            sdf_resolution: 32,
            optimize_object_scale: false,
            carry_adam_state: false,
            stages: StagePlan::Full,
        }
    }
}

impl FitConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps_per_stage < 1 {
            return fail("steps_per_stage must be at least 1".into());
        }
        if !(self.lr_pose > 0.0) || !(self.lr_translation_scale > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return fail(format!("adam_betas must lie in [0, 1), got {:?}", self.adam_betas));
        }
        if !(self.adam_epsilon > 0.0) {
            return fail("adam_epsilon must be positive".into());
        }
        if self.n_rotation_candidates < 1 {
            return fail("n_rotation_candidates must be at least 1".into());
        }
        if self.render_downscale < 1 {
            return fail("render_downscale must be at least 1".into());
        }
        if !(self.render_sigma > 0.0) {
            return fail("render_sigma must be positive".into());
        }
        if self.sdf_resolution < 8 {
            return fail("sdf_resolution must be at least 8".into());
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: Stage,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: ClipState,
    /// Loss before every update, in stage order.
    pub trace: Vec<TraceEntry>,
    /// Loss of the returned state under each stage's objective.
    pub stage_final: Vec<LossBreakdown>,
    /// Per frame, hard-silhouette IoU of the object against its target, both
    /// with hand pixels removed, at render resolution. `None` for frames
    /// without an object mask.
    pub frame_iou: Vec<Option<f64>>,
    pub wall_time_s: f64,
}

/// Loss trace as CSV: one header row, then one row per step.
pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("stage,step,obj,v2d,pca,scale,smooth,centroid,local,col,total\n");
    for e in trace {
        let stage = match e.stage {
            Stage::Coarse => "coarse",
            Stage::Full => "full",
        };
        out.push_str(&format!("{stage},{}", e.step));
        for v in e.loss.terms().iter().chain(std::iter::once(&e.loss.total)) {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}
