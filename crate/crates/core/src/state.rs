//! Per-clip pose parameters of every entity and their flat vector layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rotation6D, Vec3};
use crate::hand_model::{BodyState, HandSide};
use crate::io::{read_json, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePose {
    pub rotation: Rotation6D,
    pub translation: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandTrackState {
    pub side: HandSide,
    /// Shared over all frames.
    pub scale: f64,
    pub frames: Vec<FramePose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectTrackState {
    pub scale: f64,
    pub frames: Vec<FramePose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipState {
    #[serde(default)]
    pub hands: Vec<HandTrackState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<ObjectTrackState>,
    /// Per-frame ground-truth hand-object contact, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact_labels: Option<Vec<bool>>,
}

impl HandTrackState {
    pub fn body(&self, frame: usize) -> BodyState {
        let f = &self.frames[frame];
        BodyState {
            rotation: f.rotation,
            translation: f.translation,
            scale: self.scale,
            theta: f.theta.clone(),
        }
    }
}

impl ObjectTrackState {
    pub fn body(&self, frame: usize) -> BodyState {
        let f = &self.frames[frame];
        BodyState {
            rotation: f.rotation,
            translation: f.translation,
            scale: self.scale,
            theta: None,
        }
    }
}

impl ClipState {
    pub fn frame_count(&self) -> usize {
        self.object
            .as_ref()
            .map(|o| o.frames.len())
            .or_else(|| self.hands.first().map(|h| h.frames.len()))
            .unwrap_or(0)
    }

    pub fn hand(&self, side: HandSide) -> Option<&HandTrackState> {
        self.hands.iter().find(|h| h.side == side)
    }

    /// Every entity covers the same frames, scales are positive, rotations
    /// decode and hands carry `theta` of length `latent_dim`.
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        let t = self.frame_count();
        let check_frames = |frames: &[FramePose], theta: bool| -> Result<()> {
            if frames.len() != t {
                return Err(Error::DimensionMismatch(format!(
                    "entity has {} frames, clip has {t}",
                    frames.len()
                )));
            }
            for f in frames {
                f.rotation.to_matrix()?;
                match (&f.theta, theta) {
                    (Some(th), true) if th.len() == latent_dim => {}
                    (None, false) => {}
                    (Some(th), true) => {
                        return Err(Error::DimensionMismatch(format!(
                            "theta has {} components, expected {latent_dim}",
                            th.len()
                        )))
                    }
                    (_, true) => return Err(Error::DimensionMismatch("hand frame without theta".into())),
                    (_, false) => return Err(Error::DimensionMismatch("object frame with theta".into())),
                }
            }
            Ok(())
        };
        for h in &self.hands {
            if !(h.scale > 0.0) {
                return Err(Error::InvalidScale(h.scale));
            }
            check_frames(&h.frames, true)?;
        }
        if let Some(o) = &self.object {
            if !(o.scale > 0.0) {
                return Err(Error::InvalidScale(o.scale));
            }
            check_frames(&o.frames, false)?;
        }
        if let Some(labels) = &self.contact_labels {
            if labels.len() != t {
                return Err(Error::DimensionMismatch(format!(
                    "{} contact labels for {t} frames",
                    labels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Learning-rate group of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Rotations and latent hand pose.
    Pose,
    /// Translations and scales.
    TranslationScale,
    /// Not optimized.
    Frozen,
}

/// Offsets of every parameter inside the flat vector. Hands come first in
/// state order: `[scale, per frame (rotation 6, translation 3, theta K)]`,
/// then the object: `[scale, per frame (rotation 6, translation 3)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub hands: Vec<EntityLayout>,
    pub object: Option<EntityLayout>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityLayout {
    pub scale: usize,
    /// Start of each frame's block.
    pub frames: Vec<usize>,
    pub latent_dim: usize,
}

impl EntityLayout {
    pub fn rotation(&self, t: usize) -> usize {
        self.frames[t]
    }

    pub fn translation(&self, t: usize) -> usize {
        self.frames[t] + 6
    }

    pub fn theta(&self, t: usize) -> usize {
        self.frames[t] + 9
    }
}

impl Layout {
    pub fn of(state: &ClipState) -> Self {
        let mut len = 0;
        let mut entity = |frames: usize, k: usize| {
            let scale = len;
            len += 1;
            let starts = (0..frames)
                .map(|_| {
                    let s = len;
                    len += 9 + k;
                    s
                })
                .collect();
            EntityLayout {
                scale,
                frames: starts,
                latent_dim: k,
            }
        };
        let hands = state
            .hands
            .iter()
            .map(|h| entity(h.frames.len(), h.frames.first().and_then(|f| f.theta.as_ref()).map_or(0, Vec::len)))
            .collect();
        let object = state.object.as_ref().map(|o| entity(o.frames.len(), 0));
        Self { hands, object, len }
    }

    pub fn flatten(&self, state: &ClipState) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        let write = |out: &mut [f64], l: &EntityLayout, scale: f64, frames: &[FramePose]| {
            out[l.scale] = scale;
            for (t, f) in frames.iter().enumerate() {
                out[l.rotation(t)..l.rotation(t) + 6].copy_from_slice(&f.rotation.0);
                out[l.translation(t)..l.translation(t) + 3].copy_from_slice(f.translation.as_slice());
                if let Some(th) = &f.theta {
                    out[l.theta(t)..l.theta(t) + th.len()].copy_from_slice(th);
                }
            }
        };
        for (l, h) in self.hands.iter().zip(&state.hands) {
            write(&mut out, l, h.scale, &h.frames);
        }
        if let (Some(l), Some(o)) = (&self.object, &state.object) {
            write(&mut out, l, o.scale, &o.frames);
        }
        out
    }

    /// Writes `params` back into a copy of `template`.
    pub fn unflatten(&self, params: &[f64], template: &ClipState) -> ClipState {
        let mut state = template.clone();
        let read = |l: &EntityLayout, scale: &mut f64, frames: &mut [FramePose]| {
            *scale = params[l.scale];
            for (t, f) in frames.iter_mut().enumerate() {
                f.rotation.0.copy_from_slice(&params[l.rotation(t)..l.rotation(t) + 6]);
                f.translation = Vec3::from_column_slice(&params[l.translation(t)..l.translation(t) + 3]);
                if let Some(th) = &mut f.theta {
                    let k = th.len();
                    th.copy_from_slice(&params[l.theta(t)..l.theta(t) + k]);
                }
            }
        };
        for (l, h) in self.hands.iter().zip(&mut state.hands) {
            read(l, &mut h.scale, &mut h.frames);
        }
        if let (Some(l), Some(o)) = (&self.object, &mut state.object) {
            read(l, &mut o.scale, &mut o.frames);
        }
        state
    }

    /// Learning-rate groups; the object scale is frozen unless requested.
    pub fn groups(&self, optimize_object_scale: bool) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Pose; self.len];
        let mut mark = |l: &EntityLayout, scale_group: ParamGroup| {
            g[l.scale] = scale_group;
            for t in 0..l.frames.len() {
                for x in &mut g[l.translation(t)..l.translation(t) + 3] {
                    *x = ParamGroup::TranslationScale;
                }
            }
        };
        for l in &self.hands {
            mark(l, ParamGroup::TranslationScale);
        }
        if let Some(l) = &self.object {
            mark(
                l,
                if optimize_object_scale {
                    ParamGroup::TranslationScale
                } else {
                    ParamGroup::Frozen
                },
            );
        }
        g
    }
}
