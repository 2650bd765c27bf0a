//! Per-clip evidence files: camera, detections, masks and hand estimates.
//!
//! A clip directory holds `evidence.json` and the mask PNGs it references
//! (paths relative to the directory).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Rotation6D, TriMesh, Vec2};
use crate::hand_model::{procedural_hand, HandSide, ParametricHandModel};
use crate::io::read_json;
use crate::mask::MaskImage;
use crate::tracking::{Detection, ExpectedScene, FrameDetections};

pub const EVIDENCE_FILE: &str = "evidence.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandInit {
    pub theta_init: Vec<f64>,
    pub rotation_init: Rotation6D,
    pub vertices_2d: Vec<[f64; 2]>,
}

impl HandInit {
    pub fn points(&self) -> Vec<Vec2> {
        self.vertices_2d.iter().map(|p| Vec2::new(p[0], p[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_index: usize,
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub hand_init: BTreeMap<HandSide, HandInit>,
    /// Entity name (`object`, `hand_left`, `hand_right`) to mask path.
    #[serde(default)]
    pub masks: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceFile {
    pub clip: String,
    pub camera: CameraIntrinsics,
    /// Object mesh (OBJ), relative to the clip directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_mesh: Option<String>,
    /// Hand model assets per side; the bundled model is used when absent.
    #[serde(default)]
    pub hand_models: BTreeMap<HandSide, String>,
    pub expected: ExpectedScene,
    pub frames: Vec<FrameRecord>,
}

/// One frame with masks loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEvidence {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
    pub object_mask: Option<MaskImage>,
    pub hand_masks: BTreeMap<HandSide, MaskImage>,
    pub hand_init: BTreeMap<HandSide, HandInit>,
}

impl FrameEvidence {
    /// Union of all hand masks, or an empty mask of the given size.
    pub fn hand_occlusion(&self, width: u32, height: u32) -> Result<MaskImage> {
        let mut out = MaskImage::zeros(width, height);
        for m in self.hand_masks.values() {
            out = out.union(m)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct ClipEvidence {
    pub dir: PathBuf,
    pub file: EvidenceFile,
    pub frames: Vec<FrameEvidence>,
}

pub fn mask_key(side: Option<HandSide>) -> &'static str {
    match side {
        None => "object",
        Some(HandSide::Left) => "hand_left",
        Some(HandSide::Right) => "hand_right",
    }
}

/// Relative path of a mask inside a clip directory.
pub fn mask_path(frame: usize, key: &str) -> String {
    format!("masks/{frame:04}_{key}.png")
}

impl ClipEvidence {
    pub fn load(dir: &Path) -> Result<Self> {
        let file: EvidenceFile = read_json(&dir.join(EVIDENCE_FILE))?;
        file.camera.validate()?;
        let cam = &file.camera;
        let mut frames = Vec::with_capacity(file.frames.len());
        for rec in &file.frames {
            for d in &rec.detections {
                d.validate()?;
            }
            let mut object_mask = None;
            let mut hand_masks = BTreeMap::new();
            for (key, rel) in &rec.masks {
                let mask = MaskImage::load_png(&dir.join(rel))?;
                if mask.width != cam.width || mask.height != cam.height {
                    return Err(Error::DimensionMismatch(format!(
                        "mask {rel} is {}x{}, camera is {}x{}",
                        mask.width, mask.height, cam.width, cam.height
                    )));
                }
                match key.as_str() {
                    "object" => object_mask = Some(mask),
                    "hand_left" => {
                        hand_masks.insert(HandSide::Left, mask);
                    }
                    "hand_right" => {
                        hand_masks.insert(HandSide::Right, mask);
                    }
                    other => {
                        return Err(Error::DegenerateEvidence(format!("unknown mask entity `{other}`")));
                    }
                }
            }
            frames.push(FrameEvidence {
                frame_index: rec.frame_index,
                detections: rec.detections.clone(),
                object_mask,
                hand_masks,
                hand_init: rec.hand_init.clone(),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            file,
            frames,
        })
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.file.camera
    }

    pub fn detections(&self) -> Vec<FrameDetections> {
        detections_of(&self.file)
    }

    /// The clip's object mesh, if it names one.
    pub fn object_mesh(&self) -> Result<Option<TriMesh>> {
        self.file
            .object_mesh
            .as_ref()
            .map(|rel| TriMesh::read_obj(&self.dir.join(rel)))
            .transpose()
    }

    /// One model per expected hand, in the order of `expected.sides`: the
    /// listed asset, or the bundled model when none is listed.
    pub fn hand_models(&self) -> Result<Vec<ParametricHandModel>> {
        self.file
            .expected
            .sides
            .iter()
            .map(|&side| {
                let model = match self.file.hand_models.get(&side) {
                    Some(rel) => ParametricHandModel::load(&self.dir.join(rel))?,
                    None => procedural_hand(side),
                };
                if model.side != side {
                    return Err(Error::InvalidAsset(format!(
                        "asset for the {} hand describes a {} hand",
                        side.as_str(),
                        model.side.as_str()
                    )));
                }
                Ok(model)
            })
            .collect()
    }
}

pub fn detections_of(file: &EvidenceFile) -> Vec<FrameDetections> {
    file.frames
        .iter()
        .map(|f| FrameDetections {
            frame_index: f.frame_index,
            detections: f.detections.clone(),
        })
        .collect()
}
