//! Linear latent-pose hand model and rigid posing of hand and object meshes.

mod asset;
mod model;
mod pose;
mod procedural;

pub use model::{HandSide, ParametricHandModel, JointRegressor, CENTER_JOINT, DEFAULT_LATENT_DIM};
pub use pose::{pose_entity, pose_entity_backward, pose_points, pose_points_backward, BodyState, PoseGradient};
pub use procedural::procedural_hand;
