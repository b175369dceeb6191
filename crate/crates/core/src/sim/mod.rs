//! Kinematic tabletop simulator with RGB-D rendering, the three manipulation
//! tasks, and scripted experts.
//!
//! The robot frame has its origin at the table center on the table surface.
//! The camera sits on the +X side of the table, so +Y appears to the right in
//! images and +X towards the bottom. In tool-using the robot cannot reach
//! past `x = 0`.

mod expert;
mod physics;
mod render;
mod scene;
mod task;

pub use expert::{clip_direction, ExpertConfig, Plan, ScriptedExpert, Stage};
pub use physics::{clamp_delta, step, Action};
pub use render::{
    gripper_parts, RenderOutput, Renderer, BACKGROUND_DEPTH, LABEL_BACKGROUND, LABEL_GRIPPER, LABEL_TABLE,
};
pub use scene::{Fingers, GripperState, Limits, Object, Part, Pose, Scene, Shape, SCENE_SNAPSHOT_VERSION};
pub use task::{
    footprint_gap, reset, success, ObjectTemplate, Rect, Region, RegionKind, TaskId, TaskSpec, CUBE_HALF, FETCH_MARGIN,
    LIFT_HEIGHT,
};

use crate::error::Result;

/// Runs `expert` from `scene` until success or `max_steps`. Returns whether
/// the task succeeded and the actions taken.
pub fn run_expert(scene: &mut Scene, expert: &mut ScriptedExpert, max_steps: usize) -> Result<(bool, Vec<Action>)> {
    let mut actions = Vec::new();
    while actions.len() < max_steps {
        if success(scene) {
            return Ok((true, actions));
        }
        let a = expert.act(scene)?;
        step(scene, &a);
        actions.push(a);
    }
    Ok((success(scene), actions))
}
