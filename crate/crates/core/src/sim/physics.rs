use serde::{Deserialize, Serialize};

use crate::geometry::{dist, Point3};

use super::scene::{Fingers, Scene, Shape};
use super::task::CUBE_HALF;

/// Relative end-effector motion plus a binary gripper command.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub delta: [f64; 3],
    pub grip: Fingers,
}

impl Action {
    pub fn new(delta: [f64; 3], grip: Fingers) -> Self {
        Self { delta, grip }
    }

    pub fn hold(grip: Fingers) -> Self {
        Self::new([0.0; 3], grip)
    }

    /// `(dx, dy, dz, grip)` with grip encoded as `+1` closed / `-1` open.
    pub fn to_vec4(&self) -> [f64; 4] {
        [self.delta[0], self.delta[1], self.delta[2], self.grip.signal()]
    }

    /// Inverse of [`Action::to_vec4`]; the grip channel is thresholded at 0.
    pub fn from_vec4(a: [f64; 4]) -> Self {
        Self::new([a[0], a[1], a[2]], Fingers::from_signal(a[3]))
    }
}

/// Clamps each component to `[-max_step, max_step]`; non-finite components
/// become zero.
pub fn clamp_delta(delta: [f64; 3], max_step: f64) -> [f64; 3] {
    delta.map(|d| {
        if d.is_finite() {
            d.clamp(-max_step, max_step)
        } else {
            0.0
        }
    })
}

/// Advances the scene by one action.
pub fn step(scene: &mut Scene, action: &Action) {
    let limits = scene.limits;
    let delta = clamp_delta(action.delta, limits.max_step);
    let x_ee = scene.gripper.position();

    match (scene.gripper.fingers, action.grip) {
        (Fingers::Open, Fingers::Closed) => {
            scene.gripper.fingers = Fingers::Closed;
            let nearest = scene
                .objects
                .iter()
                .filter_map(|o| o.grasp_point().map(|g| (o.id, dist(g, x_ee))))
                .filter(|&(_, d)| d <= limits.grasp_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((id, _)) = nearest {
                let p = scene.objects[id].pose.position;
                scene.gripper.attached = Some(id);
                scene.gripper.attach_offset = [p[0] - x_ee[0], p[1] - x_ee[1], p[2] - x_ee[2]];
            }
        }
        (Fingers::Closed, Fingers::Open) => {
            scene.gripper.fingers = Fingers::Open;
            if let Some(id) = scene.gripper.attached.take() {
                scene.gripper.attach_offset = [0.0; 3];
                let p = scene.objects[id].pose.position;
                let z = scene.support_height([p[0], p[1]], id);
                scene.objects[id].pose.position[2] = z;
            }
        }
        _ => {}
    }

    let mut lo = limits.workspace_min;
    let mut hi = limits.workspace_max;
    if scene.gripper.attached.is_some() {
        // Keep a carried object from sinking into the table.
        lo[2] = lo[2].max(scene.z0 - scene.gripper.attach_offset[2]);
    }
    if let Some(line) = limits.reach_line {
        hi[0] = hi[0].min(line);
    }
    let mut next = [0.0; 3];
    for k in 0..3 {
        next[k] = (x_ee[k] + delta[k]).min(hi[k]).max(lo[k]);
    }
    let moved = [next[0] - x_ee[0], next[1] - x_ee[1], next[2] - x_ee[2]];

    // A held tool drags the cube along while pulling toward the robot.
    if let Some(tool_id) = scene.gripper.attached {
        let tool = &scene.objects[tool_id];
        if let (Shape::Tool { .. }, Some(cube_id)) = (tool.shape, scene.object_id("cube")) {
            let hook = tool
                .pose
                .to_world(tool.shape.hook_point(CUBE_HALF).expect("tools have hooks"));
            if moved[0] < 0.0 && dist(hook, scene.objects[cube_id].center()) <= limits.hook_radius {
                let cube = &mut scene.objects[cube_id].pose.position;
                cube[0] += moved[0];
                cube[1] += moved[1];
            }
        }
    }

    scene.gripper.x_ee = Point3::robot(next[0], next[1], next[2]);
    if let Some(id) = scene.gripper.attached {
        let off = scene.gripper.attach_offset;
        scene.objects[id].pose.position = [next[0] + off[0], next[1] + off[1], next[2] + off[2]];
    }
    scene.step += 1;
}
