use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

use super::task::TaskId;

/// Geometric primitive in an object's local frame (origin on the bottom face,
/// +Z up).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Part {
    Box {
        center: [f64; 3],
        half: [f64; 3],
    },
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box {
        half: [f64; 3],
    },
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Square ring of four walls.
    Ring {
        outer_half: f64,
        wall: f64,
        half_height: f64,
    },
    /// L-shaped tool: a handle along local +X starting at the grasp end, and
    /// a hook bar along local -Y at the far end.
    Tool {
        handle_length: f64,
        half_width: f64,
        half_height: f64,
        hook_length: f64,
    },
}

impl Shape {
    pub fn parts(&self) -> Vec<Part> {
        match *self {
            Shape::Box { half } => vec![Part::Box {
                center: [0.0, 0.0, half[2]],
                half,
            }],
            Shape::Cylinder { radius, half_height } => vec![Part::Cylinder {
                center: [0.0, 0.0, half_height],
                radius,
                half_height,
            }],
            Shape::Ring {
                outer_half,
                wall,
                half_height,
            } => {
                let o = outer_half;
                let hw = wall / 2.0;
                let inner_span = o - wall;
                vec![
                    Part::Box {
                        center: [o - hw, 0.0, half_height],
                        half: [hw, o, half_height],
                    },
                    Part::Box {
                        center: [-(o - hw), 0.0, half_height],
                        half: [hw, o, half_height],
                    },
                    Part::Box {
                        center: [0.0, o - hw, half_height],
                        half: [inner_span, hw, half_height],
                    },
                    Part::Box {
                        center: [0.0, -(o - hw), half_height],
                        half: [inner_span, hw, half_height],
                    },
                ]
            }
            Shape::Tool {
                handle_length,
                half_width,
                half_height,
                hook_length,
            } => {
                let w = half_width;
                let end = handle_length - w;
                vec![
                    Part::Box {
                        center: [handle_length / 2.0 - w, 0.0, half_height],
                        half: [handle_length / 2.0, w, half_height],
                    },
                    Part::Box {
                        center: [end, -(hook_length / 2.0) + w, half_height],
                        half: [w, hook_length / 2.0, half_height],
                    },
                ]
            }
        }
    }

    pub fn height(&self) -> f64 {
        match *self {
            Shape::Box { half } => 2.0 * half[2],
            Shape::Cylinder { half_height, .. } | Shape::Ring { half_height, .. } | Shape::Tool { half_height, .. } => {
                2.0 * half_height
            }
        }
    }

    /// Local grasp point, if the object can be picked up.
    pub fn grasp_point(&self) -> Option<[f64; 3]> {
        match *self {
            Shape::Box { half } => Some([0.0, 0.0, half[2]]),
            Shape::Tool { half_height, .. } => Some([0.0, 0.0, half_height]),
            _ => None,
        }
    }

    /// Local point where a hooked cube's center sits (tools only).
    pub fn hook_point(&self, cube_half: f64) -> Option<[f64; 3]> {
        match *self {
            Shape::Tool {
                handle_length,
                half_width,
                half_height,
                hook_length,
            } => {
                let inner_face = handle_length - 2.0 * half_width;
                Some([inner_face - cube_half, -(hook_length / 2.0) + half_width, half_height])
            }
            _ => None,
        }
    }

    /// Whether a local-frame xy point lies on the object's top footprint.
    pub fn footprint_contains(&self, local: [f64; 2]) -> bool {
        self.parts().iter().any(|p| match *p {
            Part::Box { center, half } => {
                (local[0] - center[0]).abs() <= half[0] && (local[1] - center[1]).abs() <= half[1]
            }
            Part::Cylinder { center, radius, .. } => (local[0] - center[0]).hypot(local[1] - center[1]) <= radius,
        })
    }

    /// Radius of a circle about the local origin enclosing the footprint.
    pub fn bounding_radius(&self) -> f64 {
        self.parts()
            .iter()
            .map(|p| match *p {
                Part::Box { center, half } => (center[0].abs() + half[0]).hypot(center[1].abs() + half[1]),
                Part::Cylinder { center, radius, .. } => center[0].hypot(center[1]) + radius,
            })
            .fold(0.0, f64::max)
    }
}

/// Position of the local origin (bottom face) plus planar yaw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub yaw: f64,
}

impl Pose {
    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.position[0] + c * local[0] - s * local[1],
            self.position[1] + s * local[0] + c * local[1],
            self.position[2] + local[2],
        ]
    }

    pub fn to_local(&self, world: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [
            world[0] - self.position[0],
            world[1] - self.position[1],
            world[2] - self.position[2],
        ];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn rotate_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
    }

    pub fn rotate_to_local(&self, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: usize,
    pub name: String,
    pub shape: Shape,
    pub pose: Pose,
    pub color: [u8; 3],
}

impl Object {
    pub fn grasp_point(&self) -> Option<[f64; 3]> {
        self.shape.grasp_point().map(|p| self.pose.to_world(p))
    }

    /// World-frame center of the object's volume.
    pub fn center(&self) -> [f64; 3] {
        let mut c = self.pose.position;
        c[2] += self.shape.height() / 2.0;
        c
    }

    /// World-frame axis-aligned bounds of each part's footprint.
    pub fn footprint_boxes(&self) -> Vec<super::task::Rect> {
        let (s, c) = self.pose.yaw.sin_cos();
        self.shape
            .parts()
            .iter()
            .map(|p| {
                let (center, ex, ey) = match *p {
                    Part::Box { center, half } => (
                        center,
                        c.abs() * half[0] + s.abs() * half[1],
                        s.abs() * half[0] + c.abs() * half[1],
                    ),
                    Part::Cylinder { center, radius, .. } => (center, radius, radius),
                };
                let w = self.pose.to_world(center);
                super::task::Rect::new(w[0] - ex, w[0] + ex, w[1] - ey, w[1] + ey)
            })
            .collect()
    }

    pub fn top(&self) -> f64 {
        self.pose.position[2] + self.shape.height()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fingers {
    Open,
    Closed,
}

impl Fingers {
    /// `+1` for closed, `-1` for open.
    pub fn signal(self) -> f64 {
        match self {
            Fingers::Closed => 1.0,
            Fingers::Open => -1.0,
        }
    }

    /// Thresholds a continuous grip signal at zero.
    pub fn from_signal(x: f64) -> Self {
        if x > 0.0 {
            Fingers::Closed
        } else {
            Fingers::Open
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub x_ee: Point3,
    pub fingers: Fingers,
    pub attached: Option<usize>,
    /// Attached object's pose position minus `x_ee`, fixed at grasp time.
    pub attach_offset: [f64; 3],
}

impl GripperState {
    pub fn position(&self) -> [f64; 3] {
        self.x_ee.to_array()
    }
}

/// Motion limits applied by [`super::step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_step: f64,
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    /// Tool-using only: `x_ee.x` may not exceed this value.
    pub reach_line: Option<f64>,
    pub grasp_radius: f64,
    pub hook_radius: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_step: 0.02,
            workspace_min: [-0.35, -0.35, 0.005],
            workspace_max: [0.35, 0.35, 0.4],
            reach_line: None,
            grasp_radius: 0.03,
            hook_radius: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub task: TaskId,
    pub seed: u64,
    pub step: u64,
    /// Table surface height.
    pub z0: f64,
    pub table_half: f64,
    pub objects: Vec<Object>,
    pub gripper: GripperState,
    pub limits: Limits,
}

pub const SCENE_SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    scene: Scene,
}

impl Scene {
    pub fn object(&self, name: &str) -> Option<&Object> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Object> {
        self.object(name)
            .ok_or_else(|| Error::Config(format!("scene has no object named {name:?}")))
    }

    pub fn is_attached(&self, name: &str) -> bool {
        self.gripper.attached.is_some_and(|id| self.objects[id].name == name)
    }

    /// Height an object at world xy would come to rest at, ignoring `skip`.
    pub fn support_height(&self, xy: [f64; 2], skip: usize) -> f64 {
        let mut h = self.z0;
        for o in &self.objects {
            if o.id == skip || self.gripper.attached == Some(o.id) {
                continue;
            }
            let l = o.pose.to_local([xy[0], xy[1], 0.0]);
            if o.shape.footprint_contains([l[0], l[1]]) {
                h = h.max(o.top());
            }
        }
        h
    }

    /// Checks the scene invariants: finite poses, resting objects at or
    /// above the table, attachment only with closed fingers.
    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if o.id != i {
                return Err(Error::Config(format!("object {} has id {}", i, o.id)));
            }
            if o.pose.position.iter().chain([&o.pose.yaw]).any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("object {:?} has a non-finite pose", o.name)));
            }
            if self.gripper.attached != Some(i) && o.pose.position[2] < self.z0 - 1e-12 {
                return Err(Error::Config(format!("object {:?} is below the table", o.name)));
            }
        }
        if self.gripper.attached.is_some() && self.gripper.fingers != Fingers::Closed {
            return Err(Error::Config("attached object with open fingers".into()));
        }
        if self.gripper.attached.is_some_and(|id| id >= self.objects.len()) {
            return Err(Error::Config("attached id out of range".into()));
        }
        let p = self.gripper.position();
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite x_ee".into()));
        }
        for k in 0..3 {
            if p[k] < self.limits.workspace_min[k] - 1e-12 || p[k] > self.limits.workspace_max[k] + 1e-12 {
                return Err(Error::Config(format!("x_ee {p:?} outside the workspace")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Snapshot {
            version: SCENE_SNAPSHOT_VERSION,
            scene: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: Snapshot = serde_json::from_str(s)?;
        if snap.version != SCENE_SNAPSHOT_VERSION {
            return Err(Error::Format(format!(
                "unsupported scene snapshot version {}",
                snap.version
            )));
        }
        snap.scene.validate()?;
        Ok(snap.scene)
    }
}
