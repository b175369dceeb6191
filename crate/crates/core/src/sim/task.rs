use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::Point3;

use super::scene::{Fingers, GripperState, Limits, Object, Pose, Scene, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Lifting,
    Stacking,
    ToolUsing,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Lifting, TaskId::Stacking, TaskId::ToolUsing];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Lifting => "lifting",
            TaskId::Stacking => "stacking",
            TaskId::ToolUsing => "tool_using",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| config_err!("unknown task {s:?}; valid tasks: lifting, stacking, tool_using"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Interpolation,
    Extrapolation,
}

impl RegionKind {
    pub const ALL: [RegionKind; 2] = [RegionKind::Interpolation, RegionKind::Extrapolation];

    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Interpolation => "interpolation",
            RegionKind::Extrapolation => "extrapolation",
        }
    }
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interpolation" | "int" => Ok(RegionKind::Interpolation),
            "extrapolation" | "ext" => Ok(RegionKind::Extrapolation),
            _ => Err(config_err!(
                "unknown region {s:?}; valid regions: interpolation, extrapolation"
            )),
        }
    }
}

/// Axis-aligned rectangle on the table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Rect {
    pub const fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self {
            x: [x0, x1],
            y: [y0, y1],
        }
    }

    pub fn area(&self) -> f64 {
        (self.x[1] - self.x[0]) * (self.y[1] - self.y[0])
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x[0]..=self.x[1]).contains(&p[0]) && (self.y[0]..=self.y[1]).contains(&p[1])
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.x[0] < o.x[1] && o.x[0] < self.x[1] && self.y[0] < o.y[1] && o.y[0] < self.y[1]
    }
}

/// Union of disjoint rectangles, sampled uniformly by area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub rects: Vec<Rect>,
}

impl Region {
    pub fn new(rects: Vec<Rect>) -> Self {
        Self { rects }
    }

    pub fn area(&self) -> f64 {
        self.rects.iter().map(Rect::area).sum()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.rects.iter().any(|r| r.contains(p))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let mut pick = rng.random_range(0.0..self.area());
        let mut chosen = self.rects[self.rects.len() - 1];
        for r in &self.rects {
            if pick < r.area() {
                chosen = *r;
                break;
            }
            pick -= r.area();
        }
        [
            rng.random_range(chosen.x[0]..chosen.x[1]),
            rng.random_range(chosen.y[0]..chosen.y[1]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTemplate {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    pub interpolation: Region,
    pub extrapolation: Region,
    pub random_yaw: bool,
}

impl ObjectTemplate {
    pub fn region(&self, kind: RegionKind) -> &Region {
        match kind {
            RegionKind::Interpolation => &self.interpolation,
            RegionKind::Extrapolation => &self.extrapolation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    pub objects: Vec<ObjectTemplate>,
    pub max_steps: usize,
    pub limits: Limits,
    pub home: [f64; 3],
    pub z0: f64,
    pub table_half: f64,
    /// Minimum gap between object footprints at reset.
    pub min_separation: f64,
}

pub const CUBE_HALF: f64 = 0.025;
/// Lifting succeeds once the cube's bottom is this far above the table.
pub const LIFT_HEIGHT: f64 = 0.10;
/// Tool-using: x the cube must be pulled behind before it counts as fetched.
pub const FETCH_MARGIN: f64 = 0.05;

pub const RED: [u8; 3] = [200, 40, 35];
pub const BLUE: [u8; 3] = [40, 70, 210];
pub const GREEN: [u8; 3] = [50, 170, 60];
pub const WOOD: [u8; 3] = [150, 100, 50];
pub const STEEL: [u8; 3] = [90, 90, 100];

fn cube(color: [u8; 3], interpolation: Vec<Rect>, extrapolation: Vec<Rect>) -> ObjectTemplate {
    ObjectTemplate {
        name: "cube".into(),
        shape: Shape::Box { half: [CUBE_HALF; 3] },
        color,
        interpolation: Region::new(interpolation),
        extrapolation: Region::new(extrapolation),
        random_yaw: true,
    }
}

/// Frame of rectangles covering `[-outer, outer]^2` minus `(-inner, inner)^2`.
fn square_frame(inner: f64, outer: f64) -> Vec<Rect> {
    vec![
        Rect::new(inner, outer, -outer, outer),
        Rect::new(-outer, -inner, -outer, outer),
        Rect::new(-inner, inner, inner, outer),
        Rect::new(-inner, inner, -outer, -inner),
    ]
}

impl TaskSpec {
    pub fn new(task: TaskId) -> Self {
        let base = |objects, max_steps, limits| TaskSpec {
            task,
            objects,
            max_steps,
            limits,
            home: [-0.1, 0.0, 0.2],
            z0: 0.0,
            table_half: 0.4,
            min_separation: 0.04,
        };
        match task {
            TaskId::Lifting => base(
                vec![cube(
                    RED,
                    vec![Rect::new(-0.08, 0.08, -0.08, 0.08)],
                    square_frame(0.12, 0.22),
                )],
                60,
                Limits::default(),
            ),
            TaskId::Stacking => base(
                vec![
                    cube(
                        RED,
                        vec![Rect::new(-0.08, 0.08, -0.14, -0.02)],
                        vec![
                            Rect::new(0.12, 0.22, -0.22, -0.02),
                            Rect::new(-0.22, -0.12, -0.22, -0.02),
                        ],
                    ),
                    ObjectTemplate {
                        name: "plate".into(),
                        shape: Shape::Cylinder {
                            radius: 0.06,
                            half_height: 0.006,
                        },
                        color: GREEN,
                        interpolation: Region::new(vec![Rect::new(-0.08, 0.08, 0.02, 0.14)]),
                        extrapolation: Region::new(vec![
                            Rect::new(0.12, 0.22, 0.02, 0.22),
                            Rect::new(-0.22, -0.12, 0.02, 0.22),
                        ]),
                        random_yaw: false,
                    },
                ],
                90,
                Limits::default(),
            ),
            TaskId::ToolUsing => base(
                vec![
                    cube(
                        BLUE,
                        vec![Rect::new(0.08, 0.14, -0.10, 0.0)],
                        vec![Rect::new(0.16, 0.22, -0.16, 0.04)],
                    ),
                    ObjectTemplate {
                        name: "tool".into(),
                        shape: Shape::Tool {
                            handle_length: 0.30,
                            half_width: 0.01,
                            half_height: 0.01,
                            hook_length: 0.12,
                        },
                        color: STEEL,
                        interpolation: Region::new(vec![Rect::new(-0.34, -0.30, 0.10, 0.15)]),
                        extrapolation: Region::new(vec![Rect::new(-0.34, -0.30, 0.17, 0.22)]),
                        random_yaw: false,
                    },
                    ObjectTemplate {
                        name: "ring".into(),
                        shape: Shape::Ring {
                            outer_half: 0.07,
                            wall: 0.015,
                            half_height: 0.02,
                        },
                        color: WOOD,
                        interpolation: Region::new(vec![Rect::new(-0.20, -0.14, -0.26, -0.18)]),
                        extrapolation: Region::new(vec![Rect::new(-0.30, -0.24, -0.30, -0.18)]),
                        random_yaw: false,
                    },
                ],
                220,
                Limits {
                    reach_line: Some(0.0),
                    ..Limits::default()
                },
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            for r in o.interpolation.rects.iter().chain(&o.extrapolation.rects) {
                if !(r.x[0] < r.x[1] && r.y[0] < r.y[1]) {
                    return Err(config_err!("degenerate region rectangle {r:?} for {}", o.name));
                }
                let inside = |v: f64| v.abs() <= self.table_half;
                if !(inside(r.x[0]) && inside(r.x[1]) && inside(r.y[0]) && inside(r.y[1])) {
                    return Err(config_err!("region rectangle {r:?} for {} leaves the table", o.name));
                }
            }
            for a in &o.interpolation.rects {
                for b in &o.extrapolation.rects {
                    if a.overlaps(b) {
                        return Err(config_err!(
                            "interpolation and extrapolation regions of {} overlap",
                            o.name
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Reach line in tool-using, where the cube must be pulled behind.
    pub fn fetch_line(&self) -> Option<f64> {
        self.limits.reach_line.map(|x| x - FETCH_MARGIN)
    }
}

/// Smallest distance between the axis-aligned footprint boxes of two objects.
pub fn footprint_gap(a: &Object, b: &Object) -> f64 {
    let (fa, fb) = (a.footprint_boxes(), b.footprint_boxes());
    let mut best = f64::INFINITY;
    for ra in &fa {
        for rb in &fb {
            let dx = (ra.x[0] - rb.x[1]).max(rb.x[0] - ra.x[1]).max(0.0);
            let dy = (ra.y[0] - rb.y[1]).max(rb.y[0] - ra.y[1]).max(0.0);
            best = best.min(dx.hypot(dy));
        }
    }
    best
}

/// Samples a fresh scene. Object positions are uniform in the chosen region;
/// whole layouts are rejected until footprints are `min_separation` apart.
pub fn reset(spec: &TaskSpec, region: RegionKind, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let objects: Vec<Object> = spec
            .objects
            .iter()
            .enumerate()
            .map(|(id, t)| {
                let xy = t.region(region).sample(&mut rng);
                let yaw = if t.random_yaw {
                    rng.random_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4)
                } else {
                    0.0
                };
                Object {
                    id,
                    name: t.name.clone(),
                    shape: t.shape,
                    pose: Pose {
                        position: [xy[0], xy[1], spec.z0],
                        yaw,
                    },
                    color: t.color,
                }
            })
            .collect();
        let separated = objects.iter().enumerate().all(|(i, a)| {
            objects[i + 1..]
                .iter()
                .all(|b| footprint_gap(a, b) >= spec.min_separation)
        });
        if separated {
            let scene = Scene {
                task: spec.task,
                seed,
                step: 0,
                z0: spec.z0,
                table_half: spec.table_half,
                objects,
                gripper: GripperState {
                    x_ee: Point3::robot(spec.home[0], spec.home[1], spec.home[2]),
                    fingers: Fingers::Open,
                    attached: None,
                    attach_offset: [0.0; 3],
                },
                limits: spec.limits,
            };
            scene.validate()?;
            return Ok(scene);
        }
    }
    Err(config_err!(
        "could not place {} objects for {} / {} after 1000 tries",
        spec.objects.len(),
        spec.task,
        region
    ))
}

/// Task success predicate.
pub fn success(scene: &Scene) -> bool {
    let Some(cube) = scene.object("cube") else {
        return false;
    };
    let resting = |o: &Object| {
        !scene.is_attached(&o.name)
            && (o.pose.position[2] - scene.support_height([o.pose.position[0], o.pose.position[1]], o.id)).abs() < 1e-9
    };
    match scene.task {
        TaskId::Lifting => scene.is_attached("cube") && cube.pose.position[2] >= scene.z0 + LIFT_HEIGHT,
        TaskId::Stacking => {
            let Some(plate) = scene.object("plate") else {
                return false;
            };
            let Shape::Cylinder { radius, .. } = plate.shape else {
                return false;
            };
            let d =
                (cube.pose.position[0] - plate.pose.position[0]).hypot(cube.pose.position[1] - plate.pose.position[1]);
            resting(cube) && d <= radius && (cube.pose.position[2] - plate.top()).abs() < 1e-9
        }
        TaskId::ToolUsing => {
            let Some(ring) = scene.object("ring") else {
                return false;
            };
            let Shape::Ring {
                outer_half,
                wall,
                half_height,
            } = ring.shape
            else {
                return false;
            };
            let l = ring.pose.to_local(cube.pose.position);
            let inner = outer_half - wall;
            resting(cube)
                && l[0].abs() <= inner
                && l[1].abs() <= inner
                && cube.pose.position[2] < ring.pose.position[2] + 2.0 * half_height
        }
    }
}
