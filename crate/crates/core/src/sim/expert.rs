use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::dist;

use super::physics::Action;
use super::scene::{Fingers, Scene};
use super::task::{TaskId, CUBE_HALF, FETCH_MARGIN, LIFT_HEIGHT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ReachCube,
    Lift,
    CarryToPlate,
    ReachTool,
    HookCube,
    PullCube,
    ReleaseTool,
    CarryToRing,
    Done,
}

/// Noise-free intent of the expert for the current scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plan {
    pub stage: Stage,
    /// Desired next `x_ee`.
    pub waypoint: [f64; 3],
    pub grip: Fingers,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Per-axis Gaussian noise as a fraction of `max_step`; 0 disables noise.
    pub noise_frac: f64,
    pub gain: f64,
    /// Distance to a grasp/place point at which the gripper closes or opens.
    pub close_tol: f64,
    /// Height above a target from which the gripper descends.
    pub approach_height: f64,
    /// Gripper clearance above the support when placing.
    pub place_clearance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            noise_frac: 0.2,
            gain: 1.0,
            close_tol: 0.01,
            approach_height: 0.08,
            place_clearance: 0.01,
        }
    }
}

/// Hard-coded stage machine. Stages are inferred from the scene alone, so
/// the expert can take over mid-episode.
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    pub config: ExpertConfig,
    rng: ChaCha8Rng,
}

/// Waypoint above `goal`, lowered as the horizontal distance shrinks so the
/// gripper descends along a funnel.
fn funnel(from: [f64; 3], goal: [f64; 3], height: f64) -> [f64; 3] {
    let dh = (goal[0] - from[0]).hypot(goal[1] - from[1]);
    [goal[0], goal[1], goal[2] + height.min(1.5 * dh)]
}

/// Scales `v` uniformly so no component exceeds `max_step`.
pub fn clip_direction(v: [f64; 3], max_step: f64) -> [f64; 3] {
    let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if m > max_step {
        v.map(|x| x * max_step / m)
    } else {
        v
    }
}

impl ScriptedExpert {
    pub fn new(config: ExpertConfig, seed: u64) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn noise_free() -> Self {
        Self::new(
            ExpertConfig {
                noise_frac: 0.0,
                ..ExpertConfig::default()
            },
            0,
        )
    }

    pub fn noisy(seed: u64) -> Self {
        Self::new(ExpertConfig::default(), seed)
    }

    /// Next action: proportional control toward the plan's waypoint, plus
    /// Gaussian noise, clipped to `max_step`.
    pub fn act(&mut self, scene: &Scene) -> Result<Action> {
        let plan = self.plan(scene)?;
        let x = scene.gripper.position();
        let max_step = scene.limits.max_step;
        let mut delta = [0.0; 3];
        for k in 0..3 {
            delta[k] = self.config.gain * (plan.waypoint[k] - x[k]);
        }
        delta = clip_direction(delta, max_step);
        if self.config.noise_frac > 0.0 {
            let normal = Normal::new(0.0, self.config.noise_frac * max_step)
                .map_err(|e| Error::Config(format!("expert noise: {e}")))?;
            for d in &mut delta {
                *d += normal.sample(&mut self.rng);
            }
            delta = clip_direction(delta, max_step);
        }
        Ok(Action::new(delta, plan.grip))
    }

    pub fn plan(&self, scene: &Scene) -> Result<Plan> {
        let plan = match scene.task {
            TaskId::Lifting => self.plan_lifting(scene)?,
            TaskId::Stacking => self.plan_stacking(scene)?,
            TaskId::ToolUsing => self.plan_tool_using(scene)?,
        };
        let l = &scene.limits;
        let w = plan.waypoint;
        let outside = (0..3).any(|k| w[k] < l.workspace_min[k] - 1e-9 || w[k] > l.workspace_max[k] + 1e-9);
        if outside || l.reach_line.is_some_and(|line| w[0] > line + 1e-9) {
            return Err(Error::ExpertFailure(format!(
                "{:?} waypoint {w:?} is unreachable",
                plan.stage
            )));
        }
        Ok(plan)
    }

    /// Approach a grasp point and close on it; reopens after a missed grasp.
    fn reach(&self, scene: &Scene, target: [f64; 3], stage: Stage) -> Plan {
        let x = scene.gripper.position();
        if scene.gripper.fingers == Fingers::Closed {
            return Plan {
                stage,
                waypoint: funnel(x, target, self.config.approach_height),
                grip: Fingers::Open,
            };
        }
        if dist(x, target) < self.config.close_tol {
            return Plan {
                stage,
                waypoint: x,
                grip: Fingers::Closed,
            };
        }
        Plan {
            stage,
            waypoint: funnel(x, target, self.config.approach_height),
            grip: Fingers::Open,
        }
    }

    /// Carry the held object so `x_ee` reaches `target`, then release.
    fn place(&self, scene: &Scene, target: [f64; 3], stage: Stage) -> Plan {
        let x = scene.gripper.position();
        if dist(x, target) < self.config.close_tol {
            Plan {
                stage,
                waypoint: x,
                grip: Fingers::Open,
            }
        } else {
            Plan {
                stage,
                waypoint: funnel(x, target, self.config.approach_height),
                grip: Fingers::Closed,
            }
        }
    }

    fn cube_grasp(scene: &Scene) -> Result<[f64; 3]> {
        scene
            .require("cube")?
            .grasp_point()
            .ok_or_else(|| Error::Config("cube has no grasp point".into()))
    }

    fn plan_lifting(&self, scene: &Scene) -> Result<Plan> {
        let x = scene.gripper.position();
        if scene.is_attached("cube") {
            let lifted_z = scene.z0 + LIFT_HEIGHT - scene.gripper.attach_offset[2] + 0.02;
            return Ok(Plan {
                stage: Stage::Lift,
                waypoint: [x[0], x[1], lifted_z],
                grip: Fingers::Closed,
            });
        }
        Ok(self.reach(scene, Self::cube_grasp(scene)?, Stage::ReachCube))
    }

    fn plan_stacking(&self, scene: &Scene) -> Result<Plan> {
        let x = scene.gripper.position();
        if super::success(scene) {
            return Ok(Plan {
                stage: Stage::Done,
                waypoint: x,
                grip: Fingers::Open,
            });
        }
        if scene.is_attached("cube") {
            let plate = scene.require("plate")?;
            let p = plate.pose.position;
            let z = plate.top() - scene.gripper.attach_offset[2] + self.config.place_clearance;
            return Ok(self.place(scene, [p[0], p[1], z], Stage::CarryToPlate));
        }
        Ok(self.reach(scene, Self::cube_grasp(scene)?, Stage::ReachCube))
    }

    fn plan_tool_using(&self, scene: &Scene) -> Result<Plan> {
        let x = scene.gripper.position();
        if super::success(scene) {
            return Ok(Plan {
                stage: Stage::Done,
                waypoint: x,
                grip: Fingers::Open,
            });
        }
        let line = scene
            .limits
            .reach_line
            .ok_or_else(|| Error::Config("tool_using scene without a reach line".into()))?;
        let fetch_x = line - FETCH_MARGIN;
        let cube = scene.require("cube")?;
        let fetched = cube.pose.position[0] <= fetch_x;

        if !fetched {
            if scene.is_attached("tool") {
                let tool = scene.require("tool")?;
                let hook_local = tool
                    .shape
                    .hook_point(CUBE_HALF)
                    .ok_or_else(|| Error::Config("tool has no hook point".into()))?;
                let hook = tool.pose.to_world(hook_local);
                let c = cube.center();
                let shift = |h: [f64; 3]| [x[0] + h[0] - hook[0], x[1] + h[1] - hook[1], x[2] + h[2] - hook[2]];
                if dist(hook, c) < self.config.close_tol {
                    return Ok(Plan {
                        stage: Stage::PullCube,
                        waypoint: shift([fetch_x - 0.015, hook[1], hook[2]]),
                        grip: Fingers::Closed,
                    });
                }
                return Ok(Plan {
                    stage: Stage::HookCube,
                    waypoint: shift(funnel(hook, c, self.config.approach_height)),
                    grip: Fingers::Closed,
                });
            }
            if let Some(id) = scene.gripper.attached {
                return Err(Error::ExpertFailure(format!(
                    "holding {:?} while the cube is out of reach",
                    scene.objects[id].name
                )));
            }
            let tool = scene.require("tool")?;
            let g = tool
                .grasp_point()
                .ok_or_else(|| Error::Config("tool has no grasp point".into()))?;
            return Ok(self.reach(scene, g, Stage::ReachTool));
        }

        if scene.is_attached("tool") {
            return Ok(Plan {
                stage: Stage::ReleaseTool,
                waypoint: x,
                grip: Fingers::Open,
            });
        }
        if scene.is_attached("cube") {
            let ring = scene.require("ring")?;
            let p = ring.pose.position;
            let z = scene.z0 - scene.gripper.attach_offset[2] + self.config.place_clearance;
            let mut plan = self.place(scene, [p[0], p[1], z], Stage::CarryToRing);
            if plan.grip == Fingers::Closed {
                // Clear the ring walls before descending into it.
                let h = ring.top() + 0.03 - scene.gripper.attach_offset[2];
                plan.waypoint = funnel(x, [p[0], p[1], z], h.max(self.config.approach_height));
            }
            return Ok(plan);
        }
        Ok(self.reach(scene, Self::cube_grasp(scene)?, Stage::ReachCube))
    }
}
