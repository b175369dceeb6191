//! Closed-loop rollouts, success-rate reports, attention diagnostics and
//! overlay export.

mod attention;
mod overlay;
mod report;

pub use attention::{attention_diagnostics, stage_target, AttentionReport, StageStats, SwitchEvent, SWITCH_WINDOW};
pub use overlay::{draw_overlay, export_overlays, marker_center, Overlay, OVERLAY_SCALE};
pub use report::{evaluate, render_table, rollout_seed, EvalCell, EvalGrid, EvalReport, TableEntry};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Real;
use crate::error::Result;
use crate::geometry::CameraModel;
use crate::han::{Observation, Policy, PolicyOutput};
use crate::sim::{
    reset, step, success, Action, Fingers, RegionKind, Renderer, Scene, ScriptedExpert, TaskId, TaskSpec,
};

/// Anything that maps the current scene and observation to an action.
pub trait Controller {
    /// Returns `(dx, dy, dz, grip)` and, for learned policies, the forward
    /// pass that produced it.
    fn act(&mut self, scene: &Scene, obs: &Observation) -> Result<([f64; 4], Option<PolicyOutput>)>;
}

/// A policy with its own region-sampling stream.
pub struct PolicyController<'a, T: Real> {
    pub policy: &'a Policy<T>,
    rng: ChaCha8Rng,
}

/// Salt separating the region stream of a rollout from its scene seed.
const REGION_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl<'a, T: Real> PolicyController<'a, T> {
    pub fn new(policy: &'a Policy<T>, seed: u64) -> Self {
        Self {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed ^ REGION_STREAM),
        }
    }
}

impl<T: Real> Controller for PolicyController<'_, T> {
    fn act(&mut self, _scene: &Scene, obs: &Observation) -> Result<([f64; 4], Option<PolicyOutput>)> {
        let out = self.policy.forward(obs, &mut self.rng)?;
        Ok((out.action, Some(out)))
    }
}

/// The scripted expert seen through the controller interface; it reads the
/// true scene state.
pub struct ExpertController(pub ScriptedExpert);

impl Controller for ExpertController {
    fn act(&mut self, scene: &Scene, _obs: &Observation) -> Result<([f64; 4], Option<PolicyOutput>)> {
        Ok((self.0.act(scene)?.to_vec4(), None))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub x_ee: [f64; 3],
    pub fingers: Fingers,
    /// Index of the held object.
    pub attached: Option<usize>,
    /// Object centers before the action.
    pub objects: Vec<[f64; 3]>,
    pub action: [f64; 4],
    pub output: Option<PolicyOutput>,
    /// Rendered frame, kept only when requested.
    #[serde(skip)]
    pub rgb: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub task: TaskId,
    pub region: RegionKind,
    pub seed: u64,
    pub success: bool,
    /// Why the rollout was cut short, if it was.
    pub failure: Option<String>,
    pub camera: CameraModel,
    pub object_names: Vec<String>,
    pub steps: Vec<StepRecord>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RolloutOptions {
    /// Defaults to the task's episode limit.
    pub max_steps: Option<usize>,
    pub keep_frames: bool,
}

/// Runs `controller` from the seeded reset of `task` in `region` until
/// success or the step limit. A non-finite action ends the rollout as a
/// failure.
pub fn rollout_with(
    controller: &mut dyn Controller,
    task: TaskId,
    region: RegionKind,
    seed: u64,
    camera: CameraModel,
    options: RolloutOptions,
) -> Result<Rollout> {
    let spec = TaskSpec::new(task);
    let max_steps = options.max_steps.unwrap_or(spec.max_steps);
    let mut scene = reset(&spec, region, seed)?;
    let renderer = Renderer::new(camera);
    let mut out = Rollout {
        task,
        region,
        seed,
        success: false,
        failure: None,
        camera,
        object_names: scene.objects.iter().map(|o| o.name.clone()).collect(),
        steps: Vec::new(),
    };
    while out.steps.len() < max_steps {
        if success(&scene) {
            out.success = true;
            return Ok(out);
        }
        let obs = Observation::capture(&scene, &renderer);
        let (action, output) = controller.act(&scene, &obs)?;
        out.steps.push(StepRecord {
            step: out.steps.len(),
            x_ee: scene.gripper.position(),
            fingers: scene.gripper.fingers,
            attached: scene.gripper.attached,
            objects: scene.objects.iter().map(|o| o.center()).collect(),
            action,
            output,
            rgb: options.keep_frames.then_some(obs.rgb),
        });
        if action.iter().any(|a| !a.is_finite()) {
            out.failure = Some(format!("non-finite action {action:?} at step {}", out.steps.len() - 1));
            return Ok(out);
        }
        step(&mut scene, &Action::from_vec4(action));
    }
    out.success = success(&scene);
    Ok(out)
}

/// Rolls out `policy` with the camera matching its input resolution.
pub fn rollout<T: Real>(
    policy: &Policy<T>,
    task: TaskId,
    region: RegionKind,
    seed: u64,
    max_steps: Option<usize>,
) -> Result<Rollout> {
    let (h, w) = policy.config.image;
    let mut c = PolicyController::new(policy, seed);
    rollout_with(
        &mut c,
        task,
        region,
        seed,
        CameraModel::front_view(h, w),
        RolloutOptions {
            max_steps,
            keep_frames: false,
        },
    )
}
