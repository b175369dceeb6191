//! Hand-eye action network and its baselines.
//!
//! A forward pass crops `N` random regions, reduces each to one 2D keypoint
//! with a shared conv net and a spatial softmax, lifts the keypoints to 3D
//! with the depth image, blends them into one attended point `x_kp` with a
//! softmax over learned region scores, and predicts an offset from `x_kp`
//! plus a gain. The end-effector moves by `k * (x_kp + x_offset - x_ee)`.

mod config;
mod model;
mod regions;

pub use config::{BackboneSpec, PolicyConfig, Variant};
pub use model::{Forward, Policy, Sample};
pub use regions::{gripper_patch, propose_regions, write_crop, RegionProposal};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::{CameraModel, Point3};
use crate::imageio::quantize_depth;
use crate::sim::{Fingers, Renderer, Scene, BACKGROUND_DEPTH};

/// What the policy sees at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Row-major `H x W x 3`.
    pub rgb: Vec<u8>,
    /// Camera-Z depth in meters, millimeter-quantized.
    pub depth: Vec<f32>,
    pub camera: CameraModel,
    pub x_ee: Point3,
    pub fingers: Fingers,
    /// Ground-truth object centers, in scene order. Only the state baseline
    /// reads these.
    pub object_positions: Option<Vec<[f64; 3]>>,
}

impl Observation {
    /// Renders `scene` and packages it with the proprioceptive state.
    pub fn capture(scene: &Scene, renderer: &Renderer) -> Self {
        let out = renderer.render(scene);
        Self {
            rgb: out.rgb,
            depth: quantize_depth(&out.depth),
            camera: out.camera,
            x_ee: scene.gripper.x_ee,
            fingers: scene.gripper.fingers,
            object_positions: Some(scene.objects.iter().map(|o| o.center()).collect()),
        }
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height() * self.width();
        if self.rgb.len() != 3 * n || self.depth.len() != n {
            return Err(config_err!(
                "observation buffers ({} rgb, {} depth) do not match the {}x{} camera",
                self.rgb.len(),
                self.depth.len(),
                self.height(),
                self.width()
            ));
        }
        Ok(())
    }
}

/// Everything one forward pass exposes, in robot-frame meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub variant: Variant,
    pub regions: Vec<RegionProposal>,
    /// Global `(u, v)` keypoint per region.
    pub candidate_pixels: Vec<[f64; 2]>,
    pub candidate_kps: Vec<Point3>,
    /// Keypoints whose depth lookup hit the far plane.
    pub background: Vec<bool>,
    pub confidences: Vec<f64>,
    pub x_kp: Option<Point3>,
    pub x_offset: Option<[f64; 3]>,
    pub k: Option<f64>,
    pub grip_logit: f64,
    /// `x_kp + x_offset - x_ee`.
    pub x_target: Option<[f64; 3]>,
    /// `(dx, dy, dz, grip)`.
    pub action: [f64; 4],
}

impl PolicyOutput {
    /// Absolute point the action heads for, `x_kp + x_offset`.
    pub fn target_location(&self) -> Option<[f64; 3]> {
        let kp = self.x_kp?.to_array();
        let off = self.x_offset?;
        Some([kp[0] + off[0], kp[1] + off[1], kp[2] + off[2]])
    }

    /// Index of the highest-confidence region.
    pub fn top_region(&self) -> Option<usize> {
        self.confidences
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Squashes raw head outputs `(offset[3], gain, grip)` into the constrained
/// offset and gain. `no_con` passes them through.
pub fn action_target(raw: [f64; 5], offset_bound: f64, variant: Variant) -> ([f64; 3], f64, f64) {
    if variant == Variant::NoCon {
        return ([raw[0], raw[1], raw[2]], raw[3], raw[4]);
    }
    let off = [raw[0], raw[1], raw[2]].map(|r| offset_bound * r.tanh());
    (off, sigmoid(raw[3]), raw[4])
}

/// `a = (k (x_kp + x_offset - x_ee), grip_logit)`.
pub fn compose_action(x_kp: [f64; 3], x_offset: [f64; 3], k: f64, x_ee: [f64; 3], grip_logit: f64) -> [f64; 4] {
    let t = target_vector(x_kp, x_offset, x_ee);
    [k * t[0], k * t[1], k * t[2], grip_logit]
}

pub fn target_vector(x_kp: [f64; 3], x_offset: [f64; 3], x_ee: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| x_kp[i] + x_offset[i] - x_ee[i])
}

/// Softmax over region scores and the confidence-weighted candidate mean.
pub fn switch_attention(scores: &[f64], candidates: &[[f64; 3]]) -> (Vec<f64>, [f64; 3]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let c: Vec<f64> = e.iter().map(|x| x / z).collect();
    let mut kp = [0.0; 3];
    for (ci, p) in c.iter().zip(candidates) {
        for k in 0..3 {
            kp[k] += ci * p[k];
        }
    }
    (c, kp)
}

/// Depth at the pixel nearest to `(u, v)`, plus whether it is the far-plane
/// sentinel.
pub fn depth_lookup(depth: &[f32], camera: &CameraModel, u: f64, v: f64) -> (f64, bool) {
    let r = (u.round().max(0.0) as usize).min(camera.height - 1);
    let c = (v.round().max(0.0) as usize).min(camera.width - 1);
    let d = depth[r * camera.width + c] as f64;
    (d, d >= BACKGROUND_DEPTH as f64 * 0.999)
}

/// Global keypoints to robot-frame points using nearest-pixel depth.
pub fn lift_to_3d(kps: &[[f64; 2]], depth: &[f32], camera: &CameraModel) -> Vec<(Point3, bool)> {
    kps.iter()
        .map(|&[u, v]| {
            let (d, bg) = depth_lookup(depth, camera, u, v);
            let (m, b) = camera.lift_coefficients(d);
            let p = [0, 1, 2].map(|k| m[2 * k] * u + m[2 * k + 1] * v + b[k]);
            (Point3::robot(p[0], p[1], p[2]), bg)
        })
        .collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests;
