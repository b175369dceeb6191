use crate::geometry::CameraModel;

use super::scene::{Fingers, Part, Pose, Scene};

/// Depth reported for pixels that see nothing (far plane).
pub const BACKGROUND_DEPTH: f32 = 10.0;

pub const LABEL_TABLE: i32 = -1;
pub const LABEL_BACKGROUND: i32 = -2;
pub const LABEL_GRIPPER: i32 = -3;

const BACKGROUND_COLOR: [u8; 3] = [28, 30, 36];
const TABLE_COLOR: [u8; 3] = [186, 176, 160];
const LINE_COLOR: [u8; 3] = [240, 240, 240];
const GRIPPER_COLOR: [u8; 3] = [215, 215, 222];
const AMBIENT: f64 = 0.45;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// Row-major `H x W x 3`.
    pub rgb: Vec<u8>,
    /// Camera-Z depth in meters, `BACKGROUND_DEPTH` where nothing is hit.
    pub depth: Vec<f32>,
    /// Per-pixel object id, or one of the `LABEL_*` constants.
    pub labels: Vec<i32>,
    pub camera: CameraModel,
}

impl RenderOutput {
    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }
}

/// World-frame gripper geometry: a palm above `x_ee` and two fingers
/// straddling it.
pub fn gripper_parts(x_ee: [f64; 3], fingers: Fingers) -> [Part; 3] {
    let spread = match fingers {
        Fingers::Open => 0.045,
        Fingers::Closed => 0.031,
    };
    let at = |dx: f64, dy: f64, dz: f64| [x_ee[0] + dx, x_ee[1] + dy, x_ee[2] + dz];
    [
        Part::Box {
            center: at(0.0, 0.0, 0.05),
            half: [0.012, spread + 0.006, 0.008],
        },
        Part::Box {
            center: at(0.0, spread, 0.015),
            half: [0.008, 0.005, 0.028],
        },
        Part::Box {
            center: at(0.0, -spread, 0.015),
            half: [0.008, 0.005, 0.028],
        },
    ]
}

/// Ray hit: distance along the ray and the outward surface normal (in the
/// frame the ray was given in).
fn intersect(part: &Part, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    match *part {
        Part::Box { center, half } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut normal = [0.0; 3];
            for k in 0..3 {
                let lo = center[k] - half[k] - o[k];
                let hi = center[k] + half[k] - o[k];
                if d[k].abs() < 1e-15 {
                    if lo > 0.0 || hi < 0.0 {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = (lo / d[k], hi / d[k]);
                let mut sign = -1.0;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                    sign = 1.0;
                }
                if t0 > t_near {
                    t_near = t0;
                    normal = [0.0; 3];
                    normal[k] = sign;
                }
                t_far = t_far.min(t1);
            }
            (t_near <= t_far && t_near > 1e-9).then_some((t_near, normal))
        }
        Part::Cylinder {
            center,
            radius,
            half_height,
        } => {
            let mut best: Option<(f64, [f64; 3])> = None;
            let mut consider = |t: f64, n: [f64; 3]| {
                if t > 1e-9 && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, n));
                }
            };
            let (px, py) = (o[0] - center[0], o[1] - center[1]);
            let a = d[0] * d[0] + d[1] * d[1];
            if a > 1e-15 {
                let b = 2.0 * (px * d[0] + py * d[1]);
                let c = px * px + py * py - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                        let z = o[2] + t * d[2];
                        if (z - center[2]).abs() <= half_height {
                            let (x, y) = (px + t * d[0], py + t * d[1]);
                            consider(t, [x / radius, y / radius, 0.0]);
                        }
                    }
                }
            }
            if d[2].abs() > 1e-15 {
                for (cap, nz) in [(center[2] + half_height, 1.0), (center[2] - half_height, -1.0)] {
                    let t = (cap - o[2]) / d[2];
                    let (x, y) = (px + t * d[0], py + t * d[1]);
                    if x * x + y * y <= radius * radius {
                        consider(t, [0.0, 0.0, nz]);
                    }
                }
            }
            best
        }
    }
}

/// Precomputed per-pixel rays for a fixed camera.
#[derive(Clone, Debug)]
pub struct Renderer {
    camera: CameraModel,
    rays: Vec<([f64; 3], f64)>,
    light: [f64; 3],
    pub show_gripper: bool,
}

impl Renderer {
    pub fn new(camera: CameraModel) -> Self {
        let rays = (0..camera.height)
            .flat_map(|u| (0..camera.width).map(move |v| (u, v)))
            .map(|(u, v)| camera.ray(u as f64, v as f64))
            .collect();
        let l: [f64; 3] = [0.5, 0.3, 1.0];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        Self {
            camera,
            rays,
            light: [l[0] / n, l[1] / n, l[2] / n],
            show_gripper: true,
        }
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    fn shade(&self, color: [u8; 3], n: [f64; 3]) -> [u8; 3] {
        let lambert = (n[0] * self.light[0] + n[1] * self.light[1] + n[2] * self.light[2]).max(0.0);
        let s = AMBIENT + (1.0 - AMBIENT) * lambert;
        color.map(|c| (c as f64 * s).round().min(255.0) as u8)
    }

    pub fn render(&self, scene: &Scene) -> RenderOutput {
        let origin = self.camera.center();
        let n = self.rays.len();
        let mut out = RenderOutput {
            rgb: vec![0; n * 3],
            depth: vec![BACKGROUND_DEPTH; n],
            labels: vec![LABEL_BACKGROUND; n],
            camera: self.camera,
        };

        // Object parts with their poses, resolved once per frame.
        let mut solids: Vec<(i32, Pose, Part, [u8; 3])> = Vec::new();
        for o in &scene.objects {
            for p in o.shape.parts() {
                solids.push((o.id as i32, o.pose, p, o.color));
            }
        }
        if self.show_gripper {
            let identity = Pose {
                position: [0.0; 3],
                yaw: 0.0,
            };
            for p in gripper_parts(scene.gripper.position(), scene.gripper.fingers) {
                solids.push((LABEL_GRIPPER, identity, p, GRIPPER_COLOR));
            }
        }
        let locals: Vec<[f64; 3]> = solids.iter().map(|(_, pose, _, _)| pose.to_local(origin)).collect();

        for (i, &(dir, dz)) in self.rays.iter().enumerate() {
            let mut best_t = f64::INFINITY;
            let mut hit: Option<(i32, [u8; 3], [f64; 3])> = None;

            if dir[2] < 0.0 {
                let t = (scene.z0 - origin[2]) / dir[2];
                let x = origin[0] + t * dir[0];
                let y = origin[1] + t * dir[1];
                if x.abs() <= scene.table_half && y.abs() <= scene.table_half {
                    best_t = t;
                    let on_line = scene.limits.reach_line.is_some_and(|l| (x - l).abs() < 0.006);
                    let color = if on_line { LINE_COLOR } else { TABLE_COLOR };
                    hit = Some((LABEL_TABLE, color, [0.0, 0.0, 1.0]));
                }
            }
            for (k, (label, pose, part, color)) in solids.iter().enumerate() {
                let d_local = pose.rotate_to_local(dir);
                if let Some((t, n)) = intersect(part, locals[k], d_local) {
                    if t < best_t {
                        best_t = t;
                        hit = Some((*label, *color, pose.rotate_to_world(n)));
                    }
                }
            }
            let px = match hit {
                Some((label, color, normal)) => {
                    out.depth[i] = (best_t * dz) as f32;
                    out.labels[i] = label;
                    self.shade(color, normal)
                }
                None => BACKGROUND_COLOR,
            };
            out.rgb[3 * i..3 * i + 3].copy_from_slice(&px);
        }
        out
    }
}
