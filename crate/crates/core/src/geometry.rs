//! Pinhole camera model and rigid transforms.
//!
//! Conventions: the camera frame has +Z forward, +X right and +Y down.
//! Pixels are `(u, v) = (row, col)` with integer values at pixel centers.
//! The robot frame has its origin at the table center on the table surface,
//! +Z up.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Camera,
    Robot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub frame: Frame,
}

impl Point3 {
    pub fn robot(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            frame: Frame::Robot,
        }
    }

    pub fn camera(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            frame: Frame::Camera,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        dist(self.to_array(), other.to_array())
    }
}

/// Continuous pixel location, optionally with metric depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
    pub depth: Option<f64>,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v, depth: None }
    }

    pub fn with_depth(u: f64, v: f64, depth: f64) -> Self {
        Self {
            u,
            v,
            depth: Some(depth),
        }
    }
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Rotation plus translation, mapping source-frame points `p` to `R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation about +Z by `yaw` radians followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: t,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// `R^T (p - t)`.
    pub fn apply_inverse(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// Checks orthonormality and `det(R) = +1` to within `1e-9`.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(config_err!("extrinsic rotation is not orthonormal"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(config_err!("extrinsic rotation has determinant {det}, expected +1"));
        }
        if self.translation.iter().any(|x| !x.is_finite()) {
            return Err(config_err!("extrinsic translation is not finite"));
        }
        Ok(())
    }
}

/// Pinhole intrinsics plus the camera-to-robot extrinsic transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera frame -> robot frame.
    pub extrinsic: RigidTransform,
    pub height: usize,
    pub width: usize,
}

/// Distance from the front-view camera to the table center, meters.
pub const FRONT_CAMERA_DISTANCE: f64 = 1.2;
/// Downward pitch of the front-view camera.
pub const FRONT_CAMERA_PITCH_DEG: f64 = 45.0;

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: RigidTransform,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            extrinsic,
            height,
            width,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(config_err!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx,
                self.fy
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(config_err!("image dims must be nonzero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(config_err!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx,
                self.cy,
                self.height,
                self.width
            ));
        }
        self.extrinsic.validate()
    }

    /// The simulator's fixed camera: in front of the table on the +X side,
    /// looking at the table center from `FRONT_CAMERA_DISTANCE` meters with a
    /// `FRONT_CAMERA_PITCH_DEG` downward pitch.
    pub fn front_view(height: usize, width: usize) -> Self {
        let pitch = FRONT_CAMERA_PITCH_DEG.to_radians();
        let (s, c) = pitch.sin_cos();
        let center = [FRONT_CAMERA_DISTANCE * c, 0.0, FRONT_CAMERA_DISTANCE * s];
        let forward = [-c, 0.0, -s];
        let right = [0.0, 1.0, 0.0];
        // down = forward x right
        let down = [
            forward[1] * right[2] - forward[2] * right[1],
            forward[2] * right[0] - forward[0] * right[2],
            forward[0] * right[1] - forward[1] * right[0],
        ];
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        let f = 1.6 * width as f64;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            extrinsic: RigidTransform {
                rotation,
                translation: center,
            },
            height,
            width,
        }
    }

    /// Camera center in the robot frame.
    pub fn center(&self) -> [f64; 3] {
        self.extrinsic.translation
    }

    /// Pixel with depth -> camera-frame point.
    pub fn unproject(&self, px: Pixel) -> Result<Point3> {
        let d = px
            .depth
            .ok_or_else(|| usage_err!("unproject needs a pixel with depth"))?;
        if !(d > 0.0) {
            return Err(Error::InvalidDepth(d));
        }
        Ok(Point3::camera(
            (px.v - self.cx) * d / self.fx,
            (px.u - self.cy) * d / self.fy,
            d,
        ))
    }

    pub fn cam_to_robot(&self, p: Point3) -> Result<Point3> {
        if p.frame != Frame::Camera {
            return Err(usage_err!(
                "cam_to_robot expects a camera-frame point, got {:?}",
                p.frame
            ));
        }
        let [x, y, z] = self.extrinsic.apply(p.to_array());
        Ok(Point3::robot(x, y, z))
    }

    pub fn robot_to_cam(&self, p: Point3) -> Result<Point3> {
        if p.frame != Frame::Robot {
            return Err(usage_err!(
                "robot_to_cam expects a robot-frame point, got {:?}",
                p.frame
            ));
        }
        let [x, y, z] = self.extrinsic.apply_inverse(p.to_array());
        Ok(Point3::camera(x, y, z))
    }

    /// Robot-frame point -> continuous pixel with depth.
    pub fn project(&self, p: Point3) -> Result<Pixel> {
        let c = self.robot_to_cam(p)?;
        if !(c.z > 0.0) {
            return Err(Error::BehindCamera(c.z));
        }
        Ok(Pixel::with_depth(
            self.cy + self.fy * c.y / c.z,
            self.cx + self.fx * c.x / c.z,
            c.z,
        ))
    }

    /// Unit ray direction (robot frame) through pixel `(u, v)`, together with
    /// the camera-Z component of that unit vector, so a hit at ray distance
    /// `s` has depth `s * dz`.
    pub fn ray(&self, u: f64, v: f64) -> ([f64; 3], f64) {
        let dc = [(v - self.cx) / self.fx, (u - self.cy) / self.fy, 1.0];
        let n = (dc[0] * dc[0] + dc[1] * dc[1] + 1.0).sqrt();
        let dir = self.extrinsic.rotate([dc[0] / n, dc[1] / n, dc[2] / n]);
        (dir, 1.0 / n)
    }

    /// Coefficients of the affine map `(u, v) -> robot point` at fixed depth
    /// `d`: returns a row-major 3x2 matrix over `(u, v)` and the offset.
    pub fn lift_coefficients(&self, d: f64) -> ([f64; 6], [f64; 3]) {
        let r = &self.extrinsic.rotation;
        let t = &self.extrinsic.translation;
        let (ku, kv) = (d / self.fy, d / self.fx);
        let mut m = [0.0; 6];
        let mut b = [0.0; 3];
        for k in 0..3 {
            m[2 * k] = r[k][1] * ku;
            m[2 * k + 1] = r[k][0] * kv;
            b[k] = -r[k][0] * self.cx * kv - r[k][1] * self.cy * ku + r[k][2] * d + t[k];
        }
        (m, b)
    }
}

/// Crop-relative keypoint -> global pixel coordinates.
pub fn region_to_global(crop_origin: (usize, usize), local: (f64, f64)) -> (f64, f64) {
    (crop_origin.0 as f64 + local.0, crop_origin.1 as f64 + local.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simple_cam(ext: RigidTransform) -> CameraModel {
        CameraModel::new(100.0, 100.0, 80.0, 60.0, ext, 120, 160).unwrap()
    }

    #[test]
    fn unproject_principal_point() {
        let cam = simple_cam(RigidTransform::identity());
        let p = cam.unproject(Pixel::with_depth(60.0, 80.0, 0.5)).unwrap();
        assert_eq!(p.to_array(), [0.0, 0.0, 0.5]);
        assert_eq!(p.frame, Frame::Camera);
    }

    #[test]
    fn unproject_hand_evaluated() {
        let cam = simple_cam(RigidTransform::identity());
        let p = cam.unproject(Pixel::with_depth(60.0, 180.0, 1.0)).unwrap();
        assert_eq!(p.to_array(), [1.0, 0.0, 1.0]);
    }

    #[test]
    fn unproject_rejects_nonpositive_depth() {
        let cam = simple_cam(RigidTransform::identity());
        assert!(matches!(
            cam.unproject(Pixel::with_depth(1.0, 1.0, 0.0)),
            Err(Error::InvalidDepth(_))
        ));
        assert!(matches!(
            cam.unproject(Pixel::with_depth(1.0, 1.0, -2.0)),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn cam_to_robot_cases() {
        let p = Point3::camera(0.3, -0.2, 1.7);
        let cam = simple_cam(RigidTransform::identity());
        assert_eq!(cam.cam_to_robot(p).unwrap().to_array(), p.to_array());

        let cam = simple_cam(RigidTransform::translation([1.0, 0.0, 0.0]));
        assert_eq!(
            cam.cam_to_robot(Point3::camera(0.0, 0.0, 1.0)).unwrap().to_array(),
            [1.0, 0.0, 1.0]
        );

        // 90 degree yaw: R = [[0,-1,0],[1,0,0],[0,0,1]], t = (0.5, 0, 0);
        // (1, 2, 3) -> (-2 + 0.5, 1, 3).
        let cam = simple_cam(RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, [0.5, 0.0, 0.0]));
        let q = cam.cam_to_robot(Point3::camera(1.0, 2.0, 3.0)).unwrap().to_array();
        for (a, b) in q.iter().zip([-1.5, 1.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_tags_are_enforced() {
        let cam = simple_cam(RigidTransform::identity());
        assert!(matches!(
            cam.cam_to_robot(Point3::robot(0.0, 0.0, 1.0)),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            cam.project(Point3::camera(0.0, 0.0, 1.0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn project_cases() {
        let cam = simple_cam(RigidTransform::identity());
        let px = cam.project(Point3::robot(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((px.u, px.v, px.depth), (60.0, 80.0, Some(2.0)));
        // u = 60 + 100 * (-0.1) / 2 = 55, v = 80 + 100 * 0.2 / 2 = 90
        let px = cam.project(Point3::robot(0.2, -0.1, 2.0)).unwrap();
        assert!((px.u - 55.0).abs() < 1e-12 && (px.v - 90.0).abs() < 1e-12);
        assert!(matches!(
            cam.project(Point3::robot(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera(_))
        ));

        // Front-view camera looks at the table center: it lands on the principal point.
        let cam = CameraModel::front_view(60, 80);
        cam.validate().unwrap();
        let px = cam.project(Point3::robot(0.0, 0.0, 0.0)).unwrap();
        assert!((px.u - cam.cy).abs() < 1e-9 && (px.v - cam.cx).abs() < 1e-9);
        assert!((px.depth.unwrap() - FRONT_CAMERA_DISTANCE).abs() < 1e-12);
    }

    #[test]
    fn front_view_axes_follow_row_col_convention() {
        let cam = CameraModel::front_view(60, 80);
        // +Y (robot) appears to the right (larger column); points nearer the
        // camera (+X) appear lower in the image (larger row).
        let c = cam.project(Point3::robot(0.0, 0.0, 0.0)).unwrap();
        let right = cam.project(Point3::robot(0.0, 0.1, 0.0)).unwrap();
        let near = cam.project(Point3::robot(0.1, 0.0, 0.0)).unwrap();
        assert!(right.v > c.v && (right.u - c.u).abs() < 1.0);
        assert!(near.u > c.u);
    }

    #[test]
    fn invalid_cameras_rejected() {
        let bad_rot = RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
            translation: [0.0; 3],
        };
        assert!(CameraModel::new(100.0, 100.0, 80.0, 60.0, bad_rot, 120, 160).is_err());
        assert!(CameraModel::new(0.0, 100.0, 80.0, 60.0, RigidTransform::identity(), 120, 160).is_err());
        assert!(CameraModel::new(100.0, 100.0, 160.0, 60.0, RigidTransform::identity(), 120, 160).is_err());
    }

    #[test]
    fn region_to_global_cases() {
        assert_eq!(region_to_global((0, 0), (3.5, 7.25)), (3.5, 7.25));
        assert_eq!(region_to_global((10, 20), (5.0, 5.0)), (15.0, 25.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let o = (rng.random_range(0..100usize), rng.random_range(0..100usize));
            let l = (rng.random_range(0.0..20.0), rng.random_range(0.0..26.0));
            let (u, v) = region_to_global(o, l);
            assert_eq!((u, v), (o.0 as f64 + l.0, o.1 as f64 + l.1));
        }
    }

    #[test]
    fn lift_coefficients_match_unproject_then_transform() {
        let cam = CameraModel::front_view(60, 80);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (u, v, d) = (
                rng.random_range(0.0..59.0),
                rng.random_range(0.0..79.0),
                rng.random_range(0.1..5.0),
            );
            let p = cam
                .cam_to_robot(cam.unproject(Pixel::with_depth(u, v, d)).unwrap())
                .unwrap();
            let (m, b) = cam.lift_coefficients(d);
            for k in 0..3 {
                let q = m[2 * k] * u + m[2 * k + 1] * v + b[k];
                assert!((q - p.to_array()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ray_hits_unprojected_point() {
        let cam = CameraModel::front_view(60, 80);
        let (dir, dz) = cam.ray(12.0, 55.0);
        let d = 0.9;
        let s = d / dz;
        let c = cam.center();
        let hit = [c[0] + s * dir[0], c[1] + s * dir[1], c[2] + s * dir[2]];
        let p = cam
            .cam_to_robot(cam.unproject(Pixel::with_depth(12.0, 55.0, d)).unwrap())
            .unwrap();
        assert!(dist(hit, p.to_array()) < 1e-12);
    }

    #[test]
    fn ten_thousand_round_trips_within_1e9() {
        let cams = [
            CameraModel::front_view(60, 80),
            CameraModel::front_view(120, 160),
            simple_cam(RigidTransform::from_yaw(0.7, [0.1, -0.3, 0.4])),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..10_000 {
            let cam = &cams[i % cams.len()];
            let px = Pixel::with_depth(
                rng.random_range(0.0..(cam.height - 1) as f64),
                rng.random_range(0.0..(cam.width - 1) as f64),
                rng.random_range(0.1..5.0),
            );
            let back = cam
                .project(cam.cam_to_robot(cam.unproject(px).unwrap()).unwrap())
                .unwrap();
            assert!((back.u - px.u).abs() < 1e-9);
            assert!((back.v - px.v).abs() < 1e-9);
            assert!((back.depth.unwrap() - px.depth.unwrap()).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn rigid_transforms_preserve_distances(
            yaw in -3.2f64..3.2, tx in -2.0f64..2.0, ty in -2.0f64..2.0,
            a in prop::array::uniform3(-3.0f64..3.0), b in prop::array::uniform3(-3.0f64..3.0),
        ) {
            let t = RigidTransform::from_yaw(yaw, [tx, ty, 0.5]);
            let front = CameraModel::front_view(60, 80).extrinsic;
            for tr in [t, front] {
                let (pa, pb) = (tr.apply(a), tr.apply(b));
                prop_assert!((dist(pa, pb) - dist(a, b)).abs() < 1e-9);
                let back = tr.apply_inverse(pa);
                prop_assert!(dist(back, a) < 1e-9);
            }
        }
    }
}
