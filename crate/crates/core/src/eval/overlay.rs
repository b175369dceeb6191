use std::path::{Path, PathBuf};

use crate::error::{usage_err, Result};
use crate::geometry::{CameraModel, Pixel, Point3};
use crate::han::PolicyOutput;
use crate::imageio::save_rgb;

use super::Rollout;

/// Upscaling applied to frames before drawing.
pub const OVERLAY_SCALE: usize = 4;

const BLUE: [u8; 3] = [30, 90, 255];
const YELLOW: [u8; 3] = [255, 225, 0];
const RED: [u8; 3] = [235, 20, 20];

/// An upscaled RGB frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl Overlay {
    fn upscale(rgb: &[u8], h: usize, w: usize, scale: usize) -> Self {
        let (oh, ow) = (h * scale, w * scale);
        let mut out = vec![0u8; oh * ow * 3];
        for r in 0..oh {
            for c in 0..ow {
                let src = ((r / scale) * w + c / scale) * 3;
                out[(r * ow + c) * 3..][..3].copy_from_slice(&rgb[src..src + 3]);
            }
        }
        Self {
            height: oh,
            width: ow,
            rgb: out,
        }
    }

    fn put(&mut self, r: i64, c: i64, color: [u8; 3]) {
        if r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width {
            let i = (r as usize * self.width + c as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&color);
        }
    }

    /// Filled disk of `radius` around the rounded center.
    fn disk(&mut self, center: (f64, f64), radius: i64, color: [u8; 3]) {
        let (r0, c0) = (center.0.round() as i64, center.1.round() as i64);
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                if dr * dr + dc * dc <= radius * radius {
                    self.put(r0 + dr, c0 + dc, color);
                }
            }
        }
    }

    fn rect_outline(&mut self, top: i64, left: i64, bottom: i64, right: i64, color: [u8; 3]) {
        for c in left..=right {
            self.put(top, c, color);
            self.put(bottom, c, color);
        }
        for r in top..=bottom {
            self.put(r, left, color);
            self.put(r, right, color);
        }
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Position in an overlay upscaled by `scale` of the source pixel `(u, v)`.
pub fn marker_center(px: &Pixel, scale: usize) -> (f64, f64) {
    let s = scale as f64;
    ((px.u + 0.5) * s - 0.5, (px.v + 0.5) * s - 0.5)
}

fn project(camera: &CameraModel, p: [f64; 3]) -> Option<Pixel> {
    camera.project(Point3::robot(p[0], p[1], p[2])).ok()
}

/// Draws candidate keypoints in blue, the target location in yellow and the
/// outline of the most confident region in red.
pub fn draw_overlay(rgb: &[u8], camera: &CameraModel, output: Option<&PolicyOutput>, scale: usize) -> Result<Overlay> {
    let (h, w) = (camera.height, camera.width);
    if rgb.len() != h * w * 3 || scale == 0 {
        return Err(usage_err!(
            "frame of {} bytes does not match a {h}x{w} camera",
            rgb.len()
        ));
    }
    let mut img = Overlay::upscale(rgb, h, w, scale);
    let Some(out) = output else {
        return Ok(img);
    };
    let s = scale as i64;
    if let Some(i) = out.top_region() {
        if let Some(reg) = out.regions.get(i) {
            let (r0, c0) = (reg.origin.0 as i64 * s, reg.origin.1 as i64 * s);
            let (rh, rw) = (reg.size.0 as i64 * s, reg.size.1 as i64 * s);
            img.rect_outline(r0, c0, r0 + rh - 1, c0 + rw - 1, RED);
        }
    }
    let radius = (s / 2).max(1);
    for kp in &out.candidate_kps {
        if let Some(px) = project(camera, kp.to_array()) {
            img.disk(marker_center(&px, scale), radius, BLUE);
        }
    }
    if let Some(t) = out.target_location().and_then(|t| project(camera, t)) {
        img.disk(marker_center(&t, scale), radius + 1, YELLOW);
    }
    Ok(img)
}

/// Writes one numbered PNG per rollout step into `dir`. The rollout must
/// have been recorded with frames kept.
pub fn export_overlays(rollout: &Rollout, dir: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(rollout.len());
    for s in &rollout.steps {
        let rgb = s
            .rgb
            .as_ref()
            .ok_or_else(|| usage_err!("rollout was recorded without frames"))?;
        let img = draw_overlay(rgb, &rollout.camera, s.output.as_ref(), scale)?;
        let path = dir.join(format!("frame_{:04}.png", s.step));
        save_rgb(&path, img.height, img.width, &img.rgb)?;
        paths.push(path);
    }
    Ok(paths)
}
