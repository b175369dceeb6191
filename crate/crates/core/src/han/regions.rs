use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Real;
use crate::error::{config_err, Result};
use crate::geometry::{CameraModel, Point3};

use super::config::PolicyConfig;

/// Fixed-size crop, `origin = (row, col)` of its top-left pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub origin: (usize, usize),
    pub size: (usize, usize),
}

impl RegionProposal {
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.origin.0 + self.size.0 <= height && self.origin.1 + self.size.1 <= width
    }

    pub fn whole_image(height: usize, width: usize) -> Self {
        Self {
            origin: (0, 0),
            size: (height, width),
        }
    }
}

/// `N` crop origins drawn uniformly over all placements inside the image.
pub fn propose_regions(rng: &mut impl Rng, config: &PolicyConfig) -> Result<Vec<RegionProposal>> {
    let (h, w) = config.image;
    let (ch, cw) = config.crop;
    if ch > h || cw > w {
        return Err(config_err!("crop {ch}x{cw} larger than the {h}x{w} image"));
    }
    Ok((0..config.n_regions)
        .map(|_| RegionProposal {
            origin: (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw)),
            size: (ch, cw),
        })
        .collect())
}

/// Crop centered on the projected gripper position, shifted to stay inside
/// the image.
pub fn gripper_patch(camera: &CameraModel, x_ee: [f64; 3], crop: (usize, usize)) -> RegionProposal {
    let (h, w) = (camera.height, camera.width);
    let center = camera
        .project(Point3::robot(x_ee[0], x_ee[1], x_ee[2]))
        .map(|p| (p.u, p.v))
        .unwrap_or(((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0));
    let place = |c: f64, size: usize, limit: usize| {
        let start = (c - (size as f64 - 1.0) / 2.0).round();
        start.clamp(0.0, (limit - size) as f64) as usize
    };
    RegionProposal {
        origin: (place(center.0, crop.0, h), place(center.1, crop.1, w)),
        size: crop,
    }
}

/// Copies a crop of an interleaved `H x W x 3` byte image into planar
/// `3 x h x w` values scaled to `[-0.5, 0.5]`.
pub fn write_crop<T: Real>(rgb: &[u8], width: usize, region: &RegionProposal, out: &mut [T]) {
    let (ch, cw) = region.size;
    let (r0, c0) = region.origin;
    let plane = ch * cw;
    for i in 0..ch {
        let row = &rgb[((r0 + i) * width + c0) * 3..((r0 + i) * width + c0 + cw) * 3];
        for j in 0..cw {
            for k in 0..3 {
                out[k * plane + i * cw + j] = T::of(row[j * 3 + k] as f64 / 255.0 - 0.5);
            }
        }
    }
}
