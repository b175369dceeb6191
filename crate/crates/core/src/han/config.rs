use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full hand-eye action network.
    Han,
    /// Attention kept, action head replaced by a direct MLP.
    MlpAtn,
    /// One keypoint from the whole image instead of region proposals.
    NoRoi,
    /// Offset and gain left unconstrained.
    NoCon,
    /// Image baseline: spatial-softmax features straight to an MLP.
    BcImage,
    /// Ground-truth object positions and proprioception to an MLP.
    BcStates,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Han,
        Variant::MlpAtn,
        Variant::NoRoi,
        Variant::NoCon,
        Variant::BcImage,
        Variant::BcStates,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Han => "han",
            Variant::MlpAtn => "mlp_atn",
            Variant::NoRoi => "no_roi",
            Variant::NoCon => "no_con",
            Variant::BcImage => "bc_image",
            Variant::BcStates => "bc_states",
        }
    }

    /// Whether the variant grounds actions in attended keypoints.
    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Han | Variant::MlpAtn | Variant::NoRoi | Variant::NoCon)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            config_err!("unknown variant {s:?}; valid variants: han, mlp_atn, no_roi, no_con, bc_image, bc_states")
        })
    }
}

/// 3x3 same-padded conv layers with relu, optionally followed by a 2x2
/// max pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub channels: Vec<usize>,
    pub pool_after: Vec<bool>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 32],
            pool_after: vec![true, true, false, false],
        }
    }
}

impl BackboneSpec {
    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }

    pub fn pools(&self) -> usize {
        self.pool_after.iter().filter(|&&p| p).count()
    }

    /// Feature-map size for an `h x w` input.
    pub fn map_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.pool_after
            .iter()
            .fold((h, w), |(h, w), &p| if p { (h / 2, w / 2) } else { (h, w) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub variant: Variant,
    /// Number of random region proposals.
    pub n_regions: usize,
    /// Crop size `(H', W')` in pixels.
    pub crop: (usize, usize),
    /// Image size `(H, W)` in pixels.
    pub image: (usize, usize),
    /// Per-coordinate bound on the spatial offset, meters.
    pub offset_bound: f64,
    pub backbone: BackboneSpec,
    pub switch_hidden: usize,
    pub head_hidden: usize,
    /// Keypoint count of the image baseline.
    pub bc_keypoints: usize,
    /// Object count fed to the state baseline.
    pub bc_state_objects: usize,
    /// Simulator step bound; direct-MLP outputs are scaled by it.
    pub max_step: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl PolicyConfig {
    /// Defaults at the toy 60x80 resolution.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            n_regions: 16,
            crop: (20, 26),
            image: (60, 80),
            offset_bound: 0.1,
            backbone: BackboneSpec::default(),
            switch_hidden: 32,
            head_hidden: 64,
            bc_keypoints: 64,
            bc_state_objects: 1,
            max_step: 0.02,
            temperature: 1.0,
            seed: 0,
        }
    }

    /// Paper-scale 120x160 images with proportionally larger crops.
    pub fn paper_scale(variant: Variant) -> Self {
        Self {
            crop: (40, 53),
            image: (120, 160),
            ..Self::new(variant)
        }
    }

    /// Very small network on 12x16 images, sized for finite-difference
    /// checks.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            n_regions: 3,
            crop: (6, 8),
            image: (12, 16),
            backbone: BackboneSpec {
                channels: vec![3, 4],
                pool_after: vec![true, false],
            },
            switch_hidden: 4,
            head_hidden: 6,
            bc_keypoints: 3,
            ..Self::new(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image;
        let (ch, cw) = self.crop;
        if self.n_regions == 0 {
            return Err(config_err!("n_regions must be >= 1"));
        }
        if !(ch < h && cw < w) {
            return Err(config_err!("crop {ch}x{cw} must be smaller than the {h}x{w} image"));
        }
        if ch == 0 || cw == 0 {
            return Err(config_err!("crop dims must be nonzero"));
        }
        if !(self.offset_bound > 0.0) {
            return Err(config_err!("offset bound must be positive, got {}", self.offset_bound));
        }
        if !(self.temperature > 0.0) {
            return Err(config_err!("temperature must be positive"));
        }
        let b = &self.backbone;
        if b.channels.is_empty() || b.channels.len() != b.pool_after.len() {
            return Err(config_err!("backbone needs one pool flag per conv layer"));
        }
        let (mh, mw) = b.map_size(ch, cw);
        if mh == 0 || mw == 0 {
            return Err(config_err!("backbone pools the {ch}x{cw} crop away"));
        }
        if self.variant == Variant::BcStates && self.bc_state_objects == 0 {
            return Err(config_err!("bc_states needs at least one object"));
        }
        Ok(())
    }

    /// Width of the geometric part of the action-head input.
    pub(crate) fn geometry_dims(&self) -> usize {
        9
    }

    pub(crate) fn feature_dims(&self) -> usize {
        2 * self.backbone.out_channels()
    }
}
