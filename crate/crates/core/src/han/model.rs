use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::init::{kaiming_uniform, xavier_uniform};
use crate::diffcore::{Activation, Bound, Conv2dSpec, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{config_err, usage_err, Result};
use crate::geometry::Point3;

use super::config::{PolicyConfig, Variant};
use super::regions::{gripper_patch, propose_regions, write_crop, RegionProposal};
use super::{depth_lookup, Observation, PolicyOutput};

/// Scale applied to metric positions entering the MLPs.
const POSITION_SCALE: f64 = 10.0;

/// One observation plus the regions sampled for it.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub obs: &'a Observation,
    pub regions: Vec<RegionProposal>,
}

/// Graph handles of one batched forward pass. Rows are samples; region
/// tensors are flattened sample-major.
#[derive(Clone, Debug)]
pub struct Forward {
    pub batch: usize,
    pub regions: usize,
    /// `[B, 4]`.
    pub action: Var,
    /// `[B, N]`.
    pub confidences: Option<Var>,
    /// `[B * N, 3]` robot-frame candidates.
    pub candidates: Option<Var>,
    /// `[B, 3]`.
    pub x_kp: Option<Var>,
    /// `[B, 3]`.
    pub offset: Option<Var>,
    /// `[B]`.
    pub gain: Option<Var>,
    /// `[B, 1]`.
    pub grip: Var,
    /// `[B * N, 2]` global pixel keypoints.
    pub pixels: Vec<[f64; 2]>,
    pub background: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: Option<ParamId>,
    act: Activation,
}

#[derive(Clone, Debug)]
struct Ids {
    backbone: Vec<(ParamId, ParamId)>,
    keypoint: Option<ParamId>,
    switch: Vec<Layer>,
    head: Vec<Layer>,
}

enum Init {
    Kaiming(usize),
    Xavier(usize, usize),
    Zero,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct MlpSpec {
    prefix: &'static str,
    dims: Vec<usize>,
    final_bias: bool,
}

fn mlp_specs(m: &MlpSpec, out: &mut Vec<ParamSpec>) {
    let n = m.dims.len() - 1;
    for i in 0..n {
        let (fi, fo) = (m.dims[i], m.dims[i + 1]);
        let last = i + 1 == n;
        out.push(ParamSpec {
            name: format!("han.{}.mlp.{i}.weight", m.prefix),
            shape: vec![fo, fi],
            init: if last { Init::Xavier(fi, fo) } else { Init::Kaiming(fi) },
        });
        if !last || m.final_bias {
            out.push(ParamSpec {
                name: format!("han.{}.mlp.{i}.bias", m.prefix),
                shape: vec![fo],
                init: Init::Zero,
            });
        }
    }
}

/// The hand-eye action network or one of its baselines, with parameters.
#[derive(Clone, Debug)]
pub struct Policy<T: Real> {
    pub config: PolicyConfig,
    pub store: ParamStore<T>,
    ids: Ids,
}

impl<T: Real> Policy<T> {
    /// Freshly initialized parameters drawn from `config.seed`.
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        for p in Self::layout(&config) {
            let t = match p.init {
                Init::Kaiming(fan_in) => kaiming_uniform(&mut rng, &p.shape, fan_in),
                Init::Xavier(fi, fo) => xavier_uniform(&mut rng, &p.shape, fi, fo),
                Init::Zero => Tensor::zeros(&p.shape),
            };
            store.add(p.name, t)?;
        }
        Self::from_store(config, store)
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_store(config: PolicyConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != store.len() {
            return Err(config_err!(
                "{} variant needs {} parameter tensors, store has {}",
                config.variant,
                layout.len(),
                store.len()
            ));
        }
        for p in &layout {
            let id = store
                .id(&p.name)
                .ok_or_else(|| config_err!("missing parameter {}", p.name))?;
            if store.get(id).tensor.shape() != p.shape.as_slice() {
                return Err(config_err!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    store.get(id).tensor.shape(),
                    p.shape
                ));
            }
        }
        let id = |name: String| store.id(&name).expect("checked above");
        let layers = |prefix: &str, dims: usize, final_bias: bool, last_act: Activation| -> Vec<Layer> {
            (0..dims)
                .map(|i| {
                    let last = i + 1 == dims;
                    Layer {
                        w: id(format!("han.{prefix}.mlp.{i}.weight")),
                        b: (!last || final_bias).then(|| id(format!("han.{prefix}.mlp.{i}.bias"))),
                        act: if last { last_act } else { Activation::Relu },
                    }
                })
                .collect()
        };
        let v = config.variant;
        let backbone = if v == Variant::BcStates {
            Vec::new()
        } else {
            (0..config.backbone.channels.len())
                .map(|i| {
                    (
                        id(format!("han.backbone.conv{i}.weight")),
                        id(format!("han.backbone.conv{i}.bias")),
                    )
                })
                .collect()
        };
        let ids = Ids {
            backbone,
            keypoint: (v != Variant::BcStates).then(|| id("han.keypoint.weight".into())),
            switch: if matches!(v, Variant::Han | Variant::NoCon | Variant::MlpAtn) {
                layers("switch", 2, false, Activation::Linear)
            } else {
                Vec::new()
            },
            head: layers("head", Self::head_dims(&config).len() - 1, true, Activation::Linear),
        };
        Ok(Self { config, store, ids })
    }

    fn head_dims(c: &PolicyConfig) -> Vec<usize> {
        let h = c.head_hidden;
        match c.variant {
            Variant::Han | Variant::NoCon | Variant::NoRoi => {
                vec![c.geometry_dims() + 2 * c.feature_dims(), h, 5]
            }
            Variant::MlpAtn => vec![c.geometry_dims() + 2 * c.feature_dims(), h, 4],
            Variant::BcImage => vec![2 * c.bc_keypoints + 3, h, h, 4],
            Variant::BcStates => vec![3 * c.bc_state_objects + 4, h, h, 4],
        }
    }

    fn layout(c: &PolicyConfig) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let v = c.variant;
        if v != Variant::BcStates {
            let mut cin = 3;
            for (i, &co) in c.backbone.channels.iter().enumerate() {
                out.push(ParamSpec {
                    name: format!("han.backbone.conv{i}.weight"),
                    shape: vec![co, cin, 3, 3],
                    init: Init::Kaiming(cin * 9),
                });
                out.push(ParamSpec {
                    name: format!("han.backbone.conv{i}.bias"),
                    shape: vec![co],
                    init: Init::Zero,
                });
                cin = co;
            }
            // No bias: a per-map constant cannot move a spatial softmax.
            let maps = if v == Variant::BcImage { c.bc_keypoints } else { 1 };
            out.push(ParamSpec {
                name: "han.keypoint.weight".into(),
                shape: vec![maps, cin, 1, 1],
                init: Init::Xavier(cin, maps),
            });
        }
        if matches!(v, Variant::Han | Variant::NoCon | Variant::MlpAtn) {
            // Final bias omitted for the same reason: softmax over regions is
            // shift invariant.
            mlp_specs(
                &MlpSpec {
                    prefix: "switch",
                    dims: vec![c.feature_dims(), c.switch_hidden, 1],
                    final_bias: false,
                },
                &mut out,
            );
        }
        mlp_specs(
            &MlpSpec {
                prefix: "head",
                dims: Self::head_dims(c),
                final_bias: true,
            },
            &mut out,
        );
        out
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Regions per sample: `N`, 1 for `no_roi`, 0 for the baselines.
    pub fn regions_per_sample(&self) -> usize {
        match self.config.variant {
            Variant::Han | Variant::NoCon | Variant::MlpAtn => self.config.n_regions,
            Variant::NoRoi => 1,
            Variant::BcImage | Variant::BcStates => 0,
        }
    }

    /// Draws the regions this variant needs for `obs`.
    pub fn sample<'a>(&self, obs: &'a Observation, rng: &mut impl Rng) -> Result<Sample<'a>> {
        let regions = match self.config.variant {
            Variant::Han | Variant::NoCon | Variant::MlpAtn => propose_regions(rng, &self.config)?,
            Variant::NoRoi => vec![RegionProposal::whole_image(obs.height(), obs.width())],
            Variant::BcImage | Variant::BcStates => Vec::new(),
        };
        Ok(Sample { obs, regions })
    }

    // ------------------------------------------------------------ components

    fn conv_backbone(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            replicate: true,
        };
        let mut h = x;
        for (i, &(w, b)) in self.ids.backbone.iter().enumerate() {
            h = g.conv2d(h, bound.var(w), Some(bound.var(b)), spec)?;
            h = g.relu(h);
            if self.config.backbone.pool_after[i] {
                h = g.max_pool2(h)?;
            }
        }
        Ok(h)
    }

    fn mlp(&self, g: &mut Graph<T>, bound: &Bound, x: Var, layers: &[Layer]) -> Result<Var> {
        let mut h = x;
        for l in layers {
            let z = g.linear(h, bound.var(l.w), l.b.map(|b| bound.var(b)))?;
            h = g.activate(z, l.act);
        }
        Ok(h)
    }

    /// Backbone plus spatial softmax on `[M, 3, h, w]` crops. Returns the
    /// keypoint in feature-map units `[M, 2]` and the pooled region features
    /// `[M, 2C]`.
    pub fn detect_keypoints(&self, g: &mut Graph<T>, bound: &Bound, crops: Var) -> Result<(Var, Var)> {
        let kw = self
            .ids
            .keypoint
            .ok_or_else(|| usage_err!("bc_states has no keypoint detector"))?;
        let fmap = self.conv_backbone(g, bound, crops)?;
        let mx = g.global_max_pool(fmap)?;
        let av = g.global_avg_pool(fmap)?;
        let feats = g.concat(&[mx, av])?;
        let kmap = g.conv2d(fmap, bound.var(kw), None, Conv2dSpec::default())?;
        let kp = g.spatial_softmax(kmap, T::of(self.config.temperature))?;
        let m = g.shape(crops)[0];
        let kp = g.reshape(kp, &[m, 2])?;
        Ok((kp, feats))
    }

    /// Maps feature-map keypoints of `regions` to robot-frame points through
    /// the nearest-pixel depth. Gradients flow through the keypoint position
    /// only.
    fn lift(
        &self,
        g: &mut Graph<T>,
        kp: Var,
        map: (usize, usize),
        rows: &[(&Observation, RegionProposal)],
    ) -> Result<(Var, Vec<[f64; 2]>, Vec<bool>)> {
        let vals = g.value(kp).to_f64_vec();
        let mut mats = Vec::with_capacity(rows.len() * 6);
        let mut bias = Vec::with_capacity(rows.len() * 3);
        let mut pixels = Vec::with_capacity(rows.len());
        let mut background = Vec::with_capacity(rows.len());
        for (i, (obs, region)) in rows.iter().enumerate() {
            let sh = region.size.0 as f64 / map.0 as f64;
            let sw = region.size.1 as f64 / map.1 as f64;
            let u0 = region.origin.0 as f64 + 0.5 * sh - 0.5;
            let v0 = region.origin.1 as f64 + 0.5 * sw - 0.5;
            let (u, v) = (u0 + sh * vals[2 * i], v0 + sw * vals[2 * i + 1]);
            let (d, bg) = depth_lookup(&obs.depth, &obs.camera, u, v);
            let (m, b) = obs.camera.lift_coefficients(d);
            for k in 0..3 {
                mats.push(T::of(m[2 * k] * sh));
                mats.push(T::of(m[2 * k + 1] * sw));
                bias.push(T::of(m[2 * k] * u0 + m[2 * k + 1] * v0 + b[k]));
            }
            pixels.push([u, v]);
            background.push(bg);
        }
        let pts = g.affine_rows(kp, &mats, &bias, 3)?;
        Ok((pts, pixels, background))
    }

    /// Region scores through the shared MLP, softmax over each sample's `N`
    /// regions, and the confidence-weighted keypoint and features.
    /// `feats: [B*N, F]`, `cands: [B*N, 3]` -> `(c [B, N], x_kp [B, 3],
    /// roi [B, F])`.
    pub fn switch_attention(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        feats: Var,
        cands: Var,
        batch: usize,
    ) -> Result<(Var, Var, Var)> {
        let rows = g.shape(feats)[0];
        let f = g.shape(feats)[1];
        let n = rows / batch.max(1);
        let scores = self.mlp(g, bound, feats, &self.ids.switch)?;
        let scores = g.reshape(scores, &[batch, n])?;
        let c = g.softmax(scores)?;
        let c3 = g.reshape(c, &[batch, 1, n])?;
        let cands = g.reshape(cands, &[batch, n, 3])?;
        let kp = g.bmm(c3, cands)?;
        let kp = g.reshape(kp, &[batch, 3])?;
        let feats = g.reshape(feats, &[batch, n, f])?;
        let roi = g.bmm(c3, feats)?;
        let roi = g.reshape(roi, &[batch, f])?;
        Ok((c, kp, roi))
    }

    /// Head on `[x_kp, x_ee, x_kp - x_ee]` plus gripper-patch and ROI
    /// features. Returns the raw outputs `[B, 5]` (`[B, 4]` for mlp_atn).
    pub fn action_head(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x_kp: Var,
        x_ee: Var,
        patch: Var,
        roi: Var,
    ) -> Result<Var> {
        let s = T::of(POSITION_SCALE);
        let rel = g.sub(x_kp, x_ee)?;
        let parts = [g.scale(x_kp, s), g.scale(x_ee, s), g.scale(rel, s), patch, roi];
        let input = g.concat(&parts)?;
        self.mlp(g, bound, input, &self.ids.head)
    }

    /// Squashes raw head outputs and composes the action. Returns
    /// `(offset, k, grip, action)`.
    pub fn compose(&self, g: &mut Graph<T>, raw: Var, x_kp: Var, x_ee: Var) -> Result<(Var, Var, Var, Var)> {
        let b = g.shape(raw)[0];
        let off = g.slice_last(raw, 0, 3)?;
        let k = g.slice_last(raw, 3, 1)?;
        let k = g.reshape(k, &[b])?;
        let grip = g.slice_last(raw, 4, 1)?;
        let (off, k) = if self.config.variant == Variant::NoCon {
            (off, k)
        } else {
            let t = g.tanh(off);
            (g.scale(t, bound_below::<T>(self.config.offset_bound)), g.sigmoid(k))
        };
        let target = g.add(x_kp, off)?;
        let target = g.sub(target, x_ee)?;
        let pos = g.mul_row_scalar(target, k)?;
        let action = g.concat(&[pos, grip])?;
        Ok((off, k, grip, action))
    }

    /// Direct-MLP outputs `[B, 4]` to an action: position scaled by the step
    /// bound.
    fn direct_action(&self, g: &mut Graph<T>, raw: Var) -> Result<(Var, Var)> {
        let pos = g.slice_last(raw, 0, 3)?;
        let pos = g.scale(pos, T::of(self.config.max_step));
        let grip = g.slice_last(raw, 3, 1)?;
        let action = g.concat(&[pos, grip])?;
        Ok((grip, action))
    }

    // ------------------------------------------------------------ forward

    fn check(&self, samples: &[Sample]) -> Result<()> {
        if samples.is_empty() {
            return Err(usage_err!("forward on an empty batch"));
        }
        let n = self.regions_per_sample();
        for s in samples {
            s.obs.validate()?;
            if (s.obs.height(), s.obs.width()) != self.config.image {
                return Err(config_err!(
                    "observation is {}x{}, policy expects {:?}",
                    s.obs.height(),
                    s.obs.width(),
                    self.config.image
                ));
            }
            if s.regions.len() != n {
                return Err(usage_err!(
                    "{} regions given, {} variant needs {n}",
                    s.regions.len(),
                    self.variant()
                ));
            }
            if s.regions.iter().any(|r| !r.fits(s.obs.height(), s.obs.width())) {
                return Err(usage_err!("region proposal outside the image"));
            }
            if self.variant() == Variant::BcStates {
                let k = s.obs.object_positions.as_ref().map_or(0, |p| p.len());
                if k != self.config.bc_state_objects {
                    return Err(usage_err!(
                        "bc_states needs {} ground-truth object positions, observation has {k}",
                        self.config.bc_state_objects
                    ));
                }
            }
        }
        Ok(())
    }

    fn images(&self, samples: &[Sample]) -> Result<Tensor<T>> {
        let (h, w) = self.config.image;
        let mut data = vec![T::zero(); samples.len() * 3 * h * w];
        let whole = RegionProposal::whole_image(h, w);
        for (s, out) in samples.iter().zip(data.chunks_mut(3 * h * w)) {
            write_crop(&s.obs.rgb, w, &whole, out);
        }
        Tensor::from_vec(&[samples.len(), 3, h, w], data)
    }

    /// Records the batched forward pass in `g`.
    pub fn build(&self, g: &mut Graph<T>, bound: &Bound, samples: &[Sample]) -> Result<Forward> {
        self.check(samples)?;
        let b = samples.len();
        let (h, w) = self.config.image;
        let (ch, cw) = self.config.crop;
        let mut xee = Vec::with_capacity(3 * b);
        for s in samples {
            xee.extend(s.obs.x_ee.to_array().map(T::of));
        }
        let x_ee = g.constant(Tensor::from_vec(&[b, 3], xee)?);
        let variant = self.variant();
        let mut fwd = Forward {
            batch: b,
            regions: self.regions_per_sample(),
            action: x_ee,
            confidences: None,
            candidates: None,
            x_kp: None,
            offset: None,
            gain: None,
            grip: x_ee,
            pixels: Vec::new(),
            background: Vec::new(),
        };

        match variant {
            Variant::BcStates => {
                let mut data = Vec::new();
                for s in samples {
                    for p in s.obs.object_positions.as_ref().expect("checked") {
                        data.extend(p.map(|x| T::of(POSITION_SCALE * x)));
                    }
                    data.extend(s.obs.x_ee.to_array().map(|x| T::of(POSITION_SCALE * x)));
                    data.push(T::of(s.obs.fingers.signal()));
                }
                let width = data.len() / b;
                let input = g.constant(Tensor::from_vec(&[b, width], data)?);
                let raw = self.mlp(g, bound, input, &self.ids.head)?;
                (fwd.grip, fwd.action) = self.direct_action(g, raw)?;
            }
            Variant::BcImage => {
                let img = g.constant(self.images(samples)?);
                let fmap = self.conv_backbone(g, bound, img)?;
                let (mh, mw) = (g.shape(fmap)[2], g.shape(fmap)[3]);
                let kw = bound.var(self.ids.keypoint.expect("image variant"));
                let kmap = g.conv2d(fmap, kw, None, Conv2dSpec::default())?;
                let kp = g.spatial_softmax(kmap, T::of(self.config.temperature))?;
                let k = self.config.bc_keypoints;
                let kp = g.reshape(kp, &[b, 2 * k])?;
                let factors: Vec<T> = (0..2 * k)
                    .map(|i| T::of(1.0 / if i % 2 == 0 { mh } else { mw } as f64))
                    .collect();
                let kp = g.scale_cols(kp, &factors)?;
                let ee = g.scale(x_ee, T::of(POSITION_SCALE));
                let input = g.concat(&[kp, ee])?;
                let raw = self.mlp(g, bound, input, &self.ids.head)?;
                (fwd.grip, fwd.action) = self.direct_action(g, raw)?;
            }
            Variant::Han | Variant::NoCon | Variant::MlpAtn | Variant::NoRoi => {
                let n = fwd.regions;
                let patches: Vec<RegionProposal> = samples
                    .iter()
                    .map(|s| gripper_patch(&s.obs.camera, s.obs.x_ee.to_array(), (ch, cw)))
                    .collect();
                let crop_len = 3 * ch * cw;
                let (cands, pixels, background, roi_feats, patch_feats) = if variant == Variant::NoRoi {
                    let img = g.constant(self.images(samples)?);
                    let (kp, feats) = self.detect_keypoints(g, bound, img)?;
                    let map = self.config.backbone.map_size(h, w);
                    let rows: Vec<_> = samples.iter().map(|s| (s.obs, s.regions[0])).collect();
                    let (pts, px, bg) = self.lift(g, kp, map, &rows)?;
                    let mut data = vec![T::zero(); b * crop_len];
                    for ((s, p), out) in samples.iter().zip(&patches).zip(data.chunks_mut(crop_len)) {
                        write_crop(&s.obs.rgb, w, p, out);
                    }
                    let pt = g.constant(Tensor::from_vec(&[b, 3, ch, cw], data)?);
                    let (_, patch_feats) = self.detect_keypoints(g, bound, pt)?;
                    (pts, px, bg, feats, patch_feats)
                } else {
                    // Regions and the gripper patch share one backbone batch:
                    // per sample N crops followed by the patch.
                    let per = n + 1;
                    let mut data = vec![T::zero(); b * per * crop_len];
                    for (i, s) in samples.iter().enumerate() {
                        for (j, r) in s.regions.iter().chain(std::iter::once(&patches[i])).enumerate() {
                            let at = (i * per + j) * crop_len;
                            write_crop(&s.obs.rgb, w, r, &mut data[at..at + crop_len]);
                        }
                    }
                    let crops = g.constant(Tensor::from_vec(&[b * per, 3, ch, cw], data)?);
                    let (kp, feats) = self.detect_keypoints(g, bound, crops)?;
                    let roi_rows: Vec<usize> = (0..b).flat_map(|i| (0..n).map(move |j| i * per + j)).collect();
                    let patch_rows: Vec<usize> = (0..b).map(|i| i * per + n).collect();
                    let kp = g.gather_rows(kp, &roi_rows)?;
                    let roi_feats = g.gather_rows(feats, &roi_rows)?;
                    let patch_feats = g.gather_rows(feats, &patch_rows)?;
                    let map = self.config.backbone.map_size(ch, cw);
                    let rows: Vec<_> = samples
                        .iter()
                        .flat_map(|s| s.regions.iter().map(move |&r| (s.obs, r)))
                        .collect();
                    let (pts, px, bg) = self.lift(g, kp, map, &rows)?;
                    (pts, px, bg, roi_feats, patch_feats)
                };
                fwd.pixels = pixels;
                fwd.background = background;
                fwd.candidates = Some(cands);

                let (c, x_kp, roi) = if variant == Variant::NoRoi {
                    let ones = g.constant(Tensor::full(&[b, 1], T::one()));
                    (ones, cands, roi_feats)
                } else {
                    self.switch_attention(g, bound, roi_feats, cands, b)?
                };
                fwd.confidences = Some(c);
                fwd.x_kp = Some(x_kp);
                let raw = self.action_head(g, bound, x_kp, x_ee, patch_feats, roi)?;
                if variant == Variant::MlpAtn {
                    (fwd.grip, fwd.action) = self.direct_action(g, raw)?;
                } else {
                    let (off, k, grip, action) = self.compose(g, raw, x_kp, x_ee)?;
                    fwd.offset = Some(off);
                    fwd.gain = Some(k);
                    fwd.grip = grip;
                    fwd.action = action;
                }
            }
        }
        Ok(fwd)
    }

    /// Reads sample `i` of a recorded forward pass.
    pub fn output(&self, g: &Graph<T>, fwd: &Forward, samples: &[Sample], i: usize) -> PolicyOutput {
        let row = |v: Var, d: usize| -> Vec<f64> {
            g.value(v).data()[i * d..(i + 1) * d]
                .iter()
                .map(|x| x.as_f64())
                .collect()
        };
        let n = fwd.regions;
        let a = row(fwd.action, 4);
        let x_ee = samples[i].obs.x_ee.to_array();
        let x_kp = fwd.x_kp.map(|v| {
            let p = row(v, 3);
            [p[0], p[1], p[2]]
        });
        let x_offset = fwd.offset.map(|v| {
            let p = row(v, 3);
            [p[0], p[1], p[2]]
        });
        let k = fwd.gain.map(|v| row(v, 1)[0]);
        let x_target = match (x_kp, x_offset) {
            (Some(kp), Some(off)) => Some(super::target_vector(kp, off, x_ee)),
            _ => None,
        };
        let candidate_kps = fwd
            .candidates
            .map(|v| {
                g.value(v).data()[i * n * 3..(i + 1) * n * 3]
                    .chunks(3)
                    .map(|p| Point3::robot(p[0].as_f64(), p[1].as_f64(), p[2].as_f64()))
                    .collect()
            })
            .unwrap_or_default();
        PolicyOutput {
            variant: self.variant(),
            regions: samples[i].regions.clone(),
            candidate_pixels: fwd
                .pixels
                .get(i * n..(i + 1) * n)
                .map(|s| s.to_vec())
                .unwrap_or_default(),
            candidate_kps,
            background: fwd
                .background
                .get(i * n..(i + 1) * n)
                .map(|s| s.to_vec())
                .unwrap_or_default(),
            confidences: fwd.confidences.map(|v| row(v, n)).unwrap_or_default(),
            x_kp: x_kp.map(|p| Point3::robot(p[0], p[1], p[2])),
            x_offset,
            k,
            grip_logit: a[3],
            x_target,
            action: [a[0], a[1], a[2], a[3]],
        }
    }

    /// Inference on one observation with regions drawn from `rng`.
    pub fn forward(&self, obs: &Observation, rng: &mut impl Rng) -> Result<PolicyOutput> {
        let sample = self.sample(obs, rng)?;
        self.forward_sample(&sample)
    }

    pub fn forward_sample(&self, sample: &Sample) -> Result<PolicyOutput> {
        let mut g = Graph::inference();
        let bound = self.store.bind(&mut g);
        let samples = std::slice::from_ref(sample);
        let fwd = self.build(&mut g, &bound, samples)?;
        Ok(self.output(&g, &fwd, samples, 0))
    }

    /// Writes the parameters to `path` and the config next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.store.save(path)?;
        std::fs::write(config_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: PolicyConfig = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
        Self::from_store(config, ParamStore::load(path)?)
    }

    pub fn cast<U: Real>(&self) -> Policy<U> {
        Policy {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }
}

/// Largest `T` not exceeding `b`, so `b * tanh` stays within the bound after
/// rounding.
fn bound_below<T: Real>(b: f64) -> T {
    let mut s = T::of(b);
    while s.as_f64() > b {
        s = s - s * T::epsilon();
    }
    s
}

/// Sidecar holding the policy config of a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}
