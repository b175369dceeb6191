//! Demonstration datasets, the behavior-cloning loss and the training loop.

mod dataset;
mod trainer;

pub use dataset::{
    collect_demos, decode_record, encode_record, record_expert_episode, Dataset, DatasetHeader, Demonstration, Frame,
    Source, DATASET_MAGIC, DATASET_VERSION,
};
pub use trainer::{train, EpochMetrics, TrainConfig, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::{self, GradCheckReport};
use crate::diffcore::{Bound, Graph, Real, Tensor, Var};
use crate::error::{config_err, Result};
use crate::geometry::{CameraModel, Point3};
use crate::han::{Observation, Policy, PolicyConfig, Variant};
use crate::sim::{reset, RegionKind, Renderer, TaskId, TaskSpec};

/// Clamp margin of the arccos argument.
pub const ANGLE_EPS: f64 = 1e-7;

/// `|a - a*|^2 + lambda * acos(cos(a, a*))` for one action pair, with the
/// angle skipped when either norm is below `1e-8`.
pub fn bc_loss_value(a: [f64; 4], target: [f64; 4], lambda: f64) -> f64 {
    let l2: f64 = a.iter().zip(&target).map(|(x, y)| (x - y).powi(2)).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-8 || nb < 1e-8 {
        return l2;
    }
    let cos = a.iter().zip(&target).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    l2 + lambda * cos.clamp(-1.0 + ANGLE_EPS, 1.0 - ANGLE_EPS).acos()
}

/// Per-column factors applied to predicted and demonstrated actions before
/// the loss: positions in units of the step bound, grip as is.
pub fn action_scale(max_step: f64) -> [f64; 4] {
    let s = 1.0 / max_step;
    [s, s, s, 1.0]
}

/// Batch-mean loss of predictions `a: [B, 4]` against constant targets,
/// both multiplied column-wise by `scale` first.
pub fn bc_loss<T: Real>(g: &mut Graph<T>, a: Var, targets: &[[f64; 4]], lambda: f64, scale: [f64; 4]) -> Result<Var> {
    if lambda < 0.0 {
        return Err(config_err!("lambda must be >= 0, got {lambda}"));
    }
    let b = targets.len();
    let factors = scale.map(T::of);
    let a = g.scale_cols(a, &factors)?;
    let t: Vec<T> = targets
        .iter()
        .flat_map(|r| (0..4).map(move |k| T::of(r[k] * scale[k])))
        .collect();
    let tv = g.constant(Tensor::from_vec(&[b, 4], t.clone())?);
    let diff = g.sub(a, tv)?;
    let sq = g.mul(diff, diff)?;
    let l2 = g.sum_last(sq)?;
    let per = if lambda > 0.0 {
        let ang = g.angle_to(a, &t, T::of(ANGLE_EPS))?;
        let ang = g.scale(ang, T::of(lambda));
        g.add(l2, ang)?
    } else {
        l2
    };
    Ok(g.mean(per))
}

/// Finite-difference check of the full policy forward pass plus the loss,
/// with respect to every parameter, for each variant at a tiny size. Inputs
/// are rendered lifting scenes with noise images and random gripper
/// positions, so max pools and spatial softmaxes see no ties.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        let mut cfg = PolicyConfig::tiny(v);
        cfg.seed = seed;
        let camera = CameraModel::front_view(cfg.image.0, cfg.image.1);
        let renderer = Renderer::new(camera);
        let spec = TaskSpec::new(TaskId::Lifting);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = (0..2)
            .map(|i| {
                let mut scene = reset(&spec, RegionKind::Interpolation, seed + i)?;
                scene.gripper.x_ee = Point3::robot(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.02..0.3),
                );
                let mut o = Observation::capture(&scene, &renderer);
                o.rgb.iter_mut().for_each(|p| *p = rng.random());
                Ok(o)
            })
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<[f64; 4]> = (0..obs.len())
            .map(|_| {
                let d = [0; 3].map(|_| rng.random_range(-cfg.max_step..cfg.max_step));
                [d[0], d[1], d[2], if rng.random_bool(0.5) { 1.0 } else { -1.0 }]
            })
            .collect();
        let policy = Policy::<f64>::new(cfg.clone())?;
        let samples = obs
            .iter()
            .map(|o| policy.sample(o, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Tensor<f64>> = policy.store.params().iter().map(|p| p.tensor.clone()).collect();
        let scale = action_scale(cfg.max_step);
        out.push(gradcheck::check(&format!("{v}+loss"), &inputs, |g, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let fwd = policy.build(g, &bound, &samples)?;
            bc_loss(g, fwd.action, &targets, 0.1, scale)
        })?);
    }
    Ok(out)
}
