use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, AdamConfig, Graph, OptimState, Real};
use crate::error::{usage_err, Error, Result};
use crate::eval::{evaluate, EvalGrid};
use crate::han::{Observation, Policy, PolicyConfig, Sample, Variant};
use crate::sim::RegionKind;

use super::dataset::Dataset;
use super::{action_scale, bc_loss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the angular term.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Rollout evaluation every this many epochs; 0 disables it.
    pub eval_every: usize,
    pub eval_rollouts: usize,
    /// Where to write the last finite parameters if training diverges.
    pub abort_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            eval_every: 0,
            eval_rollouts: 30,
            abort_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(usage_err!("lambda must be >= 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(usage_err!("batch size and epochs must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(usage_err!("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub seconds: f64,
    /// Rollout success rate per region, on evaluation epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<BTreeMap<RegionKind, f64>>,
}

pub struct TrainOutcome {
    pub policy: Policy<f32>,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainOutcome {
    /// Highest evaluated success rate per region and the epoch reaching it.
    pub fn max_success(&self) -> BTreeMap<RegionKind, (f64, usize)> {
        let mut out: BTreeMap<RegionKind, (f64, usize)> = BTreeMap::new();
        for m in &self.epochs {
            for (&r, &rate) in m.success.iter().flatten() {
                let e = out.entry(r).or_insert((rate, m.epoch));
                if rate > e.0 {
                    *e = (rate, m.epoch);
                }
            }
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|m| m.mean_loss).collect()
    }
}

/// Minibatch Adam on shuffled `(frame, action)` pairs. Deterministic for a
/// given dataset, configs and seed. Metrics are written to `log` as one JSON
/// object per epoch.
pub fn train(
    dataset: &Dataset,
    policy_config: PolicyConfig,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.num_frames() == 0 {
        return Err(usage_err!("cannot train on an empty dataset"));
    }
    let camera = &dataset.header.camera;
    if (camera.height, camera.width) != policy_config.image {
        return Err(usage_err!(
            "dataset images are {}x{}, policy expects {:?}",
            camera.height,
            camera.width,
            policy_config.image
        ));
    }
    if policy_config.variant == Variant::BcStates {
        let k = dataset.demos[0].frames[0].object_positions.len();
        if k != policy_config.bc_state_objects {
            return Err(usage_err!(
                "bc_states configured for {} objects, dataset scenes have {k}",
                policy_config.bc_state_objects
            ));
        }
    }
    let mut policy = Policy::<f32>::new(policy_config)?;
    let mut optim = OptimState::new(
        &policy.store,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let observations: Vec<Observation> = dataset
        .demos
        .iter()
        .flat_map(|d| d.frames.iter().map(|f| f.observation(camera)))
        .collect();
    let targets: Vec<[f64; 4]> = dataset
        .demos
        .iter()
        .flat_map(|d| d.frames.iter().map(|f| f.action))
        .collect();
    let scale = action_scale(policy.config.max_step);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..observations.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut last_good = policy.store.clone();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| policy.sample(&observations[i], &mut rng))
                .collect::<Result<Vec<Sample>>>()?;
            let tgt: Vec<[f64; 4]> = batch.iter().map(|&i| targets[i]).collect();
            let mut g = Graph::new();
            let bound = policy.store.bind(&mut g);
            let forward = policy
                .build(&mut g, &bound, &samples)
                .and_then(|fwd| bc_loss(&mut g, fwd.action, &tgt, config.lambda, scale));
            let diverged = match forward {
                Ok(loss) => {
                    let value = g.value(loss).item().as_f64();
                    value
                        .is_finite()
                        .then_some((loss, value))
                        .ok_or(format!("loss {value}"))
                }
                Err(Error::Numerical(msg)) => Err(msg),
                Err(e) => return Err(e),
            };
            let (loss, value) = match diverged {
                Ok(v) => v,
                Err(msg) => {
                    let saved = match &config.abort_checkpoint {
                        Some(path) => {
                            Policy::from_store(policy.config.clone(), last_good)?.save(path)?;
                            format!("; last good parameters saved to {}", path.display())
                        }
                        None => String::new(),
                    };
                    return Err(Error::Numerical(format!(
                        "training diverged at epoch {epoch}, step {} ({msg}){saved}",
                        optim.step + 1
                    )));
                }
            };
            g.backward(loss)?;
            policy.store.accumulate_grads(&g, &bound);
            adam_step(&mut policy.store, &mut optim)?;
            policy.store.zero_grad();
            total += value * batch.len() as f64;
        }
        last_good = policy.store.clone();
        let success = if config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs) {
            let grid = EvalGrid {
                task: dataset.header.task,
                regions: RegionKind::ALL.to_vec(),
                n_rollouts: config.eval_rollouts,
                base_seed: config.seed,
                max_steps: None,
            };
            let report = evaluate(&policy, &grid)?;
            Some(report.cells.iter().map(|c| (c.region, c.rate)).collect())
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            steps: optim.step,
            mean_loss: total / order.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
            success,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&m)?)?;
        }
        epochs.push(m);
    }
    Ok(TrainOutcome { policy, epochs })
}
