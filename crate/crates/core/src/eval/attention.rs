use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::dist;
use crate::sim::{TaskId, TaskSpec};

use super::{Rollout, StepRecord};

/// Steps on either side of a stage transition in which the attended point
/// must cross over to the new target.
pub const SWITCH_WINDOW: usize = 5;

/// Index of the object the current stage is about, from the attachment
/// state: the held object's destination, or what to pick up next.
pub fn stage_target(task: TaskId, names: &[String], step: &StepRecord) -> Option<usize> {
    let id = |n: &str| names.iter().position(|x| x == n);
    let held = step.attached.and_then(|i| names.get(i)).map(String::as_str);
    match task {
        TaskId::Lifting => id("cube"),
        TaskId::Stacking => match held {
            Some("cube") => id("plate"),
            _ => id("cube"),
        },
        TaskId::ToolUsing => match held {
            Some("tool") => id("cube"),
            Some("cube") => id("ring"),
            _ => {
                let cube = id("cube")?;
                let fetched = TaskSpec::new(task)
                    .fetch_line()
                    .is_some_and(|line| step.objects[cube][0] <= line);
                if fetched {
                    Some(cube)
                } else {
                    id("tool")
                }
            }
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    /// Name of the stage's target object.
    pub target: String,
    pub steps: usize,
    /// Mean distance from `x_kp` to the stage target.
    pub mean_target_dist: f64,
    /// Mean distance from `x_kp` to the nearest other object.
    pub mean_other_dist: f64,
    /// Fraction of steps where `x_kp` is nearer the target than any other
    /// object.
    pub agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub rollout: usize,
    /// First step of the new stage.
    pub transition: usize,
    pub from: String,
    pub to: String,
    /// Step at which `x_kp` crossed from the old target to the new one,
    /// if that happened within the window.
    pub switch_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub rollouts: usize,
    pub stages: Vec<StageStats>,
    /// Agreement over all steps of all rollouts.
    pub agreement: f64,
    pub switches: Vec<SwitchEvent>,
    /// Fraction of rollouts with a transition whose first transition has a
    /// detected switch.
    pub switch_rate: f64,
}

/// Attention statistics over rollouts of one task. Steps without an
/// attended point are skipped, so the baselines yield an empty report.
pub fn attention_diagnostics(rollouts: &[Rollout]) -> AttentionReport {
    #[derive(Default)]
    struct Acc {
        n: usize,
        target: f64,
        other: f64,
        agree: usize,
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    let mut switches = Vec::new();
    let (mut with_transition, mut switched) = (0usize, 0usize);
    for (ri, r) in rollouts.iter().enumerate() {
        let targets: Vec<Option<usize>> = r
            .steps
            .iter()
            .map(|s| stage_target(r.task, &r.object_names, s))
            .collect();
        let kp = |s: &StepRecord| s.output.as_ref().and_then(|o| o.x_kp).map(|p| p.to_array());
        for (s, t) in r.steps.iter().zip(&targets) {
            let (Some(t), Some(x)) = (*t, kp(s)) else { continue };
            let dt = dist(x, s.objects[t]);
            let other = s
                .objects
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != t)
                .map(|(_, &o)| dist(x, o))
                .fold(f64::INFINITY, f64::min);
            let a = acc.entry(r.object_names[t].clone()).or_default();
            a.n += 1;
            a.target += dt;
            if other.is_finite() {
                a.other += other;
            }
            a.agree += (dt < other) as usize;
        }
        let mut first = true;
        for t in 1..r.steps.len() {
            let (Some(old), Some(new)) = (targets[t - 1], targets[t]) else {
                continue;
            };
            if old == new {
                continue;
            }
            let lo = t.saturating_sub(SWITCH_WINDOW);
            let hi = (t + SWITCH_WINDOW).min(r.steps.len() - 1);
            let prefers_new =
                |s: usize| kp(&r.steps[s]).map(|x| dist(x, r.steps[s].objects[new]) < dist(x, r.steps[s].objects[old]));
            let switch_step =
                (lo..=hi).find(|&s| prefers_new(s) == Some(true) && (s == 0 || prefers_new(s - 1) != Some(true)));
            if first {
                with_transition += 1;
                switched += switch_step.is_some() as usize;
                first = false;
            }
            switches.push(SwitchEvent {
                rollout: ri,
                transition: t,
                from: r.object_names[old].clone(),
                to: r.object_names[new].clone(),
                switch_step,
            });
        }
    }
    let total: usize = acc.values().map(|a| a.n).sum();
    let agree: usize = acc.values().map(|a| a.agree).sum();
    AttentionReport {
        rollouts: rollouts.len(),
        stages: acc
            .into_iter()
            .map(|(target, a)| StageStats {
                target,
                steps: a.n,
                mean_target_dist: a.target / a.n as f64,
                mean_other_dist: a.other / a.n as f64,
                agreement: a.agree as f64 / a.n as f64,
            })
            .collect(),
        agreement: if total == 0 { 0.0 } else { agree as f64 / total as f64 },
        switches,
        switch_rate: if with_transition == 0 {
            0.0
        } else {
            switched as f64 / with_transition as f64
        },
    }
}
