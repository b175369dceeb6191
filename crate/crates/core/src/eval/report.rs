use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::diffcore::Real;
use crate::error::{usage_err, Result};
use crate::han::{Policy, Variant};
use crate::sim::{RegionKind, TaskId};

use super::rollout;

/// Evaluation seeds live far above the ones used for collection examples.
const EVAL_SEED_BASE: u64 = 1 << 40;

/// Scene seed of rollout `i` in a grid with `base_seed`.
pub fn rollout_seed(base_seed: u64, i: usize) -> u64 {
    EVAL_SEED_BASE + base_seed.wrapping_mul(1 << 20) + i as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub task: TaskId,
    pub regions: Vec<RegionKind>,
    pub n_rollouts: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl EvalGrid {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            regions: RegionKind::ALL.to_vec(),
            n_rollouts: 30,
            base_seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub variant: Variant,
    pub task: TaskId,
    pub region: RegionKind,
    pub n: usize,
    pub successes: usize,
    pub rate: f64,
    pub seeds: Vec<u64>,
    pub outcomes: Vec<bool>,
    /// Mean episode length over successful rollouts.
    pub mean_success_steps: Option<f64>,
    /// Rollouts ended by a non-finite action.
    pub faults: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub grid: EvalGrid,
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn rate(&self, region: RegionKind) -> Option<f64> {
        self.cells.iter().find(|c| c.region == region).map(|c| c.rate)
    }
}

/// `grid.n_rollouts` seeded rollouts per region.
pub fn evaluate<T: Real>(policy: &Policy<T>, grid: &EvalGrid) -> Result<EvalReport> {
    if grid.n_rollouts == 0 {
        return Err(usage_err!("evaluation needs at least one rollout per cell"));
    }
    let mut cells = Vec::new();
    for &region in &grid.regions {
        let seeds: Vec<u64> = (0..grid.n_rollouts).map(|i| rollout_seed(grid.base_seed, i)).collect();
        let mut outcomes = Vec::with_capacity(seeds.len());
        let mut lens = Vec::new();
        let mut faults = 0;
        for &s in &seeds {
            let r = rollout(policy, grid.task, region, s, grid.max_steps)?;
            if r.success {
                lens.push(r.len() as f64);
            }
            faults += r.failure.is_some() as usize;
            outcomes.push(r.success);
        }
        let successes = outcomes.iter().filter(|&&s| s).count();
        cells.push(EvalCell {
            variant: policy.variant(),
            task: grid.task,
            region,
            n: seeds.len(),
            successes,
            rate: successes as f64 / seeds.len() as f64,
            seeds,
            outcomes,
            mean_success_steps: (!lens.is_empty()).then(|| lens.iter().sum::<f64>() / lens.len() as f64),
            faults,
        });
    }
    Ok(EvalReport {
        grid: grid.clone(),
        cells,
    })
}

/// One cell of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    /// Row label, usually the variant name.
    pub method: String,
    pub task: TaskId,
    pub region: RegionKind,
    pub final_rate: f64,
    /// Best rate seen over training, when tracked.
    pub max_rate: Option<f64>,
}

/// Success rates with methods as rows and task/region pairs as columns.
/// Cells read `final` or `final (max)`.
pub fn render_table(entries: &[TableEntry]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for e in entries {
        if !methods.contains(&e.method.as_str()) {
            methods.push(&e.method);
        }
    }
    let tasks: Vec<TaskId> = TaskId::ALL
        .into_iter()
        .filter(|t| entries.iter().any(|e| e.task == *t))
        .collect();
    let cells: BTreeMap<(&str, TaskId, RegionKind), &TableEntry> = entries
        .iter()
        .map(|e| ((e.method.as_str(), e.task, e.region), e))
        .collect();
    let fmt_cell = |e: Option<&&TableEntry>| match e {
        None => "-".to_string(),
        Some(e) => match e.max_rate {
            Some(m) => format!("{:.2} ({:.2})", e.final_rate, m),
            None => format!("{:.2}", e.final_rate),
        },
    };
    let mw = methods.iter().map(|m| m.len()).max().unwrap_or(0).max(6);
    let cw = 11;
    let mut s = String::new();
    let _ = write!(s, "{:mw$} ", "Method");
    for t in &tasks {
        let _ = write!(s, "| {:^w$} ", t.name(), w = 2 * cw + 1);
    }
    s.push('\n');
    let _ = write!(s, "{:mw$} ", "");
    for _ in &tasks {
        let _ = write!(s, "| {:^cw$} {:^cw$} ", "Int.", "Ext.");
    }
    s.push('\n');
    s.push_str(&"-".repeat(mw + 1 + tasks.len() * (2 * cw + 4)));
    s.push('\n');
    for m in &methods {
        let _ = write!(s, "{m:mw$} ");
        for &t in &tasks {
            let a = fmt_cell(cells.get(&(*m, t, RegionKind::Interpolation)));
            let b = fmt_cell(cells.get(&(*m, t, RegionKind::Extrapolation)));
            let _ = write!(s, "| {a:^cw$} {b:^cw$} ");
        }
        s.push('\n');
    }
    s
}
