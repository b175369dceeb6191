use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use han_core::diffcore::gradcheck::diffcore_suite;
use han_core::eval::{
    attention_diagnostics, export_overlays, render_table, rollout_with, EvalGrid, PolicyController, RolloutOptions,
    TableEntry,
};
use han_core::geometry::CameraModel;
use han_core::han::{Policy, PolicyConfig, Variant};
use han_core::sim::{RegionKind, TaskId};
use han_core::teleop::{Server, TeleopConfig};
use han_core::train::{collect_demos, gradcheck_suite, train, Dataset, Source, TrainConfig};

#[derive(Parser)]
#[command(
    name = "han",
    version,
    about = "Hand-eye action networks on a toy tabletop simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations into a dataset file.
    Collect(CollectArgs),
    /// Train a policy on a dataset.
    Train(TrainArgs),
    /// Evaluate checkpoints over seeded rollouts.
    Eval(EvalArgs),
    /// Roll out a checkpoint and write attention overlays.
    Visualize(VisualizeArgs),
    /// Serve teleoperation sessions that record human demonstrations.
    TeleopServe(TeleopArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

fn task_arg(s: &str) -> std::result::Result<TaskId, String> {
    s.parse().map_err(|e: han_core::Error| e.to_string())
}

fn region_arg(s: &str) -> std::result::Result<RegionKind, String> {
    s.parse().map_err(|e: han_core::Error| e.to_string())
}

fn variant_arg(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: han_core::Error| e.to_string())
}

fn source_arg(s: &str) -> std::result::Result<Source, String> {
    s.parse().map_err(|e: han_core::Error| e.to_string())
}

#[derive(Args, Serialize)]
struct CollectArgs {
    #[arg(long, value_parser = task_arg)]
    task: TaskId,
    #[arg(long, value_parser = region_arg, default_value = "interpolation")]
    region: RegionKind,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, value_parser = source_arg, default_value = "expert")]
    source: Source,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Render at 120x160 instead of 60x80.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = variant_arg, default_value = "han")]
    variant: Variant,
    /// JSON with optional `train` and `policy` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate every this many epochs (0 disables).
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Checkpoint files or training output directories.
    #[arg(long, required = true, num_args = 1..)]
    ckpt: Vec<PathBuf>,
    /// JSON evaluation grid; defaults to both regions with 30 rollouts.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_parser = task_arg)]
    task: Option<TaskId>,
    #[arg(long)]
    rollouts: Option<usize>,
    /// Report JSON; the text table is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct VisualizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_parser = task_arg)]
    task: TaskId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = region_arg, default_value = "interpolation")]
    region: RegionKind,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = han_core::eval::OVERLAY_SCALE)]
    scale: usize,
    /// Output directory for numbered PNGs and the trajectory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TeleopArgs {
    #[arg(long, default_value_t = 8765)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, value_parser = task_arg)]
    task: TaskId,
    #[arg(long, value_parser = region_arg, default_value = "interpolation")]
    region: RegionKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset file; defaults to `<task>_human.han` in $HAN_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint whose attention is streamed as an overlay.
    #[arg(long)]
    overlay_ckpt: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn metadata(command: &str, args: &impl Serialize) -> Result<Value> {
    Ok(json!({
        "command": command,
        "args": serde_json::to_value(args)?,
        "version": env!("CARGO_PKG_VERSION"),
    }))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn collect(args: CollectArgs) -> Result<()> {
    let camera = if args.paper_scale {
        CameraModel::front_view(120, 160)
    } else {
        CameraModel::front_view(60, 80)
    };
    let mut ds = collect_demos(args.task, args.region, args.n, args.source, args.seed, camera)?;
    ds.header.metadata = metadata("collect", &args)?;
    ds.write(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} {} demos ({} frames) to {}",
        ds.demos.len(),
        args.task,
        ds.num_frames(),
        args.out.display()
    );
    Ok(())
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    train: TrainConfig,
    /// Fields override the defaults for the dataset's resolution.
    policy: Option<serde_json::Map<String, Value>>,
}

const CHECKPOINT: &str = "policy.ckpt";
const TRAIN_SUMMARY: &str = "train.json";

fn train_cmd(args: TrainArgs) -> Result<()> {
    let ds = Dataset::read(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let run: RunConfig = match &args.config {
        Some(p) => {
            serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let cam = ds.header.camera;
    let base = if (cam.height, cam.width) == (120, 160) {
        PolicyConfig::paper_scale(args.variant)
    } else {
        PolicyConfig::new(args.variant)
    };
    let mut policy = match run.policy {
        Some(fields) => merge_policy(base, fields)?,
        None => base,
    };
    policy.variant = args.variant;
    if let Some(d) = ds.demos.first() {
        policy.bc_state_objects = d.initial.objects.len();
    }
    let mut tc = run.train;
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if let Some(s) = args.seed {
        tc.seed = s;
    }
    if let Some(e) = args.eval_every {
        tc.eval_every = e;
    }
    std::fs::create_dir_all(&args.out)?;
    tc.abort_checkpoint = Some(args.out.join("last_good.ckpt"));
    let mut log = BufWriter::new(File::create(args.out.join("metrics.jsonl"))?);
    let outcome = train(&ds, policy.clone(), &tc, Some(&mut log))?;
    log.flush()?;
    outcome.policy.save(args.out.join(CHECKPOINT))?;
    let last = outcome.epochs.last().context("no epochs ran")?;
    write_json(
        &args.out.join(TRAIN_SUMMARY),
        &json!({
            "metadata": metadata("train", &args)?,
            "task": ds.header.task,
            "dataset_fingerprint": ds.header.fingerprint,
            "demos": ds.demos.len(),
            "frames": ds.num_frames(),
            "policy": policy,
            "train": tc,
            "final_loss": last.mean_loss,
            "final_success": last.success,
            "max_success": outcome.max_success(),
        }),
    )?;
    println!(
        "trained {} for {} epochs: loss {:.4} -> {:.4}; checkpoint {}",
        args.variant,
        outcome.epochs.len(),
        outcome.epochs[0].mean_loss,
        last.mean_loss,
        args.out.join(CHECKPOINT).display()
    );
    Ok(())
}

fn merge_policy(base: PolicyConfig, fields: serde_json::Map<String, Value>) -> Result<PolicyConfig> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().context("policy config is not an object")?;
    for (k, x) in fields {
        if !obj.contains_key(&k) {
            bail!(
                "unknown policy field {k:?}; known: {}",
                obj.keys().cloned().collect::<Vec<_>>().join(", ")
            );
        }
        obj.insert(k, x);
    }
    serde_json::from_value(v).context("invalid policy config")
}

/// Checkpoint file of a path that is either the file or a training directory.
fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn load_policy(p: &Path) -> Result<Policy<f32>> {
    let f = checkpoint_file(p);
    Policy::load(&f).with_context(|| format!("loading checkpoint {}", f.display()))
}

/// Best rate per region recorded during training, if the summary exists
/// and is for `task`.
fn training_max(ckpt: &Path, task: TaskId) -> Option<Value> {
    let dir = checkpoint_file(ckpt).parent()?.to_path_buf();
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(TRAIN_SUMMARY)).ok()?).ok()?;
    (v.get("task")? == &json!(task))
        .then(|| v.get("max_success").cloned())
        .flatten()
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let mut grid = match (&args.grid, args.task) {
        (Some(p), _) => serde_json::from_str::<EvalGrid>(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing grid {}", p.display()))?,
        (None, Some(t)) => EvalGrid::new(t),
        (None, None) => bail!("pass --grid or --task"),
    };
    if let Some(t) = args.task {
        grid.task = t;
    }
    if let Some(n) = args.rollouts {
        grid.n_rollouts = n;
    }
    let mut reports = Vec::new();
    let mut entries = Vec::new();
    for ckpt in &args.ckpt {
        let policy = load_policy(ckpt)?;
        let report = han_core::eval::evaluate(&policy, &grid)?;
        let max = training_max(ckpt, grid.task);
        for c in &report.cells {
            let max_rate = max
                .as_ref()
                .and_then(|m| m.get(c.region.name()))
                .and_then(|v| v.get(0))
                .and_then(Value::as_f64);
            entries.push(TableEntry {
                method: policy.variant().to_string(),
                task: grid.task,
                region: c.region,
                final_rate: c.rate,
                max_rate,
            });
        }
        reports.push(json!({
            "checkpoint": checkpoint_file(ckpt),
            "variant": policy.variant(),
            "report": report,
            "max_over_training": max,
        }));
    }
    let table = render_table(&entries);
    write_json(
        &args.out,
        &json!({
            "metadata": metadata("eval", &args)?,
            "grid": grid,
            "reports": reports,
            "table": table,
        }),
    )?;
    std::fs::write(args.out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn visualize(args: VisualizeArgs) -> Result<()> {
    let policy = load_policy(&args.ckpt)?;
    let (h, w) = policy.config.image;
    let mut c = PolicyController::new(&policy, args.seed);
    let opts = RolloutOptions {
        max_steps: args.max_steps,
        keep_frames: true,
    };
    let rollout = rollout_with(
        &mut c,
        args.task,
        args.region,
        args.seed,
        CameraModel::front_view(h, w),
        opts,
    )?;
    let paths = export_overlays(&rollout, &args.out, args.scale)?;
    let attention = attention_diagnostics(std::slice::from_ref(&rollout));
    write_json(
        &args.out.join("rollout.json"),
        &json!({
            "metadata": metadata("visualize", &args)?,
            "rollout": rollout,
            "attention": attention,
        }),
    )?;
    println!(
        "{} rollout ({} steps, success: {}); {} overlays in {}",
        args.task,
        rollout.len(),
        rollout.success,
        paths.len(),
        args.out.display()
    );
    Ok(())
}

fn teleop(args: TeleopArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| TeleopConfig::default_out(args.task));
    let overlay = match &args.overlay_ckpt {
        Some(p) => Some(Arc::new(load_policy(p)?)),
        None => None,
    };
    let camera = match &overlay {
        Some(p) => CameraModel::front_view(p.config.image.0, p.config.image.1),
        None => CameraModel::front_view(60, 80),
    };
    let config = TeleopConfig {
        region: args.region,
        seed: args.seed,
        camera,
        overlay,
        metadata: metadata("teleop-serve", &args)?,
        ..TeleopConfig::new(args.task, out.clone())
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .context("bad --host/--port")?;
    let server = Server::bind(addr, config)?;
    println!(
        "teleop server for {} on {}; saving to {}",
        args.task,
        server.local_addr()?,
        out.display()
    );
    server.serve()?;
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut reports = diffcore_suite(args.seed)?;
    reports.extend(gradcheck_suite(args.seed)?);
    let mut failed = 0;
    for r in &reports {
        let tag = if r.passed() { "PASS" } else { "FAIL" };
        failed += !r.passed() as usize;
        println!(
            "{tag} {:<24} {:>6} checked  max rel err {:.2e}",
            r.name, r.checked, r.max_rel_err
        );
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", reports.len());
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Collect(a) => collect(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Visualize(a) => visualize(a),
        Command::TeleopServe(a) => teleop(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
