//! Experiment orchestration behind the `comm` binary: pretraining, runs,
//! reports and world dumps, plus the manifests that tie their files together.

pub mod config;
pub mod report;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::Context;
use log::{error, info};
use serde::{Deserialize, Serialize};

use comm_core::io::write_atomic;
use comm_core::runner::{
    load_backbone, save_backbone, write_outputs, BackboneOrigin, EvalModes, Method, RunConfig, Runner, BACKBONE_STEM,
};
use comm_core::synth::{make_stream, Scenario, World};
use comm_core::towers::{pretrain_backbone, Backbone};

pub use config::Config;

pub const MANIFEST_FILE: &str = "manifest.json";

/// A problem with how the tool was called rather than with the numbers.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 0 success, 1 runtime or numeric fault, 2 usage or config error.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(ce) = cause.downcast_ref::<comm_core::Error>() {
            return if ce.is_runtime() { 1 } else { 2 };
        }
    }
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    /// Per time step, training plus evaluation.
    pub step_seconds: Vec<f64>,
}

/// Written last, atomically, into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub status: Status,
    /// Error text when `status` is failed.
    pub fault: Option<String>,
    pub config: Config,
    pub world_seed: u64,
    pub backbone_checkpoint: PathBuf,
    pub backbone_digest: String,
    pub output_dir: PathBuf,
    /// File names relative to `output_dir`.
    pub artifacts: Vec<String>,
    pub timings: Timings,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| UsageError(format!("cannot read {}: {e}", p.display())))?;
        Ok(serde_json::from_str(&text).with_context(|| format!("in {}", p.display()))?)
    }
}

fn remove_stale_manifest(dir: &Path) -> anyhow::Result<()> {
    match std::fs::remove_file(dir.join(MANIFEST_FILE)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub retrieval: f64,
    pub digest: String,
}

/// Pretrain the backbone and save it with a manifest under the configured
/// checkpoint directory.
pub fn cmd_pretrain(cfg: &Config) -> anyhow::Result<PretrainOutcome> {
    let start = Instant::now();
    let dir = &cfg.backbone.checkpoint;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    remove_stale_manifest(dir)?;
    let world = World::build(&cfg.world, &cfg.backbone.encoder)?;
    let bb = pretrain_backbone(
        &cfg.backbone.encoder,
        &cfg.backbone.pretrain,
        &world.pretrain_corpus(),
        cfg.backbone.seed,
    )?;
    let origin = BackboneOrigin {
        world: cfg.world.clone(),
        pretrain: cfg.backbone.pretrain.clone(),
        seed: cfg.backbone.seed,
    };
    save_backbone(dir, &bb, &origin)?;
    let digest = bb.digest()?;
    Manifest {
        command: "pretrain".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        status: Status::Complete,
        fault: None,
        config: cfg.clone(),
        world_seed: cfg.world.seed,
        backbone_checkpoint: dir.clone(),
        backbone_digest: digest.clone(),
        output_dir: dir.clone(),
        artifacts: vec![format!("{BACKBONE_STEM}.json"), format!("{BACKBONE_STEM}.bin")],
        timings: Timings {
            total_seconds: start.elapsed().as_secs_f64(),
            step_seconds: Vec::new(),
        },
    }
    .write(dir)?;
    Ok(PretrainOutcome {
        checkpoint: dir.clone(),
        retrieval: bb.retrieval,
        digest,
    })
}

/// Load the checkpoint named by the config and check it was made for the
/// same world and encoder.
pub fn load_checked_backbone(cfg: &Config) -> anyhow::Result<Backbone> {
    let dir = &cfg.backbone.checkpoint;
    if !dir.join(format!("{BACKBONE_STEM}.json")).exists() {
        return Err(UsageError(format!(
            "no backbone checkpoint in {}; run `comm pretrain` first",
            dir.display()
        ))
        .into());
    }
    let (bb, origin) = load_backbone(dir)?;
    if bb.config != cfg.backbone.encoder || origin.world != cfg.world {
        return Err(UsageError(format!(
            "checkpoint in {} was pretrained for a different world or encoder",
            dir.display()
        ))
        .into());
    }
    Ok(bb)
}

/// Overrides from the command line; `None` keeps the config value.
#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    pub method: Option<Method>,
    pub scenario: Option<Scenario>,
    pub reversed: bool,
    pub eval_mode: Option<EvalModes>,
    /// Seeds to run; empty means the config's seed.
    pub seeds: Vec<u64>,
    /// One entry per variant, each a comma list such as `no-cross,no-self`;
    /// `none` or an empty list keeps every component.
    pub ablations: Vec<String>,
    /// Parent directory of the run directories.
    pub out: Option<PathBuf>,
    pub jobs: usize,
}

/// One fully specified run and where it writes.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub config: Config,
    pub run: RunConfig,
    pub dir: PathBuf,
}

pub fn plan_runs(cfg: &Config, o: &RunOverrides) -> anyhow::Result<Vec<RunPlan>> {
    let seeds = if o.seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        o.seeds.clone()
    };
    let variants = if o.ablations.is_empty() {
        vec![String::new()]
    } else {
        o.ablations.clone()
    };
    let root = o.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let mut plans = Vec::new();
    for v in &variants {
        for &seed in &seeds {
            let mut c = cfg.clone();
            if let Some(m) = o.method {
                c.method.name = m;
            }
            if let Some(s) = o.scenario {
                c.train.scenario = s;
            }
            if o.reversed {
                c.train.reversed = true;
            }
            if let Some(e) = o.eval_mode {
                c.eval.mode = e;
            }
            c.train.seed = seed;
            let mut run = c.run_config();
            for flag in v.split(',').filter(|f| !f.is_empty() && *f != "none") {
                run.ablate(flag).map_err(|e| UsageError(e.to_string()))?;
            }
            c.method = run.method.clone();
            run.validate()?;
            let name = format!(
                "{}-{}{}-seed{}",
                run.label(),
                run.train.scenario,
                if run.train.reversed { "-reversed" } else { "" },
                seed
            );
            plans.push(RunPlan {
                config: c,
                run,
                dir: root.join(name),
            });
        }
    }
    Ok(plans)
}

/// Run one plan to completion, flushing whatever was computed if it faults.
pub fn execute(plan: &RunPlan, world: &World, backbone: Arc<Backbone>) -> anyhow::Result<PathBuf> {
    let start = Instant::now();
    let dir = &plan.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    remove_stale_manifest(dir)?;
    let digest = backbone.digest()?;
    let mut runner = Runner::new(world, backbone, plan.run.clone())?;
    let mut step_seconds = Vec::new();
    let mut fault = None;
    while !runner.is_done() {
        let t = Instant::now();
        if let Err(e) = runner.step() {
            error!("{}: {e}", dir.display());
            fault = Some(e);
            break;
        }
        step_seconds.push(t.elapsed().as_secs_f64());
    }
    let result = runner.result()?;
    let files = write_outputs(dir, &plan.run, &result)?;
    Manifest {
        command: "run".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        status: if fault.is_some() { Status::Failed } else { Status::Complete },
        fault: fault.as_ref().map(|e| e.to_string()),
        config: plan.config.clone(),
        world_seed: plan.config.world.seed,
        backbone_checkpoint: plan.config.backbone.checkpoint.clone(),
        backbone_digest: digest,
        output_dir: dir.clone(),
        artifacts: files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
        timings: Timings {
            total_seconds: start.elapsed().as_secs_f64(),
            step_seconds,
        },
    }
    .write(dir)?;
    match fault {
        Some(e) => Err(anyhow::Error::new(e).context(format!("run {} stopped early", dir.display()))),
        None => Ok(dir.clone()),
    }
}

/// Every planned run, spread over `jobs` worker threads. Returns the run
/// directories in plan order, or the first failure after all runs end.
pub fn cmd_run(cfg: &Config, o: &RunOverrides) -> anyhow::Result<Vec<PathBuf>> {
    let plans = plan_runs(cfg, o)?;
    let backbone = Arc::new(load_checked_backbone(cfg)?);
    let world = World::build(&cfg.world, &cfg.backbone.encoder)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<anyhow::Result<PathBuf>>>> = Mutex::new((0..plans.len()).map(|_| None).collect());
    let jobs = o.jobs.clamp(1, plans.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(plan) = plans.get(i) else { break };
                info!("run {} started", plan.dir.display());
                let r = execute(plan, &world, backbone.clone());
                if r.is_ok() {
                    info!("run {} finished", plan.dir.display());
                }
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut dirs = Vec::new();
    for r in results.into_inner().expect("workers joined") {
        dirs.push(r.expect("every plan ran")?);
    }
    Ok(dirs)
}

/// Write the world's tensors and the task stream of the configured scenario.
pub fn cmd_dump_world(cfg: &Config, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let world = World::build(&cfg.world, &cfg.backbone.encoder)?;
    let mut files = vec![world.to_store()?.save(out, "world")?];
    let stream = make_stream(&world, cfg.train.scenario, cfg.train.reversed, cfg.train.seed)?;
    let p = out.join("stream.json");
    write_atomic(&p, serde_json::to_string_pretty(&stream)?.as_bytes())?;
    files.push(p);
    Ok(files)
}
