//! Command-line front end for the expert-layer toolkit.
//!
//! Exit status: 0 on success, 2 for usage errors, 3 for invalid
//! configuration or unreadable checkpoints, 1 for any other failure.

pub mod checkpoint;
pub mod config;
pub mod route_map;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use biomoe_core::landmark::{blend_landmarks, project_2d, read_landmarks, write_landmarks, LandmarkSet};
use biomoe_core::lifecycle::{allocate_ranks, consensus_init, rank::energy_rank, TaskExpert};
use biomoe_core::numerics::svd;
use biomoe_core::pair_filter::{filter_pairs, MetricTable};
use biomoe_core::trainer::{
    dense_init, grad_check, gradient_conflict, interference_report, make_synthetic_suite, stage1_train, stage2_train,
    SyntheticSuite,
};
use biomoe_core::{assemble_unified, Error, TaskId};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "biomoe", version, about = "Structure-aware mixture-of-experts toolkit")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one isolated dense model per task.
    TrainStage1,
    /// Assemble the expert model from a Stage-I checkpoint.
    InitStage2 {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Jointly fine-tune an assembled model.
    TrainStage2 {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck(ModelArgs),
    /// Specialist vs shared vs expert model on the synthetic suite.
    Interference,
    /// Export per-expert routing heatmaps.
    RouteMap {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Grid as WIDTHxHEIGHT.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<(usize, usize)>,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Residual spectra and allocated ranks of a Stage-I checkpoint.
    RankReport {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Blend landmark set A (expression) with B's proportions.
    BlendLandmarks {
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
    },
    /// Percentile-filter a metric table.
    FilterPairs {
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    let h = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    Ok((w, h))
}

/// An error with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Format(_) | Error::UnknownTask(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        // Keep the category of a wrapped core error.
        let code = error.downcast_ref::<Error>().map_or(EXIT_RUNTIME, |e| match e {
            Error::Config(_) | Error::Format(_) | Error::UnknownTask(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        });
        Failure { code, error }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_failure(msg: impl Into<String>) -> Failure {
    Error::Config(msg.into()).into()
}

/// Parses arguments, runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

/// Resolves the effective configuration: file, then flag overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create {}", cfg.out_dir.display()))?;
    match &cli.command {
        Command::TrainStage1 => train_stage1(&cfg),
        Command::InitStage2 { checkpoint } => init_stage2(&cfg, checkpoint.as_deref()),
        Command::TrainStage2 { checkpoint } => train_stage2(&cfg, checkpoint.as_deref()),
        Command::GradCheck(m) => run_grad_check(&cfg, m),
        Command::Interference => run_interference(&cfg),
        Command::RouteMap {
            model,
            landmarks,
            grid,
            layer,
        } => run_route_map(&cfg, model, landmarks.as_deref(), *grid, *layer),
        Command::RankReport { checkpoint } => rank_report(&cfg, checkpoint.as_deref()),
        Command::BlendLandmarks { a, b } => run_blend(&cfg, a.as_deref(), b.as_deref()),
        Command::FilterPairs { table } => run_filter(&cfg, table.as_deref()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).context("cannot serialize report")?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn suite(cfg: &RunConfig) -> CliResult<SyntheticSuite> {
    Ok(make_synthetic_suite(&cfg.suite, cfg.seed)?)
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn train_stage1(cfg: &RunConfig) -> CliResult<()> {
    let suite = suite(cfg)?;
    let cos = gradient_conflict(&suite, &dense_init(cfg.suite.d_model, cfg.moe.d_inner, cfg.seed))?;
    let bundle = stage1_train(&suite, cfg.moe.d_inner, &cfg.stage1, cfg.seed)?;
    checkpoint::save_stage1(&bundle, &out(cfg, "stage1.bmoe"))?;
    let tasks: Vec<_> = bundle
        .tasks
        .iter()
        .map(|t| {
            json!({
                "id": t.id.as_str(),
                "initial_loss": t.meta.initial_loss,
                "final_loss": t.meta.final_loss,
                "probe_grad_norm": t.meta.probe_grad_norm,
            })
        })
        .collect();
    let min_cos = cos.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    write_json(
        &out(cfg, "stage1_report.json"),
        &json!({
            "seed": cfg.seed,
            "steps": cfg.stage1.steps,
            "lr": cfg.stage1.lr,
            "tasks": tasks,
            "gradient_cosine_at_init": cos,
            "min_gradient_cosine": min_cos,
        }),
    )?;
    println!("stage 1: {} tasks trained, checkpoint {}", bundle.tasks.len(), out(cfg, "stage1.bmoe").display());
    Ok(())
}

fn init_stage2(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let path = checkpoint.map_or_else(|| out(cfg, "stage1.bmoe"), Path::to_path_buf);
    let bundle = checkpoint::load_stage1(&path)?;
    let model = assemble_unified(&bundle, &cfg.rank_policy(), &cfg.moe_config())?;
    checkpoint::save_unified(&model, &out(cfg, "stage2_init.bmoe"))?;
    let ranks: Vec<_> = model
        .tasks()
        .slots()
        .iter()
        .map(|s| {
            let r: Vec<_> = s.expert.loras().iter().map(|l| l.ranks()).collect();
            json!({ "id": s.id.as_str(), "ranks": r })
        })
        .collect();
    write_json(
        &out(cfg, "init_report.json"),
        &json!({ "seed": cfg.seed, "policy": cfg.rank_policy(), "tasks": ranks }),
    )?;
    println!("assembled {} task slots", model.tasks().len());
    Ok(())
}

fn train_stage2(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let path = checkpoint.map_or_else(|| out(cfg, "stage2_init.bmoe"), Path::to_path_buf);
    let mut model = checkpoint::load_unified(&path)?;
    model.set_seed(cfg.seed);
    let suite = suite(cfg)?;
    let report = stage2_train(&mut model, &suite, &cfg.stage2)?;
    checkpoint::save_unified(&model, &out(cfg, "stage2.bmoe"))?;
    write_json(&out(cfg, "train_report.json"), &report)?;
    println!("stage 2: final losses {:?}", report.final_losses);
    Ok(())
}

fn pick_task(model: &biomoe_core::UnifiedModel, task: Option<&str>) -> CliResult<TaskId> {
    match task {
        Some(t) => {
            let id = TaskId::new(t);
            model.tasks().index_of(&id)?;
            Ok(id)
        }
        None => model
            .tasks()
            .ids()
            .next()
            .cloned()
            .ok_or_else(|| config_failure("model holds no tasks")),
    }
}

fn run_grad_check(cfg: &RunConfig, args: &ModelArgs) -> CliResult<()> {
    let path = args.checkpoint.clone().unwrap_or_else(|| out(cfg, "stage2_init.bmoe"));
    let model = checkpoint::load_unified(&path)?;
    let id = pick_task(&model, args.task.as_deref())?;
    let idx = model.tasks().index_of(&id)?;
    let suite = suite(cfg)?;
    let data = suite
        .tasks
        .iter()
        .find(|t| t.id == id)
        .or_else(|| suite.tasks.get(idx))
        .ok_or_else(|| config_failure(format!("no data for task `{id}`")))?;
    let sample = &data.samples[cfg.grad_check.sample];
    let report = grad_check(&model, idx, sample, cfg.seed, cfg.grad_check.tolerance)?;
    write_json(&out(cfg, "grad_check.json"), &json!({ "seed": cfg.seed, "report": report }))?;
    println!(
        "grad-check {}: max relative error {:.3e} over {} parameters (tolerance {:e})",
        if report.passed { "passed" } else { "FAILED" },
        report.max_rel_error,
        report.num_params,
        report.tolerance
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_RUNTIME,
            error: anyhow::anyhow!("gradient check failed at `{}`", report.worst_param),
        })
    }
}

fn run_interference(cfg: &RunConfig) -> CliResult<()> {
    let suite = suite(cfg)?;
    let report = interference_report(&suite, &cfg.interference())?;
    write_json(
        &out(cfg, "interference.json"),
        &json!({
            "report": report,
            "relative_gap": report.relative_gap(),
            "naive_is_worst": report.naive_is_worst(),
            "within_tolerance": report.within_tolerance(),
        }),
    )?;
    println!("{:<10} {:>14} {:>14} {:>14}", "task", "task-specific", "naive", "biomoe");
    for (i, t) in report.tasks.iter().enumerate() {
        println!(
            "{:<10} {:>14.6} {:>14.6} {:>14.6}",
            t, report.task_specific[i], report.naive_sharing[i], report.biomoe[i]
        );
    }
    Ok(())
}

fn read_landmark_file(path: &Path) -> CliResult<LandmarkSet> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(read_landmarks(file)?)
}

fn run_route_map(
    cfg: &RunConfig,
    args: &ModelArgs,
    landmarks: Option<&Path>,
    grid: Option<(usize, usize)>,
    layer: Option<usize>,
) -> CliResult<()> {
    let path = args.checkpoint.clone().unwrap_or_else(|| out(cfg, "stage2.bmoe"));
    let model = checkpoint::load_unified(&path)?;
    let id = pick_task(&model, args.task.as_deref())?;
    let lm_path = landmarks
        .map(Path::to_path_buf)
        .or_else(|| cfg.route_map.landmarks.clone())
        .ok_or_else(|| config_failure("route-map needs --landmarks or route_map.landmarks"))?;
    let lm = read_landmark_file(&lm_path)?;
    let (w, h) = grid.unwrap_or((cfg.route_map.width, cfg.route_map.height));
    let layer = layer.unwrap_or(cfg.route_map.layer);
    let map = route_map::compute_route_map(&model, &id, &lm, w, h, layer, cfg.seed)?;
    let files = map.write(&cfg.out_dir)?;
    write_json(
        &out(cfg, "route_map.json"),
        &json!({ "seed": cfg.seed, "task": id.as_str(), "layer": layer, "width": w, "height": h,
                 "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>() }),
    )?;
    println!("wrote {} routing maps for task `{id}`", map.num_experts());
    Ok(())
}

fn rank_report(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let path = checkpoint.map_or_else(|| out(cfg, "stage1.bmoe"), Path::to_path_buf);
    let bundle = checkpoint::load_stage1(&path)?;
    let global = consensus_init(&bundle)?;
    let ranks = allocate_ranks(&bundle, &global, &cfg.rank_policy())?;
    let mut rows = Vec::new();
    for (t, r) in bundle.tasks.iter().zip(&ranks) {
        let s1 = svd(&t.model.ffn.w1.sub(&global.w1)?)?.s;
        let s2 = svd(&t.model.ffn.w2.sub(&global.w2)?)?.s;
        let energy = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
        rows.push(json!({
            "id": t.id.as_str(),
            "ranks": r,
            "residual_energy": [energy(&s1), energy(&s2)],
            "singular_values": [s1, s2],
            "rank_at_tau": [energy_rank(&s1, cfg.moe.tau), energy_rank(&s2, cfg.moe.tau)],
        }));
    }
    write_json(
        &out(cfg, "rank_report.json"),
        &json!({ "seed": cfg.seed, "policy": cfg.rank_policy(), "tasks": rows }),
    )?;
    for (t, r) in bundle.tasks.iter().zip(&ranks) {
        println!("{:<10} ranks {:?}", t.id.as_str(), r);
    }
    Ok(())
}

fn run_blend(cfg: &RunConfig, a: Option<&Path>, b: Option<&Path>) -> CliResult<()> {
    let a = a
        .map(Path::to_path_buf)
        .or_else(|| cfg.blend.a.clone())
        .ok_or_else(|| config_failure("blend-landmarks needs --a or blend.a"))?;
    let b = b
        .map(Path::to_path_buf)
        .or_else(|| cfg.blend.b.clone())
        .ok_or_else(|| config_failure("blend-landmarks needs --b or blend.b"))?;
    let (la, lb) = (read_landmark_file(&a)?, read_landmark_file(&b)?);
    let blended = blend_landmarks(&la, &lb)?;
    let file = std::fs::File::create(out(cfg, "blended.csv")).context("cannot create blended.csv")?;
    write_landmarks(&blended, file)?;
    let mut flat = String::from("region,u,v\n");
    for (r, [u, v]) in project_2d(&blended) {
        flat.push_str(&format!("{r},{u:?},{v:?}\n"));
    }
    std::fs::write(out(cfg, "blended_2d.csv"), flat).context("cannot write blended_2d.csv")?;
    write_json(
        &out(cfg, "blend_report.json"),
        &json!({
            "seed": cfg.seed,
            "a": la.proportions()?,
            "b": lb.proportions()?,
            "blended": blended.proportions()?,
        }),
    )?;
    println!("blended {} landmarks", blended.len());
    Ok(())
}

fn run_filter(cfg: &RunConfig, table: Option<&Path>) -> CliResult<()> {
    let path = table
        .map(Path::to_path_buf)
        .or_else(|| cfg.filter.table.clone())
        .ok_or_else(|| config_failure("filter-pairs needs --table or filter.table"))?;
    let file = std::fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
    let table = MetricTable::from_csv(file)?;
    let outcome = filter_pairs(&table, &cfg.filter_spec())?;
    let lines = |ids: &[String]| ids.iter().map(|s| format!("{s}\n")).collect::<String>();
    std::fs::write(out(cfg, "kept.txt"), lines(&outcome.kept)).context("cannot write kept.txt")?;
    std::fs::write(out(cfg, "rejected.txt"), lines(&outcome.rejected)).context("cannot write rejected.txt")?;
    write_json(&out(cfg, "filter_report.json"), &json!({ "seed": cfg.seed, "outcome": outcome }))?;
    println!("{}", outcome.summary());
    Ok(())
}

/// Convenience for tests: the task experts' ranks of a model.
pub fn task_ranks(model: &biomoe_core::UnifiedModel) -> Vec<Vec<(usize, usize)>> {
    model
        .tasks()
        .slots()
        .iter()
        .map(|s| match &s.expert {
            TaskExpert::Lora(l) => vec![l.ranks()],
            TaskExpert::Composed(c) => c.experts.iter().map(|l| l.ranks()).collect(),
        })
        .collect()
}
