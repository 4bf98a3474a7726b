//! Command-line entry points.
//!
//! Job settings come from three layers, later winning field by field:
//! backbone defaults, the `--config` TOML file, then flags. Relative paths,
//! including those inside the job file, resolve against `--workdir`.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::bench::{parse_manifest, render_table, run_benchmark, write_report};
use crate::job::{load_toml, overlay, resolve, resolve_path, ExtractorMode, JobKind, JobSpec, MaskMode};
use crate::models::{load_extractors, ModelCache, OFFLINE_RESOLUTION};
use crate::service::{self, ServiceConfig};
use crate::session::{run_session, SessionOptions, Status};
use crate::sweep::run_sweep;
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "imprint", version, about = "Single-image subject personalization by inference-time adapter optimization")]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Optimize adapters on a subject image, then render the target prompts.
    Generate(RunArgs),
    /// Swap the subject of an input image for the reference subject.
    Edit(RunArgs),
    /// Run one job over several seeds.
    Sweep(SweepArgs),
    /// Score finished outputs listed in a manifest.
    Eval(EvalArgs),
    /// Serve sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub job: JobArgs,
    /// Session directory [default: sessions/<kind>-<config hash>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the effective job and exit without loading models.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Generate,
    Edit,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub job: JobArgs,
    #[arg(long, value_enum, default_value = "generate")]
    pub kind: KindArg,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// Sweep directory [default: sweeps/<kind>-<config hash>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// JSONL manifest; its relative paths resolve against its own directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report directory [default: the manifest's directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `offline` scores with seeded stand-in extractors.
    #[arg(long, value_enum, default_value = "offline")]
    pub extractors: ModeArg,
    /// Seed for KID subset sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = service::BIND_ENV, default_value = service::DEFAULT_BIND)]
    pub bind: String,
    /// Session root [default: <workdir>/sessions].
    #[arg(long, env = service::ROOT_ENV)]
    pub root: Option<PathBuf>,
    #[arg(long, env = service::WORKERS_ENV, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Auto,
    Offline,
    Pixel,
    Cache,
}

impl From<ModeArg> for ExtractorMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Auto => ExtractorMode::Auto,
            ModeArg::Offline => ExtractorMode::Offline,
            ModeArg::Pixel => ExtractorMode::Pixel,
            ModeArg::Cache => ExtractorMode::Cache,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskArg {
    Auto,
    User,
    Box,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HEIGHTxWIDTH, e.g. 512x512")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(h)?, n(w)?))
}

/// Flags mirroring the job file. Unset flags leave lower layers alone.
#[derive(Args, Debug, Default)]
pub struct JobArgs {
    /// TOML job file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sdxl-turbo, sd-turbo, flux-schnell, sana or toy.
    #[arg(long)]
    pub backbone: Option<String>,
    /// Reference image of the subject.
    #[arg(long)]
    pub subject: Option<PathBuf>,
    #[arg(long)]
    pub class: Option<String>,
    /// Target prompt; repeat for several.
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    #[arg(long)]
    pub simple_prompt: Option<String>,
    #[arg(long)]
    pub render_steps: Option<usize>,
    /// Image to edit.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Subject mask for the input image.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mask_source: Option<MaskArg>,
    /// x0,y0,x1,y1
    #[arg(long, value_delimiter = ',')]
    pub bbox: Option<Vec<usize>>,
    #[arg(long)]
    pub edit_prompt: Option<String>,
    #[arg(long, value_enum)]
    pub extractors: Option<ModeArg>,

    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, visible_alias = "lr")]
    pub learning_rate: Option<f64>,
    /// DINO distance weight.
    #[arg(long)]
    pub loss_a: Option<f64>,
    /// IR distance weight.
    #[arg(long)]
    pub loss_b: Option<f64>,
    /// Background preservation weight.
    #[arg(long)]
    pub loss_c: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Required improvement in percent over the window.
    #[arg(long)]
    pub early_stop_x: Option<f64>,
    /// Early-stop window length.
    #[arg(long)]
    pub early_stop_n: Option<usize>,
    #[arg(long)]
    pub truncation_depth: Option<usize>,
    #[arg(long)]
    pub denoise_steps: Option<usize>,
    /// HEIGHTxWIDTH
    #[arg(long, value_parser = parse_resolution)]
    pub resolution: Option<(usize, usize)>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Adapter target layer; repeat for several [default: every attention projection].
    #[arg(long = "target-layer")]
    pub target_layers: Vec<String>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub frame_stride: Option<usize>,

    #[arg(long)]
    pub inversion_strength: Option<f64>,
    #[arg(long)]
    pub renoise_iterations: Option<usize>,

    /// Optimize on the first target prompt instead of the simple prompt.
    #[arg(long)]
    pub no_prompt_simplification: bool,
    /// Drop the background loss.
    #[arg(long)]
    pub no_bg: bool,
    #[arg(long)]
    pub drop_dino: bool,
    #[arg(long)]
    pub drop_ir: bool,
}

fn path_str(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

impl JobArgs {
    /// The flag layer as a JSON object.
    pub fn overlay(&self) -> Value {
        let mut pairs: Vec<(&'static str, Value)> = Vec::new();
        let mut put = |k: &'static str, v: Option<Value>| {
            if let Some(v) = v {
                pairs.push((k, v));
            }
        };
        put("backbone", self.backbone.clone().map(Value::from));
        put("subject", self.subject.as_deref().map(path_str));
        put("class", self.class.clone().map(Value::from));
        put("prompts", (!self.prompts.is_empty()).then(|| json!(self.prompts)));
        put("simple_prompt", self.simple_prompt.clone().map(Value::from));
        put("render_steps", self.render_steps.map(Value::from));
        put("input", self.input.as_deref().map(path_str));
        put("mask", self.mask.as_deref().map(path_str));
        put(
            "mask_source",
            self.mask_source.map(|m| {
                json!(match m {
                    MaskArg::Auto => MaskMode::Auto,
                    MaskArg::User => MaskMode::User,
                    MaskArg::Box => MaskMode::Box,
                    MaskArg::None => MaskMode::None,
                })
            }),
        );
        put("bbox", self.bbox.as_ref().map(|b| json!(b)));
        put("edit_prompt", self.edit_prompt.clone().map(Value::from));
        put("extractors", self.extractors.map(|m| json!(ExtractorMode::from(m))));
        put("optimization.seed", self.seed.map(Value::from));
        put("optimization.learning_rate", self.learning_rate.map(Value::from));
        put("optimization.loss_weights.a", self.loss_a.map(Value::from));
        put("optimization.loss_weights.b", self.loss_b.map(Value::from));
        put("optimization.loss_weights.c", self.loss_c.map(Value::from));
        put("optimization.max_iterations", self.max_iterations.map(Value::from));
        put("optimization.early_stop.x_percent", self.early_stop_x.map(Value::from));
        put("optimization.early_stop.n_window", self.early_stop_n.map(Value::from));
        put("optimization.truncation_depth", self.truncation_depth.map(Value::from));
        put("optimization.denoise_steps", self.denoise_steps.map(Value::from));
        put("optimization.resolution", self.resolution.map(|r| json!([r.0, r.1])));
        put("optimization.rank", self.rank.map(Value::from));
        put("optimization.target_layers", (!self.target_layers.is_empty()).then(|| json!(self.target_layers)));
        match self.optimizer {
            Some(OptimizerArg::Sgd) => put("optimization.optimizer", Some(json!({"kind": "sgd"}))),
            Some(OptimizerArg::Adam) => put("optimization.optimizer.kind", Some(json!("adam"))),
            None => {}
        }
        put("optimization.optimizer.beta1", self.adam_beta1.map(Value::from));
        put("optimization.optimizer.beta2", self.adam_beta2.map(Value::from));
        put("optimization.optimizer.eps", self.adam_eps.map(Value::from));
        put("optimization.frame_stride", self.frame_stride.map(Value::from));
        put("inversion.strength", self.inversion_strength.map(Value::from));
        put("inversion.renoise_iterations", self.renoise_iterations.map(Value::from));
        put("ablations.no_prompt_simplification", self.no_prompt_simplification.then_some(Value::Bool(true)));
        put("ablations.no_bg", self.no_bg.then_some(Value::Bool(true)));
        put("ablations.drop_dino", self.drop_dino.then_some(Value::Bool(true)));
        put("ablations.drop_ir", self.drop_ir.then_some(Value::Bool(true)));
        overlay(pairs)
    }

    /// Defaults, then the job file, then flags.
    pub fn resolve(&self, kind: JobKind, workdir: &Path) -> Result<JobSpec> {
        let mut layers = Vec::new();
        if let Some(c) = &self.config {
            layers.push(load_toml(&resolve_path(workdir, c))?);
        }
        layers.push(self.overlay());
        resolve(kind, &layers)
    }
}

fn kind_name(kind: JobKind) -> &'static str {
    match kind {
        JobKind::Generate => "generate",
        JobKind::Edit => "edit",
    }
}

fn default_dir(workdir: &Path, group: &str, spec: &JobSpec) -> PathBuf {
    workdir.join(group).join(format!("{}-{}", kind_name(spec.kind), &spec.config_hash()[..12]))
}

/// How a command ended, for the exit code.
pub enum Outcome {
    Done,
    /// Ran but did not succeed; the path names the directory to inspect.
    Failed(String, Option<PathBuf>),
}

fn print_dry_run(spec: &JobSpec) {
    println!("{}", serde_json::to_string_pretty(spec).expect("job specs serialize"));
    println!("config_hash: {}", spec.config_hash());
}

fn run_job(kind: JobKind, args: &RunArgs, workdir: &Path) -> Result<Outcome> {
    let spec = args.job.resolve(kind, workdir)?;
    if args.dry_run {
        print_dry_run(&spec);
        return Ok(Outcome::Done);
    }
    let dir = args.out.as_ref().map_or_else(|| default_dir(workdir, "sessions", &spec), |o| resolve_path(workdir, o));
    let cache = ModelCache::from_env();
    let opts = SessionOptions { workdir, cache: &cache, stop: &imprint_core::engine::NeverStop, notify: None };
    let summary = match run_session(&spec, &dir, opts) {
        Ok(s) => s,
        Err(e) if e.is_user_error() => return Err(e),
        Err(e) => return Ok(Outcome::Failed(e.to_string(), Some(dir))),
    };
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    for r in &summary.renders {
        if let Some(err) = &r.error {
            eprintln!("warning: render of {:?} failed: {err}", r.prompt);
        }
    }
    println!("session: {}", dir.display());
    println!("status: {}", serde_json::to_value(summary.status).expect("status").as_str().unwrap_or_default());
    if let (Some(i), Some(l)) = (summary.best_index, summary.best_loss) {
        println!("best frame: {i} (loss {l:.6})");
    }
    if summary.status == Status::Failed {
        return Ok(Outcome::Failed(summary.error.unwrap_or_else(|| "session failed".into()), Some(dir)));
    }
    Ok(Outcome::Done)
}

fn run_sweep_cmd(args: &SweepArgs, workdir: &Path) -> Result<Outcome> {
    let kind = match args.kind {
        KindArg::Generate => JobKind::Generate,
        KindArg::Edit => JobKind::Edit,
    };
    let spec = args.job.resolve(kind, workdir)?;
    if args.dry_run {
        print_dry_run(&spec);
        return Ok(Outcome::Done);
    }
    let out = args.out.as_ref().map_or_else(|| default_dir(workdir, "sweeps", &spec), |o| resolve_path(workdir, o));
    let report = run_sweep(&spec, &args.seeds, args.workers, &out, workdir, &ModelCache::from_env())?;
    let mut failed = 0;
    for s in &report.seeds {
        let status = serde_json::to_value(s.status).expect("status");
        println!("seed {}: {} ({})", s.seed, status.as_str().unwrap_or_default(), s.dir.display());
        if let Some(e) = &s.error {
            eprintln!("  {e}");
        }
        failed += usize::from(s.status == Status::Failed);
    }
    if let Some(g) = &report.grid {
        println!("grid: {}", g.display());
    }
    if failed > 0 {
        return Ok(Outcome::Failed(format!("{failed} of {} seeds failed", report.seeds.len()), Some(out)));
    }
    Ok(Outcome::Done)
}

fn run_eval(args: &EvalArgs, workdir: &Path) -> Result<Outcome> {
    let manifest = resolve_path(workdir, &args.manifest);
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let records = parse_manifest(&text, &manifest)?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let extractors = load_extractors(args.extractors.into(), "", OFFLINE_RESOLUTION, &ModelCache::from_env())?;
    if matches!(args.extractors, ModeArg::Offline | ModeArg::Pixel) {
        eprintln!("note: scores come from stand-in extractors, not pretrained networks");
    }
    let report = run_benchmark(&records, &base, &extractors.metric_suite(args.seed)?)?;
    let out = args.out.as_ref().map_or(base, |o| resolve_path(workdir, o));
    write_report(&report, &out)?;
    print!("{}", render_table(&report));
    println!("report: {}", out.join("report.json").display());
    Ok(Outcome::Done)
}

fn run_serve(args: &ServeArgs, workdir: &Path) -> Result<Outcome> {
    let config = ServiceConfig {
        root: args.root.as_ref().map_or_else(|| workdir.join("sessions"), |r| resolve_path(workdir, r)),
        workdir: workdir.to_path_buf(),
        workers: args.workers,
        cache: ModelCache::from_env(),
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Runtime(format!("tokio runtime: {e}")))?;
    rt.block_on(service::serve(config, &args.bind))?;
    Ok(Outcome::Done)
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let w = &cli.workdir;
    match &cli.command {
        Command::Generate(a) => run_job(JobKind::Generate, a, w),
        Command::Edit(a) => run_job(JobKind::Edit, a, w),
        Command::Sweep(a) => run_sweep_cmd(a, w),
        Command::Eval(a) => run_eval(a, w),
        Command::Serve(a) => run_serve(a, w),
    }
}

fn usage_for(args: &[OsString]) -> String {
    let mut cmd = Cli::command();
    let name = args.iter().skip(1).filter_map(|a| a.to_str()).find(|a| !a.starts_with('-'));
    match name.and_then(|n| cmd.find_subcommand_mut(n)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with(args: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::Failed(msg, dir)) => {
            eprintln!("error: {msg}");
            if let Some(d) = dir {
                eprintln!("session directory: {}", d.display());
            }
            2
        }
        Err(e) if e.is_user_error() => {
            eprintln!("error: {e}\n\n{}", usage_for(&args));
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("imprint").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_reach_every_optimization_field() {
        let cli = parse(&[
            "generate", "--subject", "s.png", "--class", "dog", "--backbone", "toy", "--seed", "3", "--lr", "0.5",
            "--loss-a", "2", "--loss-b", "3", "--loss-c", "4", "--max-iterations", "20", "--early-stop-x", "1.5",
            "--early-stop-n", "4", "--truncation-depth", "2", "--denoise-steps", "3", "--resolution", "16x12",
            "--rank", "2", "--target-layer", "decoder.proj", "--adam-beta1", "0.8", "--adam-beta2", "0.99",
            "--adam-eps", "1e-6", "--frame-stride", "2",
        ]);
        let Command::Generate(a) = &cli.command else { panic!() };
        let o = a.job.resolve(JobKind::Generate, Path::new(".")).unwrap().optimization;
        let expected: Value = json!({
            "seed": 3, "learning_rate": 0.5, "loss_weights": {"a": 2.0, "b": 3.0, "c": 4.0}, "max_iterations": 20,
            "early_stop": {"x_percent": 1.5, "n_window": 4}, "truncation_depth": 2, "denoise_steps": 3,
            "resolution": [16, 12], "rank": 2, "target_layers": ["decoder.proj"],
            "optimizer": {"kind": "adam", "beta1": 0.8, "beta2": 0.99, "eps": 1e-6}, "frame_stride": 2
        });
        assert_eq!(serde_json::to_value(&o).unwrap(), expected);
    }

    #[test]
    fn sgd_and_ablations() {
        let cli = parse(&["edit", "--subject", "s.png", "--input", "x.png", "--optimizer", "sgd", "--no-bg", "--drop-ir", "--mask-source", "box", "--bbox", "1,2,3,4"]);
        let Command::Edit(a) = &cli.command else { panic!() };
        let spec = a.job.resolve(JobKind::Edit, Path::new(".")).unwrap();
        assert_eq!(spec.optimization.optimizer, imprint_core::optim::OptimizerKind::Sgd);
        assert!(spec.ablations.no_bg && spec.ablations.drop_ir && !spec.ablations.drop_dino);
        assert_eq!(spec.bbox, Some([1, 2, 3, 4]));
    }

    #[test]
    fn file_then_flags() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("job.toml"), "backbone = \"toy\"\nsubject = \"a.png\"\n[optimization]\nrank = 3\nseed = 9\n").unwrap();
        let cli = parse(&["generate", "--config", "job.toml", "--seed", "1"]);
        let Command::Generate(a) = &cli.command else { panic!() };
        let spec = a.job.resolve(JobKind::Generate, tmp.path()).unwrap();
        assert_eq!((spec.optimization.rank, spec.optimization.seed), (3, 1));
        assert_eq!(spec.subject.as_deref(), Some(Path::new("a.png")));
    }

    #[test]
    fn resolution_parser() {
        assert_eq!(parse_resolution("512x768"), Ok((512, 768)));
        assert!(parse_resolution("512").is_err());
    }
}
