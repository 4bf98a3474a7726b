//! Session directories: one optimization run and everything it produced.
//!
//! ```text
//! job.json                       effective job
//! subject.png                    reference as loaded
//! frames/frame_0000.png          every iteration's image
//! thumbnails/frame_0000.png      the same, longest side 256
//! adapters/step_0000.safetensors adapters that produced each frame
//! losses.jsonl                   one FrameRecord per line
//! timing.jsonl                   wall time per step
//! adapter.safetensors            best-frame adapters
//! renders/render_00.png          target prompts (generation)
//! input.png reconstruction.png mask.png edited.png   (editing)
//! summary.json                   final status
//! ```
//!
//! Everything except `timing.jsonl` is a pure function of the job, so two
//! runs of the same job give byte-identical directories.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use imprint_core::adapters::AdapterParams;
use imprint_core::engine::{Clock, FrameSink, GeneratedFrame, StopDecision, StopReason, StopSignal};
use imprint_core::extractors::names;
use imprint_core::image::{BoundingBox, Image};
use imprint_core::segmentation::{MaskOrigin, MaskPipeline, MaskSource};
use imprint_core::workflows::{run_edit, run_generation, Backends, Controls, EditJob, GenerationJob, ReferenceSubject};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::io;
use crate::job::{resolve_path, JobKind, JobSpec, MaskMode};
use crate::models::{load_backbone, load_extractors, ModelCache};
use crate::{Error, Result};

pub const JOB_FILE: &str = "job.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const ADAPTER_FILE: &str = "adapter.safetensors";

pub fn frame_path(i: usize) -> String {
    format!("frames/frame_{i:04}.png")
}

pub fn thumbnail_path(i: usize) -> String {
    format!("thumbnails/frame_{i:04}.png")
}

pub fn adapter_path(i: usize) -> String {
    format!("adapters/step_{i:04}.safetensors")
}

/// One line of `losses.jsonl`, also the payload of a streamed frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub step_index: usize,
    pub loss_total: f64,
    pub loss_components: BTreeMap<String, f64>,
    pub loss_weights: BTreeMap<String, f64>,
    pub image: String,
    pub thumbnail: String,
    pub adapter: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Running,
    StoppedByUser,
    Converged,
    Failed,
    Accepted,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Status::Pending | Status::Running)
    }

    /// Running to the iteration cap counts as converged; the decision keeps
    /// the distinction.
    pub fn from_reason(reason: StopReason) -> Self {
        match reason {
            StopReason::EarlyStop | StopReason::MaxIterations => Status::Converged,
            StopReason::UserStop => Status::StoppedByUser,
            StopReason::Error => Status::Failed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderRecord {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: Status,
    pub kind: JobKind,
    pub backbone: String,
    pub config_hash: String,
    pub decision: Option<StopDecision>,
    pub best_index: Option<usize>,
    pub best_loss: Option<f64>,
    pub frames: usize,
    /// Prompt the adapters were optimized on.
    pub prompt: Option<String>,
    #[serde(default)]
    pub renders: Vec<RenderRecord>,
    pub adapter: Option<String>,
    pub edited: Option<String>,
    pub mask_origin: Option<MaskOrigin>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub error: Option<String>,
    #[serde(default)]
    pub accepted_index: Option<usize>,
}

impl Summary {
    fn empty(spec: &JobSpec, status: Status) -> Self {
        Self {
            status,
            kind: spec.kind,
            backbone: spec.backbone.clone(),
            config_hash: spec.config_hash(),
            decision: None,
            best_index: None,
            best_loss: None,
            frames: 0,
            prompt: None,
            renders: Vec::new(),
            adapter: None,
            edited: None,
            mask_origin: None,
            warnings: Vec::new(),
            error: None,
            accepted_index: None,
        }
    }

    pub fn failed(spec: &JobSpec, frames: usize, message: String) -> Self {
        Self { frames, error: Some(message), ..Self::empty(spec, Status::Failed) }
    }
}

/// Seconds since construction.
pub struct StdClock(Instant);

impl Default for StdClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for StdClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Called with each record and its exact `losses.jsonl` line.
pub type Notify<'a> = Box<dyn FnMut(&FrameRecord, &str) + Send + 'a>;

/// Persists frames as the loop produces them.
pub struct FrameLog<'a> {
    dir: PathBuf,
    backbone_id: String,
    config_hash: String,
    losses: File,
    timing: File,
    notify: Option<Notify<'a>>,
    count: usize,
}

fn open_truncated(path: &Path) -> Result<File> {
    OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| Error::io(path, e))
}

impl<'a> FrameLog<'a> {
    pub fn create(dir: &Path, backbone_id: &str, config_hash: &str, notify: Option<Notify<'a>>) -> Result<Self> {
        for sub in ["frames", "thumbnails", "adapters"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            backbone_id: backbone_id.to_string(),
            config_hash: config_hash.to_string(),
            losses: open_truncated(&dir.join(LOSSES_FILE))?,
            timing: open_truncated(&dir.join(TIMING_FILE))?,
            notify,
            count: 0,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn write(&mut self, frame: &GeneratedFrame, adapters: &AdapterParams) -> Result<()> {
        let i = frame.step_index;
        let record = FrameRecord {
            step_index: i,
            loss_total: frame.loss_total,
            loss_components: frame.loss_components.clone(),
            loss_weights: frame.loss_weights.clone(),
            image: frame_path(i),
            thumbnail: thumbnail_path(i),
            adapter: adapter_path(i),
        };
        io::write_bytes(&self.dir.join(&record.image), &io::png_bytes(&frame.image)?)?;
        io::write_bytes(&self.dir.join(&record.thumbnail), &io::thumbnail_png(&frame.image)?)?;
        let meta = CheckpointMeta { backbone_id: self.backbone_id.clone(), config_hash: self.config_hash.clone(), step_index: i };
        checkpoint::save(adapters, &meta, &self.dir.join(&record.adapter))?;
        let line = serde_json::to_string(&record).expect("records serialize");
        let path = self.dir.join(LOSSES_FILE);
        writeln!(self.losses, "{line}").map_err(|e| Error::io(&path, e))?;
        let timing = serde_json::json!({"step_index": i, "wall_time": frame.wall_time});
        writeln!(self.timing, "{timing}").map_err(|e| Error::io(self.dir.join(TIMING_FILE), e))?;
        self.count += 1;
        if let Some(n) = self.notify.as_mut() {
            n(&record, &line);
        }
        Ok(())
    }
}

impl FrameSink for FrameLog<'_> {
    fn on_frame(&mut self, frame: &GeneratedFrame, adapters: &AdapterParams) -> imprint_core::Result<()> {
        self.write(frame, adapters).map_err(|e| imprint_core::Error::Sink(e.to_string()))
    }
}

/// `losses.jsonl` as records paired with their lines.
pub fn read_frames(dir: &Path) -> Result<Vec<(FrameRecord, String)>> {
    let path = dir.join(LOSSES_FILE);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format(&path, e))?;
        out.push((rec, line));
    }
    Ok(out)
}

pub fn read_summary(dir: &Path) -> Result<Option<Summary>> {
    let path = dir.join(SUMMARY_FILE);
    match fs::read(&path) {
        Ok(b) => Ok(Some(serde_json::from_slice(&b).map_err(|e| Error::format(&path, e))?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(&path, e)),
    }
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).expect("summaries serialize");
    io::write_bytes(&dir.join(SUMMARY_FILE), text.as_bytes())
}

pub fn read_job(dir: &Path) -> Result<JobSpec> {
    let path = dir.join(JOB_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e))
}

pub struct SessionOptions<'a> {
    pub workdir: &'a Path,
    pub cache: &'a ModelCache,
    pub stop: &'a dyn StopSignal,
    pub notify: Option<Notify<'a>>,
}

/// Runs `spec` into `dir` and writes `summary.json`, also on failure.
/// Returns `Err` only when the run could not start or its outputs could not
/// be written; a loop that ends in an error decision yields a failed summary.
pub fn run_session(spec: &JobSpec, dir: &Path, opts: SessionOptions<'_>) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let job = serde_json::to_string_pretty(spec).expect("job specs serialize");
    io::write_bytes(&dir.join(JOB_FILE), job.as_bytes())?;
    match execute(spec, dir, opts) {
        Ok(summary) => {
            write_summary(dir, &summary)?;
            Ok(summary)
        }
        Err(e) => {
            let frames = read_frames(dir).map(|f| f.len()).unwrap_or(0);
            write_summary(dir, &Summary::failed(spec, frames, e.to_string()))?;
            Err(e)
        }
    }
}

fn class_label(spec: &JobSpec) -> Result<String> {
    spec.class.clone().ok_or(imprint_core::Error::NeedsClassHint.into())
}

fn execute(spec: &JobSpec, dir: &Path, opts: SessionOptions<'_>) -> Result<Summary> {
    spec.validate()?;
    let generator = load_backbone(&spec.backbone, spec.optimization.resolution, opts.cache)?;
    let resolution = generator.resolution();
    let extractors = load_extractors(spec.extractors, &spec.backbone, resolution, opts.cache)?;
    let backends = Backends {
        generator: generator.as_ref(),
        dino: extractors.get(names::DINO)?,
        ir: extractors.get(names::IR)?,
    };
    let subject_path = resolve_path(opts.workdir, spec.subject.as_deref().expect("validated"));
    let subject = io::load_image(&subject_path)?;
    io::save_png(&subject, &dir.join("subject.png"))?;

    let config_hash = spec.config_hash();
    let mut log = FrameLog::create(dir, &spec.backbone, &config_hash, opts.notify)?;
    let clock = StdClock::default();
    let mut summary = Summary::empty(spec, Status::Running);

    let (outcome, adapters) = match spec.kind {
        JobKind::Generate => {
            let job = GenerationJob {
                subject: ReferenceSubject::new(subject, spec.class.clone().unwrap_or_default()),
                target_prompts: spec.prompts.clone(),
                simple_prompt: spec.simple_prompt.clone(),
                config: spec.optimization.clone(),
                backbone_id: spec.backbone.clone(),
                render_steps: spec.render_steps,
                ablations: spec.ablations,
            };
            if job.simple_prompt.is_none() && !job.ablations.no_prompt_simplification {
                class_label(spec)?;
            }
            let controls = Controls { stop: opts.stop, sink: &mut log, clock: &clock };
            let out = run_generation(&job, &backends, controls)?;
            summary.prompt = Some(out.stage1_prompt.clone());
            for (k, r) in out.renders.iter().enumerate() {
                let mut rec = RenderRecord { prompt: r.prompt.clone(), path: None, error: r.error.clone() };
                if let Some(img) = &r.image {
                    let rel = format!("renders/render_{k:02}.png");
                    io::save_png(img, &dir.join(&rel))?;
                    rec.path = Some(rel);
                }
                summary.renders.push(rec);
            }
            let adapters = out.outcome.adapters.clone();
            (out.outcome, adapters)
        }
        JobKind::Edit => {
            let class = class_label(spec)?;
            let input_path = resolve_path(opts.workdir, spec.input.as_deref().expect("validated"));
            let mut input = io::load_image(&input_path)?;
            if input.dims() != resolution {
                summary.warnings.push(format!("input resized from {:?} to {:?}", input.dims(), resolution));
                input = input.resized(resolution.0, resolution.1);
            }
            io::save_png(&input, &dir.join("input.png"))?;
            let mask_source = match spec.mask_mode() {
                MaskMode::User => {
                    let p = resolve_path(opts.workdir, spec.mask.as_deref().expect("validated"));
                    let m = io::load_mask(&p)?;
                    MaskSource::User(io::resize_mask(&m, resolution.0, resolution.1))
                }
                MaskMode::Box => {
                    let [x0, y0, x1, y1] = spec.bbox.expect("validated");
                    MaskSource::Box(BoundingBox::new(x0, y0, x1, y1)?)
                }
                MaskMode::None => MaskSource::None,
                MaskMode::Auto => MaskSource::Auto,
            };
            let job = EditJob {
                input_image: input,
                subject: ReferenceSubject::new(subject, class),
                config: spec.optimization.clone(),
                backbone_id: spec.backbone.clone(),
                inversion: spec.inversion.clone(),
                mask_source,
                prompt: spec.edit_prompt.clone(),
                ablations: spec.ablations,
            };
            summary.prompt = Some(job.prompt());
            let controls = Controls { stop: opts.stop, sink: &mut log, clock: &clock };
            let out = run_edit(&job, &backends, &MaskPipeline::default(), controls)?;
            io::save_png(&out.inversion.reconstruction.clamped(), &dir.join("reconstruction.png"))?;
            io::save_mask(&out.mask.subject, &dir.join("mask.png"))?;
            summary.mask_origin = Some(out.mask.origin);
            summary.warnings.extend(out.mask.warnings.iter().cloned());
            if let Some(img) = &out.edited {
                io::save_png(img, &dir.join("edited.png"))?;
                summary.edited = Some("edited.png".into());
            }
            let adapters = out.outcome.adapters.clone();
            (out.outcome, adapters)
        }
    };

    summary.frames = log.count();
    summary.status = Status::from_reason(outcome.decision.reason);
    if outcome.decision.reason == StopReason::Error {
        summary.error = outcome.decision.message.clone();
    }
    if outcome.best_loss.is_finite() && summary.frames > 0 {
        summary.best_index = Some(outcome.best_index);
        summary.best_loss = Some(outcome.best_loss);
        let meta = CheckpointMeta { backbone_id: spec.backbone.clone(), config_hash, step_index: outcome.best_index };
        checkpoint::save(&adapters, &meta, &dir.join(ADAPTER_FILE))?;
        summary.adapter = Some(ADAPTER_FILE.into());
    }
    summary.decision = Some(outcome.decision);
    Ok(summary)
}

/// Best frames of several sessions side by side.
pub fn best_frames_grid(dirs: &[PathBuf]) -> Result<Option<Image>> {
    let mut images = Vec::new();
    for d in dirs {
        if let Some(i) = read_summary(d)?.and_then(|s| s.best_index) {
            images.push(io::load_image(&d.join(frame_path(i)))?);
        }
    }
    Ok(io::grid(&images))
}
