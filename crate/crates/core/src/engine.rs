//! The inference-time optimization loop.
//!
//! Each iteration generates an image from a fixed latent with the current
//! adapters, scores it, backpropagates to the adapters and takes one
//! optimizer step. Frames are handed to a [`FrameSink`] as soon as they are
//! produced; a [`StopSignal`] is polled between iterations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterParams;
use crate::autodiff::Tape;
use crate::backbone::{check_request, resolve_targets, GenerateRequest, Generator, GeneratorHandle, Latent};
use crate::image::Image;
use crate::losses::{LossFn, LossReport, LossWeights};
use crate::optim::{Optimizer, OptimizerKind};
use crate::{rng, Error, Result};

/// Stagnation rule: stop once the last `n_window` losses fail to improve on
/// everything before them by more than `x_percent` percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub x_percent: f64,
    pub n_window: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { x_percent: 3.0, n_window: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub max_iterations: usize,
    pub early_stop: EarlyStop,
    /// Denoising steps backpropagated through (`K`).
    pub truncation_depth: usize,
    /// Denoising steps per generated frame (`t`).
    pub denoise_steps: usize,
    /// `(height, width)` in pixels.
    pub resolution: (usize, usize),
    pub rank: usize,
    /// `None` targets every attention projection.
    pub target_layers: Option<Vec<String>>,
    pub optimizer: OptimizerKind,
    /// Keep every `frame_stride`-th frame in the returned history.
    pub frame_stride: usize,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 3e-4,
            loss_weights: LossWeights::default(),
            max_iterations: 60,
            early_stop: EarlyStop::default(),
            truncation_depth: 1,
            denoise_steps: 1,
            resolution: (512, 512),
            rank: 16,
            target_layers: None,
            optimizer: OptimizerKind::default(),
            frame_stride: 1,
        }
    }
}

impl OptimizationConfig {
    /// Defaults with the backbone's step count, truncation and resolution.
    pub fn for_backbone(handle: &GeneratorHandle) -> Self {
        Self {
            truncation_depth: handle.default_truncation,
            denoise_steps: handle.default_steps,
            resolution: handle.resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive and finite, got {}", self.learning_rate)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".to_string()));
        }
        if self.early_stop.n_window == 0 {
            return Err(Error::Config("early-stop window must be at least 1".to_string()));
        }
        if !(self.early_stop.x_percent.is_finite() && self.early_stop.x_percent >= 0.0) {
            return Err(Error::Config(format!("early-stop x must be >= 0, got {}", self.early_stop.x_percent)));
        }
        if self.max_iterations < self.early_stop.n_window {
            return Err(Error::Config(format!(
                "max_iterations {} is shorter than the early-stop window {}",
                self.max_iterations, self.early_stop.n_window
            )));
        }
        if self.denoise_steps == 0 || self.truncation_depth == 0 || self.truncation_depth > self.denoise_steps {
            return Err(Error::Config(format!(
                "need 1 <= truncation depth ({}) <= denoise steps ({})",
                self.truncation_depth, self.denoise_steps
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".to_string()));
        }
        if self.frame_stride == 0 {
            return Err(Error::Config("frame_stride must be at least 1".to_string()));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::Config("resolution must be non-empty".to_string()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".to_string()));
            }
        }
        Ok(())
    }
}

/// One iteration's image and loss breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedFrame {
    pub step_index: usize,
    pub image: Image,
    pub loss_total: f64,
    /// Unweighted component values.
    pub loss_components: BTreeMap<String, f64>,
    pub loss_weights: BTreeMap<String, f64>,
    /// Seconds spent producing this frame.
    pub wall_time: f64,
}

impl GeneratedFrame {
    pub fn report(&self) -> LossReport {
        LossReport::from_components(self.loss_total, &self.loss_components)
    }

    /// `Σ weight · component`.
    pub fn weighted_sum(&self) -> f64 {
        self.loss_components.iter().map(|(k, v)| self.loss_weights.get(k).copied().unwrap_or(0.0) * v).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxIterations,
    UserStop,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub reason: StopReason,
    /// Index of the last completed (or failed) step.
    pub stop_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Cross-context stop request, polled between steps.
pub trait StopSignal: Sync {
    fn stop_requested(&self) -> bool;
}

impl StopSignal for AtomicBool {
    fn stop_requested(&self) -> bool {
        self.load(Ordering::Acquire)
    }
}

/// A signal that never fires.
pub struct NeverStop;

impl StopSignal for NeverStop {
    fn stop_requested(&self) -> bool {
        false
    }
}

/// Monotonic seconds source for frame timings.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Reports zero for every reading.
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// Receives every frame, with the adapters that produced it, as soon as it
/// exists.
pub trait FrameSink {
    fn on_frame(&mut self, frame: &GeneratedFrame, adapters: &AdapterParams) -> Result<()>;
}

impl<F> FrameSink for F
where
    F: FnMut(&GeneratedFrame, &AdapterParams) -> Result<()>,
{
    fn on_frame(&mut self, frame: &GeneratedFrame, adapters: &AdapterParams) -> Result<()> {
        self(frame, adapters)
    }
}

/// Discards frames.
pub struct NullSink;

impl FrameSink for NullSink {
    fn on_frame(&mut self, _: &GeneratedFrame, _: &AdapterParams) -> Result<()> {
        Ok(())
    }
}

/// What every iteration generates: the prompt, the fixed latent, and the
/// sampler depth.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationSetup {
    pub prompt: String,
    pub latent: Latent,
    pub steps: usize,
    pub truncation: usize,
}

impl GenerationSetup {
    /// Seeded latent with the config's step count and truncation.
    pub fn seeded(generator: &dyn Generator, prompt: &str, config: &OptimizationConfig) -> Self {
        Self {
            prompt: prompt.to_string(),
            latent: generator.sample_latent(config.seed).latent,
            steps: config.denoise_steps,
            truncation: config.truncation_depth,
        }
    }

    pub fn request(&self) -> GenerateRequest<'_> {
        GenerateRequest { prompt: &self.prompt, latent: &self.latent, steps: self.steps, truncation: self.truncation }
    }
}

/// Mutable per-session optimizer state.
#[derive(Clone, Debug)]
pub struct StepState {
    pub step_index: usize,
    pub optimizer: Optimizer,
}

impl StepState {
    pub fn new(config: &OptimizationConfig) -> Self {
        Self { step_index: 0, optimizer: Optimizer::new(config.optimizer, config.learning_rate) }
    }
}

/// Fresh adapters for `generator`: random down-projections, zero
/// up-projections.
pub fn init_adapters(generator: &dyn Generator, rank: usize, targets: &[String], seed: u64) -> Result<AdapterParams> {
    AdapterParams::init(generator.layers(), rank, targets, seed)
}

/// Generates with `adapters`, scores the image and returns the frame
/// together with the updated adapters.
pub fn optimization_step(
    state: &mut StepState,
    generator: &dyn Generator,
    adapters: &AdapterParams,
    loss: &dyn LossFn,
    setup: &GenerationSetup,
    clock: &dyn Clock,
) -> Result<(GeneratedFrame, AdapterParams)> {
    let step = state.step_index;
    let started = clock.now();
    let request = setup.request();
    check_request(generator, &request, adapters)?;

    let mut tape = Tape::new();
    let binding = adapters.bind(&mut tape);
    let image_var = generator
        .forward(&mut tape, &request, &binding)
        .map_err(|e| Error::Backbone { step, message: e.to_string() })?;
    let dims = generator.resolution();
    let terms = loss.evaluate(&mut tape, image_var, dims)?;
    let total = terms.total(&mut tape);
    let loss_total = tape.value(total).item();
    if !loss_total.is_finite() {
        return Err(Error::NonFinite { step, what: format!("loss ({loss_total})") });
    }
    let grads = tape.backward(total);
    let gradient = binding.gradients(adapters, &grads);
    if !gradient.is_finite() {
        return Err(Error::NonFinite { step, what: "adapter gradient".to_string() });
    }
    let image = Image::from_tensor(dims.0, dims.1, tape.value(image_var))?.clamped();

    let mut updated = adapters.clone();
    state.optimizer.step(&mut updated, &gradient);
    state.step_index += 1;

    let frame = GeneratedFrame {
        step_index: step,
        image,
        loss_total,
        loss_components: terms.values(&tape),
        loss_weights: terms.weights(),
        wall_time: (clock.now() - started).max(0.0),
    };
    Ok((frame, updated))
}

/// True iff the best loss in the last `n_window` entries does not beat the
/// best loss before the window by strictly more than `x_percent` percent.
/// Histories shorter than `n_window + 1` never stop.
pub fn should_stop(loss_history: &[f64], x_percent: f64, n_window: usize) -> bool {
    if n_window == 0 || loss_history.len() < n_window + 1 {
        return false;
    }
    let split = loss_history.len() - n_window;
    let prior = loss_history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let window = loss_history[split..].iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = prior - prior.abs() * x_percent / 100.0;
    !(window < threshold)
}

/// Result of a full optimization session.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Adapters that produced the lowest-loss frame.
    pub adapters: AdapterParams,
    /// Frame history, thinned by `frame_stride`.
    pub frames: Vec<GeneratedFrame>,
    pub decision: StopDecision,
    pub best_index: usize,
    pub best_loss: f64,
    /// Number of frames produced (before thinning).
    pub frames_produced: usize,
}

impl RunOutcome {
    pub fn best_frame(&self) -> Option<&GeneratedFrame> {
        self.frames.iter().find(|f| f.step_index == self.best_index)
    }
}

/// Runs the loop until early stopping, `max_iterations`, a stop request or a
/// step failure.
///
/// Configuration problems are returned as `Err`; failures inside a step end
/// the run with [`StopReason::Error`] and keep the frames produced so far.
pub fn run_optimization(
    generator: &dyn Generator,
    setup: &GenerationSetup,
    loss: &dyn LossFn,
    config: &OptimizationConfig,
    stop: &dyn StopSignal,
    sink: &mut dyn FrameSink,
    clock: &dyn Clock,
) -> Result<RunOutcome> {
    config.validate()?;
    if config.resolution != generator.resolution() {
        return Err(Error::Config(format!(
            "config resolution {:?} does not match backbone `{}` ({:?})",
            config.resolution,
            generator.handle().backbone_id,
            generator.resolution()
        )));
    }
    let targets = resolve_targets(generator, config.target_layers.as_deref());
    let mut adapters = init_adapters(generator, config.rank, &targets, rng::derive_seed(config.seed, "adapters"))?;
    check_request(generator, &setup.request(), &adapters)?;

    let mut state = StepState::new(config);
    let mut frames = Vec::new();
    let mut history = Vec::with_capacity(config.max_iterations);
    let mut best: Option<(usize, f64, AdapterParams, GeneratedFrame)> = None;
    let mut decision = None;

    for i in 0..config.max_iterations {
        if i > 0 && stop.stop_requested() {
            decision = Some(StopDecision { reason: StopReason::UserStop, stop_index: i - 1, message: None });
            break;
        }
        let (frame, next) = match optimization_step(&mut state, generator, &adapters, loss, setup, clock)
            .and_then(|(frame, next)| sink.on_frame(&frame, &adapters).map(|_| (frame, next)))
        {
            Ok(v) => v,
            Err(e) => {
                decision = Some(StopDecision { reason: StopReason::Error, stop_index: i, message: Some(e.to_string()) });
                break;
            }
        };
        let improved = best.as_ref().is_none_or(|(_, l, _, _)| frame.loss_total < *l);
        if improved {
            best = Some((i, frame.loss_total, adapters.clone(), frame.clone()));
        }
        history.push(frame.loss_total);
        if i % config.frame_stride == 0 {
            frames.push(frame);
        }
        adapters = next;
        if should_stop(&history, config.early_stop.x_percent, config.early_stop.n_window) {
            decision = Some(StopDecision { reason: StopReason::EarlyStop, stop_index: i, message: None });
            break;
        }
    }

    let decision = decision.unwrap_or(StopDecision {
        reason: StopReason::MaxIterations,
        stop_index: config.max_iterations - 1,
        message: None,
    });
    let frames_produced = history.len();
    match best {
        Some((best_index, best_loss, best_adapters, best_frame)) => {
            if !frames.iter().any(|f| f.step_index == best_index) {
                let at = frames.partition_point(|f| f.step_index < best_index);
                frames.insert(at, best_frame);
            }
            Ok(RunOutcome { adapters: best_adapters, frames, decision, best_index, best_loss, frames_produced })
        }
        None => Ok(RunOutcome {
            adapters,
            frames,
            decision,
            best_index: 0,
            best_loss: f64::INFINITY,
            frames_produced,
        }),
    }
}
