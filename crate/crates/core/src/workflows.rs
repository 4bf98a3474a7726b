//! The two end-to-end tasks: subject-driven generation (optimize on a simple
//! prompt, then render target prompts with frozen adapters) and
//! subject-driven editing (invert, mask, optimize with background
//! preservation).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterParams;
use crate::backbone::{render, Generator, Inversion, InversionConfig};
use crate::engine::{run_optimization, Clock, FrameSink, GenerationSetup, OptimizationConfig, RunOutcome, StopSignal};
use crate::extractors::ExtractorHandle;
use crate::image::{Image, Mask};
use crate::losses::{EditingLoss, LossWeights, SimilarityLoss};
use crate::segmentation::{resolve_mask, MaskPipeline, MaskSource, ResolvedMask};
use crate::{Error, Result};

/// The single reference image of the subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSubject {
    pub image: Image,
    pub class_label: String,
    /// Subject pixels in `image`, when known.
    #[serde(default)]
    pub mask: Option<Mask>,
}

impl ReferenceSubject {
    pub fn new(image: Image, class_label: impl Into<String>) -> Self {
        Self { image, class_label: class_label.into(), mask: None }
    }
}

/// `"image of a {class}"`.
pub fn simple_prompt(class_label: &str) -> String {
    format!("image of a {class_label}")
}

/// Switches that remove one ingredient of the method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Optimize on the first target prompt instead of the simple prompt.
    pub no_prompt_simplification: bool,
    /// `c = 0`.
    pub no_bg: bool,
    /// `a = 0`.
    pub drop_dino: bool,
    /// `b = 0`.
    pub drop_ir: bool,
}

impl Ablations {
    pub fn apply(&self, w: LossWeights) -> LossWeights {
        LossWeights {
            a: if self.drop_dino { 0.0 } else { w.a },
            b: if self.drop_ir { 0.0 } else { w.b },
            c: if self.no_bg { 0.0 } else { w.c },
        }
    }
}

/// The frozen generator plus the two identity extractors.
#[derive(Clone)]
pub struct Backends<'a> {
    pub generator: &'a dyn Generator,
    pub dino: ExtractorHandle,
    pub ir: ExtractorHandle,
}

/// Stop signal, frame sink and clock for one session.
pub struct Controls<'a> {
    pub stop: &'a dyn StopSignal,
    pub sink: &'a mut dyn FrameSink,
    pub clock: &'a dyn Clock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub subject: ReferenceSubject,
    pub target_prompts: Vec<String>,
    /// Defaults to `"image of a {class}"`.
    #[serde(default)]
    pub simple_prompt: Option<String>,
    pub config: OptimizationConfig,
    pub backbone_id: String,
    /// Stage-2 steps; defaults to the backbone's render steps.
    #[serde(default)]
    pub render_steps: Option<usize>,
    #[serde(default)]
    pub ablations: Ablations,
}

impl GenerationJob {
    /// Prompt optimized in stage 1.
    pub fn stage1_prompt(&self) -> Result<String> {
        if self.ablations.no_prompt_simplification {
            return self
                .target_prompts
                .first()
                .cloned()
                .ok_or_else(|| Error::Config("prompt simplification is off but there is no target prompt".to_string()));
        }
        let p = match &self.simple_prompt {
            Some(p) => p.clone(),
            None => simple_prompt(&self.subject.class_label),
        };
        if p.trim().is_empty() {
            return Err(Error::Config("simple prompt is empty".to_string()));
        }
        Ok(p)
    }

    pub fn effective_weights(&self) -> LossWeights {
        self.ablations.apply(self.config.loss_weights)
    }
}

#[derive(Clone, Debug)]
pub struct Rendered {
    pub prompt: String,
    pub image: Option<Image>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GenerationOutput {
    pub stage1_prompt: String,
    pub outcome: RunOutcome,
    pub render_steps: usize,
    pub renders: Vec<Rendered>,
    /// Adapter checksum before and after stage 2.
    pub checksums: (u64, u64),
}

impl GenerationOutput {
    pub fn adapters(&self) -> &AdapterParams {
        &self.outcome.adapters
    }
}

fn check_backbone(generator: &dyn Generator, backbone_id: &str) -> Result<()> {
    let actual = &generator.handle().backbone_id;
    if actual != backbone_id {
        return Err(Error::Config(format!("job asks for backbone `{backbone_id}` but `{actual}` is loaded")));
    }
    Ok(())
}

/// Stage 1 optimizes against the similarity loss on the simple prompt;
/// stage 2 renders each target prompt with the frozen best adapters.
/// Render failures are reported per prompt.
pub fn run_generation(job: &GenerationJob, backends: &Backends<'_>, controls: Controls<'_>) -> Result<GenerationOutput> {
    let generator = backends.generator;
    check_backbone(generator, &job.backbone_id)?;
    let prompt = job.stage1_prompt()?;
    let loss =
        SimilarityLoss::new(&job.subject.image, backends.dino.clone(), backends.ir.clone(), job.effective_weights())?;
    let setup = GenerationSetup::seeded(generator, &prompt, &job.config);
    let outcome = run_optimization(generator, &setup, &loss, &job.config, controls.stop, controls.sink, controls.clock)?;

    let render_steps = job.render_steps.unwrap_or(generator.handle().render_steps);
    let before = outcome.adapters.checksum();
    let renders = job
        .target_prompts
        .iter()
        .map(|p| match render(generator, p, &outcome.adapters, render_steps, job.config.seed) {
            Ok(img) => Rendered { prompt: p.clone(), image: Some(img.clamped()), error: None },
            Err(e) => Rendered { prompt: p.clone(), image: None, error: Some(e.to_string()) },
        })
        .collect();
    let after = outcome.adapters.checksum();
    Ok(GenerationOutput { stage1_prompt: prompt, outcome, render_steps, renders, checksums: (before, after) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub input_image: Image,
    pub subject: ReferenceSubject,
    pub config: OptimizationConfig,
    pub backbone_id: String,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub mask_source: MaskSource,
    /// Prompt for inversion and optimization; defaults to the simple prompt.
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub ablations: Ablations,
}

impl EditJob {
    pub fn prompt(&self) -> String {
        self.prompt.clone().unwrap_or_else(|| simple_prompt(&self.subject.class_label))
    }

    pub fn effective_weights(&self) -> LossWeights {
        self.ablations.apply(self.config.loss_weights)
    }
}

#[derive(Clone, Debug)]
pub struct EditOutput {
    pub inversion: Inversion,
    pub mask: ResolvedMask,
    pub outcome: RunOutcome,
    /// Best frame's image, absent only if no step completed.
    pub edited: Option<Image>,
}

/// Inverts the input, masks the subject region, then optimizes from the
/// inverted latent with similarity plus background preservation against the
/// reconstruction.
pub fn run_edit(
    job: &EditJob,
    backends: &Backends<'_>,
    pipeline: &MaskPipeline<'_>,
    controls: Controls<'_>,
) -> Result<EditOutput> {
    let generator = backends.generator;
    check_backbone(generator, &job.backbone_id)?;
    job.inversion.validate()?;
    if job.input_image.dims() != generator.resolution() {
        return Err(Error::Config(format!(
            "input image is {:?} but the backbone renders {:?}",
            job.input_image.dims(),
            generator.resolution()
        )));
    }
    let prompt = job.prompt();
    let inversion = generator.invert(&job.input_image, &prompt, job.config.denoise_steps, &job.inversion)?;
    let mask = resolve_mask(&job.mask_source, &job.input_image, &job.subject.class_label, pipeline)?;

    let sim = SimilarityLoss::new(&job.subject.image, backends.dino.clone(), backends.ir.clone(), job.effective_weights())?;
    let loss = EditingLoss::new(sim, inversion.reconstruction.clone(), mask.background.clone())?;
    let setup = GenerationSetup {
        prompt,
        latent: inversion.latent.clone(),
        steps: job.config.denoise_steps,
        truncation: job.config.truncation_depth,
    };
    let outcome = run_optimization(generator, &setup, &loss, &job.config, controls.stop, controls.sink, controls.clock)?;
    let edited = outcome.best_frame().map(|f| f.image.clone());
    Ok(EditOutput { inversion, mask, outcome, edited })
}
