//! Differentiable generator abstraction.
//!
//! A [`Generator`] records one deterministic sampling pass on a [`Tape`].
//! Gradients reach the adapters only through the final `truncation`
//! denoising steps and the decoder; earlier steps run detached.

pub mod toy;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use toy::{ToyBackbone, ToyConfig};

use crate::adapters::{AdapterBinding, AdapterParams, LayerSpec};
use crate::autodiff::{Tape, Var};
use crate::image::Image;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Static description of a generator family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHandle {
    pub backbone_id: String,
    pub distilled: bool,
    pub default_steps: usize,
    pub default_truncation: usize,
    /// Steps used when rendering with frozen adapters after optimization.
    pub render_steps: usize,
    pub latent_shape: Vec<usize>,
    pub resolution: (usize, usize),
    pub supports_inversion: bool,
}

impl GeneratorHandle {
    pub fn validate(&self) -> Result<()> {
        if self.default_steps == 0 || self.default_truncation == 0 {
            return Err(Error::Config(format!("{}: steps and truncation must be positive", self.backbone_id)));
        }
        if self.distilled && !(1..=4).contains(&self.default_steps) {
            return Err(Error::Config(format!(
                "{}: distilled backbones sample in 1-4 steps, got {}",
                self.backbone_id, self.default_steps
            )));
        }
        if self.default_truncation > self.default_steps {
            return Err(Error::Config(format!(
                "{}: truncation {} exceeds steps {}",
                self.backbone_id, self.default_truncation, self.default_steps
            )));
        }
        Ok(())
    }
}

/// Identifiers accepted by [`known_handle`].
pub const BACKBONE_IDS: [&str; 5] = ["sdxl-turbo", "sd-turbo", "flux-schnell", "sana", "toy"];

/// Per-family defaults: distilled models sample in one step and
/// backpropagate through it; the non-distilled model samples in 20 and
/// backpropagates through the last 3.
pub fn known_handle(backbone_id: &str) -> Result<GeneratorHandle> {
    let h = |id: &str, distilled, steps, k, render, latent: &[usize], res, inv| GeneratorHandle {
        backbone_id: id.to_string(),
        distilled,
        default_steps: steps,
        default_truncation: k,
        render_steps: render,
        latent_shape: latent.to_vec(),
        resolution: res,
        supports_inversion: inv,
    };
    Ok(match backbone_id {
        "sdxl-turbo" => h("sdxl-turbo", true, 1, 1, 4, &[4, 64, 64], (512, 512), true),
        "sd-turbo" => h("sd-turbo", true, 1, 1, 4, &[4, 64, 64], (512, 512), true),
        "flux-schnell" => h("flux-schnell", true, 1, 1, 4, &[16, 64, 64], (512, 512), false),
        "sana" => h("sana", false, 20, 3, 20, &[32, 16, 16], (512, 512), false),
        "toy" => ToyConfig::default().handle(),
        other => {
            return Err(Error::Config(format!(
                "unknown backbone `{other}` (expected one of {})",
                BACKBONE_IDS.join(", ")
            )))
        }
    })
}

/// The backbone the editing workflow uses unless told otherwise.
pub const DEFAULT_EDIT_BACKBONE: &str = "sd-turbo";
/// The backbone the generation workflow uses unless told otherwise.
pub const DEFAULT_GENERATION_BACKBONE: &str = "sdxl-turbo";

/// Inversion settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    /// Fraction of the sampling trajectory re-generated, in `[0, 1]`.
    pub strength: f64,
    pub renoise_iterations: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { strength: 0.75, renoise_iterations: 4 }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!("inversion strength {} outside [0, 1]", self.strength)));
        }
        Ok(())
    }
}

/// An image the sampler is anchored to when editing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub image: Image,
    pub strength: f64,
}

/// Starting point of a sampling pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub tokens: Tensor,
    pub anchor: Option<Anchor>,
}

/// A latent drawn from a seed. Equal seeds give equal latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSeed {
    pub seed: u64,
    pub latent: Latent,
}

/// Result of mapping a real image into the generator's domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub latent: Latent,
    /// Adapter-free decoding of `latent`.
    pub reconstruction: Image,
    pub prompt: String,
    pub steps: usize,
}

/// One sampling request.
#[derive(Clone, Copy, Debug)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub latent: &'a Latent,
    pub steps: usize,
    pub truncation: usize,
}

/// A frozen, deterministic, differentiable image generator.
pub trait Generator: Send + Sync {
    fn handle(&self) -> &GeneratorHandle;

    /// Projections adapters may target.
    fn layers(&self) -> &[LayerSpec];

    fn sample_latent(&self, seed: u64) -> LatentSeed;

    /// Records one sampling pass and returns the `(H·W) × 3` image node.
    fn forward(&self, tape: &mut Tape, request: &GenerateRequest<'_>, adapters: &AdapterBinding) -> Result<Var>;

    /// Maps `image` to a latent whose adapter-free decoding is the returned
    /// reconstruction.
    fn invert(&self, image: &Image, prompt: &str, steps: usize, config: &InversionConfig) -> Result<Inversion> {
        let _ = (image, prompt, steps, config);
        Err(Error::Capability { backbone: self.handle().backbone_id.clone(), capability: "inversion".to_string() })
    }

    fn resolution(&self) -> (usize, usize) {
        self.handle().resolution
    }

    /// Ids of every attention projection.
    fn attention_layers(&self) -> Vec<String> {
        self.layers().iter().filter(|l| l.is_attention()).map(|l| l.id.clone()).collect()
    }
}

/// Rejects requests the sampler cannot honour.
pub fn check_request(generator: &dyn Generator, request: &GenerateRequest<'_>, adapters: &AdapterParams) -> Result<()> {
    if request.steps == 0 {
        return Err(Error::Config("denoise steps must be at least 1".to_string()));
    }
    if request.truncation == 0 || request.truncation > request.steps {
        return Err(Error::Config(format!(
            "truncation depth {} must be in 1..={} (the denoise steps)",
            request.truncation, request.steps
        )));
    }
    for id in adapters.layer_ids() {
        let spec = generator.layers().iter().find(|l| l.id == id).ok_or_else(|| Error::UnknownLayer(id.to_string()))?;
        let pair = adapters.get(id).expect("id taken from adapters");
        if pair.down.cols() != spec.d_in || pair.up.rows() != spec.d_out {
            return Err(Error::Shape(format!(
                "adapter for `{id}` is {}->{} but the layer is {}->{}",
                pair.down.cols(),
                pair.up.rows(),
                spec.d_in,
                spec.d_out
            )));
        }
    }
    Ok(())
}

/// Gradient-free sampling with fixed adapters.
pub fn generate(generator: &dyn Generator, request: &GenerateRequest<'_>, adapters: &AdapterParams) -> Result<Image> {
    check_request(generator, request, adapters)?;
    let mut tape = Tape::new();
    let binding = adapters.bind_frozen(&mut tape);
    let out = generator.forward(&mut tape, request, &binding)?;
    let (h, w) = generator.resolution();
    Image::from_tensor(h, w, tape.value(out))
}

/// Inference with finalized adapters: no gradients, full truncation, any
/// step count.
pub fn render(
    generator: &dyn Generator,
    prompt: &str,
    adapters: &AdapterParams,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    let latent = generator.sample_latent(seed);
    let request = GenerateRequest { prompt, latent: &latent.latent, steps, truncation: steps };
    generate(generator, &request, adapters)
}

/// Adapter targets resolved against a generator: `None` means every
/// attention projection.
pub fn resolve_targets(generator: &dyn Generator, targets: Option<&[String]>) -> Vec<String> {
    match targets {
        Some(t) => t.to_vec(),
        None => generator.attention_layers(),
    }
}

#[doc(hidden)]
pub fn all_handles() -> Vec<GeneratorHandle> {
    BACKBONE_IDS.iter().map(|id| known_handle(id).expect("listed id")).collect()
}
