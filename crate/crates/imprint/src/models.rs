//! Resolution of backbone ids and extractor backends.
//!
//! Only the toy backbone and the stub extractors ship with this build. The
//! pretrained families are recognized (their defaults drive job
//! resolution) but loading them reports where weights were looked for.

use std::path::PathBuf;
use std::sync::Arc;

use imprint_core::backbone::{known_handle, Generator, ToyBackbone, ToyConfig};
use imprint_core::extractors::stubs::{offline_registry, HashTextStub, PixelStub, ProjectionStub};
use imprint_core::extractors::{names, ExtractorHandle, ExtractorRegistry, TextEncoder};
use imprint_core::metrics::{FeatureDistance, IdentityExtractors, MetricSuite};
use imprint_core::segmentation::DEFAULT_DETECTION_THRESHOLD;

use crate::job::ExtractorMode;
use crate::Result;

pub const MODEL_CACHE_ENV: &str = "IMPRINT_MODEL_CACHE";

/// Input side length of the offline stand-ins when the backbone does not
/// fix one.
pub const OFFLINE_RESOLUTION: (usize, usize) = (32, 32);

/// Where pretrained weights would be found.
#[derive(Clone, Debug, Default)]
pub struct ModelCache {
    pub root: Option<PathBuf>,
}

impl ModelCache {
    pub fn from_env() -> Self {
        Self { root: std::env::var_os(MODEL_CACHE_ENV).map(PathBuf::from) }
    }

    fn hint(&self, name: &str) -> String {
        match &self.root {
            Some(r) => format!(
                "looked for {} but this build has no runtime for pretrained weights; use the toy backbone or --extractors offline",
                r.join(name).display()
            ),
            None => format!("set {MODEL_CACHE_ENV}; this build has no runtime for pretrained weights (use the toy backbone)"),
        }
    }
}

/// Loads a generator. The toy backbone is built at `resolution`.
pub fn load_backbone(backbone_id: &str, resolution: (usize, usize), cache: &ModelCache) -> Result<Arc<dyn Generator>> {
    known_handle(backbone_id)?;
    if backbone_id == "toy" {
        let toy = ToyBackbone::new(ToyConfig::with_resolution(resolution.0, resolution.1))?;
        return Ok(Arc::new(toy));
    }
    Err(imprint_core::Error::BackboneUnavailable { backbone: backbone_id.to_string(), hint: cache.hint(backbone_id) }.into())
}

/// The backends one run uses.
pub struct Extractors {
    pub registry: ExtractorRegistry,
    pub text: Arc<dyn TextEncoder>,
}

impl Extractors {
    pub fn get(&self, name: &str) -> Result<ExtractorHandle> {
        Ok(self.registry.get(name)?)
    }

    /// Evaluation suite over these backends, masking with raw pixels.
    pub fn metric_suite(&self, seed: u64) -> Result<MetricSuite> {
        Ok(MetricSuite {
            identity: IdentityExtractors {
                dino: self.get(names::DINO)?,
                ir: self.get(names::IR)?,
                clip_image: self.get(names::CLIP_IMAGE)?,
            },
            clip_text: self.text.clone(),
            inception: self.get(names::INCEPTION)?,
            perceptual: Arc::new(FeatureDistance(self.get(names::LPIPS)?)),
            detector: None,
            threshold: DEFAULT_DETECTION_THRESHOLD,
            seed,
        })
    }
}

pub fn effective_mode(mode: ExtractorMode, backbone_id: &str) -> ExtractorMode {
    match mode {
        ExtractorMode::Auto if backbone_id == "toy" => ExtractorMode::Offline,
        ExtractorMode::Auto => ExtractorMode::Cache,
        m => m,
    }
}

/// `resolution` sizes the stand-ins' inputs; images are resized to it.
pub fn load_extractors(mode: ExtractorMode, backbone_id: &str, resolution: (usize, usize), cache: &ModelCache) -> Result<Extractors> {
    let text: Arc<dyn TextEncoder> = Arc::new(HashTextStub { dim: 512 });
    match effective_mode(mode, backbone_id) {
        ExtractorMode::Offline => Ok(Extractors { registry: offline_registry(resolution), text }),
        ExtractorMode::Pixel => {
            let mut registry = ExtractorRegistry::new();
            for name in [names::DINO, names::IR] {
                registry.register(name, Arc::new(PixelStub::new(resolution.0, resolution.1)))?;
            }
            for (name, dim, seed) in [(names::CLIP_IMAGE, 512, 13), (names::LPIPS, 64, 14), (names::INCEPTION, 64, 15)] {
                registry.register(name, Arc::new(ProjectionStub::new(dim, resolution, seed)))?;
            }
            Ok(Extractors { registry, text })
        }
        ExtractorMode::Cache | ExtractorMode::Auto => {
            Err(imprint_core::Error::ExtractorUnavailable { name: names::DINO.to_string(), hint: cache.hint(names::DINO) }.into())
        }
    }
}
