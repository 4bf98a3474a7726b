//! Image-embedding backends used by the identity losses and by evaluation.
//!
//! Backends are looked up by name in an [`ExtractorRegistry`]. Every backend
//! receives its input resized and normalized on the tape, so losses stay
//! differentiable with respect to the generator output at native
//! resolution. Embeddings are the backend's global feature, unit-normalized.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::image::{shared_bilinear_mix, Image};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Input conditioning applied before a backend sees the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    /// Target `(height, width)`; `None` keeps the input resolution.
    pub resolution: Option<(usize, usize)>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocess {
    pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
    pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

    /// Keep resolution, no normalization.
    pub fn identity() -> Self {
        Self { resolution: None, mean: [0.0; 3], std: [1.0; 3] }
    }

    pub fn imagenet(resolution: (usize, usize)) -> Self {
        Self { resolution: Some(resolution), mean: Self::IMAGENET_MEAN, std: Self::IMAGENET_STD }
    }

    pub fn output_dims(&self, input: (usize, usize)) -> (usize, usize) {
        self.resolution.unwrap_or(input)
    }

    /// Records resize and per-channel normalization on the tape.
    pub fn apply(&self, tape: &mut Tape, pixels: Var, dims: (usize, usize)) -> (Var, (usize, usize)) {
        let out_dims = self.output_dims(dims);
        let mut x = pixels;
        if out_dims != dims {
            x = tape.row_mix(x, shared_bilinear_mix(dims, out_dims));
        }
        if self.mean != [0.0; 3] {
            let shift = tape.constant(Tensor::from_fn(1, 3, |_, c| -self.mean[c]));
            x = tape.add_row(x, shift);
        }
        if self.std != [1.0; 3] {
            let inv = tape.constant(Tensor::from_fn(1, 3, |_, c| 1.0 / self.std[c]));
            x = tape.mul_row(x, inv);
        }
        (x, out_dims)
    }
}

/// What a backend declares about itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub embedding_dim: usize,
    pub differentiable: bool,
    pub preprocess: Preprocess,
}

/// A feature model. `features` receives the preprocessed `(pixels, 3)` node
/// and returns the raw `1 × embedding_dim` global feature.
pub trait Extractor: Send + Sync {
    fn spec(&self) -> ExtractorSpec;

    fn features(&self, tape: &mut Tape, pixels: Var, dims: (usize, usize)) -> Result<Var>;
}

/// A registered backend.
#[derive(Clone)]
pub struct ExtractorHandle {
    pub name: String,
    pub embedding_dim: usize,
    pub differentiable: bool,
    pub preprocess: Preprocess,
    backend: Arc<dyn Extractor>,
}

impl fmt::Debug for ExtractorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExtractorHandle")
            .field("name", &self.name)
            .field("embedding_dim", &self.embedding_dim)
            .field("differentiable", &self.differentiable)
            .finish()
    }
}

impl ExtractorHandle {
    /// Wraps a backend without going through a registry.
    pub fn new(name: impl Into<String>, backend: Arc<dyn Extractor>) -> Result<Self> {
        let name = name.into();
        let spec = backend.spec();
        if spec.embedding_dim == 0 {
            return Err(Error::Config(format!("extractor `{name}` declares a zero embedding dimension")));
        }
        Ok(Self {
            name,
            embedding_dim: spec.embedding_dim,
            differentiable: spec.differentiable,
            preprocess: spec.preprocess,
            backend,
        })
    }

    fn wrap(&self, e: Error) -> Error {
        match e {
            e @ (Error::Extractor { .. } | Error::ExtractorUnavailable { .. }) => e,
            other => Error::Extractor { name: self.name.clone(), message: other.to_string() },
        }
    }

    /// Raw (un-normalized) feature node for an `(H·W) × 3` image node.
    pub fn features_on_tape(&self, tape: &mut Tape, image: Var, dims: (usize, usize)) -> Result<Var> {
        let (x, pdims) = self.preprocess.apply(tape, image, dims);
        let f = self.backend.features(tape, x, pdims).map_err(|e| self.wrap(e))?;
        let shape = tape.shape(f);
        if shape != (1, self.embedding_dim) {
            return Err(Error::Extractor {
                name: self.name.clone(),
                message: format!("returned {shape:?}, declared 1x{}", self.embedding_dim),
            });
        }
        if !tape.value(f).is_finite() {
            return Err(Error::Extractor { name: self.name.clone(), message: "non-finite features".to_string() });
        }
        Ok(if self.differentiable { f } else { tape.detach(f) })
    }

    /// Unit-normalized embedding node.
    pub fn embed_on_tape(&self, tape: &mut Tape, image: Var, dims: (usize, usize)) -> Result<Var> {
        let f = self.features_on_tape(tape, image, dims)?;
        Ok(tape.l2_normalize(f))
    }

    /// Unit-normalized embedding of `image`.
    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        let e = self.embed_on_tape(&mut tape, x, image.dims())?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Raw global feature of `image`, as used by distribution metrics.
    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        let f = self.features_on_tape(&mut tape, x, image.dims())?;
        Ok(tape.value(f).data().to_vec())
    }
}

/// Name-keyed collection of backends.
#[derive(Clone, Default)]
pub struct ExtractorRegistry {
    entries: BTreeMap<String, ExtractorHandle>,
}

impl ExtractorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, backend: Arc<dyn Extractor>) -> Result<ExtractorHandle> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateExtractor(name.to_string()));
        }
        let handle = ExtractorHandle::new(name, backend)?;
        self.entries.insert(name.to_string(), handle.clone());
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Result<ExtractorHandle> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownExtractor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Standard backend names.
pub mod names {
    pub const DINO: &str = "dino-v2";
    pub const IR: &str = "ir-features";
    pub const CLIP_IMAGE: &str = "clip-image";
    pub const CLIP_TEXT: &str = "clip-text";
    pub const LPIPS: &str = "lpips-backbone";
    pub const INCEPTION: &str = "inception-pool3";
}

/// Placeholder for a backend whose weights are not present.
pub struct MissingWeights {
    pub name: String,
    pub embedding_dim: usize,
    pub hint: String,
}

impl Extractor for MissingWeights {
    fn spec(&self) -> ExtractorSpec {
        ExtractorSpec { embedding_dim: self.embedding_dim, differentiable: true, preprocess: Preprocess::identity() }
    }

    fn features(&self, _tape: &mut Tape, _pixels: Var, _dims: (usize, usize)) -> Result<Var> {
        Err(Error::ExtractorUnavailable { name: self.name.clone(), hint: self.hint.clone() })
    }
}

/// Maps text to a unit-normalized embedding in a joint image-text space.
pub trait TextEncoder: Send + Sync {
    fn encode_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Deterministic backends for tests and offline runs.
pub mod stubs {
    use super::*;
    use crate::rng;

    /// Centered pixels as the feature: `1 − cos` becomes a pixel distance.
    pub struct PixelStub {
        pub resolution: Option<(usize, usize)>,
        pub dim: usize,
    }

    impl PixelStub {
        pub fn new(height: usize, width: usize) -> Self {
            Self { resolution: Some((height, width)), dim: height * width * 3 }
        }
    }

    impl Extractor for PixelStub {
        fn spec(&self) -> ExtractorSpec {
            ExtractorSpec {
                embedding_dim: self.dim,
                differentiable: true,
                preprocess: Preprocess { resolution: self.resolution, mean: [0.5; 3], std: [1.0; 3] },
            }
        }

        fn features(&self, tape: &mut Tape, pixels: Var, dims: (usize, usize)) -> Result<Var> {
            Ok(tape.reshape(pixels, 1, dims.0 * dims.1 * 3))
        }
    }

    /// Per-channel mean color.
    pub struct MeanColorStub;

    impl Extractor for MeanColorStub {
        fn spec(&self) -> ExtractorSpec {
            ExtractorSpec { embedding_dim: 3, differentiable: true, preprocess: Preprocess::identity() }
        }

        fn features(&self, tape: &mut Tape, pixels: Var, dims: (usize, usize)) -> Result<Var> {
            let n = dims.0 * dims.1;
            let avg = tape.constant(Tensor::filled(1, n, 1.0 / n as f64));
            Ok(tape.matmul(avg, pixels))
        }
    }

    /// Seeded random projection of the normalized pixels followed by `tanh`.
    pub struct ProjectionStub {
        dim: usize,
        resolution: (usize, usize),
        weights: Tensor,
    }

    impl ProjectionStub {
        pub fn new(dim: usize, resolution: (usize, usize), seed: u64) -> Self {
            let inputs = resolution.0 * resolution.1 * 3;
            let mut r = rng::seeded(seed);
            let weights = rng::normal_tensor(&mut r, inputs, dim, 1.0 / libm::sqrt(inputs as f64));
            Self { dim, resolution, weights }
        }
    }

    impl Extractor for ProjectionStub {
        fn spec(&self) -> ExtractorSpec {
            ExtractorSpec { embedding_dim: self.dim, differentiable: true, preprocess: Preprocess::imagenet(self.resolution) }
        }

        fn features(&self, tape: &mut Tape, pixels: Var, dims: (usize, usize)) -> Result<Var> {
            let flat = tape.reshape(pixels, 1, dims.0 * dims.1 * 3);
            let w = tape.constant(self.weights.clone());
            let p = tape.matmul(flat, w);
            Ok(tape.tanh(p))
        }
    }

    /// Returns the same embedding for every input.
    pub struct FixedStub {
        pub embedding: Vec<f64>,
    }

    impl Extractor for FixedStub {
        fn spec(&self) -> ExtractorSpec {
            ExtractorSpec { embedding_dim: self.embedding.len(), differentiable: false, preprocess: Preprocess::identity() }
        }

        fn features(&self, tape: &mut Tape, _pixels: Var, _dims: (usize, usize)) -> Result<Var> {
            Ok(tape.constant(Tensor::from_vec(1, self.embedding.len(), self.embedding.clone())?))
        }
    }

    /// Seeded pseudo-embedding of the text, unit-normalized.
    pub struct HashTextStub {
        pub dim: usize,
    }

    impl TextEncoder for HashTextStub {
        fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
            let mut r = rng::seeded(rng::fnv1a(text.as_bytes(), 0));
            let v = rng::normal_tensor(&mut r, 1, self.dim, 1.0).into_vec();
            Ok(unit(v))
        }
    }

    /// Looks the text up in a fixed table.
    pub struct TableTextStub {
        pub table: BTreeMap<String, Vec<f64>>,
    }

    impl TextEncoder for TableTextStub {
        fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
            self.table
                .get(text)
                .map(|v| unit(v.clone()))
                .ok_or_else(|| Error::Invalid(format!("no stub embedding for text `{text}`")))
        }
    }

    pub(crate) fn unit(mut v: Vec<f64>) -> Vec<f64> {
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    /// Registers stub backends under every standard name.
    pub fn offline_registry(resolution: (usize, usize)) -> ExtractorRegistry {
        let mut reg = ExtractorRegistry::new();
        let entries: [(&str, Arc<dyn Extractor>); 5] = [
            (names::DINO, Arc::new(ProjectionStub::new(384, resolution, 11))),
            (names::IR, Arc::new(ProjectionStub::new(256, resolution, 12))),
            (names::CLIP_IMAGE, Arc::new(ProjectionStub::new(512, resolution, 13))),
            (names::LPIPS, Arc::new(ProjectionStub::new(64, resolution, 14))),
            (names::INCEPTION, Arc::new(ProjectionStub::new(64, resolution, 15))),
        ];
        for (name, backend) in entries {
            reg.register(name, backend).expect("fresh registry");
        }
        reg
    }
}
