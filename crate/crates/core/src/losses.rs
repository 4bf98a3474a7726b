//! Differentiable objectives.
//!
//! * identity similarity: `a · δ_dino + b · δ_ir`, each `δ` being one minus
//!   the cosine similarity of global embeddings;
//! * background preservation: mean squared error restricted to the
//!   background (the complement of the subject mask);
//! * editing: similarity plus `c` times background preservation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::extractors::ExtractorHandle;
use crate::image::{Image, Mask};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SIM_DINO: &str = "sim_dino";
pub const SIM_IR: &str = "sim_ir";
pub const BACKGROUND: &str = "bg";

/// Calibration weights: `a` for the DINO distance, `b` for the IR distance,
/// `c` for background preservation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, c: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-component breakdown of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub sim_dino: f64,
    pub sim_ir: f64,
    /// Zero when background preservation is not part of the objective.
    pub bg: f64,
}

impl LossReport {
    pub fn from_components(total: f64, components: &BTreeMap<String, f64>) -> Self {
        let get = |k: &str| components.get(k).copied().unwrap_or(0.0);
        Self { total, sim_dino: get(SIM_DINO), sim_ir: get(SIM_IR), bg: get(BACKGROUND) }
    }

    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.a * self.sim_dino + w.b * self.sim_ir + w.c * self.bg
    }
}

/// One weighted term of an objective, recorded on a tape.
#[derive(Clone, Debug)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: Var,
}

/// The terms an objective produced for one image.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub terms: Vec<LossTerm>,
}

impl LossTerms {
    /// `Σ weight · value` as a scalar node.
    pub fn total(&self, tape: &mut Tape) -> Var {
        let mut acc: Option<Var> = None;
        for t in &self.terms {
            let w = tape.scale(t.value, t.weight);
            acc = Some(match acc {
                None => w,
                Some(a) => tape.add(a, w),
            });
        }
        acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
    }

    pub fn values(&self, tape: &Tape) -> BTreeMap<String, f64> {
        self.terms.iter().map(|t| (t.name.clone(), tape.value(t.value).item())).collect()
    }

    pub fn weights(&self) -> BTreeMap<String, f64> {
        self.terms.iter().map(|t| (t.name.clone(), t.weight)).collect()
    }
}

/// An objective differentiable in the generated image.
pub trait LossFn: Send + Sync {
    /// `image` is an `(H·W) × 3` node of the given dimensions.
    fn evaluate(&self, tape: &mut Tape, image: Var, dims: (usize, usize)) -> Result<LossTerms>;
}

/// Evaluates `loss` on a fixed image and returns the breakdown.
pub fn evaluate(loss: &dyn LossFn, image: &Image) -> Result<LossReport> {
    let mut tape = Tape::new();
    let x = tape.constant(image.to_tensor());
    let terms = loss.evaluate(&mut tape, x, image.dims())?;
    let total = terms.total(&mut tape);
    Ok(LossReport::from_components(tape.value(total).item(), &terms.values(&tape)))
}

/// `max(0, 1 − ⟨embedding, reference⟩)` for unit vectors.
fn cosine_distance(tape: &mut Tape, embedding: Var, reference: &Tensor) -> Var {
    let r = tape.constant(reference.clone());
    let cos = tape.dot(embedding, r);
    let neg = tape.scale(cos, -1.0);
    let d = tape.add_scalar(neg, 1.0);
    tape.clamp_min(d, 0.0)
}

/// Identity-similarity objective against a fixed reference image.
#[derive(Clone, Debug)]
pub struct SimilarityLoss {
    dino: ExtractorHandle,
    ir: ExtractorHandle,
    reference_dims: (usize, usize),
    ref_dino: Tensor,
    ref_ir: Tensor,
    weights: LossWeights,
}

impl SimilarityLoss {
    pub fn new(reference: &Image, dino: ExtractorHandle, ir: ExtractorHandle, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let ref_dino = Tensor::from_vec(1, dino.embedding_dim, dino.embed(reference)?)?;
        let ref_ir = Tensor::from_vec(1, ir.embedding_dim, ir.embed(reference)?)?;
        Ok(Self { dino, ir, reference_dims: reference.dims(), ref_dino, ref_ir, weights })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn reference_dims(&self) -> (usize, usize) {
        self.reference_dims
    }
}

impl LossFn for SimilarityLoss {
    fn evaluate(&self, tape: &mut Tape, image: Var, dims: (usize, usize)) -> Result<LossTerms> {
        let e_dino = self.dino.embed_on_tape(tape, image, dims)?;
        let d_dino = cosine_distance(tape, e_dino, &self.ref_dino);
        let e_ir = self.ir.embed_on_tape(tape, image, dims)?;
        let d_ir = cosine_distance(tape, e_ir, &self.ref_ir);
        Ok(LossTerms {
            terms: vec![
                LossTerm { name: SIM_DINO.to_string(), weight: self.weights.a, value: d_dino },
                LossTerm { name: SIM_IR.to_string(), weight: self.weights.b, value: d_ir },
            ],
        })
    }
}

/// Masked MSE node: mean of squared differences over the `true` pixels of
/// `region` and all channels; a constant zero when `region` is empty.
pub fn masked_mse_on_tape(tape: &mut Tape, image: Var, target: &Image, region: &Mask) -> Result<Var> {
    let (h, w) = target.dims();
    region.ensure_dims(h, w)?;
    if tape.shape(image) != (h * w, 3) {
        return Err(Error::Shape(format!(
            "generated image {:?} does not match target {h}x{w}",
            tape.shape(image)
        )));
    }
    let count = region.count();
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let t = tape.constant(target.to_tensor());
    let diff = tape.sub(image, t);
    let sq = tape.square(diff);
    let m = tape.constant(region.to_channel_tensor());
    let masked = tape.mul(sq, m);
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / (count * 3) as f64))
}

/// Background-preservation objective for editing.
#[derive(Clone, Debug)]
pub struct EditingLoss {
    similarity: SimilarityLoss,
    target: Image,
    background: Mask,
}

impl EditingLoss {
    /// `background` is the region to preserve (the inverse subject mask).
    pub fn new(similarity: SimilarityLoss, target: Image, background: Mask) -> Result<Self> {
        background.ensure_dims(target.height(), target.width())?;
        Ok(Self { similarity, target, background })
    }

    pub fn background(&self) -> &Mask {
        &self.background
    }
}

impl LossFn for EditingLoss {
    fn evaluate(&self, tape: &mut Tape, image: Var, dims: (usize, usize)) -> Result<LossTerms> {
        if dims != self.target.dims() {
            return Err(Error::Shape(format!(
                "generated {}x{} vs background target {}x{}",
                dims.0,
                dims.1,
                self.target.height(),
                self.target.width()
            )));
        }
        let mut terms = self.similarity.evaluate(tape, image, dims)?;
        let bg = masked_mse_on_tape(tape, image, &self.target, &self.background)?;
        terms.terms.push(LossTerm { name: BACKGROUND.to_string(), weight: self.similarity.weights.c, value: bg });
        Ok(terms)
    }
}

/// Identity-similarity loss of `generated` against `reference`.
pub fn similarity_loss(
    generated: &Image,
    reference: &Image,
    dino: &ExtractorHandle,
    ir: &ExtractorHandle,
    weights: LossWeights,
) -> Result<LossReport> {
    generated.ensure_same_dims(reference)?;
    let loss = SimilarityLoss::new(reference, dino.clone(), ir.clone(), weights)?;
    evaluate(&loss, generated)
}

/// MSE between `generated` and `reconstruction` outside `subject_mask`.
pub fn background_loss(generated: &Image, reconstruction: &Image, subject_mask: &Mask) -> Result<f64> {
    generated.ensure_same_dims(reconstruction)?;
    let background = subject_mask.inverted();
    let mut tape = Tape::new();
    let x = tape.constant(generated.to_tensor());
    let v = masked_mse_on_tape(&mut tape, x, reconstruction, &background)?;
    Ok(tape.value(v).item())
}

/// Similarity plus `c` times background preservation.
pub fn editing_loss(
    generated: &Image,
    reference: &Image,
    reconstruction: &Image,
    subject_mask: &Mask,
    dino: &ExtractorHandle,
    ir: &ExtractorHandle,
    weights: LossWeights,
) -> Result<LossReport> {
    generated.ensure_same_dims(reference)?;
    generated.ensure_same_dims(reconstruction)?;
    let sim = SimilarityLoss::new(reference, dino.clone(), ir.clone(), weights)?;
    let loss = EditingLoss::new(sim, reconstruction.clone(), subject_mask.inverted())?;
    evaluate(&loss, generated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractors::stubs::{FixedStub, MeanColorStub, PixelStub};
    use alloc::sync::Arc;

    fn fixed(name: &str, v: Vec<f64>) -> ExtractorHandle {
        ExtractorHandle::new(name, Arc::new(FixedStub { embedding: v })).unwrap()
    }

    #[test]
    fn self_similarity_is_zero() {
        let img = Image::from_fn(8, 8, |y, x| [y as f64 / 8.0, x as f64 / 8.0, 0.25]);
        let dino = ExtractorHandle::new("dino", Arc::new(PixelStub::new(8, 8))).unwrap();
        let ir = ExtractorHandle::new("ir", Arc::new(MeanColorStub)).unwrap();
        let r = similarity_loss(&img, &img, &dino, &ir, LossWeights::default()).unwrap();
        assert!(r.total.abs() < 1e-12 && r.sim_dino >= 0.0 && r.sim_ir >= 0.0);
    }

    #[test]
    fn fixed_embeddings_combine_linearly() {
        // Fixed stubs embed every image identically, so the reference axis is
        // set by hand: cos = 0.8 and 0.6 against e₀ give δ = 0.2 and 0.4.
        let c1: f64 = 0.8;
        let c2: f64 = 0.6;
        let dino = fixed("dino", vec![c1, libm::sqrt(1.0 - c1 * c1)]);
        let ir = fixed("ir", vec![c2, libm::sqrt(1.0 - c2 * c2)]);
        let loss = SimilarityLoss {
            dino,
            ir,
            reference_dims: (2, 2),
            ref_dino: Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            ref_ir: Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            weights: LossWeights { a: 1.0, b: 1.0, c: 10.0 },
        };
        let r = evaluate(&loss, &Image::filled(2, 2, [0.0; 3])).unwrap();
        assert!((r.sim_dino - 0.2).abs() < 1e-12);
        assert!((r.sim_ir - 0.4).abs() < 1e-12);
        assert!((r.total - 0.6).abs() < 1e-12);
        assert_eq!(r.bg, 0.0);
    }

    #[test]
    fn background_loss_cases() {
        let a = Image::from_fn(2, 2, |y, x| [0.1 * (y * 2 + x) as f64, 0.5, 0.9]);
        let full = Mask::filled(2, 2, true);
        assert_eq!(background_loss(&a, &a, &Mask::filled(2, 2, false)).unwrap(), 0.0);
        let mut b = a.clone();
        b.set(0, 0, 0, 0.9);
        assert_eq!(background_loss(&b, &a, &full).unwrap(), 0.0);
        let wrong = Mask::filled(3, 2, false);
        assert!(background_loss(&a, &a, &wrong).is_err());
    }

    #[test]
    fn editing_with_zero_c_equals_similarity() {
        let reference = Image::from_fn(8, 8, |y, x| [y as f64 / 8.0, 0.2, x as f64 / 8.0]);
        let gen = Image::from_fn(8, 8, |y, x| [0.3, x as f64 / 8.0, y as f64 / 8.0]);
        let recon = Image::filled(8, 8, [0.5; 3]);
        let mask = Mask::from_fn(8, 8, |y, _| y < 4);
        let dino = ExtractorHandle::new("dino", Arc::new(PixelStub::new(8, 8))).unwrap();
        let ir = ExtractorHandle::new("ir", Arc::new(MeanColorStub)).unwrap();
        let w = LossWeights { a: 1.0, b: 1.0, c: 0.0 };
        let s = similarity_loss(&gen, &reference, &dino, &ir, w).unwrap();
        let e = editing_loss(&gen, &reference, &recon, &mask, &dino, &ir, w).unwrap();
        assert_eq!(s.total, e.total);
        assert!(e.bg > 0.0);
    }

    #[test]
    fn extractor_failures_name_the_backend() {
        use crate::extractors::MissingWeights;
        let ok = ExtractorHandle::new("dino", Arc::new(MeanColorStub)).unwrap();
        let bad = ExtractorHandle::new(
            "ir-features",
            Arc::new(MissingWeights { name: "ir-features".into(), embedding_dim: 4, hint: "h".into() }),
        )
        .unwrap();
        let img = Image::filled(4, 4, [0.2; 3]);
        let err = similarity_loss(&img, &img, &ok, &bad, LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("ir-features"));
    }
}
