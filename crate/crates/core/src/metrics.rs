//! Evaluation metrics: identity similarity on subject crops, prompt
//! adherence, distribution distances (FID, KID, CMMD), masked perceptual
//! background distance and pixel diversity.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::extractors::{ExtractorHandle, TextEncoder};
use crate::image::{Image, Mask};
use crate::segmentation::{detect_subject, Detector};
use crate::workflows::ReferenceSubject;
use crate::{rng, Error, Result};

/// Regularizer added to singular covariances.
pub const FID_EPS: f64 = 1e-6;
pub const KID_SUBSET_SIZE: usize = 100;
pub const KID_SUBSETS: usize = 10;
pub const CMMD_SIGMA: f64 = 10.0;
pub const CMMD_SCALE: f64 = 1000.0;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityScores {
    pub dino: f64,
    pub ir: f64,
    pub clip_i: f64,
}

/// Per-image identity similarities and whether the subject was found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityDetail {
    pub scores: IdentityScores,
    /// True when no detection was available and the full image was used.
    pub uncropped: bool,
}

/// Embedding backends for identity scoring.
#[derive(Clone)]
pub struct IdentityExtractors {
    pub dino: ExtractorHandle,
    pub ir: ExtractorHandle,
    pub clip_image: ExtractorHandle,
}

/// Crops to the detected subject, or returns the image with a flag.
pub fn subject_crop(image: &Image, label: &str, detector: Option<&dyn Detector>, threshold: f64) -> (Image, bool) {
    match detector.map(|d| detect_subject(d, image, label, threshold)) {
        Some(Ok(det)) => match image.crop(&det.bbox) {
            Ok(c) => (c, false),
            Err(_) => (image.clone(), true),
        },
        _ => (image.clone(), true),
    }
}

fn reference_crop(subject: &ReferenceSubject, detector: Option<&dyn Detector>, threshold: f64) -> Image {
    if let Some(b) = subject.mask.as_ref().and_then(Mask::bounding_box) {
        if let Ok(c) = subject.image.crop(&b) {
            return c;
        }
    }
    subject_crop(&subject.image, &subject.class_label, detector, threshold).0
}

/// Mean cosine similarity of subject crops to the reference crop, per
/// backend, plus per-image details.
pub fn identity_scores(
    generated: &[Image],
    subject: &ReferenceSubject,
    extractors: &IdentityExtractors,
    detector: Option<&dyn Detector>,
    threshold: f64,
) -> Result<(IdentityScores, Vec<IdentityDetail>)> {
    if generated.is_empty() {
        return Err(Error::Invalid("no generated images to score".to_string()));
    }
    let reference = reference_crop(subject, detector, threshold);
    let refs = [
        extractors.dino.embed(&reference)?,
        extractors.ir.embed(&reference)?,
        extractors.clip_image.embed(&reference)?,
    ];
    let mut details = Vec::with_capacity(generated.len());
    for img in generated {
        let (crop, uncropped) = subject_crop(img, &subject.class_label, detector, threshold);
        let scores = IdentityScores {
            dino: cosine(&extractors.dino.embed(&crop)?, &refs[0]),
            ir: cosine(&extractors.ir.embed(&crop)?, &refs[1]),
            clip_i: cosine(&extractors.clip_image.embed(&crop)?, &refs[2]),
        };
        details.push(IdentityDetail { scores, uncropped });
    }
    let avg = IdentityScores {
        dino: mean(details.iter().map(|d| d.scores.dino)).unwrap_or(0.0),
        ir: mean(details.iter().map(|d| d.scores.ir)).unwrap_or(0.0),
        clip_i: mean(details.iter().map(|d| d.scores.clip_i)).unwrap_or(0.0),
    };
    Ok((avg, details))
}

/// Mean image-text cosine similarity over paired lists.
pub fn prompt_adherence(
    generated: &[Image],
    prompts: &[String],
    clip_image: &ExtractorHandle,
    clip_text: &dyn TextEncoder,
) -> Result<f64> {
    if generated.len() != prompts.len() {
        return Err(Error::Invalid(format!("{} images but {} prompts", generated.len(), prompts.len())));
    }
    if generated.is_empty() {
        return Err(Error::Invalid("no images to score".to_string()));
    }
    let mut sims = Vec::with_capacity(generated.len());
    for (img, p) in generated.iter().zip(prompts) {
        let e = clip_image.embed(img)?;
        let t = clip_text.encode_text(p)?;
        if t.len() != e.len() {
            return Err(Error::Shape(format!("text embedding {} vs image embedding {}", t.len(), e.len())));
        }
        sims.push(cosine(&e, &t));
    }
    Ok(mean(sims).unwrap_or(0.0))
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map(Vec::len).unwrap_or(0);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature rows must be non-empty and equally long".to_string()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n as f64);
    let mut centered = x.clone();
    for j in 0..x.ncols() {
        for i in 0..n {
            centered[(i, j)] -= mu[j];
        }
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|l| libm::sqrt(l.max(0.0))));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = ev.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    min <= 1e-12 * max.max(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fid {
    pub value: f64,
    /// Set when a covariance was singular and `εI` was added to both.
    pub regularized: bool,
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)`.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Fid> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid("FID needs at least two samples per set".to_string()));
    }
    let (xa, xb) = (to_matrix(a)?, to_matrix(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::Shape(format!("feature dims {} vs {}", xa.ncols(), xb.ncols())));
    }
    let (mu1, mut s1) = mean_and_cov(&xa);
    let (mu2, mut s2) = mean_and_cov(&xb);
    let regularized = is_singular(&s1) || is_singular(&s2);
    if regularized {
        let eye = DMatrix::<f64>::identity(s1.nrows(), s1.ncols()) * FID_EPS;
        s1 += &eye;
        s2 += &eye;
    }
    // (Σ₁Σ₂)^½ has the trace of (Σ₁^½ Σ₂ Σ₁^½)^½, which is symmetric.
    let r1 = psd_sqrt(&s1);
    let mid = &r1 * &s2 * &r1;
    let mid = (&mid + mid.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|l| libm::sqrt(l.max(0.0))).sum();
    let diff = &mu1 - &mu2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(Fid { value: value.max(0.0), regularized })
}

/// `(x·y / d + 1)³`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    libm::pow(dot / d + 1.0, 3.0)
}

/// Unbiased MMD² with the cubic polynomial kernel.
pub fn mmd2_unbiased_poly(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::Invalid("unbiased MMD needs at least two samples per set".to_string()));
    }
    let xm = to_matrix(x)?;
    let ym = to_matrix(y)?;
    if xm.ncols() != ym.ncols() {
        return Err(Error::Shape(format!("feature dims {} vs {}", xm.ncols(), ym.ncols())));
    }
    let d = xm.ncols() as f64;
    let k = |g: DMatrix<f64>| g.map(|v| libm::pow(v / d + 1.0, 3.0));
    let kxx = k(&xm * xm.transpose());
    let kyy = k(&ym * ym.transpose());
    let kxy = k(&xm * ym.transpose());
    let off = |g: &DMatrix<f64>| g.sum() - g.trace();
    Ok(off(&kxx) / (m * (m - 1)) as f64 + off(&kyy) / (n * (n - 1)) as f64 - 2.0 * kxy.sum() / (m * n) as f64)
}

/// Index subsets (without replacement) KID draws from a set of `n` items.
pub fn kid_subsets(n: usize, size: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::seeded(seed);
    (0..count).map(|_| rand::seq::index::sample(&mut r, n, size.min(n)).into_vec()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kid {
    pub mean: f64,
    pub std: f64,
}

/// Kernel inception distance: unbiased polynomial MMD² averaged over
/// [`KID_SUBSETS`] random subsets of size `min(n, 100)`.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>], seed: u64) -> Result<Kid> {
    let size = a.len().min(b.len()).min(KID_SUBSET_SIZE);
    if size < 2 {
        return Err(Error::Invalid("KID needs at least two samples per set".to_string()));
    }
    let sa = kid_subsets(a.len(), size, KID_SUBSETS, rng::derive_seed(seed, "kid/a"));
    let sb = kid_subsets(b.len(), size, KID_SUBSETS, rng::derive_seed(seed, "kid/b"));
    let mut vals = Vec::with_capacity(KID_SUBSETS);
    for (ia, ib) in sa.iter().zip(&sb) {
        let xa: Vec<Vec<f64>> = ia.iter().map(|&i| a[i].clone()).collect();
        let xb: Vec<Vec<f64>> = ib.iter().map(|&i| b[i].clone()).collect();
        vals.push(mmd2_unbiased_poly(&xa, &xb)?);
    }
    let m = mean(vals.iter().copied()).unwrap_or(0.0);
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
    Ok(Kid { mean: m, std: libm::sqrt(var) })
}

/// CLIP maximum mean discrepancy: Gaussian-kernel MMD² (σ = 10) scaled by
/// 1000, computed with full kernel means.
pub fn cmmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let xa = to_matrix(a)?;
    let xb = to_matrix(b)?;
    if xa.ncols() != xb.ncols() {
        return Err(Error::Shape(format!("feature dims {} vs {}", xa.ncols(), xb.ncols())));
    }
    let gamma = 1.0 / (2.0 * CMMD_SIGMA * CMMD_SIGMA);
    let sq = |m: &DMatrix<f64>| DVector::from_fn(m.nrows(), |i, _| m.row(i).norm_squared());
    let (na, nb) = (sq(&xa), sq(&xb));
    let kmean = |x: &DMatrix<f64>, nx: &DVector<f64>, y: &DMatrix<f64>, ny: &DVector<f64>| {
        let g = x * y.transpose();
        let k = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| libm::exp(-gamma * (nx[i] + ny[j] - 2.0 * g[(i, j)])));
        k.mean()
    };
    let v = kmean(&xa, &na, &xa, &na) + kmean(&xb, &nb, &xb, &nb) - 2.0 * kmean(&xa, &na, &xb, &nb);
    Ok((CMMD_SCALE * v).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Naturalness {
    pub fid: f64,
    pub kid: f64,
    pub cmmd: f64,
    pub fid_regularized: bool,
}

/// FID and KID on `inception` features, CMMD on `clip_image` embeddings.
pub fn naturalness(
    generated: &[Image],
    reference: &[Image],
    inception: &ExtractorHandle,
    clip_image: &ExtractorHandle,
    seed: u64,
) -> Result<Naturalness> {
    if generated.len() < 2 || reference.len() < 2 {
        return Err(Error::Invalid("naturalness needs at least two images per set".to_string()));
    }
    let feats = |imgs: &[Image], h: &ExtractorHandle, unit: bool| -> Result<Vec<Vec<f64>>> {
        imgs.iter().map(|i| if unit { h.embed(i) } else { h.features(i) }).collect()
    };
    let (ga, ra) = (feats(generated, inception, false)?, feats(reference, inception, false)?);
    let f = fid(&ga, &ra)?;
    let k = kid(&ga, &ra, seed)?;
    let c = cmmd(&feats(generated, clip_image, true)?, &feats(reference, clip_image, true)?)?;
    Ok(Naturalness { fid: f.value, kid: k.mean, cmmd: c, fid_regularized: f.regularized })
}

/// Perceptual distance between two same-sized images.
pub trait PerceptualMetric: Send + Sync {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Mean squared pixel error.
pub struct PixelMse;

impl PerceptualMetric for PixelMse {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        a.mse(b)
    }
}

/// Mean squared difference of unit-normalized features from one backend.
pub struct FeatureDistance(pub ExtractorHandle);

impl PerceptualMetric for FeatureDistance {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let (ea, eb) = (self.0.embed(a)?, self.0.embed(b)?);
        Ok(ea.iter().zip(&eb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ea.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundScore {
    /// Mean over the scored triples; `None` when every mask was missing.
    pub lpips: Option<f64>,
    pub per_sample: Vec<Option<f64>>,
    /// Indices skipped for lack of a mask.
    pub skipped: Vec<usize>,
}

/// Perceptual distance after painting the subject black in both images.
pub fn masked_distance(metric: &dyn PerceptualMetric, edited: &Image, original: &Image, subject: &Mask) -> Result<f64> {
    edited.ensure_same_dims(original)?;
    metric.distance(&edited.with_masked_out(subject, [0.0; 3])?, &original.with_masked_out(subject, [0.0; 3])?)
}

pub fn background_preservation(
    edited: &[Image],
    originals: &[Image],
    masks: &[Option<Mask>],
    metric: &dyn PerceptualMetric,
) -> Result<BackgroundScore> {
    if edited.len() != originals.len() || edited.len() != masks.len() {
        return Err(Error::Invalid("edited, originals and masks must align".to_string()));
    }
    let mut per_sample = Vec::with_capacity(edited.len());
    let mut skipped = Vec::new();
    for (i, ((e, o), m)) in edited.iter().zip(originals).zip(masks).enumerate() {
        match m {
            Some(m) => per_sample.push(Some(masked_distance(metric, e, o, m)?)),
            None => {
                per_sample.push(None);
                skipped.push(i);
            }
        }
    }
    let lpips = mean(per_sample.iter().flatten().copied());
    Ok(BackgroundScore { lpips, per_sample, skipped })
}

/// Mean pixel MSE between each generated image (resized to the subject's
/// size) and the subject image.
pub fn diversity(generated: &[Image], subject: &Image) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Invalid("no generated images".to_string()));
    }
    let (h, w) = subject.dims();
    let mut total = 0.0;
    for g in generated {
        let g = if g.dims() == (h, w) { g.clone() } else { g.resized(h, w) };
        total += g.mse(subject)?;
    }
    Ok(total / generated.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub identity: IdentityScores,
    pub clip_t: Option<f64>,
    pub naturalness: Option<Naturalness>,
    pub background_lpips: Option<f64>,
    pub diversity_mse: Option<f64>,
    pub n_samples: usize,
}

impl MetricReport {
    /// Checks value ranges.
    pub fn validate(&self) -> Result<()> {
        let sims = [self.identity.dino, self.identity.ir, self.identity.clip_i];
        if sims.iter().chain(self.clip_t.iter()).any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid("similarity outside [-1, 1]".to_string()));
        }
        let n = self.naturalness.map(|n| [n.fid, n.kid.max(0.0), n.cmmd]).unwrap_or_default();
        if n.iter().chain(self.background_lpips.iter()).chain(self.diversity_mse.iter()).any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid("distance below zero".to_string()));
        }
        Ok(())
    }
}

/// One evaluated output with everything needed to score it.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sample_id: String,
    pub subject: ReferenceSubject,
    pub prompt: Option<String>,
    /// The image that was edited, for editing samples.
    pub input: Option<Image>,
    pub output: Image,
    /// Subject mask in `input`.
    pub mask: Option<Mask>,
    /// Vanilla-backbone output for the same prompt, for generation samples.
    pub reference: Option<Image>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub dino: f64,
    pub ir: f64,
    pub clip_i: f64,
    pub clip_t: Option<f64>,
    pub lpips: Option<f64>,
    pub mse: f64,
    pub flags: Vec<String>,
}

/// Every backend the benchmark needs.
#[derive(Clone)]
pub struct MetricSuite {
    pub identity: IdentityExtractors,
    pub clip_text: Arc<dyn TextEncoder>,
    pub inception: ExtractorHandle,
    pub perceptual: Arc<dyn PerceptualMetric>,
    pub detector: Option<Arc<dyn Detector>>,
    pub threshold: f64,
    pub seed: u64,
}

/// Scores every sample and aggregates. Naturalness uses the inputs (editing)
/// or vanilla references (generation) when at least two are present.
pub fn evaluate_samples(samples: &[Sample], suite: &MetricSuite) -> Result<(MetricReport, Vec<SampleRecord>)> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty benchmark".to_string()));
    }
    let detector = suite.detector.as_deref();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let mut flags = Vec::new();
        let (id, details) =
            identity_scores(core::slice::from_ref(&s.output), &s.subject, &suite.identity, detector, suite.threshold)?;
        if details[0].uncropped {
            flags.push("identity scored on the full image".to_string());
        }
        let clip_t = match &s.prompt {
            Some(p) => Some(prompt_adherence(
                core::slice::from_ref(&s.output),
                core::slice::from_ref(p),
                &suite.identity.clip_image,
                suite.clip_text.as_ref(),
            )?),
            None => None,
        };
        let lpips = match (&s.input, &s.mask) {
            (Some(input), Some(mask)) => Some(masked_distance(suite.perceptual.as_ref(), &s.output, input, mask)?),
            (Some(_), None) => {
                flags.push("no mask; background score skipped".to_string());
                None
            }
            _ => None,
        };
        let mse = diversity(core::slice::from_ref(&s.output), &s.subject.image)?;
        records.push(SampleRecord {
            sample_id: s.sample_id.clone(),
            dino: id.dino,
            ir: id.ir,
            clip_i: id.clip_i,
            clip_t,
            lpips,
            mse,
            flags,
        });
    }

    let outputs: Vec<Image> = samples.iter().map(|s| s.output.clone()).collect();
    let refs: Vec<Image> = samples.iter().filter_map(|s| s.input.clone().or_else(|| s.reference.clone())).collect();
    let naturalness = if refs.len() >= 2 && outputs.len() >= 2 {
        Some(naturalness(&outputs, &refs, &suite.inception, &suite.identity.clip_image, suite.seed)?)
    } else {
        None
    };
    let avg = |f: fn(&SampleRecord) -> Option<f64>| mean(records.iter().filter_map(f));
    let report = MetricReport {
        identity: IdentityScores {
            dino: avg(|r| Some(r.dino)).unwrap_or(0.0),
            ir: avg(|r| Some(r.ir)).unwrap_or(0.0),
            clip_i: avg(|r| Some(r.clip_i)).unwrap_or(0.0),
        },
        clip_t: avg(|r| r.clip_t),
        naturalness,
        background_lpips: avg(|r| r.lpips),
        diversity_mse: avg(|r| Some(r.mse)),
        n_samples: samples.len(),
    };
    Ok((report, records))
}
