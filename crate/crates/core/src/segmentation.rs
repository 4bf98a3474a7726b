//! Subject masks for editing: class identification, detection, box-to-mask
//! segmentation and the fallback ladder that picks a mask source.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::image::{BoundingBox, Image, Mask};
use crate::{Error, Result};

pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.3;
/// Pixels added around the subject before the background loss sees it.
pub const DEFAULT_MASK_DILATION: usize = 3;

pub trait ZeroShotClassifier: Send + Sync {
    /// Top label for `image`.
    fn classify(&self, image: &Image) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

pub trait Detector: Send + Sync {
    /// All candidate boxes for `label`, any order.
    fn detect(&self, image: &Image, label: &str) -> Result<Vec<Detection>>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &Image, bbox: &BoundingBox) -> Result<Mask>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMask {
    pub mask: Mask,
    pub class_label: String,
    pub detector_box: BoundingBox,
    pub confidence: f64,
    /// Set when segmentation failed and the box itself became the mask.
    pub degraded: bool,
}

impl SubjectMask {
    pub fn background(&self) -> Mask {
        self.mask.inverted()
    }
}

/// The hint when given, otherwise the classifier's top label.
pub fn identify_class(image: &Image, hint: Option<&str>, classifier: Option<&dyn ZeroShotClassifier>) -> Result<String> {
    if let Some(h) = hint.map(str::trim).filter(|h| !h.is_empty()) {
        return Ok(h.to_string());
    }
    match classifier {
        Some(c) => c.classify(image),
        None => Err(Error::NeedsClassHint),
    }
}

/// Highest-confidence detection at or above `threshold`, clipped to the
/// image. Ties keep the first candidate.
pub fn detect_subject(detector: &dyn Detector, image: &Image, label: &str, threshold: f64) -> Result<Detection> {
    if label.trim().is_empty() {
        return Err(Error::Invalid("detection label is empty".to_string()));
    }
    let mut best: Option<Detection> = None;
    for d in detector.detect(image, label)? {
        if !(d.confidence >= threshold) {
            continue;
        }
        let Some(bbox) = d.bbox.clipped(image.height(), image.width()) else { continue };
        if best.as_ref().is_none_or(|b| d.confidence > b.confidence) {
            best = Some(Detection { bbox, ..d });
        }
    }
    best.ok_or_else(|| Error::NotFound { label: label.to_string(), threshold })
}

/// Segments inside `bbox`. Without a segmenter, or when it fails, the box
/// itself becomes the mask and `degraded` is set. The result never leaves
/// the box.
pub fn segment_box(
    segmenter: Option<&dyn Segmenter>,
    image: &Image,
    bbox: &BoundingBox,
    class_label: &str,
    confidence: f64,
) -> Result<SubjectMask> {
    let (h, w) = image.dims();
    if !bbox.fits(h, w) {
        return Err(Error::Invalid(format!("box {bbox:?} is outside the {h}x{w} image")));
    }
    let region = Mask::from_box(h, w, bbox);
    let segmented = segmenter.map(|s| s.segment(image, bbox)).and_then(|r| r.ok()).filter(|m| m.dims() == (h, w));
    let (mask, degraded) = match segmented {
        Some(m) => (m.intersection(&region)?, false),
        None => (region, true),
    };
    Ok(SubjectMask { mask, class_label: class_label.to_string(), detector_box: *bbox, confidence, degraded })
}

pub fn invert_mask(m: &SubjectMask) -> Mask {
    m.mask.inverted()
}

/// Where the editing mask comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Detector plus segmenter, falling back to the box, then the full frame.
    #[default]
    Auto,
    User(Mask),
    Box(BoundingBox),
    /// Whole frame is subject; the background loss is disabled.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    User,
    Segmented,
    Box,
    Full,
}

/// The mask an edit runs with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedMask {
    /// Subject pixels as produced (not dilated).
    pub subject: Mask,
    /// Pixels the background loss applies to: complement of the dilated
    /// subject. Empty when the background loss is off.
    pub background: Mask,
    pub origin: MaskOrigin,
    pub class_label: String,
    pub warnings: Vec<String>,
}

impl ResolvedMask {
    fn from_subject(subject: Mask, origin: MaskOrigin, class_label: &str, dilation: usize, warnings: Vec<String>) -> Self {
        let background = subject.dilated(dilation).inverted();
        Self { subject, background, origin, class_label: class_label.to_string(), warnings }
    }

    pub fn background_enabled(&self) -> bool {
        !self.background.is_empty()
    }
}

/// Optional backends for the automatic path.
#[derive(Clone, Copy)]
pub struct MaskPipeline<'a> {
    pub detector: Option<&'a dyn Detector>,
    pub segmenter: Option<&'a dyn Segmenter>,
    pub threshold: f64,
    pub dilation: usize,
}

impl Default for MaskPipeline<'_> {
    fn default() -> Self {
        Self { detector: None, segmenter: None, threshold: DEFAULT_DETECTION_THRESHOLD, dilation: DEFAULT_MASK_DILATION }
    }
}

/// Applies the ladder user mask > detector+segmenter > box > full frame.
pub fn resolve_mask(source: &MaskSource, image: &Image, class_label: &str, pipeline: &MaskPipeline<'_>) -> Result<ResolvedMask> {
    let (h, w) = image.dims();
    let full = |warnings: Vec<String>| ResolvedMask {
        subject: Mask::filled(h, w, true),
        background: Mask::filled(h, w, false),
        origin: MaskOrigin::Full,
        class_label: class_label.to_string(),
        warnings,
    };
    match source {
        MaskSource::User(m) => {
            m.ensure_dims(h, w)?;
            Ok(ResolvedMask::from_subject(m.clone(), MaskOrigin::User, class_label, pipeline.dilation, Vec::new()))
        }
        MaskSource::Box(b) => {
            let b = b.clipped(h, w).ok_or_else(|| Error::Invalid(format!("box {b:?} misses the {h}x{w} image")))?;
            Ok(ResolvedMask::from_subject(Mask::from_box(h, w, &b), MaskOrigin::Box, class_label, pipeline.dilation, Vec::new()))
        }
        MaskSource::None => Ok(full(alloc::vec!["mask disabled; background loss is off".to_string()])),
        MaskSource::Auto => {
            let Some(detector) = pipeline.detector else {
                return Ok(full(alloc::vec!["no detector configured; background loss is off".to_string()]));
            };
            let detection = match detect_subject(detector, image, class_label, pipeline.threshold) {
                Ok(d) => d,
                Err(e) => return Ok(full(alloc::vec![format!("{e}; background loss is off")])),
            };
            let sm = segment_box(pipeline.segmenter, image, &detection.bbox, class_label, detection.confidence)?;
            let mut warnings = Vec::new();
            let origin = if sm.degraded {
                warnings.push("segmentation unavailable; using the detector box as the mask".to_string());
                MaskOrigin::Box
            } else {
                MaskOrigin::Segmented
            };
            Ok(ResolvedMask::from_subject(sm.mask, origin, class_label, pipeline.dilation, warnings))
        }
    }
}

/// Backends keyed on a flat colour, for tests and offline runs.
pub mod stubs {
    use super::*;

    fn near(p: [f64; 3], c: [f64; 3], tol: f64) -> bool {
        p.iter().zip(&c).all(|(a, b)| (a - b).abs() <= tol)
    }

    /// Always answers with the same label.
    pub struct FixedClassifier(pub String);

    impl ZeroShotClassifier for FixedClassifier {
        fn classify(&self, _: &Image) -> Result<String> {
            Ok(self.0.clone())
        }
    }

    /// Returns a fixed candidate list regardless of input.
    pub struct ScriptedDetector(pub Vec<Detection>);

    impl Detector for ScriptedDetector {
        fn detect(&self, _: &Image, label: &str) -> Result<Vec<Detection>> {
            Ok(self.0.iter().filter(|d| d.label == label).cloned().collect())
        }
    }

    /// Boxes the pixels within `tolerance` of `color`.
    pub struct ColorKeyDetector {
        pub label: String,
        pub color: [f64; 3],
        pub tolerance: f64,
        pub confidence: f64,
    }

    impl Detector for ColorKeyDetector {
        fn detect(&self, image: &Image, label: &str) -> Result<Vec<Detection>> {
            if label != self.label {
                return Ok(Vec::new());
            }
            let m = Mask::from_fn(image.height(), image.width(), |y, x| near(image.pixel(y, x), self.color, self.tolerance));
            Ok(m.bounding_box()
                .map(|bbox| Detection { label: label.to_string(), bbox, confidence: self.confidence })
                .into_iter()
                .collect())
        }
    }

    /// Keeps the pixels within `tolerance` of `color` inside the box.
    pub struct ColorKeySegmenter {
        pub color: [f64; 3],
        pub tolerance: f64,
    }

    impl Segmenter for ColorKeySegmenter {
        fn segment(&self, image: &Image, bbox: &BoundingBox) -> Result<Mask> {
            Ok(Mask::from_fn(image.height(), image.width(), |y, x| {
                bbox.contains(y, x) && near(image.pixel(y, x), self.color, self.tolerance)
            }))
        }
    }

    /// A segmenter that always fails.
    pub struct BrokenSegmenter;

    impl Segmenter for BrokenSegmenter {
        fn segment(&self, _: &Image, _: &BoundingBox) -> Result<Mask> {
            Err(Error::Invalid("segmenter crashed".to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use alloc::vec;

    const RED: [f64; 3] = [1.0, 0.0, 0.0];

    fn scene_with_rect() -> Image {
        Image::from_fn(16, 16, |y, x| if (4..9).contains(&y) && (3..12).contains(&x) { RED } else { [0.2, 0.3, 0.4] })
    }

    fn scene_with_disc() -> (Image, Mask) {
        let inside = |y: usize, x: usize| {
            let (dy, dx) = (y as f64 - 8.0, x as f64 - 7.0);
            dy * dy + dx * dx <= 16.0
        };
        let img = Image::from_fn(16, 16, |y, x| if inside(y, x) { RED } else { [0.1, 0.6, 0.1] });
        (img, Mask::from_fn(16, 16, inside))
    }

    #[test]
    fn class_hint_and_classifier() {
        let img = Image::filled(2, 2, [0.0; 3]);
        assert_eq!(identify_class(&img, Some("cat"), None).unwrap(), "cat");
        let c = FixedClassifier("dog".into());
        assert_eq!(identify_class(&img, None, Some(&c)).unwrap(), "dog");
        assert_eq!(identify_class(&img, None, None), Err(Error::NeedsClassHint));
    }

    #[test]
    fn color_key_detector_finds_exact_rectangle() {
        let det = ColorKeyDetector { label: "box".into(), color: RED, tolerance: 1e-9, confidence: 0.9 };
        let d = detect_subject(&det, &scene_with_rect(), "box", 0.3).unwrap();
        assert_eq!(d.bbox, BoundingBox { x0: 3, y0: 4, x1: 12, y1: 9 });
    }

    #[test]
    fn detection_threshold_and_argmax() {
        let img = Image::filled(8, 8, [0.0; 3]);
        let b1 = BoundingBox::new(0, 0, 2, 2).unwrap();
        let b2 = BoundingBox::new(3, 3, 6, 6).unwrap();
        let low = ScriptedDetector(vec![Detection { label: "dog".into(), bbox: b1, confidence: 0.2 }]);
        assert!(matches!(detect_subject(&low, &img, "dog", 0.3), Err(Error::NotFound { .. })));
        let two = ScriptedDetector(vec![
            Detection { label: "dog".into(), bbox: b1, confidence: 0.5 },
            Detection { label: "dog".into(), bbox: b2, confidence: 0.8 },
        ]);
        assert_eq!(detect_subject(&two, &img, "dog", 0.3).unwrap().bbox, b2);
        assert!(detect_subject(&two, &img, "", 0.3).is_err());
    }

    #[test]
    fn disc_segmentation_is_exact() {
        let (img, truth) = scene_with_disc();
        let seg = ColorKeySegmenter { color: RED, tolerance: 1e-9 };
        let bbox = truth.bounding_box().unwrap();
        let sm = segment_box(Some(&seg), &img, &bbox, "disc", 1.0).unwrap();
        assert!(!sm.degraded);
        assert_eq!(sm.mask.iou(&truth).unwrap(), 1.0);
    }

    #[test]
    fn one_pixel_box_and_fallbacks() {
        let (img, _) = scene_with_disc();
        let px = BoundingBox::new(7, 8, 8, 9).unwrap();
        let sm = segment_box(None, &img, &px, "disc", 1.0).unwrap();
        assert!(sm.degraded);
        assert_eq!(sm.mask.count(), 1);
        assert!(sm.mask.get(8, 7));
        let broken = segment_box(Some(&BrokenSegmenter), &img, &px, "disc", 1.0).unwrap();
        assert!(broken.degraded);
        assert!(segment_box(None, &img, &BoundingBox { x0: 10, y0: 10, x1: 20, y1: 12 }, "d", 1.0).is_err());
    }

    #[test]
    fn ladder() {
        let (img, truth) = scene_with_disc();
        let det = ColorKeyDetector { label: "disc".into(), color: RED, tolerance: 1e-9, confidence: 0.9 };
        let seg = ColorKeySegmenter { color: RED, tolerance: 1e-9 };
        let pipe = MaskPipeline { detector: Some(&det), segmenter: Some(&seg), ..Default::default() };

        let user = Mask::from_fn(16, 16, |y, _| y < 3);
        let r = resolve_mask(&MaskSource::User(user.clone()), &img, "disc", &pipe).unwrap();
        assert_eq!((r.origin, &r.subject), (MaskOrigin::User, &user));
        assert_eq!(r.background, user.dilated(3).inverted());

        let r = resolve_mask(&MaskSource::Auto, &img, "disc", &pipe).unwrap();
        assert_eq!((r.origin, &r.subject), (MaskOrigin::Segmented, &truth));

        let no_seg = MaskPipeline { segmenter: None, ..pipe };
        let r = resolve_mask(&MaskSource::Auto, &img, "disc", &no_seg).unwrap();
        assert_eq!(r.origin, MaskOrigin::Box);
        assert_eq!(r.warnings.len(), 1);

        let r = resolve_mask(&MaskSource::Auto, &img, "cat", &pipe).unwrap();
        assert_eq!(r.origin, MaskOrigin::Full);
        assert!(!r.background_enabled());

        let r = resolve_mask(&MaskSource::None, &img, "disc", &pipe).unwrap();
        assert!(r.background.is_empty() && r.subject.count() == 256);
    }

    #[test]
    fn inversion_examples() {
        let sm = |mask: Mask| SubjectMask {
            mask,
            class_label: "x".into(),
            detector_box: BoundingBox::full(4, 4),
            confidence: 1.0,
            degraded: false,
        };
        assert!(invert_mask(&sm(Mask::filled(4, 4, true))).is_empty());
        let checker = Mask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
        assert_eq!(invert_mask(&sm(checker.clone())), Mask::from_fn(4, 4, |y, x| (y + x) % 2 == 1));
        assert_eq!(invert_mask(&sm(invert_mask(&sm(checker.clone())))), checker);
    }
}
