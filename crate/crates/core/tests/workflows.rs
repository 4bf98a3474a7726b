mod common;

use common::*;
use imprint_core::backbone::{Generator, InversionConfig, ToyBackbone, ToyConfig};
use imprint_core::engine::{NeverStop, NoClock, NullSink, OptimizationConfig};
use imprint_core::image::{Image, Mask};
use imprint_core::losses::{background_loss, LossWeights};
use imprint_core::segmentation::{stubs::*, MaskPipeline, MaskSource};
use imprint_core::workflows::*;

fn toy16() -> ToyBackbone {
    ToyBackbone::new(ToyConfig::with_resolution(16, 16)).unwrap()
}

fn scene() -> (Image, Mask) {
    let subject = Mask::from_fn(16, 16, |y, x| (5..11).contains(&y) && (6..10).contains(&x));
    let img = Image::from_fn(16, 16, |y, x| {
        if subject.get(y, x) { [0.9, 0.2, 0.2] } else { [0.2 + 0.03 * x as f64, 0.5, 0.3 + 0.02 * y as f64] }
    });
    (img, subject)
}

/// The replacement subject, shown on the same backdrop: pixel-stub
/// extractors see the whole frame, so a matching backdrop stands in for
/// identity features that ignore the background.
fn new_subject() -> Image {
    let (img, mask) = scene();
    let mut out = img.clone();
    for y in 0..16 {
        for x in 0..16 {
            if mask.get(y, x) {
                out.set(y, x, 0, 0.2);
                out.set(y, x, 2, 0.9);
            }
        }
    }
    out
}

fn edit_job(c: f64, source: MaskSource) -> EditJob {
    let toy = toy16();
    let (input, _) = scene();
    EditJob {
        input_image: input,
        subject: ReferenceSubject::new(new_subject(), "dog"),
        config: OptimizationConfig {
            loss_weights: LossWeights { a: 1.0, b: 1.0, c },
            ..OptimizationConfig::for_backbone(toy.handle())
        },
        backbone_id: "toy".into(),
        inversion: InversionConfig::default(),
        mask_source: source,
        prompt: None,
        ablations: Ablations::default(),
    }
}

fn bg_mse(c: f64) -> f64 {
    let toy = toy16();
    let (dino, ir) = pixel_pair(&toy);
    let backends = Backends { generator: &toy, dino, ir };
    let (_, subject) = scene();
    let job = edit_job(c, MaskSource::User(subject.clone()));
    let out = run_edit(&job, &backends, &MaskPipeline::default(), Controls { stop: &NeverStop, sink: &mut NullSink, clock: &NoClock })
        .unwrap();
    // Score against the mask the loss used.
    let edited = out.edited.unwrap();
    background_loss(&edited, &out.inversion.reconstruction, &out.mask.background.inverted()).unwrap()
}

#[test]
fn background_fidelity_with_large_c() {
    let m: Vec<f64> = [0.0, 10.0, 100.0].iter().map(|&c| bg_mse(c)).collect();
    println!("bg mse by c: {m:?}");
    assert!(m[2] <= 1e-3, "{m:?}");
    assert!(m[0] >= m[1] && m[1] >= m[2], "{m:?}");
}

#[test]
fn auto_mask_uses_detector_and_segmenter() {
    let toy = toy16();
    let (dino, ir) = pixel_pair(&toy);
    let backends = Backends { generator: &toy, dino, ir };
    let det = ColorKeyDetector { label: "dog".into(), color: [0.9, 0.2, 0.2], tolerance: 1e-9, confidence: 0.8 };
    let seg = ColorKeySegmenter { color: [0.9, 0.2, 0.2], tolerance: 1e-9 };
    let pipe = MaskPipeline { detector: Some(&det), segmenter: Some(&seg), ..Default::default() };
    let mut job = edit_job(10.0, MaskSource::Auto);
    job.config.max_iterations = 8;
    let out = run_edit(&job, &backends, &pipe, Controls { stop: &NeverStop, sink: &mut NullSink, clock: &NoClock }).unwrap();
    assert_eq!(out.mask.subject, scene().1);
    assert_eq!(out.mask.background, scene().1.dilated(3).inverted());
}

#[test]
fn no_bg_ablation_matches_similarity_only() {
    let mut job = edit_job(10.0, MaskSource::None);
    assert_eq!(job.effective_weights().c, 10.0);
    job.ablations.no_bg = true;
    assert_eq!(job.effective_weights(), LossWeights { a: 1.0, b: 1.0, c: 0.0 });
}

#[test]
fn generation_converges_and_freezes_adapters() {
    let toy = toy();
    let (dino, ir) = pixel_pair(&toy);
    let backends = Backends { generator: &toy, dino, ir };
    let job = GenerationJob {
        subject: ReferenceSubject::new(reachable_reference(&toy), "dog"),
        target_prompts: vec!["a dog in Paris".into()],
        simple_prompt: None,
        config: OptimizationConfig { learning_rate: 0.02, ..OptimizationConfig::for_backbone(toy.handle()) },
        backbone_id: "toy".into(),
        render_steps: None,
        ablations: Ablations::default(),
    };
    let out = run_generation(&job, &backends, Controls { stop: &NeverStop, sink: &mut NullSink, clock: &NoClock }).unwrap();
    assert!(out.outcome.best_loss < 0.1 * out.outcome.frames[0].loss_total);
    assert_eq!(out.checksums.0, out.checksums.1);
    assert!(out.outcome.frames_produced <= 60);
}
