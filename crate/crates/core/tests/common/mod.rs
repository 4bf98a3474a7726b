#![allow(dead_code)]

use std::sync::Arc;

use imprint_core::adapters::AdapterParams;
use imprint_core::autodiff::Tape;
use imprint_core::backbone::{render, GenerateRequest, Generator, ToyBackbone, ToyConfig};
use imprint_core::extractors::stubs::{PixelStub, ProjectionStub};
use imprint_core::extractors::{names, ExtractorHandle};
use imprint_core::image::Image;
use imprint_core::losses::LossFn;
use imprint_core::rng;
use imprint_core::tensor::Tensor;

pub const PROMPT: &str = "image of a dog";

pub fn toy() -> ToyBackbone {
    ToyBackbone::new(ToyConfig::default()).unwrap()
}

pub fn pixel_pair(toy: &ToyBackbone) -> (ExtractorHandle, ExtractorHandle) {
    let (h, w) = toy.resolution();
    (
        ExtractorHandle::new(names::DINO, Arc::new(PixelStub::new(h, w))).unwrap(),
        ExtractorHandle::new(names::IR, Arc::new(PixelStub::new(h, w))).unwrap(),
    )
}

pub fn projection_pair(seed: u64) -> (ExtractorHandle, ExtractorHandle) {
    (
        ExtractorHandle::new(names::DINO, Arc::new(ProjectionStub::new(24, (8, 8), seed))).unwrap(),
        ExtractorHandle::new(names::IR, Arc::new(ProjectionStub::new(16, (6, 6), seed + 1))).unwrap(),
    )
}

/// Adapters with every factor drawn at random, so both factors get gradient.
pub fn random_adapters(toy: &ToyBackbone, rank: usize, std: f64, seed: u64) -> AdapterParams {
    let mut p = AdapterParams::init(toy.layers(), rank, &toy.attention_layers(), seed).unwrap();
    let mut r = rng::seeded(seed ^ 0xabc);
    for t in p.tensors_mut() {
        *t = rng::normal_tensor(&mut r, t.rows(), t.cols(), std);
    }
    p
}

/// A subject the toy can actually reach: its own output under perturbed
/// adapters.
pub fn reachable_reference(toy: &ToyBackbone) -> Image {
    let mut p = AdapterParams::init(toy.layers(), 4, &toy.attention_layers(), 99).unwrap();
    let mut r = rng::seeded(5);
    for pair in p.pairs_mut() {
        pair.up = rng::normal_tensor(&mut r, pair.up.rows(), pair.up.cols(), 1.0);
    }
    render(toy, PROMPT, &p, 1, 0).unwrap()
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    let t = rng::uniform_tensor(&mut r, h * w, 3, 0.5);
    Image::from_fn(h, w, |y, x| {
        let i = y * w + x;
        [0.5 + t.get(i, 0), 0.5 + t.get(i, 1), 0.5 + t.get(i, 2)]
    })
}

/// Loss value and adapter gradient for one request.
pub fn loss_and_grad(
    g: &dyn Generator,
    req: &GenerateRequest<'_>,
    adapters: &AdapterParams,
    loss: &dyn LossFn,
) -> (f64, AdapterParams) {
    let mut tape = Tape::new();
    let b = adapters.bind(&mut tape);
    let img = g.forward(&mut tape, req, &b).unwrap();
    let terms = loss.evaluate(&mut tape, img, g.resolution()).unwrap();
    let total = terms.total(&mut tape);
    let v = tape.value(total).item();
    let grads = tape.backward(total);
    (v, b.gradients(adapters, &grads))
}

pub fn loss_only(g: &dyn Generator, req: &GenerateRequest<'_>, adapters: &AdapterParams, loss: &dyn LossFn) -> f64 {
    let mut tape = Tape::new();
    let b = adapters.bind_frozen(&mut tape);
    let img = g.forward(&mut tape, req, &b).unwrap();
    let terms = loss.evaluate(&mut tape, img, g.resolution()).unwrap();
    let total = terms.total(&mut tape);
    tape.value(total).item()
}

fn flat(p: &AdapterParams) -> Vec<f64> {
    p.tensors().flat_map(|t| t.data().iter().copied()).collect()
}

fn with_flat(p: &AdapterParams, v: &[f64]) -> AdapterParams {
    let mut out = p.clone();
    let mut i = 0;
    for t in out.tensors_mut() {
        for x in t.data_mut() {
            *x = v[i];
            i += 1;
        }
    }
    out
}

/// Worst relative error between analytic and central-difference
/// derivatives along `directions` random unit directions and `coords`
/// random coordinates.
pub fn fd_relative_error(
    g: &dyn Generator,
    req: &GenerateRequest<'_>,
    adapters: &AdapterParams,
    loss: &dyn LossFn,
    h: f64,
    directions: usize,
    coords: usize,
    seed: u64,
) -> f64 {
    let (_, grad) = loss_and_grad(g, req, adapters, loss);
    let theta = flat(adapters);
    let gvec = flat(&grad);
    let n = theta.len();
    let mut r = rng::seeded(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for _ in 0..directions {
        let v = rng::normal_tensor(&mut r, 1, n, 1.0).into_vec();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dirs.push(v.iter().map(|x| x / norm).collect());
    }
    let picks = rng::uniform_tensor(&mut r, 1, coords, 1.0);
    for k in 0..coords {
        let idx = (((picks.get(0, k) + 1.0) / 2.0) * n as f64) as usize % n;
        let mut e = vec![0.0; n];
        e[idx] = 1.0;
        dirs.push(e);
    }
    let mut worst: f64 = 0.0;
    for d in dirs {
        let plus: Vec<f64> = theta.iter().zip(&d).map(|(t, v)| t + h * v).collect();
        let minus: Vec<f64> = theta.iter().zip(&d).map(|(t, v)| t - h * v).collect();
        let numeric = (loss_only(g, req, &with_flat(adapters, &plus), loss)
            - loss_only(g, req, &with_flat(adapters, &minus), loss))
            / (2.0 * h);
        let analytic: f64 = gvec.iter().zip(&d).map(|(a, b)| a * b).sum();
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-7 {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

pub fn tensor_scalar(v: f64) -> Tensor {
    Tensor::scalar(v)
}
