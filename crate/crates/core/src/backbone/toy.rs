//! A small analytic generator for desk-scale verification.
//!
//! The latent is a grid of tokens. Each denoising step runs one
//! single-head self-attention block conditioned on the prompt and the step,
//! then blends the result into the latent. The decoder projects tokens to
//! RGB, upsamples bilinearly, adds a fixed high-frequency pattern and squashes
//! through a sigmoid. All weights are drawn from a fixed seed.

use alloc::format;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Anchor, GenerateRequest, Generator, GeneratorHandle, Inversion, InversionConfig, Latent, LatentSeed};
use crate::adapters::{AdapterBinding, AdapterParams, LayerSpec};
use crate::autodiff::{RowMix, Tape, Var};
use crate::image::{bilinear_mix, Image};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const TO_Q: &str = "denoiser.attn.to_q";
pub const TO_K: &str = "denoiser.attn.to_k";
pub const TO_V: &str = "denoiser.attn.to_v";
pub const TO_OUT: &str = "denoiser.attn.to_out";
pub const DECODER: &str = "decoder.proj";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub height: usize,
    pub width: usize,
    pub model_dim: usize,
    pub default_steps: usize,
    pub weight_seed: u64,
    /// Tape budget for the differentiable part of a pass; `None` is unbounded.
    pub memory_budget_bytes: Option<usize>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { height: 8, width: 8, model_dim: 8, default_steps: 2, weight_seed: 7, memory_budget_bytes: None }
    }
}

impl ToyConfig {
    pub fn with_resolution(height: usize, width: usize) -> Self {
        Self { height, width, ..Self::default() }
    }

    fn grid(&self) -> (usize, usize) {
        (self.height.div_ceil(2), self.width.div_ceil(2))
    }

    pub fn handle(&self) -> GeneratorHandle {
        let (gh, gw) = self.grid();
        GeneratorHandle {
            backbone_id: "toy".to_string(),
            distilled: true,
            default_steps: self.default_steps,
            default_truncation: 1,
            render_steps: 4,
            latent_shape: vec![gh * gw, self.model_dim],
            resolution: (self.height, self.width),
            supports_inversion: true,
        }
    }
}

struct Frozen {
    wq_t: Tensor,
    wk_t: Tensor,
    wv_t: Tensor,
    wo_t: Tensor,
    dec_t: Tensor,
    detail: Tensor,
    upsample: Arc<RowMix>,
    downsample: Arc<RowMix>,
    lift: Tensor,
}

/// Seed-deterministic, exactly differentiable stand-in for a diffusion model.
pub struct ToyBackbone {
    config: ToyConfig,
    handle: GeneratorHandle,
    layers: Vec<LayerSpec>,
    frozen: Frozen,
}

impl ToyBackbone {
    pub fn new(config: ToyConfig) -> Result<Self> {
        for (name, v) in [("height", config.height), ("width", config.width)] {
            if !(8..=32).contains(&v) {
                return Err(Error::Config(format!("toy {name} must be in 8..=32, got {v}")));
            }
        }
        if config.model_dim < 2 || !(1..=4).contains(&config.default_steps) {
            return Err(Error::Config("toy model_dim >= 2 and default_steps in 1..=4 required".to_string()));
        }
        let handle = config.handle();
        let d = config.model_dim;
        let grid = config.grid();
        let pixels = config.height * config.width;
        let mut r = rng::seeded(config.weight_seed);
        let attn_std = 1.0 / libm::sqrt(d as f64);
        let wq_t = rng::normal_tensor(&mut r, d, d, attn_std);
        let wk_t = rng::normal_tensor(&mut r, d, d, attn_std);
        let wv_t = rng::normal_tensor(&mut r, d, d, attn_std);
        let wo_t = rng::normal_tensor(&mut r, d, d, attn_std);
        let dec_t = rng::normal_tensor(&mut r, d, 3, 1.5 * attn_std);
        let detail = rng::normal_tensor(&mut r, pixels, 3, 0.25);
        let lift = pseudo_inverse_rows(&dec_t);
        let layers = vec![
            LayerSpec::new(TO_Q, d, d),
            LayerSpec::new(TO_K, d, d),
            LayerSpec::new(TO_V, d, d),
            LayerSpec::new(TO_OUT, d, d),
            LayerSpec::new(DECODER, d, 3),
        ];
        let frozen = Frozen {
            wq_t,
            wk_t,
            wv_t,
            wo_t,
            dec_t,
            detail,
            upsample: Arc::new(bilinear_mix(grid, (config.height, config.width))),
            downsample: Arc::new(bilinear_mix((config.height, config.width), grid)),
            lift,
        };
        Ok(Self { config, handle, layers, frozen })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn tokens(&self) -> usize {
        let (gh, gw) = self.config.grid();
        gh * gw
    }

    fn prompt_embedding(&self, prompt: &str) -> Tensor {
        let mut r = rng::seeded(rng::derive_seed(self.config.weight_seed, prompt));
        rng::normal_tensor(&mut r, 1, self.config.model_dim, 0.5)
    }

    fn step_embedding(&self, step: usize, steps: usize) -> Tensor {
        let tau = (steps - step) as f64 / steps as f64;
        Tensor::from_fn(1, self.config.model_dim, |_, k| {
            0.3 * libm::sin(tau * (k as f64 + 1.0) * core::f64::consts::FRAC_PI_2)
        })
    }

    fn bytes_per_step(&self) -> usize {
        let n = self.tokens();
        let d = self.config.model_dim;
        (14 * n * d + 3 * n * n) * core::mem::size_of::<f64>()
    }

    fn decoder_bytes(&self) -> usize {
        (self.tokens() * 3 + 6 * self.config.height * self.config.width * 3) * core::mem::size_of::<f64>()
    }

    fn check_budget(&self, truncation: usize) -> Result<()> {
        let Some(budget) = self.config.memory_budget_bytes else { return Ok(()) };
        let needed = truncation * self.bytes_per_step() + self.decoder_bytes();
        if needed > budget {
            let suggested = budget.saturating_sub(self.decoder_bytes()) / self.bytes_per_step();
            return Err(Error::Sizing {
                requested: truncation,
                suggested: suggested.max(1),
                needed_bytes: needed,
                budget_bytes: budget,
            });
        }
        Ok(())
    }

    fn denoise_step(
        &self,
        tape: &mut Tape,
        z: Var,
        cond: &Tensor,
        step: usize,
        steps: usize,
        adapters: &AdapterBinding,
    ) -> Var {
        let f = &self.frozen;
        let mut c = cond.clone();
        c.add_assign(&self.step_embedding(step, steps));
        let c = tape.constant(c);
        let h = tape.add_row(z, c);
        let wq = tape.constant(f.wq_t.clone());
        let wk = tape.constant(f.wk_t.clone());
        let wv = tape.constant(f.wv_t.clone());
        let wo = tape.constant(f.wo_t.clone());
        let q = adapters.project(tape, TO_Q, h, wq);
        let k = adapters.project(tape, TO_K, h, wk);
        let v = adapters.project(tape, TO_V, h, wv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / libm::sqrt(self.config.model_dim as f64));
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, v);
        let o = adapters.project(tape, TO_OUT, mixed, wo);
        let pre = tape.add(h, o);
        let update = tape.tanh(pre);
        let beta = 1.0 / (steps - step) as f64;
        if beta == 1.0 {
            update
        } else {
            let keep = tape.scale(z, 1.0 - beta);
            let blend = tape.scale(update, beta);
            tape.add(keep, blend)
        }
    }

    fn decode(&self, tape: &mut Tape, z: Var, adapters: &AdapterBinding) -> Var {
        let dec = tape.constant(self.frozen.dec_t.clone());
        let rgb = adapters.project(tape, DECODER, z, dec);
        let up = tape.row_mix(rgb, self.frozen.upsample.clone());
        let detail = tape.constant(self.frozen.detail.clone());
        let logits = tape.add(up, detail);
        tape.sigmoid(logits)
    }

    /// Decoded image of the denoised tokens, ignoring any anchor.
    fn sample(&self, tape: &mut Tape, tokens: Var, prompt: &str, steps: usize, truncation: usize, adapters: &AdapterBinding) -> Var {
        let cond = self.prompt_embedding(prompt);
        let mut z = tokens;
        for step in 0..steps {
            if step == steps - truncation {
                z = tape.detach(z);
            }
            z = self.denoise_step(tape, z, &cond, step, steps, adapters);
        }
        self.decode(tape, z, adapters)
    }

    fn encode(&self, image: &Image) -> Tensor {
        let logits = image.to_tensor().map(|v| {
            let p = v.clamp(1e-4, 1.0 - 1e-4);
            libm::log(p / (1.0 - p))
        });
        let residual = logits.zip_map(&self.frozen.detail, |a, b| a - b);
        let coarse = self.frozen.downsample.apply(&residual);
        coarse.matmul(&self.frozen.lift)
    }
}

/// Least-squares lift from RGB logits back to token space: for the `d × 3`
/// decoder projection `D`, returns the `3 × d` matrix `(DᵀD)⁻¹Dᵀ`.
fn pseudo_inverse_rows(dec_t: &Tensor) -> Tensor {
    let gram = dec_t.transpose().matmul(dec_t);
    invert3(&gram).matmul(&dec_t.transpose())
}

fn invert3(m: &Tensor) -> Tensor {
    let a = |r, c| m.get(r, c);
    let det = a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
        + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
    let cof = |r0, c0, r1, c1| a(r0, c0) * a(r1, c1) - a(r0, c1) * a(r1, c0);
    let adj = [
        [cof(1, 1, 2, 2), -cof(0, 1, 2, 2), cof(0, 1, 1, 2)],
        [-cof(1, 0, 2, 2), cof(0, 0, 2, 2), -cof(0, 0, 1, 2)],
        [cof(1, 0, 2, 1), -cof(0, 0, 2, 1), cof(0, 0, 1, 1)],
    ];
    Tensor::from_fn(3, 3, |r, c| adj[r][c] / det)
}

impl Generator for ToyBackbone {
    fn handle(&self) -> &GeneratorHandle {
        &self.handle
    }

    fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn sample_latent(&self, seed: u64) -> LatentSeed {
        let mut r = rng::seeded(rng::derive_seed(seed, "latent"));
        let tokens = rng::normal_tensor(&mut r, self.tokens(), self.config.model_dim, 1.0);
        LatentSeed { seed, latent: Latent { tokens, anchor: None } }
    }

    fn forward(&self, tape: &mut Tape, request: &GenerateRequest<'_>, adapters: &AdapterBinding) -> Result<Var> {
        if request.truncation == 0 || request.truncation > request.steps {
            return Err(Error::Config(format!(
                "truncation depth {} must be in 1..={}",
                request.truncation, request.steps
            )));
        }
        let expected = (self.tokens(), self.config.model_dim);
        if request.latent.tokens.shape() != expected {
            return Err(Error::Shape(format!(
                "toy latent must be {expected:?}, got {:?}",
                request.latent.tokens.shape()
            )));
        }
        self.check_budget(request.truncation)?;
        let tokens = tape.constant(request.latent.tokens.clone());
        let decoded = self.sample(tape, tokens, request.prompt, request.steps, request.truncation, adapters);
        match &request.latent.anchor {
            None => Ok(decoded),
            Some(Anchor { image, strength }) => {
                if image.dims() != (self.config.height, self.config.width) {
                    return Err(Error::Shape("anchor image does not match the toy resolution".to_string()));
                }
                let anchor = tape.constant(image.to_tensor());
                let kept = tape.scale(anchor, 1.0 - strength);
                let regenerated = tape.scale(decoded, *strength);
                Ok(tape.add(kept, regenerated))
            }
        }
    }

    fn invert(&self, image: &Image, prompt: &str, steps: usize, config: &InversionConfig) -> Result<Inversion> {
        config.validate()?;
        if image.dims() != (self.config.height, self.config.width) {
            return Err(Error::Shape(format!(
                "toy inversion expects {}x{}, got {}x{}",
                self.config.height,
                self.config.width,
                image.height(),
                image.width()
            )));
        }
        if steps == 0 {
            return Err(Error::Config("inversion needs at least one step".to_string()));
        }
        let target = image.to_tensor();
        let reconstruction_error = |z: &Tensor| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let zv = tape.leaf(z.clone());
            let img = self.sample(&mut tape, zv, prompt, steps, steps, &AdapterBinding::none());
            let t = tape.constant(target.clone());
            let diff = tape.sub(img, t);
            let sq = tape.square(diff);
            let loss = tape.sum(sq);
            let g = tape.backward(loss);
            (tape.value(loss).item(), g.get_or_zeros(zv, z.shape()))
        };

        // Renoising refinement: a few backtracking descent steps pulling the
        // decoded latent toward the input.
        let mut z = self.encode(image);
        let (mut loss, mut grad) = reconstruction_error(&z);
        let mut step = 1.0;
        for _ in 0..config.renoise_iterations {
            let mut accepted = false;
            for _ in 0..12 {
                let candidate = z.zip_map(&grad, |a, g| a - step * g);
                let (l, g) = reconstruction_error(&candidate);
                if l.is_finite() && l < loss {
                    z = candidate;
                    loss = l;
                    grad = g;
                    accepted = true;
                    step *= 1.5;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }

        let latent = Latent { tokens: z, anchor: Some(Anchor { image: image.clone(), strength: config.strength }) };
        let request = GenerateRequest { prompt, latent: &latent, steps, truncation: steps };
        let reconstruction = super::generate(self, &request, &AdapterParams::empty())?;
        Ok(Inversion { latent, reconstruction, prompt: prompt.to_string(), steps })
    }
}
