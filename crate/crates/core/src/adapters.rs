//! Low-rank adapter parameters and their injection into frozen projections.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A frozen linear projection `d_in → d_out` that adapters may target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { id: id.into(), d_in, d_out }
    }

    /// Attention projections are the default adapter targets.
    pub fn is_attention(&self) -> bool {
        self.id.contains(".attn.")
    }
}

/// Factor pair for one layer: `ΔW = up · down`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankPair {
    pub layer: String,
    /// `rank × d_in`
    pub down: Tensor,
    /// `d_out × rank`
    pub up: Tensor,
}

/// Trainable low-rank deltas for a set of frozen layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    rank: usize,
    scale: f64,
    pairs: Vec<LowRankPair>,
}

impl AdapterParams {
    /// Random down-projections, zero up-projections: the adapted model starts
    /// out identical to the frozen one.
    pub fn init(layers: &[LayerSpec], rank: usize, targets: &[String], seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".to_string()));
        }
        let mut pairs = Vec::with_capacity(targets.len());
        for target in targets {
            let spec = layers
                .iter()
                .find(|l| &l.id == target)
                .ok_or_else(|| Error::UnknownLayer(target.clone()))?;
            if pairs.iter().any(|p: &LowRankPair| &p.layer == target) {
                return Err(Error::Config(format!("adapter target `{target}` listed twice")));
            }
            let mut r = rng::seeded(rng::derive_seed(seed, &spec.id));
            // Kaiming-uniform bound for a fan-in of d_in.
            let bound = 1.0 / libm::sqrt(spec.d_in as f64);
            pairs.push(LowRankPair {
                layer: spec.id.clone(),
                down: rng::uniform_tensor(&mut r, rank, spec.d_in, bound),
                up: Tensor::zeros(spec.d_out, rank),
            });
        }
        Ok(Self { rank, scale: 1.0, pairs })
    }

    /// Assembles parameters from explicit factors, checking every shape.
    pub fn from_pairs(rank: usize, scale: f64, pairs: Vec<LowRankPair>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".to_string()));
        }
        for p in &pairs {
            if p.down.rows() != rank || p.up.cols() != rank {
                return Err(Error::Shape(format!(
                    "layer `{}`: factors {:?}/{:?} inconsistent with rank {rank}",
                    p.layer,
                    p.down.shape(),
                    p.up.shape()
                )));
            }
        }
        Ok(Self { rank, scale, pairs })
    }

    /// Adapter with no target layers.
    pub fn empty() -> Self {
        Self { rank: 1, scale: 1.0, pairs: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Same factors with the injection scaled by `scale`.
    pub fn with_scale(&self, scale: f64) -> Self {
        Self { scale, ..self.clone() }
    }

    pub fn pairs(&self) -> &[LowRankPair] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [LowRankPair] {
        &mut self.pairs
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.layer.as_str())
    }

    pub fn get(&self, layer: &str) -> Option<&LowRankPair> {
        self.pairs.iter().find(|p| p.layer == layer)
    }

    pub fn num_params(&self) -> usize {
        self.pairs.iter().map(|p| p.down.len() + p.up.len()).sum()
    }

    /// Every factor in a fixed order (per layer: down, then up).
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.pairs.iter().flat_map(|p| [&p.down, &p.up])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.pairs.iter_mut().flat_map(|p| [&mut p.down, &mut p.up])
    }

    /// Zero-valued parameters with identical layout.
    pub fn zeros_like(&self) -> Self {
        let pairs = self
            .pairs
            .iter()
            .map(|p| LowRankPair {
                layer: p.layer.clone(),
                down: Tensor::zeros(p.down.rows(), p.down.cols()),
                up: Tensor::zeros(p.up.rows(), p.up.cols()),
            })
            .collect();
        Self { rank: self.rank, scale: self.scale, pairs }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn max_abs_diff(&self, other: &AdapterParams) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.zip_map(b, |x, y| x - y).max_abs())
            .fold(0.0, f64::max)
    }

    /// Order-sensitive hash of every bit of every factor.
    pub fn checksum(&self) -> u64 {
        let mut h = rng::fnv1a(&(self.rank as u64).to_le_bytes(), 0);
        h = rng::fnv1a(&self.scale.to_bits().to_le_bytes(), h);
        for p in &self.pairs {
            h = rng::fnv1a(p.layer.as_bytes(), h);
            for t in [&p.down, &p.up] {
                for v in t.data() {
                    h = rng::fnv1a(&v.to_bits().to_le_bytes(), h);
                }
            }
        }
        h
    }

    /// Records the factors on `tape` as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> AdapterBinding {
        self.bind_with(tape, true)
    }

    /// Records the factors as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> AdapterBinding {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> AdapterBinding {
        let mut vars = BTreeMap::new();
        for p in &self.pairs {
            let (down, up) = if trainable {
                (tape.leaf(p.down.clone()), tape.leaf(p.up.clone()))
            } else {
                (tape.constant(p.down.clone()), tape.constant(p.up.clone()))
            };
            vars.insert(p.layer.clone(), (down, up));
        }
        AdapterBinding { scale: self.scale, vars }
    }
}

/// Adapter factors as recorded on a particular tape.
#[derive(Clone, Debug, Default)]
pub struct AdapterBinding {
    scale: f64,
    vars: BTreeMap<String, (Var, Var)>,
}

impl AdapterBinding {
    /// No adapters: every projection uses the frozen weight alone.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn covers(&self, layer: &str) -> bool {
        self.vars.contains_key(layer)
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// `x · Wᵀ + scale · (x · downᵀ) · upᵀ`, where `weight_t` holds `Wᵀ`.
    pub fn project(&self, tape: &mut Tape, layer: &str, x: Var, weight_t: Var) -> Var {
        let base = tape.matmul(x, weight_t);
        match self.vars.get(layer) {
            None => base,
            Some(&(down, up)) => {
                let down_t = tape.transpose(down);
                let up_t = tape.transpose(up);
                let low = tape.matmul(x, down_t);
                let delta = tape.matmul(low, up_t);
                let delta = if self.scale == 1.0 { delta } else { tape.scale(delta, self.scale) };
                tape.add(base, delta)
            }
        }
    }

    /// Pulls the factor gradients out of `grads`, laid out like `params`.
    pub fn gradients(&self, params: &AdapterParams, grads: &Gradients) -> AdapterParams {
        let mut out = params.zeros_like();
        for p in out.pairs.iter_mut() {
            if let Some(&(down, up)) = self.vars.get(&p.layer) {
                p.down = grads.get_or_zeros(down, p.down.shape());
                p.up = grads.get_or_zeros(up, p.up.shape());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn layers() -> Vec<LayerSpec> {
        vec![LayerSpec::new("blk.attn.to_q", 8, 8), LayerSpec::new("decoder.proj", 8, 3)]
    }

    #[test]
    fn init_shapes_follow_rank() {
        let a = AdapterParams::init(&layers(), 4, &["blk.attn.to_q".into(), "decoder.proj".into()], 3).unwrap();
        let dec = a.get("decoder.proj").unwrap();
        assert_eq!(dec.down.shape(), (4, 8));
        assert_eq!(dec.up.shape(), (3, 4));
        assert_eq!(dec.up.max_abs(), 0.0);
        assert!(dec.down.max_abs() > 0.0);
        assert_eq!(a.num_params(), 4 * 8 + 8 * 4 + 4 * 8 + 3 * 4);
    }

    #[test]
    fn unknown_layer_is_named() {
        let err = AdapterParams::init(&layers(), 4, &["nope".into()], 0).unwrap_err();
        assert_eq!(err, Error::UnknownLayer("nope".into()));
        assert!(AdapterParams::init(&layers(), 0, &[], 0).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let a = AdapterParams::init(&layers(), 2, &["decoder.proj".into()], 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.pairs_mut()[0].up.data_mut()[0] = 1e-300;
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn from_pairs_rejects_rank_mismatch() {
        let pair = LowRankPair { layer: "x".into(), down: Tensor::zeros(2, 3), up: Tensor::zeros(3, 3) };
        assert!(AdapterParams::from_pairs(2, 1.0, vec![pair]).is_err());
    }
}
