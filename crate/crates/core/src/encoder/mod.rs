//! The masked-prediction encoder: a pre-norm transformer over feature
//! frames with span masking, exposed per-layer hidden states, a cluster
//! posterior head, and hand-written exact gradients.

mod model;
mod params;

pub use model::{
    backward_from_hidden, extract_embeddings, forward, loss_and_grad, ForwardTrace, LossOutput,
    Mode,
};
pub use params::{LayoutEntry, ParamVec, TensorLayout};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Posterior head: plain linear projection, or cosine similarity against
/// learned codewords sharpened by a temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Cosine { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Transformer blocks L (0 allowed: input projection straight to head).
    pub layers: usize,
    /// Model width d.
    pub dim: usize,
    /// Attention heads h; must divide `dim`.
    pub heads: usize,
    /// Feedforward hidden width.
    pub ff_dim: usize,
    /// Input feature dimension (39 for the MFCC front end).
    pub input_dim: usize,
    /// Cluster vocabulary K (posterior head width).
    pub vocab: usize,
    /// Masked span length in frames.
    pub mask_span: usize,
    /// Per-frame probability of starting a masked span.
    pub mask_prob: f64,
    pub dropout: f64,
    pub head: HeadKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 6,
            dim: 64,
            heads: 4,
            ff_dim: 128,
            input_dim: 39,
            vocab: 100,
            mask_span: 5,
            mask_prob: 0.08,
            dropout: 0.1,
            head: HeadKind::Linear,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.input_dim == 0 || self.ff_dim == 0 || self.vocab == 0 {
            return Err(Error::config("input_dim, ff_dim and vocab must be positive"));
        }
        if self.mask_span == 0 {
            return Err(Error::config("mask_span must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if let HeadKind::Cosine { temperature } = self.head {
            if temperature <= 0.0 {
                return Err(Error::config("cosine head temperature must be positive"));
            }
        }
        Ok(())
    }

    /// Named-tensor layout for this architecture, in a stable order.
    pub fn layout(&self) -> Arc<TensorLayout> {
        let (d, ff) = (self.dim, self.ff_dim);
        let mut b = TensorLayout::builder()
            .tensor("input.w", &[self.input_dim, d])
            .tensor("input.b", &[d])
            .tensor("mask_emb", &[d]);
        for l in 0..self.layers {
            b = b
                .tensor(&format!("layer{l}.ln1.scale"), &[d])
                .tensor(&format!("layer{l}.ln1.bias"), &[d])
                .tensor(&format!("layer{l}.attn.wq"), &[d, d])
                .tensor(&format!("layer{l}.attn.bq"), &[d])
                .tensor(&format!("layer{l}.attn.wk"), &[d, d])
                .tensor(&format!("layer{l}.attn.bk"), &[d])
                .tensor(&format!("layer{l}.attn.wv"), &[d, d])
                .tensor(&format!("layer{l}.attn.bv"), &[d])
                .tensor(&format!("layer{l}.attn.wo"), &[d, d])
                .tensor(&format!("layer{l}.attn.bo"), &[d])
                .tensor(&format!("layer{l}.ln2.scale"), &[d])
                .tensor(&format!("layer{l}.ln2.bias"), &[d])
                .tensor(&format!("layer{l}.ffn.w1"), &[d, ff])
                .tensor(&format!("layer{l}.ffn.b1"), &[ff])
                .tensor(&format!("layer{l}.ffn.w2"), &[ff, d])
                .tensor(&format!("layer{l}.ffn.b2"), &[d]);
        }
        b = b.tensor("head.ln.scale", &[d]).tensor("head.ln.bias", &[d]);
        match self.head {
            HeadKind::Linear => {
                b = b.tensor("head.w", &[d, self.vocab]).tensor("head.b", &[self.vocab]);
            }
            HeadKind::Cosine { .. } => {
                b = b.tensor("head.codewords", &[self.vocab, d]);
            }
        }
        b.build()
    }
}

/// Deterministic parameter init: Xavier-normal weight matrices, zero
/// biases, unit layer-norm scales, small-normal mask embedding. Values are
/// snapped to the f32 grid so checkpoints round-trip exactly.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamVec> {
    config.validate()?;
    let layout = config.layout();
    let mut p = ParamVec::zeros(layout.clone());
    let mut rng = rng_from(seed);
    for e in layout.entries() {
        let slice = &mut p.data[e.offset..e.offset + e.len()];
        if e.dims.len() == 2 {
            // weight matrices: Xavier normal over (fan_in, fan_out)
            let std = (2.0 / (e.dims[0] + e.dims[1]) as f64).sqrt();
            let n = Normal::new(0.0, std).expect("std > 0");
            for v in slice {
                *v = n.sample(&mut rng);
            }
        } else if e.name.ends_with(".scale") {
            slice.fill(1.0);
        } else if e.name == "mask_emb" {
            let n = Normal::new(0.0, 0.02).expect("std > 0");
            for v in slice {
                *v = n.sample(&mut rng);
            }
        } else {
            // every bias vector starts at zero
            slice.fill(0.0);
        }
    }
    p.round_to_f32_grid();
    Ok(p)
}

/// The masked frame set M, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSpec {
    indices: Vec<usize>,
}

impl MaskSpec {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        MaskSpec { indices }
    }

    pub fn empty() -> Self {
        MaskSpec { indices: Vec::new() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.indices.binary_search(&t).is_ok()
    }

    pub fn as_bools(&self, t_len: usize) -> Vec<bool> {
        let mut b = vec![false; t_len];
        for &i in &self.indices {
            if i < t_len {
                b[i] = true;
            }
        }
        b
    }
}

/// Each frame independently starts a `mask_span`-frame span with
/// probability `mask_prob`; overlapping spans union. Frame `t` therefore
/// lands in M with probability 1 − (1−p)^min(span, t+1).
pub fn sample_mask(t_len: usize, config: &EncoderConfig, seed: u64) -> MaskSpec {
    let mut rng = rng_from(seed);
    let mut masked = vec![false; t_len];
    for t in 0..t_len {
        if rng.random::<f64>() < config.mask_prob {
            for m in masked.iter_mut().skip(t).take(config.mask_span) {
                *m = true;
            }
        }
    }
    MaskSpec {
        indices: masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect(),
    }
}
