// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hooked decoder-only transformer.
//!
//! Pre-norm blocks, learned absolute positions, untied unembedding, no
//! dropout. The attention output is assembled head by head, so each head's
//! post-output-projection contribution to the residual stream is a first-class
//! value: it can be captured, replaced (activation patching), and summed into
//! task-conditioned means without re-deriving it from fused weights.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use forward::argmax_lowest_id;
pub(crate) use forward::unit_of;

use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};
use crate::math::rng::DetRng;
use crate::math::tensor::Tensor;

/// Architecture hyperparameters. Positional scheme is learned-absolute and
/// norm placement is pre-norm by construction; neither is configurable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_mlp,
            self.vocab_size,
            self.max_seq,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(FvError::invalid(format!("non-positive field in {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(FvError::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Attention head coordinate; ordered lexicographically by (layer, head).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }

    pub fn in_bounds(&self, config: &ModelConfig) -> bool {
        self.layer < config.n_layers && self.head < config.n_heads
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Which sequence position a capture or patch refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionPolicy {
    /// The final token of the prompt (where the answer is predicted).
    Final,
    Index(usize),
}

impl PositionPolicy {
    pub fn resolve(&self, seq_len: usize) -> Result<usize> {
        if seq_len == 0 {
            return Err(FvError::invalid("empty token sequence".into()));
        }
        match self {
            PositionPolicy::Final => Ok(seq_len - 1),
            PositionPolicy::Index(i) if *i < seq_len => Ok(*i),
            PositionPolicy::Index(i) => Err(FvError::invalid(format!(
                "position {i} out of sequence length {seq_len}"
            ))),
        }
    }
}

/// What to record during a forward pass. Capturing never changes the
/// computation; a capture-only pass is bit-identical to a plain one.
#[derive(Clone, Debug, Default)]
pub struct CaptureSpec {
    /// Per-head residual contributions at this position.
    pub head_outputs: Option<PositionPolicy>,
    /// Residual stream after each listed layer's block (post-intervention).
    pub resid_post: std::collections::BTreeSet<usize>,
    /// Attention-block residual contribution (all positions) per listed layer.
    pub attn_out: std::collections::BTreeSet<usize>,
    /// MLP residual contribution (all positions) per listed layer.
    pub mlp_out: std::collections::BTreeSet<usize>,
    /// The embedding stream (token + position) before any block.
    pub embeddings: bool,
}

impl CaptureSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn heads(policy: PositionPolicy) -> Self {
        CaptureSpec {
            head_outputs: Some(policy),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.head_outputs.is_none()
            && self.resid_post.is_empty()
            && self.attn_out.is_empty()
            && self.mlp_out.is_empty()
            && !self.embeddings
    }
}

/// Values recorded by a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ActivationCache {
    /// Head (layer, head) -> its d_model contribution at the captured position.
    pub head_outputs: std::collections::BTreeMap<HeadId, Tensor>,
    /// Layer -> residual stream `[positions, d_model]` after that block.
    pub resid_post: std::collections::BTreeMap<usize, Tensor>,
    pub attn_out: std::collections::BTreeMap<usize, Tensor>,
    pub mlp_out: std::collections::BTreeMap<usize, Tensor>,
    pub embeddings: Option<Tensor>,
}

/// Logits plus whatever the capture request asked for.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// `[positions, vocab]` logits (rows restricted when requested internally).
    pub logits: Tensor,
    pub cache: ActivationCache,
}

pub(crate) struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// The toy transformer: immutable once built; forward passes are pure.
pub struct DecoderModel {
    pub(crate) config: ModelConfig,
    pub(crate) wte: Tensor,
    pub(crate) wpe: Tensor,
    pub(crate) blocks: Vec<BlockParams>,
    pub(crate) lnf_g: Tensor,
    pub(crate) lnf_b: Tensor,
    pub(crate) wu: Tensor,
    provenance: String,
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl DecoderModel {
    /// Fresh random initialization. Residual-writing projections are scaled
    /// down by sqrt(2 * n_layers), GPT-2 style.
    pub fn init_random(config: &ModelConfig, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 0.02f32;
        let std_out = std / ((2 * config.n_layers) as f32).sqrt();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(BlockParams {
                ln1_g: Tensor::new(vec![d], vec![1.0; d])?,
                ln1_b: Tensor::zeros(vec![d]),
                wq: Tensor::randn(vec![d, d], std, rng)?,
                bq: Tensor::zeros(vec![d]),
                wk: Tensor::randn(vec![d, d], std, rng)?,
                bk: Tensor::zeros(vec![d]),
                wv: Tensor::randn(vec![d, d], std, rng)?,
                bv: Tensor::zeros(vec![d]),
                wo: Tensor::randn(vec![d, d], std_out, rng)?,
                bo: Tensor::zeros(vec![d]),
                ln2_g: Tensor::new(vec![d], vec![1.0; d])?,
                ln2_b: Tensor::zeros(vec![d]),
                w1: Tensor::randn(vec![d, config.d_mlp], std, rng)?,
                b1: Tensor::zeros(vec![config.d_mlp]),
                w2: Tensor::randn(vec![config.d_mlp, d], std_out, rng)?,
                b2: Tensor::zeros(vec![d]),
            });
        }
        Ok(DecoderModel {
            config: config.clone(),
            wte: Tensor::randn(vec![config.vocab_size, d], std, rng)?,
            wpe: Tensor::randn(vec![config.max_seq, d], std, rng)?,
            blocks,
            lnf_g: Tensor::new(vec![d], vec![1.0; d])?,
            lnf_b: Tensor::zeros(vec![d]),
            wu: Tensor::randn(vec![d, config.vocab_size], std, rng)?,
            provenance: "base".into(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn set_provenance(&mut self, tag: impl Into<String>) {
        self.provenance = tag.into();
    }

    /// Stable name -> shape directory, in serialization order.
    pub fn tensor_order(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = vec![
            ("wte".to_string(), vec![config.vocab_size, d]),
            ("wpe".to_string(), vec![config.max_seq, d]),
        ];
        for i in 0..config.n_layers {
            let p = |name: &str| format!("blocks.{i}.{name}");
            out.push((p("ln1.g"), vec![d]));
            out.push((p("ln1.b"), vec![d]));
            out.push((p("attn.wq"), vec![d, d]));
            out.push((p("attn.bq"), vec![d]));
            out.push((p("attn.wk"), vec![d, d]));
            out.push((p("attn.bk"), vec![d]));
            out.push((p("attn.wv"), vec![d, d]));
            out.push((p("attn.bv"), vec![d]));
            out.push((p("attn.wo"), vec![d, d]));
            out.push((p("attn.bo"), vec![d]));
            out.push((p("ln2.g"), vec![d]));
            out.push((p("ln2.b"), vec![d]));
            out.push((p("mlp.w1"), vec![d, config.d_mlp]));
            out.push((p("mlp.b1"), vec![config.d_mlp]));
            out.push((p("mlp.w2"), vec![config.d_mlp, d]));
            out.push((p("mlp.b2"), vec![d]));
        }
        out.push(("lnf.g".to_string(), vec![d]));
        out.push(("lnf.b".to_string(), vec![d]));
        out.push(("wu".to_string(), vec![d, config.vocab_size]));
        out
    }

    /// Borrow every parameter in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("wte".to_string(), &self.wte),
            ("wpe".to_string(), &self.wpe),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("blocks.{i}.{name}");
            out.push((p("ln1.g"), &b.ln1_g));
            out.push((p("ln1.b"), &b.ln1_b));
            out.push((p("attn.wq"), &b.wq));
            out.push((p("attn.bq"), &b.bq));
            out.push((p("attn.wk"), &b.wk));
            out.push((p("attn.bk"), &b.bk));
            out.push((p("attn.wv"), &b.wv));
            out.push((p("attn.bv"), &b.bv));
            out.push((p("attn.wo"), &b.wo));
            out.push((p("attn.bo"), &b.bo));
            out.push((p("ln2.g"), &b.ln2_g));
            out.push((p("ln2.b"), &b.ln2_b));
            out.push((p("mlp.w1"), &b.w1));
            out.push((p("mlp.b1"), &b.b1));
            out.push((p("mlp.w2"), &b.w2));
            out.push((p("mlp.b2"), &b.b2));
        }
        out.push(("lnf.g".to_string(), &self.lnf_g));
        out.push(("lnf.b".to_string(), &self.lnf_b));
        out.push(("wu".to_string(), &self.wu));
        out
    }

    /// Mutable parameter views in the same order (optimizer use).
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("wte".to_string(), &mut self.wte),
            ("wpe".to_string(), &mut self.wpe),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |name: &str| format!("blocks.{i}.{name}");
            out.push((p("ln1.g"), &mut b.ln1_g));
            out.push((p("ln1.b"), &mut b.ln1_b));
            out.push((p("attn.wq"), &mut b.wq));
            out.push((p("attn.bq"), &mut b.bq));
            out.push((p("attn.wk"), &mut b.wk));
            out.push((p("attn.bk"), &mut b.bk));
            out.push((p("attn.wv"), &mut b.wv));
            out.push((p("attn.bv"), &mut b.bv));
            out.push((p("attn.wo"), &mut b.wo));
            out.push((p("attn.bo"), &mut b.bo));
            out.push((p("ln2.g"), &mut b.ln2_g));
            out.push((p("ln2.b"), &mut b.ln2_b));
            out.push((p("mlp.w1"), &mut b.w1));
            out.push((p("mlp.b1"), &mut b.b1));
            out.push((p("mlp.w2"), &mut b.w2));
            out.push((p("mlp.b2"), &mut b.b2));
        }
        out.push(("lnf.g".to_string(), &mut self.lnf_g));
        out.push(("lnf.b".to_string(), &mut self.lnf_b));
        out.push(("wu".to_string(), &mut self.wu));
        out
    }

    /// Rebuild a model from named tensors (checkpoint load).
    pub fn from_named(
        config: ModelConfig,
        provenance: String,
        mut tensors: std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| FvError::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(FvError::Format(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };
        let order = Self::tensor_order(&config);
        let mut fetched: Vec<Tensor> = Vec::with_capacity(order.len());
        for (name, shape) in &order {
            fetched.push(take(name.clone(), shape)?);
        }
        if !tensors.is_empty() {
            let extra: Vec<_> = tensors.keys().cloned().collect();
            return Err(FvError::Format(format!("unexpected tensors: {extra:?}")));
        }
        let mut it = fetched.into_iter();
        let wte = it.next().unwrap();
        let wpe = it.next().unwrap();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(BlockParams {
                ln1_g: it.next().unwrap(),
                ln1_b: it.next().unwrap(),
                wq: it.next().unwrap(),
                bq: it.next().unwrap(),
                wk: it.next().unwrap(),
                bk: it.next().unwrap(),
                wv: it.next().unwrap(),
                bv: it.next().unwrap(),
                wo: it.next().unwrap(),
                bo: it.next().unwrap(),
                ln2_g: it.next().unwrap(),
                ln2_b: it.next().unwrap(),
                w1: it.next().unwrap(),
                b1: it.next().unwrap(),
                w2: it.next().unwrap(),
                b2: it.next().unwrap(),
            });
        }
        Ok(DecoderModel {
            config,
            wte,
            wpe,
            blocks,
            lnf_g: it.next().unwrap(),
            lnf_b: it.next().unwrap(),
            wu: it.next().unwrap(),
            provenance,
        })
    }

    /// Content digest of the serialized checkpoint form.
    pub fn digest(&self) -> u64 {
        checkpoint::digest_of(self)
    }

    /// All heads of this model in (layer, head) order.
    pub fn all_heads(&self) -> Vec<HeadId> {
        let mut out = Vec::with_capacity(self.config.n_layers * self.config.n_heads);
        for layer in 0..self.config.n_layers {
            for head in 0..self.config.n_heads {
                out.push(HeadId { layer, head });
            }
        }
        out
    }
}
