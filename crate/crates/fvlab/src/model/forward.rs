// SPDX-License-Identifier: MIT OR Apache-2.0

//! The hooked forward pass.
//!
//! Inference and training share one code path: every forward builds a tape
//! (training registers the parameters as gradient leaves, inference does not),
//! so instrumented and uninstrumented runs produce identical bits. Logits at
//! position i depend only on tokens 0..=i via the causal-masked softmax.

use std::collections::BTreeMap;

use crate::error::{FvError, Result};
use crate::intervene::{InterventionSpec, Positions};
use crate::math::tape::{NodeId, RowSel, Tape};
use crate::math::tensor::Tensor;
use crate::model::{
    ActivationCache, CaptureSpec, DecoderModel, ForwardResult, HeadId, PositionPolicy, LN_EPS,
};

pub(crate) struct TapeBlock {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub(crate) struct TapeParams {
    pub wte: NodeId,
    pub wpe: NodeId,
    pub blocks: Vec<TapeBlock>,
    pub lnf_g: NodeId,
    pub lnf_b: NodeId,
    pub wu: NodeId,
}

impl TapeParams {
    /// Node ids in the same order as `DecoderModel::named_tensors`.
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = vec![self.wte, self.wpe];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                b.ln2_b, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        out.extend([self.lnf_g, self.lnf_b, self.wu]);
        out
    }
}

/// One residual-stream edit, lowered to tape form.
enum ResidEdit {
    Add {
        vector: Tensor,
        scale: f64,
        rows: RowSel,
    },
    Ablate {
        unit: Tensor,
    },
}

struct LoweredSpecs {
    /// layer -> (head, position, value) patches in spec order.
    patches: Vec<Vec<(usize, usize, Tensor)>>,
    /// layer -> residual edits in spec order.
    resid: Vec<Vec<ResidEdit>>,
}

/// Unit direction of `v` (f64 norm, one rounding per element).
pub(crate) fn unit_of(v: &Tensor) -> Result<Tensor> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(FvError::invalid("ablation direction is the zero vector".into()));
    }
    let data: Vec<f32> = v.data().iter().map(|&x| (x as f64 / norm) as f32).collect();
    Tensor::from_kernel(v.shape().to_vec(), data, "unit_of")
}

impl DecoderModel {
    fn lower_specs(&self, specs: &[InterventionSpec], seq_len: usize) -> Result<LoweredSpecs> {
        let n_layers = self.config.n_layers;
        let d = self.config.d_model;
        let mut lowered = LoweredSpecs {
            patches: (0..n_layers).map(|_| Vec::new()).collect(),
            resid: (0..n_layers).map(|_| Vec::new()).collect(),
        };
        for spec in specs {
            match spec {
                InterventionSpec::Add {
                    vector,
                    layer,
                    scale,
                    positions,
                } => {
                    if *layer >= n_layers {
                        return Err(FvError::invalid(format!(
                            "intervention layer {layer} out of range {n_layers}"
                        )));
                    }
                    if vector.shape() != [d] {
                        return Err(FvError::shape(format!(
                            "intervention vector {:?}, model d_model {d}",
                            vector.shape()
                        )));
                    }
                    if !scale.is_finite() {
                        return Err(FvError::NonFinite {
                            op: "intervention scale",
                            index: 0,
                        });
                    }
                    let rows = match positions {
                        Positions::LastToken => RowSel::Last,
                        Positions::AllPositions => RowSel::All,
                    };
                    lowered.resid[*layer].push(ResidEdit::Add {
                        vector: vector.clone(),
                        scale: *scale as f64,
                        rows,
                    });
                }
                InterventionSpec::Ablate { direction, layers } => {
                    if direction.shape() != [d] {
                        return Err(FvError::shape(format!(
                            "ablation direction {:?}, model d_model {d}",
                            direction.shape()
                        )));
                    }
                    if layers.is_empty() {
                        return Err(FvError::invalid("ablation with empty layer set".into()));
                    }
                    let unit = unit_of(direction)?;
                    for &layer in layers {
                        if layer >= n_layers {
                            return Err(FvError::invalid(format!(
                                "ablation layer {layer} out of range {n_layers}"
                            )));
                        }
                        lowered.resid[layer].push(ResidEdit::Ablate { unit: unit.clone() });
                    }
                }
                InterventionSpec::PatchHead {
                    head,
                    value,
                    position,
                } => {
                    if !head.in_bounds(&self.config) {
                        return Err(FvError::invalid(format!(
                            "patched head {head} out of bounds"
                        )));
                    }
                    if value.shape() != [d] {
                        return Err(FvError::shape(format!(
                            "patch value {:?}, model d_model {d}",
                            value.shape()
                        )));
                    }
                    let pos = position.resolve(seq_len)?;
                    lowered.patches[head.layer].push((head.head, pos, value.clone()));
                }
            }
        }
        Ok(lowered)
    }

    pub(crate) fn register_params(&self, tape: &mut Tape, with_grad: bool) -> TapeParams {
        let reg = |tape: &mut Tape, t: &Tensor| {
            let t = if with_grad {
                t.clone().with_grad()
            } else {
                t.clone()
            };
            tape.leaf(t)
        };
        TapeParams {
            wte: reg(tape, &self.wte),
            wpe: reg(tape, &self.wpe),
            blocks: self
                .blocks
                .iter()
                .map(|b| TapeBlock {
                    ln1_g: reg(tape, &b.ln1_g),
                    ln1_b: reg(tape, &b.ln1_b),
                    wq: reg(tape, &b.wq),
                    bq: reg(tape, &b.bq),
                    wk: reg(tape, &b.wk),
                    bk: reg(tape, &b.bk),
                    wv: reg(tape, &b.wv),
                    bv: reg(tape, &b.bv),
                    wo: reg(tape, &b.wo),
                    bo: reg(tape, &b.bo),
                    ln2_g: reg(tape, &b.ln2_g),
                    ln2_b: reg(tape, &b.ln2_b),
                    w1: reg(tape, &b.w1),
                    b1: reg(tape, &b.b1),
                    w2: reg(tape, &b.w2),
                    b2: reg(tape, &b.b2),
                })
                .collect(),
            lnf_g: reg(tape, &self.lnf_g),
            lnf_b: reg(tape, &self.lnf_b),
            wu: reg(tape, &self.wu),
        }
    }

    /// Full forward on an existing tape. `logit_rows` restricts the
    /// unembedding to the listed positions (None = all positions).
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &TapeParams,
        tokens: &[u32],
        interventions: &[InterventionSpec],
        capture: &CaptureSpec,
        logit_rows: Option<&[usize]>,
    ) -> Result<(NodeId, ActivationCache)> {
        let s = tokens.len();
        if s == 0 {
            return Err(FvError::invalid("empty token sequence".into()));
        }
        if s > self.config.max_seq {
            return Err(FvError::invalid(format!(
                "sequence length {s} exceeds max_seq {}",
                self.config.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(FvError::Token(format!(
                "token id {bad} >= vocab_size {}",
                self.config.vocab_size
            )));
        }
        let lowered = self.lower_specs(interventions, s)?;
        let head_capture_pos = match capture.head_outputs {
            Some(policy) => Some(policy.resolve(s)?),
            None => None,
        };

        let mut cache = ActivationCache::default();
        let dh = self.config.d_head();
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

        let tok = tape.gather(params.wte, tokens)?;
        let pos = tape.slice_rows(params.wpe, 0, s)?;
        let mut h = tape.add(tok, pos)?;
        if capture.embeddings {
            cache.embeddings = Some(tape.value(h).clone());
        }

        for (layer, b) in params.blocks.iter().enumerate() {
            let x1 = tape.layer_norm(h, b.ln1_g, b.ln1_b, LN_EPS)?;
            let q0 = tape.matmul(x1, b.wq)?;
            let q = tape.add_row(q0, b.bq)?;
            let k0 = tape.matmul(x1, b.wk)?;
            let k = tape.add_row(k0, b.bk)?;
            let v0 = tape.matmul(x1, b.wv)?;
            let v = tape.add_row(v0, b.bv)?;

            let mut attn_sum: Option<NodeId> = None;
            for head in 0..self.config.n_heads {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let scores = tape.matmul_tb(qh, kh)?;
                let scaled = tape.scale(scores, inv_sqrt_dh)?;
                let probs = tape.causal_softmax(scaled)?;
                let mix = tape.matmul(probs, vh)?;
                let wo_h = tape.slice_rows(b.wo, head * dh, dh)?;
                let mut contrib = tape.matmul(mix, wo_h)?;
                for (ph, ppos, pval) in &lowered.patches[layer] {
                    if *ph == head {
                        contrib = tape.replace_row(contrib, *ppos, pval)?;
                    }
                }
                if let Some(cpos) = head_capture_pos {
                    cache.head_outputs.insert(
                        HeadId { layer, head },
                        tape.value(contrib).row_tensor(cpos)?,
                    );
                }
                attn_sum = Some(match attn_sum {
                    None => contrib,
                    Some(acc) => tape.add(acc, contrib)?,
                });
            }
            let attn_out = tape.add_row(attn_sum.expect("n_heads >= 1"), b.bo)?;
            if capture.attn_out.contains(&layer) {
                cache.attn_out.insert(layer, tape.value(attn_out).clone());
            }
            h = tape.add(h, attn_out)?;

            let x2 = tape.layer_norm(h, b.ln2_g, b.ln2_b, LN_EPS)?;
            let m0 = tape.matmul(x2, b.w1)?;
            let m1 = tape.add_row(m0, b.b1)?;
            let act = tape.gelu(m1)?;
            let m2 = tape.matmul(act, b.w2)?;
            let mlp_out = tape.add_row(m2, b.b2)?;
            if capture.mlp_out.contains(&layer) {
                cache.mlp_out.insert(layer, tape.value(mlp_out).clone());
            }
            h = tape.add(h, mlp_out)?;

            for edit in &lowered.resid[layer] {
                h = match edit {
                    ResidEdit::Add {
                        vector,
                        scale,
                        rows,
                    } => tape.add_at_rows(h, vector, *rows, *scale)?,
                    ResidEdit::Ablate { unit } => tape.project_out_rows(h, unit)?,
                };
            }
            if capture.resid_post.contains(&layer) {
                cache.resid_post.insert(layer, tape.value(h).clone());
            }
        }

        let pre_unembed = match logit_rows {
            None => h,
            Some(rows) => tape.pick_rows(h, rows)?,
        };
        let x_final = tape.layer_norm(pre_unembed, params.lnf_g, params.lnf_b, LN_EPS)?;
        let logits = tape.matmul(x_final, params.wu)?;
        Ok((logits, cache))
    }

    /// Hooked forward pass; logits cover every position.
    pub fn forward(
        &self,
        tokens: &[u32],
        interventions: &[InterventionSpec],
        capture: &CaptureSpec,
    ) -> Result<ForwardResult> {
        self.run(tokens, interventions, capture, None)
    }

    /// Forward with the unembedding restricted to `rows`.
    pub fn forward_rows(
        &self,
        tokens: &[u32],
        interventions: &[InterventionSpec],
        capture: &CaptureSpec,
        rows: &[usize],
    ) -> Result<ForwardResult> {
        self.run(tokens, interventions, capture, Some(rows))
    }

    fn run(
        &self,
        tokens: &[u32],
        interventions: &[InterventionSpec],
        capture: &CaptureSpec,
        rows: Option<&[usize]>,
    ) -> Result<ForwardResult> {
        let mut tape = Tape::new();
        let params = self.register_params(&mut tape, false);
        let (logits, cache) =
            self.forward_tape(&mut tape, &params, tokens, interventions, capture, rows)?;
        Ok(ForwardResult {
            logits: tape.value(logits).clone(),
            cache,
        })
    }

    /// Greedy decoding. Interventions are re-applied to the full sequence at
    /// every step; for an `AllPositions` addition this is exactly the
    /// cached-decoding schedule in which the vector is baked into all input
    /// positions on the first pass and into the newest position at each
    /// subsequent step. Returns the newly generated tokens.
    pub fn generate(
        &self,
        prompt: &[u32],
        max_new: usize,
        interventions: &[InterventionSpec],
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(FvError::invalid("empty prompt".into()));
        }
        if max_new == 0 {
            return Err(FvError::invalid("max_new must be >= 1".into()));
        }
        if prompt.len() + max_new > self.config.max_seq {
            return Err(FvError::invalid(format!(
                "context overflow: {} prompt + {max_new} new > max_seq {}",
                prompt.len(),
                self.config.max_seq
            )));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let last = seq.len() - 1;
            let res =
                self.forward_rows(&seq, interventions, &CaptureSpec::none(), &[last])?;
            let next = argmax_lowest_id(res.logits.row(0)?);
            seq.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Per-head residual contributions at the resolved position.
    pub fn capture_head_outputs(
        &self,
        tokens: &[u32],
        policy: PositionPolicy,
    ) -> Result<BTreeMap<HeadId, Tensor>> {
        let res = self.forward_rows(
            tokens,
            &[],
            &CaptureSpec::heads(policy),
            &[tokens.len().saturating_sub(1)],
        )?;
        Ok(res.cache.head_outputs)
    }
}

/// Argmax with ties broken toward the lowest token id.
pub fn argmax_lowest_id(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}
