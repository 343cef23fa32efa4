// SPDX-License-Identifier: MIT OR Apache-2.0

//! Function-vector extraction: task-conditioned mean head outputs, causal
//! indirect effects, head ranking, and the summed vector itself.

mod extract;
mod file;

pub use extract::{build_aie, build_fv, cie, mean_head_outputs, select_top_k, AieInput};
pub use file::{export_fv, import_fv};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};
use crate::math::tensor::Tensor;
use crate::model::{DecoderModel, HeadId, PositionPolicy};

/// Task-conditioned mean of each head's residual contribution over a clean
/// prompt set, accumulated in f64.
#[derive(Clone, Debug)]
pub struct MeanHeadOutputs {
    pub task: String,
    pub means: BTreeMap<HeadId, Tensor>,
    pub n_prompts: usize,
    pub position: PositionPolicy,
}

impl MeanHeadOutputs {
    pub fn get(&self, head: HeadId) -> Result<&Tensor> {
        self.means
            .get(&head)
            .ok_or_else(|| FvError::invalid(format!("head {head} absent from mean outputs")))
    }
}

/// One causal-indirect-effect measurement: patching `head` with its
/// task-conditioned mean on one corrupted prompt.
#[derive(Clone, Debug)]
pub struct CieRecord {
    pub head: HeadId,
    pub prompt_index: usize,
    pub p_patched: f64,
    pub p_base: f64,
    /// `p_patched - p_base`, in [-1, 1].
    pub cie: f64,
}

/// Per-head average indirect effect with record counts.
#[derive(Clone, Copy, Debug)]
pub struct AieEntry {
    pub mean: f64,
    pub n: usize,
}

/// Average indirect effects over corrupted prompts (and, in multi-task mode,
/// equal-weighted over tasks). Ranking is total: ties break by (layer, head).
#[derive(Clone, Debug)]
pub struct AieTable {
    pub task: String,
    pub entries: BTreeMap<HeadId, AieEntry>,
}

impl AieTable {
    /// Heads ordered by descending AIE, ties by ascending (layer, head).
    pub fn ranked(&self) -> Vec<(HeadId, f64)> {
        let mut rows: Vec<(HeadId, f64)> =
            self.entries.iter().map(|(h, e)| (*h, e.mean)).collect();
        rows.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite AIE values")
                .then_with(|| a.0.cmp(&b.0))
        });
        rows
    }
}

/// How a function vector was extracted; serialized alongside it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    pub n_demos: usize,
    pub n_prompts: usize,
    pub k: usize,
    pub position: PositionPolicy,
}

/// A task's function vector: the sum of the task-conditioned mean outputs of
/// the selected heads, plus provenance.
#[derive(Clone, Debug)]
pub struct FunctionVector {
    pub task: String,
    /// Selected heads in descending-AIE order; length equals extraction k.
    pub heads: Vec<HeadId>,
    pub vector: Tensor,
    pub checkpoint_digest: u64,
    pub extraction: ExtractionConfig,
}

impl FunctionVector {
    pub fn d_model(&self) -> usize {
        self.vector.len()
    }

    /// Dimension compatibility against a target model.
    pub fn check_model(&self, model: &DecoderModel) -> Result<()> {
        if self.d_model() != model.config().d_model {
            return Err(FvError::shape(format!(
                "function vector d_model {} vs model {}",
                self.d_model(),
                model.config().d_model
            )));
        }
        Ok(())
    }
}
