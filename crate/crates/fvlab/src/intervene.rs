// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream interventions: additive steering, directional ablation,
//! head patching, cross-checkpoint application, and steered generation.
//!
//! Additions and ablations edit the residual stream immediately after the
//! chosen layer's block output, uniformly, so layer indices are comparable
//! across intervention kinds. Ablation projects every position onto the
//! orthogonal complement of the unit direction.

use std::collections::BTreeSet;

use crate::error::{FvError, Result};
use crate::fv::FunctionVector;
use crate::math::tensor::Tensor;
use crate::model::{CaptureSpec, DecoderModel, HeadId, PositionPolicy};

/// Positions an additive edit touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    LastToken,
    AllPositions,
}

/// One declarative residual-stream edit.
#[derive(Clone, Debug)]
pub enum InterventionSpec {
    /// `h <- h + scale * vector` at the selected positions, after `layer`.
    Add {
        vector: Tensor,
        layer: usize,
        scale: f32,
        positions: Positions,
    },
    /// `h <- h - <h,u>u` with `u = direction/|direction|`, at every position,
    /// after each listed layer.
    Ablate {
        direction: Tensor,
        layers: BTreeSet<usize>,
    },
    /// Replace one head's residual contribution at one position.
    PatchHead {
        head: HeadId,
        value: Tensor,
        position: PositionPolicy,
    },
}

impl InterventionSpec {
    /// Additive edit carrying a function vector.
    pub fn add_fv(fv: &FunctionVector, layer: usize, scale: f32, positions: Positions) -> Self {
        InterventionSpec::Add {
            vector: fv.vector.clone(),
            layer,
            scale,
            positions,
        }
    }

    /// Ablation of a function vector's direction at one layer.
    pub fn ablate_fv(fv: &FunctionVector, layer: usize) -> Self {
        InterventionSpec::Ablate {
            direction: fv.vector.clone(),
            layers: BTreeSet::from([layer]),
        }
    }
}

/// A unit-normalized direction plus the norm it was derived from.
#[derive(Clone, Debug)]
pub struct UnitDirection {
    unit: Tensor,
    source_norm: f64,
}

impl UnitDirection {
    pub fn new(v: &Tensor) -> Result<Self> {
        let source_norm = v.norm();
        let unit = crate::model::unit_of(v)?;
        Ok(UnitDirection { unit, source_norm })
    }

    pub fn unit(&self) -> &Tensor {
        &self.unit
    }

    pub fn source_norm(&self) -> f64 {
        self.source_norm
    }
}

/// Add `scale * fv` to the residual stream after `layer`; returns logits.
pub fn add_fv(
    model: &DecoderModel,
    tokens: &[u32],
    fv: &FunctionVector,
    layer: usize,
    scale: f32,
    positions: Positions,
) -> Result<Tensor> {
    fv.check_model(model)?;
    let spec = InterventionSpec::add_fv(fv, layer, scale, positions);
    Ok(model.forward(tokens, &[spec], &CaptureSpec::none())?.logits)
}

/// Remove the component of the residual stream aligned with `direction` at
/// each listed layer (all positions); returns logits.
pub fn ablate_direction(
    model: &DecoderModel,
    tokens: &[u32],
    direction: &Tensor,
    layers: &BTreeSet<usize>,
) -> Result<Tensor> {
    let spec = InterventionSpec::Ablate {
        direction: direction.clone(),
        layers: layers.clone(),
    };
    Ok(model.forward(tokens, &[spec], &CaptureSpec::none())?.logits)
}

/// Apply a function vector extracted on one checkpoint to another model.
/// Digest mismatch is the intended use and only warns; dimension mismatch is
/// an error.
pub fn cross_model_apply(
    model: &DecoderModel,
    model_digest: u64,
    tokens: &[u32],
    fv: &FunctionVector,
    layer: usize,
    scale: f32,
    positions: Positions,
) -> Result<Tensor> {
    if fv.d_model() != model.config().d_model {
        return Err(FvError::shape(format!(
            "function vector d_model {} vs model {}",
            fv.d_model(),
            model.config().d_model
        )));
    }
    if fv.checkpoint_digest != model_digest {
        log::warn!(
            "applying function vector from checkpoint {:016x} to model {:016x}",
            fv.checkpoint_digest,
            model_digest
        );
    }
    let spec = InterventionSpec::add_fv(fv, layer, scale, positions);
    Ok(model.forward(tokens, &[spec], &CaptureSpec::none())?.logits)
}

/// Greedy generation with the function vector added at all positions of every
/// pass. Under cached decoding this schedule is: all input positions on the
/// first pass, then only the newly generated position at each step.
pub fn steered_generate(
    model: &DecoderModel,
    prompt: &[u32],
    fv: &FunctionVector,
    layer: usize,
    scale: f32,
    max_new: usize,
) -> Result<Vec<u32>> {
    fv.check_model(model)?;
    let spec = InterventionSpec::add_fv(fv, layer, scale, Positions::AllPositions);
    model.generate(prompt, max_new, &[spec])
}
