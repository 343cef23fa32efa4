// SPDX-License-Identifier: MIT OR Apache-2.0

//! The extraction pipeline: mean head outputs over clean prompts, CIE of each
//! head on corrupted prompts, AIE ranking, top-k selection, vector summation.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{FvError, Result};
use crate::fv::{AieEntry, AieTable, CieRecord, ExtractionConfig, FunctionVector, MeanHeadOutputs};
use crate::math::kernels;
use crate::math::tensor::Tensor;
use crate::model::{CaptureSpec, DecoderModel, HeadId, PositionPolicy};
use crate::intervene::InterventionSpec;
use crate::tasks::prompt::PromptSet;

/// Mean residual contribution of every head over the prompt set, captured at
/// `position`. Per-prompt captures run in parallel; accumulation is f64 in
/// fixed prompt order.
pub fn mean_head_outputs(
    model: &DecoderModel,
    prompts: &PromptSet,
    position: PositionPolicy,
) -> Result<MeanHeadOutputs> {
    if prompts.is_empty() {
        return Err(FvError::invalid("empty prompt set".into()));
    }
    let captured: Vec<BTreeMap<HeadId, Tensor>> = prompts
        .prompts
        .par_iter()
        .map(|p| model.capture_head_outputs(&p.tokens, position))
        .collect::<Result<Vec<_>>>()?;

    let d = model.config().d_model;
    let mut acc: BTreeMap<HeadId, Vec<f64>> = BTreeMap::new();
    for head in model.all_heads() {
        acc.insert(head, vec![0.0f64; d]);
    }
    for per_prompt in &captured {
        for (head, vec) in per_prompt {
            let slot = acc.get_mut(head).expect("head in range");
            for (a, &v) in slot.iter_mut().zip(vec.data().iter()) {
                *a += v as f64;
            }
        }
    }
    let n = prompts.len() as f64;
    let mut means = BTreeMap::new();
    for (head, sum) in acc {
        let data: Vec<f32> = sum.iter().map(|&v| (v / n) as f32).collect();
        means.insert(head, Tensor::from_kernel(vec![d], data, "mean_head_outputs")?);
    }
    Ok(MeanHeadOutputs {
        task: prompts.task.clone(),
        means,
        n_prompts: prompts.len(),
        position,
    })
}

/// Gold-token probability at the final prompt position.
fn gold_probability(
    model: &DecoderModel,
    tokens: &[u32],
    gold: u32,
    interventions: &[InterventionSpec],
) -> Result<f64> {
    let last = tokens.len() - 1;
    let res = model.forward_rows(tokens, interventions, &CaptureSpec::none(), &[last])?;
    let row = res.logits.row(0)?;
    if gold as usize >= row.len() {
        return Err(FvError::Token(format!(
            "gold token {gold} >= vocab {}",
            row.len()
        )));
    }
    let mut probs = vec![0.0f32; row.len()];
    kernels::softmax_row(row, &mut probs);
    Ok(probs[gold as usize] as f64)
}

/// Causal indirect effect of one head on one corrupted prompt: the change in
/// gold-token probability when the head's output is patched with its
/// task-conditioned mean. Both probabilities are read at the final position
/// from the full-vocabulary softmax.
pub fn cie(
    model: &DecoderModel,
    prompt: &crate::tasks::prompt::IclPrompt,
    head: HeadId,
    means: &MeanHeadOutputs,
    prompt_index: usize,
) -> Result<CieRecord> {
    let mean = means.get(head)?;
    let p_base = gold_probability(model, &prompt.tokens, prompt.gold_token, &[])?;
    let patch = InterventionSpec::PatchHead {
        head,
        value: mean.clone(),
        position: means.position,
    };
    let p_patched = gold_probability(model, &prompt.tokens, prompt.gold_token, &[patch])?;
    Ok(CieRecord {
        head,
        prompt_index,
        p_patched,
        p_base,
        cie: p_patched - p_base,
    })
}

/// One task's contribution to an AIE computation.
pub struct AieInput<'a> {
    pub task: &'a str,
    pub corrupted: &'a PromptSet,
    pub means: &'a MeanHeadOutputs,
}

/// Compute CIE records for every (head, corrupted prompt) cell and average
/// them into an AIE table. Multi-task inputs are averaged with equal task
/// weight. Returns the table plus all records (keyed by task) for
/// persistence; record order is (task, head, prompt).
pub fn build_aie(
    model: &DecoderModel,
    inputs: &[AieInput<'_>],
) -> Result<(AieTable, Vec<(String, CieRecord)>)> {
    if inputs.is_empty() {
        return Err(FvError::invalid("build_aie with no tasks".into()));
    }
    for input in inputs {
        if input.corrupted.is_empty() {
            return Err(FvError::invalid(format!(
                "empty corrupted prompt set for task {}",
                input.task
            )));
        }
    }
    let heads = model.all_heads();
    let mut all_records: Vec<(String, CieRecord)> = Vec::new();
    let mut per_task_means: Vec<BTreeMap<HeadId, AieEntry>> = Vec::new();

    for input in inputs {
        // Base probabilities once per prompt, shared across heads.
        let bases: Vec<f64> = input
            .corrupted
            .prompts
            .par_iter()
            .map(|p| gold_probability(model, &p.tokens, p.gold_token, &[]))
            .collect::<Result<Vec<_>>>()?;

        // Patched probabilities over the (head, prompt) grid.
        let grid: Vec<(HeadId, usize)> = heads
            .iter()
            .flat_map(|&h| (0..input.corrupted.len()).map(move |i| (h, i)))
            .collect();
        let patched: Vec<f64> = grid
            .par_iter()
            .map(|&(head, i)| {
                let prompt = &input.corrupted.prompts[i];
                let patch = InterventionSpec::PatchHead {
                    head,
                    value: input.means.get(head)?.clone(),
                    position: input.means.position,
                };
                gold_probability(model, &prompt.tokens, prompt.gold_token, &[patch])
            })
            .collect::<Result<Vec<_>>>()?;

        let task_records: Vec<CieRecord> = grid
            .iter()
            .zip(patched.iter())
            .map(|(&(head, i), &p_patched)| CieRecord {
                head,
                prompt_index: i,
                p_patched,
                p_base: bases[i],
                cie: p_patched - bases[i],
            })
            .collect();

        let mut task_table: BTreeMap<HeadId, AieEntry> = BTreeMap::new();
        for &head in &heads {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for rec in task_records.iter().filter(|r| r.head == head) {
                sum += rec.cie;
                n += 1;
            }
            assert!(n > 0, "every head contributes by construction");
            task_table.insert(
                head,
                AieEntry {
                    mean: sum / n as f64,
                    n,
                },
            );
        }
        per_task_means.push(task_table);
        all_records.extend(task_records.into_iter().map(|r| (input.task.to_string(), r)));
    }

    // Equal task weighting.
    let mut entries: BTreeMap<HeadId, AieEntry> = BTreeMap::new();
    for &head in &heads {
        let mut sum = 0.0f64;
        let mut n_total = 0usize;
        for table in &per_task_means {
            let e = table[&head];
            sum += e.mean;
            n_total += e.n;
        }
        entries.insert(
            head,
            AieEntry {
                mean: sum / per_task_means.len() as f64,
                n: n_total,
            },
        );
    }
    let task = if inputs.len() == 1 {
        inputs[0].task.to_string()
    } else {
        let names: Vec<&str> = inputs.iter().map(|i| i.task).collect();
        names.join("+")
    };
    Ok((AieTable { task, entries }, all_records))
}

/// The k heads with largest AIE; ties by ascending (layer, head). Output is
/// ordered by descending AIE.
pub fn select_top_k(table: &AieTable, k: usize) -> Result<Vec<HeadId>> {
    let total = table.entries.len();
    if k == 0 || k > total {
        return Err(FvError::invalid(format!(
            "k {k} out of range [1, {total}]"
        )));
    }
    Ok(table.ranked().into_iter().take(k).map(|(h, _)| h).collect())
}

/// Sum the selected heads' mean outputs into a function vector. The sum runs
/// in f64 and is verified against a pairwise f32 re-summation.
pub fn build_fv(
    means: &MeanHeadOutputs,
    heads: &[HeadId],
    checkpoint_digest: u64,
    extraction: ExtractionConfig,
) -> Result<FunctionVector> {
    if heads.is_empty() {
        return Err(FvError::invalid("empty head set".into()));
    }
    let d = means.get(heads[0])?.len();
    let mut acc = vec![0.0f64; d];
    for &head in heads {
        let m = means.get(head)?;
        for (a, &v) in acc.iter_mut().zip(m.data().iter()) {
            *a += v as f64;
        }
    }
    let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
    let vector = Tensor::from_kernel(vec![d], data, "build_fv")?;

    // Construction check: the vector must equal the head-wise sum within 1e-6.
    let mut check = vec![0.0f32; d];
    for &head in heads {
        let m = means.get(head)?;
        for (c, &v) in check.iter_mut().zip(m.data().iter()) {
            *c += v;
        }
    }
    let worst = vector
        .data()
        .iter()
        .zip(check.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max);
    if worst > 1e-6 {
        return Err(FvError::invalid(format!(
            "function vector deviates from head sum by {worst}"
        )));
    }

    Ok(FunctionVector {
        task: means.task.clone(),
        heads: heads.to_vec(),
        vector,
        checkpoint_digest,
        extraction,
    })
}
