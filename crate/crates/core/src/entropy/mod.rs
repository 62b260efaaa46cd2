//! Knowledge, attention and next-token entropy.

mod report;
mod stats;

use rayon::prelude::*;

pub use report::{read_reports, write_reports, EntropyReport};
pub use stats::{
    layer_coefficients, relu_gate_coefficients, CoefficientMode, CoefficientStats, STATS_KIND,
};

use crate::data::strip_padding;
use crate::error::{Error, Result};
use crate::model::{forward, Checkpoint, InstrumentationTrace};
use crate::tensor::Tensor;

/// Shannon entropy (nats) of `weights / sum(weights)`, with `0 ln 0 = 0`.
///
/// `None` when the weights do not sum to a positive finite number.
pub fn normalized_entropy(weights: &[f64]) -> Option<f64> {
    let z: f64 = weights.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return None;
    }
    Some(
        -weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| {
                let p = w / z;
                p * p.ln()
            })
            .sum::<f64>(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeEntropy {
    pub per_layer: Vec<f64>,
    pub total: f64,
}

pub fn knowledge_entropy(stats: &CoefficientStats) -> Result<KnowledgeEntropy> {
    if stats.n_instances == 0 {
        return Err(Error::Contract(
            "knowledge entropy of empty statistics".into(),
        ));
    }
    let per_layer = stats
        .means
        .iter()
        .enumerate()
        .map(|(l, c)| normalized_entropy(c).ok_or(Error::DegenerateLayer { layer: l }))
        .collect::<Result<Vec<_>>>()?;
    let total = per_layer.iter().sum();
    Ok(KnowledgeEntropy { per_layer, total })
}

/// Mean over positions of the entropy of each causal attention row, per head.
fn head_entropies(trace: &InstrumentationTrace, layer: usize) -> Vec<f64> {
    let t = trace.seq_len();
    let a = &trace.attention[layer];
    (0..trace.n_heads())
        .map(|h| {
            let block = &a.data()[h * t * t..(h + 1) * t * t];
            (0..t)
                .map(|j| normalized_entropy(&block[j * t..j * t + j + 1]).unwrap_or(0.0))
                .sum::<f64>()
                / t as f64
        })
        .collect()
}

/// Per-layer attention entropy of one instance, averaged over heads.
pub fn instance_attention_entropy(trace: &InstrumentationTrace) -> Vec<f64> {
    (0..trace.n_layers())
        .map(|l| {
            let hs = head_entropies(trace, l);
            hs.iter().sum::<f64>() / hs.len() as f64
        })
        .collect()
}

/// Mean over positions of the entropy of the predicted next-token distribution.
pub fn instance_next_token_entropy(logits: &Tensor) -> f64 {
    let probs = logits.softmax_rows(1.0).expect("unit temperature");
    let t = probs.shape()[0];
    (0..t)
        .map(|i| normalized_entropy(probs.row(i)).unwrap_or(0.0))
        .sum::<f64>()
        / t as f64
}

/// Everything one instance contributes to the dataset averages.
struct InstanceSummary {
    coeff_means: Vec<Vec<f64>>,
    attention: Vec<f64>,
    next_token: f64,
}

fn summarize(ckpt: &Checkpoint, tokens: &[u32], mode: CoefficientMode) -> Result<InstanceSummary> {
    let trace = forward(ckpt, strip_padding(tokens))?;
    let coeff_means = (0..trace.n_layers())
        .map(|l| layer_coefficients(&trace, l, mode).map(|c| stats::token_mean(&c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(InstanceSummary {
        coeff_means,
        attention: instance_attention_entropy(&trace),
        next_token: instance_next_token_entropy(&trace.logits),
    })
}

fn summaries(
    ckpt: &Checkpoint,
    set: &[Vec<u32>],
    mode: CoefficientMode,
) -> Result<Vec<InstanceSummary>> {
    if set.iter().all(|s| strip_padding(s).is_empty()) {
        return Err(Error::Param("empty measurement set".into()));
    }
    set.par_iter()
        .filter(|s| !strip_padding(s).is_empty())
        .map(|s| summarize(ckpt, s, mode))
        .collect()
}

/// Per-layer and total attention entropy: positions, then instances, then heads,
/// summed over layers.
pub fn attention_entropy(ckpt: &Checkpoint, set: &[Vec<u32>]) -> Result<(Vec<f64>, f64)> {
    let sums = summaries(ckpt, set, CoefficientMode::AbsSwiglu)?;
    let per_layer = mean_over_instances(
        sums.iter().map(|s| s.attention.as_slice()),
        ckpt.config.n_layers,
    );
    let total = per_layer.iter().sum();
    Ok((per_layer, total))
}

pub fn next_token_entropy(ckpt: &Checkpoint, set: &[Vec<u32>]) -> Result<f64> {
    let sums = summaries(ckpt, set, CoefficientMode::AbsSwiglu)?;
    Ok(sums.iter().map(|s| s.next_token).sum::<f64>() / sums.len() as f64)
}

fn mean_over_instances<'a, I: Iterator<Item = &'a [f64]>>(rows: I, width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    let mut n = 0usize;
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// One forward pass per instance yielding coefficient statistics and the full report.
pub fn measure(
    ckpt: &Checkpoint,
    set: &[Vec<u32>],
    mode: CoefficientMode,
    set_id: &str,
) -> Result<(CoefficientStats, EntropyReport)> {
    let sums = summaries(ckpt, set, mode)?;
    let cfg = &ckpt.config;
    let mut stats = CoefficientStats::new(cfg.n_layers, cfg.ffn_inner, mode);
    for s in &sums {
        stats.push_instance(&s.coeff_means)?;
    }
    let knowledge = knowledge_entropy(&stats)?;
    let attention = mean_over_instances(sums.iter().map(|s| s.attention.as_slice()), cfg.n_layers);
    let next_token = sums.iter().map(|s| s.next_token).sum::<f64>() / sums.len() as f64;
    let report = EntropyReport {
        step: ckpt.step,
        measurement_set: set_id.to_string(),
        mode,
        attention_total: attention.iter().sum(),
        knowledge: knowledge.per_layer,
        knowledge_total: knowledge.total,
        attention,
        next_token: Some(next_token),
    };
    Ok((stats, report))
}

#[cfg(test)]
mod tests;
