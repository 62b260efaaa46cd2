//! Probe scoring and the acquisition / forgetting metrics.

mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use report::{read_probe_csv, write_probe_csv, MetricsReport, ProbeRow};

use crate::data::{ProbeCorpus, RetentionSuite, Setting, Tier, Vocab, BOS, PROBES_PER_ITEM};
use crate::error::{Error, Result};
use crate::model::{forward_logits, log_prob, target_span_logprob, Checkpoint};

/// Teacher-forced log-probability of one probe's target span.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeScore {
    pub item_id: u32,
    pub setting: Setting,
    pub tier: Tier,
    pub probe_idx: usize,
    pub logprob: f64,
}

fn encode_context(vocab: &Vocab, text: &str) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text));
    ids
}

/// Mean log-probability of each span after `context`. Single-token spans share
/// one forward pass over the context.
pub fn span_logprobs(ckpt: &Checkpoint, context: &[u32], spans: &[Vec<u32>]) -> Result<Vec<f64>> {
    let shared = if spans.iter().any(|s| s.len() == 1) {
        let logits = forward_logits(ckpt, context)?;
        Some(logits.row(context.len() - 1).to_vec())
    } else {
        None
    };
    spans
        .iter()
        .map(|s| match (&shared, s.len()) {
            (Some(row), 1) => {
                if s[0] as usize >= row.len() {
                    return Err(Error::Param(format!("token id {} out of range", s[0])));
                }
                Ok(log_prob(row, s[0] as usize))
            }
            _ => target_span_logprob(ckpt, context, s),
        })
        .collect()
}

/// Scores every probe of every item. Probes condition on `BOS` plus their own context.
pub fn score_probes(
    ckpt: &Checkpoint,
    corpus: &ProbeCorpus,
    vocab: &Vocab,
) -> Result<Vec<ProbeScore>> {
    let jobs: Vec<(u32, Setting, usize, &crate::data::Probe)> = corpus
        .items
        .iter()
        .flat_map(|item| {
            item.probes
                .iter()
                .enumerate()
                .map(move |(k, p)| (item.id, item.setting, k, p))
        })
        .collect();
    jobs.par_iter()
        .map(|&(item_id, setting, probe_idx, p)| {
            let ctx = encode_context(vocab, &p.context);
            let span = vocab.encode(&p.target);
            let lp = span_logprobs(ckpt, &ctx, &[span])?[0];
            Ok(ProbeScore {
                item_id,
                setting,
                tier: p.tier,
                probe_idx,
                logprob: lp,
            })
        })
        .collect()
}

/// Three-level aggregate of probe log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePerformance {
    pub k_once: f64,
    pub k_para: f64,
    pub k: f64,
    pub n_once: usize,
    pub n_para: usize,
    /// Mean over items of the item's mean over probes of one tier.
    pub per_tier: BTreeMap<Tier, f64>,
    pub per_setting_tier: BTreeMap<(Setting, Tier), f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Probe mean per item, item mean per setting, then the `|W|`-weighted combine.
/// A setting without items reports NaN and carries zero weight.
pub fn aggregate(scores: &[ProbeScore]) -> Result<ProbePerformance> {
    let mut items: BTreeMap<u32, (Setting, Vec<&ProbeScore>)> = BTreeMap::new();
    for s in scores {
        let e = items.entry(s.item_id).or_insert((s.setting, Vec::new()));
        if e.0 != s.setting {
            return Err(Error::Validation(format!(
                "item {} listed under two settings",
                s.item_id
            )));
        }
        e.1.push(s);
    }
    if items.is_empty() {
        return Err(Error::Validation("no probe scores to aggregate".into()));
    }
    let mut by_setting: BTreeMap<Setting, Vec<f64>> = BTreeMap::new();
    let mut tier_items: BTreeMap<(Setting, Tier), Vec<f64>> = BTreeMap::new();
    for (id, (setting, probes)) in &items {
        if probes.len() != PROBES_PER_ITEM {
            return Err(Error::Validation(format!(
                "item {id} has {} probes, expected {PROBES_PER_ITEM}",
                probes.len()
            )));
        }
        let lps: Vec<f64> = probes.iter().map(|p| p.logprob).collect();
        by_setting.entry(*setting).or_default().push(mean(&lps));
        for tier in Tier::ALL {
            let t: Vec<f64> = probes
                .iter()
                .filter(|p| p.tier == tier)
                .map(|p| p.logprob)
                .collect();
            if !t.is_empty() {
                tier_items
                    .entry((*setting, tier))
                    .or_default()
                    .push(mean(&t));
            }
        }
    }
    let setting_mean = |s: Setting| by_setting.get(&s).map_or(f64::NAN, |v| mean(v));
    let n_once = by_setting.get(&Setting::Once).map_or(0, Vec::len);
    let n_para = by_setting.get(&Setting::Paraphrase).map_or(0, Vec::len);
    let (k_once, k_para) = (
        setting_mean(Setting::Once),
        setting_mean(Setting::Paraphrase),
    );
    let weighted = |once: f64, para: f64, no: usize, np: usize| {
        let mut acc = 0.0;
        if no > 0 {
            acc += no as f64 * once;
        }
        if np > 0 {
            acc += np as f64 * para;
        }
        acc / (no + np) as f64
    };
    let k = weighted(k_once, k_para, n_once, n_para);
    let per_setting_tier: BTreeMap<(Setting, Tier), f64> =
        tier_items.iter().map(|(key, v)| (*key, mean(v))).collect();
    let mut per_tier = BTreeMap::new();
    for tier in Tier::ALL {
        let o = tier_items.get(&(Setting::Once, tier));
        let p = tier_items.get(&(Setting::Paraphrase, tier));
        let no = o.map_or(0, Vec::len);
        let np = p.map_or(0, Vec::len);
        if no + np > 0 {
            let mo = o.map_or(f64::NAN, |v| mean(v));
            let mp = p.map_or(f64::NAN, |v| mean(v));
            per_tier.insert(tier, weighted(mo, mp, no, np));
        }
    }
    Ok(ProbePerformance {
        k_once,
        k_para,
        k,
        n_once,
        n_para,
        per_tier,
        per_setting_tier,
    })
}

pub fn probe_performance(
    ckpt: &Checkpoint,
    corpus: &ProbeCorpus,
    vocab: &Vocab,
) -> Result<(ProbePerformance, Vec<ProbeScore>)> {
    if corpus.items.is_empty() {
        return Err(Error::Validation("empty probe corpus".into()));
    }
    if let Some(item) = corpus
        .items
        .iter()
        .find(|i| i.probes.len() != PROBES_PER_ITEM)
    {
        return Err(Error::Validation(format!(
            "item {} has {} probes, expected {PROBES_PER_ITEM}",
            item.id,
            item.probes.len()
        )));
    }
    let scores = score_probes(ckpt, corpus, vocab)?;
    Ok((aggregate(&scores)?, scores))
}

/// Improvement rate `(K_CL - K_PT) / |K_PT|`; positive when probe log-probabilities rise.
pub fn acquisition(k_pt: f64, k_cl: f64) -> Result<f64> {
    if k_pt == 0.0 || !k_pt.is_finite() {
        return Err(Error::Param(format!(
            "acquisition needs a nonzero finite K_PT, got {k_pt}"
        )));
    }
    Ok((k_cl - k_pt) / k_pt.abs())
}

/// Relative drop `-(P_CL - P_PT) / P_PT`; positive when accuracy fell.
pub fn forgetting(p_pt: f64, p_cl: f64) -> Result<f64> {
    if !(p_pt > 0.0) {
        return Err(Error::Param(format!(
            "forgetting needs P_PT > 0, got {p_pt}"
        )));
    }
    Ok(-(p_cl - p_pt) / p_pt)
}

/// Index of the highest score; the first one wins ties.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionResult {
    pub p: f64,
    pub per_task: Vec<(String, f64)>,
}

/// Accuracy per task from candidate scores (`scores[task][item][candidate]`), and their mean.
pub fn retention_from_scores(
    suite: &RetentionSuite,
    scores: &[Vec<Vec<f64>>],
) -> Result<RetentionResult> {
    if suite.tasks.is_empty() || scores.len() != suite.tasks.len() {
        return Err(Error::Validation(
            "retention scores do not match the suite".into(),
        ));
    }
    let mut per_task = Vec::with_capacity(suite.tasks.len());
    for (task, ts) in suite.tasks.iter().zip(scores) {
        if task.items.is_empty() || ts.len() != task.items.len() {
            return Err(Error::Validation(format!(
                "task {} has no scored items",
                task.name
            )));
        }
        let correct = task
            .items
            .iter()
            .zip(ts)
            .filter(|(item, s)| predict(s) == item.answer)
            .count();
        per_task.push((task.name.clone(), correct as f64 / task.items.len() as f64));
    }
    let p = per_task.iter().map(|(_, a)| a).sum::<f64>() / per_task.len() as f64;
    Ok(RetentionResult { p, per_task })
}

pub fn retention_performance(
    ckpt: &Checkpoint,
    suite: &RetentionSuite,
    vocab: &Vocab,
) -> Result<RetentionResult> {
    for task in &suite.tasks {
        if let Some(item) = task.items.iter().find(|i| i.candidates.len() < 2) {
            return Err(Error::Validation(format!(
                "retention item `{}` in task {} has fewer than 2 candidates",
                item.context, task.name
            )));
        }
    }
    let scores = suite
        .tasks
        .iter()
        .map(|task| {
            task.items
                .par_iter()
                .map(|item| {
                    let ctx = encode_context(vocab, &item.context);
                    let spans: Vec<Vec<u32>> =
                        item.candidates.iter().map(|c| vocab.encode(c)).collect();
                    span_logprobs(ckpt, &ctx, &spans)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    retention_from_scores(suite, &scores)
}

#[cfg(test)]
mod tests;
