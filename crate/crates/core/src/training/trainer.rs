use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AdamWConfig, OptimizerState, Schedule};
use crate::data::{rng_for, strip_padding, targets_for, Packed};
use crate::error::{Error, Result};
use crate::model::{build_graph, param_layout, Checkpoint, ModelConfig, ParamVars, Params};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    #[serde(default)]
    pub floor_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Global gradient-norm clip; off when `None`.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Seeds the per-epoch row order.
    pub seed: u64,
}

fn default_warmup() -> f64 {
    0.05
}

fn default_epochs() -> usize {
    1
}

impl TrainConfig {
    pub fn new(batch_size: usize, peak_lr: f64, seed: u64) -> Self {
        Self {
            batch_size,
            peak_lr,
            floor_lr: 0.0,
            warmup_fraction: default_warmup(),
            epochs: default_epochs(),
            grad_clip: None,
            adamw: AdamWConfig::default(),
            seed,
        }
    }

    pub fn steps_per_epoch(&self, n_rows: usize) -> Result<u64> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if n_rows < self.batch_size {
            return Err(Error::Validation(format!(
                "corpus has {n_rows} rows, shorter than one batch of {}",
                self.batch_size
            )));
        }
        Ok((n_rows / self.batch_size) as u64)
    }

    pub fn schedule(&self, n_rows: usize) -> Result<Schedule> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        let s = Schedule {
            total_steps: self.steps_per_epoch(n_rows)? * self.epochs as u64,
            warmup_fraction: self.warmup_fraction,
            peak_lr: self.peak_lr,
            floor_lr: self.floor_lr,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_train_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for r in log {
        let _ = writeln!(out, "{},{:e},{:e}", r.step, r.lr, r.loss);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Row indices of the batch used at `step`. Each epoch draws a fresh seeded
/// permutation; rows past the last full batch are skipped for that epoch.
pub fn batch_indices(n_rows: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = (n_rows / batch_size) as u64;
    let epoch = step / per_epoch;
    let within = (step % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(&mut rng_for(seed, 1000 + epoch));
    perm[within * batch_size..(within + 1) * batch_size].to_vec()
}

fn example_gradient(
    params: &Params,
    cfg: &ModelConfig,
    temperature: f64,
    tokens: &[u32],
    normalizer: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let targets: Vec<Option<usize>> = targets_for(tokens)
        .into_iter()
        .map(|t| t.map(|x| x as usize))
        .collect();
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, params, true);
    let graph = build_graph(&mut tape, &vars, cfg, tokens, temperature)?;
    let loss = tape.cross_entropy(graph.logits, &targets, normalizer)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = vars
        .all()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, grads))
}

/// Mean next-token loss over every target in `rows` and its gradient.
///
/// Examples run in parallel on independent tapes; their gradients are summed
/// in row order so the result does not depend on scheduling.
pub fn batch_gradient(ckpt: &Checkpoint, rows: &[&[u32]]) -> Result<(f64, Vec<Vec<f64>>)> {
    let rows: Vec<&[u32]> = rows.iter().map(|r| strip_padding(r)).collect();
    let count: usize = rows
        .iter()
        .map(|r| targets_for(r).iter().filter(|t| t.is_some()).count())
        .sum();
    if count == 0 {
        return Err(Error::Contract(
            "batch without a single target token".into(),
        ));
    }
    let normalizer = count as f64;
    let parts: Vec<(f64, Vec<Vec<f64>>)> = rows
        .par_iter()
        .filter(|r| targets_for(r).iter().any(Option::is_some))
        .map(|r| {
            example_gradient(
                &ckpt.params,
                &ckpt.config,
                ckpt.attn_temperature,
                r,
                normalizer,
            )
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one example with targets");
    for (l, g) in iter {
        loss += l;
        for (acc, x) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grads))
}

pub(crate) fn apply_update(
    ckpt: &mut Checkpoint,
    opt: &mut OptimizerState,
    mut grads: Vec<Vec<f64>>,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    if let Some(max_norm) = clip {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    let names: Vec<String> = param_layout(&ckpt.config)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut params = ckpt.params.tensors_mut();
    opt.step(&mut params, &grad_refs, &names, lr)
}

/// One optimizer step on `rows`; returns the pre-update loss.
pub(crate) fn train_step(
    ckpt: &mut Checkpoint,
    opt: &mut OptimizerState,
    rows: &[&[u32]],
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let (loss, grads) = batch_gradient(ckpt, rows)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss at step {}",
            ckpt.step
        )));
    }
    apply_update(ckpt, opt, grads, lr, clip)?;
    ckpt.step += 1;
    Ok(loss)
}

/// Update counts at which each fraction of `total` steps is reached.
pub fn checkpoint_steps(total: u64, fractions: &[f64]) -> Result<Vec<u64>> {
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "checkpoint fraction {f} outside (0, 1]"
                )));
            }
            Ok(((f * total as f64).round() as u64).max(1))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub saved_steps: Vec<u64>,
}

/// Trains `start` over `data` until the schedule ends.
///
/// A checkpoint with `step > 0` and optimizer state resumes where it left off.
/// At every requested fraction the live parameters and moments are rounded to
/// storage precision before `on_checkpoint` sees them, so a run resumed from a
/// saved file continues exactly as the uninterrupted run does.
pub fn pretrain<F>(
    start: Checkpoint,
    data: &Packed,
    cfg: &TrainConfig,
    fractions: &[f64],
    mut on_checkpoint: F,
) -> Result<PretrainOutcome>
where
    F: FnMut(&Checkpoint, f64) -> Result<()>,
{
    let schedule = cfg.schedule(data.rows.len())?;
    let total = schedule.total_steps;
    let saves = checkpoint_steps(total, fractions)?;
    let mut ckpt = start;
    if ckpt.step > total {
        return Err(Error::Validation(format!(
            "checkpoint step {} beyond schedule end {total}",
            ckpt.step
        )));
    }
    let mut opt = match ckpt.optimizer.take() {
        Some(o) if ckpt.step > 0 => o,
        None if ckpt.step == 0 => OptimizerState::for_params(&ckpt.params, cfg.adamw),
        Some(_) => OptimizerState::for_params(&ckpt.params, cfg.adamw),
        None => {
            return Err(Error::Validation(format!(
                "cannot resume from step {} without optimizer state",
                ckpt.step
            )))
        }
    };
    let mut log = Vec::new();
    let mut saved_steps = Vec::new();
    while ckpt.step < total {
        let step = ckpt.step;
        let idx = batch_indices(data.rows.len(), cfg.batch_size, cfg.seed, step);
        let rows: Vec<&[u32]> = idx.iter().map(|&i| data.rows[i].as_slice()).collect();
        let lr = schedule.lr_at(step)?;
        let loss = train_step(&mut ckpt, &mut opt, &rows, lr, cfg.grad_clip)?;
        log.push(StepLog { step, lr, loss });
        for (&s, &f) in saves.iter().zip(fractions) {
            if s == ckpt.step {
                ckpt.optimizer = Some(opt);
                ckpt.round_to_storage();
                on_checkpoint(&ckpt, f)?;
                opt = ckpt.optimizer.take().expect("just stored");
                if !saved_steps.contains(&s) {
                    saved_steps.push(s);
                }
            }
        }
    }
    ckpt.optimizer = Some(opt);
    Ok(PretrainOutcome {
        checkpoint: ckpt,
        log,
        saved_steps,
    })
}
