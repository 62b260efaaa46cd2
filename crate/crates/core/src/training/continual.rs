use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::trainer::{batch_indices, train_step, StepLog, TrainConfig};
use super::OptimizerState;
use crate::data::{Packed, ProbeCorpus, Setting, Vocab, BOS};
use crate::error::{Error, Result};
use crate::model::Checkpoint;

/// Which texts enter the training batch at each of `rounds` evenly spaced boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionPlan {
    pub rounds: usize,
    /// `(item_id, paraphrases)`; round `r` injects paraphrase `r`.
    pub paraphrase: Vec<(u32, Vec<String>)>,
    /// Round `r` injects every `(item_id, paragraph)` of group `r`, once.
    pub once_groups: Vec<Vec<(u32, String)>>,
}

impl InjectionPlan {
    pub fn none() -> Self {
        Self {
            rounds: 0,
            paraphrase: Vec::new(),
            once_groups: Vec::new(),
        }
    }

    /// Paraphrase items contribute one paraphrase per round; once items are
    /// split in id order into `rounds` contiguous groups of near-equal size.
    pub fn from_corpus(corpus: &ProbeCorpus, rounds: usize) -> Result<Self> {
        let mut para: Vec<(u32, Vec<String>)> = corpus
            .setting(Setting::Paraphrase)
            .map(|i| (i.id, i.paraphrases.clone()))
            .collect();
        para.sort_by_key(|p| p.0);
        let mut once: Vec<(u32, String)> = corpus
            .setting(Setting::Once)
            .map(|i| (i.id, i.paragraph.clone()))
            .collect();
        once.sort_by_key(|o| o.0);
        if rounds == 0 {
            return if para.is_empty() && once.is_empty() {
                Ok(Self::none())
            } else {
                Err(Error::Config(
                    "injection plan with items needs at least one round".into(),
                ))
            };
        }
        let n = once.len();
        let once_groups = (0..rounds)
            .map(|g| once[g * n / rounds..(g + 1) * n / rounds].to_vec())
            .collect();
        let plan = Self {
            rounds,
            paraphrase: para,
            once_groups,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((id, p)) = self.paraphrase.iter().find(|(_, p)| p.len() != self.rounds) {
            return Err(Error::Validation(format!(
                "paraphrase item {id} has {} paraphrases for {} rounds",
                p.len(),
                self.rounds
            )));
        }
        if self.rounds > 0 && self.once_groups.len() != self.rounds {
            return Err(Error::Validation(format!(
                "{} once groups for {} rounds",
                self.once_groups.len(),
                self.rounds
            )));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.paraphrase.is_empty() && self.once_groups.iter().all(Vec::is_empty)
    }

    /// Items injected at round `r`, paraphrase items first, each kind in id order.
    fn round_items(&self, r: usize) -> Vec<(u32, Setting, &str)> {
        let mut items: Vec<(u32, Setting, &str)> = self
            .paraphrase
            .iter()
            .map(|(id, p)| (*id, Setting::Paraphrase, p[r].as_str()))
            .collect();
        items.extend(
            self.once_groups[r]
                .iter()
                .map(|(id, t)| (*id, Setting::Once, t.as_str())),
        );
        items
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub step: u64,
    pub item_id: u32,
    pub kind: Setting,
    pub round: usize,
}

pub fn write_audit(path: &Path, rows: &[AuditRow]) -> Result<()> {
    let mut out = String::from("step,item_id,kind,round\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step,
            r.item_id,
            r.kind.as_str(),
            r.round
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Validation(format!("audit line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(AuditRow {
                step: f[0].parse().map_err(|_| bad())?,
                item_id: f[1].parse().map_err(|_| bad())?,
                kind: match f[2] {
                    "paraphrase" => Setting::Paraphrase,
                    "once" => Setting::Once,
                    _ => return Err(bad()),
                },
                round: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ContinualOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub audit: Vec<AuditRow>,
    pub total_steps: u64,
    pub interval: u64,
}

/// Steps between injection boundaries, or an error when `rounds` boundaries do not fit.
pub fn injection_interval(total_steps: u64, plan: &InjectionPlan) -> Result<u64> {
    if plan.rounds == 0 {
        return Ok(0);
    }
    if total_steps < plan.rounds as u64 {
        return Err(Error::Validation(format!(
            "{} injection rounds do not fit in {total_steps} steps",
            plan.rounds
        )));
    }
    Ok(total_steps / plan.rounds as u64)
}

/// Further next-token training of `pt` on `data` with knowledge injection.
///
/// Optimizer state starts fresh. At step `r * interval` for round `r`, the
/// round's items are tokenized as `BOS text` and placed ahead of that step's
/// corpus rows, so every corpus row is still seen once per epoch.
pub fn continual_train(
    pt: &Checkpoint,
    data: &Packed,
    plan: &InjectionPlan,
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<ContinualOutcome> {
    plan.validate()?;
    if vocab.len() > pt.config.vocab_size {
        return Err(Error::Validation(format!(
            "vocab of {} exceeds the model's {}",
            vocab.len(),
            pt.config.vocab_size
        )));
    }
    let schedule = cfg.schedule(data.rows.len())?;
    let total = schedule.total_steps;
    let interval = injection_interval(total, plan)?;
    let mut injected: Vec<Vec<(u32, Setting, Vec<u32>)>> = Vec::with_capacity(plan.rounds);
    for r in 0..plan.rounds {
        let mut round = Vec::new();
        for (id, kind, text) in plan.round_items(r) {
            let mut row = vec![BOS];
            row.extend(vocab.encode(text));
            if row.len() > pt.config.max_seq_len {
                return Err(Error::Validation(format!(
                    "injected item {id} has {} tokens, more than max_seq_len {}",
                    row.len(),
                    pt.config.max_seq_len
                )));
            }
            round.push((id, kind, row));
        }
        injected.push(round);
    }

    let mut ckpt = pt.clone();
    ckpt.step = 0;
    ckpt.optimizer = None;
    let mut opt = OptimizerState::for_params(&ckpt.params, cfg.adamw);
    let mut log = Vec::with_capacity(total as usize);
    let mut audit = Vec::new();
    for step in 0..total {
        let mut rows: Vec<&[u32]> = Vec::new();
        if interval > 0 && step % interval == 0 && ((step / interval) as usize) < plan.rounds {
            let r = (step / interval) as usize;
            for (id, kind, row) in &injected[r] {
                rows.push(row);
                audit.push(AuditRow {
                    step,
                    item_id: *id,
                    kind: *kind,
                    round: r,
                });
            }
        }
        let idx = batch_indices(data.rows.len(), cfg.batch_size, cfg.seed, step);
        rows.extend(idx.iter().map(|&i| data.rows[i].as_slice()));
        let lr = schedule.lr_at(step)?;
        let loss = train_step(&mut ckpt, &mut opt, &rows, lr, cfg.grad_clip)?;
        log.push(StepLog { step, lr, loss });
    }
    ckpt.optimizer = Some(opt);
    Ok(ContinualOutcome {
        checkpoint: ckpt,
        log,
        audit,
        total_steps: total,
        interval,
    })
}
