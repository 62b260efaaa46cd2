use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{acquisition, forgetting, ProbePerformance, ProbeScore, RetentionResult};
use crate::data::{Setting, Tier};
use crate::error::{Error, Result};

/// Flat `key=value` summary of one continual-training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub entries: BTreeMap<String, f64>,
}

fn put_perf(out: &mut BTreeMap<String, f64>, tag: &str, perf: &ProbePerformance) {
    out.insert(format!("k_once_{tag}"), perf.k_once);
    out.insert(format!("k_para_{tag}"), perf.k_para);
    out.insert(format!("k_{tag}"), perf.k);
    for (tier, v) in &perf.per_tier {
        out.insert(format!("k_{tag}.{}", tier.as_str()), *v);
    }
    for ((setting, tier), v) in &perf.per_setting_tier {
        out.insert(
            format!("k_{tag}.{}.{}", setting.as_str(), tier.as_str()),
            *v,
        );
    }
}

fn nan_acquisition(pt: f64, cl: f64) -> f64 {
    acquisition(pt, cl).unwrap_or(f64::NAN)
}

impl MetricsReport {
    pub fn new(
        pt: &ProbePerformance,
        cl: &ProbePerformance,
        ret_pt: &RetentionResult,
        ret_cl: &RetentionResult,
    ) -> Result<Self> {
        let mut e = BTreeMap::new();
        put_perf(&mut e, "pt", pt);
        put_perf(&mut e, "cl", cl);
        e.insert("a".into(), acquisition(pt.k, cl.k)?);
        e.insert("a_once".into(), nan_acquisition(pt.k_once, cl.k_once));
        e.insert("a_para".into(), nan_acquisition(pt.k_para, cl.k_para));
        for tier in Tier::ALL {
            if let (Some(a), Some(b)) = (pt.per_tier.get(&tier), cl.per_tier.get(&tier)) {
                e.insert(format!("a.{}", tier.as_str()), nan_acquisition(*a, *b));
            }
            for setting in [Setting::Once, Setting::Paraphrase] {
                let key = (setting, tier);
                if let (Some(a), Some(b)) =
                    (pt.per_setting_tier.get(&key), cl.per_setting_tier.get(&key))
                {
                    e.insert(
                        format!("a.{}.{}", setting.as_str(), tier.as_str()),
                        nan_acquisition(*a, *b),
                    );
                }
            }
        }
        e.insert("p_pt".into(), ret_pt.p);
        e.insert("p_cl".into(), ret_cl.p);
        e.insert("f".into(), forgetting(ret_pt.p, ret_cl.p)?);
        for (name, acc) in &ret_pt.per_task {
            e.insert(format!("p_pt.{name}"), *acc);
        }
        for (name, acc) in &ret_cl.per_task {
            e.insert(format!("p_cl.{name}"), *acc);
        }
        e.insert("n_once".into(), pt.n_once as f64);
        e.insert("n_para".into(), pt.n_para as f64);
        Ok(Self { entries: e })
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.get(key).copied()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k}={v:e}").expect("string write");
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("line {}: expected key=value", n + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("line {}: bad number `{v}`", n + 1)))?;
            entries.insert(k.trim().to_string(), v);
        }
        Ok(Self { entries })
    }
}

/// One probe scored before and after continual training.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub item_id: u32,
    pub setting: Setting,
    pub tier: Tier,
    pub probe_idx: usize,
    pub logprob_pt: f64,
    pub logprob_cl: f64,
}

impl ProbeRow {
    pub fn split(rows: &[ProbeRow]) -> (Vec<ProbeScore>, Vec<ProbeScore>) {
        let score = |r: &ProbeRow, lp: f64| ProbeScore {
            item_id: r.item_id,
            setting: r.setting,
            tier: r.tier,
            probe_idx: r.probe_idx,
            logprob: lp,
        };
        rows.iter()
            .map(|r| (score(r, r.logprob_pt), score(r, r.logprob_cl)))
            .unzip()
    }
}

pub fn write_probe_csv(path: &Path, pt: &[ProbeScore], cl: &[ProbeScore]) -> Result<()> {
    if pt.len() != cl.len() {
        return Err(Error::Validation(format!(
            "{} pre-training scores but {} continual scores",
            pt.len(),
            cl.len()
        )));
    }
    let mut out = String::from("item_id,setting,tier,probe_idx,logprob_pt,logprob_cl\n");
    for (a, b) in pt.iter().zip(cl) {
        if (a.item_id, a.probe_idx) != (b.item_id, b.probe_idx) {
            return Err(Error::Validation(format!(
                "score lists disagree at item {} probe {}",
                a.item_id, a.probe_idx
            )));
        }
        writeln!(
            out,
            "{},{},{},{},{:e},{:e}",
            a.item_id,
            a.setting.as_str(),
            a.tier.as_str(),
            a.probe_idx,
            a.logprob,
            b.logprob
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_probe_csv(path: &Path) -> Result<Vec<ProbeRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("item_id,setting,tier,probe_idx,logprob_pt,logprob_cl") {
        return Err(Error::Validation("unexpected probe CSV header".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Validation(format!("probe CSV line {}: `{line}`", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let setting = match f[1] {
                "once" => Setting::Once,
                "paraphrase" => Setting::Paraphrase,
                _ => return Err(bad()),
            };
            let tier = Tier::ALL
                .into_iter()
                .find(|t| t.as_str() == f[2])
                .ok_or_else(bad)?;
            Ok(ProbeRow {
                item_id: f[0].parse().map_err(|_| bad())?,
                setting,
                tier,
                probe_idx: f[3].parse().map_err(|_| bad())?,
                logprob_pt: f[4].parse().map_err(|_| bad())?,
                logprob_cl: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
