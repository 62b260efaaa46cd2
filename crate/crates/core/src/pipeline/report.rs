use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::RunRecord;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// One point of a plot series in the merged long-format CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesRow {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub run_id: String,
}

fn bad(path: &Path, what: &str) -> Error {
    Error::Validation(format!("{}: {what}", path.display()))
}

fn entropy_rows(path: &Path, run_id: &str) -> Result<Vec<SeriesRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("fraction,step,h_knowledge,h_attention,h_next_token") {
        return Err(bad(path, "unexpected header"));
    }
    let mut out = Vec::new();
    for line in lines {
        let f: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| bad(path, line)))
            .collect::<Result<_>>()?;
        if f.len() != 5 {
            return Err(bad(path, line));
        }
        for (name, y) in [
            ("h_knowledge", f[2]),
            ("h_attention", f[3]),
            ("h_next_token", f[4]),
        ] {
            out.push(SeriesRow {
                series: name.into(),
                x: f[0],
                y,
                run_id: run_id.into(),
            });
        }
    }
    Ok(out)
}

fn metric_rows(dir: &Path, run_id: &str) -> Result<Vec<SeriesRow>> {
    let report = MetricsReport::read(&dir.join("metrics.txt"))?;
    let record = RunRecord::read(dir)?;
    let get = |k: &str| {
        report
            .get(k)
            .ok_or_else(|| bad(&dir.join("metrics.txt"), &format!("no `{k}` entry")))
    };
    let (a, f) = (get("a")?, get("f")?);
    let suffix = if record.settings.get("inject").map(String::as_str) == Some("false") {
        ":no-inject"
    } else {
        ""
    };
    let num = |v: Option<&String>| v.and_then(|s| s.parse::<f64>().ok());
    let mut out = Vec::new();
    let mut push = |series: String, x: f64| {
        for (name, y) in [("acquisition", a), ("forgetting", f)] {
            out.push(SeriesRow {
                series: format!("{name}{series}{suffix}"),
                x,
                y,
                run_id: run_id.into(),
            });
        }
    };
    match (
        num(record.settings.get("resusc_p")),
        num(record.settings.get("resusc_q")),
    ) {
        (Some(p), Some(q)) => {
            push(format!("_vs_q@p={p}"), q);
            push(format!("_vs_p@q={q}"), p);
        }
        _ => {
            let frac = num(record.source_meta.get("fraction"))
                .ok_or_else(|| bad(dir, "source checkpoint records no pretraining fraction"))?;
            push("_vs_fraction".into(), frac);
        }
    }
    Ok(out)
}

/// Merges every run's plot series into `series,x,y,run_id` rows, sorted so the
/// output does not depend on the order of `dirs`.
pub fn run_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<SeriesRow>> {
    if dirs.is_empty() {
        return Err(Error::Config(
            "report needs at least one run directory".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    let mut ids = std::collections::BTreeSet::new();
    for dir in dirs {
        let run_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        if !ids.insert(run_id.clone()) {
            return Err(Error::Validation(format!(
                "two run directories are named `{run_id}`"
            )));
        }
        let entropy = dir.join("entropy.csv");
        let metrics = dir.join("metrics.txt");
        let before = rows.len();
        if entropy.is_file() {
            rows.extend(entropy_rows(&entropy, &run_id)?);
        }
        if metrics.is_file() {
            rows.extend(metric_rows(dir, &run_id)?);
        }
        if rows.len() == before {
            missing.push(format!("{} (no entropy.csv or metrics.txt)", dir.display()));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "missing metrics files: {}",
            missing.join("; ")
        )));
    }
    rows.sort_by(|a, b| {
        (&a.series, &a.run_id)
            .cmp(&(&b.series, &b.run_id))
            .then(a.x.total_cmp(&b.x))
    });
    let mut text = String::from("series,x,y,run_id\n");
    for r in &rows {
        writeln!(text, "{},{},{:e},{}", r.series, r.x, r.y, r.run_id).expect("string write");
    }
    fs::write(out, text)?;
    Ok(rows)
}
