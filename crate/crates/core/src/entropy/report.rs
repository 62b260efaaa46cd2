use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::CoefficientMode;
use crate::error::{Error, Result};

const HEADER: &str = "step,layer,h_knowledge,h_attention,h_next_token";

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyReport {
    pub step: u64,
    pub measurement_set: String,
    pub mode: CoefficientMode,
    pub knowledge: Vec<f64>,
    pub knowledge_total: f64,
    pub attention: Vec<f64>,
    pub attention_total: f64,
    pub next_token: Option<f64>,
}

impl EntropyReport {
    fn rows(&self, out: &mut String) {
        for (l, (k, a)) in self.knowledge.iter().zip(&self.attention).enumerate() {
            let _ = writeln!(out, "{},{l},{k:e},{a:e},", self.step);
        }
        let nt = self
            .next_token
            .map(|x| format!("{x:e}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},TOTAL,{:e},{:e},{nt}",
            self.step, self.knowledge_total, self.attention_total
        );
    }
}

/// Writes reports sharing one mode and measurement set as a single CSV.
///
/// Metadata goes on leading `# key=value` lines; floats use shortest
/// round-trip notation so reading back is exact.
pub fn write_reports(path: &Path, reports: &[EntropyReport]) -> Result<()> {
    let mut out = String::new();
    if let Some(first) = reports.first() {
        if reports
            .iter()
            .any(|r| r.mode != first.mode || r.measurement_set != first.measurement_set)
        {
            return Err(Error::Validation(
                "reports in one file must share mode and measurement set".into(),
            ));
        }
        let _ = writeln!(out, "# mode={}", first.mode);
        let _ = writeln!(out, "# measurement_set={}", first.measurement_set);
    }
    out.push_str(HEADER);
    out.push('\n');
    for r in reports {
        r.rows(&mut out);
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Validation(format!("line {line}: `{s}` is not a number")))
}

pub fn read_reports(path: &Path) -> Result<Vec<EntropyReport>> {
    let text = fs::read_to_string(path)?;
    let mut mode = CoefficientMode::AbsSwiglu;
    let mut set = String::new();
    let mut reports: Vec<EntropyReport> = Vec::new();
    let mut open: Option<EntropyReport> = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(meta) = line.strip_prefix("# ") {
            match meta.split_once('=') {
                Some(("mode", v)) => mode = v.parse()?,
                Some(("measurement_set", v)) => set = v.to_string(),
                _ => {}
            }
            continue;
        }
        if line == HEADER || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Validation(format!("line {n}: expected 5 fields")));
        }
        let step: u64 = f[0]
            .parse()
            .map_err(|_| Error::Validation(format!("line {n}: bad step `{}`", f[0])))?;
        let r = open.get_or_insert_with(|| EntropyReport {
            step,
            measurement_set: set.clone(),
            mode,
            knowledge: Vec::new(),
            knowledge_total: 0.0,
            attention: Vec::new(),
            attention_total: 0.0,
            next_token: None,
        });
        if r.step != step {
            return Err(Error::Validation(format!(
                "line {n}: step {step} before TOTAL of step {}",
                r.step
            )));
        }
        if f[1] == "TOTAL" {
            r.knowledge_total = parse_f64(f[2], n)?;
            r.attention_total = parse_f64(f[3], n)?;
            r.next_token = if f[4].is_empty() {
                None
            } else {
                Some(parse_f64(f[4], n)?)
            };
            reports.push(open.take().expect("open report"));
        } else {
            r.knowledge.push(parse_f64(f[2], n)?);
            r.attention.push(parse_f64(f[3], n)?);
        }
    }
    if open.is_some() {
        return Err(Error::Validation(format!(
            "{}: report without TOTAL row",
            path.display()
        )));
    }
    Ok(reports)
}
