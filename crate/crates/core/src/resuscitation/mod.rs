//! Up-projection surgery on low-coefficient memory positions, and attention temperature.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::CoefficientStats;
use crate::error::{Error, Result};
use crate::model::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResuscitationSpec {
    /// Percentile in `[0, 100]` of positions per layer to target.
    pub p: f64,
    /// Amplifying factor applied on top of `mean / c_i`.
    pub q: f64,
    #[serde(default = "default_floor")]
    pub epsilon_floor: f64,
    #[serde(default)]
    pub multiplier_cap: Option<f64>,
}

fn default_floor() -> f64 {
    1e-8
}

impl ResuscitationSpec {
    pub fn new(p: f64, q: f64) -> Self {
        Self {
            p,
            q,
            epsilon_floor: default_floor(),
            multiplier_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.p) {
            return Err(Error::Config(format!("p = {} outside [0, 100]", self.p)));
        }
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err(Error::Config(format!(
                "q = {} must be finite and nonnegative",
                self.q
            )));
        }
        if !(self.epsilon_floor > 0.0) {
            return Err(Error::Config("epsilon_floor must be positive".into()));
        }
        if let Some(cap) = self.multiplier_cap {
            if !(cap >= 0.0) {
                return Err(Error::Config(format!(
                    "multiplier cap {cap} must be nonnegative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    /// `None` when the layer is untouched (`p = 0`).
    pub threshold: Option<f64>,
    pub mean: f64,
    pub idx: Vec<usize>,
    pub old_coeff: Vec<f64>,
    pub multipliers: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryPlan {
    pub spec: ResuscitationSpec,
    pub source_stats: String,
    /// Width `m` the plan was computed for.
    pub width: usize,
    pub layers: Vec<LayerPlan>,
}

impl SurgeryPlan {
    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.idx.is_empty())
    }

    /// Audit CSV: `layer,position,old_coeff,threshold,multiplier`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("layer,position,old_coeff,threshold,multiplier\n");
        for (l, lp) in self.layers.iter().enumerate() {
            let t = lp.threshold.unwrap_or(f64::NAN);
            for ((&i, &c), &u) in lp.idx.iter().zip(&lp.old_coeff).zip(&lp.multipliers) {
                let _ = writeln!(out, "{l},{i},{c:e},{t:e},{u:e}");
            }
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Nearest-rank percentile: `sorted[ceil(p/100 * m) - 1]`, or `None` when that rank is 0.
pub fn nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    let k = (p * values.len() as f64 / 100.0).ceil() as usize;
    if k == 0 {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[k.min(sorted.len()) - 1])
}

pub fn plan_surgery(
    stats: &CoefficientStats,
    spec: &ResuscitationSpec,
    source_stats: &str,
) -> Result<SurgeryPlan> {
    spec.validate()?;
    if stats.n_instances == 0 || stats.width() == 0 {
        return Err(Error::Validation(
            "surgery needs nonempty coefficient statistics".into(),
        ));
    }
    let layers = stats
        .means
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let threshold = nearest_rank(c, spec.p);
            let idx: Vec<usize> = match threshold {
                None => Vec::new(),
                Some(t) => (0..c.len()).filter(|&i| c[i] <= t).collect(),
            };
            let old_coeff: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
            let multipliers = old_coeff
                .iter()
                .map(|&ci| {
                    let u = spec.q * mean / ci.max(spec.epsilon_floor);
                    spec.multiplier_cap.map_or(u, |cap| u.min(cap))
                })
                .collect();
            LayerPlan {
                threshold,
                mean,
                idx,
                old_coeff,
                multipliers,
            }
        })
        .collect();
    Ok(SurgeryPlan {
        spec: spec.clone(),
        source_stats: source_stats.to_string(),
        width: stats.width(),
        layers,
    })
}

/// Returns a copy of `ckpt` whose up-projection rows at each layer's `idx` are
/// scaled by the planned multipliers. Nothing else changes except provenance.
pub fn apply_surgery(ckpt: &Checkpoint, plan: &SurgeryPlan) -> Result<Checkpoint> {
    let cfg = &ckpt.config;
    if plan.layers.len() != cfg.n_layers || plan.width != cfg.ffn_inner {
        return Err(Error::Validation(format!(
            "plan covers {} layers of width {}, checkpoint has {} of width {}",
            plan.layers.len(),
            plan.width,
            cfg.n_layers,
            cfg.ffn_inner
        )));
    }
    let mut out = ckpt.clone();
    for (layer, lp) in out.params.layers.iter_mut().zip(&plan.layers) {
        for (&i, &u) in lp.idx.iter().zip(&lp.multipliers) {
            if i >= cfg.ffn_inner || !u.is_finite() {
                return Err(Error::Validation(format!(
                    "bad plan entry at position {i} (multiplier {u})"
                )));
            }
            layer.up.row_mut(i).iter_mut().for_each(|w| *w *= u);
        }
    }
    out.meta.insert("resusc_p".into(), plan.spec.p.to_string());
    out.meta.insert("resusc_q".into(), plan.spec.q.to_string());
    out.meta
        .insert("source_stats".into(), plan.source_stats.clone());
    Ok(out)
}

/// Copy of `ckpt` whose forward passes divide attention logits by `tau`.
pub fn attention_temperature(ckpt: &Checkpoint, tau: f64) -> Result<Checkpoint> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Param(format!(
            "attention temperature must be positive, got {tau}"
        )));
    }
    let mut out = ckpt.clone();
    out.attn_temperature = tau;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::CoefficientMode;
    use crate::model::{forward, init_model, ModelConfig};

    fn stats(c: Vec<f64>) -> CoefficientStats {
        CoefficientStats::from_means(vec![c], 1, CoefficientMode::AbsSwiglu).unwrap()
    }

    #[test]
    fn hand_worked_plan() {
        let s = stats(vec![0.1, 0.2, 0.3, 0.4]);
        let plan = plan_surgery(&s, &ResuscitationSpec::new(50.0, 1.0), "s").unwrap();
        let lp = &plan.layers[0];
        assert_eq!(lp.threshold, Some(0.2));
        assert_eq!(lp.idx, vec![0, 1]);
        assert!((lp.mean - 0.25).abs() < 1e-15);
        assert!((lp.multipliers[0] - 2.5).abs() < 1e-12);
        assert!((lp.multipliers[1] - 1.25).abs() < 1e-12);

        let half = plan_surgery(&s, &ResuscitationSpec::new(50.0, 0.5), "s").unwrap();
        assert!((half.layers[0].multipliers[0] - 1.25).abs() < 1e-12);
        assert!((half.layers[0].multipliers[1] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn zero_percent_is_empty_and_ties_take_everything() {
        let empty = plan_surgery(
            &stats(vec![0.1, 0.2]),
            &ResuscitationSpec::new(0.0, 1.0),
            "s",
        )
        .unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.layers[0].threshold, None);
        let flat = plan_surgery(
            &stats(vec![0.3; 8]),
            &ResuscitationSpec::new(10.0, 1.0),
            "s",
        )
        .unwrap();
        assert_eq!(flat.layers[0].idx, (0..8).collect::<Vec<_>>());
        assert!(flat.layers[0]
            .multipliers
            .iter()
            .all(|&u| (u - 1.0).abs() < 1e-15));
    }

    #[test]
    fn floor_and_cap() {
        let s = stats(vec![0.0, 1.0, 2.0, 3.0]);
        let plan = plan_surgery(&s, &ResuscitationSpec::new(25.0, 1.0), "s").unwrap();
        assert!((plan.layers[0].multipliers[0] - 1.5e8).abs() < 1.0);
        let mut spec = ResuscitationSpec::new(25.0, 1.0);
        spec.multiplier_cap = Some(10.0);
        assert_eq!(
            plan_surgery(&s, &spec, "s").unwrap().layers[0].multipliers,
            vec![10.0]
        );
    }

    #[test]
    fn invalid_specs() {
        let s = stats(vec![1.0, 2.0]);
        for spec in [
            ResuscitationSpec::new(-1.0, 1.0),
            ResuscitationSpec::new(101.0, 1.0),
            ResuscitationSpec::new(50.0, -0.5),
            ResuscitationSpec {
                epsilon_floor: 0.0,
                ..ResuscitationSpec::new(50.0, 1.0)
            },
        ] {
            assert!(plan_surgery(&s, &spec, "s").is_err());
        }
    }

    #[test]
    fn apply_touches_only_targeted_up_rows() {
        let ckpt = init_model(&ModelConfig::tiny(2)).unwrap();
        let means = (0..2)
            .map(|l| {
                (0..32)
                    .map(|i| 0.01 * (1 + (i * 7 + l) % 32) as f64)
                    .collect()
            })
            .collect();
        let s = CoefficientStats::from_means(means, 4, CoefficientMode::AbsSwiglu).unwrap();
        let plan = plan_surgery(&s, &ResuscitationSpec::new(50.0, 1.0), "stats.kelab").unwrap();
        let out = apply_surgery(&ckpt, &plan).unwrap();
        assert_eq!(out.meta["resusc_p"], "50");
        assert_eq!(out.meta["source_stats"], "stats.kelab");
        assert_eq!(out.step, ckpt.step);
        for (l, (a, b)) in ckpt
            .params
            .layers
            .iter()
            .zip(&out.params.layers)
            .enumerate()
        {
            assert_eq!(a.gate, b.gate);
            assert_eq!(a.down, b.down);
            assert_eq!(a.wq, b.wq);
            let lp = &plan.layers[l];
            for i in 0..32 {
                match lp.idx.iter().position(|&j| j == i) {
                    None => assert_eq!(a.up.row(i), b.up.row(i)),
                    Some(k) => {
                        for (x, y) in a.up.row(i).iter().zip(b.up.row(i)) {
                            assert_eq!(*y, x * lp.multipliers[k]);
                        }
                    }
                }
            }
        }
        assert_eq!(ckpt.params.embed, out.params.embed);

        let empty = plan_surgery(&s, &ResuscitationSpec::new(0.0, 1.0), "x").unwrap();
        assert_eq!(apply_surgery(&ckpt, &empty).unwrap().params, ckpt.params);

        let narrow = plan_surgery(
            &stats(vec![1.0, 2.0]),
            &ResuscitationSpec::new(50.0, 1.0),
            "x",
        )
        .unwrap();
        assert!(apply_surgery(&ckpt, &narrow).is_err());
    }

    #[test]
    fn temperature_identity_limit_and_fixture() {
        let ckpt = init_model(&ModelConfig::tiny(4)).unwrap();
        let tokens = [1, 5, 9, 2, 7];
        let base = forward(&ckpt, &tokens).unwrap();
        let same = forward(&attention_temperature(&ckpt, 1.0).unwrap(), &tokens).unwrap();
        assert_eq!(base.attention, same.attention);
        assert_eq!(base.logits, same.logits);

        let hot = forward(&attention_temperature(&ckpt, 1e9).unwrap(), &tokens).unwrap();
        assert_eq!(hot.attn_temperature, 1e9);
        for j in 0..tokens.len() {
            for x in &hot.attention_head(0, 1).row(j)[..=j] {
                assert!((x - 1.0 / (j + 1) as f64).abs() < 1e-6);
            }
        }
        assert!(attention_temperature(&ckpt, 0.0).is_err());
        assert!(attention_temperature(&ckpt, -2.0).is_err());
    }

    #[test]
    fn plan_csv_lists_targeted_positions() {
        let dir = tempfile::tempdir().unwrap();
        let plan = plan_surgery(
            &stats(vec![0.1, 0.2, 0.3, 0.4]),
            &ResuscitationSpec::new(50.0, 1.0),
            "s",
        )
        .unwrap();
        let p = dir.path().join("plan.csv");
        plan.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,position,old_coeff,threshold,multiplier");
        assert_eq!(lines.len(), 3);
        let f: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(&f[..2], &[0.0, 0.0]);
        assert!(
            (f[2] - 0.1).abs() < 1e-15 && (f[3] - 0.2).abs() < 1e-15 && (f[4] - 2.5).abs() < 1e-12
        );
    }
}
