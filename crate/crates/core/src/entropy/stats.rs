use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::container::{self, Header};
use crate::model::{InstrumentationTrace, ModelConfig};
use crate::tensor::Tensor;

pub const STATS_KIND: &str = "coeff_stats";

/// Which per-token quantity is averaged into the statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoefficientMode {
    /// `|swish(gate) · up|`
    #[default]
    #[serde(rename = "abs-swiglu")]
    AbsSwiglu,
    /// `max(0, relu(gate) · up)`
    #[serde(rename = "relu-gate")]
    ReluGate,
}

impl CoefficientMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CoefficientMode::AbsSwiglu => "abs-swiglu",
            CoefficientMode::ReluGate => "relu-gate",
        }
    }
}

impl fmt::Display for CoefficientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoefficientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs-swiglu" => Ok(CoefficientMode::AbsSwiglu),
            "relu-gate" => Ok(CoefficientMode::ReluGate),
            other => Err(Error::Config(format!("unknown coefficient mode `{other}`"))),
        }
    }
}

/// `max(0, relu(g) · u)` from gate and up pre-activations of equal shape.
pub fn relu_gate_coefficients(gate_pre: &Tensor, up_pre: &Tensor) -> Result<Tensor> {
    if gate_pre.shape() != up_pre.shape() {
        return Err(Error::Shape {
            op: "relu_gate_coefficients",
            lhs: gate_pre.shape().to_vec(),
            rhs: up_pre.shape().to_vec(),
        });
    }
    let data = gate_pre
        .data()
        .iter()
        .zip(up_pre.data())
        .map(|(&g, &u)| (g.max(0.0) * u).max(0.0))
        .collect();
    Tensor::new(gate_pre.shape().to_vec(), data)
}

/// Coefficient matrix `[T, m]` of one layer under `mode`.
pub fn layer_coefficients(
    trace: &InstrumentationTrace,
    layer: usize,
    mode: CoefficientMode,
) -> Result<Tensor> {
    match mode {
        CoefficientMode::AbsSwiglu => Ok(trace.coefficients[layer].clone()),
        CoefficientMode::ReluGate => {
            relu_gate_coefficients(&trace.gate_pre[layer], &trace.up_pre[layer])
        }
    }
}

/// Column means of a `[T, m]` matrix.
pub(crate) fn token_mean(c: &Tensor) -> Vec<f64> {
    let (t, m) = (c.shape()[0], c.shape()[1]);
    let mut out = vec![0.0; m];
    for i in 0..t {
        for (o, x) in out.iter_mut().zip(c.row(i)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    out
}

/// Dataset-averaged coefficient vectors, one per layer.
///
/// Each instance first averages over its own tokens; the stored vector is the
/// running mean of those instance means.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientStats {
    pub mode: CoefficientMode,
    pub means: Vec<Vec<f64>>,
    pub n_instances: u64,
}

impl CoefficientStats {
    pub fn new(n_layers: usize, m: usize, mode: CoefficientMode) -> Self {
        Self {
            mode,
            means: vec![vec![0.0; m]; n_layers],
            n_instances: 0,
        }
    }

    /// Stats from precomputed layer means; entries must be finite and nonnegative.
    pub fn from_means(
        means: Vec<Vec<f64>>,
        n_instances: u64,
        mode: CoefficientMode,
    ) -> Result<Self> {
        if means.iter().flatten().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Validation(
                "coefficient means must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            mode,
            means,
            n_instances,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.means.len()
    }

    pub fn width(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Folds one instance's per-layer token means into the running mean.
    pub fn push_instance(&mut self, instance_means: &[Vec<f64>]) -> Result<()> {
        if instance_means.len() != self.means.len()
            || instance_means.iter().any(|v| v.len() != self.width())
        {
            return Err(Error::Shape {
                op: "accumulate",
                lhs: vec![self.n_layers(), self.width()],
                rhs: vec![
                    instance_means.len(),
                    instance_means.first().map_or(0, Vec::len),
                ],
            });
        }
        let n = self.n_instances as f64;
        for (acc, x) in self.means.iter_mut().zip(instance_means) {
            for (a, &v) in acc.iter_mut().zip(x) {
                *a = (n * *a + v) / (n + 1.0);
            }
        }
        self.n_instances += 1;
        Ok(())
    }

    pub fn accumulate(&mut self, trace: &InstrumentationTrace) -> Result<()> {
        if trace.n_layers() != self.n_layers() {
            return Err(Error::Shape {
                op: "accumulate",
                lhs: vec![self.n_layers(), self.width()],
                rhs: vec![trace.n_layers()],
            });
        }
        let means = (0..trace.n_layers())
            .map(|l| layer_coefficients(trace, l, self.mode).map(|c| token_mean(&c)))
            .collect::<Result<Vec<_>>>()?;
        self.push_instance(&means)
    }

    /// KELAB1 file with one `coeff_stats.layer<l>` tensor per layer.
    pub fn save(
        &self,
        path: &Path,
        config: &ModelConfig,
        step: u64,
        meta: &[(&str, &str)],
    ) -> Result<()> {
        let mut header = Header::new(STATS_KIND, config.clone(), step);
        header.n_instances = Some(self.n_instances);
        header.meta.insert("mode".into(), self.mode.to_string());
        for (k, v) in meta {
            header.meta.insert(k.to_string(), v.to_string());
        }
        let entries: Vec<(String, Vec<usize>, &[f64])> = self
            .means
            .iter()
            .enumerate()
            .map(|(l, v)| (format!("coeff_stats.layer{l}"), vec![v.len()], v.as_slice()))
            .collect();
        container::write(path, header, &entries)
    }

    /// Returns the stats with the model config and header they were measured under.
    pub fn load(path: &Path) -> Result<(Self, Header)> {
        let c = container::read(path)?;
        if c.header.kind != STATS_KIND {
            return Err(Error::Validation(format!(
                "expected coefficient stats, found `{}`",
                c.header.kind
            )));
        }
        let mode = c
            .header
            .meta
            .get("mode")
            .map_or(Ok(CoefficientMode::AbsSwiglu), |s| s.parse())?;
        let n_instances = c
            .header
            .n_instances
            .ok_or_else(|| Error::CorruptHeader("coefficient stats without n_instances".into()))?;
        let cfg = &c.header.config;
        let mut means = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let name = format!("coeff_stats.layer{l}");
            let (entry, blob) = c
                .blob(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if entry.shape != [cfg.ffn_inner] {
                return Err(Error::TensorShape {
                    name,
                    expected: vec![cfg.ffn_inner],
                    found: entry.shape.clone(),
                });
            }
            means.push(blob.iter().map(|&x| x as f64).collect());
        }
        let stats = Self::from_means(means, n_instances, mode)?;
        Ok((stats, c.header))
    }
}
