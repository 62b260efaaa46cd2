//! Pre-norm decoder forward pass with per-layer instrumentation.

use super::{Checkpoint, LayerParams, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{GatedFfnOutput, Tape, Tensor, Var};

/// Everything recorded during one forward pass over a token sequence.
#[derive(Clone, Debug)]
pub struct InstrumentationTrace {
    /// Per layer `[T, m]`: `|swish(x·gateᵀ) ⊙ (x·upᵀ)|`.
    pub coefficients: Vec<Tensor>,
    /// Per layer `[T, m]` gate pre-activations.
    pub gate_pre: Vec<Tensor>,
    /// Per layer `[T, m]` up pre-activations.
    pub up_pre: Vec<Tensor>,
    /// Per layer `[T, d]` normalized inputs to the feed-forward block.
    pub ffn_inputs: Vec<Tensor>,
    /// Per layer `[heads, T, T]` causal attention weights.
    pub attention: Vec<Tensor>,
    /// `[T, V]`
    pub logits: Tensor,
    pub attn_temperature: f64,
}

impl InstrumentationTrace {
    pub fn n_layers(&self) -> usize {
        self.coefficients.len()
    }

    pub fn seq_len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn n_heads(&self) -> usize {
        self.attention.first().map_or(0, |a| a.shape()[0])
    }

    /// Attention matrix `[T, T]` of one head.
    pub fn attention_head(&self, layer: usize, head: usize) -> Tensor {
        let t = self.seq_len();
        let a = &self.attention[layer];
        Tensor::new(
            vec![t, t],
            a.data()[head * t * t..(head + 1) * t * t].to_vec(),
        )
        .expect("square block")
    }
}

pub(crate) struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_norm: Var,
    gate: Var,
    up: Var,
    down: Var,
}

/// Tape handles for every parameter, in [`super::param_layout`] order.
pub(crate) struct ParamVars {
    embed: Var,
    pos_embed: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
    unembed: Var,
}

impl ParamVars {
    pub fn load<'a>(tape: &mut Tape<'a>, params: &'a Params, trainable: bool) -> Self {
        let mut leaf = |t: &'a Tensor| tape.leaf_ref(t, trainable);
        let embed = leaf(&params.embed);
        let pos_embed = leaf(&params.pos_embed);
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: leaf(&l.attn_norm),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                ffn_norm: leaf(&l.ffn_norm),
                gate: leaf(&l.gate),
                up: leaf(&l.up),
                down: leaf(&l.down),
            })
            .collect();
        let final_norm = leaf(&params.final_norm);
        let unembed = leaf(&params.unembed);
        Self {
            embed,
            pos_embed,
            layers,
            final_norm,
            unembed,
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.pos_embed];
        for l in &self.layers {
            out.extend([
                l.attn_norm,
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.ffn_norm,
                l.gate,
                l.up,
                l.down,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }
}

pub(crate) struct LayerNodes {
    pub attn: Var,
    pub ffn_in: Var,
    pub ffn: GatedFfnOutput,
}

pub(crate) struct Graph {
    pub logits: Var,
    pub layers: Vec<LayerNodes>,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Param("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Param(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Param(format!(
            "token id {bad} out of range for vocab size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn build_graph(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    tokens: &[u32],
    attn_temperature: f64,
) -> Result<Graph> {
    check_tokens(cfg, tokens)?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.gather(vars.embed, &ids)?;
    let pos = tape.gather(vars.pos_embed, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut layers = Vec::with_capacity(vars.layers.len());
    for lv in &vars.layers {
        let h = tape.rms_norm(x, lv.attn_norm, cfg.norm_eps)?;
        let q = tape.matmul(h, lv.wq)?;
        let k = tape.matmul(h, lv.wk)?;
        let v = tape.matmul(h, lv.wv)?;
        let attn = tape.causal_attention(q, k, v, cfg.n_heads, attn_temperature)?;
        let proj = tape.matmul(attn, lv.wo)?;
        x = tape.add(x, proj)?;
        let ffn_in = tape.rms_norm(x, lv.ffn_norm, cfg.norm_eps)?;
        let ffn = tape.gated_ffn(ffn_in, lv.gate, lv.up, lv.down)?;
        x = tape.add(x, ffn.out)?;
        layers.push(LayerNodes { attn, ffn_in, ffn });
    }
    let hf = tape.rms_norm(x, vars.final_norm, cfg.norm_eps)?;
    let logits = tape.matmul_t(hf, vars.unembed)?;
    Ok(Graph { logits, layers })
}

fn extract_trace(
    tape: &Tape<'_>,
    graph: &Graph,
    cfg: &ModelConfig,
    t: usize,
    attn_temperature: f64,
) -> InstrumentationTrace {
    let n = graph.layers.len();
    let mut trace = InstrumentationTrace {
        coefficients: Vec::with_capacity(n),
        gate_pre: Vec::with_capacity(n),
        up_pre: Vec::with_capacity(n),
        ffn_inputs: Vec::with_capacity(n),
        attention: Vec::with_capacity(n),
        logits: tape.value(graph.logits).clone(),
        attn_temperature,
    };
    for layer in &graph.layers {
        trace.coefficients.push(layer.ffn.coeff.clone());
        trace.gate_pre.push(tape.value(layer.ffn.gate_pre).clone());
        trace.up_pre.push(tape.value(layer.ffn.up_pre).clone());
        trace.ffn_inputs.push(tape.value(layer.ffn_in).clone());
        let probs = tape
            .attention_probs(layer.attn)
            .expect("attention node")
            .to_vec();
        trace
            .attention
            .push(Tensor::new(vec![cfg.n_heads, t, t], probs).expect("attention shape"));
    }
    trace
}

/// Runs the model over `tokens` and records the full instrumentation trace.
pub fn forward(ckpt: &Checkpoint, tokens: &[u32]) -> Result<InstrumentationTrace> {
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, &ckpt.params, false);
    let graph = build_graph(
        &mut tape,
        &vars,
        &ckpt.config,
        tokens,
        ckpt.attn_temperature,
    )?;
    Ok(extract_trace(
        &tape,
        &graph,
        &ckpt.config,
        tokens.len(),
        ckpt.attn_temperature,
    ))
}

/// Logits only; skips copying the instrumentation out of the tape.
pub fn forward_logits(ckpt: &Checkpoint, tokens: &[u32]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::load(&mut tape, &ckpt.params, false);
    let graph = build_graph(
        &mut tape,
        &vars,
        &ckpt.config,
        tokens,
        ckpt.attn_temperature,
    )?;
    Ok(tape.value(graph.logits).clone())
}

/// Natural-log softmax probability of `target` under one logit row.
pub fn log_prob(row: &[f64], target: usize) -> f64 {
    row[target] - kernels::log_sum_exp(row)
}

/// Mean next-token cross-entropy over positions with a target.
///
/// `targets[t]` is the id expected after position `t`, or `None` where masked.
pub fn loss_lm(trace: &InstrumentationTrace, targets: &[Option<u32>]) -> Result<f64> {
    let logits = &trace.logits;
    if targets.len() != trace.seq_len() {
        return Err(Error::Shape {
            op: "loss_lm",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let vocab = logits.shape()[1];
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, target) in targets.iter().enumerate() {
        if let Some(y) = *target {
            if y as usize >= vocab {
                return Err(Error::Param(format!(
                    "target {y} out of range for vocab {vocab}"
                )));
            }
            total -= log_prob(logits.row(t), y as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("loss over a fully masked sequence".into()));
    }
    Ok(total / count as f64)
}

/// Teacher-forced mean log-probability of `span` following `context`.
pub fn target_span_logprob(ckpt: &Checkpoint, context: &[u32], span: &[u32]) -> Result<f64> {
    if context.is_empty() || span.is_empty() {
        return Err(Error::Param(
            "context and span must both be nonempty".into(),
        ));
    }
    let total = context.len() + span.len();
    if total > ckpt.config.max_seq_len {
        return Err(Error::Param(format!(
            "context + span length {total} exceeds max_seq_len {}",
            ckpt.config.max_seq_len
        )));
    }
    let tokens: Vec<u32> = context.iter().chain(span).copied().collect();
    // The last position's prediction is never used.
    let logits = forward_logits(ckpt, &tokens[..total - 1])?;
    let sum: f64 = span
        .iter()
        .enumerate()
        .map(|(k, &tok)| log_prob(logits.row(context.len() - 1 + k), tok as usize))
        .sum();
    Ok(sum / span.len() as f64)
}

/// Memory coefficients of one layer's feed-forward block for given inputs `[T, d]`.
pub fn ffn_coefficients(layer: &LayerParams, inputs: &Tensor) -> Result<Tensor> {
    let g = inputs.matmul_t(&layer.gate)?;
    let u = inputs.matmul_t(&layer.up)?;
    let data = g
        .data()
        .iter()
        .zip(u.data())
        .map(|(&gi, &ui)| (kernels::swish(gi) * ui).abs())
        .collect();
    Tensor::new(g.shape().to_vec(), data)
}
