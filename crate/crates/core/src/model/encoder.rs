//! Forward passes: frontend, shared block, attention with expert banks,
//! MLE layers, and the full encoder.
//!
//! Blocks are pre-norm residual: `x + Dropout(Sublayer(LayerNorm(x)))`.
//! One routing decision, computed once from the shared-block output, drives
//! every MLE layer and both sub-modules within each layer.

use super::weights::{AttnW, EncoderWeights, LayerW};
use super::ParamBinder;
use crate::error::{Error, Result};
use crate::router::{self, ExpertMask, RoutingDecision, RoutingMode};
use crate::tape::{Tape, Var};
use crate::Tensor;

/// Fixed sinusoidal positional encodings for `t` frames.
pub fn sinusoidal_pe(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(data, vec![t, d]).expect("pe shape")
}

/// Input projection, √d_model scaling, positional encoding, dropout.
pub fn frontend_forward(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder,
    w: &EncoderWeights,
    features: Var,
) -> Result<Var> {
    let t = tape.shape(features)[0];
    let d = w.config.d_model;
    let fw = binder.bind(tape, "frontend.w", &w.frontend.w);
    let fb = binder.bind(tape, "frontend.b", &w.frontend.b);
    let x = tape.matmul(features, fw)?;
    let x = tape.add_bias(x, fb)?;
    let x = tape.scale(x, (d as f64).sqrt())?;
    let pe = sinusoidal_pe(t, d);
    let pe = tape.constant(&pe);
    let x = tape.add(x, pe)?;
    tape.dropout(x)
}

fn bank_index(bank_len: usize, expert: usize) -> Result<usize> {
    if bank_len == 1 {
        Ok(0)
    } else if expert < bank_len {
        Ok(expert)
    } else {
        Err(Error::ExpertOutOfRange { expert, num_experts: bank_len })
    }
}

/// Multi-head self-attention with optional expert banks on K/Q/V/O.
pub fn attention_moe_forward(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder,
    prefix: &str,
    attn: &AttnW,
    d_model: usize,
    num_heads: usize,
    x: Var,
    expert: usize,
) -> Result<Var> {
    let dk = d_model / num_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out: Option<Var> = None;
    for h in 0..num_heads {
        let mut proj = |tape: &mut Tape<f64>, mname: &str, bank: &[super::weights::HeadProj]| -> Result<Var> {
            let e = bank_index(bank.len(), expert)?;
            let eseg = if bank.len() > 1 { format!(".e{e}") } else { String::new() };
            Ok(binder.bind(tape, format!("{prefix}.attn.{mname}{eseg}.h{h}"), &bank[e].heads[h]))
        };
        let wk = proj(tape, "k", &attn.wk)?;
        let wq = proj(tape, "q", &attn.wq)?;
        let wv = proj(tape, "v", &attn.wv)?;
        let wo = proj(tape, "o", &attn.wo)?;
        let k = tape.matmul(x, wk)?;
        let q = tape.matmul(x, wq)?;
        let v = tape.matmul(x, wv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(probs, v)?;
        let head_out = tape.matmul(ctx, wo)?;
        out = Some(match out {
            None => head_out,
            Some(acc) => tape.add(acc, head_out)?,
        });
    }
    Ok(out.expect("at least one head"))
}

fn ffn_forward(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder,
    prefix: &str,
    layer: &LayerW,
    x: Var,
    expert: usize,
) -> Result<Var> {
    let e = bank_index(layer.ffn.len(), expert)?;
    let eseg = if layer.ffn.len() > 1 { format!(".e{e}") } else { String::new() };
    let ffn = &layer.ffn[e];
    let w1 = binder.bind(tape, format!("{prefix}.ffn{eseg}.w1"), &ffn.w1);
    let b1 = binder.bind(tape, format!("{prefix}.ffn{eseg}.b1"), &ffn.b1);
    let w2 = binder.bind(tape, format!("{prefix}.ffn{eseg}.w2"), &ffn.w2);
    let b2 = binder.bind(tape, format!("{prefix}.ffn{eseg}.b2"), &ffn.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w2)?;
    tape.add_bias(h, b2)
}

/// One pre-norm Transformer layer; attention and FFN share the expert
/// index. Shared layers are the degenerate bank-size-1 case.
pub fn mle_layer_forward(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder,
    prefix: &str,
    layer: &LayerW,
    x: Var,
    expert: usize,
) -> Result<Var> {
    let g1 = binder.bind(tape, format!("{prefix}.norm1.gain"), &layer.norm1.gain);
    let b1 = binder.bind(tape, format!("{prefix}.norm1.bias"), &layer.norm1.bias);
    let normed = tape.layer_norm(x, g1, b1)?;
    let attn_out = attention_moe_forward(
        tape,
        binder,
        prefix,
        &layer.attn,
        tape.shape(x)[1],
        layer.attn.wk[0].heads.len(),
        normed,
        expert,
    )?;
    let attn_out = tape.dropout(attn_out)?;
    let x = tape.add(x, attn_out)?;

    let g2 = binder.bind(tape, format!("{prefix}.norm2.gain"), &layer.norm2.gain);
    let b2 = binder.bind(tape, format!("{prefix}.norm2.bias"), &layer.norm2.bias);
    let normed = tape.layer_norm(x, g2, b2)?;
    let ffn_out = ffn_forward(tape, binder, prefix, layer, normed, expert)?;
    let ffn_out = tape.dropout(ffn_out)?;
    tape.add(x, ffn_out)
}

/// Frontend plus the N shared layers; feeds both the router and the MLE
/// block. With no shared layers this is the pure input projection.
pub fn shared_block_forward(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder,
    w: &EncoderWeights,
    features: Var,
) -> Result<Var> {
    let mut x = frontend_forward(tape, binder, w, features)?;
    for (i, layer) in w.shared.iter().enumerate() {
        x = mle_layer_forward(tape, binder, &format!("shared{i}"), layer, x, 0)?;
    }
    Ok(x)
}

/// How to pick the expert for the MLE block.
pub enum RoutingPlan<'a> {
    /// Ground-truth language (training).
    Teacher { true_lang: usize, mask: &'a ExpertMask },
    /// Router argmax under a pruning mask (inference).
    Argmax { mask: &'a ExpertMask },
    /// A decision made earlier for this utterance.
    Decision(&'a RoutingDecision),
}

pub struct EncoderOut {
    /// Per-frame vocabulary logits for CTC, T×vocab.
    pub logits: Var,
    /// Utterance-level language logits, 1×n.
    pub lid_logits: Var,
    pub shared_out: Var,
    pub decision: RoutingDecision,
}

/// Full encoder pass: shared block → routing decision → MLE block →
/// vocabulary logits. `features` is already on the tape (a constant for
/// inference/training, a leaf when checking gradients w.r.t. the input).
pub fn encoder_forward(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder,
    w: &EncoderWeights,
    features: Var,
    plan: RoutingPlan<'_>,
) -> Result<EncoderOut> {
    let n = w.config.num_experts();
    let shared_out = shared_block_forward(tape, binder, w, features)?;
    let lid_logits = router_forward_of(tape, binder, w, shared_out)?;
    let logit_values = tape.value(lid_logits).to_vec();
    let decision = match plan {
        RoutingPlan::Teacher { true_lang, mask } => {
            router::decide(&logit_values, mask, RoutingMode::Teacher, Some(true_lang))?
        }
        RoutingPlan::Argmax { mask } => {
            router::decide(&logit_values, mask, RoutingMode::Argmax, None)?
        }
        RoutingPlan::Decision(d) => {
            if !w.config.is_vanilla() && d.expert >= n {
                return Err(Error::ExpertOutOfRange { expert: d.expert, num_experts: n });
            }
            d.clone()
        }
    };

    let mut x = shared_out;
    for (i, layer) in w.mle.iter().enumerate() {
        x = mle_layer_forward(tape, binder, &format!("mle{i}"), layer, x, decision.expert)?;
    }
    let g = binder.bind(tape, "final_norm.gain", &w.final_norm.gain);
    let b = binder.bind(tape, "final_norm.bias", &w.final_norm.bias);
    let x = tape.layer_norm(x, g, b)?;
    let hw = binder.bind(tape, "head.w", &w.head.w);
    let hb = binder.bind(tape, "head.b", &w.head.b);
    let logits = tape.matmul(x, hw)?;
    let logits = tape.add_bias(logits, hb)?;
    Ok(EncoderOut { logits, lid_logits, shared_out, decision })
}

/// Router head over an existing shared-block output var.
pub fn router_forward_of(
    tape: &mut Tape<f64>,
    binder: &mut ParamBinder,
    w: &EncoderWeights,
    shared_out: Var,
) -> Result<Var> {
    router::router_forward(tape, binder, &w.router, shared_out)
}
