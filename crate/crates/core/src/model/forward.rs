//! Sandwich-norm GQA forward pass.
//!
//! Per block:
//!
//! ```text
//! x <- x + PostAttnNorm(Attn(PreAttnNorm(x)))
//! x <- x + PostFfnNorm(FFN(PreFfnNorm(x)))
//! ```
//!
//! An absent (absorbed) post-norm passes the module output through unchanged.

use super::weights::{LayerWeights, WeightStore};
use crate::error::{Error, Result};
use crate::kernel::{matmul, rmsnorm_rows, softmax_in_place, swish, Tensor};

/// Rotary base frequency.
pub const ROPE_BASE: f64 = 10_000.0;

/// Activations recorded at every hook site of one block. All tensors have one
/// row per token.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Block input (residual stream), S × d.
    pub input: Tensor,
    pub pre_attn_norm: Tensor,
    /// Concatenated per-head attention outputs before `wo`, S × (heads · d_head).
    pub head_outputs: Tensor,
    /// Attention module output entering the post-attention norm, S × d.
    pub attn_out: Tensor,
    pub post_attn_norm: Option<Tensor>,
    pub pre_ffn_norm: Tensor,
    /// `swish(x·W_gate) ⊙ (x·W_up)`, S × d_ffn.
    pub ffn_hidden: Tensor,
    /// FFN module output entering the post-FFN norm, S × d.
    pub ffn_out: Tensor,
    pub post_ffn_norm: Option<Tensor>,
    /// Block output, S × d.
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Input to the final norm.
    pub final_input: Tensor,
    pub final_norm: Tensor,
}

/// Rotates consecutive pairs `(2i, 2i+1)` of every head vector by
/// `pos · base^(-2i/d_head)`. An odd trailing element is left unrotated.
pub fn apply_rope(t: &mut Tensor, heads: usize, head_dim: usize) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    for pos in 0..t.rows() {
        let rotations: Vec<(f32, f32)> = freqs
            .iter()
            .map(|f| {
                let a = pos as f64 * f;
                (a.cos() as f32, a.sin() as f32)
            })
            .collect();
        let row = t.row_mut(pos);
        for h in 0..heads {
            let v = &mut row[h * head_dim..(h + 1) * head_dim];
            for (i, &(cos, sin)) in rotations.iter().enumerate() {
                let (a, b) = (v[2 * i], v[2 * i + 1]);
                v[2 * i] = a * cos - b * sin;
                v[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Causal grouped-query attention over already-rotated projections.
/// Returns the concatenated head outputs, S × (heads · d_head).
fn grouped_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    query_heads: usize,
    kv_groups: usize,
    head_dim: usize,
) -> Tensor {
    let seq = q.rows();
    let per_group = query_heads / kv_groups;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut out = Tensor::zeros(seq, query_heads * head_dim);
    let mut probs = vec![0.0f32; seq];
    for h in 0..query_heads {
        let g = h / per_group;
        let (qo, ko) = (h * head_dim, g * head_dim);
        for i in 0..seq {
            let qi = &q.row(i)[qo..qo + head_dim];
            for (t, p) in probs[..=i].iter_mut().enumerate() {
                let kt = &k.row(t)[ko..ko + head_dim];
                let mut dot = 0.0f32;
                for (a, b) in qi.iter().zip(kt) {
                    dot += a * b;
                }
                *p = dot * scale;
            }
            softmax_in_place(&mut probs[..=i]);
            let dst = &mut out.row_mut(i)[qo..qo + head_dim];
            for (t, &p) in probs[..=i].iter().enumerate() {
                let vt = &v.row(t)[ko..ko + head_dim];
                for (o, &val) in dst.iter_mut().zip(vt) {
                    *o += p * val;
                }
            }
        }
    }
    out
}

/// Attention module: returns (head outputs, module output before post-norm).
pub fn attention(
    w: &LayerWeights,
    h: &Tensor,
    query_heads: usize,
    kv_groups: usize,
    head_dim: usize,
) -> Result<(Tensor, Tensor)> {
    let mut q = matmul(h, &w.wq)?;
    let mut k = matmul(h, &w.wk)?;
    let v = matmul(h, &w.wv)?;
    apply_rope(&mut q, query_heads, head_dim);
    apply_rope(&mut k, kv_groups, head_dim);
    let heads = grouped_attention(&q, &k, &v, query_heads, kv_groups, head_dim);
    let out = matmul(&heads, &w.wo)?;
    Ok((heads, out))
}

/// SwiGLU module: returns (intermediate activations, module output).
pub fn swiglu(w: &LayerWeights, h: &Tensor) -> Result<(Tensor, Tensor)> {
    let gate = matmul(h, &w.w_gate)?;
    let mut hidden = matmul(h, &w.w_up)?;
    for (u, &g) in hidden.data_mut().iter_mut().zip(gate.data()) {
        *u *= swish(g);
    }
    let out = matmul(&hidden, &w.w_down)?;
    Ok((hidden, out))
}

fn run_layer(store: &WeightStore, l: usize, x: Tensor) -> Result<LayerTrace> {
    let cfg = &store.config;
    let lc = &cfg.layers[l];
    let w = &store.layers[l];
    let eps = cfg.eps;

    let pre_attn_norm = rmsnorm_rows(&x, &w.pre_attn_gamma, eps)?;
    let (head_outputs, attn_out) = attention(
        w,
        &pre_attn_norm,
        lc.query_heads,
        lc.kv_groups,
        cfg.head_dim,
    )?;
    let post_attn_norm = match &w.post_attn_gamma {
        Some(g) => Some(rmsnorm_rows(&attn_out, g, eps)?),
        None => None,
    };
    let mut mid = x.clone();
    mid.add_assign(post_attn_norm.as_ref().unwrap_or(&attn_out))?;

    let pre_ffn_norm = rmsnorm_rows(&mid, &w.pre_ffn_gamma, eps)?;
    let (ffn_hidden, ffn_out) = swiglu(w, &pre_ffn_norm)?;
    let post_ffn_norm = match &w.post_ffn_gamma {
        Some(g) => Some(rmsnorm_rows(&ffn_out, g, eps)?),
        None => None,
    };
    let mut output = mid;
    output.add_assign(post_ffn_norm.as_ref().unwrap_or(&ffn_out))?;

    Ok(LayerTrace {
        input: x,
        pre_attn_norm,
        head_outputs,
        attn_out,
        post_attn_norm,
        pre_ffn_norm,
        ffn_hidden,
        ffn_out,
        post_ffn_norm,
        output,
    })
}

/// Embedding lookup with token validation.
pub fn embed(store: &WeightStore, tokens: &[u32]) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    let vocab = store.config.vocab;
    if let Some((pos, &t)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= vocab)
    {
        return Err(Error::Input(format!(
            "token id {t} at position {pos} is out of range for vocab {vocab}"
        )));
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    Ok(store.embedding.select_rows(&idx))
}

/// Runs the model over one sequence, returning S × V logits and, when
/// `trace` is set, every intermediate activation.
pub fn forward(
    store: &WeightStore,
    tokens: &[u32],
    trace: bool,
) -> Result<(Tensor, Option<ForwardTrace>)> {
    let mut x = embed(store, tokens)?;
    let mut layers = Vec::new();
    for l in 0..store.layers.len() {
        let lt = run_layer(store, l, x)?;
        x = lt.output.clone();
        if trace {
            layers.push(lt);
        }
    }
    let final_norm = rmsnorm_rows(&x, &store.final_gamma, store.config.eps)?;
    let logits = matmul(&final_norm, &store.output_head)?;
    let trace = trace.then_some(ForwardTrace {
        layers,
        final_input: x,
        final_norm,
    });
    Ok((logits, trace))
}

/// Logits only.
pub fn logits(store: &WeightStore, tokens: &[u32]) -> Result<Tensor> {
    forward(store, tokens, false).map(|(l, _)| l)
}
