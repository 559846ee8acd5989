//! Forward-only quality and cost metrics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{logits, ModelConfig, WeightStore};

/// Log-softmax of one logit row, in `f64`.
pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|&v| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// `KL(p ‖ q)` in nats from two logit rows.
pub fn kl_from_logits(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// Mean per-token forward KL from the teacher's full-vocabulary distribution
/// to the student's.
pub fn kd_loss(teacher: &WeightStore, student: &WeightStore, data: &CalibrationSet) -> Result<f64> {
    if teacher.config.vocab != student.config.vocab {
        return Err(Error::shape(format!(
            "teacher vocab {} vs student vocab {}",
            teacher.config.vocab, student.config.vocab
        )));
    }
    let per_seq: Vec<Result<(f64, usize)>> = data
        .sequences
        .par_iter()
        .map(|seq| {
            let (t, s) = rayon::join(|| logits(teacher, seq), || logits(student, seq));
            let (t, s) = (t?, s?);
            let sum = (0..t.rows())
                .map(|r| kl_from_logits(t.row(r), s.row(r)))
                .sum::<f64>();
            Ok((sum, t.rows()))
        })
        .collect();
    let (mut total, mut count) = (0.0f64, 0usize);
    for r in per_seq {
        let (s, n) = r?;
        total += s;
        count += n;
    }
    Ok(total / count as f64)
}

/// `exp` of the mean next-token negative log-likelihood.
pub fn perplexity(w: &WeightStore, data: &CalibrationSet) -> Result<f64> {
    let per_seq: Vec<Result<(f64, usize)>> = data
        .sequences
        .par_iter()
        .filter(|seq| seq.len() >= 2)
        .map(|seq| {
            let l = logits(w, seq)?;
            let nll = (0..seq.len() - 1)
                .map(|i| -log_softmax(l.row(i))[seq[i + 1] as usize])
                .sum::<f64>();
            Ok((nll, seq.len() - 1))
        })
        .collect();
    let (mut total, mut count) = (0.0f64, 0usize);
    for r in per_seq {
        let (s, n) = r?;
        total += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input(
            "perplexity needs a sequence of at least two tokens".into(),
        ));
    }
    Ok((total / count as f64).exp())
}

/// Analytic per-token decode cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub param_count: u64,
    /// Matmul and attention flops of all blocks.
    pub layer_flops: u64,
    /// Output-head matmul flops.
    pub head_flops: u64,
    pub flops_per_token: u64,
    /// RMSNorm applications per token.
    pub norm_count: u64,
    /// Elementwise operations per token (norms, residual adds, SwiGLU gating).
    pub vector_ops: u64,
    /// Reference flops over candidate flops.
    pub relative_speed: f64,
}

/// Exact parameter count implied by a config.
pub fn param_count(config: &ModelConfig) -> u64 {
    WeightStore::expected_manifest(config)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>() as u64)
        .sum()
}

fn layer_flops(config: &ModelConfig, seq_len: usize) -> u64 {
    let d = config.hidden as u64;
    let dh = config.head_dim as u64;
    let s = seq_len as u64;
    config
        .layers
        .iter()
        .map(|lc| {
            let q = lc.query_heads as u64 * dh;
            let kv = lc.kv_groups as u64 * dh;
            let f = lc.ffn_dim as u64;
            let projections = 2 * d * q + 2 * 2 * d * kv + 2 * q * d;
            // Scores and weighted values against `seq_len` cached positions.
            let attention = 2 * 2 * q * s;
            let ffn = 3 * 2 * d * f;
            projections + attention + ffn
        })
        .sum()
}

fn flops(config: &ModelConfig, seq_len: usize) -> (u64, u64) {
    (
        layer_flops(config, seq_len),
        2 * config.hidden as u64 * config.vocab as u64,
    )
}

/// Per-token cost of decoding at context length `seq_len`, relative to
/// `reference`.
pub fn estimate_cost(
    config: &ModelConfig,
    reference: &ModelConfig,
    seq_len: usize,
) -> CostEstimate {
    let (layer, head) = flops(config, seq_len);
    let (ref_layer, ref_head) = flops(reference, seq_len);
    let d = config.hidden as u64;
    let norm_count = config.num_norms() as u64;
    let vector_ops = norm_count * 4 * d
        + config
            .layers
            .iter()
            .map(|lc| 2 * d + 3 * lc.ffn_dim as u64)
            .sum::<u64>();
    CostEstimate {
        param_count: param_count(config),
        layer_flops: layer,
        head_flops: head,
        flops_per_token: layer + head,
        norm_count,
        vector_ops,
        relative_speed: (ref_layer + ref_head) as f64 / (layer + head) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when no teacher was given.
    pub kd_loss: Option<f64>,
    pub perplexity: f64,
    pub cost: CostEstimate,
}

impl EvalReport {
    pub fn evaluate(
        student: &WeightStore,
        teacher: Option<&WeightStore>,
        data: &CalibrationSet,
        seq_len: usize,
    ) -> Result<Self> {
        let kd_loss = teacher.map(|t| kd_loss(t, student, data)).transpose()?;
        let reference = teacher.map_or(&student.config, |t| &t.config);
        Ok(Self {
            kd_loss,
            perplexity: perplexity(student, data)?,
            cost: estimate_cost(&student.config, reference, seq_len),
        })
    }

    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let kd = self.kd_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
        let rows = [
            ("kd_loss (nats)", kd),
            ("perplexity", format!("{:.4}", self.perplexity)),
            ("params", self.cost.param_count.to_string()),
            ("flops/token", self.cost.flops_per_token.to_string()),
            ("rmsnorms/token", self.cost.norm_count.to_string()),
            (
                "relative speed",
                format!("{:.3}x", self.cost.relative_speed),
            ),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<16} {v:>14}");
        }
        out
    }
}
