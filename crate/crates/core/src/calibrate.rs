//! Calibration: run the model over a token corpus and reduce every hook site
//! into streaming `f64` accumulators.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::model::{forward, ForwardTrace, ModelConfig, NormSite, WeightStore};

/// Sequences in the bundled calibration set.
pub const BUILTIN_SEQUENCES: usize = 32;
/// Tokens per bundled calibration sequence.
pub const BUILTIN_SEQ_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub provenance: String,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>, provenance: impl Into<String>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("calibration set has no sequences".into()));
        }
        if let Some(i) = sequences.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("calibration sequence {i} is empty")));
        }
        Ok(Self {
            sequences,
            provenance: provenance.into(),
        })
    }

    /// Uniform pseudo-random token ids from a fixed seed.
    pub fn random(vocab: usize, num_sequences: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || seq_len == 0 {
            return Err(Error::Input(
                "random calibration needs vocab and length >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences = (0..num_sequences)
            .map(|_| {
                (0..seq_len)
                    .map(|_| rng.random_range(0..vocab as u32))
                    .collect()
            })
            .collect();
        Self::new(
            sequences,
            format!("builtin: seed {seed}, {num_sequences} x {seq_len} tokens, vocab {vocab}"),
        )
    }

    /// The default set: 32 sequences of 64 tokens.
    pub fn builtin(vocab: usize, seed: u64) -> Result<Self> {
        Self::random(vocab, BUILTIN_SEQUENCES, BUILTIN_SEQ_LEN, seed)
    }

    /// Parses one sequence per line of whitespace-separated token ids.
    /// Blank lines are skipped.
    pub fn parse(text: &str, provenance: impl Into<String>) -> Result<Self> {
        let mut sequences = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let seq = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|_| {
                        Error::Input(format!("line {}: `{tok}` is not a token id", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(seq);
        }
        Self::new(sequences, provenance)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Accumulators for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// Σ |pre-attention norm output_k| per channel.
    pub pre_attn_abs: Vec<f64>,
    pub post_attn_abs: Option<Vec<f64>>,
    pub pre_ffn_abs: Vec<f64>,
    pub post_ffn_abs: Option<Vec<f64>>,
    /// Σ per-token L2 norm of each query head's output.
    pub head_l2_sum: Vec<f64>,
    /// Σ |intermediate_m| per FFN neuron.
    pub ffn_abs_sum: Vec<f64>,
    /// Σ cos(block input, block output).
    pub cosine_sim_sum: f64,
    /// Σ 1/sqrt(‖a‖²/d + ε) over attention module outputs.
    pub attn_inv_scale_sum: f64,
    /// Σ 1/sqrt(‖f‖²/d + ε) over FFN module outputs.
    pub ffn_inv_scale_sum: f64,
    pub token_count: u64,
}

/// Streaming reductions of every calibration multiset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub hidden: usize,
    pub head_dim: usize,
    pub eps: f32,
    pub layers: Vec<LayerStats>,
    /// Σ |final norm output_k| per channel.
    pub final_abs: Vec<f64>,
    pub token_count: u64,
}

fn add_abs(acc: &mut [f64], t: &Tensor) {
    for r in 0..t.rows() {
        for (a, &v) in acc.iter_mut().zip(t.row(r)) {
            *a += (v as f64).abs();
        }
    }
}

fn dot_norms(x: &[f32], y: &[f32]) -> (f64, f64, f64) {
    let (mut xy, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64, b as f64);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    (xy, xx.sqrt(), yy.sqrt())
}

/// Cosine similarity; two zero vectors count as identical, one zero vector
/// as orthogonal.
pub fn cosine(x: &[f32], y: &[f32]) -> f64 {
    let (xy, nx, ny) = dot_norms(x, y);
    match (nx == 0.0, ny == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => xy / (nx * ny),
    }
}

/// `1 / sqrt(‖x‖²/d + eps)`.
pub fn inv_rms(x: &[f32], eps: f64) -> f64 {
    let sq: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum();
    1.0 / (sq / x.len() as f64 + eps).sqrt()
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

fn add_vec(what: &str, a: &mut [f64], b: &[f64]) -> Result<()> {
    check_len(what, a.len(), b.len())?;
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    Ok(())
}

fn add_opt(what: &str, a: &mut Option<Vec<f64>>, b: &Option<Vec<f64>>) -> Result<()> {
    match (a, b) {
        (Some(a), Some(b)) => add_vec(what, a, b),
        (None, None) => Ok(()),
        _ => Err(Error::shape(format!("{what}: post-norm presence differs"))),
    }
}

impl ActivationStats {
    /// All-zero accumulators shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden;
        let layers = config
            .layers
            .iter()
            .map(|lc| LayerStats {
                pre_attn_abs: vec![0.0; d],
                post_attn_abs: lc.attn_post_norm.then(|| vec![0.0; d]),
                pre_ffn_abs: vec![0.0; d],
                post_ffn_abs: lc.ffn_post_norm.then(|| vec![0.0; d]),
                head_l2_sum: vec![0.0; lc.query_heads],
                ffn_abs_sum: vec![0.0; lc.ffn_dim],
                cosine_sim_sum: 0.0,
                attn_inv_scale_sum: 0.0,
                ffn_inv_scale_sum: 0.0,
                token_count: 0,
            })
            .collect();
        Self {
            hidden: d,
            head_dim: config.head_dim,
            eps: config.eps,
            layers,
            final_abs: vec![0.0; d],
            token_count: 0,
        }
    }

    /// Folds one sequence's trace into the accumulators, token by token.
    pub fn accumulate(&mut self, trace: &ForwardTrace) -> Result<()> {
        check_len(
            "trace layers vs stats layers",
            trace.layers.len(),
            self.layers.len(),
        )?;
        let eps = self.eps as f64;
        let dh = self.head_dim;
        let tokens = trace.final_norm.rows();
        for (ls, lt) in self.layers.iter_mut().zip(&trace.layers) {
            check_len("hidden size", lt.input.cols(), ls.pre_attn_abs.len())?;
            check_len(
                "head outputs",
                lt.head_outputs.cols(),
                ls.head_l2_sum.len() * dh,
            )?;
            check_len("ffn width", lt.ffn_hidden.cols(), ls.ffn_abs_sum.len())?;
            if ls.post_attn_abs.is_some() != lt.post_attn_norm.is_some()
                || ls.post_ffn_abs.is_some() != lt.post_ffn_norm.is_some()
            {
                return Err(Error::shape(
                    "post-norm presence differs between trace and stats",
                ));
            }
            add_abs(&mut ls.pre_attn_abs, &lt.pre_attn_norm);
            if let (Some(acc), Some(t)) = (&mut ls.post_attn_abs, &lt.post_attn_norm) {
                add_abs(acc, t);
            }
            add_abs(&mut ls.pre_ffn_abs, &lt.pre_ffn_norm);
            if let (Some(acc), Some(t)) = (&mut ls.post_ffn_abs, &lt.post_ffn_norm) {
                add_abs(acc, t);
            }
            add_abs(&mut ls.ffn_abs_sum, &lt.ffn_hidden);
            for s in 0..tokens {
                let heads = lt.head_outputs.row(s);
                for (j, acc) in ls.head_l2_sum.iter_mut().enumerate() {
                    let h = &heads[j * dh..(j + 1) * dh];
                    *acc += h
                        .iter()
                        .map(|&v| (v as f64) * (v as f64))
                        .sum::<f64>()
                        .sqrt();
                }
                ls.cosine_sim_sum += cosine(lt.input.row(s), lt.output.row(s));
                ls.attn_inv_scale_sum += inv_rms(lt.attn_out.row(s), eps);
                ls.ffn_inv_scale_sum += inv_rms(lt.ffn_out.row(s), eps);
            }
            ls.token_count += tokens as u64;
        }
        add_abs(&mut self.final_abs, &trace.final_norm);
        self.token_count += tokens as u64;
        Ok(())
    }

    /// Elementwise sum of two accumulator sets over the same model shape.
    pub fn merge(&self, other: &ActivationStats) -> Result<ActivationStats> {
        check_len("hidden", self.hidden, other.hidden)?;
        check_len("head_dim", self.head_dim, other.head_dim)?;
        check_len("layers", self.layers.len(), other.layers.len())?;
        if self.eps != other.eps {
            return Err(Error::shape("stats collected with different eps"));
        }
        let mut out = self.clone();
        for (a, b) in out.layers.iter_mut().zip(&other.layers) {
            add_vec("pre_attn_abs", &mut a.pre_attn_abs, &b.pre_attn_abs)?;
            add_opt("post_attn_abs", &mut a.post_attn_abs, &b.post_attn_abs)?;
            add_vec("pre_ffn_abs", &mut a.pre_ffn_abs, &b.pre_ffn_abs)?;
            add_opt("post_ffn_abs", &mut a.post_ffn_abs, &b.post_ffn_abs)?;
            add_vec("head_l2_sum", &mut a.head_l2_sum, &b.head_l2_sum)?;
            add_vec("ffn_abs_sum", &mut a.ffn_abs_sum, &b.ffn_abs_sum)?;
            a.cosine_sim_sum += b.cosine_sim_sum;
            a.attn_inv_scale_sum += b.attn_inv_scale_sum;
            a.ffn_inv_scale_sum += b.ffn_inv_scale_sum;
            a.token_count += b.token_count;
        }
        add_vec("final_abs", &mut out.final_abs, &other.final_abs)?;
        out.token_count += other.token_count;
        Ok(out)
    }

    /// Per-channel absolute-sum accumulator of one RMSNorm site.
    pub fn channel_abs(&self, site: NormSite) -> Option<&[f64]> {
        match site {
            NormSite::PreAttn(l) => self.layers.get(l).map(|s| s.pre_attn_abs.as_slice()),
            NormSite::PostAttn(l) => self.layers.get(l)?.post_attn_abs.as_deref(),
            NormSite::PreFfn(l) => self.layers.get(l).map(|s| s.pre_ffn_abs.as_slice()),
            NormSite::PostFfn(l) => self.layers.get(l)?.post_ffn_abs.as_deref(),
            NormSite::Final => Some(&self.final_abs),
        }
    }

    /// Every RMSNorm site with an accumulator, in forward order.
    pub fn norm_sites(&self) -> Vec<NormSite> {
        let mut out = Vec::new();
        for (l, s) in self.layers.iter().enumerate() {
            out.push(NormSite::PreAttn(l));
            if s.post_attn_abs.is_some() {
                out.push(NormSite::PostAttn(l));
            }
            out.push(NormSite::PreFfn(l));
            if s.post_ffn_abs.is_some() {
                out.push(NormSite::PostFfn(l));
            }
        }
        out.push(NormSite::Final);
        out
    }

    /// Checks the non-negativity and token-count invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Numeric(format!("stats: {what}")));
        for (l, s) in self.layers.iter().enumerate() {
            let vecs = [
                Some(&s.pre_attn_abs),
                s.post_attn_abs.as_ref(),
                Some(&s.pre_ffn_abs),
                s.post_ffn_abs.as_ref(),
                Some(&s.head_l2_sum),
                Some(&s.ffn_abs_sum),
            ];
            if vecs
                .into_iter()
                .flatten()
                .flatten()
                .any(|v| !(v.is_finite() && *v >= 0.0))
            {
                return bad(&format!("layer {l} has a negative or non-finite sum"));
            }
            if s.token_count != self.token_count {
                return bad(&format!(
                    "layer {l} token count {} != {}",
                    s.token_count, self.token_count
                ));
            }
            let n = s.token_count as f64;
            if s.cosine_sim_sum.is_nan() || s.cosine_sim_sum.abs() > n * (1.0 + 1e-9) {
                return bad(&format!("layer {l} cosine sum outside [-n, n]"));
            }
            if !(s.attn_inv_scale_sum >= 0.0 && s.ffn_inv_scale_sum >= 0.0) {
                return bad(&format!("layer {l} inverse-scale sum negative"));
            }
        }
        if self.final_abs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("final norm sum negative or non-finite");
        }
        Ok(())
    }
}

/// Runs every sequence in order and reduces its trace.
pub fn collect(store: &WeightStore, calib: &CalibrationSet) -> Result<ActivationStats> {
    collect_range(store, &calib.sequences, 0)
}

fn collect_range(
    store: &WeightStore,
    seqs: &[Vec<u32>],
    first_index: usize,
) -> Result<ActivationStats> {
    let mut stats = ActivationStats::zeros(&store.config);
    for (i, seq) in seqs.iter().enumerate() {
        let wrap = |e: Error| Error::Sequence {
            index: first_index + i,
            source: Box::new(e),
        };
        let (_, trace) = forward(store, seq, true).map_err(wrap)?;
        stats
            .accumulate(&trace.expect("trace requested"))
            .map_err(wrap)?;
    }
    Ok(stats)
}

/// Splits the sequences into `shards` contiguous chunks, collects each on
/// the rayon pool, and merges the partial results in shard order.
pub fn collect_sharded(
    store: &WeightStore,
    calib: &CalibrationSet,
    shards: usize,
) -> Result<ActivationStats> {
    let n = calib.sequences.len();
    let shards = shards.clamp(1, n);
    let chunk = n.div_ceil(shards);
    let partials: Vec<Result<ActivationStats>> = calib
        .sequences
        .par_chunks(chunk)
        .enumerate()
        .map(|(i, seqs)| collect_range(store, seqs, i * chunk))
        .collect();
    let mut acc = ActivationStats::zeros(&store.config);
    for p in partials {
        acc = acc.merge(&p?)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_init, ForwardTrace, LayerTrace};

    fn tensor(rows: &[Vec<f32>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// One-layer trace with hand-chosen activations.
    fn hand_trace(pre_attn: Tensor, heads: Tensor) -> ForwardTrace {
        let s = pre_attn.rows();
        let d = pre_attn.cols();
        let zeros = Tensor::zeros(s, d);
        ForwardTrace {
            layers: vec![LayerTrace {
                input: pre_attn.clone(),
                pre_attn_norm: pre_attn.clone(),
                head_outputs: heads,
                attn_out: zeros.clone(),
                post_attn_norm: None,
                pre_ffn_norm: zeros.clone(),
                ffn_hidden: Tensor::zeros(s, 1),
                ffn_out: zeros.clone(),
                post_ffn_norm: None,
                output: pre_attn,
            }],
            final_input: zeros.clone(),
            final_norm: zeros,
        }
    }

    fn hand_config(d: usize, heads: usize, head_dim: usize) -> ModelConfig {
        let mut c = ModelConfig::uniform(1, d, heads, 1, head_dim, 1, 4, 1e-6);
        c.layers[0].attn_post_norm = false;
        c.layers[0].ffn_post_norm = false;
        c
    }

    #[test]
    fn channel_abs_sum_hand_reduction() {
        let mut stats = ActivationStats::zeros(&hand_config(2, 1, 2));
        let trace = hand_trace(
            tensor(&[vec![1.0, -2.0], vec![3.0, 0.0]]),
            Tensor::zeros(2, 2),
        );
        stats.accumulate(&trace).unwrap();
        assert_eq!(stats.layers[0].pre_attn_abs, vec![4.0, 2.0]);
        assert_eq!(stats.token_count, 2);
    }

    #[test]
    fn head_l2_sum_hand_norm() {
        let mut stats = ActivationStats::zeros(&hand_config(1, 1, 4));
        let trace = hand_trace(tensor(&[vec![1.0]]), tensor(&[vec![3.0, 4.0, 0.0, 0.0]]));
        stats.accumulate(&trace).unwrap();
        assert_eq!(stats.layers[0].head_l2_sum, vec![5.0]);
    }

    #[test]
    fn zero_weight_model_has_zero_channel_sums_and_unit_cosine() {
        let mut store = random_init(&ModelConfig::toy(), 4);
        store.embedding.data_mut().fill(0.0);
        let calib = CalibrationSet::random(32, 3, 5, 0).unwrap();
        let stats = collect(&store, &calib).unwrap();
        for site in stats.norm_sites() {
            assert!(stats.channel_abs(site).unwrap().iter().all(|&v| v == 0.0));
        }
        for l in &stats.layers {
            assert_eq!(l.cosine_sim_sum, l.token_count as f64);
        }
    }

    #[test]
    fn merge_with_zero_is_identity_and_commutes() {
        let store = random_init(&ModelConfig::toy(), 4);
        let a = collect(&store, &CalibrationSet::random(32, 2, 6, 1).unwrap()).unwrap();
        let b = collect(&store, &CalibrationSet::random(32, 2, 6, 2).unwrap()).unwrap();
        assert_eq!(a.merge(&ActivationStats::zeros(&store.config)).unwrap(), a);
        let ab = a.merge(&b).unwrap();
        let ba = b.merge(&a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn merge_rejects_shape_mismatch() {
        let a = ActivationStats::zeros(&ModelConfig::toy());
        let b = ActivationStats::zeros(&ModelConfig::uniform(3, 8, 4, 2, 4, 16, 32, 1e-6));
        assert!(matches!(a.merge(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn collect_reports_sequence_index() {
        let store = random_init(&ModelConfig::toy(), 4);
        let calib = CalibrationSet::new(vec![vec![1, 2], vec![3, 99]], "bad").unwrap();
        match collect(&store, &calib) {
            Err(Error::Sequence { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_token_lines() {
        let c = CalibrationSet::parse("1 2 3\n\n4   5\n", "inline").unwrap();
        assert_eq!(c.sequences, vec![vec![1, 2, 3], vec![4, 5]]);
        assert_eq!(
            CalibrationSet::parse(&c.to_text(), "x").unwrap().sequences,
            c.sequences
        );
        assert!(CalibrationSet::parse("1 x", "bad").is_err());
        assert!(CalibrationSet::parse("\n", "empty").is_err());
    }

    #[test]
    fn inv_rms_examples() {
        assert!((inv_rms(&[1.0, -1.0], 0.0) - 1.0).abs() < 1e-15);
        assert!((inv_rms(&[3.0, 4.0], 0.0) - 1.0 / 12.5f64.sqrt()).abs() < 1e-12);
    }
}
