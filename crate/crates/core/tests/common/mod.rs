//! Straight-line reference implementations used as test oracles.
#![allow(dead_code)]

use pgl_core::kernel::Tensor;
use pgl_core::model::{forward, ForwardTrace, WeightStore};

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

pub fn assert_all_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        assert!(rel_close(x, y, tol), "{what}[{i}]: {x} vs {y}");
    }
}

fn col(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.get(r, c) as f64).collect()
}

fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols())
        .map(|c| x.iter().zip(col(m, c)).map(|(a, b)| a * b).sum())
        .collect()
}

fn norm(x: &[f64], gamma: &[f32], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + eps).sqrt();
    x.iter()
        .zip(gamma)
        .map(|(v, &g)| g as f64 * v / r)
        .collect()
}

fn rotate(v: &mut [f64], heads: usize, dh: usize, pos: usize) {
    for h in 0..heads {
        for i in 0..dh / 2 {
            let theta = pos as f64 * 10000f64.powf(-2.0 * i as f64 / dh as f64);
            let (a, b) = (v[h * dh + 2 * i], v[h * dh + 2 * i + 1]);
            v[h * dh + 2 * i] = a * theta.cos() - b * theta.sin();
            v[h * dh + 2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Logits computed token by token in f64.
pub fn reference_logits(w: &WeightStore, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &w.config;
    let eps = cfg.eps as f64;
    let dh = cfg.head_dim;
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            w.embedding
                .row(t as usize)
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    for (lw, lc) in w.layers.iter().zip(&cfg.layers) {
        let nh = lc.query_heads;
        let ng = lc.kv_groups;
        let hn: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| norm(x, &lw.pre_attn_gamma, eps))
            .collect();
        let qs: Vec<Vec<f64>> = hn
            .iter()
            .enumerate()
            .map(|(p, h)| {
                let mut q = vec_mat(h, &lw.wq);
                rotate(&mut q, nh, dh, p);
                q
            })
            .collect();
        let ks: Vec<Vec<f64>> = hn
            .iter()
            .enumerate()
            .map(|(p, h)| {
                let mut k = vec_mat(h, &lw.wk);
                rotate(&mut k, ng, dh, p);
                k
            })
            .collect();
        let vs: Vec<Vec<f64>> = hn.iter().map(|h| vec_mat(h, &lw.wv)).collect();
        let mut mids = Vec::new();
        for i in 0..xs.len() {
            let mut heads = vec![0.0; nh * dh];
            for j in 0..nh {
                let g = j / (nh / ng);
                let scores: Vec<f64> = (0..=i)
                    .map(|t| {
                        (0..dh)
                            .map(|e| qs[i][j * dh + e] * ks[t][g * dh + e])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for t in 0..=i {
                    let p = (scores[t] - m).exp() / z;
                    for e in 0..dh {
                        heads[j * dh + e] += p * vs[t][g * dh + e];
                    }
                }
            }
            let a = vec_mat(&heads, &lw.wo);
            let a = match &lw.post_attn_gamma {
                Some(g) => norm(&a, g, eps),
                None => a,
            };
            mids.push(add(&xs[i], &a));
        }
        xs = mids
            .iter()
            .map(|m| {
                let h = norm(m, &lw.pre_ffn_gamma, eps);
                let gate = vec_mat(&h, &lw.w_gate);
                let up = vec_mat(&h, &lw.w_up);
                let inter: Vec<f64> = gate
                    .iter()
                    .zip(&up)
                    .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                    .collect();
                let f = vec_mat(&inter, &lw.w_down);
                let f = match &lw.post_ffn_gamma {
                    Some(g) => norm(&f, g, eps),
                    None => f,
                };
                add(m, &f)
            })
            .collect();
    }
    xs.iter()
        .map(|x| vec_mat(&norm(x, &w.final_gamma, eps), &w.output_head))
        .collect()
}

/// Every calibration multiset, materialized token by token.
pub struct Multisets {
    pub hidden: usize,
    pub head_dim: usize,
    pub eps: f64,
    /// Per norm site (in `WeightStore::norm_sites` order), every token's output.
    pub norm_outputs: Vec<Vec<Vec<f32>>>,
    /// Per layer, every token's concatenated head outputs.
    pub heads: Vec<Vec<Vec<f32>>>,
    pub ffn_hidden: Vec<Vec<Vec<f32>>>,
    pub block_io: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
    pub attn_out: Vec<Vec<Vec<f32>>>,
    pub ffn_out: Vec<Vec<Vec<f32>>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

impl Multisets {
    pub fn gather(w: &WeightStore, sequences: &[Vec<u32>]) -> Self {
        let l = w.layers.len();
        let sites = w.norm_sites().len();
        let mut m = Multisets {
            hidden: w.config.hidden,
            head_dim: w.config.head_dim,
            eps: w.config.eps as f64,
            norm_outputs: vec![Vec::new(); sites],
            heads: vec![Vec::new(); l],
            ffn_hidden: vec![Vec::new(); l],
            block_io: vec![Vec::new(); l],
            attn_out: vec![Vec::new(); l],
            ffn_out: vec![Vec::new(); l],
        };
        for seq in sequences {
            let (_, trace) = forward(w, seq, true).unwrap();
            let trace: ForwardTrace = trace.unwrap();
            let mut site = 0;
            for (i, lt) in trace.layers.iter().enumerate() {
                let mut push = |t: &Tensor| {
                    m.norm_outputs[site].extend(rows(t));
                    site += 1;
                };
                push(&lt.pre_attn_norm);
                if let Some(t) = &lt.post_attn_norm {
                    push(t);
                }
                push(&lt.pre_ffn_norm);
                if let Some(t) = &lt.post_ffn_norm {
                    push(t);
                }
                m.heads[i].extend(rows(&lt.head_outputs));
                m.ffn_hidden[i].extend(rows(&lt.ffn_hidden));
                m.block_io[i].extend(rows(&lt.input).into_iter().zip(rows(&lt.output)));
                m.attn_out[i].extend(rows(&lt.attn_out));
                m.ffn_out[i].extend(rows(&lt.ffn_out));
            }
            m.norm_outputs[site].extend(rows(&trace.final_norm));
        }
        m
    }

    pub fn channel_scores(&self) -> Vec<f64> {
        (0..self.hidden)
            .map(|k| {
                self.norm_outputs
                    .iter()
                    .flatten()
                    .map(|tok| tok[k].abs() as f64)
                    .sum()
            })
            .collect()
    }

    pub fn head_scores(&self) -> Vec<Vec<f64>> {
        let dh = self.head_dim;
        self.heads
            .iter()
            .map(|toks| {
                let nh = toks[0].len() / dh;
                (0..nh)
                    .map(|j| {
                        toks.iter()
                            .map(|t| {
                                t[j * dh..(j + 1) * dh]
                                    .iter()
                                    .map(|&v| (v as f64).powi(2))
                                    .sum::<f64>()
                                    .sqrt()
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn ffn_scores(&self) -> Vec<Vec<f64>> {
        self.ffn_hidden
            .iter()
            .map(|toks| {
                (0..toks[0].len())
                    .map(|m| toks.iter().map(|t| t[m].abs() as f64).sum())
                    .collect()
            })
            .collect()
    }

    pub fn layer_scores(&self) -> Vec<f64> {
        self.block_io
            .iter()
            .map(|pairs| {
                let sum: f64 = pairs.iter().map(|(x, y)| cosine(x, y)).sum();
                1.0 - sum / pairs.len() as f64
            })
            .collect()
    }

    /// Mean of `1 / sqrt(‖x‖²/d + ε)` over a module-output multiset.
    pub fn mean_inv_rms(&self, toks: &[Vec<f32>]) -> f64 {
        let d = self.hidden as f64;
        toks.iter()
            .map(|t| {
                let sq: f64 = t.iter().map(|&v| (v as f64).powi(2)).sum();
                1.0 / (sq / d + self.eps).sqrt()
            })
            .sum::<f64>()
            / toks.len() as f64
    }
}

pub fn cosine(x: &[f32], y: &[f32]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nx = x.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let ny = y.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    if nx == 0.0 && ny == 0.0 {
        1.0
    } else if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx * ny)
    }
}

/// Mean next-token NLL computed from reference logits.
pub fn reference_nll(w: &WeightStore, sequences: &[Vec<u32>]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for seq in sequences {
        let lg = reference_logits(w, seq);
        for i in 0..seq.len() - 1 {
            let row = &lg[i];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[seq[i + 1] as usize];
            count += 1;
        }
    }
    total / count as f64
}

/// One block whose attention maps every single-token (or repeated-token)
/// input `x` with unit RMS to `x + x·wo`; FFN output is zero. Embedding
/// rows are ±1 so every token has RMS exactly 1.
pub fn linear_block_model(wo: &Tensor, seed: u64) -> WeightStore {
    use pgl_core::model::{random_init, ModelConfig};
    let d = wo.cols();
    let cfg = ModelConfig::uniform(1, d, 2, 2, d / 2, 4, 16, 1e-12);
    let mut w = random_init(&cfg, seed);
    for v in w.embedding.data_mut() {
        *v = if *v >= 0.0 { 1.0 } else { -1.0 };
    }
    let lw = &mut w.layers[0];
    lw.post_attn_gamma = None;
    lw.post_ffn_gamma = None;
    lw.wv = Tensor::identity(d);
    lw.wo = wo.clone();
    lw.w_down.data_mut().fill(0.0);
    w.config.layers[0].attn_post_norm = false;
    w.config.layers[0].ffn_post_norm = false;
    w
}

/// `-3·I`: the block sends `x` to `-2x`.
pub fn negation_wo(d: usize) -> Tensor {
    let mut t = Tensor::zeros(d, d);
    for i in 0..d {
        t.set(i, i, -3.0);
    }
    t
}

/// `R - I` with `R` a quarter turn in each channel pair: the block sends
/// `x` to `x·R`, orthogonal to `x`.
pub fn rotation_wo(d: usize) -> Tensor {
    let mut t = Tensor::zeros(d, d);
    for p in 0..d / 2 {
        let (a, b) = (2 * p, 2 * p + 1);
        t.set(a, a, -1.0);
        t.set(b, b, -1.0);
        t.set(a, b, 1.0);
        t.set(b, a, -1.0);
    }
    t
}

/// Random orthogonal matrix via Gram-Schmidt in f64.
pub fn orthogonal(n: usize, seed: u64) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-6 {
            basis.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    let rows: Vec<Vec<f32>> = basis
        .iter()
        .map(|r| r.iter().map(|&x| x as f32).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Sandwich model whose attention post-norm inputs all share one L2 norm
/// on single-token sequences: one head per KV group, `wv = I`, orthogonal
/// `wo`, and an all-zero FFN output.
pub fn constant_norm_model(seed: u64) -> WeightStore {
    use pgl_core::model::{random_init, ModelConfig};
    let cfg = ModelConfig::uniform(2, 16, 4, 4, 4, 24, 48, 1e-6);
    let mut w = random_init(&cfg, seed);
    for (l, lw) in w.layers.iter_mut().enumerate() {
        lw.wv = Tensor::identity(16);
        lw.wo = orthogonal(16, seed * 31 + l as u64);
        lw.w_down.data_mut().fill(0.0);
        // Non-trivial post-norm γ so absorption has something to fold.
        for (i, g) in lw.post_attn_gamma.as_mut().unwrap().iter_mut().enumerate() {
            *g = 0.5 + 0.1 * ((i as u64 + seed + l as u64) % 7) as f32;
        }
    }
    w
}

/// Independent per-group top-q head pruning followed by a joint top-G'
/// ranking, ties to the earlier candidate. Returns `(layer, group, heads)`
/// in candidate order.
pub fn brute_force_clap_selection(
    head_scores: &[Vec<f64>],
    layers: &[usize],
    groups: usize,
    per_group: usize,
    q: usize,
    g_prime: usize,
) -> Vec<(usize, usize, Vec<usize>)> {
    let mut cands = Vec::new();
    for &l in layers {
        for g in 0..groups {
            let mut heads: Vec<usize> = (g * per_group..(g + 1) * per_group).collect();
            heads.sort_by(|&a, &b| {
                head_scores[l][b]
                    .partial_cmp(&head_scores[l][a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            heads.truncate(q);
            heads.sort();
            let score = heads.iter().map(|&h| head_scores[l][h]).sum::<f64>() / q as f64;
            cands.push((l, g, heads, score));
        }
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].3.partial_cmp(&cands[a].3).unwrap().then(a.cmp(&b)));
    let mut picked: Vec<usize> = order[..g_prime].to_vec();
    picked.sort();
    picked
        .into_iter()
        .map(|i| (cands[i].0, cands[i].1, cands[i].2.clone()))
        .collect()
}
