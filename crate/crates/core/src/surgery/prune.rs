use crate::error::{Error, Result};
use crate::model::{NormSite, WeightStore};

/// Indices of the `k` largest scores, sorted ascending. Ties go to the lower
/// index.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Plan(format!(
            "cannot keep {k} of {} components",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort: equal scores keep ascending index order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

fn check_index_set(idx: &[usize], len: usize, what: &str) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Plan(format!("{what}: empty index set")));
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Plan(format!(
            "{what}: indices must be strictly increasing"
        )));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
        return Err(Error::Plan(format!(
            "{what}: index {bad} out of range for {len}"
        )));
    }
    Ok(())
}

/// Restricts the hidden dimension to `keep`: embedding columns, output-head
/// rows, every γ, the input rows of the Q/K/V/gate/up projections and the
/// output columns of `wo` and `w_down`. γ is not rescaled here.
pub fn prune_channels(w: &WeightStore, keep: &[usize]) -> Result<WeightStore> {
    check_index_set(keep, w.config.hidden, "keep_channels")?;
    let mut out = w.clone();
    out.config.hidden = keep.len();
    out.embedding = w.embedding.select_cols(keep);
    out.output_head = w.output_head.select_rows(keep);
    for site in w.norm_sites() {
        let g = out.gamma_mut(site).expect("listed site");
        *g = keep.iter().map(|&k| g[k]).collect();
    }
    for lw in &mut out.layers {
        lw.wq = lw.wq.select_rows(keep);
        lw.wk = lw.wk.select_rows(keep);
        lw.wv = lw.wv.select_rows(keep);
        lw.w_gate = lw.w_gate.select_rows(keep);
        lw.w_up = lw.w_up.select_rows(keep);
        lw.wo = lw.wo.select_cols(keep);
        lw.w_down = lw.w_down.select_cols(keep);
    }
    out.validate()?;
    Ok(out)
}

fn head_columns(heads: &[usize], head_dim: usize) -> Vec<usize> {
    heads
        .iter()
        .flat_map(|&h| h * head_dim..(h + 1) * head_dim)
        .collect()
}

/// Keeps, inside every KV group, the `q` highest-scoring query heads of one
/// layer. Returns the kept head indices (ascending). K/V projections are not
/// touched.
pub(crate) fn prune_layer_heads(
    w: &mut WeightStore,
    l: usize,
    scores: &[f64],
    q: usize,
) -> Result<Vec<usize>> {
    let lc = w.config.layers[l];
    let per_group = lc.heads_per_group();
    if scores.len() != lc.query_heads {
        return Err(Error::shape(format!(
            "layer {l}: {} head scores for {} heads",
            scores.len(),
            lc.query_heads
        )));
    }
    if q == 0 || q > per_group {
        return Err(Error::Plan(format!(
            "layer {l}: cannot keep {q} heads per group of {per_group}"
        )));
    }
    let mut kept = Vec::with_capacity(q * lc.kv_groups);
    for g in 0..lc.kv_groups {
        let base = g * per_group;
        let local = select_top_k(&scores[base..base + per_group], q)?;
        kept.extend(local.into_iter().map(|h| base + h));
    }
    let cols = head_columns(&kept, w.config.head_dim);
    let lw = &mut w.layers[l];
    lw.wq = lw.wq.select_cols(&cols);
    lw.wo = lw.wo.select_rows(&cols);
    w.config.layers[l].query_heads = kept.len();
    Ok(kept)
}

/// Head pruning over every layer; also returns the kept heads per layer.
pub(crate) fn prune_heads_tracked(
    w: &WeightStore,
    head_scores: &[Vec<f64>],
    q: usize,
) -> Result<(WeightStore, Vec<Vec<usize>>)> {
    if head_scores.len() != w.layers.len() {
        return Err(Error::shape(format!(
            "{} head-score layers for {} model layers",
            head_scores.len(),
            w.layers.len()
        )));
    }
    let mut out = w.clone();
    let kept = head_scores
        .iter()
        .enumerate()
        .map(|(l, s)| prune_layer_heads(&mut out, l, s, q))
        .collect::<Result<Vec<_>>>()?;
    out.validate()?;
    Ok((out, kept))
}

/// Keeps the `q` best query heads inside each KV group of every layer.
pub fn prune_heads(w: &WeightStore, head_scores: &[Vec<f64>], q: usize) -> Result<WeightStore> {
    prune_heads_tracked(w, head_scores, q).map(|(w, _)| w)
}

/// Keeps the `keep_counts[l]` highest-scoring FFN neurons of each layer.
pub fn prune_ffn(
    w: &WeightStore,
    ffn_scores: &[Vec<f64>],
    keep_counts: &[usize],
) -> Result<WeightStore> {
    if ffn_scores.len() != w.layers.len() || keep_counts.len() != w.layers.len() {
        return Err(Error::shape(
            "FFN scores and budgets must cover every layer",
        ));
    }
    let mut out = w.clone();
    for (l, (scores, &count)) in ffn_scores.iter().zip(keep_counts).enumerate() {
        let width = w.config.layers[l].ffn_dim;
        if scores.len() != width {
            return Err(Error::shape(format!(
                "layer {l}: {} FFN scores for width {width}",
                scores.len()
            )));
        }
        let keep = select_top_k(scores, count).map_err(|_| {
            Error::Plan(format!(
                "layer {l}: cannot keep {count} of {width} FFN neurons"
            ))
        })?;
        let lw = &mut out.layers[l];
        lw.w_gate = lw.w_gate.select_cols(&keep);
        lw.w_up = lw.w_up.select_cols(&keep);
        lw.w_down = lw.w_down.select_rows(&keep);
        out.config.layers[l].ffn_dim = keep.len();
    }
    out.validate()?;
    Ok(out)
}

/// Removes the listed layers; the rest keep their order.
pub fn drop_layers(w: &WeightStore, layer_ids: &[usize]) -> Result<WeightStore> {
    let n = w.layers.len();
    if let Some(&bad) = layer_ids.iter().find(|&&l| l >= n) {
        return Err(Error::Plan(format!("cannot drop layer {bad} of {n}")));
    }
    let keep: Vec<usize> = (0..n).filter(|l| !layer_ids.contains(l)).collect();
    if keep.is_empty() {
        return Err(Error::Plan("dropping every layer".into()));
    }
    Ok(select_layers(w, &keep))
}

/// New store holding only the listed layers, in the given order.
pub(crate) fn select_layers(w: &WeightStore, keep: &[usize]) -> WeightStore {
    let mut out = w.clone();
    out.layers = keep.iter().map(|&l| w.layers[l].clone()).collect();
    out.config.layers = keep.iter().map(|&l| w.config.layers[l]).collect();
    out
}

/// The norm of the original model that a norm of a reduced model came from.
pub(crate) fn origin_site(site: NormSite, origin: &[usize]) -> NormSite {
    match site {
        NormSite::PreAttn(l) => NormSite::PreAttn(origin[l]),
        NormSite::PostAttn(l) => NormSite::PostAttn(origin[l]),
        NormSite::PreFfn(l) => NormSite::PreFfn(origin[l]),
        NormSite::PostFfn(l) => NormSite::PostFfn(origin[l]),
        NormSite::Final => NormSite::Final,
    }
}
