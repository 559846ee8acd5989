//! Cross-layer KV-group merging.
//!
//! A layer marked for merging is not simply deleted: its KV groups compete
//! with those of the nearest preceding kept layer (the recipient), and the
//! best `G'` groups overall form the recipient's new attention module. Each
//! transferred group carries its K/V columns plus the Q columns and `wo` rows
//! of its surviving query heads, copied verbatim. Rotary encoding does not
//! depend on the layer, so transferred heads need no positional adjustment.

use serde::{Deserialize, Serialize};

use super::plan::{LayerAction, PrunePlan};
use super::prune::{prune_layer_heads, select_layers};
use crate::error::{Error, Result};
use crate::importance::kv_group_scores;
use crate::kernel::Tensor;
use crate::model::WeightStore;

/// One KV group competing for a slot in the merged layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCandidate {
    /// Layer index (in the model passed to the merge) the group comes from.
    pub origin_layer: usize,
    pub group: usize,
    /// Surviving query heads of the group, as indices into the origin
    /// layer's heads before the merge's own head pruning.
    pub heads: Vec<usize>,
    /// Mean score of the surviving heads.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClapDecision {
    pub recipient: usize,
    pub donors: Vec<usize>,
    /// Recipient groups first, then each donor's, in group order.
    pub candidates: Vec<GroupCandidate>,
    /// Indices into `candidates`, in the order the groups appear in the
    /// merged layer.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClapOutcome {
    pub decisions: Vec<ClapDecision>,
    /// For each layer of the merged model, its index in the input model.
    pub origin: Vec<usize>,
}

/// Recipient of each merge-marked layer: the nearest preceding kept layer.
pub(crate) fn merge_groups(actions: &[LayerAction]) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut last_kept: Option<usize> = None;
    for (l, action) in actions.iter().enumerate() {
        match action {
            LayerAction::Keep => last_kept = Some(l),
            LayerAction::Drop => {}
            LayerAction::Merge => {
                let r = last_kept.ok_or_else(|| {
                    Error::Plan(format!("layer {l} is merged but no kept layer precedes it"))
                })?;
                match groups.last_mut() {
                    Some((rr, donors)) if *rr == r => donors.push(l),
                    _ => groups.push((r, vec![l])),
                }
            }
        }
    }
    Ok(groups)
}

/// Indices of the `k` best candidates, ties to the earlier candidate,
/// returned in candidate order.
pub(crate) fn rank_groups(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Plan(format!(
            "cannot select {k} KV groups from {} candidates",
            scores.len()
        )));
    }
    super::prune::select_top_k(scores, k)
}

/// Merges every run of merge-marked layers into its recipient.
///
/// `head_scores[l]` scores the query heads of layer `l` of `w`. Recipient and
/// donors first go through per-group head pruning to `plan.heads_per_group`
/// heads (a no-op when they already have that many). Layers marked `drop`
/// are left in place; donors are removed.
pub fn clap_merge(
    w: &WeightStore,
    head_scores: &[Vec<f64>],
    plan: &PrunePlan,
) -> Result<(WeightStore, ClapOutcome)> {
    let n = w.layers.len();
    if plan.layer_action.len() != n {
        return Err(Error::Plan(format!(
            "{} layer actions for {n} layers",
            plan.layer_action.len()
        )));
    }
    if head_scores.len() != n {
        return Err(Error::shape(format!(
            "{} head-score layers for {n} layers",
            head_scores.len()
        )));
    }
    let runs = merge_groups(&plan.layer_action)?;
    if runs.is_empty() {
        return Err(Error::Plan("no layer is marked for merging".into()));
    }
    let q = plan.heads_per_group;
    let dh = w.config.head_dim;
    let mut work = w.clone();
    let mut decisions = Vec::with_capacity(runs.len());

    for (recipient, donors) in runs {
        let mut candidates = Vec::new();
        for &layer in std::iter::once(&recipient).chain(&donors) {
            let scores = &head_scores[layer];
            let kept = prune_layer_heads(&mut work, layer, scores, q)?;
            let groups = work.config.layers[layer].kv_groups;
            let per_group: Vec<Vec<f64>> = kept
                .chunks(q)
                .map(|hs| hs.iter().map(|&h| scores[h]).collect())
                .collect();
            debug_assert_eq!(per_group.len(), groups);
            let group_scores = kv_group_scores(&per_group)?;
            for (g, score) in group_scores.into_iter().enumerate() {
                candidates.push(GroupCandidate {
                    origin_layer: layer,
                    group: g,
                    heads: kept[g * q..(g + 1) * q].to_vec(),
                    score,
                });
            }
        }
        let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
        let selected = rank_groups(&scores, plan.groups_per_layer)?;

        // Assemble the merged attention module group by group.
        let d = work.config.hidden;
        let g_new = selected.len();
        let mut wq = Tensor::zeros(d, g_new * q * dh);
        let mut wk = Tensor::zeros(d, g_new * dh);
        let mut wv = Tensor::zeros(d, g_new * dh);
        let mut wo = Tensor::zeros(g_new * q * dh, d);
        for (slot, &ci) in selected.iter().enumerate() {
            let c = &candidates[ci];
            let src = &work.layers[c.origin_layer];
            for r in 0..d {
                let kv_src = c.group * dh..(c.group + 1) * dh;
                let kv_dst = slot * dh;
                wk.row_mut(r)[kv_dst..kv_dst + dh].copy_from_slice(&src.wk.row(r)[kv_src.clone()]);
                wv.row_mut(r)[kv_dst..kv_dst + dh].copy_from_slice(&src.wv.row(r)[kv_src]);
                for i in 0..q {
                    let h_src = (c.group * q + i) * dh;
                    let h_dst = (slot * q + i) * dh;
                    wq.row_mut(r)[h_dst..h_dst + dh]
                        .copy_from_slice(&src.wq.row(r)[h_src..h_src + dh]);
                }
            }
            for i in 0..q {
                let h_src = (c.group * q + i) * dh;
                let h_dst = (slot * q + i) * dh;
                for k in 0..dh {
                    wo.row_mut(h_dst + k).copy_from_slice(src.wo.row(h_src + k));
                }
            }
        }
        let rl = &mut work.layers[recipient];
        rl.wq = wq;
        rl.wk = wk;
        rl.wv = wv;
        rl.wo = wo;
        let rc = &mut work.config.layers[recipient];
        rc.kv_groups = g_new;
        rc.query_heads = g_new * q;

        decisions.push(ClapDecision {
            recipient,
            donors,
            candidates,
            selected,
        });
    }

    let origin: Vec<usize> = (0..n)
        .filter(|&l| plan.layer_action[l] != LayerAction::Merge)
        .collect();
    let merged = select_layers(&work, &origin);
    merged.validate()?;
    Ok((merged, ClapOutcome { decisions, origin }))
}
