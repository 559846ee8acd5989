//! Checkpoint surgery: channel, head, FFN and layer pruning, cross-layer
//! KV-group merging, and γ rescaling after channel pruning.

mod clap;
mod plan;
mod prune;
mod slnp;

use serde::{Deserialize, Serialize};

pub use clap::{clap_merge, ClapDecision, ClapOutcome, GroupCandidate};
pub use plan::{plan_from_targets, LayerAction, PlanSource, PlanTargets, PrunePlan, Removal};
pub use prune::{drop_layers, prune_channels, prune_ffn, prune_heads, select_top_k};
pub use slnp::{slnp_rescale, SlnpScale};

use crate::calibrate::ActivationStats;
use crate::error::{Error, Result};
use crate::importance::score_all;
use crate::model::{ModelConfig, NormSite, WeightStore};

/// Mean and population standard deviation of one norm's γ, over the retained
/// channels, before and after surgery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    /// Norm in the pruned model.
    pub norm: NormSite,
    /// The same norm in the original model.
    pub origin: NormSite,
    pub before_mean: f64,
    pub before_std: f64,
    pub after_mean: f64,
    pub after_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub final_config: ModelConfig,
    /// Original index of every layer of the pruned model.
    pub layer_origin: Vec<usize>,
    /// Query heads kept in each original layer by per-group head pruning.
    pub kept_heads: Vec<Vec<usize>>,
    pub clap: Vec<ClapDecision>,
    pub slnp: Vec<SlnpScale>,
    pub gamma_stats: Vec<GammaStats>,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f32]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Switches for ablating the re-initialization steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryOptions {
    /// Rescale γ after channel pruning.
    pub slnp: bool,
}

impl Default for SurgeryOptions {
    fn default() -> Self {
        Self { slnp: true }
    }
}

/// Applies a plan in a fixed order: head pruning, KV-group merging, plain
/// layer drops, FFN pruning, channel pruning, then γ rescaling.
pub fn apply_plan(
    w: &WeightStore,
    stats: &ActivationStats,
    plan: &PrunePlan,
) -> Result<(WeightStore, SurgeryReport)> {
    apply_plan_with(w, stats, plan, SurgeryOptions::default())
}

/// [`apply_plan`] with optional steps switched off.
pub fn apply_plan_with(
    w: &WeightStore,
    stats: &ActivationStats,
    plan: &PrunePlan,
    options: SurgeryOptions,
) -> Result<(WeightStore, SurgeryReport)> {
    plan.validate(&w.config)?;
    if stats.layers.len() != w.layers.len() || stats.hidden != w.config.hidden {
        return Err(Error::shape(
            "activation statistics were collected on a different model",
        ));
    }
    let scores = score_all(stats)?;

    let (headed, kept_heads) = prune::prune_heads_tracked(w, &scores.head, plan.heads_per_group)?;
    let surviving: Vec<Vec<f64>> = kept_heads
        .iter()
        .enumerate()
        .map(|(l, hs)| hs.iter().map(|&h| scores.head[l][h]).collect())
        .collect();

    let (merged, mut origin, mut clap) = if plan.has_merges() {
        let (m, outcome) = clap_merge(&headed, &surviving, plan)?;
        (m, outcome.origin, outcome.decisions)
    } else {
        (headed, (0..w.layers.len()).collect(), Vec::new())
    };
    // Report transferred heads by their index in the original layer.
    for decision in &mut clap {
        for c in &mut decision.candidates {
            c.heads = c
                .heads
                .iter()
                .map(|&h| kept_heads[c.origin_layer][h])
                .collect();
        }
    }

    let drops: Vec<usize> = origin
        .iter()
        .enumerate()
        .filter(|(_, &o)| plan.layer_action[o] == LayerAction::Drop)
        .map(|(i, _)| i)
        .collect();
    let dropped = drop_layers(&merged, &drops)?;
    origin.retain(|&o| plan.layer_action[o] != LayerAction::Drop);

    let ffn_scores: Vec<Vec<f64>> = origin.iter().map(|&o| scores.ffn[o].clone()).collect();
    let ffn_counts: Vec<usize> = origin.iter().map(|&o| plan.keep_ffn[o]).collect();
    let before_channels = prune_ffn(&dropped, &ffn_scores, &ffn_counts)?;

    let channel_pruned = prune_channels(&before_channels, &plan.keep_channels)?;
    let (out, slnp) = if options.slnp {
        slnp_rescale(&before_channels, &channel_pruned)?
    } else {
        (channel_pruned, Vec::new())
    };

    let gamma_stats = out
        .norm_sites()
        .into_iter()
        .map(|site| {
            let full = before_channels.gamma(site).expect("same sites");
            let retained: Vec<f32> = plan.keep_channels.iter().map(|&k| full[k]).collect();
            let (before_mean, before_std) = mean_std(&retained);
            let (after_mean, after_std) = mean_std(out.gamma(site).expect("listed site"));
            GammaStats {
                norm: site,
                origin: prune::origin_site(site, &origin),
                before_mean,
                before_std,
                after_mean,
                after_std,
            }
        })
        .collect();

    out.validate()?;
    let report = SurgeryReport {
        final_config: out.config.clone(),
        layer_origin: origin,
        kept_heads,
        clap,
        slnp,
        gamma_stats,
    };
    Ok((out, report))
}

/// Checks a surgery result against its report.
pub fn verify_report(w: &WeightStore, report: &SurgeryReport) -> Result<()> {
    w.validate()?;
    if w.config != report.final_config {
        return Err(Error::Shape(
            "checkpoint config differs from the surgery report".into(),
        ));
    }
    if report.layer_origin.len() != w.layers.len() {
        return Err(Error::Shape(
            "layer origin map does not cover every layer".into(),
        ));
    }
    if let Some(bad) = report
        .slnp
        .iter()
        .find(|s| !(s.scale > 0.0 && s.scale.is_finite()))
    {
        return Err(Error::Numeric(format!(
            "{}: rescale factor {} not positive",
            bad.norm, bad.scale
        )));
    }
    Ok(())
}
