use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prune::select_top_k;
use crate::error::{Error, Result};
use crate::importance::ImportanceScores;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerAction {
    Keep,
    Drop,
    /// Fold the layer's best KV groups into the nearest preceding kept layer.
    Merge,
}

/// Declarative target architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Hidden channels to retain, strictly increasing.
    pub keep_channels: Vec<usize>,
    /// Query heads kept inside each KV group.
    pub heads_per_group: usize,
    /// KV groups of a layer that absorbed merged layers.
    pub groups_per_layer: usize,
    /// FFN width per original layer (ignored for removed layers).
    pub keep_ffn: Vec<usize>,
    pub layer_action: Vec<LayerAction>,
}

impl PrunePlan {
    /// Keeps everything.
    pub fn identity(config: &ModelConfig) -> Self {
        Self {
            keep_channels: (0..config.hidden).collect(),
            heads_per_group: config
                .layers
                .iter()
                .map(|l| l.heads_per_group())
                .min()
                .unwrap_or(1),
            groups_per_layer: config.layers.iter().map(|l| l.kv_groups).max().unwrap_or(1),
            keep_ffn: config.layers.iter().map(|l| l.ffn_dim).collect(),
            layer_action: vec![LayerAction::Keep; config.num_layers()],
        }
    }

    pub fn has_merges(&self) -> bool {
        self.layer_action.contains(&LayerAction::Merge)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = config.num_layers();
        let d = config.hidden;
        let ch = &self.keep_channels;
        if ch.is_empty() {
            return Err(Error::Plan("keep_channels is empty".into()));
        }
        if ch.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Plan(
                "keep_channels must be strictly increasing".into(),
            ));
        }
        if ch[ch.len() - 1] >= d {
            return Err(Error::Plan(format!(
                "keep_channels index {} >= d = {d}",
                ch[ch.len() - 1]
            )));
        }
        if self.layer_action.len() != n || self.keep_ffn.len() != n {
            return Err(Error::Plan(format!(
                "layer_action ({}) and keep_ffn ({}) must both have {n} entries",
                self.layer_action.len(),
                self.keep_ffn.len()
            )));
        }
        if self.layer_action.first() == Some(&LayerAction::Merge) {
            return Err(Error::Plan(
                "layer 0 cannot be merged into a predecessor".into(),
            ));
        }
        if !self.layer_action.contains(&LayerAction::Keep) {
            return Err(Error::Plan("plan keeps no layer".into()));
        }
        for (l, lc) in config.layers.iter().enumerate() {
            if self.heads_per_group == 0 || self.heads_per_group > lc.heads_per_group() {
                return Err(Error::Plan(format!(
                    "layer {l}: heads_per_group {} outside 1..={}",
                    self.heads_per_group,
                    lc.heads_per_group()
                )));
            }
            let ffn = self.keep_ffn[l];
            if self.layer_action[l] == LayerAction::Keep && (ffn == 0 || ffn > lc.ffn_dim) {
                return Err(Error::Plan(format!(
                    "layer {l}: keep_ffn {ffn} outside 1..={}",
                    lc.ffn_dim
                )));
            }
        }
        if self.has_merges() {
            let max_groups = super::clap::merge_groups(&self.layer_action)?
                .iter()
                .map(|(r, _)| config.layers[*r].kv_groups)
                .min()
                .unwrap_or(0);
            if self.groups_per_layer == 0 || self.groups_per_layer > max_groups {
                return Err(Error::Plan(format!(
                    "groups_per_layer {} outside 1..={max_groups}",
                    self.groups_per_layer
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// How layers chosen for removal are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Removal {
    #[default]
    Merge,
    Drop,
}

/// Size targets from which a concrete plan is derived using importance
/// scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTargets {
    /// Hidden channels to keep.
    pub hidden: usize,
    pub heads_per_group: usize,
    /// KV groups of merged layers; defaults to the recipient's group count.
    #[serde(default)]
    pub groups_per_layer: Option<usize>,
    /// FFN width for every kept layer.
    pub ffn_dim: usize,
    /// Number of layers to remove, lowest block importance first.
    #[serde(default)]
    pub remove_layers: usize,
    #[serde(default)]
    pub removal: Removal,
}

/// Builds a concrete plan from targets and scores. Layer 0 is never a
/// removal candidate, so a merge always has a recipient.
pub fn plan_from_targets(
    config: &ModelConfig,
    scores: &ImportanceScores,
    targets: &PlanTargets,
) -> Result<PrunePlan> {
    let n = config.num_layers();
    let keep_channels = select_top_k(&scores.channel, targets.hidden)?;
    if targets.remove_layers >= n {
        return Err(Error::Plan(format!(
            "cannot remove {} of {n} layers",
            targets.remove_layers
        )));
    }
    let mut candidates: Vec<usize> = (1..n).collect();
    candidates.sort_by(|&a, &b| scores.layer[a].total_cmp(&scores.layer[b]));
    let action = match targets.removal {
        Removal::Merge => LayerAction::Merge,
        Removal::Drop => LayerAction::Drop,
    };
    let mut layer_action = vec![LayerAction::Keep; n];
    for &l in candidates.iter().take(targets.remove_layers) {
        layer_action[l] = action;
    }
    let groups_per_layer = targets
        .groups_per_layer
        .unwrap_or_else(|| config.layers.iter().map(|l| l.kv_groups).min().unwrap_or(1));
    let plan = PrunePlan {
        keep_channels,
        heads_per_group: targets.heads_per_group,
        groups_per_layer,
        keep_ffn: config
            .layers
            .iter()
            .map(|l| targets.ffn_dim.min(l.ffn_dim))
            .collect(),
        layer_action,
    };
    plan.validate(config)?;
    Ok(plan)
}

/// A plan file holds either a concrete plan or size targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanSource {
    Plan(PrunePlan),
    Targets(PlanTargets),
}

impl PlanSource {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn resolve(&self, config: &ModelConfig, scores: &ImportanceScores) -> Result<PrunePlan> {
        match self {
            PlanSource::Plan(p) => {
                p.validate(config)?;
                Ok(p.clone())
            }
            PlanSource::Targets(t) => plan_from_targets(config, scores, t),
        }
    }
}
