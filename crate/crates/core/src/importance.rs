//! Importance scores derived from calibration statistics.
//!
//! Scores are raw sums over calibration tokens, not averages: downstream only
//! the ranking matters, and it does not depend on the token count.

use serde::{Deserialize, Serialize};

use crate::calibrate::ActivationStats;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// Global per-channel score, length d.
    pub channel: Vec<f64>,
    /// `head[l][j]`: query head `j` of layer `l`.
    pub head: Vec<Vec<f64>>,
    /// `ffn[l][m]`: intermediate neuron `m` of layer `l`.
    pub ffn: Vec<Vec<f64>>,
    /// Block importance per layer, in [0, 2].
    pub layer: Vec<f64>,
    /// KV-group scores, filled in only when layers are merged.
    #[serde(default)]
    pub kv_group: Vec<Vec<f64>>,
}

/// Sum of per-channel absolute activations over every RMSNorm site,
/// post-norms and the final norm included.
pub fn channel_scores(stats: &ActivationStats) -> Vec<f64> {
    let mut out = vec![0.0; stats.hidden];
    for site in stats.norm_sites() {
        let sums = stats.channel_abs(site).expect("listed site");
        for (o, s) in out.iter_mut().zip(sums) {
            *o += s;
        }
    }
    out
}

pub fn head_scores(stats: &ActivationStats) -> Vec<Vec<f64>> {
    stats.layers.iter().map(|l| l.head_l2_sum.clone()).collect()
}

pub fn ffn_scores(stats: &ActivationStats) -> Vec<Vec<f64>> {
    stats.layers.iter().map(|l| l.ffn_abs_sum.clone()).collect()
}

/// One minus the mean input/output cosine similarity of each block.
pub fn layer_scores(stats: &ActivationStats) -> Result<Vec<f64>> {
    stats
        .layers
        .iter()
        .enumerate()
        .map(|(l, s)| {
            if s.token_count == 0 {
                return Err(Error::Numeric(format!(
                    "layer {l} saw no calibration tokens"
                )));
            }
            Ok(1.0 - s.cosine_sim_sum / s.token_count as f64)
        })
        .collect()
}

/// Mean of the surviving query-head scores of each KV group.
pub fn kv_group_scores(groups: &[Vec<f64>]) -> Result<Vec<f64>> {
    groups
        .iter()
        .enumerate()
        .map(|(g, heads)| {
            if heads.is_empty() {
                return Err(Error::Input(format!("KV group {g} has no surviving heads")));
            }
            Ok(heads.iter().sum::<f64>() / heads.len() as f64)
        })
        .collect()
}

/// All score families except the KV-group scores.
pub fn score_all(stats: &ActivationStats) -> Result<ImportanceScores> {
    Ok(ImportanceScores {
        channel: channel_scores(stats),
        head: head_scores(stats),
        ffn: ffn_scores(stats),
        layer: layer_scores(stats)?,
        kv_group: Vec::new(),
    })
}
