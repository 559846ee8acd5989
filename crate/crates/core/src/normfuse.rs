//! Post-RMSNorm absorption.
//!
//! A post-module RMSNorm `γ ⊙ x / sqrt(‖x‖²/d + ε)` is replaced by the static
//! scale `γ_abs = s̄_inv · γ`, where `s̄_inv` is the calibration mean of the
//! per-token inverse RMS at that site. The static scale is then folded into
//! the columns of the projection that produced `x` (`wo` or `w_down`), so the
//! norm disappears from the forward pass entirely.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{ActivationStats, CalibrationSet};
use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::model::{logits, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostNormKind {
    Attn,
    Ffn,
}

/// A post-module norm site: `(layer, attention or FFN)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PostNormSite {
    pub layer: usize,
    pub kind: PostNormKind,
}

impl PostNormSite {
    pub fn attn(layer: usize) -> Self {
        Self {
            layer,
            kind: PostNormKind::Attn,
        }
    }

    pub fn ffn(layer: usize) -> Self {
        Self {
            layer,
            kind: PostNormKind::Ffn,
        }
    }
}

impl fmt::Display for PostNormSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            PostNormKind::Attn => "attn",
            PostNormKind::Ffn => "ffn",
        };
        write!(f, "{kind}:{}", self.layer)
    }
}

/// Which post-norms to absorb.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SiteSelection {
    None,
    All,
    AllAttn,
    AllFfn,
    Explicit(Vec<PostNormSite>),
}

impl FromStr for SiteSelection {
    type Err = Error;

    /// `none`, `all`, `attn`, `ffn`, or a comma list such as `attn:0,ffn:2`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "" | "none" => return Ok(SiteSelection::None),
            "all" => return Ok(SiteSelection::All),
            "attn" => return Ok(SiteSelection::AllAttn),
            "ffn" => return Ok(SiteSelection::AllFfn),
            _ => {}
        }
        let sites = s
            .split(',')
            .map(|item| {
                let bad = || {
                    Error::Input(format!(
                        "bad site `{item}`, expected attn:<layer> or ffn:<layer>"
                    ))
                };
                let (kind, layer) = item.trim().split_once(':').ok_or_else(bad)?;
                let layer = layer.parse().map_err(|_| bad())?;
                match kind {
                    "attn" => Ok(PostNormSite::attn(layer)),
                    "ffn" => Ok(PostNormSite::ffn(layer)),
                    _ => Err(bad()),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SiteSelection::Explicit(sites))
    }
}

impl SiteSelection {
    /// Concrete sites for a model; the named groups select only post-norms
    /// still present.
    pub fn resolve(&self, w: &WeightStore) -> Vec<PostNormSite> {
        let present = |kind| {
            w.config
                .layers
                .iter()
                .enumerate()
                .filter(move |(_, lc)| match kind {
                    PostNormKind::Attn => lc.attn_post_norm,
                    PostNormKind::Ffn => lc.ffn_post_norm,
                })
                .map(move |(layer, _)| PostNormSite { layer, kind })
        };
        match self {
            SiteSelection::None => Vec::new(),
            SiteSelection::AllAttn => present(PostNormKind::Attn).collect(),
            SiteSelection::AllFfn => present(PostNormKind::Ffn).collect(),
            SiteSelection::All => {
                let mut v: Vec<_> = present(PostNormKind::Attn)
                    .chain(present(PostNormKind::Ffn))
                    .collect();
                v.sort();
                v
            }
            SiteSelection::Explicit(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorbedSite {
    pub site: PostNormSite,
    /// Calibration mean of `1/sqrt(‖x‖²/d + ε)`.
    pub inv_scale: f64,
    pub token_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    pub sites: Vec<AbsorbedSite>,
    /// Max relative logit deviation from the un-absorbed model on a probe
    /// set, when measured.
    pub probe_max_rel_deviation: Option<f64>,
}

/// Mean inverse RMS of the module outputs entering a post-norm.
pub fn inv_scale(stats: &ActivationStats, site: PostNormSite) -> Result<f64> {
    let ls = stats
        .layers
        .get(site.layer)
        .ok_or_else(|| Error::Input(format!("site {site}: no such layer")))?;
    if ls.token_count == 0 {
        return Err(Error::Numeric(format!(
            "site {site}: no calibration tokens"
        )));
    }
    let sum = match site.kind {
        PostNormKind::Attn => ls.attn_inv_scale_sum,
        PostNormKind::Ffn => ls.ffn_inv_scale_sum,
    };
    let s = sum / ls.token_count as f64;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Numeric(format!(
            "site {site}: inverse scale {s} is not positive"
        )));
    }
    Ok(s)
}

/// Multiplies column `j` of a producing projection by `gamma_abs[j]`.
pub fn fuse_scale(proj: &Tensor, gamma_abs: &[f32]) -> Result<Tensor> {
    let mut out = proj.clone();
    out.scale_cols(gamma_abs)?;
    Ok(out)
}

/// Absorbs the listed post-norms using calibration statistics collected on
/// `w` itself.
pub fn absorb(
    w: &WeightStore,
    stats: &ActivationStats,
    sites: &[PostNormSite],
) -> Result<(WeightStore, AbsorptionReport)> {
    if stats.layers.len() != w.layers.len() || stats.hidden != w.config.hidden {
        return Err(Error::shape(
            "activation statistics were collected on a different model",
        ));
    }
    let mut out = w.clone();
    let mut report = AbsorptionReport {
        sites: Vec::with_capacity(sites.len()),
        probe_max_rel_deviation: None,
    };
    for &site in sites {
        let l = site.layer;
        if l >= out.layers.len() {
            return Err(Error::Input(format!(
                "site {site}: model has {} layers",
                out.layers.len()
            )));
        }
        let s = inv_scale(stats, site)?;
        let lw = &mut out.layers[l];
        let (gamma, proj) = match site.kind {
            PostNormKind::Attn => (lw.post_attn_gamma.take(), &mut lw.wo),
            PostNormKind::Ffn => (lw.post_ffn_gamma.take(), &mut lw.w_down),
        };
        let gamma = gamma
            .ok_or_else(|| Error::Input(format!("site {site}: post-norm already absorbed")))?;
        let gamma_abs: Vec<f32> = gamma.iter().map(|&g| (s * g as f64) as f32).collect();
        proj.scale_cols(&gamma_abs)?;
        let lc = &mut out.config.layers[l];
        match site.kind {
            PostNormKind::Attn => lc.attn_post_norm = false,
            PostNormKind::Ffn => lc.ffn_post_norm = false,
        }
        report.sites.push(AbsorbedSite {
            site,
            inv_scale: s,
            token_count: stats.layers[l].token_count,
        });
    }
    out.validate()?;
    Ok((out, report))
}

/// Largest per-token relative logit deviation: `max_j |a_j - b_j|` over
/// `max_j |b_j|`, with `b` the reference.
pub fn max_rel_deviation(test: &Tensor, reference: &Tensor) -> Result<f64> {
    if test.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "logits {:?} vs {:?}",
            test.shape(),
            reference.shape()
        )));
    }
    let mut worst = 0.0f64;
    for r in 0..test.rows() {
        let (a, b) = (test.row(r), reference.row(r));
        let diff = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .fold(0.0, f64::max);
        let scale = b.iter().map(|&y| (y as f64).abs()).fold(0.0, f64::max);
        let dev = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// Max relative logit deviation of the absorbed model from the sandwich
/// model over every probe token.
pub fn verify_absorption(
    sandwich: &WeightStore,
    absorbed: &WeightStore,
    probe: &CalibrationSet,
) -> Result<f64> {
    let (a, b) = (&sandwich.config, &absorbed.config);
    if a.hidden != b.hidden || a.vocab != b.vocab || a.num_layers() != b.num_layers() {
        return Err(Error::shape("sandwich and absorbed models differ in shape"));
    }
    let devs: Vec<Result<f64>> = probe
        .sequences
        .par_iter()
        .map(|seq| max_rel_deviation(&logits(absorbed, seq)?, &logits(sandwich, seq)?))
        .collect();
    devs.into_iter().try_fold(0.0f64, |acc, d| Ok(acc.max(d?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::collect;
    use crate::model::{random_init, ModelConfig};

    #[test]
    fn inv_scale_examples() {
        let mut stats = ActivationStats::zeros(&ModelConfig::toy());
        stats.layers[0].token_count = 3;
        stats.layers[0].attn_inv_scale_sum = 3.0;
        assert_eq!(inv_scale(&stats, PostNormSite::attn(0)).unwrap(), 1.0);

        // Tokens [3,4] and [0,0] with eps = 1e-6.
        let a = 1.0 / 12.5f64.sqrt();
        let b = 1.0 / 1e-6f64.sqrt();
        stats.layers[0].token_count = 2;
        stats.layers[0].ffn_inv_scale_sum = a + b;
        let s = inv_scale(&stats, PostNormSite::ffn(0)).unwrap();
        assert!((s - 500.14).abs() < 0.01, "{s}");
        assert!((a - 0.28284).abs() < 1e-5);

        stats.layers[1].token_count = 0;
        assert!(inv_scale(&stats, PostNormSite::attn(1)).is_err());
    }

    #[test]
    fn hand_column_scaling() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let f = fuse_scale(&w, &[2.0, 3.0]).unwrap();
        assert_eq!(f.data(), &[2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn absorbing_twice_is_rejected() {
        let w = random_init(&ModelConfig::toy(), 3);
        let stats = collect(&w, &CalibrationSet::random(32, 2, 8, 0).unwrap()).unwrap();
        let (a, report) = absorb(&w, &stats, &[PostNormSite::ffn(1)]).unwrap();
        assert!(!a.config.layers[1].ffn_post_norm);
        assert_eq!(report.sites.len(), 1);
        assert!(absorb(&a, &stats, &[PostNormSite::ffn(1)]).is_err());
        assert!(absorb(&w, &stats, &[PostNormSite::attn(0), PostNormSite::attn(0)]).is_err());
    }

    #[test]
    fn site_selection_parsing() {
        let w = random_init(&ModelConfig::toy(), 3);
        assert_eq!("none".parse::<SiteSelection>().unwrap().resolve(&w), vec![]);
        assert_eq!("all".parse::<SiteSelection>().unwrap().resolve(&w).len(), 4);
        assert_eq!(
            "attn".parse::<SiteSelection>().unwrap().resolve(&w),
            vec![PostNormSite::attn(0), PostNormSite::attn(1)]
        );
        assert_eq!(
            "attn:1, ffn:0"
                .parse::<SiteSelection>()
                .unwrap()
                .resolve(&w),
            vec![PostNormSite::attn(1), PostNormSite::ffn(0)]
        );
        assert!("mlp:0".parse::<SiteSelection>().is_err());
    }

    #[test]
    fn identical_models_have_zero_deviation() {
        let w = random_init(&ModelConfig::toy(), 3);
        let probe = CalibrationSet::random(32, 3, 6, 9).unwrap();
        assert_eq!(verify_absorption(&w, &w, &probe).unwrap(), 0.0);
    }

    #[test]
    fn random_probe_deviation_is_finite() {
        let w = random_init(&ModelConfig::toy(), 3);
        let calib = CalibrationSet::random(32, 4, 16, 1).unwrap();
        let stats = collect(&w, &calib).unwrap();
        let sites = SiteSelection::All.resolve(&w);
        let (a, _) = absorb(&w, &stats, &sites).unwrap();
        let dev =
            verify_absorption(&w, &a, &CalibrationSet::random(32, 2, 16, 2).unwrap()).unwrap();
        assert!(dev.is_finite() && dev > 0.0);
    }
}
