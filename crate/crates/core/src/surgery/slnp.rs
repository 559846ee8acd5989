use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::l2_norm;
use crate::model::{NormSite, WeightStore};

/// Rescale factor applied to one norm's γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlnpScale {
    pub norm: NormSite,
    pub scale: f64,
}

/// Restores every norm's γ magnitude after channel pruning:
/// `c = ‖γ_orig‖₂ / ‖γ_pruned‖₂`, `γ_new = c · γ_pruned`.
///
/// `before` and `after` must have the same norms, with `after`'s γ being
/// channel-restricted copies of `before`'s. A norm whose γ was not pruned
/// gets `c = 1`.
pub fn slnp_rescale(
    before: &WeightStore,
    after: &WeightStore,
) -> Result<(WeightStore, Vec<SlnpScale>)> {
    let sites = after.norm_sites();
    if sites != before.norm_sites() {
        return Err(Error::shape("models differ in their RMSNorm layers"));
    }
    let mut out = after.clone();
    let mut scales = Vec::with_capacity(sites.len());
    for site in sites {
        let orig = before.gamma(site).expect("listed site");
        let pruned = out.gamma_mut(site).expect("listed site");
        let scale = if orig == pruned {
            1.0
        } else {
            let denom = l2_norm(pruned);
            if denom == 0.0 {
                return Err(Error::Numeric(format!(
                    "{site}: every retained γ entry is zero, cannot rescale"
                )));
            }
            l2_norm(orig) / denom
        };
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Numeric(format!(
                "{site}: rescale factor {scale} is not positive"
            )));
        }
        if scale != 1.0 {
            for g in pruned.iter_mut() {
                *g = (scale * *g as f64) as f32;
            }
        }
        scales.push(SlnpScale { norm: site, scale });
    }
    Ok((out, scales))
}
