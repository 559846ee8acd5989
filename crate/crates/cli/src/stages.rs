//! Stage functions shared by the individual commands and `pipeline`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pgl_core::calibrate::{collect_sharded, CalibrationSet};
use pgl_core::importance::score_all;
use pgl_core::model::{load_checkpoint, logits, save_checkpoint};
use pgl_core::normfuse::{absorb, verify_absorption, SiteSelection};
use pgl_core::surgery::{apply_plan_with, verify_report, PlanSource, SurgeryOptions};
use pgl_core::{
    AbsorptionReport, ActivationStats, ImportanceScores, PrunePlan, SurgeryReport, WeightStore,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Sequences collected per rayon task. Fixed so results do not depend on the
/// thread count.
pub const SHARDS: usize = 4;
/// Probe sequences used to measure absorption drift.
pub const PROBE_SEQUENCES: usize = 8;

/// Where calibration tokens come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CalibSource {
    /// Seeded synthetic set sized to the model vocabulary.
    Builtin,
    File(PathBuf),
}

impl FromStr for CalibSource {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "builtin" => CalibSource::Builtin,
            path => CalibSource::File(path.into()),
        })
    }
}

impl CalibSource {
    pub fn load(&self, vocab: usize, seed: u64) -> CliResult<CalibrationSet> {
        match self {
            CalibSource::Builtin => Ok(CalibrationSet::builtin(vocab, seed)?),
            CalibSource::File(p) => CalibrationSet::load(p).map_err(|e| {
                CliError::validation(format!("calibration file {}: {e}", p.display()))
            }),
        }
    }

    pub fn check_exists(&self) -> CliResult<()> {
        match self {
            CalibSource::File(p) => require_file(p, "calibration file"),
            CalibSource::Builtin => Ok(()),
        }
    }
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

pub fn load_model(path: &Path) -> CliResult<WeightStore> {
    require_file(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

pub fn save_model(w: &WeightStore, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    Ok(save_checkpoint(w, path)?)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    require_file(path, what)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{what} {}: {e}", path.display())))
}

pub fn parse_sites(s: &str) -> CliResult<SiteSelection> {
    s.parse::<SiteSelection>()
        .map_err(|e| CliError::usage(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsFile {
    pub provenance: String,
    pub sequences: usize,
    pub stats: ActivationStats,
}

pub fn calibrate(w: &WeightStore, calib: &CalibrationSet) -> CliResult<StatsFile> {
    let stats = collect_sharded(w, calib, SHARDS)?;
    stats.validate()?;
    Ok(StatsFile {
        provenance: calib.provenance.clone(),
        sequences: calib.sequences.len(),
        stats,
    })
}

pub fn score(stats: &ActivationStats) -> CliResult<ImportanceScores> {
    Ok(score_all(stats)?)
}

/// Identity plan when no plan file is given.
pub fn resolve_plan(
    w: &WeightStore,
    plan: Option<&Path>,
    scores: &ImportanceScores,
) -> CliResult<PrunePlan> {
    match plan {
        None => Ok(PrunePlan::identity(&w.config)),
        Some(p) => {
            require_file(p, "plan")?;
            let source = PlanSource::load(p)
                .map_err(|e| CliError::validation(format!("plan {}: {e}", p.display())))?;
            Ok(source.resolve(&w.config, scores)?)
        }
    }
}

pub fn prune(
    w: &WeightStore,
    stats: &ActivationStats,
    plan: &PrunePlan,
    slnp: bool,
) -> CliResult<(WeightStore, SurgeryReport)> {
    Ok(apply_plan_with(w, stats, plan, SurgeryOptions { slnp })?)
}

/// Absorbs the selected post-norms using statistics collected on `w`
/// itself, then measures logit drift on the first probe sequences.
pub fn absorb_sites(
    w: &WeightStore,
    calib: &CalibrationSet,
    sites: &SiteSelection,
) -> CliResult<(WeightStore, AbsorptionReport)> {
    let sites = sites.resolve(w);
    if sites.is_empty() {
        return Ok((
            w.clone(),
            AbsorptionReport {
                sites: Vec::new(),
                probe_max_rel_deviation: None,
            },
        ));
    }
    let stats = collect_sharded(w, calib, SHARDS)?;
    let (out, mut report) = absorb(w, &stats, &sites)?;
    let probe = CalibrationSet::new(
        calib
            .sequences
            .iter()
            .take(PROBE_SEQUENCES)
            .cloned()
            .collect(),
        calib.provenance.clone(),
    )?;
    report.probe_max_rel_deviation = Some(verify_absorption(w, &out, &probe)?);
    Ok((out, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub param_count: usize,
    pub layers: usize,
    pub hidden: usize,
    pub norms: usize,
    pub checks: Vec<String>,
}

/// Re-checks every invariant of a checkpoint and, when given, its surgery
/// report, then runs a probe forward pass.
pub fn verify(w: &WeightStore, surgery: Option<&SurgeryReport>) -> CliResult<VerifyReport> {
    let mut checks = Vec::new();
    w.config.validate()?;
    w.validate()?;
    checks.push("config and tensor shapes".to_string());
    checks.push("all weights finite".to_string());
    if let Some(r) = surgery {
        verify_report(w, r)?;
        checks.push("surgery report matches checkpoint".to_string());
    }
    let probe: Vec<u32> = (0..w.config.vocab.min(8) as u32).collect();
    let out = logits(w, &probe)?;
    if let Some(i) = out.first_non_finite() {
        return Err(pgl_core::Error::NonFinite {
            tensor: "probe logits".into(),
            index: i,
        }
        .into());
    }
    checks.push("probe forward pass".to_string());
    Ok(VerifyReport {
        param_count: w.param_count(),
        layers: w.config.num_layers(),
        hidden: w.config.hidden,
        norms: w.config.num_norms(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pgl_core::model::{random_init, ModelConfig};

    #[test]
    fn calib_source_parsing() {
        assert_eq!(
            "builtin".parse::<CalibSource>().unwrap(),
            CalibSource::Builtin
        );
        assert_eq!(
            "data/tokens.txt".parse::<CalibSource>().unwrap(),
            CalibSource::File("data/tokens.txt".into())
        );
    }

    #[test]
    fn no_sites_leaves_model_untouched() {
        let w = random_init(&ModelConfig::toy(), 1);
        let calib = CalibrationSet::random(32, 2, 4, 0).unwrap();
        let (out, report) = absorb_sites(&w, &calib, &SiteSelection::None).unwrap();
        assert_eq!(out, w);
        assert!(report.sites.is_empty() && report.probe_max_rel_deviation.is_none());
    }

    #[test]
    fn missing_plan_means_identity() {
        let w = random_init(&ModelConfig::toy(), 1);
        let stats = calibrate(&w, &CalibrationSet::random(32, 2, 4, 0).unwrap()).unwrap();
        let scores = score(&stats.stats).unwrap();
        assert_eq!(
            resolve_plan(&w, None, &scores).unwrap(),
            PrunePlan::identity(&w.config)
        );
    }

    #[test]
    fn verify_runs_all_checks() {
        let w = random_init(&ModelConfig::toy(), 2);
        let r = verify(&w, None).unwrap();
        assert_eq!(r.checks.len(), 3);
        assert_eq!(r.param_count, 2120);
    }
}
