//! Declarative run configuration (TOML).
//!
//! Every section is optional; a file naming only a site preset is a full
//! configuration. Unknown keys are rejected. One master `seed` drives all
//! sub-seeds through labelled derivation, so any stage can be rerun alone.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dosekit_core::nn::UNetConfig;
use dosekit_core::phantom::{builtin_site, SiteSpec};
use dosekit_core::planner::PlanConfig;
use dosekit_core::trainer::{ExperimentConfig, SweepConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{KitError, KitResult};

/// Patient indices (into the id-sorted patient list) of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Proportional 54 : 6 : 10 split with at least one validation and one
    /// test patient.
    pub fn proportional(patients: usize) -> KitResult<Self> {
        if patients < 3 {
            return Err(KitError::Validation(format!(
                "need at least 3 patients to split, got {patients}"
            )));
        }
        let test = ((patients as f64 * 10.0 / 70.0).round() as usize).max(1);
        let val = ((patients as f64 * 6.0 / 70.0).round() as usize).max(1);
        let train = patients - test - val;
        Ok(Self {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..patients).collect(),
        })
    }

    /// Disjoint, in range, and together covering `0..patients`.
    pub fn validate(&self, patients: usize) -> KitResult<()> {
        let mut seen = BTreeSet::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if ids.is_empty() {
                return Err(KitError::Validation(format!("split `{name}` is empty")));
            }
            for &i in ids.iter() {
                if i >= patients {
                    return Err(KitError::Validation(format!(
                        "split `{name}` names patient {i}, pool has {patients}"
                    )));
                }
                if !seen.insert(i) {
                    return Err(KitError::Validation(format!(
                        "patient {i} appears in more than one split (second time in `{name}`)"
                    )));
                }
            }
        }
        if seen.len() != patients {
            return Err(KitError::Validation(format!(
                "splits cover {} of {patients} patients",
                seen.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiteSection {
    /// Built-in preset name (`siteA`, `siteB`).
    pub preset: Option<String>,
    /// Custom site description (TOML or JSON).
    pub file: Option<PathBuf>,
    pub patients: usize,
    pub plans_per_patient: usize,
    pub splits: Option<Splits>,
}

impl Default for SiteSection {
    fn default() -> Self {
        Self {
            preset: None,
            file: None,
            patients: 10,
            plans_per_patient: 8,
            splits: None,
        }
    }
}

impl SiteSection {
    fn preset(name: &str) -> Self {
        Self {
            preset: Some(name.into()),
            ..Self::default()
        }
    }

    pub fn spec(&self) -> KitResult<SiteSpec> {
        match (&self.preset, &self.file) {
            (Some(_), Some(_)) => Err(KitError::Validation("give either a site preset or a site file, not both".into())),
            (_, Some(path)) => load_site_file(path),
            (Some(name), None) => Ok(builtin_site(name)?),
            (None, None) => Ok(builtin_site("siteA")?),
        }
    }

    pub fn splits(&self) -> KitResult<Splits> {
        let s = match &self.splits {
            Some(s) => s.clone(),
            None => Splits::proportional(self.patients)?,
        };
        s.validate(self.patients)?;
        Ok(s)
    }

    fn validate(&self, key: &str) -> KitResult<()> {
        let spec = self.spec()?;
        spec.validate()?;
        if self.patients == 0 || self.plans_per_patient == 0 {
            return Err(KitError::Validation(format!("{key}: patients and plans_per_patient must be positive")));
        }
        if let Some(s) = &self.splits {
            s.validate(self.patients)
                .map_err(|e| KitError::Validation(format!("{key}.splits: {e}")))?;
        }
        Ok(())
    }
}

pub fn load_site_file(path: &Path) -> KitResult<SiteSpec> {
    if !path.is_file() {
        return Err(KitError::Validation(format!("site file {} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| KitError::io(path, e))?;
    let spec: SiteSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| KitError::parse(path, e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| KitError::parse(path, e.to_string()))?
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Target site; the top-level `site` is the source.
    pub target: SiteSection,
    pub fine_tune: Option<TrainSchedule>,
    pub alpha: f64,
    pub isodose_percent: f64,
    pub rebalance_combined: bool,
    pub sweep: SweepConfig,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        Self {
            target: SiteSection::preset("siteB"),
            fine_tune: None,
            alpha: d.alpha,
            isodose_percent: d.isodose_percent,
            rebalance_combined: d.rebalance_combined,
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed.
    pub seed: u64,
    pub jobs: Option<usize>,
    pub site: SiteSection,
    pub planning: PlanConfig,
    pub unet: UNetConfig,
    pub schedule: TrainSchedule,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            site: SiteSection::default(),
            planning: PlanConfig::default(),
            unet: UNetConfig::default(),
            schedule: TrainSchedule::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> KitResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| KitError::parse(origin, e.to_string()))?;
        let base = origin.parent().unwrap_or(Path::new(""));
        for s in [&mut cfg.site, &mut cfg.experiment.target] {
            if let Some(f) = &s.file {
                if f.is_relative() {
                    s.file = Some(base.join(f));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }

    pub fn validate(&self) -> KitResult<()> {
        self.site.validate("site")?;
        self.experiment.target.validate("experiment.target")?;
        self.planning.beams.validate()?;
        let s = &self.planning.solver;
        if !(s.step_factor > 0.0 && s.step_factor < 1.0) || s.max_iters == 0 || s.power_iters == 0 {
            return Err(KitError::Validation(
                "planning.solver: need 0 < step_factor < 1 and positive iteration counts".into(),
            ));
        }
        self.unet.validate()?;
        self.schedule.validate()?;
        if let Some(f) = &self.experiment.fine_tune {
            f.validate()?;
        }
        if !(self.experiment.alpha > 0.0 && self.experiment.alpha < 1.0) {
            return Err(KitError::Validation("experiment.alpha must lie in (0, 1)".into()));
        }
        if self.jobs == Some(0) {
            return Err(KitError::Validation("jobs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            unet: self.unet,
            schedule: self.schedule,
            fine_tune: self.experiment.fine_tune,
            alpha: self.experiment.alpha,
            isodose_percent: self.experiment.isodose_percent,
            rebalance_combined: self.experiment.rebalance_combined,
            seed: dosekit_core::seed::derive_seed(self.seed, "experiment"),
        }
    }
}

pub fn parse_config(path: &Path) -> KitResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| KitError::io(path, e))?;
    RunConfig::from_toml_str(&text, path)
}
