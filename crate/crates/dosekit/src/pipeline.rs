//! Seeded end-to-end stages shared by the CLI and the experiment drivers.
//!
//! Seed labels (all derived from the master seed):
//!
//! | stage    | label                      |
//! |----------|----------------------------|
//! | phantom  | `phantom/{site}/{index}`   |
//! | plans    | `plans/{patient id}`       |
//! | training | `train`, `init`            |
//! | experiment | `experiment`             |

use dosekit_core::phantom::{generate_patient, PatientCase, SiteSpec};
use dosekit_core::planner::{generate_plans, Plan, PlanConfig};
use dosekit_core::preprocess::{dataset_build, Sample};
use dosekit_core::seed::derive_seed;
use dosekit_core::trainer::Split;
use rayon::prelude::*;

use crate::config::{SiteSection, Splits};
use crate::error::{KitError, KitResult};

pub fn patient_id(site_id: &str, index: usize) -> String {
    format!("{site_id}-{index:03}")
}

pub fn patient_seed(master: u64, site_id: &str, index: usize) -> u64 {
    derive_seed(master, &format!("phantom/{site_id}/{index}"))
}

pub fn plan_seed(master: u64, patient_id: &str) -> u64 {
    derive_seed(master, &format!("plans/{patient_id}"))
}

/// Runs `f` on a pool of `jobs` threads (all cores when `None`).
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> KitResult<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| KitError::Validation(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn generate_cohort(spec: &SiteSpec, patients: usize, master: u64) -> KitResult<Vec<PatientCase>> {
    (0..patients)
        .into_par_iter()
        .map(|i| {
            let id = patient_id(&spec.site_id, i);
            Ok(generate_patient(spec, &id, patient_seed(master, &spec.site_id, i))?)
        })
        .collect()
}

/// Plans for every case, each paired with the seed that produced it.
pub fn plan_cohort(cases: &[PatientCase], cfg: &PlanConfig, per_patient: usize, master: u64) -> KitResult<Vec<Vec<(Plan, u64)>>> {
    cases
        .par_iter()
        .map(|c| {
            let seed = plan_seed(master, &c.id);
            let plans = generate_plans(c, cfg, per_patient, seed).map_err(|e| {
                log::error!("planning failed for {}: {e}", c.id);
                e
            })?;
            Ok(plans.into_iter().map(|p| (p, seed)).collect())
        })
        .collect()
}

/// Builds the dataset of a site section and groups it by patient, in
/// patient-index order.
pub fn site_samples(section: &SiteSection, planning: &PlanConfig, master: u64) -> KitResult<(SiteSpec, Vec<Vec<Sample>>)> {
    let spec = section.spec()?;
    let cases = generate_cohort(&spec, section.patients, master)?;
    let plans = plan_cohort(&cases, planning, section.plans_per_patient, master)?;
    let grouped = cases
        .par_iter()
        .zip(plans.par_iter())
        .map(|(c, p)| {
            let plans: Vec<Plan> = p.iter().map(|(p, _)| p.clone()).collect();
            Ok(dataset_build(std::slice::from_ref(c), &plans, spec.kernel)?)
        })
        .collect::<KitResult<Vec<_>>>()?;
    log::info!(
        "site {}: {} patients x {} plans",
        spec.site_id,
        section.patients,
        section.plans_per_patient
    );
    Ok((spec, grouped))
}

/// Flattens per-patient sample groups into train/val/test by patient index.
pub fn split_samples(grouped: &[Vec<Sample>], splits: &Splits) -> KitResult<Split> {
    splits.validate(grouped.len())?;
    let take = |ids: &[usize]| -> Vec<Sample> { ids.iter().flat_map(|&i| grouped[i].iter().cloned()).collect() };
    Ok(Split {
        train: take(&splits.train),
        val: take(&splits.val),
        test: take(&splits.test),
    })
}
