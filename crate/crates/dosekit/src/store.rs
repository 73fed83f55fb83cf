//! On-disk layouts for patients, plans and datasets.
//!
//! ```text
//! <patients>/<id>/patient.json          structure manifest
//! <patients>/<id>/masks/<name>.dvol
//! <plans>/<id>/...                      copy of the patient directory
//! <plans>/<id>/plan-<iii>/dose.dvol
//! <plans>/<id>/plan-<iii>/plan.json     weights and diagnostics
//! <plans>/<id>/plan-<iii>/fluence.f32
//! <dataset>/dataset.json
//! <dataset>/<id>/...                    kernel-cropped patient
//! <dataset>/<id>/plan-<iii>/{ptv,oar,body,target}.dvol
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dosekit_core::planner::{Plan, PlanWeights, SolverDiagnostics};
use dosekit_core::preprocess::{CroppedCase, ModelInput, Sample, CH_BODY, CH_OAR, CH_PTV};
use dosekit_core::phantom::PatientCase;
use dosekit_core::volume::{CropPlacement, Dims, Impact, KernelSpec, Spacing, StructureKind, StructureMask, StructureSet};
use serde::{Deserialize, Serialize};

use crate::error::{KitError, KitResult};
use crate::fsutil::{f32_bytes, f32_from_bytes, read_json, write_atomic, write_json};
use crate::dvol;

pub const PATIENT_MANIFEST: &str = "patient.json";
pub const PLAN_MANIFEST: &str = "plan.json";
pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureEntry {
    pub name: String,
    pub kind: StructureKind,
    pub prescription: Option<f64>,
    pub impact: Option<Impact>,
    /// Mask path relative to the patient directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientManifest {
    pub id: String,
    pub site_id: String,
    pub seed: u64,
    pub dims: Dims,
    pub spacing: Spacing,
    /// Model kernel of the site the patient was drawn from.
    pub kernel: KernelSpec,
    /// Present for kernel-cropped patients inside a dataset.
    pub placement: Option<CropPlacement>,
    pub structures: Vec<StructureEntry>,
}

fn mask_file(name: &str) -> String {
    format!("masks/{name}.dvol")
}

pub fn plan_dir_name(index: usize) -> String {
    format!("plan-{index:03}")
}

fn write_structures(
    dir: &Path,
    id: &str,
    site_id: &str,
    seed: u64,
    kernel: KernelSpec,
    placement: Option<CropPlacement>,
    structures: &StructureSet,
) -> KitResult<()> {
    fs::create_dir_all(dir.join("masks")).map_err(|e| KitError::io(dir, e))?;
    let mut entries = Vec::new();
    for s in structures.iter() {
        let file = mask_file(&s.name);
        dvol::write(&dir.join(&file), &s.mask)?;
        entries.push(StructureEntry {
            name: s.name.clone(),
            kind: s.kind,
            prescription: s.prescription,
            impact: s.impact,
            file,
        });
    }
    let manifest = PatientManifest {
        id: id.into(),
        site_id: site_id.into(),
        seed,
        dims: structures.dims(),
        spacing: structures.spacing(),
        kernel,
        placement,
        structures: entries,
    };
    write_json(&dir.join(PATIENT_MANIFEST), &manifest)
}

/// A patient as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredPatient {
    pub case: PatientCase,
    pub kernel: KernelSpec,
    pub placement: Option<CropPlacement>,
}

pub fn write_patient(dir: &Path, case: &PatientCase, kernel: KernelSpec) -> KitResult<()> {
    write_structures(dir, &case.id, &case.site_id, case.seed, kernel, None, &case.structures)
}

pub fn read_patient(dir: &Path) -> KitResult<StoredPatient> {
    let manifest_path = dir.join(PATIENT_MANIFEST);
    let m: PatientManifest = read_json(&manifest_path)?;
    let mut masks = Vec::with_capacity(m.structures.len());
    for e in &m.structures {
        let path = dir.join(&e.file);
        let grid = dvol::read(&path)?;
        if grid.dims() != m.dims {
            return Err(KitError::Validation(format!(
                "{}: mask dims {:?} differ from manifest dims {:?}",
                path.display(),
                grid.dims(),
                m.dims
            )));
        }
        masks.push(StructureMask::new(e.name.clone(), e.kind, grid, e.prescription, e.impact)?);
    }
    Ok(StoredPatient {
        case: PatientCase {
            id: m.id,
            site_id: m.site_id,
            seed: m.seed,
            structures: StructureSet::new(masks)?,
        },
        kernel: m.kernel,
        placement: m.placement,
    })
}

/// Patient directories (those holding a manifest) under `root`, sorted by
/// name.
pub fn patient_dirs(root: &Path) -> KitResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| KitError::io(root, e))? {
        let path = entry.map_err(|e| KitError::io(root, e))?.path();
        if path.join(PATIENT_MANIFEST).is_file() {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(KitError::Validation(format!("{}: no patient directories found", root.display())));
    }
    Ok(out)
}

pub fn read_patients(root: &Path) -> KitResult<Vec<StoredPatient>> {
    patient_dirs(root)?.iter().map(|d| read_patient(d)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanManifest {
    pub patient_id: String,
    pub plan_index: usize,
    pub seed: u64,
    pub weights: PlanWeights,
    pub diagnostics: SolverDiagnostics,
    pub dose: String,
    pub fluence: String,
}

pub fn write_plan(dir: &Path, plan: &Plan, seed: u64) -> KitResult<()> {
    fs::create_dir_all(dir).map_err(|e| KitError::io(dir, e))?;
    dvol::write(&dir.join("dose.dvol"), &plan.dose)?;
    write_atomic(&dir.join("fluence.f32"), &f32_bytes(&plan.fluence))?;
    write_json(
        &dir.join(PLAN_MANIFEST),
        &PlanManifest {
            patient_id: plan.patient_id.clone(),
            plan_index: plan.plan_index,
            seed,
            weights: plan.weights.clone(),
            diagnostics: plan.diagnostics.clone(),
            dose: "dose.dvol".into(),
            fluence: "fluence.f32".into(),
        },
    )
}

pub fn read_plan(dir: &Path) -> KitResult<Plan> {
    let m: PlanManifest = read_json(&dir.join(PLAN_MANIFEST))?;
    let dose = dvol::read(&dir.join(&m.dose))?;
    let path = dir.join(&m.fluence);
    let bytes = fs::read(&path).map_err(|e| KitError::io(&path, e))?;
    Ok(Plan {
        patient_id: m.patient_id,
        plan_index: m.plan_index,
        weights: m.weights,
        fluence: f32_from_bytes(&path, &bytes)?,
        dose,
        diagnostics: m.diagnostics,
    })
}

/// Writes a patient with its plans; the patient directory doubles as the
/// plan container.
pub fn write_patient_plans(dir: &Path, case: &PatientCase, kernel: KernelSpec, plans: &[(Plan, u64)]) -> KitResult<()> {
    write_patient(dir, case, kernel)?;
    for (p, seed) in plans {
        write_plan(&dir.join(plan_dir_name(p.plan_index)), p, *seed)?;
    }
    Ok(())
}

/// Plan directories of one patient, sorted.
pub fn plan_dirs(patient_dir: &Path) -> KitResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(patient_dir).map_err(|e| KitError::io(patient_dir, e))? {
        let path = entry.map_err(|e| KitError::io(patient_dir, e))?.path();
        if path.join(PLAN_MANIFEST).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub patient_id: String,
    pub plan_index: usize,
    /// Sample directory relative to the dataset root.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub kernel: KernelSpec,
    pub channels: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

pub fn write_dataset(root: &Path, samples: &[Sample], kernel: KernelSpec) -> KitResult<()> {
    fs::create_dir_all(root).map_err(|e| KitError::io(root, e))?;
    let mut written: BTreeMap<&str, ()> = BTreeMap::new();
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let pdir = root.join(&s.patient_id);
        if written.insert(&s.patient_id, ()).is_none() {
            let c = &s.case;
            write_structures(&pdir, &c.id, &c.site_id, 0, kernel, Some(c.placement), &c.structures)?;
        }
        let rel = format!("{}/{}", s.patient_id, plan_dir_name(s.plan_index));
        let sdir = root.join(&rel);
        fs::create_dir_all(&sdir).map_err(|e| KitError::io(&sdir, e))?;
        for (c, name) in [(CH_PTV, "ptv"), (CH_OAR, "oar"), (CH_BODY, "body")] {
            dvol::write(&sdir.join(format!("{name}.dvol")), &s.input.channel(c))?;
        }
        dvol::write(&sdir.join("target.dvol"), &s.target)?;
        entries.push(SampleEntry {
            patient_id: s.patient_id.clone(),
            plan_index: s.plan_index,
            dir: rel,
        });
    }
    write_json(
        &root.join(DATASET_MANIFEST),
        &DatasetManifest {
            kernel,
            channels: vec!["ptv".into(), "oar".into(), "body".into()],
            samples: entries,
        },
    )
}

pub struct Dataset {
    pub kernel: KernelSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Distinct patient ids in sample order.
    pub fn patient_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.samples.iter().map(|s| s.patient_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn by_patient(&self) -> Vec<Vec<Sample>> {
        self.patient_ids()
            .iter()
            .map(|id| self.samples.iter().filter(|s| &s.patient_id == id).cloned().collect())
            .collect()
    }
}

pub fn read_dataset(root: &Path) -> KitResult<Dataset> {
    let manifest_path = root.join(DATASET_MANIFEST);
    let m: DatasetManifest = read_json(&manifest_path)?;
    let mut cases: BTreeMap<String, Arc<CroppedCase>> = BTreeMap::new();
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in &m.samples {
        let case = match cases.get(&e.patient_id) {
            Some(c) => c.clone(),
            None => {
                let pdir = root.join(&e.patient_id);
                let p = read_patient(&pdir)?;
                let placement = p.placement.ok_or_else(|| {
                    KitError::Validation(format!("{}: dataset patient lacks a crop placement", pdir.display()))
                })?;
                let c = Arc::new(CroppedCase {
                    id: p.case.id,
                    site_id: p.case.site_id,
                    placement,
                    structures: p.case.structures,
                });
                cases.insert(e.patient_id.clone(), c.clone());
                c
            }
        };
        let sdir = root.join(&e.dir);
        let ch = |n: &str| dvol::read(&sdir.join(format!("{n}.dvol")));
        let (ptv, oar, body) = (ch("ptv")?, ch("oar")?, ch("body")?);
        let input = ModelInput::from_channels(case.placement, [&ptv, &oar, &body])?;
        let target = ch("target")?;
        if target.dims() != m.kernel.dims || input.kernel() != m.kernel {
            return Err(KitError::Validation(format!(
                "{}: sample extent differs from dataset kernel {:?}",
                sdir.display(),
                m.kernel.dims
            )));
        }
        samples.push(Sample {
            patient_id: e.patient_id.clone(),
            plan_index: e.plan_index,
            input,
            target,
            case,
        });
    }
    Ok(Dataset {
        kernel: m.kernel,
        samples,
    })
}
