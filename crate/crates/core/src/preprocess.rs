//! Organ-count-independent model input.
//!
//! Every OAR voxel is ranked by its distance to the PTV union; the desired
//! DVH is then laid onto the ranked voxels so that the closest voxel gets the
//! hottest dose. All OARs share one channel, which keeps the input at three
//! channels (PTV prescription map, mapped OAR dose, body mask) no matter how
//! many organs a case has.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::error::{Error, Result};
use crate::eval::{dvh_curve, DvhCurve};
use crate::phantom::PatientCase;
use crate::planner::Plan;
use crate::volume::{
    coord_of, CropPlacement, KernelSpec, Spacing, StructureKind, StructureMask, StructureSet,
    VoxelGrid,
};

pub const N_CHANNELS: usize = 3;
pub const CH_PTV: usize = 0;
pub const CH_OAR: usize = 1;
pub const CH_BODY: usize = 2;

/// Structure voxels ordered by distance to the PTV union, ties broken by
/// ascending linear index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedVoxels {
    pub name: String,
    /// `(grid index, distance in mm)`.
    pub entries: Vec<(usize, f64)>,
}

impl RankedVoxels {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn ptv_union(ptvs: &[&StructureMask]) -> Vec<bool> {
    let n = ptvs.first().map_or(0, |p| p.mask.len());
    let mut u = vec![false; n];
    for p in ptvs {
        for (d, &v) in u.iter_mut().zip(p.mask.data()) {
            *d |= v != 0.0;
        }
    }
    u
}

/// Union voxels with at least one face neighbour outside the union. The
/// nearest union voxel to any outside point is always one of these.
fn boundary(union: &[bool], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let inside = |c: [i64; 3]| {
        (0..3).all(|a| c[a] >= 0 && c[a] < dims[a] as i64)
            && union[c[0] as usize + dims[0] * (c[1] as usize + dims[1] * c[2] as usize)]
    };
    union
        .iter()
        .enumerate()
        .filter(|(_, &u)| u)
        .map(|(i, _)| {
            let c = coord_of(i, dims);
            [c[0] as i64, c[1] as i64, c[2] as i64]
        })
        .filter(|&c| {
            (0..3).any(|a| {
                let mut lo = c;
                let mut hi = c;
                lo[a] -= 1;
                hi[a] += 1;
                !inside(lo) || !inside(hi)
            })
        })
        .collect()
}

/// Ranks the voxels of `oar` by Euclidean distance (mm, voxel center to
/// voxel center) to the nearest voxel of any PTV.
pub fn distance_map(
    oar: &StructureMask,
    ptvs: &[&StructureMask],
    spacing: Spacing,
) -> Result<RankedVoxels> {
    let union = ptv_union(ptvs);
    if !union.iter().any(|&u| u) {
        return Err(Error::Config("PTV union is empty".into()));
    }
    let dims = oar.mask.dims();
    if union.len() != oar.mask.len() {
        return Err(Error::Shape(format!("PTV grid differs from `{}` grid", oar.name)));
    }
    let edge = boundary(&union, dims);
    let s = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64];
    let mut entries: Vec<(usize, f64)> = oar
        .indices()
        .into_iter()
        .map(|i| {
            if union[i] {
                return (i, 0.0);
            }
            let c = coord_of(i, dims);
            let best = edge
                .iter()
                .map(|q| {
                    let mut d2 = 0.0;
                    for a in 0..3 {
                        let d = (c[a] as i64 - q[a]) as f64 * s[a];
                        d2 += d * d;
                    }
                    d2
                })
                .fold(f64::INFINITY, f64::min);
            (i, libm::sqrt(best))
        })
        .collect();
    entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(RankedVoxels {
        name: oar.name.clone(),
        entries,
    })
}

/// The `k`-th ranked voxel receives `desired.dose_at_fraction((k + 0.5) / N)`.
pub fn map_dvh_onto_structure(ranked: &RankedVoxels, desired: &DvhCurve) -> Vec<(usize, f32)> {
    let n = ranked.len() as f64;
    ranked
        .entries
        .iter()
        .enumerate()
        .map(|(k, &(i, _))| (i, desired.dose_at_fraction((k as f64 + 0.5) / n)))
        .collect()
}

/// Three-channel sample of shape `(1, x, y, z, 3)`, stored channel-last in
/// raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub placement: CropPlacement,
    pub spacing: Spacing,
    data: Vec<f32>,
}

impl ModelInput {
    pub fn new(placement: CropPlacement, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        let want = placement.kernel.voxel_count() * N_CHANNELS;
        if data.len() != want {
            return Err(Error::Shape(format!(
                "input payload {} values, kernel needs {want}",
                data.len()
            )));
        }
        Ok(Self {
            placement,
            spacing,
            data,
        })
    }

    /// Assembles from three kernel-shaped channel grids.
    pub fn from_channels(placement: CropPlacement, channels: [&VoxelGrid; 3]) -> Result<Self> {
        let n = placement.kernel.voxel_count();
        if channels.iter().any(|c| c.dims() != placement.kernel.dims) {
            return Err(Error::Shape("channel dims differ from kernel".into()));
        }
        let mut data = vec![0.0f32; n * N_CHANNELS];
        for (c, g) in channels.iter().enumerate() {
            for (v, &x) in g.data().iter().enumerate() {
                data[v * N_CHANNELS + c] = x;
            }
        }
        Self::new(placement, channels[0].spacing(), data)
    }

    pub fn kernel(&self) -> KernelSpec {
        self.placement.kernel
    }

    /// `(n_batch, x, y, z, n_channel)`.
    pub fn shape(&self) -> [usize; 5] {
        let d = self.placement.kernel.dims;
        [1, d[0], d[1], d[2], N_CHANNELS]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> VoxelGrid {
        let data = self.data.iter().skip(c).step_by(N_CHANNELS).copied().collect();
        VoxelGrid::new(self.placement.kernel.dims, self.spacing, data)
            .expect("channel of a valid input")
    }
}

/// Plan-independent part of the input for one patient: the crop window,
/// the prescription and body channels and every OAR's distance ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientGeometry {
    pub placement: CropPlacement,
    ptv_channel: Vec<f32>,
    body_channel: Vec<f32>,
    ranked: Vec<RankedVoxels>,
    required: Vec<String>,
    spacing: Spacing,
}

impl PatientGeometry {
    pub fn new(structures: &StructureSet, kernel: KernelSpec) -> Result<Self> {
        let placement = CropPlacement::for_body(structures.body(), kernel)?;
        let spacing = structures.spacing();
        let n = structures.body().mask.len();
        let mut ptv = vec![0.0f32; n];
        for p in structures.ptvs() {
            let rx = p.prescription.unwrap_or(0.0) as f32;
            for (d, &m) in ptv.iter_mut().zip(p.mask.data()) {
                if m != 0.0 && rx > *d {
                    *d = rx;
                }
            }
        }
        let ptvs: Vec<&StructureMask> = structures.ptvs().collect();
        let ranked = structures
            .oars()
            .map(|o| distance_map(o, &ptvs, spacing))
            .collect::<Result<Vec<_>>>()?;
        let required = structures
            .iter()
            .filter(|s| s.kind != StructureKind::Body)
            .map(|s| s.name.clone())
            .collect();
        Ok(Self {
            placement,
            ptv_channel: ptv,
            body_channel: structures.body().mask.data().to_vec(),
            ranked,
            required,
            spacing,
        })
    }

    pub fn ranked(&self) -> &[RankedVoxels] {
        &self.ranked
    }

    /// Builds the model input from per-structure desired DVHs.
    pub fn assemble(&self, dvhs: &BTreeMap<String, DvhCurve>) -> Result<ModelInput> {
        if let Some(missing) = self.required.iter().find(|n| !dvhs.contains_key(*n)) {
            return Err(Error::MissingDvh(missing.clone()));
        }
        let mut oar = vec![0.0f32; self.body_channel.len()];
        for r in &self.ranked {
            for (i, d) in map_dvh_onto_structure(r, &dvhs[&r.name]) {
                if d > oar[i] {
                    oar[i] = d;
                }
            }
        }
        let index_map = self.placement.index_map();
        let mut data = vec![0.0f32; index_map.len() * N_CHANNELS];
        for (k, src) in index_map.into_iter().enumerate() {
            if let Some(i) = src {
                data[k * N_CHANNELS + CH_PTV] = self.ptv_channel[i];
                data[k * N_CHANNELS + CH_OAR] = oar[i];
                data[k * N_CHANNELS + CH_BODY] = self.body_channel[i];
            }
        }
        ModelInput::new(self.placement, self.spacing, data)
    }
}

/// DVH of every PTV and OAR under `dose`.
pub fn structure_dvhs(dose: &VoxelGrid, structures: &StructureSet) -> Result<BTreeMap<String, DvhCurve>> {
    structures
        .iter()
        .filter(|s| s.kind != StructureKind::Body && s.voxel_count() > 0)
        .map(|s| Ok((s.name.clone(), dvh_curve(dose, s)?)))
        .collect()
}

pub fn assemble_input(
    case: &PatientCase,
    dvhs: &BTreeMap<String, DvhCurve>,
    kernel: KernelSpec,
) -> Result<ModelInput> {
    PatientGeometry::new(&case.structures, kernel)?.assemble(dvhs)
}

/// A patient's structures re-gridded onto the model kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct CroppedCase {
    pub id: String,
    pub site_id: String,
    pub placement: CropPlacement,
    pub structures: StructureSet,
}

impl CroppedCase {
    pub fn new(case: &PatientCase, placement: CropPlacement) -> Result<Self> {
        Ok(Self {
            id: case.id.clone(),
            site_id: case.site_id.clone(),
            placement,
            structures: case.structures.cropped(&placement)?,
        })
    }

    pub fn prescription(&self) -> f64 {
        self.structures.max_prescription()
    }
}

/// One training pair: model input and the kernel-cropped ground-truth dose.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    pub plan_index: usize,
    pub input: ModelInput,
    pub target: VoxelGrid,
    pub case: Arc<CroppedCase>,
}

/// One `(input, target)` pair per plan, ordered by `(patient id, plan
/// index)`. The desired DVHs at training time are each plan's own DVHs.
pub fn dataset_build(
    patients: &[PatientCase],
    plans: &[Plan],
    kernel: KernelSpec,
) -> Result<Vec<Sample>> {
    let mut order: Vec<&Plan> = plans.iter().collect();
    order.sort_by(|a, b| a.patient_id.cmp(&b.patient_id).then(a.plan_index.cmp(&b.plan_index)));
    let mut cache: BTreeMap<&str, (PatientGeometry, Arc<CroppedCase>, &PatientCase)> =
        BTreeMap::new();
    let mut out = Vec::with_capacity(order.len());
    for plan in order {
        if !cache.contains_key(plan.patient_id.as_str()) {
            let case = patients
                .iter()
                .find(|p| p.id == plan.patient_id)
                .ok_or_else(|| Error::Config(format!("plan references unknown patient `{}`", plan.patient_id)))?;
            let geom = PatientGeometry::new(&case.structures, kernel)?;
            let cropped = Arc::new(CroppedCase::new(case, geom.placement)?);
            cache.insert(case.id.as_str(), (geom, cropped, case));
        }
        let (geom, cropped, case) = &cache[plan.patient_id.as_str()];
        if plan.dose.dims() != case.structures.dims() {
            return Err(Error::Shape(format!(
                "plan {} of `{}` has dose dims {:?}, case grid is {:?}",
                plan.plan_index,
                plan.patient_id,
                plan.dose.dims(),
                case.structures.dims()
            )));
        }
        let dvhs = structure_dvhs(&plan.dose, &case.structures)?;
        out.push(Sample {
            patient_id: plan.patient_id.clone(),
            plan_index: plan.plan_index,
            input: geom.assemble(&dvhs)?,
            target: geom.placement.apply(&plan.dose)?,
            case: cropped.clone(),
        });
    }
    Ok(out)
}
