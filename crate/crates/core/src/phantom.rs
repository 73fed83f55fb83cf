//! Synthetic patients built from filled ellipsoids.
//!
//! Two built-in sites stand in for a single-prescription pelvic cohort
//! (`siteA`) and a multi-prescription head-and-neck cohort with a variable
//! organ count (`siteB`). All shape parameters are invented for this tool;
//! they carry no anatomical statistics.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{
    coord_of, voxel_count, Dims, Impact, KernelSpec, Spacing, StructureKind, StructureMask,
    StructureSet, VoxelGrid, DEFAULT_SPACING_MM,
};

const RETRY_BUDGET: usize = 500;

/// Closed interval `[lo, hi]`.
pub type Interval = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OarTemplate {
    pub name: String,
    pub impact: Impact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapePalette {
    /// Body semi-axes (mm) per axis.
    pub body_radius_mm: [Interval; 3],
    /// Uniform jitter (mm) of the body center around the grid center.
    pub body_center_jitter_mm: [f64; 3],
    /// Minimum fraction of kernel voxels the body must cover.
    pub min_body_coverage: f64,
    /// Primary PTV semi-axes (mm).
    pub ptv_radius_mm: [Interval; 3],
    /// Jitter (mm) of the primary PTV center around the body center.
    pub ptv_center_jitter_mm: [f64; 3],
    /// Secondary PTV semi-axes relative to the primary's.
    pub secondary_ptv_scale: Interval,
    pub oar_radius_mm: [Interval; 3],
    /// Candidate organs; a case draws its OARs from this list.
    pub oar_catalog: Vec<OarTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub site_id: String,
    pub kernel: KernelSpec,
    /// Extent of the generated patient grid; the body is later cropped to
    /// `kernel`.
    pub grid_dims: Dims,
    pub spacing: Spacing,
    /// Normalized prescriptions, highest first.
    pub ptv_levels: Vec<f64>,
    pub oar_count_range: (usize, usize),
    /// Physical dose mapped to 1.0 in model space.
    pub normalization_constant: f64,
    pub shape_palette: ShapePalette,
}

impl SiteSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("site `{}`: {m}", self.site_id)));
        if self.ptv_levels.is_empty() {
            return bad("ptv_levels is empty".into());
        }
        if self.ptv_levels.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return bad(format!("ptv_levels {:?} outside (0, 1]", self.ptv_levels));
        }
        let (lo, hi) = self.oar_count_range;
        if lo > hi {
            return bad(format!("oar_count_range ({lo}, {hi}) is inverted"));
        }
        if hi > self.shape_palette.oar_catalog.len() {
            return bad(format!(
                "oar_count_range max {hi} exceeds catalog size {}",
                self.shape_palette.oar_catalog.len()
            ));
        }
        if !(self.normalization_constant > 0.0) {
            return bad("normalization_constant must be positive".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive".into());
        }
        if (0..3).any(|a| self.grid_dims[a] == 0 || self.kernel.dims[a] == 0) {
            return bad("zero grid or kernel extent".into());
        }
        let p = &self.shape_palette;
        let intervals = p
            .body_radius_mm
            .iter()
            .chain(&p.ptv_radius_mm)
            .chain(&p.oar_radius_mm)
            .chain(core::iter::once(&p.secondary_ptv_scale));
        for iv in intervals {
            if !(iv[0] > 0.0 && iv[0] <= iv[1]) {
                return bad(format!("invalid interval {iv:?}"));
            }
        }
        Ok(())
    }

    /// Structure name for the PTV at `level` index.
    pub fn ptv_name(&self, level: usize) -> String {
        if self.ptv_levels.len() == 1 {
            "ptv".to_string()
        } else {
            let dose = libm::round(self.ptv_levels[level] * self.normalization_constant);
            format!("ptv{}", dose as i64)
        }
    }
}

fn catalog(names: &[(&str, Impact)]) -> Vec<OarTemplate> {
    names
        .iter()
        .map(|&(n, i)| OarTemplate {
            name: n.to_string(),
            impact: i,
        })
        .collect()
}

/// Built-in site presets at desk scale (32x32x16 kernel).
pub fn builtin_site(name: &str) -> Result<SiteSpec> {
    use Impact::{High, Low};
    match name {
        "siteA" => Ok(SiteSpec {
            site_id: "siteA".into(),
            kernel: KernelSpec::new([32, 32, 16]),
            grid_dims: [36, 36, 20],
            spacing: DEFAULT_SPACING_MM,
            ptv_levels: vec![1.0],
            oar_count_range: (4, 4),
            normalization_constant: 70.0,
            shape_palette: ShapePalette {
                body_radius_mm: [[66.0, 76.0], [62.0, 74.0], [33.0, 38.0]],
                body_center_jitter_mm: [5.0, 5.0, 2.5],
                min_body_coverage: 0.25,
                ptv_radius_mm: [[22.0, 30.0], [22.0, 30.0], [16.0, 22.0]],
                ptv_center_jitter_mm: [10.0, 10.0, 5.0],
                secondary_ptv_scale: [0.8, 1.2],
                oar_radius_mm: [[8.0, 18.0], [8.0, 18.0], [8.0, 14.0]],
                oar_catalog: catalog(&[
                    ("bladder", High),
                    ("rectum", High),
                    ("femoral_head_l", Low),
                    ("femoral_head_r", Low),
                ]),
            },
        }),
        "siteB" => Ok(SiteSpec {
            site_id: "siteB".into(),
            kernel: KernelSpec::new([32, 32, 16]),
            grid_dims: [40, 40, 20],
            spacing: DEFAULT_SPACING_MM,
            ptv_levels: vec![1.0, 60.0 / 70.0, 54.0 / 70.0],
            oar_count_range: (5, 21),
            normalization_constant: 70.0,
            shape_palette: ShapePalette {
                body_radius_mm: [[66.0, 76.0], [66.0, 76.0], [33.0, 38.0]],
                body_center_jitter_mm: [5.0, 5.0, 2.5],
                min_body_coverage: 0.25,
                ptv_radius_mm: [[10.0, 18.0], [10.0, 18.0], [10.0, 15.0]],
                ptv_center_jitter_mm: [15.0, 15.0, 5.0],
                secondary_ptv_scale: [0.8, 1.2],
                oar_radius_mm: [[5.0, 12.0], [5.0, 12.0], [5.0, 10.0]],
                oar_catalog: catalog(&[
                    ("brainstem", High),
                    ("constrictors", High),
                    ("esophagus", High),
                    ("larynx", High),
                    ("oral_cavity", High),
                    ("parotid_l", High),
                    ("parotid_r", High),
                    ("submandibular_l", High),
                    ("submandibular_r", High),
                    ("spinal_cord", High),
                    ("brachial_plexus_l", Low),
                    ("brachial_plexus_r", Low),
                    ("cerebellum_l", Low),
                    ("cerebellum_r", Low),
                    ("cochlea_l", Low),
                    ("cochlea_r", Low),
                    ("mandible", Low),
                    ("masseter_l", Low),
                    ("masseter_r", Low),
                    ("pacs", Low),
                    ("lips", Low),
                ]),
            },
        }),
        other => Err(Error::Config(format!("unknown site preset `{other}`"))),
    }
}

/// Full-size kernel for a built-in site family (288x176x80 or 160x160x80).
pub fn full_scale_kernel(name: &str) -> Result<KernelSpec> {
    match name {
        "siteA" => Ok(KernelSpec::new([288, 176, 80])),
        "siteB" => Ok(KernelSpec::new([160, 160, 80])),
        other => Err(Error::Config(format!("unknown site preset `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientCase {
    pub id: String,
    pub site_id: String,
    pub seed: u64,
    pub structures: StructureSet,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s <= 1.0
    }

    fn rasterize(&self, dims: Dims, spacing: Spacing) -> Vec<bool> {
        (0..voxel_count(dims))
            .map(|i| self.contains(center_mm(coord_of(i, dims), spacing)))
            .collect()
    }
}

fn center_mm(c: [usize; 3], spacing: Spacing) -> [f64; 3] {
    [
        c[0] as f64 * spacing[0] as f64,
        c[1] as f64 * spacing[1] as f64,
        c[2] as f64 * spacing[2] as f64,
    ]
}

fn uniform(rng: &mut ChaCha8Rng, iv: Interval) -> f64 {
    if iv[0] == iv[1] {
        iv[0]
    } else {
        rng.gen_range(iv[0]..=iv[1])
    }
}

fn jitter(rng: &mut ChaCha8Rng, j: f64) -> f64 {
    if j > 0.0 {
        rng.gen_range(-j..=j)
    } else {
        0.0
    }
}

fn to_grid(mask: &[bool], dims: Dims, spacing: Spacing) -> VoxelGrid {
    let data = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    VoxelGrid::new(dims, spacing, data).expect("binary mask of matching length")
}

fn bbox_extent(mask: &[bool], dims: Dims) -> Option<[usize; 3]> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    let mut any = false;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        any = true;
        let c = coord_of(i, dims);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    any.then(|| [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1])
}

fn touches_border(mask: &[bool], dims: Dims) -> bool {
    mask.iter().enumerate().any(|(i, &m)| {
        m && {
            let c = coord_of(i, dims);
            (0..3).any(|a| c[a] == 0 || c[a] + 1 == dims[a])
        }
    })
}

fn subset_of(inner: &[bool], outer: &[bool]) -> bool {
    inner.iter().zip(outer).all(|(&i, &o)| !i || o)
}

fn sample_ellipsoid<F>(
    rng: &mut ChaCha8Rng,
    what: &str,
    mut propose: impl FnMut(&mut ChaCha8Rng) -> Ellipsoid,
    dims: Dims,
    spacing: Spacing,
    mut accept: F,
) -> Result<(Ellipsoid, Vec<bool>)>
where
    F: FnMut(&Ellipsoid, &[bool]) -> bool,
{
    for _ in 0..RETRY_BUDGET {
        let e = propose(rng);
        let mask = e.rasterize(dims, spacing);
        if mask.iter().any(|&m| m) && accept(&e, &mask) {
            return Ok((e, mask));
        }
    }
    Err(Error::Generation(format!(
        "could not place {what} within {RETRY_BUDGET} attempts"
    )))
}

/// Generates one synthetic patient. Deterministic in `(spec, seed)`; `id`
/// is only a label.
pub fn generate_patient(spec: &SiteSpec, id: &str, patient_seed: u64) -> Result<PatientCase> {
    spec.validate()?;
    let dims = spec.grid_dims;
    let spacing = spec.spacing;
    let pal = &spec.shape_palette;
    let mut rng = seed::rng(seed::derive_seed(
        patient_seed,
        &format!("phantom/{}", spec.site_id),
    ));

    let grid_center: [f64; 3] =
        core::array::from_fn(|a| (dims[a] - 1) as f64 / 2.0 * spacing[a] as f64);
    let min_cover = libm::ceil(pal.min_body_coverage * spec.kernel.voxel_count() as f64) as usize;
    let (body_e, body) = sample_ellipsoid(
        &mut rng,
        "body",
        |r| Ellipsoid {
            center: core::array::from_fn(|a| grid_center[a] + jitter(r, pal.body_center_jitter_mm[a])),
            radii: core::array::from_fn(|a| uniform(r, pal.body_radius_mm[a])),
        },
        dims,
        spacing,
        |_, m| {
            let fits = bbox_extent(m, dims)
                .is_some_and(|ext| (0..3).all(|a| ext[a] <= spec.kernel.dims[a]));
            fits && !touches_border(m, dims) && m.iter().filter(|&&v| v).count() >= min_cover
        },
    )?;

    let mut ptvs: Vec<(Ellipsoid, Vec<bool>)> = Vec::new();
    for level in 0..spec.ptv_levels.len() {
        let placed = if level == 0 {
            sample_ellipsoid(
                &mut rng,
                "primary PTV",
                |r| Ellipsoid {
                    center: core::array::from_fn(|a| {
                        body_e.center[a] + jitter(r, pal.ptv_center_jitter_mm[a])
                    }),
                    radii: core::array::from_fn(|a| uniform(r, pal.ptv_radius_mm[a])),
                },
                dims,
                spacing,
                |_, m| subset_of(m, &body),
            )?
        } else {
            let primary = ptvs[0].0;
            sample_ellipsoid(
                &mut rng,
                &spec.ptv_name(level),
                |r| {
                    let scale = uniform(r, pal.secondary_ptv_scale);
                    let radii: [f64; 3] = core::array::from_fn(|a| primary.radii[a] * scale);
                    let phi = r.gen_range(0.0..core::f64::consts::TAU);
                    let (s, c) = libm::sincos(phi);
                    // adjacent: centers ~0.8 of the summed in-plane radii apart
                    let reach = 0.8
                        * ((primary.radii[0] + radii[0]) * libm::fabs(c)
                            + (primary.radii[1] + radii[1]) * libm::fabs(s));
                    Ellipsoid {
                        center: [
                            primary.center[0] + reach * c,
                            primary.center[1] + reach * s,
                            primary.center[2] + jitter(r, 0.25 * primary.radii[2]),
                        ],
                        radii,
                    }
                },
                dims,
                spacing,
                |_, m| subset_of(m, &body),
            )?
        };
        ptvs.push(placed);
    }

    let (lo, hi) = spec.oar_count_range;
    let count = rng.gen_range(lo..=hi);
    let mut picks: Vec<usize> = (0..pal.oar_catalog.len()).collect();
    picks.shuffle(&mut rng);
    picks.truncate(count);
    picks.sort_unstable();

    let body_lo: [f64; 3] = core::array::from_fn(|a| body_e.center[a] - body_e.radii[a]);
    let body_hi: [f64; 3] = core::array::from_fn(|a| body_e.center[a] + body_e.radii[a]);
    let mut occupied = vec![false; body.len()];
    let mut oars = Vec::with_capacity(count);
    for &k in &picks {
        let t = &pal.oar_catalog[k];
        let (_, mask) = sample_ellipsoid(
            &mut rng,
            &t.name,
            |r| Ellipsoid {
                center: core::array::from_fn(|a| r.gen_range(body_lo[a]..=body_hi[a])),
                radii: core::array::from_fn(|a| uniform(r, pal.oar_radius_mm[a])),
            },
            dims,
            spacing,
            |e, m| {
                subset_of(m, &body)
                    && !ptvs.iter().any(|(p, _)| p.contains(e.center))
                    && m.iter().zip(&occupied).all(|(&a, &b)| !(a && b))
            },
        )?;
        for (o, &m) in occupied.iter_mut().zip(&mask) {
            *o |= m;
        }
        oars.push((t.clone(), mask));
    }

    let mut structures = Vec::with_capacity(1 + ptvs.len() + oars.len());
    structures.push(StructureMask::new(
        "body",
        StructureKind::Body,
        to_grid(&body, dims, spacing),
        None,
        None,
    )?);
    for (level, (_, m)) in ptvs.iter().enumerate() {
        structures.push(StructureMask::new(
            spec.ptv_name(level),
            StructureKind::Ptv,
            to_grid(m, dims, spacing),
            Some(spec.ptv_levels[level]),
            None,
        )?);
    }
    for (t, m) in oars {
        structures.push(StructureMask::new(
            t.name,
            StructureKind::Oar,
            to_grid(&m, dims, spacing),
            None,
            Some(t.impact),
        )?);
    }
    Ok(PatientCase {
        id: id.to_string(),
        site_id: spec.site_id.clone(),
        seed: patient_seed,
        structures: StructureSet::new(structures)?,
    })
}
