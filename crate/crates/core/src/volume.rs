//! Voxel grids, structure masks and kernel cropping.
//!
//! Grids are stored in z-major raster order: the linear index of voxel
//! `(x, y, z)` is `x + nx * (y + ny * z)`, so `x` varies fastest. The same
//! order is used on disk and to break distance ties during ranking.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f32; 3];

pub const DEFAULT_SPACING_MM: Spacing = [5.0, 5.0, 5.0];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Linear index of `coord` in a grid of `dims`.
pub fn linear_index(coord: [usize; 3], dims: Dims) -> Result<usize> {
    if (0..3).any(|a| coord[a] >= dims[a]) {
        return Err(Error::OutOfRange { coord, dims });
    }
    Ok(coord[0] + dims[0] * (coord[1] + dims[1] * coord[2]))
}

/// Inverse of [`linear_index`]. The caller guarantees `index < nx*ny*nz`.
#[inline]
pub fn coord_of(index: usize, dims: Dims) -> [usize; 3] {
    let x = index % dims[0];
    let rest = index / dims[0];
    [x, rest % dims[1], rest / dims[1]]
}

/// Dense scalar field over a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("zero extent in dims {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::InvalidGrid(format!(
                "payload has {} values, dims {dims:?} need {}",
                data.len(),
                voxel_count(dims)
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value at index {i}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            data: vec![0.0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the payload. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, coord: [usize; 3]) -> Result<f32> {
        Ok(self.data[linear_index(coord, self.dims)?])
    }

    pub fn same_geometry(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Physical position (mm) of a voxel center, origin at voxel (0,0,0).
    pub fn center_mm(&self, coord: [usize; 3]) -> [f64; 3] {
        [
            coord[0] as f64 * self.spacing[0] as f64,
            coord[1] as f64 * self.spacing[1] as f64,
            coord[2] as f64 * self.spacing[2] as f64,
        ]
    }

    /// Inclusive bounding box of all nonzero voxels.
    pub fn nonzero_bbox(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0.0 {
                any = true;
                let c = coord_of(i, self.dims);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StructureKind {
    Ptv,
    Oar,
    Body,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Impact {
    High,
    Low,
}

/// A named binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMask {
    pub name: String,
    pub kind: StructureKind,
    pub mask: VoxelGrid,
    /// Normalized prescription; PTVs only.
    pub prescription: Option<f64>,
    /// Clinical impact tag; OARs only.
    pub impact: Option<Impact>,
}

impl StructureMask {
    pub fn new(
        name: impl Into<String>,
        kind: StructureKind,
        mask: VoxelGrid,
        prescription: Option<f64>,
        impact: Option<Impact>,
    ) -> Result<Self> {
        let s = Self {
            name: name.into(),
            kind,
            mask,
            prescription,
            impact,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidStructures(format!(
                "`{}` has non-binary value at index {i}",
                self.name
            )));
        }
        match (self.kind, self.prescription) {
            (StructureKind::Ptv, Some(p)) if p > 0.0 && p.is_finite() => {}
            (StructureKind::Ptv, _) => {
                return Err(Error::InvalidStructures(format!(
                    "PTV `{}` needs a positive prescription",
                    self.name
                )))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidStructures(format!(
                    "`{}` is not a PTV but carries a prescription",
                    self.name
                )))
            }
            _ => {}
        }
        if self.kind != StructureKind::Oar && self.impact.is_some() {
            return Err(Error::InvalidStructures(format!(
                "impact tag on non-OAR `{}`",
                self.name
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        self.mask.data()[index] != 0.0
    }

    /// Linear indices of member voxels in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0.0).then_some(i))
            .collect()
    }

    pub fn voxel_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Ordered list of structures for one patient: one BODY, at least one PTV,
/// any number of OARs.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureSet {
    structures: Vec<StructureMask>,
}

impl StructureSet {
    pub fn new(structures: Vec<StructureMask>) -> Result<Self> {
        let bodies: Vec<&StructureMask> = structures
            .iter()
            .filter(|s| s.kind == StructureKind::Body)
            .collect();
        if bodies.len() != 1 {
            return Err(Error::InvalidStructures(format!(
                "expected exactly one BODY, found {}",
                bodies.len()
            )));
        }
        if !structures.iter().any(|s| s.kind == StructureKind::Ptv) {
            return Err(Error::InvalidStructures("no PTV".into()));
        }
        let body = bodies[0];
        let mut names = BTreeSet::new();
        for s in &structures {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(Error::InvalidStructures(format!(
                    "duplicate structure name `{}`",
                    s.name
                )));
            }
            if !s.mask.same_geometry(&body.mask) {
                return Err(Error::InvalidStructures(format!(
                    "`{}` grid differs from BODY grid",
                    s.name
                )));
            }
            if s.kind != StructureKind::Body {
                let outside = s
                    .mask
                    .data()
                    .iter()
                    .zip(body.mask.data())
                    .position(|(&m, &b)| m != 0.0 && b == 0.0);
                if let Some(i) = outside {
                    return Err(Error::InvalidStructures(format!(
                        "`{}` voxel {i} lies outside BODY",
                        s.name
                    )));
                }
            }
        }
        Ok(Self { structures })
    }

    pub fn iter(&self) -> impl Iterator<Item = &StructureMask> {
        self.structures.iter()
    }

    pub fn as_slice(&self) -> &[StructureMask] {
        &self.structures
    }

    pub fn len(&self) -> usize {
        self.structures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structures.is_empty()
    }

    pub fn body(&self) -> &StructureMask {
        self.structures
            .iter()
            .find(|s| s.kind == StructureKind::Body)
            .expect("validated: one BODY")
    }

    pub fn ptvs(&self) -> impl Iterator<Item = &StructureMask> {
        self.structures.iter().filter(|s| s.kind == StructureKind::Ptv)
    }

    pub fn oars(&self) -> impl Iterator<Item = &StructureMask> {
        self.structures.iter().filter(|s| s.kind == StructureKind::Oar)
    }

    pub fn get(&self, name: &str) -> Option<&StructureMask> {
        self.structures.iter().find(|s| s.name == name)
    }

    pub fn dims(&self) -> Dims {
        self.body().mask.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.body().mask.spacing()
    }

    /// Highest PTV prescription; the normalization basis for percent errors.
    pub fn max_prescription(&self) -> f64 {
        self.ptvs()
            .filter_map(|s| s.prescription)
            .fold(0.0, f64::max)
    }
}

/// Fixed model input extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub dims: Dims,
}

impl KernelSpec {
    pub const fn new(dims: Dims) -> Self {
        Self { dims }
    }

    /// Checks every extent is positive and divisible by `2^pools`.
    pub fn validate(&self, pools: u32) -> Result<()> {
        let factor = 1usize << pools;
        for (a, &d) in Axis::ALL.iter().zip(&self.dims) {
            if d == 0 || d % factor != 0 {
                return Err(Error::Config(format!(
                    "kernel extent {d} on axis {a} not divisible by 2^{pools}"
                )));
            }
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.dims)
    }
}

/// Placement of a kernel window inside a source grid.
///
/// Kernel voxel `k` maps to source voxel `k + offset`; offsets may be
/// negative, in which case the window extends past the source and those
/// voxels read as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlacement {
    pub offset: [i64; 3],
    pub source_dims: Dims,
    pub kernel: KernelSpec,
}

impl CropPlacement {
    /// Centers the body's bounding box in the kernel, ties toward the lower
    /// index.
    pub fn for_body(body: &StructureMask, kernel: KernelSpec) -> Result<Self> {
        let (lo, hi) = body
            .mask
            .nonzero_bbox()
            .ok_or_else(|| Error::InvalidStructures(format!("`{}` is empty", body.name)))?;
        let mut offset = [0i64; 3];
        for a in 0..3 {
            let extent = hi[a] - lo[a] + 1;
            let k = kernel.dims[a];
            if extent > k {
                return Err(Error::KernelTooSmall {
                    axis: Axis::ALL[a],
                    extent,
                    kernel: k,
                });
            }
            offset[a] = lo[a] as i64 - ((k - extent) / 2) as i64;
        }
        Ok(Self {
            offset,
            source_dims: body.mask.dims(),
            kernel,
        })
    }

    #[inline]
    fn source_index(&self, k: [usize; 3]) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let s = k[a] as i64 + self.offset[a];
            if s < 0 || s >= self.source_dims[a] as i64 {
                return None;
            }
            c[a] = s as usize;
        }
        Some(c[0] + self.source_dims[0] * (c[1] + self.source_dims[1] * c[2]))
    }

    /// For every kernel voxel, the source index it reads (if inside).
    pub fn index_map(&self) -> Vec<Option<usize>> {
        let kd = self.kernel.dims;
        (0..voxel_count(kd))
            .map(|i| self.source_index(coord_of(i, kd)))
            .collect()
    }

    pub fn apply(&self, grid: &VoxelGrid) -> Result<VoxelGrid> {
        if grid.dims() != self.source_dims {
            return Err(Error::Shape(format!(
                "grid dims {:?} differ from placement source {:?}",
                grid.dims(),
                self.source_dims
            )));
        }
        let src = grid.data();
        let data = self
            .index_map()
            .into_iter()
            .map(|s| s.map_or(0.0, |i| src[i]))
            .collect();
        VoxelGrid::new(self.kernel.dims, grid.spacing(), data)
    }

    /// Maps a kernel-shaped grid back onto the source grid; source voxels
    /// outside the window are zero.
    pub fn restore(&self, cropped: &VoxelGrid) -> Result<VoxelGrid> {
        if cropped.dims() != self.kernel.dims {
            return Err(Error::Shape(format!(
                "cropped dims {:?} differ from kernel {:?}",
                cropped.dims(),
                self.kernel.dims
            )));
        }
        let mut out = VoxelGrid::zeros(self.source_dims, cropped.spacing());
        let dst = out.data_mut();
        for (k, s) in self.index_map().into_iter().enumerate() {
            if let Some(i) = s {
                dst[i] = cropped.data()[k];
            }
        }
        Ok(out)
    }
}

/// Crops `grid` to the kernel around the body; returns the placement so the
/// result can be mapped back.
pub fn crop_to_kernel(
    grid: &VoxelGrid,
    body: &StructureMask,
    kernel: KernelSpec,
) -> Result<(VoxelGrid, CropPlacement)> {
    let placement = CropPlacement::for_body(body, kernel)?;
    Ok((placement.apply(grid)?, placement))
}

impl StructureSet {
    /// Same structures re-gridded through `placement`.
    pub fn cropped(&self, placement: &CropPlacement) -> Result<StructureSet> {
        let structures = self
            .structures
            .iter()
            .map(|s| {
                Ok(StructureMask {
                    name: s.name.clone(),
                    kind: s.kind,
                    mask: placement.apply(&s.mask)?,
                    prescription: s.prescription,
                    impact: s.impact,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        StructureSet::new(structures)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn body_box(dims: Dims, lo: [usize; 3], hi: [usize; 3]) -> StructureMask {
        let mut g = VoxelGrid::zeros(dims, DEFAULT_SPACING_MM);
        for i in 0..g.len() {
            let c = coord_of(i, dims);
            if (0..3).all(|a| c[a] >= lo[a] && c[a] <= hi[a]) {
                g.data_mut()[i] = 1.0;
            }
        }
        StructureMask::new("body", StructureKind::Body, g, None, None).unwrap()
    }

    #[test]
    fn linear_index_examples() {
        assert_eq!(linear_index([0, 0, 0], [4, 4, 4]).unwrap(), 0);
        assert_eq!(linear_index([3, 3, 3], [4, 4, 4]).unwrap(), 63);
        assert_eq!(linear_index([1, 2, 3], [4, 5, 6]).unwrap(), 69);
        assert!(matches!(
            linear_index([4, 0, 0], [4, 4, 4]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(VoxelGrid::new([2, 2, 2], [5.0; 3], vec![0.0; 7]).is_err());
        assert!(VoxelGrid::new([2, 2, 2], [0.0, 5.0, 5.0], vec![0.0; 8]).is_err());
        let mut d = vec![0.0; 8];
        d[3] = f32::NAN;
        assert!(VoxelGrid::new([2, 2, 2], [5.0; 3], d).is_err());
    }

    #[test]
    fn crop_centers_body() {
        let body = body_box([40, 40, 20], [5, 7, 3], [14, 16, 12]);
        let (_, p) = crop_to_kernel(&body.mask, &body, KernelSpec::new([32, 32, 16])).unwrap();
        // 10-voxel bbox in 32 voxels: 11 voxels of slack on each side.
        assert_eq!(p.offset, [5 - 11, 7 - 11, 3 - 3]);
        let (c, _) = crop_to_kernel(&body.mask, &body, KernelSpec::new([32, 32, 16])).unwrap();
        let (lo, hi) = c.nonzero_bbox().unwrap();
        for a in 0..3 {
            let k = [32, 32, 16][a] as f64;
            assert_eq!((lo[a] + hi[a]) as f64 / 2.0, (k - 1.0) / 2.0);
        }
    }

    #[test]
    fn crop_tight_fit_is_identity() {
        let body = body_box([8, 8, 4], [0, 0, 0], [7, 7, 3]);
        let (c, p) = crop_to_kernel(&body.mask, &body, KernelSpec::new([8, 8, 4])).unwrap();
        assert_eq!(p.offset, [0, 0, 0]);
        assert_eq!(c, body.mask);
    }

    #[test]
    fn crop_odd_slack_breaks_low() {
        let body = body_box([10, 10, 10], [2, 2, 2], [3, 3, 3]);
        let (_, p) = crop_to_kernel(&body.mask, &body, KernelSpec::new([5, 4, 4])).unwrap();
        // extent 2, kernel 5: slack 3 -> 1 voxel before, 2 after.
        assert_eq!(p.offset[0], 1);
        assert_eq!(p.offset[1], 1);
    }

    #[test]
    fn crop_too_small_names_axis() {
        let body = body_box([50, 20, 10], [0, 0, 0], [39, 9, 9]);
        let err = crop_to_kernel(&body.mask, &body, KernelSpec::new([32, 32, 16])).unwrap_err();
        assert_eq!(
            err,
            Error::KernelTooSmall {
                axis: Axis::X,
                extent: 40,
                kernel: 32
            }
        );
    }

    #[test]
    fn structure_set_rejects_escape() {
        let body = body_box([4, 4, 4], [0, 0, 0], [1, 3, 3]);
        let ptv_mask = body_box([4, 4, 4], [2, 0, 0], [2, 0, 0]).mask;
        let ptv = StructureMask::new("ptv", StructureKind::Ptv, ptv_mask, Some(1.0), None).unwrap();
        assert!(StructureSet::new(vec![body, ptv]).is_err());
    }

    #[test]
    fn ptv_requires_prescription() {
        let g = VoxelGrid::zeros([2, 2, 2], DEFAULT_SPACING_MM);
        assert!(StructureMask::new("p", StructureKind::Ptv, g.clone(), None, None).is_err());
        assert!(StructureMask::new("o", StructureKind::Oar, g, Some(1.0), None).is_err());
    }

    proptest! {
        #[test]
        fn index_bijective(nx in 1usize..9, ny in 1usize..9, nz in 1usize..9, seed in 0usize..10_000) {
            let dims = [nx, ny, nz];
            let i = seed % voxel_count(dims);
            let c = coord_of(i, dims);
            prop_assert_eq!(linear_index(c, dims).unwrap(), i);
        }

        #[test]
        fn crop_restore_preserves_body_region(
            lo in prop::array::uniform3(0usize..6),
            ext in prop::array::uniform3(1usize..6),
            vals in prop::collection::vec(-5.0f32..5.0, 12 * 12 * 12),
        ) {
            let dims = [12, 12, 12];
            let hi = [lo[0] + ext[0] - 1, lo[1] + ext[1] - 1, lo[2] + ext[2] - 1];
            let body = body_box(dims, lo, hi);
            let grid = VoxelGrid::new(dims, DEFAULT_SPACING_MM, vals).unwrap();
            let (c, p) = crop_to_kernel(&grid, &body, KernelSpec::new([8, 8, 8])).unwrap();
            let back = p.restore(&c).unwrap();
            for i in body.indices() {
                prop_assert_eq!(back.data()[i].to_bits(), grid.data()[i].to_bits());
            }
        }
    }
}
