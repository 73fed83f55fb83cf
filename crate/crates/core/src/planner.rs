//! Ground-truth plan generation.
//!
//! A parallel-beam pencil model produces a sparse dose-influence matrix; each
//! plan minimizes a weighted sum of per-structure mean squared deviations
//! under a nonnegative fluence constraint, solved with the Chambolle-Pock
//! primal-dual iteration. Sampling the OAR weights log-uniformly walks the
//! Pareto surface of target coverage against organ sparing.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::PatientCase;
use crate::seed;
use crate::volume::{coord_of, Dims, Spacing, StructureKind, StructureSet, VoxelGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    /// Equispaced coplanar beams around the z axis.
    pub n_beams: usize,
    /// Beamlets per beam: (in-plane lateral, z).
    pub beamlet_grid: [usize; 2],
    /// Beamlet axis spacing at the isocenter plane (mm).
    pub beamlet_pitch_mm: f64,
    /// Linear attenuation per mm of traversed body.
    pub attenuation_mu: f64,
    /// Gaussian lateral falloff (mm).
    pub lateral_sigma: f64,
    /// Lateral distance beyond which a beamlet deposits nothing (mm).
    pub lateral_cutoff: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            n_beams: 7,
            beamlet_grid: [12, 8],
            beamlet_pitch_mm: 7.5,
            attenuation_mu: 0.005,
            lateral_sigma: 5.0,
            lateral_cutoff: 15.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.beamlet_pitch_mm,
            self.attenuation_mu,
            self.lateral_sigma,
            self.lateral_cutoff,
        ];
        if self.n_beams == 0
            || self.beamlet_grid.contains(&0)
            || positive.iter().any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::Config(format!("invalid beam configuration {self:?}")));
        }
        Ok(())
    }

    /// Dose deposited per unit fluence at `depth_mm` below the body surface
    /// and `r_mm` off the beamlet axis.
    pub fn kernel_value(&self, depth_mm: f64, r_mm: f64) -> f64 {
        if r_mm > self.lateral_cutoff {
            return 0.0;
        }
        libm::exp(-self.attenuation_mu * depth_mm)
            * libm::exp(-r_mm * r_mm / (2.0 * self.lateral_sigma * self.lateral_sigma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Beamlet {
    pub beam: u16,
    pub iu: u16,
    pub iv: u16,
}

/// Sparse voxel-by-beamlet influence matrix in CSR form. Row `r` is the
/// `r`-th body voxel in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    /// Grid index of each row.
    voxels: Vec<usize>,
    /// Row of each grid voxel, `u32::MAX` outside the body.
    row_of_voxel: Vec<u32>,
    beamlets: Vec<Beamlet>,
    dims: Dims,
    spacing: Spacing,
}

impl InfluenceMatrix {
    /// Dense constructor, mainly for small hand-built problems. Row `r` maps
    /// to grid voxel `r` of an `n_rows x 1 x 1` grid.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, |r| r.len());
        if n_cols == 0 || rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Shape("dense rows must be nonempty and equal length".into()));
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::Shape(format!("entry {v} is negative or non-finite")));
                }
                if v != 0.0 {
                    col_idx.push(j as u32);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        let n = rows.len();
        Ok(Self {
            n_cols,
            row_ptr,
            col_idx,
            values,
            voxels: (0..n).collect(),
            row_of_voxel: (0..n as u32).collect(),
            beamlets: (0..n_cols)
                .map(|j| Beamlet {
                    beam: 0,
                    iu: j as u16,
                    iv: 0,
                })
                .collect(),
            dims: [n, 1, 1],
            spacing: [1.0; 3],
        })
    }

    pub fn n_rows(&self) -> usize {
        self.voxels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn beamlets(&self) -> &[Beamlet] {
        &self.beamlets
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn row_voxel(&self, row: usize) -> usize {
        self.voxels[row]
    }

    pub fn row_of_voxel(&self, voxel: usize) -> Option<usize> {
        match self.row_of_voxel.get(voxel) {
            Some(&r) if r != u32::MAX => Some(r as usize),
            _ => None,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// `out = A x`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        for (r, o) in out.iter_mut().enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            *o = self.col_idx[span.clone()]
                .iter()
                .zip(&self.values[span])
                .map(|(&c, &v)| v * x[c as usize])
                .sum();
        }
    }

    /// `out = A^T y`, accumulated row by row in a fixed order.
    pub fn matvec_t(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            for (&c, &v) in self.col_idx[span.clone()].iter().zip(&self.values[span]) {
                out[c as usize] += v * yr;
            }
        }
    }
}

fn nearest_index(p: [f64; 3], dims: Dims, spacing: Spacing) -> Option<usize> {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let f = libm::round(p[a] / spacing[a] as f64);
        if f < 0.0 || f >= dims[a] as f64 {
            return None;
        }
        c[a] = f as usize;
    }
    Some(c[0] + dims[0] * (c[1] + dims[1] * c[2]))
}

/// Radiological depth of every body voxel for a beam travelling along
/// `dir`, sampled backward from the voxel center.
fn depth_map(body: &[bool], dims: Dims, spacing: Spacing, dir: [f64; 3]) -> Vec<f64> {
    let step = 0.25 * spacing.iter().fold(f64::INFINITY, |m, &s| m.min(s as f64));
    body.iter()
        .enumerate()
        .map(|(i, &inside)| {
            if !inside {
                return 0.0;
            }
            let c = coord_of(i, dims);
            let p: [f64; 3] = core::array::from_fn(|a| c[a] as f64 * spacing[a] as f64);
            let mut depth = 0.0;
            let mut t = 0.5 * step;
            loop {
                let q: [f64; 3] = core::array::from_fn(|a| p[a] - t * dir[a]);
                match nearest_index(q, dims, spacing) {
                    None => break,
                    Some(j) => {
                        if body[j] {
                            depth += step;
                        }
                    }
                }
                t += step;
            }
            depth
        })
        .collect()
}

/// Builds the influence matrix for `case`. Beamlet grids are centered on
/// the centroid of the PTV union; beamlets that reach no PTV voxel are
/// dropped.
pub fn build_influence_matrix(case: &PatientCase, cfg: &BeamConfig) -> Result<InfluenceMatrix> {
    cfg.validate()?;
    let s = &case.structures;
    let dims = s.dims();
    let spacing = s.spacing();
    let body: Vec<bool> = s.body().mask.data().iter().map(|&v| v != 0.0).collect();
    let mut ptv = vec![false; body.len()];
    for p in s.ptvs() {
        for (dst, &v) in ptv.iter_mut().zip(p.mask.data()) {
            *dst |= v != 0.0;
        }
    }
    let n_ptv = ptv.iter().filter(|&&b| b).count();
    if n_ptv == 0 {
        return Err(Error::Geometry("PTV union is empty".into()));
    }
    let mut iso = [0.0f64; 3];
    for (i, _) in ptv.iter().enumerate().filter(|(_, &b)| b) {
        let c = coord_of(i, dims);
        for a in 0..3 {
            iso[a] += c[a] as f64 * spacing[a] as f64;
        }
    }
    iso.iter_mut().for_each(|v| *v /= n_ptv as f64);

    let voxels: Vec<usize> = (0..body.len()).filter(|&i| body[i]).collect();
    let mut row_of_voxel = vec![u32::MAX; body.len()];
    for (r, &v) in voxels.iter().enumerate() {
        row_of_voxel[v] = r as u32;
    }

    let [nu, nv] = cfg.beamlet_grid;
    let pitch = cfg.beamlet_pitch_mm;
    let u0 = -((nu - 1) as f64) / 2.0 * pitch;
    let v0 = -((nv - 1) as f64) / 2.0 * pitch;
    let per_beam = nu * nv;
    let total = cfg.n_beams * per_beam;
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); voxels.len()];
    for b in 0..cfg.n_beams {
        let theta = core::f64::consts::TAU * b as f64 / cfg.n_beams as f64;
        let (st, ct) = libm::sincos(theta);
        let dir = [ct, st, 0.0];
        let eu = [-st, ct, 0.0];
        let depth = depth_map(&body, dims, spacing, dir);
        for (r, &vox) in voxels.iter().enumerate() {
            let c = coord_of(vox, dims);
            let rel: [f64; 3] = core::array::from_fn(|a| c[a] as f64 * spacing[a] as f64 - iso[a]);
            let pu = rel[0] * eu[0] + rel[1] * eu[1];
            let pv = rel[2];
            let iu_lo = libm::ceil((pu - cfg.lateral_cutoff - u0) / pitch).max(0.0) as usize;
            let iu_hi = libm::floor((pu + cfg.lateral_cutoff - u0) / pitch);
            let iv_lo = libm::ceil((pv - cfg.lateral_cutoff - v0) / pitch).max(0.0) as usize;
            let iv_hi = libm::floor((pv + cfg.lateral_cutoff - v0) / pitch);
            if iu_hi < 0.0 || iv_hi < 0.0 {
                continue;
            }
            let iu_hi = (iu_hi as usize).min(nu - 1);
            let iv_hi = (iv_hi as usize).min(nv - 1);
            for iv in iv_lo..=iv_hi {
                for iu in iu_lo..=iu_hi {
                    let du = pu - (u0 + iu as f64 * pitch);
                    let dv = pv - (v0 + iv as f64 * pitch);
                    let val = cfg.kernel_value(depth[vox], libm::sqrt(du * du + dv * dv));
                    if val > 0.0 {
                        rows[r].push(((b * per_beam + iv * nu + iu) as u32, val));
                    }
                }
            }
        }
    }

    let mut keep = vec![false; total];
    for (r, &vox) in voxels.iter().enumerate() {
        if ptv[vox] {
            if rows[r].is_empty() {
                let c = coord_of(vox, dims);
                return Err(Error::Geometry(format!(
                    "PTV voxel {c:?} is not reached by any beamlet"
                )));
            }
            for &(j, _) in &rows[r] {
                keep[j as usize] = true;
            }
        }
    }
    let mut remap = vec![u32::MAX; total];
    let mut beamlets = Vec::new();
    for (j, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        remap[j] = beamlets.len() as u32;
        let b = j / per_beam;
        let rem = j % per_beam;
        beamlets.push(Beamlet {
            beam: b as u16,
            iu: (rem % nu) as u16,
            iv: (rem / nu) as u16,
        });
    }
    let mut row_ptr = Vec::with_capacity(voxels.len() + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    for row in &mut rows {
        row.retain(|&(j, _)| keep[j as usize]);
        row.sort_by_key(|&(j, _)| j);
        for &(j, v) in row.iter() {
            col_idx.push(remap[j as usize]);
            values.push(v);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(InfluenceMatrix {
        n_cols: beamlets.len(),
        row_ptr,
        col_idx,
        values,
        voxels,
        row_of_voxel,
        beamlets,
        dims,
        spacing,
    })
}

/// Per-structure tradeoff weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanWeights {
    pub weights: Vec<(String, f64)>,
    pub bounds: WeightBounds,
}

impl PlanWeights {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.weights.iter().find(|(n, _)| n == name).map(|&(_, w)| w)
    }

    pub fn set(&mut self, name: &str, w: f64) {
        if let Some(e) = self.weights.iter_mut().find(|(n, _)| n == name) {
            e.1 = w;
        }
    }

    /// Every structure at weight 1.
    pub fn uniform(structures: &StructureSet) -> Self {
        Self {
            weights: structures
                .iter()
                .filter(|s| s.kind != StructureKind::Body)
                .map(|s| (s.name.clone(), 1.0))
                .collect(),
            bounds: WeightBounds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightBounds {
    pub ptv: f64,
    /// Log-uniform range for OAR weights.
    pub oar: [f64; 2],
}

impl Default for WeightBounds {
    fn default() -> Self {
        Self {
            ptv: 1.0,
            oar: [0.01, 1.0],
        }
    }
}

/// Fixed PTV weights; OAR weights log-uniform within `bounds.oar`.
pub fn sample_weights(structures: &StructureSet, bounds: WeightBounds, seed: u64) -> Result<PlanWeights> {
    let [lo, hi] = bounds.oar;
    if !(lo > 0.0 && lo <= hi && bounds.ptv > 0.0) {
        return Err(Error::Config(format!("invalid weight bounds {bounds:?}")));
    }
    let mut rng = seed::rng(seed);
    let (llo, lhi) = (libm::log(lo), libm::log(hi));
    let weights = structures
        .iter()
        .filter_map(|s| match s.kind {
            StructureKind::Ptv => Some((s.name.clone(), bounds.ptv)),
            StructureKind::Oar => {
                let w = if lo == hi {
                    lo
                } else {
                    libm::exp(rng.gen_range(llo..=lhi)).clamp(lo, hi)
                };
                Some((s.name.clone(), w))
            }
            StructureKind::Body => None,
        })
        .collect();
    Ok(PlanWeights { weights, bounds })
}

/// One objective term: `weight / N * ||A_rows x - target||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBlock {
    pub name: String,
    pub rows: Vec<usize>,
    pub target: f64,
    pub weight: f64,
}

impl ObjectiveBlock {
    fn scale(&self) -> f64 {
        self.weight / self.rows.len() as f64
    }
}

/// Objective blocks for every PTV (target = prescription) and OAR
/// (target = 0). A voxel in several structures appears in each block.
pub fn objective_blocks(
    a: &InfluenceMatrix,
    structures: &StructureSet,
    weights: &PlanWeights,
) -> Result<Vec<ObjectiveBlock>> {
    let mut blocks = Vec::new();
    for s in structures.iter().filter(|s| s.kind != StructureKind::Body) {
        let w = weights
            .get(&s.name)
            .ok_or_else(|| Error::Config(format!("no weight for `{}`", s.name)))?;
        if !(w > 0.0) {
            return Err(Error::Config(format!("weight for `{}` must be positive", s.name)));
        }
        let rows = s
            .indices()
            .into_iter()
            .map(|v| {
                a.row_of_voxel(v)
                    .ok_or_else(|| Error::Shape(format!("`{}` voxel {v} has no matrix row", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            continue;
        }
        blocks.push(ObjectiveBlock {
            name: s.name.clone(),
            rows,
            target: s.prescription.unwrap_or(0.0),
            weight: w,
        });
    }
    Ok(blocks)
}

fn check_dims(a: &InfluenceMatrix, blocks: &[ObjectiveBlock], x: &[f64]) -> Result<()> {
    if x.len() != a.n_cols() {
        return Err(Error::Shape(format!(
            "fluence has {} entries, matrix has {} columns",
            x.len(),
            a.n_cols()
        )));
    }
    if let Some(b) = blocks.iter().find(|b| b.rows.iter().any(|&r| r >= a.n_rows())) {
        return Err(Error::Shape(format!("block `{}` indexes past the matrix", b.name)));
    }
    Ok(())
}

/// `sum_s w_s / N_s * ||A_s x - p_s||^2`.
pub fn objective(a: &InfluenceMatrix, blocks: &[ObjectiveBlock], x: &[f64]) -> Result<f64> {
    check_dims(a, blocks, x)?;
    let mut ax = vec![0.0; a.n_rows()];
    a.matvec(x, &mut ax);
    Ok(objective_from_dose(blocks, &ax))
}

fn objective_from_dose(blocks: &[ObjectiveBlock], ax: &[f64]) -> f64 {
    blocks
        .iter()
        .map(|b| {
            b.scale()
                * b.rows
                    .iter()
                    .map(|&r| {
                        let d = ax[r] - b.target;
                        d * d
                    })
                    .sum::<f64>()
        })
        .sum()
}

/// Objective of a plan for given structures, convenience over
/// [`objective_blocks`] + [`objective`].
pub fn plan_objective(
    a: &InfluenceMatrix,
    structures: &StructureSet,
    weights: &PlanWeights,
    x: &[f64],
) -> Result<f64> {
    objective(a, &objective_blocks(a, structures, weights)?, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Step size factor: `tau = sigma = step_factor / ||K||`.
    pub step_factor: f64,
    pub theta: f64,
    pub max_iters: usize,
    /// Stop once `||x_k+1 - x_k|| <= tolerance * ||x_k+1||`.
    pub tolerance: f64,
    pub power_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            step_factor: 0.95,
            theta: 1.0,
            max_iters: 2000,
            tolerance: 1e-6,
            power_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpParams {
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub op_norm: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl CpParams {
    pub fn new(op_norm: f64, s: &SolverSettings) -> Result<Self> {
        let step = if op_norm > 0.0 { s.step_factor / op_norm } else { 1.0 };
        let p = Self {
            tau: step,
            sigma: step,
            theta: s.theta,
            op_norm,
            max_iters: s.max_iters,
            tolerance: s.tolerance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.sigma > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if self.tau * self.sigma * self.op_norm * self.op_norm > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "step condition violated: tau*sigma*||K||^2 = {}",
                self.tau * self.sigma * self.op_norm * self.op_norm
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// The stacked, row-scaled operator `K = [sqrt(c_s) A_s]_s` with
/// `c_s = w_s / N_s`, so that each block's data term becomes the
/// unit-curvature `||K_s x - sqrt(c_s) p_s||^2`.
struct StackedOperator<'a> {
    a: &'a InfluenceMatrix,
    blocks: &'a [ObjectiveBlock],
    scales: Vec<f64>,
    ax: Vec<f64>,
    back: Vec<f64>,
}

impl<'a> StackedOperator<'a> {
    fn new(a: &'a InfluenceMatrix, blocks: &'a [ObjectiveBlock]) -> Self {
        Self {
            a,
            blocks,
            scales: blocks.iter().map(|b| libm::sqrt(b.scale())).collect(),
            ax: vec![0.0; a.n_rows()],
            back: vec![0.0; a.n_rows()],
        }
    }

    fn dual_len(&self) -> usize {
        self.blocks.iter().map(|b| b.rows.len()).sum()
    }

    fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        self.a.matvec(x, &mut self.ax);
        let mut k = 0;
        for (b, &s) in self.blocks.iter().zip(&self.scales) {
            for &r in &b.rows {
                out[k] = s * self.ax[r];
                k += 1;
            }
        }
    }

    fn apply_t(&mut self, y: &[f64], out: &mut [f64]) {
        self.back.iter_mut().for_each(|v| *v = 0.0);
        let mut k = 0;
        for (b, &s) in self.blocks.iter().zip(&self.scales) {
            for &r in &b.rows {
                self.back[r] += s * y[k];
                k += 1;
            }
        }
        self.a.matvec_t(&self.back, out);
    }
}

fn norm2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Spectral norm of the stacked operator by power iteration on `K^T K`
/// from a seeded positive start vector.
pub fn operator_norm(
    a: &InfluenceMatrix,
    blocks: &[ObjectiveBlock],
    iters: usize,
    seed: u64,
) -> f64 {
    let mut op = StackedOperator::new(a, blocks);
    let mut rng = seed::rng(seed);
    let mut v: Vec<f64> = (0..a.n_cols()).map(|_| rng.gen_range(0.5..1.5)).collect();
    let mut kv = vec![0.0; op.dual_len()];
    let mut w = vec![0.0; a.n_cols()];
    let mut estimate = 0.0;
    let n = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n);
    for _ in 0..iters.max(1) {
        op.apply(&v, &mut kv);
        op.apply_t(&kv, &mut w);
        let wn = norm2(&w);
        if wn == 0.0 {
            return 0.0;
        }
        estimate = libm::sqrt(wn);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
    }
    estimate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    pub op_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub fluence: Vec<f64>,
    pub diagnostics: SolverDiagnostics,
}

/// Chambolle-Pock iteration for
/// `min_{x >= 0} sum_s ||K_s x - q_s||^2` (the row-scaled objective).
///
/// Dual step: `y <- prox_{sigma f*}(y + sigma K xbar)`, which for
/// `f(u) = ||u - q||^2` is `(v - sigma q) / (1 + sigma / 2)`.
/// Primal step: `x <- max(0, x - tau K^T y)`; extrapolation
/// `xbar <- x_new + theta (x_new - x_old)`.
pub fn solve(a: &InfluenceMatrix, blocks: &[ObjectiveBlock], params: &CpParams) -> Result<Solution> {
    params.validate()?;
    let mut op = StackedOperator::new(a, blocks);
    let m = op.dual_len();
    let q: Vec<f64> = blocks
        .iter()
        .zip(&op.scales)
        .flat_map(|(b, &s)| core::iter::repeat(s * b.target).take(b.rows.len()))
        .collect();
    let n = a.n_cols();
    let mut x = vec![0.0; n];
    let mut x_bar = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut y = vec![0.0; m];
    let mut kx = vec![0.0; m];
    let mut kty = vec![0.0; n];
    let (tau, sigma, theta) = (params.tau, params.sigma, params.theta);
    let shrink = 1.0 / (1.0 + sigma / 2.0);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..params.max_iters {
        op.apply(&x_bar, &mut kx);
        for ((yi, &ki), &qi) in y.iter_mut().zip(&kx).zip(&q) {
            *yi = (*yi + sigma * ki - sigma * qi) * shrink;
        }
        op.apply_t(&y, &mut kty);
        let mut diff2 = 0.0;
        let mut norm2_new = 0.0;
        for j in 0..n {
            let v = (x[j] - tau * kty[j]).max(0.0);
            if !v.is_finite() {
                return Err(Error::Divergence { iteration: it });
            }
            let d = v - x[j];
            diff2 += d * d;
            norm2_new += v * v;
            x_new[j] = v;
        }
        for j in 0..n {
            x_bar[j] = x_new[j] + theta * (x_new[j] - x[j]);
        }
        core::mem::swap(&mut x, &mut x_new);
        iterations = it + 1;
        if libm::sqrt(diff2) <= params.tolerance * libm::sqrt(norm2_new) {
            converged = true;
            break;
        }
    }
    let objective = objective(a, blocks, &x)?;
    Ok(Solution {
        fluence: x,
        diagnostics: SolverDiagnostics {
            iterations,
            objective,
            converged,
            op_norm: params.op_norm,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub patient_id: String,
    pub plan_index: usize,
    pub weights: PlanWeights,
    /// Nonnegative beamlet intensities, in matrix column order.
    pub fluence: Vec<f32>,
    /// `A * fluence` on the patient grid; zero outside the body.
    pub dose: VoxelGrid,
    pub diagnostics: SolverDiagnostics,
}

/// Scatters `A * fluence` back onto the grid.
pub fn dose_grid(a: &InfluenceMatrix, fluence: &[f64], spacing: Spacing) -> Result<VoxelGrid> {
    let mut ax = vec![0.0; a.n_rows()];
    a.matvec(fluence, &mut ax);
    let mut grid = VoxelGrid::zeros(a.dims(), spacing);
    let data = grid.data_mut();
    for (r, &d) in ax.iter().enumerate() {
        data[a.row_voxel(r)] = d as f32;
    }
    Ok(grid)
}

/// Solves one plan for fixed weights. The seed fixes the power-iteration
/// start vector.
pub fn solve_fluence(
    a: &InfluenceMatrix,
    case: &PatientCase,
    weights: &PlanWeights,
    settings: &SolverSettings,
    seed: u64,
) -> Result<Plan> {
    let blocks = objective_blocks(a, &case.structures, weights)?;
    let norm = operator_norm(a, &blocks, settings.power_iters, seed);
    let params = CpParams::new(norm, settings)?;
    let sol = solve(a, &blocks, &params)?;
    let fluence: Vec<f32> = sol.fluence.iter().map(|&v| v as f32).collect();
    let stored: Vec<f64> = fluence.iter().map(|&v| v as f64).collect();
    let mut diagnostics = sol.diagnostics;
    diagnostics.objective = objective(a, &blocks, &stored)?;
    Ok(Plan {
        patient_id: case.id.clone(),
        plan_index: 0,
        weights: weights.clone(),
        dose: dose_grid(a, &stored, case.structures.spacing())?,
        fluence,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub beams: BeamConfig,
    pub solver: SolverSettings,
    pub bounds: WeightBounds,
}

/// `count` plans with independently sampled weights. Plan `i` draws its
/// weights from `derive_seed(seed, "weights/i")` and its solver seed from
/// `derive_seed(seed, "solve/i")`.
pub fn generate_plans(
    case: &PatientCase,
    cfg: &PlanConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Plan>> {
    if count == 0 {
        return Err(Error::Config("plan count must be at least 1".into()));
    }
    let a = build_influence_matrix(case, &cfg.beams)?;
    (0..count)
        .map(|i| {
            let w = sample_weights(
                &case.structures,
                cfg.bounds,
                seed::derive_seed(seed, &format!("weights/{i}")),
            )
            .map_err(|e| e.in_plan(i))?;
            let mut plan = solve_fluence(&a, case, &w, &cfg.solver, plan_solve_seed(seed, i))
                .map_err(|e| e.in_plan(i))?;
            plan.plan_index = i;
            Ok(plan)
        })
        .collect()
}

pub fn plan_solve_seed(seed: u64, index: usize) -> u64 {
    seed::derive_seed(seed, &format!("solve/{index}"))
}

/// Mean dose of a structure under a plan.
pub fn structure_mean_dose(plan: &Plan, structures: &StructureSet, name: &str) -> Option<f64> {
    let s = structures.get(name)?;
    let idx = s.indices();
    if idx.is_empty() {
        return None;
    }
    Some(idx.iter().map(|&i| plan.dose.data()[i] as f64).sum::<f64>() / idx.len() as f64)
}

impl PlanWeights {
    pub fn names(&self) -> Vec<String> {
        self.weights.iter().map(|(n, _)| n.to_string()).collect()
    }
}
