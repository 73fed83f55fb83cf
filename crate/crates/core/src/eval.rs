//! Dose-volume histograms, DVH metrics, percent errors, isodose-volume MSE
//! and the paired two-sided t-test.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Impact, StructureKind, StructureMask, StructureSet, VoxelGrid};

/// Cumulative DVH of one structure, kept as its voxel doses sorted in
/// descending order: `d(1) >= d(2) >= ... >= d(N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhCurve {
    pub name: String,
    doses: Vec<f32>,
    mean: f64,
}

impl DvhCurve {
    /// Builds a curve from per-voxel doses in any order. The mean is
    /// accumulated in the order given.
    pub fn from_doses(name: impl Into<String>, doses: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if doses.is_empty() {
            return Err(Error::Evaluation(format!("structure `{name}` is empty")));
        }
        if doses.iter().any(|d| !d.is_finite()) {
            return Err(Error::Evaluation(format!("non-finite dose in `{name}`")));
        }
        let mean = doses.iter().map(|&d| d as f64).sum::<f64>() / doses.len() as f64;
        let mut doses = doses;
        doses.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { name, doses, mean })
    }

    /// Constant curve: every fraction receives `dose`.
    pub fn constant(name: impl Into<String>, dose: f32, samples: usize) -> Result<Self> {
        Self::from_doses(name, vec![dose; samples.max(1)])
    }

    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }

    /// Sorted (descending) dose samples.
    pub fn doses(&self) -> &[f32] {
        &self.doses
    }

    /// Dose received by at least fraction `q` of the volume: `d(ceil(q*N))`,
    /// clamped to the valid order statistics.
    pub fn dose_at_fraction(&self, q: f64) -> f32 {
        let n = self.doses.len();
        let k = libm::ceil(q * n as f64);
        let k = if k < 1.0 { 1 } else if k > n as f64 { n } else { k as usize };
        self.doses[k - 1]
    }

    /// `D{percent}` using the exact integer order statistic
    /// `d(ceil(percent * N / 100))`.
    pub fn dose_at_percent(&self, percent: u32) -> f32 {
        let n = self.doses.len();
        let k = (percent as usize * n).div_ceil(100).clamp(1, n);
        self.doses[k - 1]
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn max(&self) -> f32 {
        self.doses[0]
    }

    pub fn min(&self) -> f32 {
        self.doses[self.doses.len() - 1]
    }

    /// `(dose, volume fraction)` pairs: the k-th largest dose is received by
    /// at least `k/N` of the volume.
    pub fn table(&self) -> Vec<(f32, f64)> {
        let n = self.doses.len() as f64;
        self.doses
            .iter()
            .enumerate()
            .map(|(k, &d)| (d, (k + 1) as f64 / n))
            .collect()
    }
}

/// Collects the doses of `mask`'s voxels and sorts them.
pub fn dvh_curve(dose: &VoxelGrid, mask: &StructureMask) -> Result<DvhCurve> {
    if dose.dims() != mask.mask.dims() {
        return Err(Error::Shape(format!(
            "dose dims {:?} vs mask `{}` dims {:?}",
            dose.dims(),
            mask.name,
            mask.mask.dims()
        )));
    }
    let doses: Vec<f32> = mask
        .mask
        .data()
        .iter()
        .zip(dose.data())
        .filter_map(|(&m, &d)| (m != 0.0).then_some(d))
        .collect();
    if doses.is_empty() {
        return Err(Error::Evaluation(format!("structure `{}` has no voxels", mask.name)));
    }
    DvhCurve::from_doses(mask.name.clone(), doses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DvhMetric {
    D98,
    D95,
    D02,
    Dmean,
    Dmax,
}

impl DvhMetric {
    pub const PTV_SET: [DvhMetric; 5] = [
        DvhMetric::Dmean,
        DvhMetric::Dmax,
        DvhMetric::D98,
        DvhMetric::D95,
        DvhMetric::D02,
    ];
    pub const OAR_SET: [DvhMetric; 2] = [DvhMetric::Dmean, DvhMetric::Dmax];

    pub fn label(&self) -> &'static str {
        match self {
            DvhMetric::D98 => "D98",
            DvhMetric::D95 => "D95",
            DvhMetric::D02 => "D02",
            DvhMetric::Dmean => "Dmean",
            DvhMetric::Dmax => "Dmax",
        }
    }
}

impl core::fmt::Display for DvhMetric {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.label())
    }
}

/// Dmax is the hottest voxel; D02 is reported separately.
pub fn dvh_metric(curve: &DvhCurve, metric: DvhMetric) -> f64 {
    match metric {
        DvhMetric::D98 => curve.dose_at_percent(98) as f64,
        DvhMetric::D95 => curve.dose_at_percent(95) as f64,
        DvhMetric::D02 => curve.dose_at_percent(2) as f64,
        DvhMetric::Dmean => curve.mean(),
        DvhMetric::Dmax => curve.max() as f64,
    }
}

/// `|pred - gt| / prescription * 100`.
pub fn metric_error(pred: f64, gt: f64, prescription: f64) -> Result<f64> {
    if !(prescription > 0.0) {
        return Err(Error::Evaluation(format!(
            "prescription must be positive, got {prescription}"
        )));
    }
    Ok(libm::fabs(pred - gt) / prescription * 100.0)
}

/// Mean squared error over the voxels where the ground truth reaches
/// `v_percent`% of the prescription.
pub fn isodose_mse(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    prescription: f64,
    v_percent: f64,
) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let threshold = v_percent / 100.0 * prescription;
    let (sum, count) = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &g)| g as f64 >= threshold)
        .fold((0.0f64, 0usize), |(s, c), (&p, &g)| {
            let d = p as f64 - g as f64;
            (s + d * d, c + 1)
        });
    if count == 0 {
        return Err(Error::Evaluation(format!(
            "{v_percent}% isodose region is empty"
        )));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub alpha: f64,
    pub significant: bool,
    /// Zero-variance differences; `p` is 1 (all zero) or 0 (constant shift).
    pub degenerate: bool,
}

/// Paired two-sided Student t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Evaluation(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Evaluation("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = libm::sqrt(var);
    let df = n - 1;
    let result = |t: f64, p: f64, degenerate: bool| TTestResult {
        t,
        df,
        p,
        alpha,
        significant: p < alpha,
        degenerate,
    };
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            result(0.0, 1.0, true)
        } else {
            result(mean.signum() * f64::INFINITY, 0.0, true)
        });
    }
    let t = mean / (sd / libm::sqrt(n as f64));
    Ok(result(t, student_t_two_sided(t, df as f64), false))
}

/// Two-sided tail probability `P(|T| >= |t|)` for Student's t with `df`
/// degrees of freedom, via the regularized incomplete beta function.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// `I_x(a, b)` by Lentz's continued fraction, using the symmetry relation
/// where the fraction converges faster.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if libm::fabs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if libm::fabs(del - 1.0) < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub structure: String,
    pub kind: StructureKind,
    pub impact: Option<Impact>,
    pub metric: DvhMetric,
    pub predicted: f64,
    pub ground_truth: f64,
    pub error_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Highest PTV prescription, used to normalize every error.
    pub prescription: f64,
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn error(&self, structure: &str, metric: DvhMetric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.structure == structure && r.metric == metric)
            .map(|r| r.error_percent)
    }

    /// Distinct structure names in report order.
    pub fn structures(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.structure.as_str()) {
                out.push(&r.structure);
            }
        }
        out
    }
}

fn group_rank(s: &StructureMask) -> u8 {
    match (s.kind, s.impact) {
        (StructureKind::Ptv, _) => 0,
        (StructureKind::Oar, Some(Impact::High)) => 1,
        (StructureKind::Oar, _) => 2,
        (StructureKind::Body, _) => 3,
    }
}

/// DVH metric errors of a predicted dose against the ground truth for every
/// PTV (coverage set) and OAR (mean/max). Rows are grouped PTV, high-impact
/// OARs, low-impact OARs; structures with empty masks are skipped.
pub fn evaluate_plan(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    structures: &StructureSet,
) -> Result<MetricsReport> {
    if pred.dims() != gt.dims() || pred.dims() != structures.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?}, ground truth {:?}, structures {:?}",
            pred.dims(),
            gt.dims(),
            structures.dims()
        )));
    }
    let prescription = structures.max_prescription();
    let mut ordered: Vec<&StructureMask> = structures
        .iter()
        .filter(|s| s.kind != StructureKind::Body && s.voxel_count() > 0)
        .collect();
    ordered.sort_by_key(|s| group_rank(s));
    let mut rows = Vec::new();
    for s in ordered {
        let pc = dvh_curve(pred, s)?;
        let gc = dvh_curve(gt, s)?;
        let metrics: &[DvhMetric] = if s.kind == StructureKind::Ptv {
            &DvhMetric::PTV_SET
        } else {
            &DvhMetric::OAR_SET
        };
        for &m in metrics {
            let p = dvh_metric(&pc, m);
            let g = dvh_metric(&gc, m);
            rows.push(MetricRow {
                structure: s.name.clone(),
                kind: s.kind,
                impact: s.impact,
                metric: m,
                predicted: p,
                ground_truth: g,
                error_percent: metric_error(p, g, prescription)?,
            });
        }
    }
    Ok(MetricsReport { prescription, rows })
}
