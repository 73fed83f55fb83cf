//! Flat CSV views of curves and reports for external plotting.

use std::collections::BTreeMap;
use std::path::Path;

use dosekit_core::eval::{DvhCurve, MetricsReport};
use dosekit_core::trainer::ExperimentReport;
use dosekit_core::volume::{Impact, StructureKind};

use crate::error::{KitError, KitResult};
use crate::fsutil::write_atomic;

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> KitResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| KitError::parse(path, e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| KitError::parse(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn kind(k: StructureKind) -> &'static str {
    match k {
        StructureKind::Ptv => "PTV",
        StructureKind::Oar => "OAR",
        StructureKind::Body => "BODY",
    }
}

fn impact(i: Option<Impact>) -> &'static str {
    match i {
        Some(Impact::High) => "high",
        Some(Impact::Low) => "low",
        None => "",
    }
}

/// `structure, dose, volume_fraction`.
pub fn dvh_csv(path: &Path, curves: &BTreeMap<String, DvhCurve>) -> KitResult<()> {
    let rows = curves.iter().flat_map(|(name, c)| {
        c.table()
            .into_iter()
            .map(move |(d, v)| vec![name.clone(), d.to_string(), v.to_string()])
    });
    write_csv(path, &["structure", "dose", "volume_fraction"], rows)
}

/// One row per (case, structure, metric).
pub fn metrics_csv(path: &Path, reports: &[(String, MetricsReport)]) -> KitResult<()> {
    let rows = reports.iter().flat_map(|(case, r)| {
        r.rows.iter().map(move |row| {
            vec![
                case.clone(),
                row.structure.clone(),
                kind(row.kind).into(),
                impact(row.impact).into(),
                row.metric.label().into(),
                row.predicted.to_string(),
                row.ground_truth.to_string(),
                row.error_percent.to_string(),
            ]
        })
    });
    write_csv(
        path,
        &["case", "structure", "kind", "impact", "metric", "predicted", "ground_truth", "error_percent"],
        rows,
    )
}

/// Writes the non-empty tables of an experiment report as
/// `errors.csv`, `t_tests.csv`, `curves.csv` and `sweep.csv` in `dir`.
pub fn experiment_csvs(dir: &Path, report: &ExperimentReport) -> KitResult<()> {
    if !report.errors.is_empty() {
        let rows = report.errors.iter().map(|e| {
            vec![
                e.model.label().into(),
                e.structure.clone(),
                e.metric.label().into(),
                e.mean.to_string(),
                e.sd.to_string(),
                e.values.len().to_string(),
            ]
        });
        write_csv(&dir.join("errors.csv"), &["model", "structure", "metric", "mean", "sd", "n"], rows)?;
    }
    if !report.t_tests.is_empty() {
        let rows = report.t_tests.iter().map(|t| {
            let r = t.result.as_ref();
            vec![
                t.a.label().into(),
                t.b.label().into(),
                t.structure.clone(),
                t.metric.label().into(),
                opt(r.map(|r| r.t)),
                opt(r.map(|r| r.df)),
                opt(r.map(|r| r.p)),
                opt(r.map(|r| r.significant)),
                opt(r.map(|r| r.degenerate)),
                t.marker.clone().unwrap_or_default(),
            ]
        });
        write_csv(
            &dir.join("t_tests.csv"),
            &["a", "b", "structure", "metric", "t", "df", "p", "significant", "degenerate", "marker"],
            rows,
        )?;
    }
    if !report.curves.is_empty() {
        let rows = report.curves.iter().flat_map(|c| {
            c.points.iter().map(move |p| {
                vec![
                    c.model.label().into(),
                    c.label.clone(),
                    p.iteration.to_string(),
                    p.val_loss.to_string(),
                    opt(p.train_loss),
                    p.lr.to_string(),
                ]
            })
        });
        write_csv(
            &dir.join("curves.csv"),
            &["model", "run", "iteration", "val_loss", "train_loss", "lr"],
            rows,
        )?;
    }
    if !report.sweep.is_empty() {
        let rows = report.sweep.iter().flat_map(|s| {
            s.values.iter().enumerate().map(move |(rep, v)| {
                vec![s.model.label().into(), s.size.to_string(), rep.to_string(), v.to_string()]
            })
        });
        write_csv(&dir.join("sweep.csv"), &["model", "size", "repeat", "isodose_mse"], rows)?;
    }
    Ok(())
}
