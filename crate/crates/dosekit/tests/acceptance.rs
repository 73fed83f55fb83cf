//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines are
//! printed even when cargo captures test output. Set `ACCEPTANCE_ONLY` to a
//! comma-separated list of criterion numbers to run a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dosekit::cli::main_with_args;
use dosekit::config::SiteSection;
use dosekit::pipeline::site_samples;
use dosekit::{dkpt, dvol};
use dosekit_core::eval::{dvh_curve, dvh_metric, paired_t_test, DvhMetric};
use dosekit_core::nn::layers::{self, Tensor};
use dosekit_core::nn::{backward, build_unet, forward, forward_tape, mse_loss, Arm, Mode, ModelParameters, UNetConfig};
use dosekit_core::phantom::{builtin_site, generate_patient, PatientCase, SiteSpec};
use dosekit_core::planner::{
    build_influence_matrix, generate_plans, objective, operator_norm, sample_weights, solve, solve_fluence,
    structure_mean_dose, CpParams, InfluenceMatrix, ObjectiveBlock, PlanConfig, SolverSettings, WeightBounds,
};
use dosekit_core::preprocess::{structure_dvhs, PatientGeometry, Sample, CH_OAR};
use dosekit_core::seed::{self, derive_seed};
use dosekit_core::trainer::{
    draw_subset, evaluate_model, fine_tune, mean_isodose_mse, mean_loss, summarize, train, Init, ModelKind,
    TrainSchedule,
};
use dosekit_core::volume::{KernelSpec, StructureKind, StructureMask, VoxelGrid};
use rand::Rng;
use rayon::prelude::*;

/// Criterion 1: maximum relative error of analytic vs central-difference
/// gradients, `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
const GRAD_MAX_REL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_H: f64 = 1e-6;
const GRAD_BUDGET_S: f64 = 120.0;

/// Criterion 3.
const SOLVER_REL_TOL: f64 = 1e-6;
const CLOSED_FORM_TOL: f64 = 1e-6;
const PARETO_SLACK: f64 = 1e-9;
const SOLVER_BUDGET_S: f64 = 300.0;

/// Criterion 5.
const T_ORACLE_TOL: f64 = 1e-9;

/// Criterion 6.
const LEARN_MAX_ITERS: usize = 5000;
const LEARN_LR: f64 = 1e-2;
const LEARN_MAX_DMEAN_ERR: f64 = 2.0;
const LEARN_MIN_RATIO: f64 = 100.0;
const LEARN_BUDGET_S: f64 = 1800.0;

/// Criterion 7.
const TRANSFER_SEEDS: u64 = 5;
const TRANSFER_SOURCE_ITERS: usize = 3000;
const TRANSFER_TARGET_ITERS: usize = 2000;
const TRANSFER_MIN_FRACTION: f64 = 0.6;
const TRANSFER_BUDGET_S: f64 = 4.0 * 3600.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "gradient suite", criterion_1),
        (2, "architecture arithmetic", criterion_2),
        (3, "solver suite", criterion_3),
        (4, "preprocessing exactness", criterion_4),
        (5, "DVH metric oracle", criterion_5),
        (6, "learnability", criterion_6),
        (7, "transfer analog", criterion_7),
        (8, "determinism and persistence", criterion_8),
    ];
    let mut lines = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let o = match std::panic::catch_unwind(f) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            }
        };
        let line = format!(
            "criterion {n} ({name}): {} [{:.1} s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        println!("{line}");
        lines.push((o.pass, line));
    }
    println!("\nacceptance summary");
    for (_, l) in &lines {
        println!("  {l}");
    }
    if lines.iter().any(|(p, _)| !p) {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

fn rand_vec(n: usize, s: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = seed::rng(s);
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn rand_tensor(dims: [usize; 3], c: usize, s: u64) -> Tensor<f64> {
    Tensor::new(dims, c, rand_vec(dims.iter().product::<usize>() * c, s, -1.0, 1.0)).unwrap()
}

fn dot(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Worst relative error of `g` against central differences of `f` at `x`.
fn fd_worst(x: &[f64], g: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        xp[i] = x[i] + GRAD_H;
        let up = f(&xp);
        xp[i] = x[i] - GRAD_H;
        let dn = f(&xp);
        xp[i] = x[i];
        worst = worst.max(rel(g[i], (up - dn) / (2.0 * GRAD_H)));
    }
    worst
}

fn layer_gradients() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let x = rand_tensor([6, 6, 4], 2, 101);
    let (cin, cout) = (2, 3);
    let w = rand_vec(27 * cin * cout, 102, -0.5, 0.5);
    let b = rand_vec(cout, 103, -0.5, 0.5);
    let r = rand_vec(x.voxels() * cout, 104, -1.0, 1.0);
    let (gx, gw, gb) = layers::conv3d_backward(&x, &w, 3, &Tensor::new(x.dims, cout, r.clone()).unwrap()).unwrap();
    let conv = |xv: &[f64], wv: &[f64], bv: &[f64]| {
        dot(&layers::conv3d(&Tensor::new(x.dims, cin, xv.to_vec()).unwrap(), wv, bv, 3, cout).unwrap().data, &r)
    };
    let e = fd_worst(&x.data, &gx.data, |v| conv(v, &w, &b))
        .max(fd_worst(&w, &gw, |v| conv(&x.data, v, &b)))
        .max(fd_worst(&b, &gb, |v| conv(&x.data, &w, v)));
    out.push(("conv3d", e));

    let x = rand_tensor([4, 4, 2], 3, 105);
    let (y, arg) = layers::maxpool2(&x).unwrap();
    let r = rand_vec(y.data.len(), 106, -1.0, 1.0);
    let gx = layers::maxpool2_backward(&Tensor::new(y.dims, 3, r.clone()).unwrap(), &arg, x.dims).unwrap();
    let e = fd_worst(&x.data, &gx.data, |v| {
        dot(&layers::maxpool2(&Tensor::new(x.dims, 3, v.to_vec()).unwrap()).unwrap().0.data, &r)
    });
    out.push(("maxpool", e));

    let x = rand_tensor([3, 2, 2], 4, 107);
    let cout = 2;
    let w = rand_vec(8 * 4 * cout, 108, -0.5, 0.5);
    let b = rand_vec(cout, 109, -0.5, 0.5);
    let y = layers::upconv2(&x, &w, &b, cout).unwrap();
    let r = rand_vec(y.data.len(), 110, -1.0, 1.0);
    let (gx, gw, gb) = layers::upconv2_backward(&x, &w, &Tensor::new(y.dims, cout, r.clone()).unwrap()).unwrap();
    let up = |xv: &[f64], wv: &[f64], bv: &[f64]| {
        dot(&layers::upconv2(&Tensor::new(x.dims, 4, xv.to_vec()).unwrap(), wv, bv, cout).unwrap().data, &r)
    };
    let e = fd_worst(&x.data, &gx.data, |v| up(v, &w, &b))
        .max(fd_worst(&w, &gw, |v| up(&x.data, v, &b)))
        .max(fd_worst(&b, &gb, |v| up(&x.data, &w, v)));
    out.push(("transposed conv", e));

    let x = rand_tensor([3, 3, 2], 6, 111);
    let scale = rand_vec(6, 112, 0.5, 1.5);
    let shift = rand_vec(6, 113, -0.5, 0.5);
    let r = rand_vec(x.data.len(), 114, -1.0, 1.0);
    let mut e = 0.0f64;
    for groups in [1, 2, 3, 6] {
        let (_, cache) = layers::groupnorm(&x, &scale, &shift, groups).unwrap();
        let (gx, gs, gt) = layers::groupnorm_backward(&cache, &scale, &Tensor::new(x.dims, 6, r.clone()).unwrap()).unwrap();
        let gn = |xv: &[f64], s: &[f64], t: &[f64]| {
            dot(&layers::groupnorm(&Tensor::new(x.dims, 6, xv.to_vec()).unwrap(), s, t, groups).unwrap().0.data, &r)
        };
        e = e
            .max(fd_worst(&x.data, &gx.data, |v| gn(v, &scale, &shift)))
            .max(fd_worst(&scale, &gs, |v| gn(&x.data, v, &shift)))
            .max(fd_worst(&shift, &gt, |v| gn(&x.data, &scale, v)));
    }
    out.push(("groupnorm", e));

    let x = rand_tensor([4, 3, 2], 2, 115);
    let r = rand_vec(x.data.len(), 116, -1.0, 1.0);
    let gy = Tensor::new(x.dims, 2, r.clone()).unwrap();
    let y = layers::relu(&x);
    let e = fd_worst(&x.data, &layers::relu_backward(&y, &gy).data, |v| {
        dot(&layers::relu(&Tensor::new(x.dims, 2, v.to_vec()).unwrap()).data, &r)
    });
    out.push(("relu", e));

    let mask: Vec<f64> = layers::dropout_mask(x.data.len(), 0.3, &mut seed::rng(117));
    let g = layers::apply_mask(&gy, &mask).unwrap();
    let e = fd_worst(&x.data, &g.data, |v| {
        dot(&layers::apply_mask(&Tensor::new(x.dims, 2, v.to_vec()).unwrap(), &mask).unwrap().data, &r)
    });
    out.push(("dropout mask", e));

    let p = rand_vec(64, 118, -1.0, 1.0);
    let t = rand_vec(64, 119, -1.0, 1.0);
    let (_, g) = mse_loss(&p, &t).unwrap();
    out.push(("mse", fd_worst(&p, &g, |v| mse_loss(v, &t).unwrap().0)));
    out
}

/// Desk UNet (16x16x8, pools 2, start 4) in training mode with a fixed
/// dropout seed: every norm and bias entry, sampled weights, sampled
/// input voxels.
fn unet_gradient() -> (f64, usize) {
    let cfg = UNetConfig {
        pools: 2,
        starting_filters: 4,
        dropout_rate: 0.5,
        ..UNetConfig::default()
    };
    let kernel = KernelSpec::new([16, 16, 8]);
    let mut p: ModelParameters<f64> = build_unet(&cfg, kernel, 120).unwrap();
    let mut r = seed::rng(121);
    for t in p.tensors.iter_mut().filter(|t| t.name.contains("/norm") || t.name.ends_with("/b")) {
        t.data.iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
    }
    let x = rand_tensor(kernel.dims, 3, 122);
    let target = rand_vec(kernel.voxel_count(), 123, 0.0, 1.0);
    let loss = |p: &ModelParameters<f64>, x: &Tensor<f64>| {
        let (y, _) = forward_tape(p, x, Mode::Train, 124).unwrap();
        mse_loss(&y.data, &target).unwrap().0
    };
    let (y, tape) = forward_tape(&p, &x, Mode::Train, 124).unwrap();
    let (_, gy) = mse_loss(&y.data, &target).unwrap();
    let grads = backward(&p, tape, Tensor::new(kernel.dims, 1, gy).unwrap()).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for ti in 0..p.tensors.len() {
        let n = p.tensors[ti].data.len();
        let picks: Vec<usize> = if n <= 16 { (0..n).collect() } else { (0..6).map(|_| r.gen_range(0..n)).collect() };
        for i in picks {
            let orig = p.tensors[ti].data[i];
            p.tensors[ti].data[i] = orig + GRAD_H;
            let up = loss(&p, &x);
            p.tensors[ti].data[i] = orig - GRAD_H;
            let dn = loss(&p, &x);
            p.tensors[ti].data[i] = orig;
            worst = worst.max(rel(grads.params[ti][i], (up - dn) / (2.0 * GRAD_H)));
            checked += 1;
        }
    }
    let mut xp = x.clone();
    for _ in 0..24 {
        let i = r.gen_range(0..x.data.len());
        xp.data[i] = x.data[i] + GRAD_H;
        let up = loss(&p, &xp);
        xp.data[i] = x.data[i] - GRAD_H;
        let dn = loss(&p, &xp);
        xp.data[i] = x.data[i];
        worst = worst.max(rel(grads.input.data[i], (up - dn) / (2.0 * GRAD_H)));
        checked += 1;
    }
    (worst, checked)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let layers = layer_gradients();
    let (unet, checked) = unet_gradient();
    let secs = t.elapsed().as_secs_f64();
    let worst_layer = layers.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let pass = layers.iter().all(|(_, e)| *e <= GRAD_MAX_REL) && unet <= GRAD_MAX_REL && secs < GRAD_BUDGET_S;
    outcome(
        pass,
        format!(
            "worst layer {} {:.2e}, desk UNet {:.2e} over {checked} coordinates (limit {GRAD_MAX_REL:e})",
            worst_layer.0, worst_layer.1, unet
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let c = UNetConfig::full_scale();
    let a = c.bottleneck_dims(KernelSpec::new([288, 176, 80])).unwrap();
    let b = c.bottleneck_dims(KernelSpec::new([160, 160, 80])).unwrap();
    let filters: Vec<usize> = (1..=5).map(|l| c.filters_at(l, Arm::Down).unwrap()).collect();
    let drop = c.dropout_at(256);
    let pass = a == [18, 11, 5] && b == [10, 10, 5] && filters == [16, 32, 64, 128, 256] && c.max_filters() == 256 && drop == 0.00625;
    outcome(
        pass,
        format!(
            "bottlenecks {a:?} {b:?}, filters {filters:?}, max {}, dropout_at(256) = {drop}",
            c.max_filters()
        ),
    )
}

// ---------------------------------------------------------------- 3

struct Instance {
    dense: Vec<Vec<f64>>,
    blocks: Vec<ObjectiveBlock>,
}

fn random_instance(s: u64) -> Instance {
    let mut r = seed::rng(s);
    let m = r.gen_range(6..=50);
    let n = r.gen_range(2..=20);
    let dense: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| if r.gen_bool(0.3) { 0.0 } else { r.gen_range(0.0..1.0) }).collect())
        .collect();
    let n_oars = r.gen_range(1..=3usize);
    let mut cuts: Vec<usize> = (0..n_oars).map(|_| r.gen_range(1..m)).collect();
    cuts.push(0);
    cuts.push(m);
    cuts.sort_unstable();
    cuts.dedup();
    let blocks = cuts
        .windows(2)
        .enumerate()
        .map(|(i, w)| ObjectiveBlock {
            name: format!("s{i}"),
            rows: (w[0]..w[1]).collect(),
            target: if i == 0 { r.gen_range(0.5..1.5) } else { 0.0 },
            weight: if i == 0 { 1.0 } else { r.gen_range(0.05..1.0) },
        })
        .collect();
    Instance { dense, blocks }
}

/// Direct evaluation of `sum_s w_s / N_s * ||A_s x - p_s||^2` on the dense
/// matrix.
fn dense_objective(inst: &Instance, x: &[f64]) -> f64 {
    inst.blocks
        .iter()
        .map(|b| {
            let s: f64 = b
                .rows
                .iter()
                .map(|&i| {
                    let d: f64 = inst.dense[i].iter().zip(x).map(|(a, v)| a * v).sum::<f64>() - b.target;
                    d * d
                })
                .sum();
            b.weight / b.rows.len() as f64 * s
        })
        .sum()
}

/// Accelerated projected gradient with adaptive restart on the quadratic
/// form `x^T H x - 2 g^T x`, `x >= 0`.
fn projected_gradient_oracle(inst: &Instance) -> Vec<f64> {
    let n = inst.dense[0].len();
    let mut h = vec![vec![0.0; n]; n];
    let mut g = vec![0.0; n];
    for b in &inst.blocks {
        let c = b.weight / b.rows.len() as f64;
        for &i in &b.rows {
            let a = &inst.dense[i];
            for j in 0..n {
                g[j] += c * a[j] * b.target;
                for k in 0..n {
                    h[j][k] += c * a[j] * a[k];
                }
            }
        }
    }
    let lip = 2.0 * h.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let grad = |x: &[f64]| -> Vec<f64> {
        (0..n).map(|j| 2.0 * (h[j].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - g[j])).collect()
    };
    let mut x = vec![0.0; n];
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..400_000 {
        let gy = grad(&y);
        let xn: Vec<f64> = y.iter().zip(&gy).map(|(v, d)| (v - d / lip).max(0.0)).collect();
        let tn = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let restart = gy.iter().zip(&step).map(|(a, b)| a * b).sum::<f64>() > 0.0;
        let mom = if restart { 0.0 } else { (t - 1.0) / tn };
        y = xn.iter().zip(&step).map(|(a, d)| (a + mom * d).max(0.0)).collect();
        t = if restart { 1.0 } else { tn };
        let moved = step.iter().map(|d| d * d).sum::<f64>().sqrt();
        x = xn;
        if moved <= 1e-15 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt()) {
            break;
        }
    }
    x
}

fn tight_settings() -> SolverSettings {
    SolverSettings {
        max_iters: 400_000,
        tolerance: 1e-13,
        ..SolverSettings::default()
    }
}

fn cp_solve(a: &InfluenceMatrix, blocks: &[ObjectiveBlock], s: &SolverSettings) -> Vec<f64> {
    let norm = operator_norm(a, blocks, s.power_iters, 1);
    solve(a, blocks, &CpParams::new(norm, s).unwrap()).unwrap().fluence
}

fn pareto_case(index: u64) -> PatientCase {
    let site = if index < 5 { "siteA" } else { "siteB" };
    generate_patient(&builtin_site(site).unwrap(), &format!("pareto-{index}"), derive_seed(31, &format!("pareto/{index}"))).unwrap()
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for k in 0..25 {
        let inst = random_instance(derive_seed(3, &format!("instance/{k}")));
        let a = InfluenceMatrix::from_dense(&inst.dense).unwrap();
        let x_cp = cp_solve(&a, &inst.blocks, &tight_settings());
        let x_pg = projected_gradient_oracle(&inst);
        let f_cp = objective(&a, &inst.blocks, &x_cp).unwrap();
        let f_pg = dense_objective(&inst, &x_pg);
        worst = worst.max((f_cp - f_pg).abs() / f_pg.abs().max(1e-300));
    }

    let one = InfluenceMatrix::from_dense(&[vec![1.0], vec![1.0]]).unwrap();
    let pair = |w_oar: f64| {
        let blocks = [
            ObjectiveBlock { name: "ptv".into(), rows: vec![0], target: 1.0, weight: 1.0 },
            ObjectiveBlock { name: "oar".into(), rows: vec![1], target: 0.0, weight: w_oar },
        ];
        cp_solve(&one, &blocks, &tight_settings())[0]
    };
    let (x1, x3) = (pair(1.0), pair(3.0));
    let oracle_secs = t.elapsed().as_secs_f64();
    let closed = (x1 - 0.5).abs() <= CLOSED_FORM_TOL && (x3 - 0.25).abs() <= CLOSED_FORM_TOL;

    let settings = SolverSettings {
        max_iters: 20_000,
        tolerance: 1e-10,
        ..SolverSettings::default()
    };
    let sweep = [0.02, 0.2, 1.0];
    let violations: Vec<String> = (0..10u64)
        .into_par_iter()
        .flat_map_iter(|i| {
            let case = pareto_case(i);
            let a = build_influence_matrix(&case, &PlanConfig::default().beams).unwrap();
            let base = sample_weights(&case.structures, WeightBounds::default(), i).unwrap();
            let oar = case.structures.oars().next().unwrap().name.clone();
            let mut prev = f64::INFINITY;
            let mut bad = Vec::new();
            for &w in &sweep {
                let mut weights = base.clone();
                weights.set(&oar, w);
                let plan = solve_fluence(&a, &case, &weights, &settings, 1).unwrap();
                let mean = structure_mean_dose(&plan, &case.structures, &oar).unwrap();
                if mean > prev + PARETO_SLACK {
                    bad.push(format!("{}:{oar}@{w}", case.id));
                }
                prev = mean;
            }
            bad
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let pass = worst <= SOLVER_REL_TOL && closed && violations.is_empty() && secs < SOLVER_BUDGET_S;
    outcome(
        pass,
        format!(
            "oracle worst relative gap {worst:.2e} ({oracle_secs:.0} s); closed forms {x1:.9} and {x3:.9}; Pareto violations {}",
            if violations.is_empty() { "none".to_string() } else { violations.join(" ") }
        ),
    )
}

// ---------------------------------------------------------------- 4

fn site_with_oars(base: &str, count: usize) -> SiteSpec {
    let mut s = builtin_site(base).unwrap();
    s.site_id = format!("{base}-{count}oars");
    s.oar_count_range = (count, count);
    if s.shape_palette.oar_catalog.len() < count {
        let extra: Vec<_> = (s.shape_palette.oar_catalog.len()..count)
            .map(|i| {
                let mut t = s.shape_palette.oar_catalog[i % 4].clone();
                t.name = format!("{}_{i}", t.name);
                t
            })
            .collect();
        s.shape_palette.oar_catalog.extend(extra);
    }
    s
}

fn criterion_4() -> Outcome {
    let plan_cfg = PlanConfig {
        solver: SolverSettings { max_iters: 300, ..SolverSettings::default() },
        ..PlanConfig::default()
    };
    let sites = [
        (site_with_oars("siteA", 0), 2),
        (builtin_site("siteA").unwrap(), 3),
        (builtin_site("siteB").unwrap(), 3),
        (site_with_oars("siteB", 21), 2),
    ];
    let mut plans_checked = 0;
    let mut structures_checked = 0;
    let mut failures = Vec::new();
    let mut shapes = BTreeMap::new();
    for (spec, patients) in &sites {
        for i in 0..*patients {
            let case = generate_patient(spec, &format!("{}-{i}", spec.site_id), derive_seed(4, &format!("{}/{i}", spec.site_id))).unwrap();
            let geo = PatientGeometry::new(&case.structures, spec.kernel).unwrap();
            for r in geo.ranked() {
                if r.entries.windows(2).any(|w| w[0].1 > w[1].1) {
                    failures.push(format!("{}:{} distance ranks not sorted", case.id, r.name));
                }
            }
            for plan in generate_plans(&case, &plan_cfg, 2, derive_seed(4, &case.id)).unwrap() {
                let dvhs = structure_dvhs(&plan.dose, &case.structures).unwrap();
                let input = geo.assemble(&dvhs).unwrap();
                shapes.insert(case.structures.oars().count(), input.shape());
                let oar_channel = input.channel(CH_OAR);
                for (r, s) in geo.ranked().iter().zip(case.structures.oars()) {
                    let cropped = geo.placement.apply(&s.mask).unwrap();
                    let mut got: Vec<f32> = cropped
                        .data()
                        .iter()
                        .zip(oar_channel.data())
                        .filter_map(|(&m, &v)| (m != 0.0).then_some(v))
                        .collect();
                    got.sort_by(|a, b| b.total_cmp(a));
                    let n = r.len();
                    let want: Vec<f32> = (0..n).map(|k| dvhs[&s.name].dose_at_fraction((k as f64 + 0.5) / n as f64)).collect();
                    let exact = got.len() == n
                        && got.iter().zip(&want).all(|(a, b)| (a.to_bits() as i64 - b.to_bits() as i64).abs() <= 1);
                    if !exact {
                        failures.push(format!("{}/{}:{} DVH mismatch", case.id, plan.plan_index, s.name));
                    }
                    let mapped: Vec<f32> = r
                        .entries
                        .iter()
                        .map(|&(idx, _)| {
                            let c = dosekit_core::volume::coord_of(idx, case.structures.dims());
                            let k = [0, 1, 2].map(|a| (c[a] as i64 - geo.placement.offset[a]) as usize);
                            oar_channel.get(k).unwrap()
                        })
                        .collect();
                    if mapped.windows(2).any(|w| w[0] < w[1]) {
                        failures.push(format!("{}/{}:{} dose rises with distance rank", case.id, plan.plan_index, s.name));
                    }
                    structures_checked += 1;
                }
                plans_checked += 1;
            }
        }
    }
    let distinct: Vec<_> = shapes.values().collect();
    let invariant = shapes.contains_key(&0) && shapes.contains_key(&4) && shapes.contains_key(&21) && distinct.windows(2).all(|w| w[0] == w[1]);
    let pass = failures.is_empty() && invariant;
    outcome(
        pass,
        format!(
            "{plans_checked} plans, {structures_checked} OAR channels exact; shape {:?} for OAR counts {:?}{}",
            distinct.first(),
            shapes.keys().collect::<Vec<_>>(),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 5

/// Sort-based metrics straight from the voxel list.
fn naive_metrics(doses: &[f32]) -> BTreeMap<DvhMetric, f64> {
    let n = doses.len();
    let mut desc = doses.to_vec();
    desc.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let order = |p: usize| desc[((p * n + 99) / 100).clamp(1, n) - 1] as f64;
    let mut sum = 0.0f64;
    for &d in doses {
        sum += d as f64;
    }
    BTreeMap::from([
        (DvhMetric::D98, order(98)),
        (DvhMetric::D95, order(95)),
        (DvhMetric::D02, order(2)),
        (DvhMetric::Dmean, sum / n as f64),
        (DvhMetric::Dmax, desc[0] as f64),
    ])
}

fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Two-sided Student-t tail by adaptive Simpson integration of the
/// density over `[0, |t|]`.
fn t_tail_oracle(t: f64, df: f64) -> f64 {
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let pdf = |s: f64| c * (1.0 + s * s / df).powf(-(df + 1.0) / 2.0);
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
        let m = (a + b) / 2.0;
        let (lm, rm) = ((a + m) / 2.0, (m + b) / 2.0);
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
    }
    let b = t.abs();
    let (fa, fm, fb) = (pdf(0.0), pdf(b / 2.0), pdf(b));
    let whole = b / 6.0 * (fa + 4.0 * fm + fb);
    let half = simpson(&pdf, 0.0, b, fa, fm, fb, whole, 1e-14, 50);
    (1.0 - 2.0 * half).clamp(0.0, 1.0)
}

fn criterion_5() -> Outcome {
    let mut r = seed::rng(5);
    let mut mismatches = 0;
    let mut order_violations = 0;
    for k in 0..1000 {
        let dims = [r.gen_range(1..=12), r.gen_range(1..=12), r.gen_range(1..=7)];
        let nvox: usize = dims.iter().product();
        let dose: Vec<f32> = (0..nvox)
            .map(|_| if r.gen_bool(0.1) { r.gen_range(0..4) as f32 * 0.25 } else { r.gen_range(0.0f32..1.3) })
            .collect();
        let mut mask: Vec<f32> = (0..nvox).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        mask[r.gen_range(0..nvox)] = 1.0;
        let grid = VoxelGrid::new(dims, [1.0; 3], dose.clone()).unwrap();
        let m = StructureMask::new(format!("s{k}"), StructureKind::Oar, VoxelGrid::new(dims, [1.0; 3], mask.clone()).unwrap(), None, Some(dosekit_core::volume::Impact::Low)).unwrap();
        let curve = dvh_curve(&grid, &m).unwrap();
        let voxels: Vec<f32> = dose.iter().zip(&mask).filter(|(_, &m)| m != 0.0).map(|(&d, _)| d).collect();
        let want = naive_metrics(&voxels);
        for (metric, w) in &want {
            if dvh_metric(&curve, *metric).to_bits() != w.to_bits() {
                mismatches += 1;
            }
        }
        if !(want[&DvhMetric::D02] >= want[&DvhMetric::D95] && want[&DvhMetric::D95] >= want[&DvhMetric::D98]) {
            order_violations += 1;
        }
    }

    let mut worst_p = 0.0f64;
    let mut rp = seed::rng(55);
    for k in 0..20 {
        let n = 3 + k % 12;
        let a: Vec<f64> = (0..n).map(|_| rp.gen_range(0.0..3.0)).collect();
        let shift = (k as f64 - 10.0) * 0.05;
        let b: Vec<f64> = a.iter().map(|x| x + shift + rp.gen_range(-0.5..0.5)).collect();
        let res = paired_t_test(&a, &b, 0.05).unwrap();
        worst_p = worst_p.max((res.p - t_tail_oracle(res.t, res.df as f64)).abs());
    }
    let pass = mismatches == 0 && order_violations == 0 && worst_p <= T_ORACLE_TOL;
    outcome(
        pass,
        format!("1000 structures: {mismatches} metric mismatches, {order_violations} order violations; t-test worst |dp| {worst_p:.2e} over 20 pairs"),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let section = SiteSection {
        preset: Some("siteA".into()),
        patients: 2,
        plans_per_patient: 8,
        ..SiteSection::default()
    };
    let (_, grouped) = site_samples(&section, &PlanConfig::default(), 6).unwrap();
    let data: Vec<Sample> = grouped.concat();
    let val: Vec<Sample> = data.iter().step_by(4).cloned().collect();
    let cfg = UNetConfig { dropout_rate: 0.0, ..UNetConfig::default() };
    let init_seed = derive_seed(6, "init");
    let before = mean_loss(&build_unet::<f32>(&cfg, data[0].input.kernel(), init_seed).unwrap(), &data).unwrap();
    let schedule = TrainSchedule {
        max_iterations: LEARN_MAX_ITERS,
        initial_lr: LEARN_LR,
        seed: derive_seed(6, "train"),
        ..TrainSchedule::default()
    };
    let ckpt = train(Init::Random { config: cfg, seed: init_seed }, &data, &val, &schedule).unwrap();
    let after = mean_loss(&ckpt.params, &data).unwrap();
    let reports = evaluate_model(&ckpt.params, &data).unwrap();
    let errs: Vec<f64> = reports.iter().map(|r| r.error("ptv", DvhMetric::Dmean).unwrap()).collect();
    let mean_err = errs.iter().sum::<f64>() / errs.len() as f64;
    let ratio = before / after;
    let secs = t.elapsed().as_secs_f64();
    let iters = ckpt.meta.as_ref().map_or(0, |m| m.iterations_run);
    let pass = mean_err <= LEARN_MAX_DMEAN_ERR && ratio >= LEARN_MIN_RATIO && secs <= LEARN_BUDGET_S;
    outcome(
        pass,
        format!(
            "{} samples, {iters} iterations: PTV Dmean error mean {mean_err:.3}% (max {:.3}%), training MSE {before:.3e} -> {after:.3e} ({ratio:.0}x)",
            data.len(),
            errs.iter().cloned().fold(0.0, f64::max)
        ),
    )
}

// ---------------------------------------------------------------- 7

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let master = 7;
    let planning = PlanConfig::default();
    let section = |preset: &str, patients: usize| SiteSection {
        preset: Some(preset.into()),
        patients,
        plans_per_patient: 8,
        ..SiteSection::default()
    };
    // source: 8 training patients + 1 validation patient
    let (_, src) = site_samples(&section("siteA", 9), &planning, master).unwrap();
    let src_train: Vec<Sample> = src[..8].concat();
    let src_val: Vec<Sample> = src[8][..4].to_vec();
    // target: 4 pool patients, 1 validation patient, 2 test patients
    let (_, tgt) = site_samples(&section("siteB", 7), &planning, master).unwrap();
    let pool = tgt[..4].to_vec();
    let tgt_val: Vec<Sample> = tgt[4][..4].to_vec();
    let test: Vec<Sample> = [&tgt[5][..4], &tgt[6][..4]].concat();

    let cfg = UNetConfig::default();
    let base = TrainSchedule {
        max_iterations: TRANSFER_SOURCE_ITERS,
        ..TrainSchedule::default()
    };
    let source = train(
        Init::Random { config: cfg, seed: derive_seed(master, "init/source") },
        &src_train,
        &src_val,
        &base.with_seed(derive_seed(master, "train/source")),
    )
    .unwrap();
    let source_reports = evaluate_model(&source.params, &test).unwrap();

    let target_sched = TrainSchedule {
        max_iterations: TRANSFER_TARGET_ITERS,
        ..TrainSchedule::default()
    };
    let mut mse_target = Vec::new();
    let mut mse_adapted = Vec::new();
    let mut adapted_dmean: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut source_dmean: BTreeMap<String, f64> = BTreeMap::new();
    for rep in 0..TRANSFER_SEEDS {
        let cell = format!("rep/{rep}");
        let subset = draw_subset(&pool, 1, 8, derive_seed(master, &format!("{cell}/subset"))).unwrap();
        let scratch = train(
            Init::Random { config: cfg, seed: derive_seed(master, &format!("{cell}/init")) },
            &subset,
            &tgt_val,
            &target_sched.with_seed(derive_seed(master, &format!("{cell}/target"))),
        )
        .unwrap();
        let adapted = fine_tune(
            &source,
            &subset,
            &tgt_val,
            &target_sched.for_fine_tuning().with_seed(derive_seed(master, &format!("{cell}/adapted"))),
        )
        .unwrap();
        mse_target.push(mean_isodose_mse(&scratch.params, &test, 10.0).unwrap());
        mse_adapted.push(mean_isodose_mse(&adapted.params, &test, 10.0).unwrap());
        let evals = vec![
            (ModelKind::Source, source_reports.clone()),
            (ModelKind::Adapted, evaluate_model(&adapted.params, &test).unwrap()),
        ];
        let (errors, _) = summarize(&evals, 0.05).unwrap();
        for e in errors.iter().filter(|e| e.metric == DvhMetric::Dmean) {
            match e.model {
                ModelKind::Source => {
                    source_dmean.insert(e.structure.clone(), e.mean);
                }
                _ => adapted_dmean.entry(e.structure.clone()).or_default().push(e.mean),
            }
        }
    }
    let med_t = median(&mut mse_target.clone());
    let med_a = median(&mut mse_adapted.clone());
    let mut worse = 0;
    for (s, v) in adapted_dmean.iter_mut() {
        if source_dmean[s] > median(v) {
            worse += 1;
        }
    }
    let fraction = worse as f64 / adapted_dmean.len() as f64;
    let secs = t.elapsed().as_secs_f64();
    let pass = med_a <= med_t && fraction >= TRANSFER_MIN_FRACTION && secs <= TRANSFER_BUDGET_S;
    outcome(
        pass,
        format!(
            "median 10%-isodose MSE adapted {med_a:.4e} vs scratch {med_t:.4e}; source Dmean error above adapted median on {worse}/{} structures ({:.0}%)",
            adapted_dmean.len(),
            fraction * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 8

fn run_cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("dosekit").chain(args.iter().copied()))
}

fn file_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn full_pipeline(root: &Path) -> bool {
    let s = |p: PathBuf| p.to_str().unwrap().to_string();
    let (pts, plans, ds, model, dose) = (
        s(root.join("pts")),
        s(root.join("plans")),
        s(root.join("ds")),
        s(root.join("m.dkpt")),
        s(root.join("dose.dvol")),
    );
    let patient = s(root.join("pts/siteB-000"));
    let steps: [Vec<&str>; 6] = [
        vec!["--seed", "8", "phantom", "--site", "siteB", "--patients", "3", "--out", &pts],
        vec!["--seed", "8", "plan", "--in", &pts, "--out", &plans, "--plans-per-patient", "2"],
        vec!["--seed", "8", "preprocess", "--in", &plans, "--out", &ds],
        vec!["--seed", "8", "train", "--data", &ds, "--out", &model, "--iterations", "20"],
        vec!["--seed", "8", "predict", "--ckpt", &model, "--patient", &patient, "--out", &dose],
        vec!["--seed", "8", "dvh", "--dose", &dose, "--patient", &patient, "--out", "DVH"],
    ];
    let dvh = s(root.join("dvh.csv"));
    steps.iter().all(|a| {
        let args: Vec<&str> = a.iter().map(|x| if *x == "DVH" { dvh.as_str() } else { x }).collect();
        run_cli(&args) == 0
    })
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ran = full_pipeline(a.path()) && full_pipeline(b.path());
    let (ta, tb) = (file_tree(a.path()), file_tree(b.path()));
    let identical = ran && ta == tb;

    let dose = dvol::read(&a.path().join("plans/siteB-000/plan-000/dose.dvol")).unwrap();
    let dvol_exact = dvol::encode(&dvol::decode(&dvol::encode(&dose)).unwrap()) == dvol::encode(&dose)
        && dvol::encode(&dose) == ta[Path::new("plans/siteB-000/plan-000/dose.dvol")];

    let ckpt = dkpt::read(&a.path().join("m.dkpt")).unwrap();
    let bytes = dkpt::encode(&ckpt);
    let reread = dkpt::decode(&bytes).unwrap();
    let dkpt_exact = reread == ckpt && dkpt::encode(&reread) == bytes && ckpt.optimizer.is_some() && ckpt.meta.is_some();

    // in-memory model vs its reloaded copy
    let ds = dosekit::store::read_dataset(&a.path().join("ds")).unwrap();
    let fresh = train(
        Init::Random { config: UNetConfig::default(), seed: 81 },
        &ds.samples[..2],
        &ds.samples[2..3],
        &TrainSchedule { max_iterations: 5, seed: 82, ..TrainSchedule::default() },
    )
    .unwrap();
    let path = a.path().join("fresh.dkpt");
    dkpt::write(&path, &fresh).unwrap();
    let loaded = dkpt::read(&path).unwrap();
    let bits = |g: VoxelGrid| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let infer_exact = ds.samples.iter().all(|s| {
        bits(forward(&fresh.params, &s.input, Mode::Infer, 0).unwrap()) == bits(forward(&loaded.params, &s.input, Mode::Infer, 0).unwrap())
    });

    let pass = identical && dvol_exact && dkpt_exact && infer_exact;
    outcome(
        pass,
        format!(
            "pipeline rerun identical over {} files: {identical}; .dvol exact: {dvol_exact}; .dkpt exact: {dkpt_exact}; reloaded inference identical: {infer_exact}",
            ta.len()
        ),
    )
}
