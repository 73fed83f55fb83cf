//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dosekit_core::eval::{evaluate_plan, DvhCurve};
use dosekit_core::nn::{forward, Mode};
use dosekit_core::preprocess::{assemble_input, dataset_build, structure_dvhs};
use dosekit_core::seed::derive_seed;
use dosekit_core::trainer::{
    evaluate_model, fine_tune, four_model_protocol, size_sweep, train, Init, ModelCheckpoint, ModelKind, SweepData,
};
use dosekit_core::volume::{CropPlacement, StructureKind};
use serde::Serialize;

use crate::config::{parse_config, RunConfig, Splits};
use crate::error::{ErrorRecord, KitError, KitResult};
use crate::fsutil::write_json;
use crate::pipeline::{generate_cohort, plan_cohort, site_samples, split_samples, with_jobs};
use crate::store::{self, Dataset};
use crate::{dkpt, dvol, export};

#[derive(Debug, Parser)]
#[command(name = "dosekit", version, about = "Synthetic dose-prediction pipeline")]
pub struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "DOSEKIT_JOBS")]
    pub jobs: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic patients.
    Phantom {
        /// Preset name or site description file.
        #[arg(long)]
        site: Option<String>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve ground-truth plans for every patient.
    Plan {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plans_per_patient: Option<usize>,
        #[arg(long)]
        beams: Option<usize>,
    },
    /// Crop and encode plans into model samples.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Fine-tune a checkpoint on a new dataset.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Predict a dose for one patient.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        patient: PathBuf,
        /// Plan directory whose DVHs become the desired DVHs. Without it,
        /// PTVs ask for their prescription and OARs for zero dose.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// DVH metric errors of a prediction, or of a model over a dataset.
    Evaluate(EvaluateArgs),
    /// Export DVH curves of a dose as CSV.
    Dvh {
        #[arg(long)]
        dose: PathBuf,
        #[arg(long)]
        patient: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer-learning experiments.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preprocessed dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, requires = "patient", requires = "plan", conflicts_with_all = ["ckpt", "data"])]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub patient: Option<PathBuf>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for `report.json` and `metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Source, target, adapted and combined models on the target test split.
    FourModel {
        #[arg(long)]
        out: PathBuf,
    },
    /// Target-size sweep of isodose MSE.
    SizeSweep {
        #[arg(long)]
        out: PathBuf,
        /// Reuse a trained source model instead of training one.
        #[arg(long)]
        source_ckpt: Option<PathBuf>,
    },
}

/// Effective configuration and seeds of one invocation, written next to
/// its outputs.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
}

struct Ctx {
    cfg: RunConfig,
    seeds: BTreeMap<String, u64>,
}

impl Ctx {
    fn seed(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.cfg.seed, label);
        self.seeds.insert(label.into(), s);
        s
    }

    fn record(&self, command: &str, path: &Path) -> KitResult<()> {
        let rec = RunRecord {
            command: command.into(),
            config: self.cfg.clone(),
            seeds: self.seeds.clone(),
        };
        log::debug!("effective config:\n{}", self.cfg.to_toml());
        log::info!("{command}: master seed {}, derived {:?}", self.cfg.seed, self.seeds);
        write_json(path, &rec)
    }
}

/// `run.json` inside a directory output, `<file>.run.json` beside a file.
fn record_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        let mut name = out.file_name().map(OsString::from).unwrap_or_default();
        name.push(".run.json");
        out.with_file_name(name)
    }
}

fn ensure_distinct(input: &Path, out: &Path) -> KitResult<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (i, o) = (canon(input), canon(out));
    if o.starts_with(&i) {
        return Err(KitError::Validation(format!(
            "output {} lies inside input {}; inputs are never modified",
            out.display(),
            input.display()
        )));
    }
    Ok(())
}

fn load_config(cli: &Cli) -> KitResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    Ok(cfg)
}

/// Splits a dataset's patients: explicit config splits when they fit the
/// pool, otherwise the proportional default. Pools under three patients
/// train and validate on everything.
fn dataset_splits(cfg: &RunConfig, n: usize) -> KitResult<Splits> {
    if let Some(s) = &cfg.site.splits {
        if s.validate(n).is_ok() {
            return Ok(s.clone());
        }
        log::warn!("configured splits do not fit a pool of {n} patients, using the default split");
    }
    if n < 3 {
        log::warn!("{n} patients: training and validating on the whole pool");
        let all: Vec<usize> = (0..n).collect();
        return Ok(Splits {
            train: all.clone(),
            val: all,
            test: Vec::new(),
        });
    }
    Splits::proportional(n)
}

fn train_val(ds: &Dataset, cfg: &RunConfig) -> KitResult<(Vec<dosekit_core::preprocess::Sample>, Vec<dosekit_core::preprocess::Sample>)> {
    let grouped = ds.by_patient();
    let s = dataset_splits(cfg, grouped.len())?;
    let take = |ids: &[usize]| ids.iter().flat_map(|&i| grouped[i].iter().cloned()).collect::<Vec<_>>();
    Ok((take(&s.train), take(&s.val)))
}

fn default_dvhs(case: &dosekit_core::phantom::PatientCase) -> KitResult<BTreeMap<String, DvhCurve>> {
    let mut out = BTreeMap::new();
    for s in case.structures.iter() {
        let n = s.voxel_count();
        let dose = match s.kind {
            StructureKind::Ptv => s.prescription.unwrap_or(0.0) as f32,
            StructureKind::Oar => 0.0,
            StructureKind::Body => continue,
        };
        if n > 0 {
            out.insert(s.name.clone(), DvhCurve::constant(s.name.clone(), dose, n)?);
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> KitResult<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Phantom { site, patients, .. } => {
            if let Some(site) = site {
                if Path::new(site).is_file() {
                    cfg.site.preset = None;
                    cfg.site.file = Some(PathBuf::from(site));
                } else {
                    cfg.site.preset = Some(site.clone());
                    cfg.site.file = None;
                }
            }
            if let Some(n) = patients {
                cfg.site.patients = *n;
            }
        }
        Command::Plan { plans_per_patient, beams, .. } => {
            if let Some(m) = plans_per_patient {
                cfg.site.plans_per_patient = *m;
            }
            if let Some(b) = beams {
                cfg.planning.beams.n_beams = *b;
            }
        }
        Command::Train(a) | Command::Finetune { train: a, .. } => {
            if let Some(i) = a.iterations {
                cfg.schedule.max_iterations = i;
                if let Some(f) = cfg.experiment.fine_tune.as_mut() {
                    f.max_iterations = i;
                }
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let jobs = cfg.jobs;
    let mut ctx = Ctx {
        cfg,
        seeds: BTreeMap::new(),
    };
    with_jobs(jobs, move || dispatch(&cli.command, &mut ctx))?
}

fn dispatch(command: &Command, ctx: &mut Ctx) -> KitResult<()> {
    match command {
        Command::Phantom { out, .. } => {
            let spec = ctx.cfg.site.spec()?;
            let cases = generate_cohort(&spec, ctx.cfg.site.patients, ctx.cfg.seed)?;
            for (i, c) in cases.iter().enumerate() {
                ctx.seeds.insert(format!("phantom/{}/{i}", spec.site_id), c.seed);
                store::write_patient(&out.join(&c.id), c, spec.kernel)?;
            }
            log::info!("wrote {} patients to {}", cases.len(), out.display());
            ctx.record("phantom", &record_path(out, true))
        }
        Command::Plan { input, out, .. } => {
            ensure_distinct(input, out)?;
            let stored = store::read_patients(input)?;
            let cases: Vec<_> = stored.iter().map(|p| p.case.clone()).collect();
            let plans = plan_cohort(&cases, &ctx.cfg.planning, ctx.cfg.site.plans_per_patient, ctx.cfg.seed)?;
            for ((p, c), ps) in stored.iter().zip(&cases).zip(&plans) {
                ctx.seeds.insert(format!("plans/{}", c.id), ps[0].1);
                store::write_patient_plans(&out.join(&c.id), c, p.kernel, ps)?;
            }
            ctx.record("plan", &record_path(out, true))
        }
        Command::Preprocess { input, out } => {
            ensure_distinct(input, out)?;
            let mut kernel = None;
            let mut cases = Vec::new();
            let mut plans = Vec::new();
            for dir in store::patient_dirs(input)? {
                let p = store::read_patient(&dir)?;
                if kernel.is_some_and(|k| k != p.kernel) {
                    return Err(KitError::Validation("patients disagree on the model kernel".into()));
                }
                kernel = Some(p.kernel);
                let pdirs = store::plan_dirs(&dir)?;
                if pdirs.is_empty() {
                    return Err(KitError::Validation(format!("{}: no plans", dir.display())));
                }
                for pd in pdirs {
                    plans.push(store::read_plan(&pd)?);
                }
                cases.push(p.case);
            }
            let kernel = kernel.expect("at least one patient");
            let samples = dataset_build(&cases, &plans, kernel)?;
            store::write_dataset(out, &samples, kernel)?;
            log::info!("wrote {} samples to {}", samples.len(), out.display());
            ctx.record("preprocess", &record_path(out, true))
        }
        Command::Train(a) => {
            let ds = store::read_dataset(&a.data)?;
            let (tr, val) = train_val(&ds, &ctx.cfg)?;
            let init = Init::Random {
                config: ctx.cfg.unet,
                seed: ctx.seed("init"),
            };
            let seed = ctx.seed("train");
            let sched = ctx.cfg.schedule.with_seed(seed);
            let ckpt = train(init, &tr, &val, &sched)?;
            log_meta(&ckpt);
            dkpt::write(&a.out, &ckpt)?;
            ctx.record("train", &record_path(&a.out, false))
        }
        Command::Finetune { ckpt, train: a } => {
            let src = dkpt::read(ckpt)?;
            let ds = store::read_dataset(&a.data)?;
            let (tr, val) = train_val(&ds, &ctx.cfg)?;
            let base = ctx
                .cfg
                .experiment
                .fine_tune
                .unwrap_or_else(|| ctx.cfg.schedule.for_fine_tuning());
            let seed = ctx.seed("finetune");
            let sched = base.with_seed(seed);
            let out = fine_tune(&src, &tr, &val, &sched)?;
            log_meta(&out);
            dkpt::write(&a.out, &out)?;
            ctx.record("finetune", &record_path(&a.out, false))
        }
        Command::Predict { ckpt, patient, plan, out } => {
            let model = dkpt::read(ckpt)?;
            let p = store::read_patient(patient)?;
            let dvhs = match plan {
                Some(dir) => structure_dvhs(&store::read_plan(dir)?.dose, &p.case.structures)?,
                None => default_dvhs(&p.case)?,
            };
            let kernel = model.params.kernel;
            let input = assemble_input(&p.case, &dvhs, kernel)?;
            let cropped = forward(&model.params, &input, Mode::Infer, 0)?;
            let placement = CropPlacement::for_body(p.case.structures.body(), kernel)?;
            let dose = placement.restore(&cropped)?;
            dvol::write(out, &dose)?;
            ctx.record("predict", &record_path(out, false))
        }
        Command::Evaluate(a) => {
            let reports = match (&a.pred, &a.ckpt) {
                (Some(pred), _) => {
                    let (patient, plan) = (a.patient.as_ref().unwrap(), a.plan.as_ref().unwrap());
                    let p = store::read_patient(patient)?;
                    let gt = store::read_plan(plan)?;
                    let pred = dvol::read(pred)?;
                    let r = evaluate_plan(&pred, &gt.dose, &p.case.structures)?;
                    vec![(format!("{}/{}", gt.patient_id, gt.plan_index), r)]
                }
                (None, Some(ckpt)) => {
                    let model = dkpt::read(ckpt)?;
                    let ds = store::read_dataset(a.data.as_ref().unwrap())?;
                    let reports = evaluate_model(&model.params, &ds.samples)?;
                    ds.samples
                        .iter()
                        .map(|s| format!("{}/{}", s.patient_id, s.plan_index))
                        .zip(reports)
                        .collect()
                }
                (None, None) => {
                    return Err(KitError::Usage("evaluate needs --pred/--patient/--plan or --ckpt/--data".into()))
                }
            };
            std::fs::create_dir_all(&a.out).map_err(|e| KitError::io(&a.out, e))?;
            let json: BTreeMap<&str, _> = reports.iter().map(|(k, r)| (k.as_str(), r)).collect();
            write_json(&a.out.join("report.json"), &json)?;
            export::metrics_csv(&a.out.join("metrics.csv"), &reports)?;
            ctx.record("evaluate", &record_path(&a.out, true))
        }
        Command::Dvh { dose, patient, out } => {
            let p = store::read_patient(patient)?;
            let d = dvol::read(dose)?;
            let curves = structure_dvhs(&d, &p.case.structures)?;
            export::dvh_csv(out, &curves)?;
            ctx.record("dvh", &record_path(out, false))
        }
        Command::Experiment(e) => experiment(e, ctx),
    }
}

fn log_meta(c: &ModelCheckpoint) {
    if let Some(m) = &c.meta {
        log::info!(
            "{} iterations, best val loss {:.4e} at {}, final lr {:e}{}",
            m.iterations_run,
            m.best_val_loss,
            m.best_iteration,
            m.final_lr,
            if m.stopped_early { ", stopped early" } else { "" }
        );
    }
}

fn experiment(cmd: &ExperimentCommand, ctx: &mut Ctx) -> KitResult<()> {
    let cfg = ctx.cfg.clone();
    let exp = cfg.experiment_config();
    ctx.seeds.insert("experiment".into(), exp.seed);
    let (src_spec, src_grouped) = site_samples(&cfg.site, &cfg.planning, cfg.seed)?;
    let (tgt_spec, tgt_grouped) = site_samples(&cfg.experiment.target, &cfg.planning, cfg.seed)?;
    if src_spec.kernel != tgt_spec.kernel {
        return Err(KitError::Validation(format!(
            "source kernel {:?} differs from target kernel {:?}",
            src_spec.kernel.dims, tgt_spec.kernel.dims
        )));
    }
    let source = split_samples(&src_grouped, &cfg.site.splits()?)?;
    let tsplits = cfg.experiment.target.splits()?;
    let target = split_samples(&tgt_grouped, &tsplits)?;
    match cmd {
        ExperimentCommand::FourModel { out } => {
            let (report, models) = four_model_protocol(&source, &target, &exp)?;
            for (k, c) in &models {
                dkpt::write(&out.join("models").join(format!("{}.dkpt", k.label())), c)?;
            }
            write_json(&out.join("report.json"), &report)?;
            export::experiment_csvs(out, &report)?;
            ctx.record("experiment four-model", &record_path(out, true))
        }
        ExperimentCommand::SizeSweep { out, source_ckpt } => {
            let src = match source_ckpt {
                Some(p) => dkpt::read(p)?,
                None => {
                    let init = Init::Random {
                        config: cfg.unet,
                        seed: derive_seed(exp.seed, "init/source"),
                    };
                    let c = train(init, &source.train, &source.val, &cfg.schedule.with_seed(derive_seed(exp.seed, "train/source")))?;
                    dkpt::write(&out.join("models").join("source.dkpt"), &c)?;
                    c
                }
            };
            let pool: Vec<_> = tsplits.train.iter().map(|&i| tgt_grouped[i].clone()).collect();
            let data = SweepData {
                source_ckpt: &src,
                source_train: &source.train,
                target_pool: &pool,
                val: &target.val,
                test: &target.test,
            };
            if cfg.experiment.sweep.models.contains(&ModelKind::Source) {
                log::info!("source model evaluated without retraining in every sweep cell");
            }
            let report = size_sweep(&data, &cfg.experiment.sweep, &exp)?;
            write_json(&out.join("report.json"), &report)?;
            export::experiment_csvs(out, &report)?;
            ctx.record("experiment size-sweep", &record_path(out, true))
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print a JSON [`ErrorRecord`] as the last line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
            }
            let err = KitError::Usage(e.render().to_string().trim_end().to_string());
            eprintln!("{}", e.render());
            emit(&err);
            return err.kind().exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            emit(&e);
            e.kind().exit_code()
        }
    }
}

fn emit(e: &KitError) {
    let rec = ErrorRecord::from(e);
    eprintln!("{}", serde_json::to_string(&rec).expect("error record serializes"));
}
