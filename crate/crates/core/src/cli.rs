//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 verification failure, 3 I/O error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use crate::config::{Precision, RunConfig, KEYS};
use crate::data::{generate_synthetic_cohort, load_cohort, plan_folds, write_cohort, Clip, Cohort};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::HeadKind;
use crate::scalar::Scalar;
use crate::train::verify::TOLERANCE;
use crate::train::{
    evaluate, load_checkpoint, model_gradcheck, report_from_clips, run_kfold_with_plan, save_checkpoint,
    train_fold, KFoldReport, MetricsReport, StepLog,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Tubelet temporal extents covered by `ablate`.
pub const ABLATE_T: [usize; 3] = [2, 4, 8];

fn config_args(cmd: Command) -> Command {
    let defaults = RunConfig::default();
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value configuration file; flags override it"),
    );
    for k in KEYS {
        let default = defaults.get(k.key).unwrap_or_default();
        let default = if default.is_empty() { "unset".to_string() } else { default };
        cmd = cmd.arg(
            Arg::new(k.key)
                .long(k.flag)
                .value_name("VALUE")
                .help(format!("{} [config key: {}] [default: {default}]", k.help, k.key)),
        );
    }
    cmd
}

fn out_arg(required: bool, help: &'static str) -> Arg {
    Arg::new("out").long("out").value_name("PATH").required(required).help(help)
}

pub fn command() -> Command {
    Command::new("mcvivit")
        .about("Video transformer for MCI/NC clip classification on synthetic cohorts")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("gen-data")
                .about("Generate a synthetic cohort: clip files plus a CSV manifest")
                .arg(out_arg(true, "output directory")),
        ))
        .subcommand(config_args(
            Command::new("train")
                .about("Train on all folds but one, evaluate the held-out fold, save a checkpoint")
                .arg(out_arg(true, "output directory for report.json and checkpoint/")),
        ))
        .subcommand(config_args(
            Command::new("kfold")
                .about("Subject-disjoint cross-validation with per-fold and pooled reports")
                .arg(out_arg(false, "output directory for fold and pooled JSON reports")),
        ))
        .subcommand(config_args(
            Command::new("eval")
                .about("Evaluate a checkpoint on every clip of a dataset")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("DIR")
                        .required(true)
                        .help("checkpoint directory written by train"),
                )
                .arg(out_arg(false, "write the JSON report here as well as to stdout")),
        ))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every gradient of a small model under the training loss")
                .arg(Arg::new("seed").long("seed").value_name("N").default_value("0"))
                .arg(Arg::new("loss").long("loss").value_name("KIND").default_value("hp"))
                .arg(
                    Arg::new("step")
                        .long("step")
                        .value_name("H")
                        .default_value("0.001"),
                ),
        )
        .subcommand(config_args(
            Command::new("ablate")
                .about("Cross-validate every tubelet t x head x loss combination and write a CSV")
                .arg(out_arg(true, "CSV output path"))
                .arg(
                    Arg::new("quiet")
                        .long("quiet")
                        .action(ArgAction::SetTrue)
                        .help("do not echo rows to stdout"),
                ),
        ))
}

/// Defaults, then the config file, then explicit flags.
pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(Path::new(path))?,
        None => RunConfig::default(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.key) {
            cfg.set(k.key, v)?;
        }
    }
    Ok(cfg)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn dispatch(m: &ArgMatches) -> Result<i32> {
    match m.subcommand() {
        Some(("gen-data", sub)) => cmd_gen_data(sub),
        Some(("train", sub)) => with_precision(sub, |c, s| match c.precision {
            Precision::F32 => cmd_train::<f32>(c, s),
            Precision::F64 => cmd_train::<f64>(c, s),
        }),
        Some(("kfold", sub)) => with_precision(sub, |c, s| match c.precision {
            Precision::F32 => cmd_kfold::<f32>(c, s),
            Precision::F64 => cmd_kfold::<f64>(c, s),
        }),
        Some(("eval", sub)) => with_precision(sub, |c, s| match c.precision {
            Precision::F32 => cmd_eval::<f32>(c, s),
            Precision::F64 => cmd_eval::<f64>(c, s),
        }),
        Some(("gradcheck", sub)) => cmd_gradcheck(sub),
        Some(("ablate", sub)) => with_precision(sub, |c, s| match c.precision {
            Precision::F32 => cmd_ablate::<f32>(c, s),
            Precision::F64 => cmd_ablate::<f64>(c, s),
        }),
        _ => Err(Error::Config("unknown command".into())),
    }
}

fn with_precision(m: &ArgMatches, f: impl FnOnce(&RunConfig, &ArgMatches) -> Result<i32>) -> Result<i32> {
    let cfg = resolve_config(m)?;
    cfg.validate()?;
    f(&cfg, m)
}

fn out_path(m: &ArgMatches) -> Option<PathBuf> {
    m.get_one::<String>("out").map(PathBuf::from)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<Cohort> {
    if cfg.data.is_empty() {
        return Err(Error::Config("no dataset given: set data or pass --data".into()));
    }
    let cohort = load_cohort(Path::new(&cfg.data))?;
    if let Some(c) = cohort.clips.first() {
        let expected = cfg.model.clip_shape();
        if c.frames.shape() != expected {
            return Err(Error::Config(format!(
                "dataset clips are {:?}, configuration expects {expected:?}",
                c.frames.shape()
            )));
        }
    }
    Ok(cohort)
}

fn cmd_gen_data(m: &ArgMatches) -> Result<i32> {
    let cfg = resolve_config(m)?;
    let out = out_path(m).expect("required");
    let cohort = generate_synthetic_cohort(&cfg.cohort)?;
    let manifest = write_cohort(&out, &cohort)?;
    cfg.save(&out.join("config.cfg"))?;
    let (mci, nc) = cohort.class_counts();
    println!(
        "wrote {} clips from {} subjects ({mci} MCI, {nc} NC) to {}",
        cohort.clips.len(),
        cohort.subjects.len(),
        manifest.display()
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config: &'a RunConfig,
    report: &'a MetricsReport,
    history: &'a [StepLog],
}

fn cmd_train<S: Scalar>(cfg: &RunConfig, m: &ArgMatches) -> Result<i32> {
    let out = out_path(m).expect("required");
    let cohort = load_data(cfg)?;
    let plan = plan_folds(cohort.subjects.len(), cfg.l_fold, cfg.train.seed)?;
    let outcome = train_fold::<S>(&cohort, &plan, cfg.fold, &cfg.model, &cfg.train)?;
    create_dir(&out)?;
    save_checkpoint(&out.join("checkpoint"), &outcome.model)?;
    write_json(
        &out.join("report.json"),
        &TrainOutput {
            config: cfg,
            report: &outcome.report,
            history: &outcome.history,
        },
    )?;
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct KFoldOutput<'a> {
    config: &'a RunConfig,
    #[serde(flatten)]
    report: &'a KFoldReport,
}

fn kfold_report<S: Scalar>(cfg: &RunConfig, cohort: &Cohort) -> Result<KFoldReport> {
    let mut plan = plan_folds(cohort.subjects.len(), cfg.l_fold, cfg.train.seed)?;
    if cfg.max_folds > 0 && cfg.max_folds < plan.k {
        // Subjects of the skipped folds are never held out; they stay in the
        // training split of every fold that is run.
        plan.k = cfg.max_folds;
    }
    run_kfold_with_plan::<S>(cohort, &plan, &cfg.model, &cfg.train)
}

fn cmd_kfold<S: Scalar>(cfg: &RunConfig, m: &ArgMatches) -> Result<i32> {
    let cohort = load_data(cfg)?;
    let report = kfold_report::<S>(cfg, &cohort)?;
    if let Some(out) = out_path(m) {
        create_dir(&out)?;
        for r in &report.folds {
            write_json(&out.join(format!("fold_{:02}.json", r.fold.unwrap_or(0))), r)?;
        }
        write_json(&out.join("pooled.json"), &report.pooled)?;
        write_json(&out.join("report.json"), &KFoldOutput { config: cfg, report: &report })?;
    }
    println!("{}", serde_json::to_string_pretty(&report.pooled)?);
    Ok(EXIT_OK)
}

fn cmd_eval<S: Scalar>(cfg: &RunConfig, m: &ArgMatches) -> Result<i32> {
    let dir = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
    let model = load_checkpoint::<S>(&dir)?;
    if cfg.data.is_empty() {
        return Err(Error::Config("no dataset given: set data or pass --data".into()));
    }
    let cohort = load_cohort(Path::new(&cfg.data))?;
    let clips: Vec<&Clip> = cohort.clips.iter().collect();
    let predictions = evaluate(&model, &clips)?;
    let report = report_from_clips(None, &predictions)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = out_path(m) {
        write_json(&out, &report)?;
    }
    println!("{text}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(m: &ArgMatches) -> Result<i32> {
    let seed: u64 = parse_flag(m, "seed")?;
    let loss: LossKind = m.get_one::<String>("loss").expect("default").parse()?;
    let step: f64 = parse_flag(m, "step")?;
    let check = model_gradcheck(seed, loss, step)?;
    println!(
        "parameters {} checked {} max_rel_error {:.3e} (tolerance {:.0e})",
        check.n_parameters, check.report.n_checked, check.report.max_rel_error, TOLERANCE
    );
    Ok(if check.passed() { EXIT_OK } else { EXIT_VERIFY })
}

fn parse_flag<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = m.get_one::<String>(name).expect("default");
    raw.parse()
        .map_err(|e| Error::Config(format!("bad value '{raw}' for --{name}: {e}")))
}

/// One line of the ablation table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub t: usize,
    pub head: HeadKind,
    pub loss: LossKind,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub clip_accuracy: Option<f64>,
    pub clip_auc: Option<f64>,
    pub n_subjects: usize,
}

/// Cross-validates every `t x head x loss` combination on `cohort`.
pub fn ablation_grid<S: Scalar>(cfg: &RunConfig, cohort: &Cohort) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for t in ABLATE_T {
        for head in [HeadKind::Mc, HeadKind::NoMc] {
            for loss in [LossKind::Hp, LossKind::Focal, LossKind::Fd] {
                let mut run = cfg.clone();
                run.model.tubelet.t = t;
                run.model.head = head;
                run.train.loss = loss;
                run.validate()?;
                let report = kfold_report::<S>(&run, cohort)?;
                let p = report.pooled;
                rows.push(AblationRow {
                    t,
                    head,
                    loss,
                    accuracy: p.accuracy,
                    f1: p.f1,
                    auc: p.auc,
                    sensitivity: p.sensitivity,
                    specificity: p.specificity,
                    clip_accuracy: p.clip_accuracy,
                    clip_auc: p.clip_auc,
                    n_subjects: p.n_subjects,
                });
            }
        }
    }
    Ok(rows)
}

fn cmd_ablate<S: Scalar>(cfg: &RunConfig, m: &ArgMatches) -> Result<i32> {
    let out = out_path(m).expect("required");
    let cohort = load_data(cfg)?;
    let rows = ablation_grid::<S>(cfg, &cohort)?;
    let mut writer = csv::Writer::from_path(&out)?;
    for r in &rows {
        writer.serialize(r)?;
        if !m.get_flag("quiet") {
            println!(
                "t={} head={} loss={} accuracy={:?} auc={:?}",
                r.t, r.head, r.loss, r.accuracy, r.auc
            );
        }
    }
    writer.flush().map_err(|e| Error::io(&out, e))?;
    Ok(EXIT_OK)
}
