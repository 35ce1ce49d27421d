//! File-backed commands. Each reads its prerequisites from the output
//! directory, writes its artifacts there and returns a one-line summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use bundleforge::corpus::{Dataset, Scenario, SplitRole};
use bundleforge::diet::{
    BundleScorer, DistillMode, FusionVariant, StudentInputs, StudentSpec, StudentState, TeacherSpec, TeacherState,
    TrainReport,
};
use bundleforge::eval::{case_report, CASE_CSV_HEADER, case_rows_csv, scenario_cases, score_distribution, MetricsReport};
use bundleforge::feedback::{FeedbackTable, FEEDBACK_FILE};
use bundleforge::numerics::{derive_seed, Stage};
use bundleforge::Error;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::pipeline;

pub const TEACHER_FILE: &str = "teacher.bndc";
pub const SWEEP_FILE: &str = "sweep.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const REPORT_DIR: &str = "report";

/// Failure of a command, grouped by what the user has to fix.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(Error),
    #[error("missing {path}; run `bundleforge {producer}` first")]
    Missing { path: PathBuf, producer: String },
    #[error("{0}")]
    Data(Error),
    #[error("{0}")]
    Internal(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Config(e),
            Error::Parse { .. } | Error::Format { .. } | Error::MissingFeature(_) | Error::Io(_) | Error::Json(_) => {
                CliError::Data(e)
            }
            _ => CliError::Internal(e),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Feedback,
    TrainTeacher,
    Train,
    Eval,
    Sweep,
    Ablate,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Feedback => "feedback",
            Command::TrainTeacher => "train-teacher",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Ablate => "ablate",
            Command::Report => "report",
        }
    }
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> CliResult<String> {
    fs::create_dir_all(&cfg.out).map_err(Error::from)?;
    match cmd {
        Command::Synth => synth(cfg),
        Command::Feedback => feedback(cfg),
        Command::TrainTeacher => train_teacher(cfg),
        Command::Train => train(cfg),
        Command::Eval => eval(cfg),
        Command::Sweep => sweep(cfg),
        Command::Ablate => ablate(cfg),
        Command::Report => report(cfg),
    }
}

/// Metadata stored next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub distill: String,
    pub fusion: String,
    pub dim: usize,
    pub item_layers: usize,
    pub bundle_layers: usize,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_val_recall: f64,
}

/// File stem of a student: the distill mode, plus the fusion variant when
/// it is not the full model.
pub fn student_tag(distill: DistillMode, fusion: FusionVariant) -> String {
    match fusion {
        FusionVariant::Full => format!("student_{distill}"),
        _ => format!("student_{distill}_{fusion}"),
    }
}

fn require(path: PathBuf, producer: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing {
            path,
            producer: producer.to_string(),
        })
    }
}

fn load_data(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let dir = cfg.data_dir();
    require(dir.join(bundleforge::corpus::BUNDLES_FILE), "synth")?;
    Ok(Dataset::load(dir)?)
}

fn load_feedback(cfg: &ExperimentConfig) -> CliResult<FeedbackTable> {
    Ok(FeedbackTable::load(require(cfg.out.join(FEEDBACK_FILE), "feedback")?)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn save_model(
    cfg: &ExperimentConfig,
    stem: &str,
    params: &bundleforge::numerics::ParamTable<f32>,
    meta: &ModelMeta,
    report: &TrainReport,
) -> CliResult<PathBuf> {
    let path = cfg.out.join(format!("{stem}.bndc"));
    checkpoint::save(&path, params)?;
    write_json(&cfg.out.join(format!("{stem}.json")), meta)?;
    fs::write(cfg.out.join(format!("{stem}_metrics.tsv")), report.to_tsv()).map_err(Error::from)?;
    Ok(path)
}

fn load_meta(cfg: &ExperimentConfig, stem: &str) -> CliResult<ModelMeta> {
    let text = fs::read_to_string(cfg.out.join(format!("{stem}.json"))).map_err(Error::from)?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn load_teacher(cfg: &ExperimentConfig) -> CliResult<TeacherState> {
    let path = require(cfg.out.join(TEACHER_FILE), "train-teacher")?;
    let meta = load_meta(cfg, "teacher")?;
    let mut t = TeacherState {
        spec: TeacherSpec::new(meta.bundle_layers),
        params: checkpoint::load(path)?,
    };
    t.freeze();
    Ok(t)
}

fn load_student(cfg: &ExperimentConfig, distill: DistillMode, fusion: FusionVariant) -> CliResult<StudentState> {
    let stem = student_tag(distill, fusion);
    let producer = match fusion {
        FusionVariant::Full => format!("train --distill {distill}"),
        _ => "ablate".to_string(),
    };
    let path = require(cfg.out.join(format!("{stem}.bndc")), &producer)?;
    let meta = load_meta(cfg, &stem)?;
    let fusion: FusionVariant = meta.fusion.parse()?;
    Ok(StudentState {
        spec: StudentSpec::new(meta.item_layers, meta.bundle_layers, fusion),
        params: checkpoint::load(path)?,
    })
}

fn meta(cfg: &ExperimentConfig, kind: &str, distill: DistillMode, fusion: FusionVariant, r: &TrainReport) -> ModelMeta {
    ModelMeta {
        kind: kind.to_string(),
        distill: distill.to_string(),
        fusion: fusion.to_string(),
        dim: cfg.train.dim,
        item_layers: cfg.train.item_layers,
        bundle_layers: cfg.train.bundle_layers,
        seed: cfg.seed,
        best_epoch: r.best_epoch,
        best_val_recall: r.best_val_recall,
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |v| format!("{v:.4}"))
}

fn synth(cfg: &ExperimentConfig) -> CliResult<String> {
    let data = pipeline::synth(cfg)?;
    let dir = cfg.data_dir();
    data.save(&dir)?;
    Ok(format!(
        "synth: {} items, {} users, {} bundles, {} interactions -> {}",
        data.n_items(),
        data.interactions.n_users(),
        data.bundles.len(),
        data.interactions.nnz(),
        dir.display()
    ))
}

fn feedback(cfg: &ExperimentConfig) -> CliResult<String> {
    let data = load_data(cfg)?;
    let fb = pipeline::feedback(cfg, &data)?;
    let path = cfg.out.join(FEEDBACK_FILE);
    fb.save(&path)?;
    Ok(format!(
        "feedback: {} x {} item table, norm/popularity rank correlation {:.3} -> {}",
        fb.n_items(),
        fb.dim(),
        fb.popularity_correlation(data.interactions.item_counts()),
        path.display()
    ))
}

fn train_teacher(cfg: &ExperimentConfig) -> CliResult<String> {
    let data = load_data(cfg)?;
    let split = pipeline::split(cfg, &data)?;
    let (teacher, report) = pipeline::teacher(cfg, &data, &split)?;
    let m = meta(cfg, "teacher", DistillMode::None, FusionVariant::Full, &report);
    let path = save_model(cfg, "teacher", &teacher.params, &m, &report)?;
    Ok(format!(
        "train-teacher: {} epochs, best {} with val recall@20 {:.4} -> {}",
        report.epochs.len(),
        report.best_epoch.map_or("-".into(), |e| e.to_string()),
        report.best_val_recall,
        path.display()
    ))
}

fn student_inputs(cfg: &ExperimentConfig, data: &Dataset) -> CliResult<StudentInputs<f32>> {
    Ok(StudentInputs::new(&data.corpus, &load_feedback(cfg)?)?)
}

fn train_one(
    cfg: &ExperimentConfig,
    data: &Dataset,
    inputs: &StudentInputs<f32>,
    distill: DistillMode,
    fusion: FusionVariant,
) -> CliResult<(StudentState, TrainReport, PathBuf)> {
    let split = pipeline::split(cfg, data)?;
    let teacher = match distill {
        DistillMode::None => None,
        _ => Some(load_teacher(cfg)?),
    };
    let (student, report) = pipeline::student(cfg, data, inputs, &split, teacher.as_ref(), distill, fusion)?;
    let m = meta(cfg, "student", distill, fusion, &report);
    let path = save_model(cfg, &student_tag(distill, fusion), &student.params, &m, &report)?;
    Ok((student, report, path))
}

fn train(cfg: &ExperimentConfig) -> CliResult<String> {
    let data = load_data(cfg)?;
    let inputs = student_inputs(cfg, &data)?;
    let (distill, fusion) = (cfg.train.distill, cfg.train.fusion);
    let (_, report, path) = train_one(cfg, &data, &inputs, distill, fusion)?;
    Ok(format!(
        "train: distill={distill} fusion={fusion}, {} epochs, best {} with val recall@20 {:.4} -> {}",
        report.epochs.len(),
        report.best_epoch.map_or("-".into(), |e| e.to_string()),
        report.best_val_recall,
        path.display()
    ))
}

fn main_scorer(student: &StudentState, inputs: &StudentInputs<f32>) -> CliResult<BundleScorer> {
    Ok(student.scorers(inputs)?.0)
}

fn eval_json(cfg: &ExperimentConfig, model: &str, reports: &[MetricsReport]) -> serde_json::Value {
    json!({
        "model": model,
        "distill": cfg.train.distill.to_string(),
        "fusion": cfg.train.fusion.to_string(),
        "seed": cfg.seed,
        "head_ratio": cfg.head_ratio,
        "tail_ratio": cfg.tail_ratio,
        "reports": reports,
    })
}

fn eval(cfg: &ExperimentConfig) -> CliResult<String> {
    let data = load_data(cfg)?;
    let inputs = student_inputs(cfg, &data)?;
    let split = pipeline::split(cfg, &data)?;
    let (distill, fusion) = (cfg.train.distill, cfg.train.fusion);
    let student = load_student(cfg, distill, fusion)?;
    let reports = pipeline::evaluate(cfg, &data, &split, &main_scorer(&student, &inputs)?, &cfg.scenarios)?;
    let tag = student_tag(distill, fusion);
    let path = cfg.out.join(format!("eval_{}.json", tag.trim_start_matches("student_")));
    write_json(&path, &eval_json(cfg, &tag, &reports))?;
    let k = cfg.ks[0];
    let mut line = format!("eval: {tag}");
    for r in &reports {
        let _ = write!(line, " | {} (n={}) recall@{k} {}", r.scenario, r.count, fmt_metric(r.recall(k)));
    }
    let _ = write!(line, " -> {}", path.display());
    Ok(line)
}

fn distilled_mode(cfg: &ExperimentConfig, cmd: &str) -> CliResult<DistillMode> {
    match cfg.train.distill {
        DistillMode::None => Err(CliError::Config(Error::Config(format!(
            "`{cmd}` compares the backbone with a distilled student; pass --distill logits, feature or both"
        )))),
        m => Ok(m),
    }
}

fn sweep(cfg: &ExperimentConfig) -> CliResult<String> {
    let distill = distilled_mode(cfg, "sweep")?;
    let data = load_data(cfg)?;
    let inputs = student_inputs(cfg, &data)?;
    let split = pipeline::split(cfg, &data)?;
    let backbone = main_scorer(&load_student(cfg, DistillMode::None, FusionVariant::Full)?, &inputs)?;
    let diet = main_scorer(&load_student(cfg, distill, FusionVariant::Full)?, &inputs)?;
    let points = pipeline::sweep(cfg, &data, &split, &backbone, &diet)?;
    let path = cfg.out.join(SWEEP_FILE);
    write_json(
        &path,
        &json!({ "seed": cfg.seed, "backbone": "student_none", "diet": student_tag(distill, FusionVariant::Full), "points": points }),
    )?;
    let mut line = format!("sweep: pop2lt recall@{} improvement", cfg.ks[0]);
    for p in &points {
        let imp = p.improvement_pct.map_or("n/a".into(), |v| format!("{v:+.1}%"));
        let _ = write!(line, " {}:{imp}(n={})", p.ratio, p.backbone.count);
    }
    let _ = write!(line, " -> {}", path.display());
    Ok(line)
}

fn ablate(cfg: &ExperimentConfig) -> CliResult<String> {
    let data = load_data(cfg)?;
    let inputs = student_inputs(cfg, &data)?;
    let split = pipeline::split(cfg, &data)?;
    let full = load_student(cfg, DistillMode::None, FusionVariant::Full)?;
    let scenarios = [Scenario::Overall, Scenario::PopToLt];
    let mut rows = vec![(
        FusionVariant::Full,
        pipeline::evaluate(cfg, &data, &split, &main_scorer(&full, &inputs)?, &scenarios)?,
    )];
    for fusion in [FusionVariant::WoUi, FusionVariant::WoMm, FusionVariant::WoBi] {
        let (student, _, _) = train_one(cfg, &data, &inputs, DistillMode::None, fusion)?;
        let reports = pipeline::evaluate(cfg, &data, &split, &main_scorer(&student, &inputs)?, &scenarios)?;
        rows.push((fusion, reports));
    }
    let path = cfg.out.join(ABLATION_FILE);
    let variants: Vec<_> = rows
        .iter()
        .map(|(f, r)| json!({ "fusion": f.to_string(), "reports": r }))
        .collect();
    write_json(&path, &json!({ "seed": cfg.seed, "variants": variants }))?;
    let k = cfg.ks[0];
    let mut line = format!("ablate: pop2lt recall@{k}");
    for (f, r) in &rows {
        let _ = write!(line, " {f} {}", fmt_metric(r[1].recall(k)));
    }
    let _ = write!(line, " -> {}", path.display());
    Ok(line)
}

fn report(cfg: &ExperimentConfig) -> CliResult<String> {
    let data = load_data(cfg)?;
    let inputs = student_inputs(cfg, &data)?;
    let split = pipeline::split(cfg, &data)?;
    let profile = pipeline::profile(cfg, &data)?;
    let test = split.indices(SplitRole::Test);
    let seed = derive_seed(cfg.seed, Stage::Eval);
    let overall = scenario_cases(&data.bundles, &test, &profile, Scenario::Overall, seed);
    let pop2lt = scenario_cases(&data.bundles, &test, &profile, Scenario::PopToLt, seed);
    let mut models = vec![DistillMode::None];
    if cfg.train.distill != DistillMode::None {
        models.push(cfg.train.distill);
    }
    let dir = cfg.out.join(REPORT_DIR);
    fs::create_dir_all(&dir).map_err(Error::from)?;
    let mut cases_written = 0;
    for distill in &models {
        let tag = student_tag(*distill, FusionVariant::Full);
        let scorer = main_scorer(&load_student(cfg, *distill, FusionVariant::Full)?, &inputs)?;
        let hist = score_distribution(&scorer, &overall, &profile, cfg.hist_bins)?;
        fs::write(dir.join(format!("scores_{tag}.csv")), hist.to_csv()).map_err(Error::from)?;
        let mut csv = format!("case,{CASE_CSV_HEADER}\n");
        for (n, case) in pop2lt.iter().take(cfg.case_count).enumerate() {
            let rows = case_report(&scorer, case, &profile, cfg.case_k)?;
            let body = case_rows_csv(&rows, |i| data.corpus.ids.external(i).to_string());
            for line in body.lines().skip(1) {
                let _ = writeln!(csv, "{n},{line}");
            }
            cases_written += 1;
        }
        fs::write(dir.join(format!("cases_{tag}.csv")), csv).map_err(Error::from)?;
    }
    Ok(format!(
        "report: {} score histograms over {} cases, {cases_written} pop2lt case studies -> {}",
        models.len(),
        overall.len(),
        dir.display()
    ))
}
