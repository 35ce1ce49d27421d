//! In-memory pipeline stages. Commands wrap these with file I/O; the
//! acceptance suite calls them directly.

use bundleforge::corpus::{
    compute_popularity, split_bundles, synth_generate, Dataset, PopularityProfile, Scenario, SplitAssignment,
    SplitRole,
};
use bundleforge::diet::{
    train_student, train_teacher, DistillMode, FusionVariant, StudentInputs, StudentState, TeacherState, TrainConfig,
    TrainReport,
};
use bundleforge::eval::{evaluate_scenarios, popularity_sweep, MetricsReport, Scorer, SweepPoint};
use bundleforge::feedback::{train_feedback, FeedbackTable};
use bundleforge::numerics::{derive_seed, Stage};
use bundleforge::{Error, Result};

use crate::config::ExperimentConfig;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "BUNDLEFORGE_THREADS";

/// Evaluation worker count: `BUNDLEFORGE_THREADS` when set, otherwise every
/// available core.
pub fn eval_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn synth(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(synth_generate(&cfg.synth)?.dataset)
}

pub fn feedback(cfg: &ExperimentConfig, data: &Dataset) -> Result<FeedbackTable> {
    train_feedback(&data.interactions, &cfg.feedback)
}

pub fn split(cfg: &ExperimentConfig, data: &Dataset) -> Result<SplitAssignment> {
    split_bundles(&data.bundles, derive_seed(cfg.seed, Stage::Split))
}

pub fn profile(cfg: &ExperimentConfig, data: &Dataset) -> Result<PopularityProfile> {
    compute_popularity(&data.interactions, cfg.head_ratio, cfg.tail_ratio)
}

pub fn teacher(cfg: &ExperimentConfig, data: &Dataset, split: &SplitAssignment) -> Result<(TeacherState, TrainReport)> {
    train_teacher(data.n_items(), &data.bundles, split, &cfg.train)
}

/// Student training config for one distill mode and fusion variant.
pub fn student_config(cfg: &ExperimentConfig, distill: DistillMode, fusion: FusionVariant) -> TrainConfig {
    TrainConfig {
        distill,
        fusion,
        ..cfg.train.clone()
    }
}

pub fn student(
    cfg: &ExperimentConfig,
    data: &Dataset,
    inputs: &StudentInputs<f32>,
    split: &SplitAssignment,
    teacher: Option<&TeacherState>,
    distill: DistillMode,
    fusion: FusionVariant,
) -> Result<(StudentState, TrainReport)> {
    train_student(inputs, &data.bundles, split, teacher, &student_config(cfg, distill, fusion))
}

/// Scenario reports over the test split.
pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    split: &SplitAssignment,
    scorer: &dyn Scorer,
    scenarios: &[Scenario],
) -> Result<Vec<MetricsReport>> {
    let profile = profile(cfg, data)?;
    evaluate_scenarios(
        scorer,
        &data.bundles,
        &split.indices(SplitRole::Test),
        &profile,
        scenarios,
        &cfg.ks,
        derive_seed(cfg.seed, Stage::Eval),
        eval_threads()?,
    )
}

/// Pop-to-LT comparison of two models across `cfg.sweep_ratios`.
pub fn sweep(
    cfg: &ExperimentConfig,
    data: &Dataset,
    split: &SplitAssignment,
    backbone: &dyn Scorer,
    diet: &dyn Scorer,
) -> Result<Vec<SweepPoint>> {
    popularity_sweep(
        backbone,
        diet,
        &data.bundles,
        &split.indices(SplitRole::Test),
        data.interactions.item_counts(),
        &cfg.sweep_ratios,
        &cfg.ks,
        derive_seed(cfg.seed, Stage::Eval),
        eval_threads()?,
    )
}
