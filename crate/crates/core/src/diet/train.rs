use std::fmt::Write as _;

use log::{debug, info};

use super::loss::{construction_loss, feature_distill_loss, logits_distill_loss, total_loss};
use super::model::{student_batch, teacher_batch, StudentInputs, StudentState, TeacherState};
use super::{DistillMode, FusionVariant, StudentSpec, TrainConfig};
use crate::corpus::{
    make_overall_case, make_training_case, BundleTable, BundlingCase, CaseLabel, SplitAssignment, SplitRole,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Scorer};
use crate::numerics::gradcheck::{check_params, GradCheckReport, FD_EPS};
use crate::numerics::{derive_seed, AdamState, ParamTable, Scalar, SplitMix64, Stage, Tape, Tensor, Var};

pub const METRICS_HEADER: &str = "epoch\tL_b\tL_d\tval_recall@20";

const VAL_K: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Batch-mean construction loss.
    pub l_b: f64,
    /// Batch-mean distillation loss; 0 without distillation.
    pub l_d: f64,
    pub val_recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept, if any training happened.
    pub best_epoch: Option<usize>,
    pub best_val_recall: f64,
}

impl TrainReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", e.epoch, e.l_b, e.l_d, e.val_recall);
        }
        out
    }
}

/// One OVERALL case per validation bundle with at least two items.
pub fn validation_cases(bundles: &BundleTable, split: &SplitAssignment, seed: u64) -> Vec<BundlingCase> {
    let seed = derive_seed(seed, Stage::Eval);
    split
        .indices(SplitRole::Val)
        .iter()
        .filter(|&&b| bundles.get(b).items.len() >= 2)
        .map(|&b| make_overall_case(b, bundles.get(b), seed, None))
        .collect()
}

fn train_pool(bundles: &BundleTable, split: &SplitAssignment) -> Result<Vec<usize>> {
    let pool: Vec<usize> = split
        .indices(SplitRole::Train)
        .iter()
        .copied()
        .filter(|&b| bundles.get(b).items.len() >= 2)
        .collect();
    if pool.is_empty() {
        return Err(Error::Empty("training split"));
    }
    Ok(pool)
}

fn val_recall(scorer: &dyn Scorer, cases: &[BundlingCase]) -> Result<f64> {
    Ok(evaluate(scorer, cases, "val", &[VAL_K], 1)?.recall(VAL_K).unwrap_or(0.0))
}

/// Tracks the best validation score and decides when to stop.
struct EarlyStop<S> {
    patience: usize,
    best: Option<(usize, f64, ParamTable<S>)>,
    stale: usize,
}

impl<S: Scalar> EarlyStop<S> {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, recall: f64, params: &ParamTable<S>) -> bool {
        if self.best.as_ref().is_none_or(|(_, r, _)| recall > *r) {
            self.best = Some((epoch, recall, params.clone()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }

    fn finish(self, params: &mut ParamTable<S>, report: &mut TrainReport) {
        if let Some((epoch, recall, best)) = self.best {
            *params = best;
            report.best_epoch = Some(epoch);
            report.best_val_recall = recall;
        }
    }
}

fn batch_cases(bundles: &BundleTable, chunk: &[usize], rng: &mut SplitMix64) -> Result<Vec<BundlingCase>> {
    chunk
        .iter()
        .map(|&b| make_training_case(b, bundles.get(b), rng, None))
        .collect()
}

fn split_cases(cases: &[BundlingCase]) -> (Vec<&[usize]>, Vec<&[usize]>) {
    cases
        .iter()
        .map(|c| (c.query.as_slice(), c.target.as_slice()))
        .unzip()
}

/// Trains the teacher on its own construction loss, keeps the parameters of
/// the best validation epoch, and returns it frozen.
pub fn train_teacher(
    n_items: usize,
    bundles: &BundleTable,
    split: &SplitAssignment,
    cfg: &TrainConfig,
) -> Result<(TeacherState, TrainReport)> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, Stage::Teacher));
    let mut teacher = TeacherState::init(n_items, cfg, &mut rng.fork())?;
    let mut report = TrainReport::default();
    if cfg.teacher_epochs > 0 {
        let mut pool = train_pool(bundles, split)?;
        let val = validation_cases(bundles, split, cfg.seed);
        let mut adam = AdamState::new(cfg.teacher_lr);
        let mut stop = EarlyStop::new(cfg.patience);
        for epoch in 1..=cfg.teacher_epochs {
            rng.shuffle(&mut pool);
            let mut l_b_sum = 0.0;
            let mut batches = 0;
            for chunk in pool.chunks(cfg.batch_size) {
                let cases = batch_cases(bundles, chunk, &mut rng)?;
                let (queries, targets) = split_cases(&cases);
                let tape = Tape::new();
                let out = teacher_batch(&tape, &teacher.spec, &teacher.params, &queries, true)?;
                let l_b = construction_loss(&out.logits, &targets)?;
                l_b_sum += l_b.item()? as f64;
                batches += 1;
                teacher.params.zero_grads();
                tape.backward(l_b)?;
                teacher.params.accumulate_grads(&tape)?;
                adam.step(&mut teacher.params)?;
            }
            let recall = val_recall(&teacher.scorer()?, &val)?;
            let log = EpochLog {
                epoch,
                l_b: l_b_sum / batches as f64,
                l_d: 0.0,
                val_recall: recall,
            };
            debug!("teacher epoch {epoch}: L_b {:.6} val R@20 {recall:.4}", log.l_b);
            report.epochs.push(log);
            if stop.observe(epoch, recall, &teacher.params) {
                info!("teacher: stopping after epoch {epoch}");
                break;
            }
        }
        stop.finish(&mut teacher.params, &mut report);
    }
    teacher.freeze();
    Ok((teacher, report))
}

/// Frozen teacher outputs for a batch, used as distillation targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets<S> {
    pub logits: Tensor<S>,
    pub bundles: Tensor<S>,
}

impl TeacherTargets<f32> {
    pub fn compute(teacher: &TeacherState, queries: &[&[usize]]) -> Result<Self> {
        let tape = Tape::new();
        let out = teacher_batch(&tape, &teacher.spec, &teacher.params, queries, false)?;
        Ok(Self {
            logits: out.logits.value(),
            bundles: out.bundles.value(),
        })
    }
}

pub struct StepLoss<'t, S: Scalar> {
    pub total: Var<'t, S>,
    pub l_b: Var<'t, S>,
    pub l_d: Option<Var<'t, S>>,
}

/// Full student objective for one batch: construction loss on the fused
/// path, the configured distillation term on the content path, and L2 over
/// every student parameter.
pub fn student_step_loss<'t, S: Scalar>(
    tape: &'t Tape<S>,
    spec: &StudentSpec,
    params: &ParamTable<S>,
    inputs: &StudentInputs<S>,
    cases: &[BundlingCase],
    teacher: Option<&TeacherTargets<S>>,
    cfg: &TrainConfig,
) -> Result<StepLoss<'t, S>> {
    let (queries, targets) = split_cases(cases);
    let distill = cfg.distill != DistillMode::None;
    let out = student_batch(tape, spec, params, inputs, &queries, distill, true)?;
    let l_b = construction_loss(&out.main_logits, &targets)?;
    let l_d = if distill {
        let t = teacher.ok_or_else(|| {
            Error::Config(format!("distill mode `{}` needs a trained teacher", cfg.distill))
        })?;
        let mut terms = Vec::new();
        if cfg.distill.uses_logits() {
            let s = out.content_logits.expect("content path");
            terms.push(logits_distill_loss(&s, &t.logits, cfg.temperature, cfg.kd_direction)?);
        }
        if cfg.distill.uses_features() {
            let s = out.content_bundles.expect("content path");
            terms.push(feature_distill_loss(&t.bundles, &s, cfg.feature_sim)?);
        }
        let mut sum = terms[0];
        for t in &terms[1..] {
            sum = sum.add(t)?;
        }
        Some(sum)
    } else {
        None
    };
    let total = total_loss(l_b, l_d, cfg.lambda, cfg.beta, &out.bound.all())?;
    Ok(StepLoss { total, l_b, l_d })
}

/// Central-difference check of the whole student objective in 64-bit:
/// fused item encoder, both paths, distillation and L2. Instances cycle
/// through fusion variants, distill modes and temperatures on tiny random
/// inputs; the report carries the worst entry over all of them.
pub fn student_gradcheck(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let variants = [FusionVariant::Full, FusionVariant::WoUi, FusionVariant::WoMm, FusionVariant::WoBi];
    let modes = [DistillMode::Logits, DistillMode::Feature, DistillMode::Both, DistillMode::None];
    let (n, d, d_t, d_m, d_p) = (8, 4, 5, 4, 3);
    let case = |query: &[usize], target: &[usize]| BundlingCase {
        bundle: 0,
        query: query.to_vec(),
        target: target.to_vec(),
        label: CaseLabel::Mixed,
    };
    let cases = [case(&[0, 3], &[5]), case(&[1], &[2, 7]), case(&[4, 6, 2], &[0])];
    let mut rng = SplitMix64::new(seed);
    let mut random = |rows: usize, cols: usize| {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    };
    let mut total = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for k in 0..instances {
        let cfg = TrainConfig {
            dim: d,
            distill: modes[k % 4],
            fusion: variants[(k / 4) % 4],
            temperature: 1.0 + (k % 3) as f64,
            lambda: 0.7,
            beta: 1e-2,
            item_layers: 1 + k % 2,
            ..TrainConfig::default()
        };
        let inputs = StudentInputs {
            text: random(n, d_t)?,
            media: random(n, d_m)?,
            feedback: random(n, d_p)?,
        };
        let teacher = TeacherTargets {
            logits: random(cases.len(), n)?,
            bundles: random(cases.len(), d)?,
        };
        let init_seed = seed.wrapping_add(k as u64);
        let st = StudentState::init(n, d_t, d_m, d_p, &cfg, &mut SplitMix64::new(init_seed))?;
        let params = st.params.cast::<f64>();
        let loss = |p: &ParamTable<f64>| -> Result<(f64, Vec<(String, Vec<f64>)>)> {
            let tape = Tape::new();
            let step = student_step_loss(&tape, &st.spec, p, &inputs, &cases, Some(&teacher), &cfg)?;
            tape.backward(step.total)?;
            Ok((step.total.item()?, tape.param_grads()))
        };
        let (_, grads) = loss(&params)?;
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} of {} student parameters received a gradient",
                grads.len(),
                params.len()
            )));
        }
        let r = check_params(&params, &grads, FD_EPS, 0, |q| Ok(loss(q)?.0))?;
        total.checked += r.checked;
        if r.max_rel_error >= total.max_rel_error {
            total.max_rel_error = r.max_rel_error;
            total.worst = r.worst;
        }
    }
    Ok(total)
}

/// Trains the student against a frozen teacher. With distill mode NONE the
/// teacher is never read, so passing `None` gives the same run.
pub fn train_student(
    inputs: &StudentInputs<f32>,
    bundles: &BundleTable,
    split: &SplitAssignment,
    teacher: Option<&TeacherState>,
    cfg: &TrainConfig,
) -> Result<(StudentState, TrainReport)> {
    cfg.validate()?;
    let teacher = if cfg.distill == DistillMode::None {
        None
    } else {
        let t = teacher.ok_or_else(|| {
            Error::Config(format!("distill mode `{}` needs a trained teacher", cfg.distill))
        })?;
        if !t.is_frozen() {
            return Err(Error::Contract("teacher must be frozen before distillation".into()));
        }
        if t.n_items() != inputs.n_items() {
            return Err(Error::Contract(format!(
                "teacher covers {} items, corpus has {}",
                t.n_items(),
                inputs.n_items()
            )));
        }
        Some(t)
    };
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, Stage::Student));
    let mut student = StudentState::init(
        inputs.n_items(),
        inputs.text.cols(),
        inputs.media.cols(),
        inputs.feedback.cols(),
        cfg,
        &mut rng.fork(),
    )?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((student, report));
    }
    let mut pool = train_pool(bundles, split)?;
    let val = validation_cases(bundles, split, cfg.seed);
    let mut adam = AdamState::new(cfg.lr);
    let mut stop = EarlyStop::new(cfg.patience);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut pool);
        let (mut l_b_sum, mut l_d_sum) = (0.0, 0.0);
        let mut batches = 0;
        for chunk in pool.chunks(cfg.batch_size) {
            let cases = batch_cases(bundles, chunk, &mut rng)?;
            let targets = match teacher {
                Some(t) => {
                    let (queries, _) = split_cases(&cases);
                    Some(TeacherTargets::compute(t, &queries)?)
                }
                None => None,
            };
            let tape = Tape::new();
            let step = student_step_loss(
                &tape,
                &student.spec,
                &student.params,
                inputs,
                &cases,
                targets.as_ref(),
                cfg,
            )?;
            l_b_sum += step.l_b.item()? as f64;
            if let Some(l_d) = &step.l_d {
                l_d_sum += l_d.item()? as f64;
            }
            batches += 1;
            student.params.zero_grads();
            tape.backward(step.total)?;
            student.params.accumulate_grads(&tape)?;
            adam.step(&mut student.params)?;
        }
        let (main, _) = student.scorers(inputs)?;
        let recall = val_recall(&main, &val)?;
        let log = EpochLog {
            epoch,
            l_b: l_b_sum / batches as f64,
            l_d: l_d_sum / batches as f64,
            val_recall: recall,
        };
        debug!(
            "student epoch {epoch}: L_b {:.6} L_d {:.6} val R@20 {recall:.4}",
            log.l_b, log.l_d
        );
        report.epochs.push(log);
        if stop.observe(epoch, recall, &student.params) {
            info!("student: stopping after epoch {epoch}");
            break;
        }
    }
    stop.finish(&mut student.params, &mut report);
    Ok((student, report))
}
