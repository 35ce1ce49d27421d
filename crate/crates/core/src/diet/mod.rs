//! Popularity-free teacher, multimodal student, and the distillation that
//! connects them.
//!
//! The teacher scores items from bundle co-membership alone: a trainable
//! item table and one bundle-level attention stack. The student fuses
//! content, user feedback and its own item table, and additionally scores
//! items from content only; distillation aligns that content-only path with
//! the teacher.

mod loss;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

pub use loss::{construction_loss, feature_distill_loss, logits_distill_loss, tempered_targets, total_loss};
pub use model::{
    pcd_forward, BoundStudent, student_batch, teacher_batch, ubt_forward, BundleScorer, StudentInputs,
    StudentOutput, StudentSpec, StudentState, TeacherOutput, TeacherSpec, TeacherState,
};
pub use train::{
    student_gradcheck, student_step_loss, train_student, train_teacher, validation_cases, EpochLog, StepLoss,
    TeacherTargets, TrainReport, METRICS_HEADER,
};

use crate::error::{Error, Result};

/// Which distillation term joins the construction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistillMode {
    Logits,
    Feature,
    Both,
    None,
}

impl DistillMode {
    pub fn name(self) -> &'static str {
        match self {
            DistillMode::Logits => "logits",
            DistillMode::Feature => "feature",
            DistillMode::Both => "both",
            DistillMode::None => "none",
        }
    }

    pub fn uses_logits(self) -> bool {
        matches!(self, DistillMode::Logits | DistillMode::Both)
    }

    pub fn uses_features(self) -> bool {
        matches!(self, DistillMode::Feature | DistillMode::Both)
    }
}

/// Direction of the logits divergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KdDirection {
    /// `sum P_t (ln P_t - log P_s)`: the usual soft-target loss.
    TeacherToStudent,
    /// `sum P_s (log P_s - ln P_t)`.
    StudentToTeacher,
}

impl KdDirection {
    pub fn name(self) -> &'static str {
        match self {
            KdDirection::TeacherToStudent => "teacher_to_student",
            KdDirection::StudentToTeacher => "student_to_teacher",
        }
    }
}

/// Similarity behind the feature distillation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureSim {
    /// `1 - cos(a, b)`, in `[0, 2]`.
    Cosine,
    /// `||a - b||^2`.
    SquaredEuclidean,
}

impl FeatureSim {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSim::Cosine => "cosine",
            FeatureSim::SquaredEuclidean => "squared_euclidean",
        }
    }
}

/// Rows kept in the student's fused item matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionVariant {
    Full,
    /// Without user feedback.
    WoUi,
    /// Without multimodal content.
    WoMm,
    /// Without the bundle-level item embedding.
    WoBi,
}

impl FusionVariant {
    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Full => "full",
            FusionVariant::WoUi => "wo_ui",
            FusionVariant::WoMm => "wo_mm",
            FusionVariant::WoBi => "wo_bi",
        }
    }

    pub fn uses_content(self) -> bool {
        self != FusionVariant::WoMm
    }

    pub fn uses_feedback(self) -> bool {
        self != FusionVariant::WoUi
    }

    pub fn uses_embedding(self) -> bool {
        self != FusionVariant::WoBi
    }
}

macro_rules! parse_by_name {
    ($ty:ty, [$($v:expr),+ $(,)?]) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let all = [$($v),+];
                all.iter()
                    .copied()
                    .find(|v| v.name() == s.to_ascii_lowercase())
                    .ok_or_else(|| {
                        let names: Vec<&str> = all.iter().map(|v| v.name()).collect();
                        Error::Config(format!("unknown value `{s}` (expected one of {})", names.join(", ")))
                    })
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

parse_by_name!(DistillMode, [DistillMode::Logits, DistillMode::Feature, DistillMode::Both, DistillMode::None]);
parse_by_name!(KdDirection, [KdDirection::TeacherToStudent, KdDirection::StudentToTeacher]);
parse_by_name!(FeatureSim, [FeatureSim::Cosine, FeatureSim::SquaredEuclidean]);
parse_by_name!(FusionVariant, [FusionVariant::Full, FusionVariant::WoUi, FusionVariant::WoMm, FusionVariant::WoBi]);

/// Hyperparameters shared by teacher and student training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Model width.
    pub dim: usize,
    /// Item-level attention layers.
    pub item_layers: usize,
    /// Bundle-level attention layers.
    pub bundle_layers: usize,
    pub temperature: f64,
    /// Weight of the distillation loss.
    pub lambda: f64,
    /// Squared-L2 weight on student parameters.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub teacher_lr: f64,
    pub teacher_epochs: usize,
    pub distill: DistillMode,
    pub kd_direction: KdDirection,
    pub feature_sim: FeatureSim,
    pub fusion: FusionVariant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            item_layers: 1,
            bundle_layers: 1,
            temperature: 2.0,
            lambda: 1.0,
            beta: 1e-5,
            lr: 1e-2,
            batch_size: 256,
            epochs: 40,
            patience: 20,
            teacher_lr: 1e-2,
            teacher_epochs: 40,
            distill: DistillMode::Logits,
            kd_direction: KdDirection::TeacherToStudent,
            feature_sim: FeatureSim::Cosine,
            fusion: FusionVariant::Full,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    /// Batch size used at full corpus scale.
    pub const FULL_SCALE_BATCH: usize = 2048;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be > 0");
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return bad("lambda and beta must be >= 0");
        }
        if !(self.lr > 0.0 && self.teacher_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in [DistillMode::Logits, DistillMode::Feature, DistillMode::Both, DistillMode::None] {
            assert_eq!(m.name().parse::<DistillMode>().unwrap(), m);
        }
        for v in [FusionVariant::Full, FusionVariant::WoUi, FusionVariant::WoMm, FusionVariant::WoBi] {
            assert_eq!(v.to_string().parse::<FusionVariant>().unwrap(), v);
        }
        assert_eq!("WO_BI".parse::<FusionVariant>().unwrap(), FusionVariant::WoBi);
        assert!("sideways".parse::<FusionVariant>().is_err());
        assert!("kl".parse::<DistillMode>().is_err());
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.dim, c.temperature, c.lambda, c.beta), (64, 2.0, 1.0, 1e-5));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { temperature: 0.0, ..c }.validate().is_err());
    }
}
