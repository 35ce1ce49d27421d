use log::warn;

use super::{FeatureSim, KdDirection};
use crate::error::{Error, Result};
use crate::numerics::kernels::log_softmax_row;
use crate::numerics::{Scalar, Tensor, Var};

/// Negative log-likelihood of the targets under a per-case softmax over all
/// items, divided by `batch * n_items`.
pub fn construction_loss<'t, S: Scalar>(logits: &Var<'t, S>, targets: &[&[usize]]) -> Result<Var<'t, S>> {
    let (b, n) = logits.shape();
    if b == 0 || targets.is_empty() {
        return Err(Error::Empty("construction batch"));
    }
    if targets.len() != b {
        return Err(Error::shape("construction_loss", (b, n), (targets.len(), n)));
    }
    let mut cells = Vec::new();
    for (r, t) in targets.iter().enumerate() {
        if t.is_empty() {
            return Err(Error::Empty("target set"));
        }
        cells.extend(t.iter().map(|&i| (r, i)));
    }
    let picked = logits.log_softmax_rows().pick_sum(&cells)?;
    Ok(picked.scale(-S::one() / S::of_usize(b * n)))
}

/// `softmax(logits / T)` row by row, as a constant target.
pub fn tempered_targets<S: Scalar>(logits: &Tensor<S>, temperature: f64) -> Tensor<S> {
    let mut out = tempered_log_targets(logits, temperature);
    out.data_mut().iter_mut().for_each(|v| *v = v.exp());
    out
}

/// `log_softmax(logits / T)`, scaled exactly as the student side is so that
/// identical logits give bitwise identical log-probabilities.
fn tempered_log_targets<S: Scalar>(logits: &Tensor<S>, temperature: f64) -> Tensor<S> {
    let inv = S::one() / S::of(temperature);
    let mut out = Tensor::zeros(logits.rows(), logits.cols());
    let mut scaled = vec![S::zero(); logits.cols()];
    for r in 0..logits.rows() {
        for (s, &v) in scaled.iter_mut().zip(logits.row(r)) {
            *s = v * inv;
        }
        log_softmax_row(&scaled, out.row_mut(r));
    }
    out
}

/// Tempered divergence between teacher and student distributions, averaged
/// over the batch and scaled by `T^2`. The teacher side is a plain tensor, so
/// no gradient can reach it.
pub fn logits_distill_loss<'t, S: Scalar>(
    student: &Var<'t, S>,
    teacher: &Tensor<S>,
    temperature: f64,
    direction: KdDirection,
) -> Result<Var<'t, S>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    if student.shape() != teacher.shape() {
        return Err(Error::shape("logits_distill_loss", student.shape(), teacher.shape()));
    }
    let b = student.shape().0;
    if b == 0 {
        return Err(Error::Empty("distillation batch"));
    }
    let log_ps = student.scale(S::one() / S::of(temperature)).log_softmax_rows();
    let log_pt = tempered_log_targets(teacher, temperature);
    let kl = match direction {
        KdDirection::TeacherToStudent => log_ps.kl_div(&log_pt)?,
        KdDirection::StudentToTeacher => log_ps.kl_div_reverse(&log_pt)?,
    };
    Ok(kl.scale(S::of(temperature * temperature) / S::of_usize(b)))
}

/// Mean dissimilarity between teacher and student bundle representations.
pub fn feature_distill_loss<'t, S: Scalar>(
    teacher: &Tensor<S>,
    student: &Var<'t, S>,
    sim: FeatureSim,
) -> Result<Var<'t, S>> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape("feature_distill_loss", student.shape(), teacher.shape()));
    }
    let b = student.shape().0;
    if b == 0 {
        return Err(Error::Empty("distillation batch"));
    }
    let t = student.tape().constant(teacher.clone());
    match sim {
        FeatureSim::Cosine => {
            let s = student.value();
            for r in 0..b {
                let zero = |row: &[S]| row.iter().all(|&x| x == S::zero());
                if zero(s.row(r)) || zero(teacher.row(r)) {
                    warn!("feature distillation: zero-norm representation in row {r}; similarity taken as 0");
                }
            }
            let cos = student.cosine_rows(&t)?;
            Ok(cos.mean()?.scale(-S::one()).add_scalar(S::one()))
        }
        FeatureSim::SquaredEuclidean => {
            let diff = student.sub(&t)?;
            Ok(diff.mul(&diff)?.sum().scale(S::one() / S::of_usize(b)))
        }
    }
}

/// `L_b + lambda * L_d + beta * sum ||theta||^2` over `params`.
pub fn total_loss<'t, S: Scalar>(
    l_b: Var<'t, S>,
    l_d: Option<Var<'t, S>>,
    lambda: f64,
    beta: f64,
    params: &[Var<'t, S>],
) -> Result<Var<'t, S>> {
    let mut total = l_b;
    if let Some(l_d) = l_d {
        if lambda != 0.0 {
            total = total.add(&l_d.scale(S::of(lambda)))?;
        }
    }
    if beta != 0.0 {
        for p in params {
            total = total.add(&p.mul(p)?.sum().scale(S::of(beta)))?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::row_vector(v)
    }

    /// `sum p ln(p / q)` written out directly.
    fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(&p, &q)| if p > 0.0 { p * (p / q).ln() } else { 0.0 }).sum()
    }

    fn softmax(v: &[f64], t: f64) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = v.iter().map(|x| ((x - m) / t).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    }

    #[test]
    fn uniform_logits_cost_ln_n_over_n() {
        let tape = Tape::new();
        let n = 7;
        let logits = tape.leaf(Tensor::<f64>::zeros(3, n));
        let l = construction_loss(&logits, &[&[0], &[3], &[6]]).unwrap();
        let want = (n as f64).ln() / n as f64;
        assert!((l.item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn construction_loss_rejects_bad_targets() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(2, 4));
        assert!(construction_loss(&logits, &[&[0]]).is_err());
        assert!(construction_loss(&logits, &[&[0], &[]]).is_err());
    }

    #[test]
    fn tempered_kl_matches_hand_computation() {
        let tape = Tape::new();
        let s = tape.leaf(row(&[0.0, 0.0, 0.0]));
        let l = logits_distill_loss(&s, &row(&[2.0, 0.0, 0.0]), 2.0, KdDirection::TeacherToStudent).unwrap();
        let e = std::f64::consts::E;
        let p = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        let want = 4.0 * kl(&p, &[1.0 / 3.0; 3]);
        assert!((l.item().unwrap() - want).abs() < 1e-12, "{} vs {want}", l.item().unwrap());
    }

    #[test]
    fn identical_logits_give_zero_at_every_temperature() {
        let z: Tensor<f64> = Tensor::from_rows(&[[0.3, -1.2, 2.0, 0.0], [5.0, 5.0, -3.0, 1.0]]).unwrap();
        for t in [1.0, 2.0, 3.0] {
            for dir in [KdDirection::TeacherToStudent, KdDirection::StudentToTeacher] {
                let tape = Tape::new();
                let s = tape.leaf(z.clone());
                let l = logits_distill_loss(&s, &z, t, dir).unwrap().item().unwrap();
                assert_eq!(l, 0.0, "T={t} {dir}");
            }
        }
    }

    #[test]
    fn unit_temperature_is_plain_kl() {
        let (s, t) = ([0.5, -0.25, 1.5, 0.0], [-1.0, 2.0, 0.25, 0.75]);
        let (ps, pt) = (softmax(&s, 1.0), softmax(&t, 1.0));
        let tape = Tape::new();
        let sv = tape.leaf(row(&s));
        let fwd = logits_distill_loss(&sv, &row(&t), 1.0, KdDirection::TeacherToStudent).unwrap();
        let rev = logits_distill_loss(&sv, &row(&t), 1.0, KdDirection::StudentToTeacher).unwrap();
        assert!((fwd.item().unwrap() - kl(&pt, &ps)).abs() < 1e-6);
        assert!((rev.item().unwrap() - kl(&ps, &pt)).abs() < 1e-6);
    }

    #[test]
    fn distill_loss_averages_over_rows() {
        let s = Tensor::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let tape = Tape::new();
        let sv = tape.leaf(s);
        let l = logits_distill_loss(&sv, &t, 3.0, KdDirection::TeacherToStudent).unwrap();
        let want = 9.0 * kl(&softmax(&[1.0, 0.0, 0.0], 3.0), &softmax(&[0.0, 1.0, 0.0], 3.0)) / 2.0;
        assert!((l.item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn distill_loss_rejects_bad_input() {
        let tape = Tape::new();
        let s = tape.leaf(row(&[0.0, 1.0]));
        assert!(logits_distill_loss(&s, &row(&[0.0, 1.0]), 0.0, KdDirection::TeacherToStudent).is_err());
        assert!(logits_distill_loss(&s, &row(&[0.0, 1.0, 2.0]), 1.0, KdDirection::TeacherToStudent).is_err());
    }

    #[test]
    fn feature_loss_values() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [0.0, 3.0]]).unwrap());
        let same = Tensor::from_rows(&[[2.0, 4.0], [0.0, 1.0]]).unwrap();
        let anti = Tensor::from_rows(&[[-1.0, -2.0], [0.0, -3.0]]).unwrap();
        let cos = |t: &Tensor<f64>| feature_distill_loss(t, &a, FeatureSim::Cosine).unwrap().item().unwrap();
        assert!(cos(&same).abs() < 1e-12);
        assert!((cos(&anti) - 2.0).abs() < 1e-12);
        let sq = feature_distill_loss(&Tensor::zeros(2, 2), &a, FeatureSim::SquaredEuclidean)
            .unwrap()
            .item()
            .unwrap();
        assert!((sq - 14.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_with_zero_row_counts_as_orthogonal() {
        let tape = Tape::new();
        let a = tape.leaf(row(&[0.0, 0.0]));
        let l = feature_distill_loss(&row(&[1.0, 0.0]), &a, FeatureSim::Cosine).unwrap();
        assert!((l.item().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_term_adds_beta_times_squared_norm() {
        let tape = Tape::new();
        let l_b = tape.leaf(Tensor::scalar(0.5));
        let p = tape.leaf(row(&[3.0, 4.0]));
        let l_d = tape.leaf(Tensor::scalar(2.0));
        let t = total_loss(l_b, Some(l_d), 0.5, 1e-5, &[p]).unwrap();
        assert!((t.item().unwrap() - (0.5 + 1.0 + 25e-5)).abs() < 1e-12);
        let bare = total_loss(l_b, None, 0.5, 0.0, &[p]).unwrap();
        assert_eq!(bare.item().unwrap(), 0.5);
    }
}
