//! Central finite-difference checking of tape gradients.
//!
//! The perturbation side never touches the tape's backward pass: it only
//! re-evaluates the forward closure, so it stays an independent oracle.

use crate::error::Result;
use crate::numerics::params::ParamTable;
use crate::numerics::rng::SplitMix64;
use crate::numerics::tape::{concat_cols, concat_rows, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Default perturbation.
pub const FD_EPS: f64 = 1e-3;
/// Relative-error denominator floor; below it the error is absolute.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares `analytic` (name -> gradient) against central differences of
/// `loss` for every entry of every named parameter, or a strided subset of
/// at most `max_per_param` entries when that limit is non-zero.
pub fn check_params<F>(
    params: &ParamTable<f64>,
    analytic: &[(String, Vec<f64>)],
    eps: f64,
    max_per_param: usize,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamTable<f64>) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, grad) in analytic {
        let len = grad.len();
        let stride = if max_per_param == 0 || len <= max_per_param {
            1
        } else {
            len.div_ceil(max_per_param)
        };
        for k in (0..len).step_by(stride) {
            let orig = probe.get(name)?.data()[k];
            probe.get_mut(name)?.data_mut()[k] = orig + eps;
            let up = loss(&probe)?;
            probe.get_mut(name)?.data_mut()[k] = orig - eps;
            let down = loss(&probe)?;
            probe.get_mut(name)?.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(grad[k], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((name.clone(), k, grad[k], numeric));
                }
            }
        }
    }
    Ok(report)
}

/// Worst relative error of one differentiable op over random instances.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

type OpFn = for<'t> fn(&[Var<'t, f64>], &mut SplitMix64) -> Result<Var<'t, f64>>;

fn op_table() -> Vec<(&'static str, fn(&mut SplitMix64) -> Vec<(usize, usize)>, OpFn)> {
    fn same(rng: &mut SplitMix64) -> Vec<(usize, usize)> {
        let s = (2 + rng.below(3), 2 + rng.below(4));
        vec![s, s]
    }
    fn one(rng: &mut SplitMix64) -> Vec<(usize, usize)> {
        vec![(2 + rng.below(3), 2 + rng.below(4))]
    }
    fn chain(rng: &mut SplitMix64) -> Vec<(usize, usize)> {
        let (r, k, c) = (2 + rng.below(3), 2 + rng.below(4), 2 + rng.below(3));
        vec![(r, k), (k, c)]
    }
    fn paired(rng: &mut SplitMix64) -> Vec<(usize, usize)> {
        let (r, k, c) = (2 + rng.below(3), 2 + rng.below(4), 2 + rng.below(3));
        vec![(r, k), (c, k)]
    }
    fn with_col(rng: &mut SplitMix64) -> Vec<(usize, usize)> {
        let (r, c) = (2 + rng.below(3), 2 + rng.below(4));
        vec![(r, c), (r, 1)]
    }
    fn stacked(rng: &mut SplitMix64) -> Vec<(usize, usize)> {
        let c = 2 + rng.below(4);
        vec![(2 + rng.below(3), c), (1 + rng.below(3), c)]
    }
    fn side(rng: &mut SplitMix64) -> Vec<(usize, usize)> {
        let r = 2 + rng.below(3);
        vec![(r, 1 + rng.below(3)), (r, 2 + rng.below(3))]
    }
    fn normalized(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor<f64> {
        let mut t = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let w: Vec<f64> = (0..cols).map(|_| rng.next_f64() + 0.05).collect();
            let z: f64 = w.iter().sum();
            t.row_mut(r).iter_mut().zip(&w).for_each(|(o, x)| *o = x / z);
        }
        t
    }
    vec![
        ("matmul", chain, |v, _| v[0].matmul(&v[1])),
        ("matmul_t", paired, |v, _| v[0].matmul_t(&v[1])),
        ("transpose", one, |v, _| Ok(v[0].transpose())),
        ("add", same, |v, _| v[0].add(&v[1])),
        ("sub", same, |v, _| v[0].sub(&v[1])),
        ("mul", same, |v, _| v[0].mul(&v[1])),
        ("scale", one, |v, rng| Ok(v[0].scale(rng.normal()))),
        ("add_scalar", one, |v, rng| Ok(v[0].add_scalar(rng.normal()))),
        ("softmax_rows", one, |v, _| Ok(v[0].softmax_rows())),
        ("log_softmax_rows", one, |v, _| Ok(v[0].log_softmax_rows())),
        ("mean_rows", one, |v, _| v[0].mean_rows()),
        ("sum", one, |v, _| Ok(v[0].sum())),
        ("mean", one, |v, _| v[0].mean()),
        ("sum_cols", one, |v, _| Ok(v[0].sum_cols())),
        ("row_dot", same, |v, _| v[0].row_dot(&v[1])),
        ("mul_col", with_col, |v, _| v[0].mul_col(&v[1])),
        ("slice_cols", one, |v, rng| {
            let c = v[0].shape().1;
            let start = rng.below(c - 1);
            v[0].slice_cols(start, 1 + rng.below(c - start))
        }),
        ("gather_rows", one, |v, rng| {
            let r = v[0].shape().0;
            let idx: Vec<usize> = (0..1 + rng.below(5)).map(|_| rng.below(r)).collect();
            v[0].gather_rows(&idx)
        }),
        ("pick_sum", one, |v, rng| {
            let (r, c) = v[0].shape();
            let cells: Vec<(usize, usize)> = (0..1 + rng.below(6)).map(|_| (rng.below(r), rng.below(c))).collect();
            v[0].pick_sum(&cells)
        }),
        ("cosine_rows", same, |v, _| v[0].cosine_rows(&v[1])),
        ("kl_div", one, |v, rng| {
            let (r, c) = v[0].shape();
            let mut lq = normalized(r, c, rng);
            lq.data_mut().iter_mut().for_each(|x| *x = x.ln());
            v[0].log_softmax_rows().kl_div(&lq)
        }),
        ("kl_div_reverse", one, |v, rng| {
            let (r, c) = v[0].shape();
            let mut lq = normalized(r, c, rng);
            lq.data_mut().iter_mut().for_each(|x| *x = x.ln());
            v[0].log_softmax_rows().kl_div_reverse(&lq)
        }),
        ("concat_rows", stacked, |v, _| concat_rows(v)),
        ("concat_cols", side, |v, _| concat_cols(v)),
    ]
}

/// Checks every differentiable tape op against central differences on
/// `instances` random inputs each. The loss is a random weighting of the
/// op's output, so no output entry is left out of the comparison.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    for (op, shapes, f) in op_table() {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let mut params = ParamTable::new();
            let names: Vec<String> = shapes(&mut rng)
                .into_iter()
                .enumerate()
                .map(|(k, (r, c))| {
                    let name = format!("x{k}");
                    let data = (0..r * c).map(|_| rng.normal()).collect();
                    params.insert(name.clone(), Tensor::new(r, c, data)?)?;
                    Ok(name)
                })
                .collect::<Result<_>>()?;
            // Draws inside the op and the weighting are replayed identically
            // for every perturbed evaluation.
            let draw_seed = rng.next_u64();
            let loss = |p: &ParamTable<f64>| -> Result<(f64, Vec<(String, Vec<f64>)>)> {
                let tape = Tape::new();
                let vars = names.iter().map(|n| tape.param(p, n)).collect::<Result<Vec<_>>>()?;
                let mut draws = SplitMix64::new(draw_seed);
                let y = f(&vars, &mut draws)?;
                let (r, c) = y.shape();
                let w = Tensor::new(r, c, (0..r * c).map(|_| draws.normal()).collect())?;
                let l = y.mul(&tape.constant(w))?.sum();
                tape.backward(l)?;
                Ok((l.item()?, tape.param_grads()))
            };
            let (_, grads) = loss(&params)?;
            let report = check_params(&params, &grads, FD_EPS, 0, |q| Ok(loss(q)?.0))?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(OpCheck {
            op,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for c in op_suite(20, 11).unwrap() {
            assert!(c.max_rel_error < 1e-3, "{}: {}", c.op, c.max_rel_error);
        }
    }

    #[test]
    fn relative_error_floors_tiny_gradients() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-7, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut p = ParamTable::new();
        p.insert("x", Tensor::row_vector(&[1.0, 2.0])).unwrap();
        let wrong = vec![("x".to_string(), vec![1.0, 4.0])];
        let r = check_params(&p, &wrong, FD_EPS, 0, |q| {
            Ok(q.get("x")?.data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!(r.max_rel_error > 0.4);
        assert_eq!(r.worst.as_ref().map(|w| w.1), Some(0));
    }
}
