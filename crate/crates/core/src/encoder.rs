//! Hierarchical self-attention backbone.
//!
//! One attention layer maps `H` (r x d) to `softmax(H W_K (H W_Q)^T / sqrt(d)) H`.
//! There is no value projection, residual or feed-forward block, and a stack
//! reuses one `(W_K, W_Q)` pair at every layer.
//!
//! Item-level attention runs over a handful of feature rows per item. Rather
//! than one small graph per item, [`BoundStack::attend_slots`] runs the
//! same computation for all items at once, with slot `j` holding row `j` of
//! every item.

use crate::error::{Error, Result};
use crate::numerics::{concat_cols, concat_rows, xavier_uniform, ParamTable, Scalar, SplitMix64, Tape, Var};

/// Shape and parameter names of one attention stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionStack {
    pub name: String,
    pub layers: usize,
}

impl AttentionStack {
    pub fn new(name: impl Into<String>, layers: usize) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }

    pub fn key_name(&self) -> String {
        format!("{}.w_k", self.name)
    }

    pub fn query_name(&self) -> String {
        format!("{}.w_q", self.name)
    }

    /// Registers Xavier-initialized `d x d` projections.
    pub fn init<S: Scalar>(&self, params: &mut ParamTable<S>, d: usize, rng: &mut SplitMix64) -> Result<()> {
        params.insert(self.key_name(), xavier_uniform(d, d, rng)?)?;
        params.insert(self.query_name(), xavier_uniform(d, d, rng)?)?;
        Ok(())
    }

    /// Places the projections on `tape`, tracked when `trainable`.
    pub fn bind<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &ParamTable<S>,
        trainable: bool,
    ) -> Result<BoundStack<'t, S>> {
        let load = |name: &str| {
            if trainable {
                tape.param(params, name)
            } else {
                tape.frozen(params, name)
            }
        };
        let w_k = load(&self.key_name())?;
        let w_q = load(&self.query_name())?;
        let (r, c) = w_k.shape();
        if r != c || w_q.shape() != (r, c) {
            return Err(Error::shape("attention projections", w_k.shape(), w_q.shape()));
        }
        Ok(BoundStack {
            w_k,
            w_q,
            layers: self.layers,
            scale: S::one() / S::of_usize(r).sqrt(),
        })
    }
}

/// An [`AttentionStack`] whose projections live on a tape.
#[derive(Clone, Copy)]
pub struct BoundStack<'t, S: Scalar> {
    pub w_k: Var<'t, S>,
    pub w_q: Var<'t, S>,
    pub layers: usize,
    scale: S,
}

impl<'t, S: Scalar> BoundStack<'t, S> {
    /// Applies the attention recurrence `layers` times to `h` (r x d).
    pub fn self_attend(&self, h: Var<'t, S>) -> Result<Var<'t, S>> {
        let mut h = h;
        for _ in 0..self.layers {
            let keys = h.matmul(&self.w_k)?;
            let queries = h.matmul(&self.w_q)?;
            let weights = keys.matmul_t(&queries)?.scale(self.scale).softmax_rows();
            h = weights.matmul(&h)?;
        }
        Ok(h)
    }

    /// Bundle representation: attention over the stacked item rows, then
    /// their mean.
    pub fn encode_bundle(&self, items: Var<'t, S>) -> Result<Var<'t, S>> {
        if items.shape().0 == 0 {
            return Err(Error::Empty("partial bundle"));
        }
        self.self_attend(items)?.mean_rows()
    }

    /// Item-wise attention over slots. `slots[j]` (n x d) holds feature row
    /// `j` of all n items; the result has the same layout after `layers`
    /// rounds.
    pub fn attend_slots(&self, slots: &[Var<'t, S>]) -> Result<Vec<Var<'t, S>>> {
        let r = slots.len();
        if r == 0 {
            return Err(Error::Empty("attention slots"));
        }
        let shape = slots[0].shape();
        if let Some(bad) = slots.iter().find(|s| s.shape() != shape) {
            return Err(Error::shape("attend_slots", shape, bad.shape()));
        }
        let mut h = slots.to_vec();
        for _ in 0..self.layers {
            let keys = h.iter().map(|x| x.matmul(&self.w_k)).collect::<Result<Vec<_>>>()?;
            let queries = h.iter().map(|x| x.matmul(&self.w_q)).collect::<Result<Vec<_>>>()?;
            let mut next = Vec::with_capacity(r);
            for kj in &keys {
                let scores = queries
                    .iter()
                    .map(|qk| kj.row_dot(qk))
                    .collect::<Result<Vec<_>>>()?;
                let weights = concat_cols(&scores)?.scale(self.scale).softmax_rows();
                let mut acc: Option<Var<'t, S>> = None;
                for (k, hk) in h.iter().enumerate() {
                    let term = hk.mul_col(&weights.slice_cols(k, 1)?)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => a.add(&term)?,
                    });
                }
                next.push(acc.expect("r >= 1"));
            }
            h = next;
        }
        Ok(h)
    }

    /// Item representations: slot attention followed by the mean over slots.
    pub fn encode_items(&self, slots: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let out = self.attend_slots(slots)?;
        let mut acc = out[0];
        for o in &out[1..] {
            acc = acc.add(o)?;
        }
        Ok(acc.scale(S::one() / S::of_usize(out.len())))
    }

    /// Representation of one item from its stacked feature rows (r x d).
    pub fn encode_item(&self, rows: Var<'t, S>) -> Result<Var<'t, S>> {
        self.self_attend(rows)?.mean_rows()
    }
}

/// Stacks one item's fused rows `[W_c c, W_p p, v]`, where `c` is the
/// average of the text and media vectors (already in a common width).
/// Any row may be left out for ablations; at least one must remain.
pub fn fuse_item<'t, S: Scalar>(
    content: Option<(Var<'t, S>, Var<'t, S>, Var<'t, S>)>,
    feedback: Option<(Var<'t, S>, Var<'t, S>)>,
    embedding: Option<Var<'t, S>>,
) -> Result<Var<'t, S>> {
    let mut rows = Vec::with_capacity(3);
    if let Some((t, m, w_c)) = content {
        rows.push(t.add(&m)?.scale(S::of(0.5)).matmul(&w_c)?);
    }
    if let Some((p, w_p)) = feedback {
        rows.push(p.matmul(&w_p)?);
    }
    if let Some(v) = embedding {
        rows.push(v);
    }
    if rows.is_empty() {
        return Err(Error::Empty("fused item rows"));
    }
    concat_rows(&rows)
}

/// Inner products of `e_b` (b x d) with every item row (n x d): b x n logits.
pub fn score_all<'t, S: Scalar>(e_b: &Var<'t, S>, items: &Var<'t, S>) -> Result<Var<'t, S>> {
    e_b.matmul_t(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn stack_params(d: usize, seed: u64) -> (AttentionStack, ParamTable<f64>) {
        let s = AttentionStack::new("s", 2);
        let mut p = ParamTable::new();
        s.init(&mut p, d, &mut SplitMix64::new(seed)).unwrap();
        (s, p)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identical_rows_are_a_fixed_point() {
        let (s, p) = stack_params(4, 1);
        let tape = Tape::new();
        let st = s.bind(&tape, &p, false).unwrap();
        let row = [0.3, -1.2, 2.0, 0.7];
        let h = tape.constant(Tensor::from_rows(&[row, row, row]).unwrap());
        let out = st.self_attend(h).unwrap().value();
        for r in 0..3 {
            for c in 0..4 {
                assert!((out.get(r, c) - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_is_unchanged() {
        let (s, p) = stack_params(3, 2);
        let tape = Tape::new();
        let st = s.bind(&tape, &p, false).unwrap();
        let h = random(1, 3, 5);
        assert_eq!(st.self_attend(tape.constant(h.clone())).unwrap().value(), h);
    }

    #[test]
    fn two_by_two_hand_oracle() {
        let mut p = ParamTable::<f64>::new();
        p.insert("s.w_k", Tensor::identity(2)).unwrap();
        p.insert("s.w_q", Tensor::identity(2)).unwrap();
        let tape = Tape::new();
        let st = AttentionStack::new("s", 1).bind(&tape, &p, false).unwrap();
        let out = st.self_attend(tape.constant(Tensor::identity(2))).unwrap().value();
        // A = I / sqrt(2); each row softmax gives e^a / (e^a + 1) on the diagonal
        let a = (0.5f64).sqrt();
        let hi = a.exp() / (a.exp() + 1.0);
        let expected = [hi, 1.0 - hi, 1.0 - hi, hi];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn bundle_encoding_ignores_item_order() {
        let (s, p) = stack_params(6, 3);
        let x = random(4, 6, 9);
        let tape = Tape::new();
        let st = s.bind(&tape, &p, false).unwrap();
        let a = st.encode_bundle(tape.constant(x.clone())).unwrap().value();
        let b = st
            .encode_bundle(tape.constant(x.select_rows(&[2, 0, 3, 1])))
            .unwrap()
            .value();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        let single = random(1, 6, 4);
        let e = st.encode_bundle(tape.constant(single.clone())).unwrap().value();
        assert_eq!(e, single);
        let empty = tape.constant(Tensor::zeros(0, 6));
        assert!(st.encode_bundle(empty).is_err());
    }

    #[test]
    fn slot_attention_matches_per_item_attention() {
        let (s, p) = stack_params(5, 7);
        let slots: Vec<Tensor<f64>> = (0..3).map(|j| random(4, 5, 20 + j)).collect();
        let tape = Tape::new();
        let st = s.bind(&tape, &p, false).unwrap();
        let vars: Vec<_> = slots.iter().map(|t| tape.constant(t.clone())).collect();
        let grouped = st.encode_items(&vars).unwrap().value();
        for i in 0..4 {
            let rows: Vec<Vec<f64>> = slots.iter().map(|t| t.row(i).to_vec()).collect();
            let single = st
                .encode_item(tape.constant(Tensor::from_rows(&rows).unwrap()))
                .unwrap()
                .value();
            for c in 0..5 {
                assert!((single.get(0, c) - grouped.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_count_matters() {
        let (_, p) = stack_params(4, 8);
        let x = random(3, 4, 10);
        let tape = Tape::new();
        let one = AttentionStack::new("s", 1).bind(&tape, &p, false).unwrap();
        let two = AttentionStack::new("s", 2).bind(&tape, &p, false).unwrap();
        let a = one.encode_item(tape.constant(x.clone())).unwrap().value();
        let b = two.encode_item(tape.constant(x)).unwrap().value();
        assert_ne!(a, b);
        assert_eq!(a.shape(), (1, 4));
    }

    #[test]
    fn fuse_with_identity_maps() {
        let tape = Tape::new();
        let t = tape.constant(Tensor::row_vector(&[1.0, 2.0]));
        let m = tape.constant(Tensor::row_vector(&[3.0, 0.0]));
        let p = tape.constant(Tensor::row_vector(&[5.0, 6.0]));
        let v = tape.constant(Tensor::row_vector(&[7.0, 8.0]));
        let eye = tape.constant(Tensor::<f64>::identity(2));
        let f = fuse_item(Some((t, m, eye)), Some((p, eye)), Some(v)).unwrap().value();
        assert_eq!(f.data(), &[2.0, 1.0, 5.0, 6.0, 7.0, 8.0]);
        let two = fuse_item(Some((t, m, eye)), None, Some(v)).unwrap();
        assert_eq!(two.shape(), (2, 2));
    }

    #[test]
    fn scoring() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::row_vector(&[1.5, -2.0, 0.5]));
        let eye = tape.constant(Tensor::<f64>::identity(3));
        assert_eq!(score_all(&e, &eye).unwrap().value().data(), &[1.5, -2.0, 0.5]);
        let items = random(5, 3, 2);
        let logits = score_all(&e, &tape.constant(items.clone())).unwrap().value();
        for i in 0..5 {
            let oracle: f64 = (0..3).map(|c| items.get(i, c) * [1.5, -2.0, 0.5][c]).sum();
            assert!((logits.get(0, i) - oracle).abs() < 1e-12);
        }
        let ortho = tape.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.5, 2.0]]).unwrap());
        assert_eq!(score_all(&e, &ortho).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::numerics::gradcheck::{check_params, FD_EPS};
        for seed in 0..20 {
            let d = 3 + (seed as usize % 3);
            let (s, mut p) = stack_params(d, seed);
            p.insert("x", random(4, d, 100 + seed)).unwrap();
            p.insert("y", random(4, d, 200 + seed)).unwrap();
            let loss = |p: &ParamTable<f64>| -> Result<(f64, Vec<(String, Vec<f64>)>)> {
                let tape = Tape::new();
                let st = s.bind(&tape, p, true)?;
                let x = tape.param(p, "x")?;
                let y = tape.param(p, "y")?;
                let items = st.encode_items(&[x, y])?;
                let e = st.encode_bundle(items.gather_rows(&[0, 2, 3])?)?;
                let l = score_all(&e, &items)?.log_softmax_rows().pick_sum(&[(0, 1)])?;
                tape.backward(l)?;
                Ok((l.item()?, tape.param_grads()))
            };
            let (_, grads) = loss(&p).unwrap();
            let report = check_params(&p, &grads, FD_EPS, 0, |q| Ok(loss(q)?.0)).unwrap();
            assert!(report.max_rel_error < 1e-3, "seed {seed}: {report:?}");
        }
    }
}
