use super::{FusionVariant, TrainConfig};
use crate::corpus::ItemCorpus;
use crate::encoder::{score_all, AttentionStack, BoundStack};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::feedback::FeedbackTable;
use crate::numerics::kernels::matmul_t_acc;
use crate::numerics::{concat_rows, xavier_uniform, ParamTable, Scalar, SplitMix64, Tape, Tensor, Var};

/// Parameter layout of the teacher.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherSpec {
    pub bundle: AttentionStack,
}

impl TeacherSpec {
    pub const EMBEDDING: &'static str = "teacher.v";

    pub fn new(bundle_layers: usize) -> Self {
        Self {
            bundle: AttentionStack::new("teacher.bundle", bundle_layers),
        }
    }
}

/// Trained teacher: an item table and one bundle attention stack.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub spec: TeacherSpec,
    pub params: ParamTable<f32>,
}

impl TeacherState {
    pub fn init(n_items: usize, cfg: &TrainConfig, rng: &mut SplitMix64) -> Result<Self> {
        let spec = TeacherSpec::new(cfg.bundle_layers);
        let mut params = ParamTable::new();
        params.insert(TeacherSpec::EMBEDDING, xavier_uniform(n_items, cfg.dim, rng)?)?;
        spec.bundle.init(&mut params, cfg.dim, rng)?;
        Ok(Self { spec, params })
    }

    pub fn n_items(&self) -> usize {
        self.params.get(TeacherSpec::EMBEDDING).map_or(0, Tensor::rows)
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// Frozen scorer over the teacher's logits.
    pub fn scorer(&self) -> Result<BundleScorer> {
        Ok(BundleScorer {
            items: self.params.get(TeacherSpec::EMBEDDING)?.clone(),
            w_k: self.params.get(&self.spec.bundle.key_name())?.clone(),
            w_q: self.params.get(&self.spec.bundle.query_name())?.clone(),
            layers: self.spec.bundle.layers,
        })
    }
}

pub struct TeacherOutput<'t, S: Scalar> {
    /// Bundle representations, one row per query.
    pub bundles: Var<'t, S>,
    pub logits: Var<'t, S>,
}

/// Teacher forward pass for a batch of queries. It reads nothing but its
/// own item table and attention stack.
pub fn teacher_batch<'t, S: Scalar>(
    tape: &'t Tape<S>,
    spec: &TeacherSpec,
    params: &ParamTable<S>,
    queries: &[&[usize]],
    trainable: bool,
) -> Result<TeacherOutput<'t, S>> {
    let v = if trainable {
        tape.param(params, TeacherSpec::EMBEDDING)?
    } else {
        tape.frozen(params, TeacherSpec::EMBEDDING)?
    };
    let stack = spec.bundle.bind(tape, params, trainable)?;
    let bundles = encode_queries(&stack, &v, queries)?;
    let logits = score_all(&bundles, &v)?;
    Ok(TeacherOutput { bundles, logits })
}

fn encode_queries<'t, S: Scalar>(
    stack: &BoundStack<'t, S>,
    items: &Var<'t, S>,
    queries: &[&[usize]],
) -> Result<Var<'t, S>> {
    if queries.is_empty() {
        return Err(Error::Empty("query batch"));
    }
    let rows = queries
        .iter()
        .map(|q| {
            if q.is_empty() {
                return Err(Error::Empty("partial bundle"));
            }
            stack.encode_bundle(items.gather_rows(q)?)
        })
        .collect::<Result<Vec<_>>>()?;
    concat_rows(&rows)
}

/// Teacher logits (1 x n) for one partial bundle.
pub fn pcd_forward(teacher: &TeacherState, query: &[usize]) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let out = teacher_batch(&tape, &teacher.spec, &teacher.params, &[query], false)?;
    Ok(out.logits.value())
}

/// Feature tables the student reads, in a common scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentInputs<S> {
    pub text: Tensor<S>,
    pub media: Tensor<S>,
    pub feedback: Tensor<S>,
}

impl StudentInputs<f32> {
    pub fn new(corpus: &ItemCorpus, feedback: &FeedbackTable) -> Result<Self> {
        let n = corpus.n_items();
        if feedback.n_items() != n {
            let missing = feedback.n_items().min(n);
            return Err(Error::MissingFeature(format!(
                "feedback table has {} rows for {n} items; item `{}` has no feedback vector",
                feedback.n_items(),
                corpus.ids.external(missing.min(n.saturating_sub(1)))
            )));
        }
        Ok(Self {
            text: corpus.text.clone(),
            media: corpus.media.clone(),
            feedback: feedback.table().clone(),
        })
    }
}

impl<S: Scalar> StudentInputs<S> {
    pub fn n_items(&self) -> usize {
        self.text.rows()
    }

    pub fn cast<T: Scalar>(&self) -> StudentInputs<T> {
        StudentInputs {
            text: self.text.cast(),
            media: self.media.cast(),
            feedback: self.feedback.cast(),
        }
    }
}

/// Parameter layout and fusion variant of the student.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudentSpec {
    pub item: AttentionStack,
    pub bundle: AttentionStack,
    /// Bundle stack of the content-only path.
    pub modal: AttentionStack,
    pub fusion: FusionVariant,
}

impl StudentSpec {
    pub const TEXT_MAP: &'static str = "student.f_t";
    pub const MEDIA_MAP: &'static str = "student.f_m";
    pub const CONTENT_PROJ: &'static str = "student.w_c";
    pub const FEEDBACK_PROJ: &'static str = "student.w_p";
    pub const EMBEDDING: &'static str = "student.v";

    pub fn new(item_layers: usize, bundle_layers: usize, fusion: FusionVariant) -> Self {
        Self {
            item: AttentionStack::new("student.item", item_layers),
            bundle: AttentionStack::new("student.bundle", bundle_layers),
            modal: AttentionStack::new("student.modal", bundle_layers),
            fusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentState {
    pub spec: StudentSpec,
    pub params: ParamTable<f32>,
}

impl StudentState {
    pub fn init(
        n_items: usize,
        d_t: usize,
        d_m: usize,
        d_p: usize,
        cfg: &TrainConfig,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let spec = StudentSpec::new(cfg.item_layers, cfg.bundle_layers, cfg.fusion);
        let d = cfg.dim;
        let mut params = ParamTable::new();
        params.insert(StudentSpec::TEXT_MAP, xavier_uniform(d_t, d, rng)?)?;
        params.insert(StudentSpec::MEDIA_MAP, xavier_uniform(d_m, d, rng)?)?;
        params.insert(StudentSpec::CONTENT_PROJ, xavier_uniform(d, d, rng)?)?;
        params.insert(StudentSpec::FEEDBACK_PROJ, xavier_uniform(d_p, d, rng)?)?;
        params.insert(StudentSpec::EMBEDDING, xavier_uniform(n_items, d, rng)?)?;
        spec.item.init(&mut params, d, rng)?;
        spec.bundle.init(&mut params, d, rng)?;
        spec.modal.init(&mut params, d, rng)?;
        Ok(Self { spec, params })
    }

    /// Frozen scorers for the fused (main) path and the content-only path.
    pub fn scorers(&self, inputs: &StudentInputs<f32>) -> Result<(BundleScorer, BundleScorer)> {
        let tape = Tape::new();
        let bound = bind_student(&tape, &self.spec, &self.params, false)?;
        let (items, content) = student_items(&bound, &self.spec, inputs)?;
        let stack = |s: &AttentionStack| -> Result<(Tensor<f32>, Tensor<f32>)> {
            Ok((
                self.params.get(&s.key_name())?.clone(),
                self.params.get(&s.query_name())?.clone(),
            ))
        };
        let (bk, bq) = stack(&self.spec.bundle)?;
        let (mk, mq) = stack(&self.spec.modal)?;
        Ok((
            BundleScorer {
                items: items.value(),
                w_k: bk,
                w_q: bq,
                layers: self.spec.bundle.layers,
            },
            BundleScorer {
                items: content.value(),
                w_k: mk,
                w_q: mq,
                layers: self.spec.modal.layers,
            },
        ))
    }
}

/// Student parameters placed on a tape.
pub struct BoundStudent<'t, S: Scalar> {
    pub text_map: Var<'t, S>,
    pub media_map: Var<'t, S>,
    pub content_proj: Var<'t, S>,
    pub feedback_proj: Var<'t, S>,
    pub embedding: Var<'t, S>,
    pub item: BoundStack<'t, S>,
    pub bundle: BoundStack<'t, S>,
    pub modal: BoundStack<'t, S>,
}

impl<'t, S: Scalar> BoundStudent<'t, S> {
    pub fn all(&self) -> Vec<Var<'t, S>> {
        vec![
            self.text_map,
            self.media_map,
            self.content_proj,
            self.feedback_proj,
            self.embedding,
            self.item.w_k,
            self.item.w_q,
            self.bundle.w_k,
            self.bundle.w_q,
            self.modal.w_k,
            self.modal.w_q,
        ]
    }
}

fn bind_student<'t, S: Scalar>(
    tape: &'t Tape<S>,
    spec: &StudentSpec,
    params: &ParamTable<S>,
    trainable: bool,
) -> Result<BoundStudent<'t, S>> {
    let load = |name: &str| {
        if trainable {
            tape.param(params, name)
        } else {
            tape.frozen(params, name)
        }
    };
    Ok(BoundStudent {
        text_map: load(StudentSpec::TEXT_MAP)?,
        media_map: load(StudentSpec::MEDIA_MAP)?,
        content_proj: load(StudentSpec::CONTENT_PROJ)?,
        feedback_proj: load(StudentSpec::FEEDBACK_PROJ)?,
        embedding: load(StudentSpec::EMBEDDING)?,
        item: spec.item.bind(tape, params, trainable)?,
        bundle: spec.bundle.bind(tape, params, trainable)?,
        modal: spec.modal.bind(tape, params, trainable)?,
    })
}

/// Fused item matrix `f` (n x d) and content matrix `c` (n x d), where
/// `c_i = (t_i f_T + m_i f_M) / 2` and `f_i` is the attention-pooled stack
/// of `[c_i W_c, p_i W_p, v_i]` minus any row the fusion variant drops.
fn student_items<'t, S: Scalar>(
    bound: &BoundStudent<'t, S>,
    spec: &StudentSpec,
    inputs: &StudentInputs<S>,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let tape = bound.embedding.tape();
    let n = bound.embedding.shape().0;
    for (name, t) in [("text", &inputs.text), ("media", &inputs.media), ("feedback", &inputs.feedback)] {
        if t.rows() != n {
            return Err(Error::MissingFeature(format!(
                "{name} features cover {} of {n} items",
                t.rows()
            )));
        }
    }
    let text = tape.constant(inputs.text.clone()).matmul(&bound.text_map)?;
    let media = tape.constant(inputs.media.clone()).matmul(&bound.media_map)?;
    let content = text.add(&media)?.scale(S::of(0.5));
    let mut slots = Vec::with_capacity(3);
    if spec.fusion.uses_content() {
        slots.push(content.matmul(&bound.content_proj)?);
    }
    if spec.fusion.uses_feedback() {
        slots.push(tape.constant(inputs.feedback.clone()).matmul(&bound.feedback_proj)?);
    }
    if spec.fusion.uses_embedding() {
        slots.push(bound.embedding);
    }
    let items = bound.item.encode_items(&slots)?;
    Ok((items, content))
}

pub struct StudentOutput<'t, S: Scalar> {
    pub bound: BoundStudent<'t, S>,
    pub main_bundles: Var<'t, S>,
    pub main_logits: Var<'t, S>,
    /// Present when the content path was requested.
    pub content_bundles: Option<Var<'t, S>>,
    pub content_logits: Option<Var<'t, S>>,
}

/// Student forward pass for a batch of queries. The content path reads only
/// the text and media tables, their maps and the modality stack.
pub fn student_batch<'t, S: Scalar>(
    tape: &'t Tape<S>,
    spec: &StudentSpec,
    params: &ParamTable<S>,
    inputs: &StudentInputs<S>,
    queries: &[&[usize]],
    content_path: bool,
    trainable: bool,
) -> Result<StudentOutput<'t, S>> {
    let bound = bind_student(tape, spec, params, trainable)?;
    let (items, content) = student_items(&bound, spec, inputs)?;
    let main_bundles = encode_queries(&bound.bundle, &items, queries)?;
    let main_logits = score_all(&main_bundles, &items)?;
    let (content_bundles, content_logits) = if content_path {
        let e = encode_queries(&bound.modal, &content, queries)?;
        let logits = score_all(&e, &content)?;
        (Some(e), Some(logits))
    } else {
        (None, None)
    };
    Ok(StudentOutput {
        bound,
        main_bundles,
        main_logits,
        content_bundles,
        content_logits,
    })
}

/// Main and content logits (each 1 x n) for one partial bundle.
pub fn ubt_forward(
    student: &StudentState,
    inputs: &StudentInputs<f32>,
    query: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let tape = Tape::new();
    let out = student_batch(&tape, &student.spec, &student.params, inputs, &[query], true, false)?;
    let content = out.content_logits.expect("content path requested");
    Ok((out.main_logits.value(), content.value()))
}

/// Frozen bundle encoder plus a fixed item matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleScorer {
    pub items: Tensor<f32>,
    pub w_k: Tensor<f32>,
    pub w_q: Tensor<f32>,
    pub layers: usize,
}

impl BundleScorer {
    pub fn bundle_representation(&self, query: &[usize]) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let stack = AttentionStack::new("s", self.layers);
        let mut p = ParamTable::new();
        p.insert(stack.key_name(), self.w_k.clone())?;
        p.insert(stack.query_name(), self.w_q.clone())?;
        let bound = stack.bind(&tape, &p, false)?;
        if query.iter().any(|&i| i >= self.items.rows()) {
            return Err(Error::Contract(format!("query {query:?} outside {} items", self.items.rows())));
        }
        let rows = tape.constant(self.items.select_rows(query));
        Ok(bound.encode_bundle(rows)?.value())
    }
}

impl Scorer for BundleScorer {
    fn n_items(&self) -> usize {
        self.items.rows()
    }

    fn score(&self, query: &[usize]) -> Result<Vec<f32>> {
        let e = self.bundle_representation(query)?;
        let (n, d) = self.items.shape();
        let mut out = vec![0f32; n];
        matmul_t_acc(e.data(), self.items.data(), &mut out, 1, d, n);
        Ok(out)
    }
}
