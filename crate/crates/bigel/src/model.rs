//! Trainable parameters and the BiGEL forward pass.
//!
//! The forward pass runs in four stages, each of which records every
//! intermediate needed by the hand-derived backward pass in `optim`:
//!
//! 1. cascading per-behavior propagation with row-normalized residuals,
//! 2. gated feedback from the target behavior into each auxiliary behavior,
//! 3. propagation over the all-behavior union graph,
//! 4. gated injection of a transformed global embedding into each auxiliary
//!    behavior.
//!
//! The target behavior's embedding is never touched by stages 2 and 4.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{propagate_items, propagate_users, BehaviorGraph};
use crate::mat::{apply_affine, dot, normalize_rows, Mat};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadeInput {
    /// Each behavior propagates from the previous behavior's accumulated
    /// embedding (true cascading; the default).
    Accumulated,
    /// Each behavior propagates from the initial embeddings; residuals still
    /// accumulate across behaviors.
    Base,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    /// Ordered behavior chain; the last entry is the target behavior.
    pub behaviors: Vec<String>,
    pub layers_per_behavior: Vec<usize>,
    pub global_layers: usize,
    pub cascading_input_mode: CascadeInput,
    pub share_gce_gate: bool,
    pub enable_cgf: bool,
    pub enable_gce: bool,
    pub enable_cpa: bool,
    pub norm_epsilon: f64,
}

impl ModelConfig {
    /// Progressive layer heuristic: the behavior at position p (1-based) of
    /// the chain gets p propagation layers.
    pub fn heuristic_layers(num_behaviors: usize) -> Vec<usize> {
        (1..=num_behaviors).collect()
    }

    pub fn num_behaviors(&self) -> usize {
        self.behaviors.len()
    }

    pub fn target_index(&self) -> usize {
        self.behaviors.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.behaviors.is_empty() {
            return Err(Error::Config("behavior chain is empty".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.layers_per_behavior.len() != self.behaviors.len() {
            return Err(Error::Config(format!(
                "layers_per_behavior has {} entries for {} behaviors",
                self.layers_per_behavior.len(),
                self.behaviors.len()
            )));
        }
        if self.layers_per_behavior.contains(&0) {
            return Err(Error::Config("behavior layer counts must be >= 1".into()));
        }
        if self.global_layers == 0 {
            return Err(Error::Config("global_layers must be >= 1".into()));
        }
        if self.norm_epsilon <= 0.0 || self.norm_epsilon.is_nan() {
            return Err(Error::Config("norm_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer gate network: g = σ(W2·LeakyReLU(W1·x + b1) + b2).
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl GateParams {
    fn zeros(d: usize) -> Self {
        GateParams {
            w1: Mat::zeros(d, d),
            b1: vec![0.0; d],
            w2: Mat::zeros(d, d),
            b2: vec![0.0; d],
        }
    }
}

/// Linear transform y = W·x + b applied to the global embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl TransformParams {
    fn zeros(d: usize) -> Self {
        TransformParams {
            w: Mat::zeros(d, d),
            b: vec![0.0; d],
        }
    }
}

/// Per-side (user or item) parameters of one auxiliary behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxSideParams {
    pub feedback_gate: GateParams,
    pub context_transform: TransformParams,
    pub context_gate: GateParams,
}

impl AuxSideParams {
    fn zeros(d: usize) -> Self {
        AuxSideParams {
            feedback_gate: GateParams::zeros(d),
            context_transform: TransformParams::zeros(d),
            context_gate: GateParams::zeros(d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxParams {
    pub user: AuxSideParams,
    pub item: AuxSideParams,
}

/// All trainable parameters: embedding tables plus per-auxiliary-behavior,
/// per-side gate and transform weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub user_emb: Mat,
    pub item_emb: Mat,
    pub aux: Vec<AuxParams>,
}

impl ModelParams {
    pub fn zeros(num_users: usize, num_items: usize, d: usize, num_behaviors: usize) -> Self {
        ModelParams {
            user_emb: Mat::zeros(num_users, d),
            item_emb: Mat::zeros(num_items, d),
            aux: (0..num_behaviors.saturating_sub(1))
                .map(|_| AuxParams {
                    user: AuxSideParams::zeros(d),
                    item: AuxSideParams::zeros(d),
                })
                .collect(),
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn num_behaviors(&self) -> usize {
        self.aux.len() + 1
    }

    /// Fixed tensor enumeration shared by the optimizer, the checkpoint
    /// format, and the gradient checker.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["user_emb".to_string(), "item_emb".to_string()];
        for k in 0..self.aux.len() {
            for side in ["user", "item"] {
                for t in [
                    "feedback_gate.w1",
                    "feedback_gate.b1",
                    "feedback_gate.w2",
                    "feedback_gate.b2",
                    "context_transform.w",
                    "context_transform.b",
                    "context_gate.w1",
                    "context_gate.b1",
                    "context_gate.w2",
                    "context_gate.b2",
                ] {
                    names.push(format!("aux{k}.{side}.{t}"));
                }
            }
        }
        names
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.user_emb.data(), self.item_emb.data()];
        for a in &self.aux {
            for side in [&a.user, &a.item] {
                out.push(side.feedback_gate.w1.data());
                out.push(&side.feedback_gate.b1);
                out.push(side.feedback_gate.w2.data());
                out.push(&side.feedback_gate.b2);
                out.push(side.context_transform.w.data());
                out.push(&side.context_transform.b);
                out.push(side.context_gate.w1.data());
                out.push(&side.context_gate.b1);
                out.push(side.context_gate.w2.data());
                out.push(&side.context_gate.b2);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.user_emb.data_mut());
        out.push(self.item_emb.data_mut());
        for a in &mut self.aux {
            for side in [&mut a.user, &mut a.item] {
                out.push(side.feedback_gate.w1.data_mut());
                out.push(&mut side.feedback_gate.b1);
                out.push(side.feedback_gate.w2.data_mut());
                out.push(&mut side.feedback_gate.b2);
                out.push(side.context_transform.w.data_mut());
                out.push(&mut side.context_transform.b);
                out.push(side.context_gate.w1.data_mut());
                out.push(&mut side.context_gate.b1);
                out.push(side.context_gate.w2.data_mut());
                out.push(&mut side.context_gate.b2);
            }
        }
        out
    }

    /// Tensor shapes in enumeration order (rows, cols); vectors are (len, 1).
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let d = self.embedding_dim();
        let mut out = vec![
            (self.num_users(), d),
            (self.num_items(), d),
        ];
        for _ in 0..self.aux.len() {
            for _ in 0..2 {
                out.extend_from_slice(&[
                    (d, d),
                    (d, 1),
                    (d, d),
                    (d, 1),
                    (d, d),
                    (d, 1),
                    (d, d),
                    (d, 1),
                    (d, d),
                    (d, 1),
                ]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Initialize parameters: embeddings from N(0, 0.1/√d), gate and transform
/// weights from U(−1/√d, 1/√d), biases zero. Deterministic for a given seed.
pub fn init_params(
    cfg: &ModelConfig,
    num_users: usize,
    num_items: usize,
    seed: u64,
) -> ModelParams {
    let d = cfg.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb_scale = 0.1 / (d as f64).sqrt();
    let normal = Normal::new(0.0, emb_scale).unwrap();
    let bound = 1.0 / (d as f64).sqrt();
    let uniform = Uniform::new_inclusive(-bound, bound).unwrap();

    let mut params = ModelParams::zeros(num_users, num_items, d, cfg.num_behaviors());
    for v in params.user_emb.data_mut() {
        *v = normal.sample(&mut rng);
    }
    for v in params.item_emb.data_mut() {
        *v = normal.sample(&mut rng);
    }
    for a in &mut params.aux {
        for side in [&mut a.user, &mut a.item] {
            for w in [
                &mut side.feedback_gate.w1,
                &mut side.feedback_gate.w2,
                &mut side.context_transform.w,
                &mut side.context_gate.w1,
                &mut side.context_gate.w2,
            ] {
                for v in w.data_mut() {
                    *v = uniform.sample(&mut rng);
                }
            }
        }
    }
    params
}

/// Layer-by-layer propagation outputs; index 0 is the layer input.
#[derive(Clone, Debug)]
pub struct PropagationTrace {
    pub user: Vec<Mat>,
    pub item: Vec<Mat>,
}

impl PropagationTrace {
    pub fn last_user(&self) -> &Mat {
        self.user.last().unwrap()
    }

    pub fn last_item(&self) -> &Mat {
        self.item.last().unwrap()
    }
}

/// Intermediates of one gate evaluation g = σ(W2·LeakyReLU(W1·x + b1) + b2).
#[derive(Clone, Debug)]
pub struct GateTrace {
    pub pre1: Mat,
    pub hidden: Mat,
    pub gate: Mat,
}

pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_RELU_SLOPE * x
    }
}

pub fn leaky_relu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_RELU_SLOPE
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn eval_gate(gp: &GateParams, x: &Mat) -> GateTrace {
    let pre1 = apply_affine(x, &gp.w1, &gp.b1);
    let mut hidden = pre1.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = leaky_relu(*v));
    let mut gate = apply_affine(&hidden, &gp.w2, &gp.b2);
    gate.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    GateTrace { pre1, hidden, gate }
}

/// Stage-1 output: per-behavior propagation traces, the row-normalized last
/// layers, and the accumulated embeddings E^(b_k).
#[derive(Clone, Debug)]
pub struct CascadeState {
    pub layers: Vec<PropagationTrace>,
    pub normed_user: Vec<Mat>,
    pub normed_item: Vec<Mat>,
    pub norms_user: Vec<Vec<f64>>,
    pub norms_item: Vec<Vec<f64>>,
    pub acc_user: Vec<Mat>,
    pub acc_item: Vec<Mat>,
}

/// Run the cascading propagation over the behavior chain.
pub fn cascade_forward(
    params: &ModelParams,
    graphs: &[BehaviorGraph],
    cfg: &ModelConfig,
) -> Result<CascadeState> {
    let k_total = cfg.num_behaviors();
    assert_eq!(graphs.len(), k_total, "one graph per behavior");
    let mut st = CascadeState {
        layers: Vec::with_capacity(k_total),
        normed_user: Vec::new(),
        normed_item: Vec::new(),
        norms_user: Vec::new(),
        norms_item: Vec::new(),
        acc_user: Vec::new(),
        acc_item: Vec::new(),
    };
    let mut prev_u = params.user_emb.clone();
    let mut prev_i = params.item_emb.clone();
    for k in 0..k_total {
        let (in_u, in_i) = match cfg.cascading_input_mode {
            CascadeInput::Accumulated => (prev_u.clone(), prev_i.clone()),
            CascadeInput::Base => (params.user_emb.clone(), params.item_emb.clone()),
        };
        let mut trace = PropagationTrace {
            user: vec![in_u],
            item: vec![in_i],
        };
        for l in 1..=cfg.layers_per_behavior[k] {
            let nu = propagate_users(&graphs[k], &trace.item[l - 1]);
            let ni = propagate_items(&graphs[k], &trace.user[l - 1]);
            if !nu.is_finite() || !ni.is_finite() {
                return Err(Error::NonFinite(format!(
                    "behavior '{}' propagation layer {l}",
                    cfg.behaviors[k]
                )));
            }
            trace.user.push(nu);
            trace.item.push(ni);
        }
        let (normed_u, norms_u) = normalize_rows(trace.last_user(), cfg.norm_epsilon);
        let (normed_i, norms_i) = normalize_rows(trace.last_item(), cfg.norm_epsilon);
        let acc_u = prev_u.add(&normed_u);
        let acc_i = prev_i.add(&normed_i);
        prev_u = acc_u.clone();
        prev_i = acc_i.clone();
        st.layers.push(trace);
        st.normed_user.push(normed_u);
        st.normed_item.push(normed_i);
        st.norms_user.push(norms_u);
        st.norms_item.push(norms_i);
        st.acc_user.push(acc_u);
        st.acc_item.push(acc_i);
    }
    Ok(st)
}

/// Stage-2 output: per-auxiliary gate traces (when the gate is evaluated) and
/// the feedback-refined embeddings.
#[derive(Clone, Debug)]
pub struct FeedbackState {
    pub gates_user: Vec<Option<GateTrace>>,
    pub gates_item: Vec<Option<GateTrace>>,
    pub post_user: Vec<Mat>,
    pub post_item: Vec<Mat>,
}

/// Gated feedback from the target behavior into each auxiliary behavior:
/// e^(b_k) ← e^(b_k) + g ⊙ e^(b_K). Identity when disabled. The gate is also
/// evaluated (without applying feedback) when a later stage shares it.
pub fn apply_gated_feedback(
    params: &ModelParams,
    cascade: &CascadeState,
    cfg: &ModelConfig,
) -> FeedbackState {
    let target = cfg.target_index();
    let need_gate = cfg.enable_cgf || (cfg.enable_gce && cfg.share_gce_gate);
    let mut st = FeedbackState {
        gates_user: Vec::with_capacity(target),
        gates_item: Vec::with_capacity(target),
        post_user: Vec::with_capacity(target),
        post_item: Vec::with_capacity(target),
    };
    for k in 0..target {
        let gate_u = need_gate.then(|| eval_gate(&params.aux[k].user.feedback_gate, &cascade.acc_user[k]));
        let gate_i = need_gate.then(|| eval_gate(&params.aux[k].item.feedback_gate, &cascade.acc_item[k]));
        let mut post_u = cascade.acc_user[k].clone();
        let mut post_i = cascade.acc_item[k].clone();
        if cfg.enable_cgf {
            let (gu, gi) = (gate_u.as_ref().unwrap(), gate_i.as_ref().unwrap());
            for (out, (g, t)) in post_u
                .data_mut()
                .iter_mut()
                .zip(gu.gate.data().iter().zip(cascade.acc_user[target].data().iter()))
            {
                *out += g * t;
            }
            for (out, (g, t)) in post_i
                .data_mut()
                .iter_mut()
                .zip(gi.gate.data().iter().zip(cascade.acc_item[target].data().iter()))
            {
                *out += g * t;
            }
        }
        st.gates_user.push(gate_u);
        st.gates_item.push(gate_i);
        st.post_user.push(post_u);
        st.post_item.push(post_i);
    }
    st
}

/// Propagate over the all-behavior union graph; the global embedding is the
/// last layer's output (no residual, no normalization).
pub fn global_forward(
    params: &ModelParams,
    global_graph: &BehaviorGraph,
    cfg: &ModelConfig,
) -> Result<PropagationTrace> {
    let mut trace = PropagationTrace {
        user: vec![params.user_emb.clone()],
        item: vec![params.item_emb.clone()],
    };
    for l in 1..=cfg.global_layers {
        let nu = propagate_users(global_graph, &trace.item[l - 1]);
        let ni = propagate_items(global_graph, &trace.user[l - 1]);
        if !nu.is_finite() || !ni.is_finite() {
            return Err(Error::NonFinite(format!("global propagation layer {l}")));
        }
        trace.user.push(nu);
        trace.item.push(ni);
    }
    Ok(trace)
}

/// Stage-4 output per auxiliary behavior.
#[derive(Clone, Debug)]
pub struct ContextAux {
    /// ê = W·e^(g) + b, the behavior-specific view of the global embedding.
    pub transformed_user: Mat,
    pub transformed_item: Mat,
    /// Fresh gate evaluation; `None` when the feedback gate value is shared.
    pub gate_user: Option<GateTrace>,
    pub gate_item: Option<GateTrace>,
}

#[derive(Clone, Debug)]
pub struct ContextState {
    /// One entry per auxiliary behavior; `None` when the stage is disabled.
    pub aux: Vec<Option<ContextAux>>,
    pub post_user: Vec<Mat>,
    pub post_item: Vec<Mat>,
}

/// Gated injection of the transformed global embedding into each auxiliary
/// behavior: e^(b_k) ← e^(b_k) + g' ⊙ (W·e^(g) + b). Identity when disabled.
pub fn apply_global_context(
    params: &ModelParams,
    feedback: &FeedbackState,
    global: &PropagationTrace,
    cfg: &ModelConfig,
) -> ContextState {
    let target = cfg.target_index();
    let mut st = ContextState {
        aux: Vec::with_capacity(target),
        post_user: Vec::with_capacity(target),
        post_item: Vec::with_capacity(target),
    };
    for k in 0..target {
        if !cfg.enable_gce {
            st.aux.push(None);
            st.post_user.push(feedback.post_user[k].clone());
            st.post_item.push(feedback.post_item[k].clone());
            continue;
        }
        let side_u = &params.aux[k].user;
        let side_i = &params.aux[k].item;
        let transformed_user = apply_affine(global.last_user(), &side_u.context_transform.w, &side_u.context_transform.b);
        let transformed_item = apply_affine(global.last_item(), &side_i.context_transform.w, &side_i.context_transform.b);
        let (gate_user, gate_item) = if cfg.share_gce_gate {
            (None, None)
        } else {
            (
                Some(eval_gate(&side_u.context_gate, &feedback.post_user[k])),
                Some(eval_gate(&side_i.context_gate, &feedback.post_item[k])),
            )
        };
        let gate_value_u = gate_user
            .as_ref()
            .map(|g| &g.gate)
            .unwrap_or_else(|| &feedback.gates_user[k].as_ref().unwrap().gate);
        let gate_value_i = gate_item
            .as_ref()
            .map(|g| &g.gate)
            .unwrap_or_else(|| &feedback.gates_item[k].as_ref().unwrap().gate);

        let mut post_u = feedback.post_user[k].clone();
        for (out, (g, e)) in post_u
            .data_mut()
            .iter_mut()
            .zip(gate_value_u.data().iter().zip(transformed_user.data().iter()))
        {
            *out += g * e;
        }
        let mut post_i = feedback.post_item[k].clone();
        for (out, (g, e)) in post_i
            .data_mut()
            .iter_mut()
            .zip(gate_value_i.data().iter().zip(transformed_item.data().iter()))
        {
            *out += g * e;
        }
        st.aux.push(Some(ContextAux {
            transformed_user,
            transformed_item,
            gate_user,
            gate_item,
        }));
        st.post_user.push(post_u);
        st.post_item.push(post_i);
    }
    st
}

/// Everything one forward pass produces, retained for scoring, losses, and
/// the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub cfg: ModelConfig,
    pub cascade: CascadeState,
    pub feedback: FeedbackState,
    pub global: PropagationTrace,
    pub context: ContextState,
    /// Final per-behavior embeddings; the target entry equals the cascade
    /// accumulation, auxiliaries carry all enabled refinements.
    pub final_user: Vec<Mat>,
    pub final_item: Vec<Mat>,
}

impl ForwardState {
    pub fn global_user(&self) -> &Mat {
        self.global.last_user()
    }

    pub fn global_item(&self) -> &Mat {
        self.global.last_item()
    }

    /// Relevance score ⟨e_u^(b_k), e_i^(b_k)⟩.
    pub fn score(&self, behavior: usize, user: usize, item: usize) -> f64 {
        dot(self.final_user[behavior].row(user), self.final_item[behavior].row(item))
    }
}

/// Compose all four stages.
pub fn full_forward(
    params: &ModelParams,
    graphs: &[BehaviorGraph],
    global_graph: &BehaviorGraph,
    cfg: &ModelConfig,
) -> Result<ForwardState> {
    cfg.validate()?;
    let cascade = cascade_forward(params, graphs, cfg)?;
    let feedback = apply_gated_feedback(params, &cascade, cfg);
    let global = global_forward(params, global_graph, cfg)?;
    let context = apply_global_context(params, &feedback, &global, cfg);

    let target = cfg.target_index();
    let mut final_user = Vec::with_capacity(cfg.num_behaviors());
    let mut final_item = Vec::with_capacity(cfg.num_behaviors());
    for k in 0..target {
        final_user.push(context.post_user[k].clone());
        final_item.push(context.post_item[k].clone());
    }
    final_user.push(cascade.acc_user[target].clone());
    final_item.push(cascade.acc_item[target].clone());

    Ok(ForwardState {
        cfg: cfg.clone(),
        cascade,
        feedback,
        global,
        context,
        final_user,
        final_item,
    })
}

// --- checkpoint format -------------------------------------------------
//
// Little-endian binary: magic "BGEL", version u32, M, N, d, K u32, the
// behavior-name table, then each tensor in enumeration order as a shape
// header (rank u32, dims u32...) followed by row-major f32 values.

const CHECKPOINT_MAGIC: &[u8; 4] = b"BGEL";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, behaviors: &[String], path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let push_u32 = |buf: &mut Vec<u8>, v: u32| buf.extend_from_slice(&v.to_le_bytes());
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, params.num_users() as u32);
    push_u32(&mut buf, params.num_items() as u32);
    push_u32(&mut buf, params.embedding_dim() as u32);
    push_u32(&mut buf, behaviors.len() as u32);
    for name in behaviors {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
    }
    for (tensor, (rows, cols)) in params.tensors().iter().zip(params.tensor_shapes()) {
        if cols == 1 {
            push_u32(&mut buf, 1);
            push_u32(&mut buf, rows as u32);
        } else {
            push_u32(&mut buf, 2);
            push_u32(&mut buf, rows as u32);
            push_u32(&mut buf, cols as u32);
        }
        for &v in tensor.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub struct Checkpoint {
    pub behaviors: Vec<String>,
    pub params: ModelParams,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let m = read_u32(&mut pos)? as usize;
    let n = read_u32(&mut pos)? as usize;
    let d = read_u32(&mut pos)? as usize;
    let k = read_u32(&mut pos)? as usize;
    let mut behaviors = Vec::with_capacity(k);
    for _ in 0..k {
        let len = read_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, len)?)
            .map_err(|_| Error::Checkpoint("bad behavior name".into()))?;
        behaviors.push(name.to_string());
    }

    let mut params = ModelParams::zeros(m, n, d, k);
    let shapes = params.tensor_shapes();
    for (tensor, (rows, cols)) in params.tensors_mut().into_iter().zip(shapes) {
        let rank = read_u32(&mut pos)? as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| read_u32(&mut pos).map(|v| v as usize))
            .collect::<Result<_>>()?;
        let expected: usize = rows * cols;
        let got: usize = dims.iter().product();
        if got != expected {
            return Err(Error::Checkpoint(format!(
                "tensor shape {dims:?} does not match expected {rows}x{cols}"
            )));
        }
        for v in tensor.iter_mut() {
            let raw = take(&mut pos, 4)?;
            *v = f32::from_le_bytes(raw.try_into().unwrap()) as f64;
        }
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { behaviors, params })
}
