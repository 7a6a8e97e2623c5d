//! Hand-derived reverse-mode gradients, finite-difference verification, Adam
//! updates, and training-batch sampling.
//!
//! The model is a fixed DAG, so the backward pass mirrors the four forward
//! stages in reverse: loss terms → global-context injection → gated feedback
//! → global propagation → cascading propagation. The adjoint of user-side
//! propagation is item-side propagation on the cotangent (and vice versa);
//! the row-normalization backward applies the exact Jacobian
//! (I/‖x‖ − x·xᵀ/‖x‖³) with the ε-guard treated as constant below ε.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::graph::{build_global_graph, build_graph, propagate_items, propagate_users, BehaviorGraph};
use crate::mat::{
    accumulate_bias_grad, accumulate_weight_grad, affine_input_grad, dot, l2_norm,
    normalize_rows_backward, Mat,
};
use crate::model::{
    full_forward, init_params, leaky_relu_grad, CascadeInput, ForwardState, GateParams, GateTrace,
    ModelConfig, ModelParams,
};
use crate::objective::{bpr_grad_coeff, total_loss, LossConfig, TrainBatch};

/// Gradient of the total loss w.r.t. every parameter tensor. Embedding rows
/// that no loss path reaches stay exactly zero and are flagged untouched.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub values: ModelParams,
    pub user_touched: Vec<bool>,
    pub item_touched: Vec<bool>,
}

impl Gradients {
    fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            values: ModelParams::zeros(
                params.num_users(),
                params.num_items(),
                params.embedding_dim(),
                params.num_behaviors(),
            ),
            user_touched: vec![false; params.num_users()],
            item_touched: vec![false; params.num_items()],
        }
    }

    fn mark_touched(&mut self) {
        for (r, t) in self.user_touched.iter_mut().enumerate() {
            *t = self.values.user_emb.row(r).iter().any(|&v| v != 0.0);
        }
        for (r, t) in self.item_touched.iter_mut().enumerate() {
            *t = self.values.item_emb.row(r).iter().any(|&v| v != 0.0);
        }
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data().iter()) {
        *x *= y;
    }
    out
}

/// Backward through one gate evaluation; accumulates the weight/bias grads
/// and returns the cotangent of the gate input.
fn gate_backward(
    grads: &mut GateParams,
    params: &GateParams,
    trace: &GateTrace,
    input: &Mat,
    d_gate: &Mat,
) -> Mat {
    // σ'(pre2) = gate·(1−gate)
    let mut d_pre2 = d_gate.clone();
    for (v, g) in d_pre2.data_mut().iter_mut().zip(trace.gate.data().iter()) {
        *v *= g * (1.0 - g);
    }
    accumulate_weight_grad(&mut grads.w2, &d_pre2, &trace.hidden);
    accumulate_bias_grad(&mut grads.b2, &d_pre2);
    let mut d_pre1 = affine_input_grad(&d_pre2, &params.w2);
    for (v, p) in d_pre1.data_mut().iter_mut().zip(trace.pre1.data().iter()) {
        *v *= leaky_relu_grad(*p);
    }
    accumulate_weight_grad(&mut grads.w1, &d_pre1, input);
    accumulate_bias_grad(&mut grads.b1, &d_pre1);
    affine_input_grad(&d_pre1, &params.w1)
}

/// Backward of one side of the contrastive term; `scale` carries λ.
#[allow(clippy::too_many_arguments)]
fn cpa_backward(
    anchor_emb: &Mat,
    pool_emb: &Mat,
    anchors: &[u32],
    pool: &[u32],
    tau: f64,
    eps: f64,
    scale: f64,
    d_anchor: &mut Mat,
    d_pool: &mut Mat,
) {
    let d = anchor_emb.cols();
    for &a in anchors {
        let t = anchor_emb.row(a as usize);
        let nt_raw = l2_norm(t);
        let nt = nt_raw.max(eps);

        let mut scores = Vec::with_capacity(pool.len());
        let mut max = f64::NEG_INFINITY;
        for &v in pool {
            let g = pool_emb.row(v as usize);
            let ng = l2_norm(g).max(eps);
            let s = dot(t, g) / (nt * ng) / tau;
            max = max.max(s);
            scores.push(s);
        }
        let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();

        for (vi, &v) in pool.iter().enumerate() {
            let g = pool_emb.row(v as usize);
            let ng_raw = l2_norm(g);
            let ng = ng_raw.max(eps);
            let c = dot(t, g) / (nt * ng);
            let p = (scores[vi] - max).exp() / denom;
            let w = p - if v == a { 1.0 } else { 0.0 };
            if w == 0.0 {
                continue;
            }
            let coef = scale * w / tau;
            let da = d_anchor.row_mut(a as usize);
            for k in 0..d {
                let mut grad = g[k] / (nt * ng);
                if nt_raw >= eps {
                    grad -= c * t[k] / (nt * nt);
                }
                da[k] += coef * grad;
            }
            let dp = d_pool.row_mut(v as usize);
            for k in 0..d {
                let mut grad = t[k] / (nt * ng);
                if ng_raw >= eps {
                    grad -= c * g[k] / (ng * ng);
                }
                dp[k] += coef * grad;
            }
        }
    }
}

/// Exact gradient of `total_loss` w.r.t. every parameter tensor.
pub fn backward(
    state: &ForwardState,
    params: &ModelParams,
    graphs: &[BehaviorGraph],
    global_graph: &BehaviorGraph,
    batch: &TrainBatch,
    lc: &LossConfig,
) -> Result<Gradients> {
    let cfg = &state.cfg;
    let (m, n, d) = (
        params.num_users(),
        params.num_items(),
        params.embedding_dim(),
    );
    if state.final_user[0].rows() != m
        || state.final_item[0].rows() != n
        || state.final_user[0].cols() != d
        || cfg.num_behaviors() != params.num_behaviors()
    {
        return Err(Error::Config(
            "forward state does not match the parameter shapes".into(),
        ));
    }
    let k_total = cfg.num_behaviors();
    let target = cfg.target_index();
    let mut g = Gradients::zeros_like(params);

    // ---- loss layer -----------------------------------------------------
    let mut d_final_u: Vec<Mat> = (0..k_total).map(|_| Mat::zeros(m, d)).collect();
    let mut d_final_i: Vec<Mat> = (0..k_total).map(|_| Mat::zeros(n, d)).collect();

    for b in 0..k_total {
        let users = &state.final_user[b];
        let items = &state.final_item[b];
        for &(u, i, j) in &batch.triples[b] {
            let (u, i, j) = (u as usize, i as usize, j as usize);
            let eu = users.row(u);
            let ei = items.row(i);
            let ej = items.row(j);
            let coef = bpr_grad_coeff(dot(eu, ei) - dot(eu, ej));
            let du = d_final_u[b].row_mut(u);
            for k in 0..d {
                du[k] += coef * (ei[k] - ej[k]);
            }
            let di = d_final_i[b].row_mut(i);
            for k in 0..d {
                di[k] += coef * eu[k];
            }
            let dj = d_final_i[b].row_mut(j);
            for k in 0..d {
                dj[k] -= coef * eu[k];
            }
        }
    }

    let mut d_global_u = Mat::zeros(m, d);
    let mut d_global_i = Mat::zeros(n, d);
    if cfg.enable_cpa && lc.lambda != 0.0 {
        let full: Vec<u32>;
        let users: &[u32] = if lc.cpa_full_pool {
            full = (0..m as u32).collect();
            &full
        } else {
            &batch.cpa_users
        };
        cpa_backward(
            &state.final_user[target],
            state.global_user(),
            users,
            users,
            lc.tau,
            cfg.norm_epsilon,
            lc.lambda,
            &mut d_final_u[target],
            &mut d_global_u,
        );
        let full_items: Vec<u32>;
        let items: &[u32] = if lc.cpa_full_pool {
            full_items = (0..n as u32).collect();
            &full_items
        } else {
            &batch.cpa_items
        };
        cpa_backward(
            &state.final_item[target],
            state.global_item(),
            items,
            items,
            lc.tau,
            cfg.norm_epsilon,
            lc.lambda,
            &mut d_final_i[target],
            &mut d_global_i,
        );
    }

    if lc.beta != 0.0 {
        let count = batch.num_triples();
        if count > 0 {
            let scale = 2.0 * lc.beta / count as f64;
            for triples in &batch.triples {
                for &(u, i, j) in triples {
                    let (u, i, j) = (u as usize, i as usize, j as usize);
                    for k in 0..d {
                        g.values.user_emb.row_mut(u)[k] += scale * params.user_emb.row(u)[k];
                        g.values.item_emb.row_mut(i)[k] += scale * params.item_emb.row(i)[k];
                        g.values.item_emb.row_mut(j)[k] += scale * params.item_emb.row(j)[k];
                    }
                }
            }
        }
        for (ga, pa) in g.values.aux.iter_mut().zip(params.aux.iter()) {
            for (gs, ps) in [(&mut ga.user, &pa.user), (&mut ga.item, &pa.item)] {
                gs.feedback_gate.w1.add_scaled(2.0 * lc.beta, &ps.feedback_gate.w1);
                gs.feedback_gate.w2.add_scaled(2.0 * lc.beta, &ps.feedback_gate.w2);
                gs.context_transform.w.add_scaled(2.0 * lc.beta, &ps.context_transform.w);
                gs.context_gate.w1.add_scaled(2.0 * lc.beta, &ps.context_gate.w1);
                gs.context_gate.w2.add_scaled(2.0 * lc.beta, &ps.context_gate.w2);
            }
        }
    }

    // ---- global-context injection, reversed ------------------------------
    let mut d_post_u: Vec<Mat> = Vec::with_capacity(target);
    let mut d_post_i: Vec<Mat> = Vec::with_capacity(target);
    let mut d_shared_gate_u: Vec<Option<Mat>> = vec![None; target];
    let mut d_shared_gate_i: Vec<Option<Mat>> = vec![None; target];
    for k in 0..target {
        if let Some(ctx) = state.context.aux.get(k).and_then(|c| c.as_ref()) {
            let dz_u = &d_final_u[k];
            let dz_i = &d_final_i[k];
            let mut dpu = dz_u.clone();
            let mut dpi = dz_i.clone();

            let gate_value_u = ctx
                .gate_user
                .as_ref()
                .map(|t| &t.gate)
                .unwrap_or_else(|| &state.feedback.gates_user[k].as_ref().unwrap().gate);
            let gate_value_i = ctx
                .gate_item
                .as_ref()
                .map(|t| &t.gate)
                .unwrap_or_else(|| &state.feedback.gates_item[k].as_ref().unwrap().gate);

            let d_gate_u = hadamard(dz_u, &ctx.transformed_user);
            let d_gate_i = hadamard(dz_i, &ctx.transformed_item);
            let d_trans_u = hadamard(dz_u, gate_value_u);
            let d_trans_i = hadamard(dz_i, gate_value_i);

            let side_u = &params.aux[k].user;
            let side_i = &params.aux[k].item;
            let gs = &mut g.values.aux[k];
            accumulate_weight_grad(&mut gs.user.context_transform.w, &d_trans_u, state.global_user());
            accumulate_bias_grad(&mut gs.user.context_transform.b, &d_trans_u);
            d_global_u.add_assign(&affine_input_grad(&d_trans_u, &side_u.context_transform.w));
            accumulate_weight_grad(&mut gs.item.context_transform.w, &d_trans_i, state.global_item());
            accumulate_bias_grad(&mut gs.item.context_transform.b, &d_trans_i);
            d_global_i.add_assign(&affine_input_grad(&d_trans_i, &side_i.context_transform.w));

            match &ctx.gate_user {
                Some(trace) => {
                    let d_in = gate_backward(
                        &mut gs.user.context_gate,
                        &side_u.context_gate,
                        trace,
                        &state.feedback.post_user[k],
                        &d_gate_u,
                    );
                    dpu.add_assign(&d_in);
                }
                None => d_shared_gate_u[k] = Some(d_gate_u),
            }
            match &ctx.gate_item {
                Some(trace) => {
                    let d_in = gate_backward(
                        &mut gs.item.context_gate,
                        &side_i.context_gate,
                        trace,
                        &state.feedback.post_item[k],
                        &d_gate_i,
                    );
                    dpi.add_assign(&d_in);
                }
                None => d_shared_gate_i[k] = Some(d_gate_i),
            }
            d_post_u.push(dpu);
            d_post_i.push(dpi);
        } else {
            d_post_u.push(d_final_u[k].clone());
            d_post_i.push(d_final_i[k].clone());
        }
    }

    // ---- gated feedback, reversed ----------------------------------------
    let mut d_acc_u: Vec<Mat> = (0..k_total).map(|_| Mat::zeros(m, d)).collect();
    let mut d_acc_i: Vec<Mat> = (0..k_total).map(|_| Mat::zeros(n, d)).collect();
    d_acc_u[target].add_assign(&d_final_u[target]);
    d_acc_i[target].add_assign(&d_final_i[target]);

    for k in 0..target {
        let mut d_gate_u: Option<Mat> = None;
        let mut d_gate_i: Option<Mat> = None;
        if cfg.enable_cgf {
            let trace_u = state.feedback.gates_user[k].as_ref().unwrap();
            let trace_i = state.feedback.gates_item[k].as_ref().unwrap();
            // f = c + g ⊙ t
            d_acc_u[k].add_assign(&d_post_u[k]);
            d_acc_i[k].add_assign(&d_post_i[k]);
            d_gate_u = Some(hadamard(&d_post_u[k], &state.cascade.acc_user[target]));
            d_gate_i = Some(hadamard(&d_post_i[k], &state.cascade.acc_item[target]));
            d_acc_u[target].add_assign(&hadamard(&d_post_u[k], &trace_u.gate));
            d_acc_i[target].add_assign(&hadamard(&d_post_i[k], &trace_i.gate));
        } else {
            d_acc_u[k].add_assign(&d_post_u[k]);
            d_acc_i[k].add_assign(&d_post_i[k]);
        }
        if let Some(extra) = d_shared_gate_u[k].take() {
            match &mut d_gate_u {
                Some(dg) => dg.add_assign(&extra),
                None => d_gate_u = Some(extra),
            }
        }
        if let Some(extra) = d_shared_gate_i[k].take() {
            match &mut d_gate_i {
                Some(dg) => dg.add_assign(&extra),
                None => d_gate_i = Some(extra),
            }
        }
        if let Some(dg) = d_gate_u {
            let trace = state.feedback.gates_user[k].as_ref().unwrap();
            let d_in = gate_backward(
                &mut g.values.aux[k].user.feedback_gate,
                &params.aux[k].user.feedback_gate,
                trace,
                &state.cascade.acc_user[k],
                &dg,
            );
            d_acc_u[k].add_assign(&d_in);
        }
        if let Some(dg) = d_gate_i {
            let trace = state.feedback.gates_item[k].as_ref().unwrap();
            let d_in = gate_backward(
                &mut g.values.aux[k].item.feedback_gate,
                &params.aux[k].item.feedback_gate,
                trace,
                &state.cascade.acc_item[k],
                &dg,
            );
            d_acc_i[k].add_assign(&d_in);
        }
    }

    // ---- global propagation, reversed -------------------------------------
    {
        let mut du = d_global_u;
        let mut di = d_global_i;
        for _ in 0..cfg.global_layers {
            let du_prev = propagate_users(global_graph, &di);
            let di_prev = propagate_items(global_graph, &du);
            du = du_prev;
            di = di_prev;
        }
        g.values.user_emb.add_assign(&du);
        g.values.item_emb.add_assign(&di);
    }

    // ---- cascading propagation, reversed -----------------------------------
    for k in (0..k_total).rev() {
        let d_out_u = std::mem::replace(&mut d_acc_u[k], Mat::zeros(0, 0));
        let d_out_i = std::mem::replace(&mut d_acc_i[k], Mat::zeros(0, 0));

        // E^k = prev + norm(O^k): the residual passes d_out to prev unchanged
        if k > 0 {
            d_acc_u[k - 1].add_assign(&d_out_u);
            d_acc_i[k - 1].add_assign(&d_out_i);
        } else {
            g.values.user_emb.add_assign(&d_out_u);
            g.values.item_emb.add_assign(&d_out_i);
        }

        let trace = &state.cascade.layers[k];
        let mut du = normalize_rows_backward(
            trace.last_user(),
            &state.cascade.norms_user[k],
            &d_out_u,
            cfg.norm_epsilon,
        );
        let mut di = normalize_rows_backward(
            trace.last_item(),
            &state.cascade.norms_item[k],
            &d_out_i,
            cfg.norm_epsilon,
        );
        for _ in 0..cfg.layers_per_behavior[k] {
            let du_prev = propagate_users(&graphs[k], &di);
            let di_prev = propagate_items(&graphs[k], &du);
            du = du_prev;
            di = di_prev;
        }
        match cfg.cascading_input_mode {
            CascadeInput::Accumulated if k > 0 => {
                d_acc_u[k - 1].add_assign(&du);
                d_acc_i[k - 1].add_assign(&di);
            }
            _ => {
                g.values.user_emb.add_assign(&du);
                g.values.item_emb.add_assign(&di);
            }
        }
    }

    g.mark_touched();
    Ok(g)
}

// --- Adam ----------------------------------------------------------------

/// Bias-corrected Adam with lazy row updates for the embedding tables:
/// moments of untouched rows are left unchanged.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: params
                .tensors()
                .iter()
                .map(|t| (vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for v in [self.lr, self.beta1, self.beta2, self.eps] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.t.to_le_bytes());
        buf.extend_from_slice(&(self.moments.len() as u64).to_le_bytes());
        for (mo, ve) in &self.moments {
            buf.extend_from_slice(&(mo.len() as u64).to_le_bytes());
            for v in mo.iter().chain(ve.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint("truncated optimizer state".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_f64 =
            |pos: &mut usize| -> Result<f64> { Ok(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap())) };
        let read_u64 =
            |pos: &mut usize| -> Result<u64> { Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap())) };
        let lr = read_f64(&mut pos)?;
        let beta1 = read_f64(&mut pos)?;
        let beta2 = read_f64(&mut pos)?;
        let eps = read_f64(&mut pos)?;
        let t = read_u64(&mut pos)?;
        let count = read_u64(&mut pos)? as usize;
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u64(&mut pos)? as usize;
            let mut mo = vec![0.0; len];
            let mut ve = vec![0.0; len];
            for v in mo.iter_mut() {
                *v = read_f64(&mut pos)?;
            }
            for v in ve.iter_mut() {
                *v = read_f64(&mut pos)?;
            }
            moments.push((mo, ve));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing optimizer state bytes".into()));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t,
            moments,
        })
    }
}

/// One Adam update. Embedding rows without gradient keep their moments.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, st: &mut AdamState) {
    st.t += 1;
    let (lr, beta1, beta2, eps) = (st.lr, st.beta1, st.beta2, st.eps);
    let bc1 = 1.0 - beta1.powi(st.t as i32);
    let bc2 = 1.0 - beta2.powi(st.t as i32);
    let d = params.embedding_dim();

    let update_range = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };

    let grad_tensors = grads.values.tensors();
    let mut param_tensors = params.tensors_mut();
    for (idx, (p, gt)) in param_tensors.iter_mut().zip(grad_tensors.iter()).enumerate() {
        let (m, v) = &mut st.moments[idx];
        match idx {
            0 => {
                for (r, touched) in grads.user_touched.iter().enumerate() {
                    if *touched {
                        let range = r * d..(r + 1) * d;
                        update_range(
                            &mut p[range.clone()],
                            &gt[range.clone()],
                            &mut m[range.clone()],
                            &mut v[range],
                        );
                    }
                }
            }
            1 => {
                for (r, touched) in grads.item_touched.iter().enumerate() {
                    if *touched {
                        let range = r * d..(r + 1) * d;
                        update_range(
                            &mut p[range.clone()],
                            &gt[range.clone()],
                            &mut m[range.clone()],
                            &mut v[range],
                        );
                    }
                }
            }
            _ => update_range(p, gt, m, v),
        }
    }
}

// --- batch sampling --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Every behavior contributes batch_size triples per step; behaviors with
    /// fewer positives recycle them (sampling is with replacement).
    UniformPerBehavior,
    /// Triples per behavior proportional to its train-edge count.
    Proportional,
}

/// Train-edge lookup tables used by the sampler.
pub struct TrainIndex {
    pub num_items: usize,
    pub edges: Vec<Vec<(u32, u32)>>,
    user_pos: Vec<Vec<Vec<u32>>>,
}

impl TrainIndex {
    pub fn new(dataset: &Dataset) -> Self {
        let mut user_pos = Vec::with_capacity(dataset.behaviors.len());
        for edges in &dataset.train {
            let mut per_user = vec![Vec::new(); dataset.num_users];
            for &(u, i) in edges {
                per_user[u as usize].push(i);
            }
            per_user.iter_mut().for_each(|v| v.sort_unstable());
            user_pos.push(per_user);
        }
        TrainIndex {
            num_items: dataset.num_items,
            edges: dataset.train.clone(),
            user_pos,
        }
    }

    pub fn is_positive(&self, behavior: usize, user: u32, item: u32) -> bool {
        self.user_pos[behavior][user as usize].binary_search(&item).is_ok()
    }

    pub fn num_behaviors(&self) -> usize {
        self.edges.len()
    }
}

/// Sample positives uniformly with replacement per behavior and one rejected
/// uniform negative per positive. Users whose positives cover the whole item
/// set are skipped with a warning.
pub fn sample_batch(
    index: &TrainIndex,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    mode: SamplingMode,
) -> TrainBatch {
    assert!(batch_size > 0);
    let k = index.num_behaviors();
    let total_edges: usize = index.edges.iter().map(Vec::len).sum();
    let counts: Vec<usize> = match mode {
        SamplingMode::UniformPerBehavior => vec![batch_size; k],
        SamplingMode::Proportional => index
            .edges
            .iter()
            .map(|e| {
                let share = e.len() as f64 / total_edges.max(1) as f64;
                ((batch_size * k) as f64 * share).round().max(1.0) as usize
            })
            .collect(),
    };

    let mut warned = false;
    let mut triples: Vec<Vec<(u32, u32, u32)>> = Vec::with_capacity(k);
    for b in 0..k {
        let edges = &index.edges[b];
        let mut list = Vec::with_capacity(counts[b]);
        if edges.is_empty() {
            triples.push(list);
            continue;
        }
        while list.len() < counts[b] {
            let (u, i) = edges[rng.random_range(0..edges.len())];
            if index.user_pos[b][u as usize].len() >= index.num_items {
                if !warned {
                    eprintln!(
                        "warning: user {u} has interacted with every item under behavior {b}; skipping"
                    );
                    warned = true;
                }
                continue;
            }
            let j = loop {
                let j = rng.random_range(0..index.num_items as u32);
                if !index.is_positive(b, u, j) {
                    break j;
                }
            };
            list.push((u, i, j));
        }
        triples.push(list);
    }

    let tgt = k - 1;
    let cpa_users: Vec<u32> = triples[tgt]
        .iter()
        .map(|t| t.0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cpa_items: Vec<u32> = triples[tgt]
        .iter()
        .flat_map(|t| [t.1, t.2])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    TrainBatch {
        triples,
        cpa_users,
        cpa_items,
    }
}

// --- gradient verification ---------------------------------------------------

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub cascading_input_mode: CascadeInput,
    pub share_gce_gate: bool,
    pub enable_cgf: bool,
    pub enable_gce: bool,
    pub enable_cpa: bool,
    pub fd_step: f64,
    pub threshold: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            cascading_input_mode: CascadeInput::Accumulated,
            share_gce_gate: false,
            enable_cgf: true,
            enable_gce: true,
            enable_cpa: true,
            fd_step: 1e-4,
            threshold: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub tensor: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub threshold: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self
            .entries
            .iter()
            .map(|e| e.tensor.len())
            .max()
            .unwrap_or(6)
            .max(6);
        out.push_str(&format!("{:<width$}  max_rel_err  status\n", "tensor"));
        for e in &self.entries {
            let status = if e.max_rel_err < self.threshold { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{:<width$}  {:>11.3e}  {status}\n",
                e.tensor, e.max_rel_err
            ));
        }
        out.push_str(&format!(
            "result: {}\n",
            if self.passed { "pass" } else { "FAIL" }
        ));
        out
    }
}

/// The frozen tiny instance used for gradient verification: M=6, N=8, d=5,
/// K=3 behaviors with modest random graphs and a small sampled batch.
pub fn gradcheck_instance(
    opts: &GradcheckOptions,
) -> (
    ModelConfig,
    ModelParams,
    Vec<BehaviorGraph>,
    BehaviorGraph,
    TrainBatch,
) {
    let (m, n, d) = (6usize, 8usize, 5usize);
    let cfg = ModelConfig {
        embedding_dim: d,
        behaviors: vec!["b1".into(), "b2".into(), "b3".into()],
        layers_per_behavior: vec![1, 2, 2],
        global_layers: 2,
        cascading_input_mode: opts.cascading_input_mode,
        share_gce_gate: opts.share_gce_gate,
        enable_cgf: opts.enable_cgf,
        enable_gce: opts.enable_gce,
        enable_cpa: opts.enable_cpa,
        norm_epsilon: 1e-12,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5eed));
    let mut all_edges = Vec::new();
    let graphs: Vec<BehaviorGraph> = (0..3)
        .map(|b| {
            let count = 8 + rng.random_range(0..6);
            let mut edges = BTreeSet::new();
            while edges.len() < count {
                edges.insert((rng.random_range(0..m as u32), rng.random_range(0..n as u32)));
            }
            let edges: Vec<(u32, u32)> = edges.into_iter().collect();
            all_edges.push(edges.clone());
            build_graph(&format!("b{}", b + 1), &edges, m, n).unwrap()
        })
        .collect();
    let global = build_global_graph(&all_edges, m, n).unwrap();
    let mut params = init_params(&cfg, m, n, opts.seed);
    // scale up the embeddings so no propagated row has a near-zero norm;
    // cosine terms on tiny vectors have third derivatives large enough to
    // dominate the h² truncation of the finite-difference oracle
    for t in [&mut params.user_emb, &mut params.item_emb] {
        t.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    }

    // batch: 4 triples per behavior drawn from the edge lists
    let mut triples = Vec::new();
    for edges in &all_edges {
        let mut list = Vec::new();
        for _ in 0..4 {
            let (u, i) = edges[rng.random_range(0..edges.len())];
            let j = loop {
                let j = rng.random_range(0..n as u32);
                if !edges.contains(&(u, j)) {
                    break j;
                }
            };
            list.push((u, i, j));
        }
        triples.push(list);
    }
    let cpa_users: Vec<u32> = triples[2].iter().map(|t| t.0).collect::<BTreeSet<_>>().into_iter().collect();
    let cpa_items: Vec<u32> = triples[2]
        .iter()
        .flat_map(|t| [t.1, t.2])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let batch = TrainBatch {
        triples,
        cpa_users,
        cpa_items,
    };
    (cfg, params, graphs, global, batch)
}

/// Compare the analytic gradient against central finite differences on the
/// tiny instance; gate pre-activations within 1e-6 of the LeakyReLU kink are
/// nudged away before checking.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (cfg, mut params, graphs, global, batch) = gradcheck_instance(opts);
    let lc = LossConfig {
        lambda: 0.7,
        beta: 0.4,
        tau: 0.3,
        cpa_full_pool: false,
    };

    // nudge away from the LeakyReLU kink so central differences are two-sided
    for _ in 0..8 {
        let state = full_forward(&params, &graphs, &global, &cfg)?;
        let mut min_abs = f64::INFINITY;
        for gate in state
            .feedback
            .gates_user
            .iter()
            .chain(state.feedback.gates_item.iter())
            .flatten()
        {
            for &v in gate.pre1.data() {
                min_abs = min_abs.min(v.abs());
            }
        }
        for ctx in state.context.aux.iter().flatten() {
            for gate in [&ctx.gate_user, &ctx.gate_item].into_iter().flatten() {
                for &v in gate.pre1.data() {
                    min_abs = min_abs.min(v.abs());
                }
            }
        }
        if min_abs >= 1e-6 {
            break;
        }
        for a in &mut params.aux {
            for side in [&mut a.user, &mut a.item] {
                for b in side.feedback_gate.b1.iter_mut() {
                    *b += 1e-3;
                }
                for b in side.context_gate.b1.iter_mut() {
                    *b += 1e-3;
                }
            }
        }
    }

    let state = full_forward(&params, &graphs, &global, &cfg)?;
    let analytic = backward(&state, &params, &graphs, &global, &batch, &lc)?;

    let names = params.tensor_names();
    let analytic_tensors: Vec<Vec<f64>> =
        analytic.values.tensors().iter().map(|t| t.to_vec()).collect();
    let h = opts.fd_step;
    let mut entries = Vec::with_capacity(names.len());
    let num_tensors = names.len();
    for idx in 0..num_tensors {
        let len = analytic_tensors[idx].len();
        let mut max_rel: f64 = 0.0;
        for coord in 0..len {
            let orig = params.tensors()[idx][coord];
            params.tensors_mut()[idx][coord] = orig + h;
            let lp = total_loss(
                &full_forward(&params, &graphs, &global, &cfg)?,
                &params,
                &batch,
                &lc,
            )?
            .total;
            params.tensors_mut()[idx][coord] = orig - h;
            let lm = total_loss(
                &full_forward(&params, &graphs, &global, &cfg)?,
                &params,
                &batch,
                &lc,
            )?
            .total;
            params.tensors_mut()[idx][coord] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic_tensors[idx][coord];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradcheckEntry {
            tensor: names[idx].clone(),
            max_rel_err: max_rel,
        });
    }
    let passed = entries.iter().all(|e| e.max_rel_err < opts.threshold);
    Ok(GradcheckReport {
        entries,
        threshold: opts.threshold,
        passed,
    })
}
