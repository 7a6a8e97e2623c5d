//! Joint training loss: per-behavior BPR, user+item contrastive preference
//! alignment between target-behavior and global-graph embeddings, and L2
//! regularization.

use crate::error::{Error, Result};
use crate::mat::{dot, l2_norm, Mat};
use crate::model::{sigmoid, ForwardState, ModelParams};

/// One training step's sampled data.
#[derive(Clone, Debug, Default)]
pub struct TrainBatch {
    /// Per behavior: (user, positive item, negative item) triples.
    pub triples: Vec<Vec<(u32, u32, u32)>>,
    /// Distinct users appearing in the target behavior's triples, sorted.
    pub cpa_users: Vec<u32>,
    /// Distinct items (positives and negatives) of the target triples, sorted.
    pub cpa_items: Vec<u32>,
}

impl TrainBatch {
    pub fn num_triples(&self) -> usize {
        self.triples.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// Weight of the contrastive alignment term.
    pub lambda: f64,
    /// Weight of the regularization term.
    pub beta: f64,
    /// Softmax temperature of the contrastive term.
    pub tau: f64,
    /// Use all users/items as contrastive anchors and negative pool rather
    /// than the batch's participants.
    pub cpa_full_pool: bool,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub bpr: Vec<f64>,
    pub cl_user: f64,
    pub cl_item: f64,
    pub reg: f64,
    pub total: f64,
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dΔ of the per-triple BPR loss −ln σ(Δ), i.e. σ(Δ) − 1.
pub fn bpr_grad_coeff(delta: f64) -> f64 {
    sigmoid(delta) - 1.0
}

/// −Σ ln σ(y_ui − y_uj) over a triple list scored with the given embeddings.
pub fn bpr_loss_on(users: &Mat, items: &Mat, triples: &[(u32, u32, u32)]) -> f64 {
    let mut total = 0.0;
    for &(u, i, j) in triples {
        let eu = users.row(u as usize);
        let delta = dot(eu, items.row(i as usize)) - dot(eu, items.row(j as usize));
        total += softplus(-delta);
    }
    total
}

/// −Σ ln σ(y_ui − y_uj) over one behavior's triples.
pub fn bpr_loss(state: &ForwardState, batch: &TrainBatch, behavior: usize) -> f64 {
    bpr_loss_on(
        &state.final_user[behavior],
        &state.final_item[behavior],
        &batch.triples[behavior],
    )
}

/// Cosine similarity with epsilon-guarded norms.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    dot(a, b) / (l2_norm(a).max(eps) * l2_norm(b).max(eps))
}

/// One side of the contrastive alignment loss. For each anchor `a` the
/// positive is pool_emb row `a`; negatives are the pool rows. Computed with a
/// max-subtracted log-sum-exp.
pub fn info_nce(
    anchor_emb: &Mat,
    pool_emb: &Mat,
    anchors: &[u32],
    pool: &[u32],
    tau: f64,
    eps: f64,
) -> f64 {
    let mut total = 0.0;
    for &a in anchors {
        let anchor = anchor_emb.row(a as usize);
        let mut scores = Vec::with_capacity(pool.len());
        let mut max = f64::NEG_INFINITY;
        for &v in pool {
            let s = cosine(anchor, pool_emb.row(v as usize), eps) / tau;
            max = max.max(s);
            scores.push(s);
        }
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let pos = cosine(anchor, pool_emb.row(a as usize), eps) / tau;
        total += lse - pos;
    }
    total
}

/// User-side and item-side contrastive alignment of the target behavior with
/// the global embeddings. Zero when the module is disabled in the config.
pub fn cpa_loss(
    state: &ForwardState,
    batch: &TrainBatch,
    tau: f64,
    full_pool: bool,
) -> Result<(f64, f64)> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if !state.cfg.enable_cpa {
        return Ok((0.0, 0.0));
    }
    let eps = state.cfg.norm_epsilon;
    let target = state.cfg.target_index();
    let all_users: Vec<u32>;
    let all_items: Vec<u32>;
    let (users, items): (&[u32], &[u32]) = if full_pool {
        all_users = (0..state.final_user[target].rows() as u32).collect();
        all_items = (0..state.final_item[target].rows() as u32).collect();
        (&all_users, &all_items)
    } else {
        (&batch.cpa_users, &batch.cpa_items)
    };
    let cl_user = info_nce(
        &state.final_user[target],
        state.global_user(),
        users,
        users,
        tau,
        eps,
    );
    let cl_item = info_nce(
        &state.final_item[target],
        state.global_item(),
        items,
        items,
        tau,
        eps,
    );
    Ok((cl_user, cl_item))
}

/// Regularized quantity: squared initial-embedding rows of the batch's
/// participants (counted per occurrence, averaged by the total triple count)
/// plus all gate/transform weight matrices in full. Biases are not decayed.
pub fn reg_term(params: &ModelParams, batch: &TrainBatch) -> f64 {
    let sq = |row: &[f64]| dot(row, row);
    let mut emb = 0.0;
    for triples in &batch.triples {
        for &(u, i, j) in triples {
            emb += sq(params.user_emb.row(u as usize));
            emb += sq(params.item_emb.row(i as usize));
            emb += sq(params.item_emb.row(j as usize));
        }
    }
    let count = batch.num_triples();
    if count > 0 {
        emb /= count as f64;
    }
    let mut weights = 0.0;
    for a in &params.aux {
        for side in [&a.user, &a.item] {
            for w in [
                &side.feedback_gate.w1,
                &side.feedback_gate.w2,
                &side.context_transform.w,
                &side.context_gate.w1,
                &side.context_gate.w2,
            ] {
                weights += dot(w.data(), w.data());
            }
        }
    }
    emb + weights
}

/// Assemble the joint objective; every behavior's BPR term enters with equal
/// weight.
pub fn total_loss(
    state: &ForwardState,
    params: &ModelParams,
    batch: &TrainBatch,
    lc: &LossConfig,
) -> Result<LossBreakdown> {
    let k = state.cfg.num_behaviors();
    assert_eq!(batch.triples.len(), k, "one triple list per behavior");
    let mut bpr = Vec::with_capacity(k);
    for b in 0..k {
        let l = bpr_loss(state, batch, b);
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("bpr[{}]", state.cfg.behaviors[b])));
        }
        bpr.push(l);
    }
    let (cl_user, cl_item) = cpa_loss(state, batch, lc.tau, lc.cpa_full_pool)?;
    if !cl_user.is_finite() || !cl_item.is_finite() {
        return Err(Error::NonFinite("contrastive terms".into()));
    }
    let reg = reg_term(params, batch);
    if !reg.is_finite() {
        return Err(Error::NonFinite("regularization".into()));
    }
    let total = bpr.iter().sum::<f64>() + lc.lambda * (cl_user + cl_item) + lc.beta * reg;
    Ok(LossBreakdown {
        bpr,
        cl_user,
        cl_item,
        reg,
        total,
    })
}
