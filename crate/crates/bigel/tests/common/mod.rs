//! Shared test support: an independent straight-line reference
//! implementation of the forward pass (dense, loop-based, no sparse
//! structures) plus random-instance builders.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bigel::graph::{build_global_graph, build_graph, BehaviorGraph};
use bigel::model::{init_params, CascadeInput, ModelConfig, ModelParams};

pub type Dense = Vec<Vec<f64>>;

pub fn zeros(rows: usize, cols: usize) -> Dense {
    vec![vec![0.0; cols]; rows]
}

/// Dense normalized bipartite adjacency 1/√(deg_u·deg_i).
pub fn dense_adj(edges: &[(u32, u32)], m: usize, n: usize) -> Dense {
    let mut edges: Vec<(u32, u32)> = edges.to_vec();
    edges.sort_unstable();
    edges.dedup();
    let mut du = vec![0usize; m];
    let mut di = vec![0usize; n];
    for &(u, i) in &edges {
        du[u as usize] += 1;
        di[i as usize] += 1;
    }
    let mut a = zeros(m, n);
    for &(u, i) in &edges {
        a[u as usize][i as usize] =
            1.0 / ((du[u as usize] as f64).sqrt() * (di[i as usize] as f64).sqrt());
    }
    a
}

fn mat_to_dense(m: &bigel::mat::Mat) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn propagate(a: &Dense, x: &Dense) -> Dense {
    let rows = a.len();
    let cols = x[0].len();
    let inner = x.len();
    let mut out = zeros(rows, cols);
    for r in 0..rows {
        for i in 0..inner {
            if a[r][i] != 0.0 {
                for c in 0..cols {
                    out[r][c] += a[r][i] * x[i][c];
                }
            }
        }
    }
    out
}

fn transpose(a: &Dense) -> Dense {
    let rows = a.len();
    let cols = a[0].len();
    let mut out = zeros(cols, rows);
    for r in 0..rows {
        for c in 0..cols {
            out[c][r] = a[r][c];
        }
    }
    out
}

fn row_normalize(x: &Dense, eps: f64) -> Dense {
    x.iter()
        .map(|row| {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            row.iter().map(|v| v / denom).collect()
        })
        .collect()
}

fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| p + q).collect())
        .collect()
}

fn affine(x: &Dense, w: &bigel::mat::Mat, b: &[f64]) -> Dense {
    let d_out = w.rows();
    x.iter()
        .map(|row| {
            (0..d_out)
                .map(|j| {
                    let mut s = b[j];
                    for (c, v) in row.iter().enumerate() {
                        s += w.row(j)[c] * v;
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn gate_value(gp: &bigel::model::GateParams, x: &Dense) -> Dense {
    let h: Dense = affine(x, &gp.w1, &gp.b1)
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|v| if v >= 0.0 { v } else { 0.01 * v })
                .collect()
        })
        .collect();
    affine(&h, &gp.w2, &gp.b2)
        .into_iter()
        .map(|row| row.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect())
        .collect()
}

fn hadamard_add(base: &Dense, gate: &Dense, payload: &Dense) -> Dense {
    base.iter()
        .zip(gate.iter().zip(payload.iter()))
        .map(|(b, (g, p))| {
            b.iter()
                .zip(g.iter().zip(p.iter()))
                .map(|(bv, (gv, pv))| bv + gv * pv)
                .collect()
        })
        .collect()
}

pub struct NaiveOutputs {
    pub final_user: Vec<Dense>,
    pub final_item: Vec<Dense>,
    pub global_user: Dense,
    pub global_item: Dense,
}

/// Straight-line reference of the full forward pass.
pub fn naive_forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    behavior_edges: &[Vec<(u32, u32)>],
    m: usize,
    n: usize,
) -> NaiveOutputs {
    let k_total = cfg.behaviors.len();
    let target = k_total - 1;
    let eps = cfg.norm_epsilon;
    let p0 = mat_to_dense(&params.user_emb);
    let q0 = mat_to_dense(&params.item_emb);

    // cascade
    let mut acc_u: Vec<Dense> = Vec::new();
    let mut acc_i: Vec<Dense> = Vec::new();
    let mut prev_u = p0.clone();
    let mut prev_i = q0.clone();
    for k in 0..k_total {
        let a = dense_adj(&behavior_edges[k], m, n);
        let at = transpose(&a);
        let (mut cu, mut ci) = match cfg.cascading_input_mode {
            CascadeInput::Accumulated => (prev_u.clone(), prev_i.clone()),
            CascadeInput::Base => (p0.clone(), q0.clone()),
        };
        for _ in 0..cfg.layers_per_behavior[k] {
            let nu = propagate(&a, &ci);
            let ni = propagate(&at, &cu);
            cu = nu;
            ci = ni;
        }
        let eu = add(&prev_u, &row_normalize(&cu, eps));
        let ei = add(&prev_i, &row_normalize(&ci, eps));
        prev_u = eu.clone();
        prev_i = ei.clone();
        acc_u.push(eu);
        acc_i.push(ei);
    }

    // gated feedback
    let mut post_u = acc_u.clone();
    let mut post_i = acc_i.clone();
    let mut cgf_gate_u: Vec<Dense> = Vec::new();
    let mut cgf_gate_i: Vec<Dense> = Vec::new();
    for k in 0..target {
        let gu = gate_value(&params.aux[k].user.feedback_gate, &acc_u[k]);
        let gi = gate_value(&params.aux[k].item.feedback_gate, &acc_i[k]);
        if cfg.enable_cgf {
            post_u[k] = hadamard_add(&acc_u[k], &gu, &acc_u[target]);
            post_i[k] = hadamard_add(&acc_i[k], &gi, &acc_i[target]);
        }
        cgf_gate_u.push(gu);
        cgf_gate_i.push(gi);
    }

    // global propagation
    let mut union: Vec<(u32, u32)> = behavior_edges.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    let a = dense_adj(&union, m, n);
    let at = transpose(&a);
    let mut gu = p0.clone();
    let mut gi = q0.clone();
    for _ in 0..cfg.global_layers {
        let nu = propagate(&a, &gi);
        let ni = propagate(&at, &gu);
        gu = nu;
        gi = ni;
    }

    // global-context injection
    let mut final_u = post_u.clone();
    let mut final_i = post_i.clone();
    if cfg.enable_gce {
        for k in 0..target {
            let side_u = &params.aux[k].user;
            let side_i = &params.aux[k].item;
            let tu = affine(&gu, &side_u.context_transform.w, &side_u.context_transform.b);
            let ti = affine(&gi, &side_i.context_transform.w, &side_i.context_transform.b);
            let gate_u = if cfg.share_gce_gate {
                cgf_gate_u[k].clone()
            } else {
                gate_value(&side_u.context_gate, &post_u[k])
            };
            let gate_i = if cfg.share_gce_gate {
                cgf_gate_i[k].clone()
            } else {
                gate_value(&side_i.context_gate, &post_i[k])
            };
            final_u[k] = hadamard_add(&post_u[k], &gate_u, &tu);
            final_i[k] = hadamard_add(&post_i[k], &gate_i, &ti);
        }
    }

    NaiveOutputs {
        final_user: final_u,
        final_item: final_i,
        global_user: gu,
        global_item: gi,
    }
}

pub struct RandomInstance {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub edges: Vec<Vec<(u32, u32)>>,
    pub graphs: Vec<BehaviorGraph>,
    pub global: BehaviorGraph,
    pub m: usize,
    pub n: usize,
}

/// Small random instance with randomized sizes, layer counts, and toggles.
pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(5..=15);
    let n = rng.random_range(5..=15);
    let k = rng.random_range(1..=3);
    let cfg = ModelConfig {
        embedding_dim: rng.random_range(2..=6),
        behaviors: (0..k).map(|i| format!("b{i}")).collect(),
        layers_per_behavior: (0..k).map(|_| rng.random_range(1..=3)).collect(),
        global_layers: rng.random_range(1..=3),
        cascading_input_mode: if rng.random_bool(0.5) {
            CascadeInput::Accumulated
        } else {
            CascadeInput::Base
        },
        share_gce_gate: rng.random_bool(0.5),
        enable_cgf: rng.random_bool(0.8),
        enable_gce: rng.random_bool(0.8),
        enable_cpa: true,
        norm_epsilon: 1e-12,
    };
    let mut edges = Vec::new();
    let graphs: Vec<BehaviorGraph> = (0..k)
        .map(|b| {
            let count = rng.random_range(5..=(m * n / 3).max(6));
            let mut set = std::collections::BTreeSet::new();
            for _ in 0..count {
                set.insert((rng.random_range(0..m as u32), rng.random_range(0..n as u32)));
            }
            let list: Vec<(u32, u32)> = set.into_iter().collect();
            edges.push(list.clone());
            build_graph(&format!("b{b}"), &list, m, n).unwrap()
        })
        .collect();
    let global = build_global_graph(&edges, m, n).unwrap();
    let params = init_params(&cfg, m, n, seed ^ 0xabcd);
    RandomInstance {
        cfg,
        params,
        edges,
        graphs,
        global,
        m,
        n,
    }
}

pub fn max_abs_diff(dense: &Dense, mat: &bigel::mat::Mat) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in dense.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - mat.row(r)[c]).abs());
        }
    }
    worst
}
