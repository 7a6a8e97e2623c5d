//! Top-K ranking evaluation: Prec@K, Rec@K, NDCG@K, HR@K per behavior, plus
//! the multi-behavior early-stopping signal.
//!
//! Protocol: full ranking over all items minus the user's train positives
//! under the same behavior; ties broken by ascending item index. Users are
//! evaluated per behavior independently.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::dataio::{Dataset, Split};
use crate::mat::{dot, Mat};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CutoffMetrics {
    pub prec: f64,
    pub rec: f64,
    pub ndcg: f64,
    pub hr: f64,
}

/// Averaged metrics for one behavior, one entry per configured cutoff.
#[derive(Clone, Debug)]
pub struct BehaviorReport {
    pub evaluated_users: usize,
    pub at: Vec<(usize, CutoffMetrics)>,
}

impl BehaviorReport {
    pub fn metric_at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.at.iter().find(|(c, _)| *c == k).map(|(_, m)| m)
    }
}

/// Per-behavior metric tables; a behavior with no evaluable users is absent
/// (`None`), not zero.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub behaviors: Vec<String>,
    pub cutoffs: Vec<usize>,
    pub per_behavior: Vec<Option<BehaviorReport>>,
}

impl MetricReport {
    pub fn ndcg_at(&self, behavior: usize, k: usize) -> Option<f64> {
        self.per_behavior[behavior]
            .as_ref()
            .and_then(|b| b.metric_at(k))
            .map(|m| m.ndcg)
    }

    /// Machine-readable lines "behavior.metric@K=value".
    pub fn machine_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (b, name) in self.behaviors.iter().enumerate() {
            if let Some(report) = &self.per_behavior[b] {
                for (k, m) in &report.at {
                    out.push(format!("{name}.prec@{k}={:.6}", m.prec));
                    out.push(format!("{name}.rec@{k}={:.6}", m.rec));
                    out.push(format!("{name}.ndcg@{k}={:.6}", m.ndcg));
                    out.push(format!("{name}.hr@{k}={:.6}", m.hr));
                }
            }
        }
        out
    }

    /// Aligned plain-text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>6} {:>5} {:>9} {:>9} {:>9} {:>9}\n",
            "behavior", "users", "K", "prec", "rec", "ndcg", "hr"
        ));
        for (b, name) in self.behaviors.iter().enumerate() {
            match &self.per_behavior[b] {
                Some(report) => {
                    for (k, m) in &report.at {
                        out.push_str(&format!(
                            "{:<12} {:>6} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                            name, report.evaluated_users, k, m.prec, m.rec, m.ndcg, m.hr
                        ));
                    }
                }
                None => {
                    out.push_str(&format!(
                        "{:<12} {:>6} {:>5} {:>9} {:>9} {:>9} {:>9}\n",
                        name, 0, "-", "-", "-", "-", "-"
                    ));
                }
            }
        }
        out
    }
}

/// Top-K items for one user by dot-product score over all items minus the
/// exclusions; ties broken by ascending item index. Returns fewer than K
/// items when the candidate set is smaller.
pub fn rank_topk(
    user_row: &[f64],
    item_emb: &Mat,
    k: usize,
    exclude: &[u32],
) -> Vec<u32> {
    let n = item_emb.rows();
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(n.saturating_sub(exclude.len()));
    for i in 0..n as u32 {
        if exclude.binary_search(&i).is_ok() {
            continue;
        }
        scored.push((dot(user_row, item_emb.row(i as usize)), i));
    }
    let take = k.min(scored.len());
    if take == 0 {
        return Vec::new();
    }
    // descending score, ascending index on ties
    scored.select_nth_unstable_by(take - 1, |a, b| {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
    });
    scored.truncate(take);
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Per-user metrics at cutoff `k` given a ranked list and the ground truth.
/// DCG uses 1-based ranks: Σ 1/log₂(r+1) over hit ranks, normalized by the
/// ideal DCG over min(k, |GT|) ranks.
pub fn metrics_for_user(ranked: &[u32], gt: &[u32], k: usize) -> CutoffMetrics {
    debug_assert!(!gt.is_empty());
    let top = &ranked[..k.min(ranked.len())];
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in top.iter().enumerate() {
        if gt.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..k.min(gt.len()))
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    CutoffMetrics {
        prec: hits as f64 / k as f64,
        rec: hits as f64 / gt.len() as f64,
        ndcg: if ideal > 0.0 { dcg / ideal } else { 0.0 },
        hr: if hits > 0 { 1.0 } else { 0.0 },
    }
}

/// Evaluate one split: per behavior, metrics averaged over users with at
/// least one ground-truth edge there.
pub fn evaluate(
    final_user: &[Mat],
    final_item: &[Mat],
    dataset: &Dataset,
    split: Split,
    cutoffs: &[usize],
) -> MetricReport {
    let max_k = cutoffs.iter().copied().max().unwrap_or(0);
    let mut per_behavior = Vec::with_capacity(dataset.behaviors.len());
    for b in 0..dataset.behaviors.len() {
        let mut gt: HashMap<u32, Vec<u32>> = HashMap::new();
        for &(u, i) in dataset.edges(b, split) {
            gt.entry(u).or_default().push(i);
        }
        if gt.is_empty() {
            per_behavior.push(None);
            continue;
        }
        let mut train_pos: HashMap<u32, Vec<u32>> = HashMap::new();
        for &(u, i) in dataset.edges(b, Split::Train) {
            train_pos.entry(u).or_default().push(i);
        }
        let mut users: Vec<u32> = gt.keys().copied().collect();
        users.sort_unstable();
        let empty: Vec<u32> = Vec::new();

        let per_user: Vec<Vec<CutoffMetrics>> = users
            .par_iter()
            .map(|u| {
                let mut truth = gt[u].clone();
                truth.sort_unstable();
                let mut exclude = train_pos.get(u).cloned().unwrap_or_else(|| empty.clone());
                exclude.sort_unstable();
                let ranked = rank_topk(
                    final_user[b].row(*u as usize),
                    &final_item[b],
                    max_k,
                    &exclude,
                );
                cutoffs
                    .iter()
                    .map(|&k| metrics_for_user(&ranked, &truth, k))
                    .collect()
            })
            .collect();

        let count = users.len() as f64;
        let at = cutoffs
            .iter()
            .enumerate()
            .map(|(ci, &k)| {
                let mut acc = CutoffMetrics::default();
                for row in &per_user {
                    acc.prec += row[ci].prec;
                    acc.rec += row[ci].rec;
                    acc.ndcg += row[ci].ndcg;
                    acc.hr += row[ci].hr;
                }
                (
                    k,
                    CutoffMetrics {
                        prec: acc.prec / count,
                        rec: acc.rec / count,
                        ndcg: acc.ndcg / count,
                        hr: acc.hr / count,
                    },
                )
            })
            .collect();
        per_behavior.push(Some(BehaviorReport {
            evaluated_users: users.len(),
            at,
        }));
    }
    MetricReport {
        behaviors: dataset.behaviors.clone(),
        cutoffs: cutoffs.to_vec(),
        per_behavior,
    }
}

/// Early-stopping signal: the sum over behaviors of NDCG@5. Behaviors without
/// evaluable users contribute nothing.
pub fn early_stop_signal(report: &MetricReport) -> f64 {
    (0..report.behaviors.len())
        .filter_map(|b| report.ndcg_at(b, 5))
        .sum()
}
