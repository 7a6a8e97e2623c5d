//! Symmetric-normalized sparse bipartite adjacency and one-layer propagation.
//!
//! Both orientations are stored (CSR over users and over items) because every
//! forward/backward pass propagates in both directions. Graphs are immutable
//! after construction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Normalized bipartite interaction graph for one behavior (or the union of
/// all behaviors). Edge (u, i) carries coefficient 1/√(deg(u)·deg(i)) with
/// the degrees taken in this graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorGraph {
    behavior: String,
    num_users: usize,
    num_items: usize,
    user_offsets: Vec<usize>,
    user_nbrs: Vec<u32>,
    user_coeffs: Vec<f64>,
    item_offsets: Vec<usize>,
    item_nbrs: Vec<u32>,
    item_coeffs: Vec<f64>,
}

impl BehaviorGraph {
    pub fn behavior(&self) -> &str {
        &self.behavior
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.user_nbrs.len()
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_offsets[u + 1] - self.user_offsets[u]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_offsets[i + 1] - self.item_offsets[i]
    }

    /// Sorted item neighbors of `u` with their normalization coefficients.
    pub fn user_neighbors(&self, u: usize) -> (&[u32], &[f64]) {
        let r = self.user_offsets[u]..self.user_offsets[u + 1];
        (&self.user_nbrs[r.clone()], &self.user_coeffs[r])
    }

    pub fn item_neighbors(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.item_offsets[i]..self.item_offsets[i + 1];
        (&self.item_nbrs[r.clone()], &self.item_coeffs[r])
    }
}

/// Build a normalized graph from an edge list. Duplicate edges collapse to
/// one; the result is independent of input order.
pub fn build_graph(
    behavior: &str,
    edges: &[(u32, u32)],
    num_users: usize,
    num_items: usize,
) -> Result<BehaviorGraph> {
    for &(u, i) in edges {
        if u as usize >= num_users || i as usize >= num_items {
            return Err(Error::EdgeOutOfRange {
                user: u,
                item: i,
                num_users,
                num_items,
            });
        }
    }
    let mut edges: Vec<(u32, u32)> = edges.to_vec();
    edges.sort_unstable();
    edges.dedup();

    let mut user_deg = vec![0usize; num_users];
    let mut item_deg = vec![0usize; num_items];
    for &(u, i) in &edges {
        user_deg[u as usize] += 1;
        item_deg[i as usize] += 1;
    }

    let coeff = |u: u32, i: u32| {
        1.0 / ((user_deg[u as usize] as f64).sqrt() * (item_deg[i as usize] as f64).sqrt())
    };

    let mut user_offsets = vec![0usize; num_users + 1];
    for &(u, _) in &edges {
        user_offsets[u as usize + 1] += 1;
    }
    for u in 0..num_users {
        user_offsets[u + 1] += user_offsets[u];
    }
    let user_nbrs: Vec<u32> = edges.iter().map(|&(_, i)| i).collect();
    let user_coeffs: Vec<f64> = edges.iter().map(|&(u, i)| coeff(u, i)).collect();

    let mut by_item: Vec<(u32, u32)> = edges.iter().map(|&(u, i)| (i, u)).collect();
    by_item.sort_unstable();
    let mut item_offsets = vec![0usize; num_items + 1];
    for &(i, _) in &by_item {
        item_offsets[i as usize + 1] += 1;
    }
    for i in 0..num_items {
        item_offsets[i + 1] += item_offsets[i];
    }
    let item_nbrs: Vec<u32> = by_item.iter().map(|&(_, u)| u).collect();
    let item_coeffs: Vec<f64> = by_item.iter().map(|&(i, u)| coeff(u, i)).collect();

    Ok(BehaviorGraph {
        behavior: behavior.to_string(),
        num_users,
        num_items,
        user_offsets,
        user_nbrs,
        user_coeffs,
        item_offsets,
        item_nbrs,
        item_coeffs,
    })
}

/// Union graph over all behaviors' edges; an edge present in several
/// behaviors counts once, so the coefficients depend only on the union
/// neighbor sets.
pub fn build_global_graph(
    per_behavior_edges: &[Vec<(u32, u32)>],
    num_users: usize,
    num_items: usize,
) -> Result<BehaviorGraph> {
    let mut union: Vec<(u32, u32)> = per_behavior_edges.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    build_graph("global", &union, num_users, num_items)
}

/// Users-from-items propagation: row u of the result is
/// Σ_{i∈N(u)} coeff(u,i)·items[i]. Zero-degree users yield zero rows.
pub fn propagate_users(graph: &BehaviorGraph, items: &Mat) -> Mat {
    assert_eq!(items.rows(), graph.num_items);
    let d = items.cols();
    let mut out = Mat::zeros(graph.num_users, d);
    out.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(u, row)| {
            let (nbrs, coeffs) = graph.user_neighbors(u);
            for (&i, &c) in nbrs.iter().zip(coeffs.iter()) {
                let src = items.row(i as usize);
                for k in 0..d {
                    row[k] += c * src[k];
                }
            }
        });
    out
}

/// Items-from-users propagation; the transpose of `propagate_users`.
pub fn propagate_items(graph: &BehaviorGraph, users: &Mat) -> Mat {
    assert_eq!(users.rows(), graph.num_users);
    let d = users.cols();
    let mut out = Mat::zeros(graph.num_items, d);
    out.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(i, row)| {
            let (nbrs, coeffs) = graph.item_neighbors(i);
            for (&u, &c) in nbrs.iter().zip(coeffs.iter()) {
                let src = users.row(u as usize);
                for k in 0..d {
                    row[k] += c * src[k];
                }
            }
        });
    out
}
