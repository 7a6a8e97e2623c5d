//! Planted-preference synthetic data: latent user/item vectors drive purchase
//! sampling, clicks add noisy extras, and the intermediate behavior is a
//! per-user subsample of the purchases so that some users skip it entirely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{dedup_earliest, filter_by_purchase_counts, temporal_split, Dataset, RawEvent};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    pub min_purchases: usize,
    pub max_purchases: usize,
    /// Noisy click draws per purchase.
    pub click_multiplier: f64,
    /// Fraction of click extras drawn uniformly instead of from the planted
    /// preference (this is what pooled single-embedding baselines absorb).
    pub click_noise: f64,
    /// Probability that a user's intermediate behavior is missing entirely.
    pub intermediate_dropout: f64,
    /// Abandoned-cart signal: extra preference-driven cart items per purchase
    /// that never convert. Zero keeps the cart a pure purchase subsample.
    pub cart_extra_factor: f64,
    pub time_range: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 500,
            num_items: 800,
            latent_dim: 8,
            min_purchases: 6,
            max_purchases: 14,
            click_multiplier: 3.0,
            click_noise: 0.5,
            intermediate_dropout: 0.5,
            cart_extra_factor: 0.0,
            time_range: 1_000_000,
            seed: 0,
        }
    }
}

pub fn behavior_chain() -> Vec<String> {
    vec!["click".into(), "cart".into(), "purchase".into()]
}

/// Draw `count` distinct indices with probability proportional to `weights`.
fn weighted_sample_without_replacement(
    weights: &mut [f64],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut x = rng.random_range(0.0..total);
        let mut chosen = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                chosen = i;
                break;
            }
            x -= *w;
        }
        picked.push(chosen);
        weights[chosen] = 0.0;
    }
    picked
}

pub fn generate_events(cfg: &SyntheticConfig) -> Vec<RawEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let dim = cfg.latent_dim;
    let user_latent: Vec<Vec<f64>> = (0..cfg.num_users)
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let item_latent: Vec<Vec<f64>> = (0..cfg.num_items)
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();

    let scale = 1.0 / (dim as f64).sqrt();
    let mut events = Vec::new();
    let push = |events: &mut Vec<RawEvent>, u: usize, i: usize, behavior: &str, rng: &mut ChaCha8Rng| {
        events.push(RawEvent {
            user: format!("u{u}"),
            item: format!("i{i}"),
            behavior: behavior.to_string(),
            timestamp: rng.random_range(0..cfg.time_range),
        });
    };

    for u in 0..cfg.num_users {
        let scores: Vec<f64> = (0..cfg.num_items)
            .map(|i| {
                let s: f64 = user_latent[u]
                    .iter()
                    .zip(item_latent[i].iter())
                    .map(|(a, b)| a * b)
                    .sum();
                s * scale
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // sharp softmax for purchases, broader for preference-driven clicks
        let mut purchase_w: Vec<f64> = scores.iter().map(|s| ((s - max) / 0.5).exp()).collect();
        let click_w: Vec<f64> = scores.iter().map(|s| ((s - max) / 1.0).exp()).collect();

        let n_purchase = rng.random_range(cfg.min_purchases..=cfg.max_purchases);
        let purchases = weighted_sample_without_replacement(&mut purchase_w, n_purchase, &mut rng);
        for &i in &purchases {
            push(&mut events, u, i, "purchase", &mut rng);
        }

        // clicks: every purchase plus noisy extras
        let mut clicked: std::collections::BTreeSet<usize> = purchases.iter().copied().collect();
        let n_extra = (n_purchase as f64 * cfg.click_multiplier).round() as usize;
        let click_total: f64 = click_w.iter().sum();
        for _ in 0..n_extra {
            let i = if rng.random_bool(cfg.click_noise) {
                rng.random_range(0..cfg.num_items)
            } else {
                let mut x = rng.random_range(0.0..click_total);
                let mut chosen = cfg.num_items - 1;
                for (idx, w) in click_w.iter().enumerate() {
                    if x < *w {
                        chosen = idx;
                        break;
                    }
                    x -= *w;
                }
                chosen
            };
            clicked.insert(i);
        }
        for &i in &clicked {
            push(&mut events, u, i, "click", &mut rng);
        }

        // intermediate behavior: the purchases, plus (optionally) abandoned
        // carts drawn from the same sharp preference; dropped users skip the
        // behavior entirely
        if !rng.random_bool(cfg.intermediate_dropout) {
            let mut cart: std::collections::BTreeSet<usize> = purchases.iter().copied().collect();
            if cfg.cart_extra_factor > 0.0 {
                let n_extra = (n_purchase as f64 * cfg.cart_extra_factor).round() as usize;
                // remaining weights in purchase_w exclude already-picked items
                let mut w = purchase_w.clone();
                for i in weighted_sample_without_replacement(&mut w, n_extra, &mut rng) {
                    cart.insert(i);
                }
            }
            for &i in &cart {
                push(&mut events, u, i, "cart", &mut rng);
            }
        }
    }
    events
}

/// Generate, preprocess, and split in one call.
pub fn generate_dataset(cfg: &SyntheticConfig, train_frac: f64, val_frac: f64) -> Result<Dataset> {
    let chain = behavior_chain();
    let events = dedup_earliest(generate_events(cfg));
    let events = filter_by_purchase_counts(events, "purchase", 1, 1)?;
    temporal_split(&events, &chain, train_frac, val_frac)
}
