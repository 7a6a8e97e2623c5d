//! Acceptance suite. Each test covers one release criterion and prints one
//! pass/fail line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! The full-dataset reproduction (criterion 7) needs the real JD log and
//! hours of compute; it is `#[ignore]`d and documented in the README.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bigel::config::{Baseline, ExperimentConfig};
use bigel::dataio::{Dataset, Split};
use bigel::eval::{evaluate, metrics_for_user};
use bigel::graph::{propagate_items, propagate_users};
use bigel::mat::Mat;
use bigel::model::{full_forward, CascadeInput};
use bigel::objective::{info_nce, softplus};
use bigel::optim::{gradcheck, GradcheckOptions};
use bigel::runner::ablation_variants;
use bigel::synth::{generate_dataset, SyntheticConfig};
use bigel::train::{train, train_baseline};

use common::{dense_adj, max_abs_diff, naive_forward, random_instance};

#[test]
fn criterion_1_gradient_fidelity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for mode in [CascadeInput::Accumulated, CascadeInput::Base] {
        for share in [false, true] {
            let opts = GradcheckOptions {
                seed: 0,
                cascading_input_mode: mode,
                share_gce_gate: share,
                fd_step: 1e-4,
                threshold: 1e-3,
                ..GradcheckOptions::default()
            };
            let report = gradcheck(&opts).unwrap();
            let max = report
                .entries
                .iter()
                .map(|e| e.max_rel_err)
                .fold(0.0, f64::max);
            worst = worst.max(max);
            assert!(
                report.passed,
                "mode {mode:?} share {share}:\n{}",
                report.render()
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "gradient check took {elapsed:?}, budget is 30 s"
    );
    println!(
        "criterion 1 (gradient fidelity): PASS — max rel err {worst:.2e} < 1e-3 over 4 configurations in {elapsed:.2?}"
    );
}

#[test]
fn criterion_2_propagation_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let inst = random_instance(seed);

        // one-layer propagation against the dense normalized adjacency
        for (b, graph) in inst.graphs.iter().enumerate() {
            let a = dense_adj(&inst.edges[b], inst.m, inst.n);
            let items = Mat::from_fn(inst.n, 4, |_, _| rng.random_range(-1.0..1.0));
            let users = Mat::from_fn(inst.m, 4, |_, _| rng.random_range(-1.0..1.0));
            let got_u = propagate_users(graph, &items);
            let got_i = propagate_items(graph, &users);
            for u in 0..inst.m {
                for c in 0..4 {
                    let want: f64 = (0..inst.n).map(|i| a[u][i] * items.row(i)[c]).sum();
                    worst = worst.max((got_u.row(u)[c] - want).abs());
                }
            }
            for i in 0..inst.n {
                for c in 0..4 {
                    let want: f64 = (0..inst.m).map(|u| a[u][i] * users.row(u)[c]).sum();
                    worst = worst.max((got_i.row(i)[c] - want).abs());
                }
            }
        }

        // end-to-end forward against the straight-line reference
        let st = full_forward(&inst.params, &inst.graphs, &inst.global, &inst.cfg).unwrap();
        let naive = naive_forward(&inst.params, &inst.cfg, &inst.edges, inst.m, inst.n);
        for k in 0..inst.cfg.behaviors.len() {
            worst = worst.max(max_abs_diff(&naive.final_user[k], &st.final_user[k]));
            worst = worst.max(max_abs_diff(&naive.final_item[k], &st.final_item[k]));
        }
        worst = worst.max(max_abs_diff(&naive.global_user, st.global_user()));
    }
    assert!(worst < 1e-8, "max abs diff {worst} >= 1e-8");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "oracle comparison took {elapsed:?}");
    println!(
        "criterion 2 (propagation oracle equivalence): PASS — max abs diff {worst:.2e} < 1e-8 on 20 instances in {elapsed:.2?}"
    );
}

#[test]
fn criterion_3_loss_closed_forms() {
    // BPR at a score tie: softplus(0) = ln 2
    let tie = softplus(0.0);
    assert!((tie - std::f64::consts::LN_2).abs() < 1e-9, "{tie}");

    // per-anchor contrastive loss with identical embeddings: ln(pool size)
    let mut worst: f64 = 0.0;
    for n in [2usize, 4, 7, 16] {
        let anchors = Mat::from_fn(n, 5, |_, c| [0.2, -0.4, 0.9, 0.1, -0.3][c]);
        let pool = Mat::from_fn(n, 5, |_, c| [0.7, 0.7, -0.1, 0.2, 0.5][c]);
        let idx: Vec<u32> = (0..n as u32).collect();
        let per_anchor = info_nce(&anchors, &pool, &idx, &idx, 0.2, 1e-12) / n as f64;
        worst = worst.max((per_anchor - (n as f64).ln()).abs());
    }
    assert!(worst < 1e-9, "contrastive closed form off by {worst}");
    println!(
        "criterion 3 (loss closed forms): PASS — BPR tie = ln 2 and per-anchor InfoNCE = ln(pool) to 1e-9"
    );
}

#[test]
fn criterion_4_metric_oracle() {
    // closed form: single hit at rank 3 under K=5 gives NDCG exactly 0.5
    let m = metrics_for_user(&[9, 8, 3, 1, 2], &[3], 5);
    assert_eq!(m.ndcg, 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 40u32;
        let mut order: Vec<u32> = (0..n).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let ranked: Vec<u32> = order.into_iter().take(25).collect();
        let mut gt: Vec<u32> = (0..n).filter(|_| rng.random_bool(0.2)).collect();
        if gt.is_empty() {
            gt.push(rng.random_range(0..n));
        }
        gt.sort_unstable();
        let k = rng.random_range(1..=12);
        let got = metrics_for_user(&ranked, &gt, k);

        // independent per-definition computation
        let hits: Vec<usize> = ranked
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, it)| gt.contains(it))
            .map(|(pos, _)| pos + 1)
            .collect();
        let dcg: f64 = hits.iter().map(|&r| 1.0 / ((r + 1) as f64).log2()).sum();
        let idcg: f64 = (1..=k.min(gt.len()))
            .map(|r| 1.0 / ((r + 1) as f64).log2())
            .sum();
        worst = worst.max((got.prec - hits.len() as f64 / k as f64).abs());
        worst = worst.max((got.rec - hits.len() as f64 / gt.len() as f64).abs());
        worst = worst.max((got.ndcg - dcg / idcg).abs());
        let hr = if hits.is_empty() { 0.0 } else { 1.0 };
        worst = worst.max((got.hr - hr).abs());
    }
    assert!(worst < 1e-12, "metric mismatch {worst}");
    println!(
        "criterion 4 (metric oracle): PASS — 1000 random ranking/ground-truth pairs match to 1e-12, rank-3 NDCG = 0.5 exact"
    );
}

fn synthetic_cfg(dropout: f64, data_seed: u64) -> (Dataset, ExperimentConfig) {
    let synth = SyntheticConfig {
        num_users: 500,
        num_items: 800,
        intermediate_dropout: dropout,
        seed: data_seed,
        ..Default::default()
    };
    let dataset = generate_dataset(&synth, 0.8, 0.1).unwrap();
    let cfg = ExperimentConfig {
        embedding_dim: 32,
        global_layers: 2,
        lambda: 0.1,
        beta: 1e-3,
        tau: 0.2,
        lr: 0.01,
        batch_size: 500,
        max_epochs: 50,
        patience: 10,
        seeds: vec![1, 2, 3],
        eval_cutoffs: vec![5, 10],
        ..Default::default()
    };
    (dataset, cfg)
}

/// Expected NDCG@5 of a uniformly random ranking on this dataset's target
/// behavior, estimated with random scores over several seeds.
fn random_ranking_ndcg5(dataset: &Dataset) -> f64 {
    let target = dataset.behaviors.len() - 1;
    let mut total = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfade);
        let d = 8;
        let fu: Vec<Mat> = (0..dataset.behaviors.len())
            .map(|_| Mat::from_fn(dataset.num_users, d, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let fi: Vec<Mat> = (0..dataset.behaviors.len())
            .map(|_| Mat::from_fn(dataset.num_items, d, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let report = evaluate(&fu, &fi, dataset, Split::Test, &[5]);
        total += report.ndcg_at(target, 5).unwrap_or(0.0);
    }
    total / 5.0
}

#[test]
fn criterion_5_synthetic_recoverability() {
    let start = Instant::now();
    let (dataset, cfg) = synthetic_cfg(0.5, 97);
    let target = dataset.behaviors.len() - 1;
    let random_level = random_ranking_ndcg5(&dataset);

    let mut bigel_scores = Vec::new();
    let mut baseline_scores = Vec::new();
    for &seed in &cfg.seeds {
        let dir = tempfile::tempdir().unwrap();
        let full = train(&cfg, &dataset, dir.path(), seed).unwrap();
        assert!(full.epochs_run <= 50);
        bigel_scores.push(full.test_report.ndcg_at(target, 5).unwrap_or(0.0));

        let bdir = tempfile::tempdir().unwrap();
        let base = train_baseline(&cfg, &dataset, bdir.path(), seed, Baseline::UnifiedLightgcn)
            .unwrap();
        baseline_scores.push(base.test_report.ndcg_at(target, 5).unwrap_or(0.0));
    }
    let threshold = 1.5 * random_level;
    for (i, s) in bigel_scores.iter().enumerate() {
        assert!(
            *s >= threshold,
            "seed {}: ndcg {s:.4} < 1.5x random level {threshold:.4}",
            cfg.seeds[i]
        );
    }
    let wins = bigel_scores
        .iter()
        .zip(baseline_scores.iter())
        .filter(|(a, b)| a >= b)
        .count();
    assert!(
        wins >= 2,
        "model beat the unified baseline in only {wins}/3 seeds ({bigel_scores:?} vs {baseline_scores:?})"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600, "recoverability run took {elapsed:?}");
    println!(
        "criterion 5 (synthetic recoverability): PASS — ndcg@5 {bigel_scores:?} vs 1.5x random {threshold:.4}, beats unified baseline {wins}/3 ({baseline_scores:?}) in {elapsed:.2?}"
    );
}

#[test]
fn criterion_6_ablation_direction() {
    let (dataset, mut cfg) = synthetic_cfg(0.7, 131);
    cfg.max_epochs = 30;
    cfg.patience = 8;
    let target = dataset.behaviors.len() - 1;

    let grid = ablation_variants();
    let stripped = grid.last().unwrap();
    assert_eq!(stripped.0, "w/o GCE&CPA&CGF");

    let mut wins = 0;
    let mut full_scores = Vec::new();
    let mut stripped_scores = Vec::new();
    for &seed in &cfg.seeds {
        let full_dir = tempfile::tempdir().unwrap();
        let full = train(&cfg, &dataset, full_dir.path(), seed).unwrap();
        let f = full.test_report.ndcg_at(target, 5).unwrap_or(0.0);

        let mut stripped_cfg = cfg.clone();
        stripped_cfg.enable_cgf = stripped.1;
        stripped_cfg.enable_gce = stripped.2;
        stripped_cfg.enable_cpa = stripped.3;
        let s_dir = tempfile::tempdir().unwrap();
        let plain = train(&stripped_cfg, &dataset, s_dir.path(), seed).unwrap();
        let s = plain.test_report.ndcg_at(target, 5).unwrap_or(0.0);

        if f >= s {
            wins += 1;
        }
        full_scores.push(f);
        stripped_scores.push(s);
    }
    assert!(
        wins >= 2,
        "full model won only {wins}/3 seeds: full {full_scores:?} vs stripped {stripped_scores:?}"
    );
    println!(
        "criterion 6 (ablation direction): PASS — full {full_scores:?} >= stripped {stripped_scores:?} in {wins}/3 seeds"
    );
}

/// Full JD reproduction. Requires the raw JD log (tab-separated
/// user/item/behavior/timestamp with behaviors click, favourite, purchase)
/// at the path in BIGEL_JD_RAW, and hours of compute. Run with:
/// `BIGEL_JD_RAW=... cargo test --release --test acceptance criterion_7 -- --ignored --nocapture`
#[test]
#[ignore = "long-running; needs the real JD dataset (set BIGEL_JD_RAW)"]
fn criterion_7_jd_reproduction() {
    let raw = std::env::var("BIGEL_JD_RAW").expect("set BIGEL_JD_RAW to the raw JD log");
    let work = std::env::temp_dir().join("bigel_jd_acceptance");
    std::fs::create_dir_all(&work).unwrap();

    let mut cfg = ExperimentConfig {
        raw_path: Some(raw.into()),
        behaviors: vec!["click".into(), "favourite".into(), "purchase".into()],
        item_min_purchases: 20,
        user_min_purchases: 5,
        embedding_dim: 100,
        global_layers: 2,
        lambda: 0.01,
        beta: 1e-3,
        tau: 0.2,
        lr: 1e-3,
        batch_size: 500,
        max_epochs: 1000,
        patience: 20,
        seeds: vec![1],
        eval_cutoffs: vec![5, 10, 15],
        ..Default::default()
    };
    let prepared = bigel::runner::cmd_prepare(&cfg, &work.join("dataset")).unwrap();
    println!("{}", prepared.table);
    cfg.behaviors.clear();

    let full = train(&cfg, &prepared.dataset, &work.join("bigel"), 1).unwrap();
    let target = prepared.dataset.behaviors.len() - 1;
    let ndcg = full.test_report.ndcg_at(target, 5).unwrap();

    let mf = train_baseline(&cfg, &prepared.dataset, &work.join("mf_bpr"), 1, Baseline::MfBpr)
        .unwrap();
    let mf_ndcg = mf.test_report.ndcg_at(target, 5).unwrap();

    let reference = 0.0739;
    let rel = (ndcg - reference).abs() / reference;
    println!(
        "criterion 7 (JD reproduction): purchase ndcg@5 {ndcg:.4} (reference {reference}, rel diff {rel:.2}), mf-bpr {mf_ndcg:.4}"
    );
    assert!(rel <= 0.20, "purchase ndcg@5 {ndcg:.4} outside ±20% of {reference}");
    assert!(ndcg > mf_ndcg, "did not beat the MF-BPR baseline");
    println!("criterion 7 (JD reproduction): PASS");
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let synth = SyntheticConfig {
        num_users: 80,
        num_items: 120,
        seed: 61,
        ..Default::default()
    };
    let dataset = generate_dataset(&synth, 0.8, 0.1).unwrap();
    let cfg = ExperimentConfig {
        embedding_dim: 8,
        global_layers: 2,
        lr: 0.01,
        batch_size: 128,
        max_epochs: 4,
        patience: 10,
        seeds: vec![9],
        eval_cutoffs: vec![5],
        deterministic: true,
        ..Default::default()
    };

    // bit-identical logs across two invocations
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&cfg, &dataset, a.path(), 9).unwrap();
    train(&cfg, &dataset, b.path(), 9).unwrap();
    let log_a = std::fs::read(a.path().join("train.log")).unwrap();
    let log_b = std::fs::read(b.path().join("train.log")).unwrap();
    assert_eq!(log_a, log_b, "logs are not bit-identical");

    // checkpoint round-trip is bit-exact
    let ckpt = a.path().join("best.bgel");
    let loaded = bigel::model::load_checkpoint(&ckpt).unwrap();
    let rewritten = a.path().join("rewritten.bgel");
    bigel::model::save_checkpoint(&loaded.params, &loaded.behaviors, &rewritten).unwrap();
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(&rewritten).unwrap(),
        "checkpoint round-trip changed bytes"
    );

    // resume-equivalence
    let full_dir = tempfile::tempdir().unwrap();
    let split_dir = tempfile::tempdir().unwrap();
    train(&cfg, &dataset, full_dir.path(), 9).unwrap();
    let mut first = cfg.clone();
    first.max_epochs = 2;
    train(&first, &dataset, split_dir.path(), 9).unwrap();
    let mut second = cfg.clone();
    second.resume_from = Some(split_dir.path().to_path_buf());
    train(&second, &dataset, split_dir.path(), 9).unwrap();
    assert_eq!(
        std::fs::read(full_dir.path().join("best.bgel")).unwrap(),
        std::fs::read(split_dir.path().join("best.bgel")).unwrap(),
        "resumed run produced a different checkpoint"
    );
    let tail = |p: &std::path::Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| l.starts_with("epoch=3") || l.starts_with("epoch=4"))
            .map(str::to_string)
            .collect()
    };
    assert_eq!(
        tail(&full_dir.path().join("train.log")),
        tail(&split_dir.path().join("train.log")),
        "resumed trajectory diverged"
    );
    println!(
        "criterion 8 (determinism and persistence): PASS — identical logs, bit-exact checkpoint round-trip, resume-equivalent trajectory"
    );
}
