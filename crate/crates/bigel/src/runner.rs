//! Experiment orchestration behind the CLI subcommands: preprocessing,
//! training, evaluation, ablations, hyperparameter sweeps, baselines, and
//! behavior-order studies.

use std::fs;
use std::path::Path;

use crate::config::{Baseline, ExperimentConfig, SweepParam};
use crate::dataio::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::graph::{build_global_graph, build_graph, propagate_items, propagate_users};
use crate::mat::Mat;
use crate::model::{full_forward, load_checkpoint};
use crate::optim::{gradcheck, GradcheckOptions};
use crate::train::{train, train_baseline, TrainResult};

pub struct PrepareSummary {
    pub dataset: Dataset,
    pub table: String,
}

/// Run the preprocessing pipeline and persist the dataset directory. Prints
/// split statistics per behavior.
pub fn cmd_prepare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PrepareSummary> {
    cfg.validate()?;
    let raw = cfg
        .raw_path
        .as_ref()
        .ok_or_else(|| Error::Config("prepare requires raw_path".into()))?;
    if cfg.behaviors.is_empty() {
        return Err(Error::Config("prepare requires the behavior chain".into()));
    }
    let dataset = dataio::prepare(
        raw,
        &cfg.column_map(),
        &cfg.behaviors,
        cfg.item_min_purchases,
        cfg.user_min_purchases,
        cfg.train_frac,
        cfg.val_frac,
    )?;
    dataset.save(out_dir)?;

    let mut table = String::new();
    table.push_str(&format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9}\n",
        "statistic", "total", "train", "val", "test"
    ));
    table.push_str(&format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9}\n",
        "users", dataset.num_users, dataset.num_users, "-", "-"
    ));
    table.push_str(&format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9}\n",
        "items", dataset.num_items, dataset.num_items, "-", "-"
    ));
    for (b, name) in dataset.behaviors.iter().enumerate() {
        let (tr, va, te) = (
            dataset.train[b].len(),
            dataset.val[b].len(),
            dataset.test[b].len(),
        );
        table.push_str(&format!(
            "{:<12} {:>9} {:>9} {:>9} {:>9}\n",
            name,
            tr + va + te,
            tr,
            va,
            te
        ));
    }
    Ok(PrepareSummary { dataset, table })
}

/// Train the full model for one seed.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
    seed: u64,
) -> Result<TrainResult> {
    train(cfg, dataset, out_dir, seed)
}

/// Evaluate the checkpoint in `out_dir` on the validation and test splits.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<(MetricReport, MetricReport)> {
    cfg.validate()?;
    let ckpt = load_checkpoint(&out_dir.join("best.bgel"))?;
    let k_total = dataset.behaviors.len();
    let (finals_u, finals_i): (Vec<Mat>, Vec<Mat>) = if ckpt.behaviors == ["pooled"] {
        // baseline checkpoint: shared embeddings scored for every behavior
        let mut union: Vec<(u32, u32)> = dataset.train.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        let graph = build_graph("pooled", &union, dataset.num_users, dataset.num_items)?;
        let layers = match cfg.baseline {
            Baseline::MfBpr => 0,
            Baseline::UnifiedLightgcn => cfg.global_layers,
            Baseline::None => {
                return Err(Error::Config(
                    "pooled checkpoint requires a baseline selector".into(),
                ))
            }
        };
        let mut u = ckpt.params.user_emb.clone();
        let mut i = ckpt.params.item_emb.clone();
        for _ in 0..layers {
            let nu = propagate_users(&graph, &i);
            let ni = propagate_items(&graph, &u);
            u = nu;
            i = ni;
        }
        (
            (0..k_total).map(|_| u.clone()).collect(),
            (0..k_total).map(|_| i.clone()).collect(),
        )
    } else {
        if ckpt.behaviors != dataset.behaviors {
            return Err(Error::Config(format!(
                "checkpoint behaviors {:?} do not match the dataset {:?}",
                ckpt.behaviors, dataset.behaviors
            )));
        }
        let mut model_cfg = cfg.model_config(&dataset.behaviors)?;
        model_cfg.embedding_dim = ckpt.params.embedding_dim();
        let graphs = dataset
            .behaviors
            .iter()
            .enumerate()
            .map(|(b, name)| {
                build_graph(name, &dataset.train[b], dataset.num_users, dataset.num_items)
            })
            .collect::<Result<Vec<_>>>()?;
        let global = build_global_graph(&dataset.train, dataset.num_users, dataset.num_items)?;
        let state = full_forward(&ckpt.params, &graphs, &global, &model_cfg)?;
        (state.final_user, state.final_item)
    };
    let val = evaluate(&finals_u, &finals_i, dataset, Split::Val, &cfg.eval_cutoffs);
    let test = evaluate(&finals_u, &finals_i, dataset, Split::Test, &cfg.eval_cutoffs);
    Ok((val, test))
}

pub struct AblationRow {
    pub variant: String,
    /// Mean test NDCG@5 per behavior over the configured seeds.
    pub ndcg5: Vec<f64>,
    /// Difference to the full model, per behavior.
    pub delta: Vec<f64>,
}

pub struct AblationReport {
    pub behaviors: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub table: String,
}

/// The ablation grid: removing CGF also removes GCE, which feeds on it.
pub fn ablation_variants() -> Vec<(&'static str, bool, bool, bool)> {
    vec![
        ("full", true, true, true),
        ("w/o GCE", true, false, true),
        ("w/o CPA", true, true, false),
        ("w/o CGF", false, false, true),
        ("w/o GCE&CPA", true, false, false),
        ("w/o GCE&CPA&CGF", false, false, false),
    ]
}

fn variant_slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Train every ablation variant with the same seed list and report test
/// NDCG@5 deltas against the full model.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<AblationReport> {
    cfg.validate()?;
    let behaviors = dataset.behaviors.clone();
    let mut rows: Vec<AblationRow> = Vec::new();
    for (name, cgf, gce, cpa) in ablation_variants() {
        let mut variant_cfg = cfg.clone();
        variant_cfg.enable_cgf = cgf;
        variant_cfg.enable_gce = gce;
        variant_cfg.enable_cpa = cpa;
        let mut sums = vec![0.0; behaviors.len()];
        let mut counts = vec![0usize; behaviors.len()];
        for &seed in &cfg.seeds {
            let dir = out_dir.join(variant_slug(name)).join(format!("seed_{seed}"));
            let result = train(&variant_cfg, dataset, &dir, seed)?;
            for b in 0..behaviors.len() {
                if let Some(v) = result.test_report.ndcg_at(b, 5) {
                    sums[b] += v;
                    counts[b] += 1;
                }
            }
        }
        let ndcg5: Vec<f64> = sums
            .iter()
            .zip(counts.iter())
            .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
            .collect();
        rows.push(AblationRow {
            variant: name.to_string(),
            ndcg5,
            delta: Vec::new(),
        });
    }
    let full = rows[0].ndcg5.clone();
    for row in &mut rows {
        row.delta = row.ndcg5.iter().zip(full.iter()).map(|(v, f)| v - f).collect();
    }

    let mut table = String::new();
    table.push_str(&format!("{:<18}", "variant"));
    for b in &behaviors {
        table.push_str(&format!(" {:>10} {:>10}", format!("{b}"), "delta"));
    }
    table.push('\n');
    for row in &rows {
        table.push_str(&format!("{:<18}", row.variant));
        for b in 0..behaviors.len() {
            table.push_str(&format!(" {:>10.4} {:>+10.4}", row.ndcg5[b], row.delta[b]));
        }
        table.push('\n');
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("ablate.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(AblationReport {
        behaviors,
        rows,
        table,
    })
}

pub struct SweepRow {
    pub value: f64,
    pub val_signal: f64,
    pub target_test_ndcg5: f64,
}

pub struct SweepReport {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    pub best_index: usize,
    pub table: String,
}

/// Grid over one hyperparameter; selection by the validation early-stopping
/// signal of the best checkpoint.
pub fn cmd_sweep(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: &Path) -> Result<SweepReport> {
    cfg.validate()?;
    let param = cfg
        .sweep_param
        .ok_or_else(|| Error::Config("sweep requires sweep_param".into()))?;
    if cfg.sweep_values.is_empty() {
        return Err(Error::Config("sweep requires sweep_values".into()));
    }
    let seed = cfg.seeds[0];
    let mut rows = Vec::new();
    for (idx, &value) in cfg.sweep_values.iter().enumerate() {
        let mut run_cfg = cfg.clone();
        match param {
            SweepParam::Lambda => run_cfg.lambda = value,
            SweepParam::Tau => run_cfg.tau = value,
            SweepParam::GlobalLayers => {
                let l = value.round();
                if l < 1.0 {
                    return Err(Error::Config(format!("global_layers value {value} invalid")));
                }
                run_cfg.global_layers = l as usize;
            }
            SweepParam::Lr => run_cfg.lr = value,
        }
        run_cfg.validate()?;
        let dir = out_dir.join(format!("sweep_{}_{idx}", param.name()));
        let result = train(&run_cfg, dataset, &dir, seed)?;
        let target = dataset.behaviors.len() - 1;
        rows.push(SweepRow {
            value,
            val_signal: result.best_signal,
            target_test_ndcg5: result.test_report.ndcg_at(target, 5).unwrap_or(0.0),
        });
    }
    let best_index = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.val_signal.partial_cmp(&b.1.val_signal).unwrap())
        .map(|(i, _)| i)
        .unwrap();

    let mut table = String::new();
    table.push_str(&format!(
        "{:<14} {:>12} {:>18} {:>6}\n",
        param.name(),
        "val_signal",
        "target_ndcg@5",
        "best"
    ));
    for (i, row) in rows.iter().enumerate() {
        table.push_str(&format!(
            "{:<14} {:>12.6} {:>18.6} {:>6}\n",
            row.value,
            row.val_signal,
            row.target_test_ndcg5,
            if i == best_index { "*" } else { "" }
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("sweep.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(SweepReport {
        param,
        rows,
        best_index,
        table,
    })
}

/// Train the configured baseline under the same split and eval protocol.
pub fn cmd_baseline(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
    seed: u64,
) -> Result<TrainResult> {
    if cfg.baseline == Baseline::None {
        return Err(Error::Config(
            "baseline requires baseline = \"mf_bpr\" or \"unified_lightgcn\"".into(),
        ));
    }
    train_baseline(cfg, dataset, out_dir, seed, cfg.baseline)
}

/// Reorder the dataset's behavior chain to the permuted auxiliaries (target
/// stays last) so positional layer assignment follows the new order.
pub fn permuted_dataset(dataset: &Dataset, aux_permutation: &[String]) -> Result<Dataset> {
    let target = dataset.behaviors.last().unwrap().clone();
    let auxiliaries: Vec<&String> = dataset.behaviors[..dataset.behaviors.len() - 1].iter().collect();
    if aux_permutation.len() != auxiliaries.len()
        || aux_permutation.iter().any(|b| !auxiliaries.contains(&b))
        || aux_permutation.contains(&target)
    {
        return Err(Error::Config(format!(
            "order_permutation {:?} must be a permutation of the auxiliary behaviors {:?} (target '{target}' stays last)",
            aux_permutation, auxiliaries
        )));
    }
    let mut chain: Vec<String> = aux_permutation.to_vec();
    chain.push(target);
    let reorder = |lists: &[Vec<(u32, u32)>]| -> Vec<Vec<(u32, u32)>> {
        chain
            .iter()
            .map(|name| {
                let idx = dataset.behaviors.iter().position(|b| b == name).unwrap();
                lists[idx].clone()
            })
            .collect()
    };
    Ok(Dataset {
        num_users: dataset.num_users,
        num_items: dataset.num_items,
        behaviors: chain.clone(),
        train: reorder(&dataset.train),
        val: reorder(&dataset.val),
        test: reorder(&dataset.test),
        user_ids: dataset.user_ids.clone(),
        item_ids: dataset.item_ids.clone(),
    })
}

/// Train with a permuted auxiliary-behavior order.
pub fn cmd_order(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
    seed: u64,
) -> Result<TrainResult> {
    cfg.validate()?;
    if cfg.order_permutation.is_empty() {
        return Err(Error::Config("order requires order_permutation".into()));
    }
    let permuted = permuted_dataset(dataset, &cfg.order_permutation)?;
    let mut run_cfg = cfg.clone();
    run_cfg.behaviors = permuted.behaviors.clone();
    train(&run_cfg, &permuted, out_dir, seed)
}

/// Verify gradients on the tiny instance across both cascading-input modes,
/// both gate-sharing settings, and every ablation combination.
pub fn cmd_gradcheck(seed: u64) -> Result<String> {
    use crate::model::CascadeInput;
    let mut out = String::new();
    let mut all_passed = true;
    for mode in [CascadeInput::Accumulated, CascadeInput::Base] {
        for share in [false, true] {
            let opts = GradcheckOptions {
                seed,
                cascading_input_mode: mode,
                share_gce_gate: share,
                ..GradcheckOptions::default()
            };
            let report = gradcheck(&opts)?;
            out.push_str(&format!(
                "mode={} share_gce_gate={share} modules=all\n",
                match mode {
                    CascadeInput::Accumulated => "accumulated",
                    CascadeInput::Base => "base",
                }
            ));
            out.push_str(&report.render());
            out.push('\n');
            all_passed &= report.passed;
        }
    }
    for bits in 0..8u8 {
        let opts = GradcheckOptions {
            seed,
            enable_cgf: bits & 1 != 0,
            enable_gce: bits & 2 != 0,
            enable_cpa: bits & 4 != 0,
            ..GradcheckOptions::default()
        };
        let report = gradcheck(&opts)?;
        out.push_str(&format!(
            "mode=accumulated cgf={} gce={} cpa={}\n",
            opts.enable_cgf, opts.enable_gce, opts.enable_cpa
        ));
        out.push_str(&report.render());
        out.push('\n');
        all_passed &= report.passed;
    }
    if !all_passed {
        return Err(Error::GradcheckFailed(out));
    }
    Ok(out)
}
