//! Training engines: the full cascading model and the two sanity baselines,
//! with validation-driven early stopping, best-checkpoint tracking, and
//! bit-exact resume.
//!
//! Runs are deterministic by construction for a fixed seed: batch RNG draws
//! are sequential, reductions happen in a fixed order, and row-parallel work
//! never crosses rows. Logs contain no wall-clock data, so two identical runs
//! produce byte-identical logs.

use std::fs;
use std::io::{BufWriter, Read as _, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Baseline, ExperimentConfig};
use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{early_stop_signal, evaluate, MetricReport};
use crate::graph::{
    build_global_graph, build_graph, propagate_items, propagate_users, BehaviorGraph,
};
use crate::mat::{dot, Mat};
use crate::model::{
    full_forward, init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelParams,
};
use crate::objective::{bpr_grad_coeff, bpr_loss_on, reg_term, total_loss, LossBreakdown};
use crate::optim::{adam_step, backward, sample_batch, AdamState, Gradients, TrainIndex};

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_signal: f64,
    /// Validation early-stopping signal per epoch of this invocation.
    pub val_signal_history: Vec<f64>,
    pub val_report: MetricReport,
    pub test_report: MetricReport,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

impl TrainResult {
    /// Test NDCG@5 of the target behavior, the headline number.
    pub fn target_test_ndcg5(&self) -> Option<f64> {
        self.test_report.ndcg_at(self.test_report.behaviors.len() - 1, 5)
    }
}

struct LogWriter {
    w: BufWriter<fs::File>,
    path: PathBuf,
}

impl LogWriter {
    fn create(path: &Path, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LogWriter {
            w: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_header(
    log: &mut LogWriter,
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
    kind: &str,
) -> Result<()> {
    log.line(&format!("run={kind} seed={seed}"))?;
    for l in cfg.echo_lines() {
        log.line(&l)?;
    }
    log.line(&format!(
        "dataset.num_users={} dataset.num_items={}",
        dataset.num_users, dataset.num_items
    ))?;
    for (b, name) in dataset.behaviors.iter().enumerate() {
        log.line(&format!(
            "dataset.{name}.train={} dataset.{name}.val={} dataset.{name}.test={}",
            dataset.train[b].len(),
            dataset.val[b].len(),
            dataset.test[b].len()
        ))?;
    }
    Ok(())
}

fn log_epoch(
    log: &mut LogWriter,
    epoch: usize,
    mean: &LossBreakdown,
    behaviors: &[String],
    report: &MetricReport,
    signal: f64,
) -> Result<()> {
    let bpr: Vec<String> = behaviors
        .iter()
        .zip(mean.bpr.iter())
        .map(|(name, v)| format!("loss.bpr.{name}={v}"))
        .collect();
    log.line(&format!(
        "epoch={epoch} loss.total={} {} loss.cl_user={} loss.cl_item={} loss.reg={}",
        mean.total,
        bpr.join(" "),
        mean.cl_user,
        mean.cl_item,
        mean.reg
    ))?;
    for l in report.machine_lines() {
        log.line(&format!("epoch={epoch} {l}"))?;
    }
    log.line(&format!("epoch={epoch} val.signal={signal}"))?;
    Ok(())
}

fn steps_per_epoch(dataset: &Dataset, batch_size: usize) -> usize {
    let max_edges = dataset.train.iter().map(Vec::len).max().unwrap_or(0);
    max_edges.div_ceil(batch_size).max(1)
}

// --- resumable trainer state ------------------------------------------------

const STATE_MAGIC: &[u8; 4] = b"BGTS";
const STATE_VERSION: u32 = 1;

struct TrainerState {
    seed: u64,
    epoch: u64,
    best_epoch: u64,
    since_improvement: u64,
    best_signal: f64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: u128,
    params: ModelParams,
    adam: AdamState,
}

impl TrainerState {
    fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.best_epoch.to_le_bytes());
        buf.extend_from_slice(&self.since_improvement.to_le_bytes());
        buf.extend_from_slice(&self.best_signal.to_le_bytes());
        buf.extend_from_slice(&self.rng_seed);
        buf.extend_from_slice(&self.rng_stream.to_le_bytes());
        buf.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        let dims = [
            self.params.num_users() as u64,
            self.params.num_items() as u64,
            self.params.embedding_dim() as u64,
            self.params.num_behaviors() as u64,
        ];
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for tensor in self.params.tensors() {
            for v in tensor {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let adam = self.adam.to_bytes();
        buf.extend_from_slice(&(adam.len() as u64).to_le_bytes());
        buf.extend_from_slice(&adam);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint("truncated trainer state".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != STATE_MAGIC {
            return Err(Error::Checkpoint("bad trainer-state magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != STATE_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported trainer-state version {version}"
            )));
        }
        let read_u64 =
            |pos: &mut usize| -> Result<u64> { Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap())) };
        let seed = read_u64(&mut pos)?;
        let epoch = read_u64(&mut pos)?;
        let best_epoch = read_u64(&mut pos)?;
        let since_improvement = read_u64(&mut pos)?;
        let best_signal = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let rng_seed: [u8; 32] = take(&mut pos, 32)?.try_into().unwrap();
        let rng_stream = read_u64(&mut pos)?;
        let rng_word_pos = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());
        let m = read_u64(&mut pos)? as usize;
        let n = read_u64(&mut pos)? as usize;
        let d = read_u64(&mut pos)? as usize;
        let k = read_u64(&mut pos)? as usize;
        let mut params = ModelParams::zeros(m, n, d, k);
        for tensor in params.tensors_mut() {
            for v in tensor.iter_mut() {
                *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            }
        }
        let adam_len = read_u64(&mut pos)? as usize;
        let adam = AdamState::from_bytes(take(&mut pos, adam_len)?)?;
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing trainer-state bytes".into()));
        }
        Ok(TrainerState {
            seed,
            epoch,
            best_epoch,
            since_improvement,
            best_signal,
            rng_seed,
            rng_stream,
            rng_word_pos,
            params,
            adam,
        })
    }
}

/// Train the full model on a prepared dataset. Evaluates validation metrics
/// every epoch, keeps the checkpoint with the best NDCG@5 sum, stops after
/// `patience` consecutive non-improving epochs, and leaves a resumable
/// trainer state next to the checkpoint.
pub fn train(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
    seed: u64,
) -> Result<TrainResult> {
    cfg.validate()?;
    if !cfg.behaviors.is_empty() && cfg.behaviors != dataset.behaviors {
        return Err(Error::Config(format!(
            "config behaviors {:?} do not match the prepared dataset {:?}",
            cfg.behaviors, dataset.behaviors
        )));
    }
    let model_cfg = cfg.model_config(&dataset.behaviors)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let graphs: Vec<BehaviorGraph> = dataset
        .behaviors
        .iter()
        .enumerate()
        .map(|(b, name)| build_graph(name, &dataset.train[b], dataset.num_users, dataset.num_items))
        .collect::<Result<_>>()?;
    let global = build_global_graph(&dataset.train, dataset.num_users, dataset.num_items)?;
    let index = TrainIndex::new(dataset);
    let lc = cfg.loss_config();

    let ckpt_path = out_dir.join("best.bgel");
    let state_path = out_dir.join("state.bin");
    let log_path = out_dir.join("train.log");

    let resume = match &cfg.resume_from {
        Some(dir) => Some(TrainerState::load(&dir.join("state.bin"))?),
        None => None,
    };
    let resuming = resume.is_some();
    let (mut params, mut adam, mut rng, start_epoch, mut best_signal, mut best_epoch, mut since) =
        match resume {
            Some(ts) => {
                if ts.seed != seed {
                    return Err(Error::Config(format!(
                        "resume state was written for seed {}, not {seed}",
                        ts.seed
                    )));
                }
                let mut rng = ChaCha8Rng::from_seed(ts.rng_seed);
                rng.set_stream(ts.rng_stream);
                rng.set_word_pos(ts.rng_word_pos);
                (
                    ts.params,
                    ts.adam,
                    rng,
                    ts.epoch as usize,
                    ts.best_signal,
                    ts.best_epoch as usize,
                    ts.since_improvement as usize,
                )
            }
            None => {
                let params = init_params(&model_cfg, dataset.num_users, dataset.num_items, seed);
                let adam = AdamState::new(&params, cfg.lr);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1);
                (params, adam, rng, 0, f64::NEG_INFINITY, 0, 0)
            }
        };

    let mut log = LogWriter::create(&log_path, resuming)?;
    if !resuming {
        write_header(&mut log, cfg, dataset, seed, "train")?;
    } else {
        log.line(&format!("resume epoch={start_epoch}"))?;
    }

    let steps = steps_per_epoch(dataset, cfg.batch_size);
    let mut epochs_run = start_epoch;
    let mut val_signal_history = Vec::new();
    let k_total = dataset.behaviors.len();

    for epoch in (start_epoch + 1)..=cfg.max_epochs {
        let mut sum = LossBreakdown {
            bpr: vec![0.0; k_total],
            cl_user: 0.0,
            cl_item: 0.0,
            reg: 0.0,
            total: 0.0,
        };
        for _ in 0..steps {
            let batch = sample_batch(&index, cfg.batch_size, &mut rng, cfg.sampling_mode);
            let diverge = |e: Error, log: &mut LogWriter| -> Error {
                let _ = log.line(&format!("diverged epoch={epoch} detail={e}"));
                let _ = log.flush();
                Error::Diverged { epoch }
            };
            let state = match full_forward(&params, &graphs, &global, &model_cfg) {
                Ok(s) => s,
                Err(e) => return Err(diverge(e, &mut log)),
            };
            let lb = match total_loss(&state, &params, &batch, &lc) {
                Ok(l) => l,
                Err(e) => return Err(diverge(e, &mut log)),
            };
            let grads = backward(&state, &params, &graphs, &global, &batch, &lc)?;
            adam_step(&mut params, &grads, &mut adam);
            for (a, b) in sum.bpr.iter_mut().zip(lb.bpr.iter()) {
                *a += b;
            }
            sum.cl_user += lb.cl_user;
            sum.cl_item += lb.cl_item;
            sum.reg += lb.reg;
            sum.total += lb.total;
        }
        let inv = 1.0 / steps as f64;
        let mean = LossBreakdown {
            bpr: sum.bpr.iter().map(|v| v * inv).collect(),
            cl_user: sum.cl_user * inv,
            cl_item: sum.cl_item * inv,
            reg: sum.reg * inv,
            total: sum.total * inv,
        };

        let state = match full_forward(&params, &graphs, &global, &model_cfg) {
            Ok(s) => s,
            Err(e) => {
                let _ = log.line(&format!("diverged epoch={epoch} detail={e}"));
                let _ = log.flush();
                return Err(Error::Diverged { epoch });
            }
        };
        let report = evaluate(
            &state.final_user,
            &state.final_item,
            dataset,
            Split::Val,
            &cfg.eval_cutoffs,
        );
        let signal = early_stop_signal(&report);
        log_epoch(&mut log, epoch, &mean, &dataset.behaviors, &report, signal)?;
        epochs_run = epoch;
        val_signal_history.push(signal);

        if signal > best_signal {
            best_signal = signal;
            best_epoch = epoch;
            since = 0;
            save_checkpoint(&params, &dataset.behaviors, &ckpt_path)?;
        } else {
            since += 1;
        }

        TrainerState {
            seed,
            epoch: epoch as u64,
            best_epoch: best_epoch as u64,
            since_improvement: since as u64,
            best_signal,
            rng_seed: rng.get_seed(),
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
            params: params.clone(),
            adam: adam.clone(),
        }
        .save(&state_path)?;
        log.flush()?;

        if since >= cfg.patience {
            log.line(&format!("early_stop epoch={epoch} best_epoch={best_epoch}"))?;
            break;
        }
    }

    // final reports come from the persisted best checkpoint
    let best = load_checkpoint(&ckpt_path)?;
    let state = full_forward(&best.params, &graphs, &global, &model_cfg)?;
    let val_report = evaluate(
        &state.final_user,
        &state.final_item,
        dataset,
        Split::Val,
        &cfg.eval_cutoffs,
    );
    let test_report = evaluate(
        &state.final_user,
        &state.final_item,
        dataset,
        Split::Test,
        &cfg.eval_cutoffs,
    );
    log.line(&format!("final best_epoch={best_epoch} best_signal={best_signal}"))?;
    for l in val_report.machine_lines() {
        log.line(&format!("final val.{l}"))?;
    }
    for l in test_report.machine_lines() {
        log.line(&format!("final test.{l}"))?;
    }
    log.flush()?;

    Ok(TrainResult {
        seed,
        epochs_run,
        best_epoch,
        best_signal,
        val_signal_history,
        val_report,
        test_report,
        checkpoint_path: ckpt_path,
        log_path,
    })
}

// --- baselines ---------------------------------------------------------------

/// MF-BPR and unified-LightGCN trainers: one pooled behavior graph, shared
/// embeddings scored for every behavior, BPR + regularization only.
pub fn train_baseline(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
    seed: u64,
    kind: Baseline,
) -> Result<TrainResult> {
    cfg.validate()?;
    let layers = match kind {
        Baseline::MfBpr => 0,
        Baseline::UnifiedLightgcn => cfg.global_layers,
        Baseline::None => return Err(Error::Config("baseline selector is 'none'".into())),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // pooled train edges: behaviors mixed without distinction
    let mut union: Vec<(u32, u32)> = dataset.train.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    let graph = build_graph("pooled", &union, dataset.num_users, dataset.num_items)?;
    let pooled_ds = Dataset {
        num_users: dataset.num_users,
        num_items: dataset.num_items,
        behaviors: vec!["pooled".into()],
        train: vec![union],
        val: vec![Vec::new()],
        test: vec![Vec::new()],
        user_ids: dataset.user_ids.clone(),
        item_ids: dataset.item_ids.clone(),
    };
    let index = TrainIndex::new(&pooled_ds);

    let mut params = {
        let mc = ModelConfig {
            embedding_dim: cfg.embedding_dim,
            behaviors: vec!["pooled".into()],
            layers_per_behavior: vec![1],
            global_layers: 1,
            cascading_input_mode: cfg.cascading_input_mode,
            share_gce_gate: false,
            enable_cgf: false,
            enable_gce: false,
            enable_cpa: false,
            norm_epsilon: cfg.norm_epsilon,
        };
        init_params(&mc, dataset.num_users, dataset.num_items, seed)
    };
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let kind_name = match kind {
        Baseline::MfBpr => "mf_bpr",
        Baseline::UnifiedLightgcn => "unified_lightgcn",
        Baseline::None => unreachable!(),
    };
    let ckpt_path = out_dir.join("best.bgel");
    let log_path = out_dir.join("train.log");
    let mut log = LogWriter::create(&log_path, false)?;
    write_header(&mut log, cfg, dataset, seed, kind_name)?;

    // L propagation layers, last layer out; L = 0 keeps the embeddings
    let forward = |params: &ModelParams| -> Result<(Mat, Mat)> {
        let mut u = params.user_emb.clone();
        let mut i = params.item_emb.clone();
        for l in 1..=layers {
            let nu = propagate_users(&graph, &i);
            let ni = propagate_items(&graph, &u);
            if !nu.is_finite() || !ni.is_finite() {
                return Err(Error::NonFinite(format!("baseline propagation layer {l}")));
            }
            u = nu;
            i = ni;
        }
        Ok((u, i))
    };

    let steps = steps_per_epoch(&pooled_ds, cfg.batch_size);
    let k_total = dataset.behaviors.len();
    let mut best_signal = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut since = 0usize;
    let mut epochs_run = 0usize;
    let mut val_signal_history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut sum_bpr = 0.0;
        let mut sum_reg = 0.0;
        for _ in 0..steps {
            let batch = sample_batch(&index, cfg.batch_size, &mut rng, cfg.sampling_mode);
            let (fu, fi) = match forward(&params) {
                Ok(x) => x,
                Err(e) => {
                    let _ = log.line(&format!("diverged epoch={epoch} detail={e}"));
                    let _ = log.flush();
                    return Err(Error::Diverged { epoch });
                }
            };
            let triples = &batch.triples[0];
            let loss = bpr_loss_on(&fu, &fi, triples);
            let reg = reg_term(&params, &batch);
            if !loss.is_finite() || !reg.is_finite() {
                let _ = log.line(&format!("diverged epoch={epoch} detail=non-finite loss"));
                let _ = log.flush();
                return Err(Error::Diverged { epoch });
            }

            // gradients: BPR on the propagated embeddings, then the adjoint
            // propagation chain, plus batch-row regularization
            let mut grads = Gradients {
                values: ModelParams::zeros(
                    params.num_users(),
                    params.num_items(),
                    params.embedding_dim(),
                    1,
                ),
                user_touched: vec![false; params.num_users()],
                item_touched: vec![false; params.num_items()],
            };
            let d = params.embedding_dim();
            let mut dfu = Mat::zeros(params.num_users(), d);
            let mut dfi = Mat::zeros(params.num_items(), d);
            for &(u, i, j) in triples {
                let (u, i, j) = (u as usize, i as usize, j as usize);
                let eu = fu.row(u);
                let coef = bpr_grad_coeff(dot(eu, fi.row(i)) - dot(eu, fi.row(j)));
                for c in 0..d {
                    dfu.row_mut(u)[c] += coef * (fi.row(i)[c] - fi.row(j)[c]);
                    dfi.row_mut(i)[c] += coef * eu[c];
                    dfi.row_mut(j)[c] -= coef * eu[c];
                }
            }
            for _ in 0..layers {
                let du_prev = propagate_users(&graph, &dfi);
                let di_prev = propagate_items(&graph, &dfu);
                dfu = du_prev;
                dfi = di_prev;
            }
            grads.values.user_emb.add_assign(&dfu);
            grads.values.item_emb.add_assign(&dfi);
            if cfg.beta != 0.0 && !triples.is_empty() {
                let scale = 2.0 * cfg.beta / triples.len() as f64;
                for &(u, i, j) in triples {
                    let (u, i, j) = (u as usize, i as usize, j as usize);
                    for c in 0..d {
                        grads.values.user_emb.row_mut(u)[c] += scale * params.user_emb.row(u)[c];
                        grads.values.item_emb.row_mut(i)[c] += scale * params.item_emb.row(i)[c];
                        grads.values.item_emb.row_mut(j)[c] += scale * params.item_emb.row(j)[c];
                    }
                }
            }
            for (r, t) in grads.user_touched.iter_mut().enumerate() {
                *t = grads.values.user_emb.row(r).iter().any(|&v| v != 0.0);
            }
            for (r, t) in grads.item_touched.iter_mut().enumerate() {
                *t = grads.values.item_emb.row(r).iter().any(|&v| v != 0.0);
            }
            adam_step(&mut params, &grads, &mut adam);
            sum_bpr += loss;
            sum_reg += reg;
        }

        let (fu, fi) = forward(&params)?;
        let finals_u: Vec<Mat> = (0..k_total).map(|_| fu.clone()).collect();
        let finals_i: Vec<Mat> = (0..k_total).map(|_| fi.clone()).collect();
        let report = evaluate(&finals_u, &finals_i, dataset, Split::Val, &cfg.eval_cutoffs);
        let signal = early_stop_signal(&report);
        let inv = 1.0 / steps as f64;
        log.line(&format!(
            "epoch={epoch} loss.total={} loss.bpr.pooled={} loss.reg={}",
            (sum_bpr + cfg.beta * sum_reg) * inv,
            sum_bpr * inv,
            sum_reg * inv
        ))?;
        for l in report.machine_lines() {
            log.line(&format!("epoch={epoch} {l}"))?;
        }
        log.line(&format!("epoch={epoch} val.signal={signal}"))?;
        log.flush()?;
        epochs_run = epoch;
        val_signal_history.push(signal);

        if signal > best_signal {
            best_signal = signal;
            best_epoch = epoch;
            since = 0;
            save_checkpoint(&params, &pooled_ds.behaviors, &ckpt_path)?;
        } else {
            since += 1;
        }
        if since >= cfg.patience {
            log.line(&format!("early_stop epoch={epoch} best_epoch={best_epoch}"))?;
            break;
        }
    }

    let best = load_checkpoint(&ckpt_path)?;
    let (fu, fi) = forward(&best.params)?;
    let finals_u: Vec<Mat> = (0..k_total).map(|_| fu.clone()).collect();
    let finals_i: Vec<Mat> = (0..k_total).map(|_| fi.clone()).collect();
    let val_report = evaluate(&finals_u, &finals_i, dataset, Split::Val, &cfg.eval_cutoffs);
    let test_report = evaluate(&finals_u, &finals_i, dataset, Split::Test, &cfg.eval_cutoffs);
    log.line(&format!("final best_epoch={best_epoch} best_signal={best_signal}"))?;
    for l in val_report.machine_lines() {
        log.line(&format!("final val.{l}"))?;
    }
    for l in test_report.machine_lines() {
        log.line(&format!("final test.{l}"))?;
    }
    log.flush()?;

    Ok(TrainResult {
        seed,
        epochs_run,
        best_epoch,
        best_signal,
        val_signal_history,
        val_report,
        test_report,
        checkpoint_path: ckpt_path,
        log_path,
    })
}
