//! Experiment configuration: a flat TOML document with hard errors on
//! unknown keys, plus the resolved-config echo that heads every run log.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::ColumnMap;
use crate::error::{Error, Result};
use crate::model::{CascadeInput, ModelConfig};
use crate::optim::SamplingMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    MfBpr,
    UnifiedLightgcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Tau,
    GlobalLayers,
    Lr,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
            SweepParam::GlobalLayers => "global_layers",
            SweepParam::Lr => "lr",
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // data
    pub raw_path: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
    pub behaviors: Vec<String>,
    pub user_col: String,
    pub item_col: String,
    pub behavior_col: String,
    pub time_col: String,
    pub delimiter: String,
    pub item_min_purchases: usize,
    pub user_min_purchases: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    // model
    pub embedding_dim: usize,
    /// Per-behavior propagation layers; omitted → position heuristic 1..K.
    pub layers: Option<Vec<usize>>,
    pub global_layers: usize,
    pub cascading_input_mode: CascadeInput,
    pub share_gce_gate: bool,
    pub enable_cgf: bool,
    pub enable_gce: bool,
    pub enable_cpa: bool,
    pub norm_epsilon: f64,
    // objective
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub cpa_full_pool: bool,
    pub sampling_mode: SamplingMode,
    // training
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub eval_cutoffs: Vec<usize>,
    pub baseline: Baseline,
    pub deterministic: bool,
    pub resume_from: Option<PathBuf>,
    // sweep / order experiments
    pub sweep_param: Option<SweepParam>,
    pub sweep_values: Vec<f64>,
    pub order_permutation: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            raw_path: None,
            dataset_dir: None,
            behaviors: Vec::new(),
            user_col: "user".into(),
            item_col: "item".into(),
            behavior_col: "behavior".into(),
            time_col: "timestamp".into(),
            delimiter: "\t".into(),
            item_min_purchases: 0,
            user_min_purchases: 0,
            train_frac: 0.8,
            val_frac: 0.1,
            embedding_dim: 100,
            layers: None,
            global_layers: 2,
            cascading_input_mode: CascadeInput::Accumulated,
            share_gce_gate: false,
            enable_cgf: true,
            enable_gce: true,
            enable_cpa: true,
            norm_epsilon: 1e-12,
            lambda: 0.1,
            beta: 1e-3,
            tau: 0.2,
            cpa_full_pool: false,
            sampling_mode: SamplingMode::UniformPerBehavior,
            lr: 1e-3,
            batch_size: 500,
            max_epochs: 1000,
            patience: 20,
            seeds: vec![1, 2, 3],
            eval_cutoffs: vec![5, 10, 15],
            baseline: Baseline::None,
            deterministic: false,
            resume_from: None,
            sweep_param: None,
            sweep_values: Vec::new(),
            order_permutation: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for name in &self.behaviors {
            if name.is_empty()
                || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Config(format!(
                    "behavior name '{name}' must be non-empty [A-Za-z0-9_-]"
                )));
            }
        }
        if self.delimiter.chars().count() != 1 {
            return Err(Error::Config("delimiter must be a single character".into()));
        }
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0)
        {
            return Err(Error::Config("split fractions out of range".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if let Some(layers) = &self.layers {
            if layers.contains(&0) {
                return Err(Error::Config("layer counts must be >= 1".into()));
            }
        }
        // global_layers = 0 is allowed here: the unified-lightgcn baseline
        // degenerates to MF-BPR at L = 0. The full model checks L >= 1 when
        // the ModelConfig is built.
        if self.lr <= 0.0 || self.lr.is_nan() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.tau <= 0.0 || self.tau.is_nan() {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.lambda < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("lambda and beta must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_cutoffs.is_empty() || self.eval_cutoffs.contains(&0) {
            return Err(Error::Config("eval_cutoffs must be positive".into()));
        }
        if !self.eval_cutoffs.contains(&5) {
            return Err(Error::Config(
                "eval_cutoffs must include 5 (the early-stopping signal uses NDCG@5)".into(),
            ));
        }
        Ok(())
    }

    pub fn column_map(&self) -> ColumnMap {
        ColumnMap {
            user: self.user_col.clone(),
            item: self.item_col.clone(),
            behavior: self.behavior_col.clone(),
            timestamp: self.time_col.clone(),
            delimiter: self.delimiter.chars().next().unwrap_or('\t'),
        }
    }

    /// Model configuration for a given behavior chain (normally the prepared
    /// dataset's). Layer counts fall back to the position heuristic.
    pub fn model_config(&self, behaviors: &[String]) -> Result<ModelConfig> {
        let k = behaviors.len();
        let layers = match &self.layers {
            Some(l) => {
                if l.len() != k {
                    return Err(Error::Config(format!(
                        "layers has {} entries for {k} behaviors",
                        l.len()
                    )));
                }
                l.clone()
            }
            None => ModelConfig::heuristic_layers(k),
        };
        let cfg = ModelConfig {
            embedding_dim: self.embedding_dim,
            behaviors: behaviors.to_vec(),
            layers_per_behavior: layers,
            global_layers: self.global_layers,
            cascading_input_mode: self.cascading_input_mode,
            share_gce_gate: self.share_gce_gate,
            enable_cgf: self.enable_cgf,
            enable_gce: self.enable_gce,
            enable_cpa: self.enable_cpa,
            norm_epsilon: self.norm_epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> crate::objective::LossConfig {
        crate::objective::LossConfig {
            lambda: self.lambda,
            beta: self.beta,
            tau: self.tau,
            cpa_full_pool: self.cpa_full_pool,
        }
    }

    /// Stable key=value lines echoed at the top of every run log. Two logs
    /// with identical echoes must describe identical runs.
    pub fn echo_lines(&self) -> Vec<String> {
        let opt_c = |v: &Option<PathBuf>| {
            v.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into())
        };
        let list = |v: &[String]| if v.is_empty() { "-".to_string() } else { v.join(",") };
        let mut out = Vec::new();
        out.push(format!("config.raw_path={}", opt_c(&self.raw_path)));
        out.push(format!("config.dataset_dir={}", opt_c(&self.dataset_dir)));
        out.push(format!("config.behaviors={}", list(&self.behaviors)));
        out.push(format!("config.delimiter={:?}", self.delimiter));
        out.push(format!("config.item_min_purchases={}", self.item_min_purchases));
        out.push(format!("config.user_min_purchases={}", self.user_min_purchases));
        out.push(format!("config.train_frac={}", self.train_frac));
        out.push(format!("config.val_frac={}", self.val_frac));
        out.push(format!("config.embedding_dim={}", self.embedding_dim));
        out.push(format!(
            "config.layers={}",
            self.layers
                .as_ref()
                .map(|l| l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                .unwrap_or_else(|| "heuristic".into())
        ));
        out.push(format!("config.global_layers={}", self.global_layers));
        out.push(format!(
            "config.cascading_input_mode={}",
            match self.cascading_input_mode {
                CascadeInput::Accumulated => "accumulated",
                CascadeInput::Base => "base",
            }
        ));
        out.push(format!("config.share_gce_gate={}", self.share_gce_gate));
        out.push(format!("config.enable_cgf={}", self.enable_cgf));
        out.push(format!("config.enable_gce={}", self.enable_gce));
        out.push(format!("config.enable_cpa={}", self.enable_cpa));
        out.push(format!("config.norm_epsilon={:e}", self.norm_epsilon));
        out.push(format!("config.lambda={}", self.lambda));
        out.push(format!("config.beta={}", self.beta));
        out.push(format!("config.tau={}", self.tau));
        out.push(format!("config.cpa_full_pool={}", self.cpa_full_pool));
        out.push(format!(
            "config.sampling_mode={}",
            match self.sampling_mode {
                SamplingMode::UniformPerBehavior => "uniform_per_behavior",
                SamplingMode::Proportional => "proportional",
            }
        ));
        out.push(format!("config.lr={}", self.lr));
        out.push(format!("config.batch_size={}", self.batch_size));
        out.push(format!("config.max_epochs={}", self.max_epochs));
        out.push(format!("config.patience={}", self.patience));
        out.push(format!(
            "config.seeds={}",
            self.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        ));
        out.push(format!(
            "config.eval_cutoffs={}",
            self.eval_cutoffs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        ));
        out.push(format!(
            "config.baseline={}",
            match self.baseline {
                Baseline::None => "none",
                Baseline::MfBpr => "mf_bpr",
                Baseline::UnifiedLightgcn => "unified_lightgcn",
            }
        ));
        out.push(format!("config.deterministic={}", self.deterministic));
        out.push(format!("config.resume_from={}", opt_c(&self.resume_from)));
        out
    }
}
