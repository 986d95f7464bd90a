//! Flat INI-style run configuration.
//!
//! Every key lives in exactly one section. Keys may appear without a section
//! header, but a key under the wrong header, an unknown key, a repeated key or
//! a value of the wrong type is rejected with its line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use aoept_core::backbone::{BackboneConfig, PretrainConfig};
use aoept_core::collections::{RefineConfig, RefineMethod};
use aoept_core::dataset::{GenConfig, MissingKind, ModalitySpec};
use aoept_core::mcp::{Activation, BankConfig, McpMethod};
use aoept_core::tuner::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Everything a run depends on. Defaults form the reference synthetic
/// benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // [data]
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_pretrain: usize,
    pub num_classes: usize,
    pub modalities: Vec<String>,
    pub seq_len: Vec<usize>,
    pub vocab: Vec<usize>,
    pub purity: Vec<f64>,
    pub rho: f64,
    pub data_seed: u64,
    // [backbone]
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_wd: f64,
    pub backbone_seed: u64,
    // [collections]
    pub refine: RefineMethod,
    pub n_proto: usize,
    pub kmeans_iters: usize,
    pub window: usize,
    pub collection_seed: u64,
    // [prompt]
    pub method: McpMethod,
    pub prompt_len: usize,
    pub depth: usize,
    pub reduction: usize,
    pub activation: Activation,
    pub prompt_seed: u64,
    // [train]
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda_cr: f64,
    pub seeds: Vec<u64>,
    // [missing]
    pub eta_train: f64,
    pub eta_test: f64,
    pub kind: String,
    pub table_seeds: Vec<u64>,
    // [sweep]
    pub sweep_train_etas: Vec<f64>,
    pub sweep_test_eta: f64,
    pub sweep_tables: usize,
    // [run]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_train: 300,
            n_val: 100,
            n_test: 200,
            n_pretrain: 2000,
            num_classes: 4,
            modalities: vec!["text".into(), "image".into()],
            seq_len: vec![4, 4],
            vocab: vec![16, 16],
            purity: vec![0.5, 0.5],
            rho: 0.9,
            data_seed: 17,
            layers: 4,
            d: 16,
            heads: 2,
            mlp_ratio: 4,
            pretrain_epochs: 10,
            pretrain_batch: 32,
            pretrain_lr: 3e-3,
            pretrain_wd: 1e-2,
            backbone_seed: 23,
            refine: RefineMethod::Kmeans,
            n_proto: 16,
            kmeans_iters: 300,
            window: 4,
            collection_seed: 5,
            method: McpMethod::Attention,
            prompt_len: 16,
            depth: 3,
            reduction: 4,
            activation: Activation::Gelu,
            prompt_seed: 11,
            lr: 1e-2,
            weight_decay: 2e-2,
            epochs: 20,
            batch_size: 32,
            tau: 0.1,
            lambda_cr: 1.0,
            seeds: vec![13, 14, 15],
            eta_train: 70.0,
            eta_test: 70.0,
            kind: "text".into(),
            table_seeds: vec![101, 202, 303],
            sweep_train_etas: vec![90.0, 70.0, 50.0, 30.0, 10.0],
            sweep_test_eta: 90.0,
            sweep_tables: 1,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "n_train", "n_val", "n_test", "n_pretrain", "num_classes", "modalities", "seq_len", "vocab",
            "purity", "rho", "data_seed",
        ],
    ),
    (
        "backbone",
        &[
            "layers", "d", "heads", "mlp_ratio", "pretrain_epochs", "pretrain_batch", "pretrain_lr",
            "pretrain_wd", "backbone_seed",
        ],
    ),
    ("collections", &["refine", "n_proto", "kmeans_iters", "window", "collection_seed"]),
    ("prompt", &["method", "prompt_len", "depth", "reduction", "activation", "prompt_seed"]),
    ("train", &["lr", "weight_decay", "epochs", "batch_size", "tau", "lambda_cr", "seeds"]),
    ("missing", &["eta_train", "eta_test", "kind", "table_seeds"]),
    ("sweep", &["sweep_train_etas", "sweep_test_eta", "sweep_tables"]),
    ("run", &["out_dir"]),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS
        .iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(s, _)| *s)
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse()
        .map_err(|_| format!("expected a {}, got {v:?}", std::any::type_name::<T>()))
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(x.trim())).collect()
}

fn eta(v: &str) -> Result<f64, String> {
    let e: f64 = num(v)?;
    if !(0.0..=100.0).contains(&e) {
        return Err(format!("missing rate {e} is outside [0, 100]"));
    }
    Ok(e)
}

fn positive(v: &str) -> Result<usize, String> {
    let n: usize = num(v)?;
    if n == 0 {
        return Err("must be at least 1".into());
    }
    Ok(n)
}

fn unit(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(format!("{x} is outside [0, 1]"));
    }
    Ok(x)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Gelu => "gelu",
        Activation::Identity => "identity",
    }
}

fn refine_name(r: RefineMethod) -> &'static str {
    match r {
        RefineMethod::Kmeans => "kmeans",
        RefineMethod::Pooling => "pooling",
    }
}

impl RunConfig {
    /// Sets one key from its textual value, checking type and range.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "n_train" => self.n_train = positive(v)?,
            "n_val" => self.n_val = positive(v)?,
            "n_test" => self.n_test = positive(v)?,
            "n_pretrain" => self.n_pretrain = num(v)?,
            "num_classes" => self.num_classes = num(v)?,
            "modalities" => {
                self.modalities = v.split(',').map(|s| s.trim().to_string()).collect();
                if self.modalities.iter().any(|m| m.is_empty()) {
                    return Err("empty modality name".into());
                }
            }
            "seq_len" => self.seq_len = list(v)?,
            "vocab" => self.vocab = list(v)?,
            "purity" => {
                self.purity = list(v)?;
                if self.purity.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err("purity values must lie in [0, 1]".into());
                }
            }
            "rho" => self.rho = unit(v)?,
            "data_seed" => self.data_seed = num(v)?,
            "layers" => self.layers = positive(v)?,
            "d" => self.d = positive(v)?,
            "heads" => self.heads = positive(v)?,
            "mlp_ratio" => self.mlp_ratio = positive(v)?,
            "pretrain_epochs" => self.pretrain_epochs = positive(v)?,
            "pretrain_batch" => self.pretrain_batch = positive(v)?,
            "pretrain_lr" => self.pretrain_lr = num(v)?,
            "pretrain_wd" => self.pretrain_wd = num(v)?,
            "backbone_seed" => self.backbone_seed = num(v)?,
            "refine" => {
                self.refine = match v {
                    "kmeans" => RefineMethod::Kmeans,
                    "pooling" => RefineMethod::Pooling,
                    _ => return Err(format!("refine must be kmeans or pooling, got {v:?}")),
                }
            }
            "n_proto" => self.n_proto = positive(v)?,
            "kmeans_iters" => self.kmeans_iters = positive(v)?,
            "window" => self.window = positive(v)?,
            "collection_seed" => self.collection_seed = num(v)?,
            "method" => self.method = McpMethod::parse(v).map_err(|e| e.to_string())?,
            "prompt_len" => self.prompt_len = positive(v)?,
            "depth" => self.depth = positive(v)?,
            "reduction" => self.reduction = positive(v)?,
            "activation" => {
                self.activation = match v {
                    "gelu" => Activation::Gelu,
                    "identity" => Activation::Identity,
                    _ => return Err(format!("activation must be gelu or identity, got {v:?}")),
                }
            }
            "prompt_seed" => self.prompt_seed = num(v)?,
            "lr" => self.lr = num(v)?,
            "weight_decay" => self.weight_decay = num(v)?,
            "epochs" => self.epochs = positive(v)?,
            "batch_size" => self.batch_size = positive(v)?,
            "tau" => self.tau = num(v)?,
            "lambda_cr" => self.lambda_cr = num(v)?,
            "seeds" => self.seeds = list(v)?,
            "eta_train" => self.eta_train = eta(v)?,
            "eta_test" => self.eta_test = eta(v)?,
            "kind" => self.kind = v.to_string(),
            "table_seeds" => self.table_seeds = list(v)?,
            "sweep_train_etas" => {
                self.sweep_train_etas = v.split(',').map(|x| eta(x.trim())).collect::<Result<_, _>>()?
            }
            "sweep_test_eta" => self.sweep_test_eta = eta(v)?,
            "sweep_tables" => self.sweep_tables = positive(v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "n_test" => self.n_test.to_string(),
            "n_pretrain" => self.n_pretrain.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "modalities" => self.modalities.join(","),
            "seq_len" => join(&self.seq_len),
            "vocab" => join(&self.vocab),
            "purity" => join(&self.purity),
            "rho" => self.rho.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "layers" => self.layers.to_string(),
            "d" => self.d.to_string(),
            "heads" => self.heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "pretrain_batch" => self.pretrain_batch.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "pretrain_wd" => self.pretrain_wd.to_string(),
            "backbone_seed" => self.backbone_seed.to_string(),
            "refine" => refine_name(self.refine).into(),
            "n_proto" => self.n_proto.to_string(),
            "kmeans_iters" => self.kmeans_iters.to_string(),
            "window" => self.window.to_string(),
            "collection_seed" => self.collection_seed.to_string(),
            "method" => self.method.name().into(),
            "prompt_len" => self.prompt_len.to_string(),
            "depth" => self.depth.to_string(),
            "reduction" => self.reduction.to_string(),
            "activation" => activation_name(self.activation).into(),
            "prompt_seed" => self.prompt_seed.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "tau" => self.tau.to_string(),
            "lambda_cr" => self.lambda_cr.to_string(),
            "seeds" => join(&self.seeds),
            "eta_train" => self.eta_train.to_string(),
            "eta_test" => self.eta_test.to_string(),
            "kind" => self.kind.clone(),
            "table_seeds" => join(&self.table_seeds),
            "sweep_train_etas" => join(&self.sweep_train_etas),
            "sweep_test_eta" => self.sweep_test_eta.to_string(),
            "sweep_tables" => self.sweep_tables.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("key table and accessors disagree on {key}"),
        }
    }

    /// Parses config text; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| ConfigError::Line { line, msg };
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
                continue;
            }
            if let Some(name) = t.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header {t:?}")))?
                    .trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = t
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {t:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let home = section_of(key).ok_or_else(|| err(format!("unknown key {key:?}")))?;
            if let Some(s) = &section {
                if s != home {
                    return Err(err(format!("key {key:?} belongs in [{home}], not [{s}]")));
                }
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key {key:?} is set twice")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        RunConfig::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    /// Every key, grouped by section, in a form [`RunConfig::parse`] reads
    /// back to an identical value.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        for (i, (section, keys)) in SECTIONS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            for key in *keys {
                let _ = writeln!(out, "{key} = {}", self.get(key));
            }
        }
        out
    }

    /// Cross-field checks that a single line cannot catch.
    pub fn validate(&self) -> Result<(), String> {
        let k = self.modalities.len();
        if k < 2 {
            return Err("at least two modalities are required".into());
        }
        for (name, n) in [("seq_len", self.seq_len.len()), ("vocab", self.vocab.len()), ("purity", self.purity.len())] {
            if n != k {
                return Err(format!("{name} has {n} entries for {k} modalities"));
            }
        }
        if self.seeds.is_empty() || self.table_seeds.is_empty() {
            return Err("seeds and table_seeds need at least one entry".into());
        }
        if self.sweep_train_etas.is_empty() {
            return Err("sweep_train_etas needs at least one entry".into());
        }
        if self.sweep_tables > self.table_seeds.len() {
            return Err(format!(
                "sweep_tables = {} exceeds the {} table seeds",
                self.sweep_tables,
                self.table_seeds.len()
            ));
        }
        self.missing_kind().map_err(|e| e.to_string())?;
        self.gen_config().validate().map_err(|e| e.to_string())?;
        self.backbone_config().validate().map_err(|e| e.to_string())?;
        self.train_config(self.seeds[0]).validate().map_err(|e| e.to_string())?;
        if self.depth > self.layers {
            return Err(format!("prompt depth {} exceeds {} layers", self.depth, self.layers));
        }
        Ok(())
    }

    pub fn modality_specs(&self) -> Vec<ModalitySpec> {
        self.modalities
            .iter()
            .zip(&self.seq_len)
            .zip(&self.vocab)
            .map(|((name, &seq_len), &vocab)| ModalitySpec {
                name: name.clone(),
                seq_len,
                vocab,
            })
            .collect()
    }

    pub fn missing_kind(&self) -> aoept_core::Result<MissingKind> {
        MissingKind::parse(&self.kind, &self.modality_specs())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            num_classes: self.num_classes,
            modalities: self.modality_specs(),
            rho: self.rho,
            purity: self.purity.clone(),
            n_pretrain: self.n_pretrain,
            seed: self.data_seed,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            d: self.d,
            heads: self.heads,
            modalities: self.modality_specs(),
            num_classes: self.num_classes,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            weight_decay: self.pretrain_wd,
            seed: self.backbone_seed,
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            method: self.refine,
            n_proto: self.n_proto,
            iters: self.kmeans_iters,
            window: self.window,
            seed: self.collection_seed,
        }
    }

    /// Bank settings for the run trained with `seed`.
    pub fn bank_config(&self, seed: u64) -> BankConfig {
        BankConfig {
            prompt_len: self.prompt_len,
            depth: self.depth,
            reduction: self.reduction,
            activation: self.activation,
            seed: aoept_core::seed::derive(self.prompt_seed, &format!("run-{seed}")),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            tau: self.tau,
            lambda_cr: self.lambda_cr,
            seed,
        }
    }
}
