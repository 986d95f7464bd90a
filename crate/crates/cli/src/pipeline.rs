//! Run-directory stages shared by the `aoept` binary and the tests.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json  config.ini
//! data/{train,val,test,pretrain}.jsonl
//! tables/{split}_eta{η}_{kind}_t{i}.json
//! backbone/                       frozen weights + manifest with checksum
//! collections/eta{η}_{kind}_t{i}/ refined prototypes per training table
//! models/{scenario}/{tag}_seed{s}_table{i}/  bank, head, history.csv, report.json
//! report.json  nm2i_report.json  scaling.csv  summary.md  summary.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aoept_core::backbone::{pretrain_backbone, Backbone, PretrainReport};
use aoept_core::collections::CollectionSet;
use aoept_core::dataset::{
    build_missing_table, generate_synthetic, read_jsonl, write_jsonl, MissingKind, MissingTable, ModalitySpec,
    Sample,
};
use aoept_core::mcp::{BankKind, McpBank, McpMethod};
use aoept_core::nm2i::{nm2i_report, LayerNm2i, Nm2iReport};
use aoept_core::seed;
use aoept_core::tuner::{evaluate, train, EvalReport, PatternMetrics, PromptModel, TrainOutcome};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// An upstream stage has not produced what the current one needs.
#[derive(Debug, thiserror::Error)]
#[error("{what} not found at {path}; run `aoept {command}` first")]
pub struct MissingArtifact {
    pub what: String,
    pub path: PathBuf,
    pub command: String,
}

fn require(path: &Path, what: &str, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingArtifact {
            what: what.into(),
            path: path.to_path_buf(),
            command: command.into(),
        }
        .into())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Which model family a training run belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Aoept(McpMethod),
    /// MCPs inserted directly, without instance-aware gating.
    NoInst(McpMethod),
    /// MAPs-style random prompts, one set per missing pattern.
    Random,
    /// Frozen backbone plus the linear head, no prompts.
    LowerBound,
}

impl Variant {
    pub fn tag(self) -> String {
        match self {
            Variant::Aoept(m) => format!("aoept-{}", m.name()),
            Variant::NoInst(m) => format!("noinst-{}", m.name()),
            Variant::Random => "random".into(),
            Variant::LowerBound => "lower-bound".into(),
        }
    }

    fn bank_kind(self) -> BankKind {
        match self {
            Variant::Aoept(method) => BankKind::Mcp {
                method,
                instantiate: true,
            },
            Variant::NoInst(method) => BankKind::Mcp {
                method,
                instantiate: false,
            },
            Variant::Random => BankKind::Random,
            Variant::LowerBound => BankKind::Empty,
        }
    }

    fn needs_collections(self) -> bool {
        matches!(self, Variant::Aoept(_) | Variant::NoInst(_))
    }
}

/// Train and test missing protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub eta_train: f64,
    pub eta_test: f64,
    pub kind: String,
}

impl Scenario {
    pub fn label(&self) -> String {
        format!("train{}_test{}_{}", self.eta_train, self.eta_test, self.kind)
    }
}

/// Number of worker threads: `AOEPT_THREADS` if set, else the machine's.
pub fn thread_count() -> usize {
    std::env::var("AOEPT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_parallel<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(n: usize, f: F) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count().min(n.max(1)))
        .build()?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Run {
    /// Starts a run directory holding `cfg`.
    pub fn create(dir: &Path, cfg: RunConfig) -> Result<Run> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join("config.json"), &cfg)?;
        fs::write(dir.join("config.ini"), cfg.to_ini())?;
        Ok(Run {
            dir: dir.to_path_buf(),
            cfg,
        })
    }

    pub fn open(dir: &Path) -> Result<Run> {
        let path = dir.join("config.json");
        require(&path, "run configuration", "gen-data")?;
        let cfg: RunConfig = read_json(&path)?;
        cfg.validate().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(Run {
            dir: dir.to_path_buf(),
            cfg,
        })
    }

    pub fn modalities(&self) -> Vec<ModalitySpec> {
        self.cfg.modality_specs()
    }

    /// The scenario named by the configuration.
    pub fn scenario(&self) -> Scenario {
        Scenario {
            eta_train: self.cfg.eta_train,
            eta_test: self.cfg.eta_test,
            kind: self.cfg.kind.clone(),
        }
    }

    fn data_path(&self, split: &str) -> PathBuf {
        self.dir.join("data").join(format!("{split}.jsonl"))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let path = self.data_path(split.name());
        require(&path, "dataset", "gen-data")?;
        Ok(read_jsonl(&path, &self.modalities())?)
    }

    fn table_path(&self, split: Split, eta: f64, kind: &str, table: usize) -> PathBuf {
        self.dir
            .join("tables")
            .join(format!("{}_eta{eta}_{kind}_t{table}.json", split.name()))
    }

    /// The missing table for one split, created on first use and then read
    /// back so every stage sees the same assignment.
    pub fn table(&self, split: Split, eta: f64, kind: &str, table: usize) -> Result<MissingTable> {
        let mods = self.modalities();
        let path = self.table_path(split, eta, kind, table);
        if path.exists() {
            return Ok(MissingTable::load(&path, &mods)?);
        }
        let samples = self.load_split(split)?;
        let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
        let kind = MissingKind::parse(kind, &mods)?;
        let base = *self
            .cfg
            .table_seeds
            .get(table)
            .with_context(|| format!("no table seed for table {table}"))?;
        let t = build_missing_table(&ids, eta, kind, seed::derive(base, split.name()), mods.len())?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        // Jobs running in parallel may build the same table; the rename
        // keeps readers from seeing a partial file.
        let tmp = path.with_extension(format!("tmp{:?}", std::thread::current().id()).replace(['(', ')'], ""));
        t.save(&tmp, &mods)?;
        fs::rename(&tmp, &path)?;
        Ok(t)
    }

    /// A split with the table's missing patterns applied.
    pub fn masked(&self, split: Split, eta: f64, kind: &str, table: usize) -> Result<Vec<Sample>> {
        let raw = self.load_split(split)?;
        Ok(self.table(split, eta, kind, table)?.apply(&raw, &self.modalities()))
    }

    pub fn backbone_dir(&self) -> PathBuf {
        self.dir.join("backbone")
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        let dir = self.backbone_dir();
        require(&dir.join("manifest.json"), "frozen backbone", "pretrain")?;
        Ok(Backbone::load(&dir)?)
    }

    pub fn collections_dir(&self, eta: f64, kind: &str, table: usize) -> PathBuf {
        self.dir.join("collections").join(format!("eta{eta}_{kind}_t{table}"))
    }

    pub fn models_dir(&self, scenario: &Scenario) -> PathBuf {
        self.dir.join("models").join(scenario.label())
    }

    pub fn model_dir(&self, scenario: &Scenario, tag: &str, seed: u64, table: usize) -> PathBuf {
        self.models_dir(scenario).join(format!("{tag}_seed{seed}_table{table}"))
    }

    fn table_indices(&self, limit: Option<usize>) -> Vec<usize> {
        let n = self.cfg.table_seeds.len();
        (0..limit.unwrap_or(n).min(n)).collect()
    }
}

/// Draws the synthetic splits and writes them as JSONL.
pub fn gen_data(run: &Run) -> Result<()> {
    let splits = generate_synthetic(&run.cfg.gen_config())?;
    let mods = run.modalities();
    fs::create_dir_all(run.dir.join("data"))?;
    write_jsonl(&run.data_path("train"), &splits.train, &mods)?;
    write_jsonl(&run.data_path("val"), &splits.val, &mods)?;
    write_jsonl(&run.data_path("test"), &splits.test, &mods)?;
    write_jsonl(&run.data_path("pretrain"), splits.pretraining_corpus(), &mods)?;
    Ok(())
}

/// Pretrains and freezes the backbone on the complete pretraining corpus.
pub fn pretrain(run: &Run) -> Result<PretrainReport> {
    let path = run.data_path("pretrain");
    require(&path, "pretraining corpus", "gen-data")?;
    let corpus = read_jsonl(&path, &run.modalities())?;
    let (bb, report) = pretrain_backbone(run.cfg.backbone_config(), &corpus, &run.cfg.pretrain_config())?;
    bb.save(&run.backbone_dir())?;
    write_json(&run.backbone_dir().join("pretrain.json"), &report)?;
    Ok(report)
}

/// Builds and refines collections from each masked training table.
pub fn build_collections(run: &Run, eta: f64, kind: &str, tables: Option<usize>) -> Result<()> {
    let bb = run.load_backbone()?;
    let names = run.cfg.modalities.clone();
    let idx = run.table_indices(tables);
    let sets = run_parallel(idx.len(), |i| {
        let train = run.masked(Split::Train, eta, kind, idx[i])?;
        Ok(CollectionSet::build(&bb, &train, &run.cfg.refine_config())?)
    })?;
    for (i, set) in idx.iter().zip(sets) {
        set.save(&run.collections_dir(eta, kind, *i), &names)?;
    }
    Ok(())
}

/// One finished training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub tag: String,
    pub seed: u64,
    pub table: usize,
    pub outcome: TrainOutcome,
}

fn write_history(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut csv = String::from("epoch,loss_ce,loss_cr,val_acc\n");
    for r in &outcome.history {
        let _ = writeln!(csv, "{},{},{},{}", r.epoch, r.loss_ce, r.loss_cr, r.val_acc);
    }
    fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

/// Trains `variant` for every seed and table of the scenario.
pub fn train_variant(run: &Run, variant: Variant, scenario: &Scenario, tables: Option<usize>) -> Result<Vec<TrainRecord>> {
    let bb = run.load_backbone()?;
    let idx = run.table_indices(tables);
    if variant.needs_collections() {
        for &t in &idx {
            let dir = run.collections_dir(scenario.eta_train, &scenario.kind, t);
            require(
                &dir.join("manifest.json"),
                "refined collections",
                &format!("build-collections --eta {} --kind {}", scenario.eta_train, scenario.kind),
            )?;
        }
    }
    let jobs: Vec<(u64, usize)> = run
        .cfg
        .seeds
        .iter()
        .flat_map(|&s| idx.iter().map(move |&t| (s, t)))
        .collect();
    let tag = variant.tag();
    run_parallel(jobs.len(), |j| {
        let (s, t) = jobs[j];
        let train_set = run.masked(Split::Train, scenario.eta_train, &scenario.kind, t)?;
        let val_set = run.masked(Split::Val, scenario.eta_train, &scenario.kind, t)?;
        let coll = if variant.needs_collections() {
            Some(CollectionSet::load(&run.collections_dir(scenario.eta_train, &scenario.kind, t))?)
        } else {
            None
        };
        let bank = McpBank::new(
            variant.bank_kind(),
            run.cfg.bank_config(s),
            &run.cfg.modalities,
            run.cfg.d,
            coll.as_ref(),
        )?;
        let mut model = PromptModel::new(bank, run.cfg.num_classes);
        let outcome = train(&bb, &mut model, &train_set, &val_set, &run.cfg.train_config(s))?;
        let dir = run.model_dir(scenario, &tag, s, t);
        model.save(&dir)?;
        write_history(&dir.join("history.csv"), &outcome)?;
        let record = TrainRecord {
            tag: tag.clone(),
            seed: s,
            table: t,
            outcome,
        };
        write_json(&dir.join("train.json"), &record)?;
        Ok(record)
    })
}

/// Test metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub table: usize,
    pub report: EvalReport,
}

/// Per-model-family summary over seeds and tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tag: String,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub mean_macro_f1: f64,
    pub per_pattern: BTreeMap<String, PatternMetrics>,
    pub runs: Vec<RunResult>,
}

impl Aggregate {
    fn from_runs(tag: String, runs: Vec<RunResult>) -> Self {
        let n = runs.len().max(1) as f64;
        let accs: Vec<f64> = runs.iter().map(|r| r.report.accuracy).collect();
        let mut per_pattern: BTreeMap<String, PatternMetrics> = BTreeMap::new();
        for r in &runs {
            for (k, m) in &r.report.per_pattern {
                let e = per_pattern.entry(k.clone()).or_insert(PatternMetrics { n: 0, accuracy: 0.0 });
                e.accuracy += m.accuracy * m.n as f64;
                e.n += m.n;
            }
        }
        for m in per_pattern.values_mut() {
            m.accuracy /= m.n.max(1) as f64;
        }
        Aggregate {
            tag,
            mean_accuracy: accs.iter().sum::<f64>() / n,
            min_accuracy: accs.iter().copied().fold(f64::INFINITY, f64::min),
            max_accuracy: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_macro_f1: runs.iter().map(|r| r.report.macro_f1).sum::<f64>() / n,
            per_pattern,
            runs,
        }
    }

    /// Accuracy of a given seed and table, if that run exists.
    pub fn accuracy(&self, seed: u64, table: usize) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.seed == seed && r.table == table)
            .map(|r| r.report.accuracy)
    }
}

/// Scenario label → tag → summary.
pub type ReportFile = BTreeMap<String, BTreeMap<String, Aggregate>>;

struct ModelEntry {
    tag: String,
    seed: u64,
    table: usize,
    dir: PathBuf,
}

fn list_models(run: &Run, scenario: &Scenario) -> Result<Vec<ModelEntry>> {
    let dir = run.models_dir(scenario);
    require(&dir, "trained models", "train` or `aoept train-baseline")?;
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let entry = entry?;
        let path = entry.path();
        if !path.join("train.json").exists() {
            continue;
        }
        let record: TrainRecord = read_json(&path.join("train.json"))?;
        out.push(ModelEntry {
            tag: record.tag,
            seed: record.seed,
            table: record.table,
            dir: path,
        });
    }
    if out.is_empty() {
        return Err(MissingArtifact {
            what: "trained models".into(),
            path: dir,
            command: "train".into(),
        }
        .into());
    }
    out.sort_by(|a, b| (&a.tag, a.seed, a.table).cmp(&(&b.tag, b.seed, b.table)));
    Ok(out)
}

fn merge_file<T: Serialize + for<'de> Deserialize<'de>>(
    path: &Path,
    scenario: &Scenario,
    value: BTreeMap<String, T>,
) -> Result<()> {
    let mut all: BTreeMap<String, BTreeMap<String, T>> = if path.exists() {
        read_json(path)?
    } else {
        BTreeMap::new()
    };
    all.insert(scenario.label(), value);
    write_json(path, &all)
}

/// Evaluates every trained model of the scenario on its test table.
pub fn eval(run: &Run, scenario: &Scenario) -> Result<BTreeMap<String, Aggregate>> {
    let bb = run.load_backbone()?;
    let models = list_models(run, scenario)?;
    let results = run_parallel(models.len(), |i| {
        let m = &models[i];
        let model = PromptModel::load(&m.dir)?;
        let test = run.masked(Split::Test, scenario.eta_test, &scenario.kind, m.table)?;
        let report = evaluate(&bb, &model, &test)?;
        write_json(&m.dir.join("report.json"), &report)?;
        Ok(RunResult {
            seed: m.seed,
            table: m.table,
            report,
        })
    })?;
    let mut by_tag: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
    for (m, r) in models.iter().zip(results) {
        by_tag.entry(m.tag.clone()).or_default().push(r);
    }
    let summary: BTreeMap<String, Aggregate> = by_tag
        .into_iter()
        .map(|(tag, runs)| (tag.clone(), Aggregate::from_runs(tag, runs)))
        .collect();
    merge_file(&run.dir.join("report.json"), scenario, summary.clone())?;
    Ok(summary)
}

/// NM²I summary of one model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nm2iAggregate {
    pub model_tag: String,
    pub eta: f64,
    pub kind: String,
    /// Per layer, averaged over runs.
    pub per_layer: Vec<LayerNm2i>,
    pub per_modality: BTreeMap<String, Vec<LayerNm2i>>,
    pub mean: f64,
    pub skipped_count: usize,
    pub runs: Vec<Nm2iRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nm2iRun {
    pub seed: u64,
    pub table: usize,
    pub mean: f64,
}

fn mean_layers(reports: &[&Vec<LayerNm2i>]) -> Vec<LayerNm2i> {
    let n = reports.len().max(1) as f64;
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|l| {
            let avg = |f: fn(&LayerNm2i) -> f64| reports.iter().map(|r| f(&r[l])).sum::<f64>() / n;
            LayerNm2i {
                layer: first[l].layer,
                nm2i: avg(|x| x.nm2i),
                mi: avg(|x| x.mi),
                h_p: avg(|x| x.h_p),
                h_m: avg(|x| x.h_m),
                samples: reports.iter().map(|r| r[l].samples).sum(),
            }
        })
        .collect()
}

fn aggregate_nm2i(tag: String, runs: Vec<(u64, usize, Nm2iReport)>) -> Nm2iAggregate {
    let first = &runs[0].2;
    let per_layer = mean_layers(&runs.iter().map(|r| &r.2.per_layer).collect::<Vec<_>>());
    let mut per_modality = BTreeMap::new();
    for name in first.per_modality.keys() {
        let layers: Vec<&Vec<LayerNm2i>> = runs.iter().filter_map(|r| r.2.per_modality.get(name)).collect();
        per_modality.insert(name.clone(), mean_layers(&layers));
    }
    Nm2iAggregate {
        model_tag: tag,
        eta: first.eta,
        kind: first.kind.clone(),
        mean: runs.iter().map(|r| r.2.mean).sum::<f64>() / runs.len() as f64,
        skipped_count: runs.iter().map(|r| r.2.skipped_count).sum(),
        per_layer,
        per_modality,
        runs: runs
            .iter()
            .map(|(seed, table, r)| Nm2iRun {
                seed: *seed,
                table: *table,
                mean: r.mean,
            })
            .collect(),
    }
}

/// NM²I of every prompted model of the scenario on its test table.
pub fn nm2i(run: &Run, scenario: &Scenario) -> Result<BTreeMap<String, Nm2iAggregate>> {
    let bb = run.load_backbone()?;
    let models: Vec<ModelEntry> = list_models(run, scenario)?
        .into_iter()
        .filter(|m| m.tag != Variant::LowerBound.tag())
        .collect();
    let raw = run.load_split(Split::Test)?;
    let reports = run_parallel(models.len(), |i| {
        let m = &models[i];
        let model = PromptModel::load(&m.dir)?;
        let table = run.table(Split::Test, scenario.eta_test, &scenario.kind, m.table)?;
        let report = nm2i_report(&bb, &model, &raw, &table, &m.tag)?;
        write_json(&m.dir.join("nm2i.json"), &report)?;
        Ok(report)
    })?;
    let mut by_tag: BTreeMap<String, Vec<(u64, usize, Nm2iReport)>> = BTreeMap::new();
    for (m, r) in models.iter().zip(reports) {
        by_tag.entry(m.tag.clone()).or_default().push((m.seed, m.table, r));
    }
    let summary: BTreeMap<String, Nm2iAggregate> = by_tag
        .into_iter()
        .map(|(tag, runs)| (tag.clone(), aggregate_nm2i(tag, runs)))
        .collect();
    merge_file(&run.dir.join("nm2i_report.json"), scenario, summary.clone())?;
    Ok(summary)
}

/// One row of the scaling sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub train_eta: f64,
    pub test_eta: f64,
    pub tag: String,
    pub seed: u64,
    pub table: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Trains AOEPT and the random-prompt baseline at every sweep training rate
/// and tests them at the fixed sweep test rate.
pub fn scaling_sweep(run: &Run) -> Result<Vec<SweepRow>> {
    let kind = run.cfg.kind.clone();
    let tables = Some(run.cfg.sweep_tables);
    let mut rows = Vec::new();
    for &eta in &run.cfg.sweep_train_etas {
        let scenario = Scenario {
            eta_train: eta,
            eta_test: run.cfg.sweep_test_eta,
            kind: kind.clone(),
        };
        build_collections(run, eta, &kind, tables)?;
        for variant in [Variant::Aoept(run.cfg.method), Variant::Random] {
            train_variant(run, variant, &scenario, tables)?;
        }
        let summary = eval(run, &scenario)?;
        for agg in summary.values() {
            for r in &agg.runs {
                rows.push(SweepRow {
                    train_eta: eta,
                    test_eta: scenario.eta_test,
                    tag: agg.tag.clone(),
                    seed: r.seed,
                    table: r.table,
                    accuracy: r.report.accuracy,
                    macro_f1: r.report.macro_f1,
                });
            }
        }
    }
    let mut csv = String::from("train_eta,test_eta,tag,seed,table,accuracy,macro_f1\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.train_eta, r.test_eta, r.tag, r.seed, r.table, r.accuracy, r.macro_f1
        );
    }
    fs::write(run.dir.join("scaling.csv"), csv)?;
    Ok(rows)
}

/// Reads `scaling.csv` back.
pub fn read_sweep(run: &Run) -> Result<Vec<SweepRow>> {
    let path = run.dir.join("scaling.csv");
    require(&path, "scaling sweep", "scaling-sweep")?;
    let text = fs::read_to_string(&path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                bail!("{}: malformed row {l:?}", path.display());
            }
            Ok(SweepRow {
                train_eta: f[0].parse()?,
                test_eta: f[1].parse()?,
                tag: f[2].to_string(),
                seed: f[3].parse()?,
                table: f[4].parse()?,
                accuracy: f[5].parse()?,
                macro_f1: f[6].parse()?,
            })
        })
        .collect()
}

/// Mean accuracy per (tag, train η), in sweep order.
pub fn sweep_means(rows: &[SweepRow]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut sums: BTreeMap<String, Vec<(f64, f64, usize)>> = BTreeMap::new();
    for r in rows {
        let v = sums.entry(r.tag.clone()).or_default();
        match v.iter_mut().find(|e| e.0 == r.train_eta) {
            Some(e) => {
                e.1 += r.accuracy;
                e.2 += 1;
            }
            None => v.push((r.train_eta, r.accuracy, 1)),
        }
    }
    sums.into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()))
        .collect()
}

/// Merges reports into `summary.md` and `summary.csv`.
pub fn report(run: &Run) -> Result<String> {
    let report_path = run.dir.join("report.json");
    require(&report_path, "evaluation report", "eval")?;
    let reports: ReportFile = read_json(&report_path)?;
    let nm2i_path = run.dir.join("nm2i_report.json");
    let nm: BTreeMap<String, BTreeMap<String, Nm2iAggregate>> = if nm2i_path.exists() {
        read_json(&nm2i_path)?
    } else {
        BTreeMap::new()
    };
    let mut md = String::from("# Run summary\n\n");
    let mut csv = String::from("scenario,tag,runs,mean_accuracy,min_accuracy,max_accuracy,mean_macro_f1,nm2i\n");
    for (scenario, tags) in &reports {
        let _ = writeln!(md, "## {scenario}\n");
        md.push_str("| model | runs | accuracy | range | macro-F1 | NM²I |\n|---|---|---|---|---|---|\n");
        for (tag, a) in tags {
            let n2 = nm.get(scenario).and_then(|m| m.get(tag)).map(|x| x.mean);
            let n2s = n2.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                md,
                "| {tag} | {} | {:.4} | {:.4}–{:.4} | {:.4} | {n2s} |",
                a.runs.len(),
                a.mean_accuracy,
                a.min_accuracy,
                a.max_accuracy,
                a.mean_macro_f1
            );
            let _ = writeln!(
                csv,
                "{scenario},{tag},{},{},{},{},{},{}",
                a.runs.len(),
                a.mean_accuracy,
                a.min_accuracy,
                a.max_accuracy,
                a.mean_macro_f1,
                n2.map_or(String::new(), |v| v.to_string())
            );
        }
        md.push('\n');
    }
    if let Ok(rows) = read_sweep(run) {
        md.push_str("## Scaling sweep (test accuracy by training missing rate)\n\n");
        let means = sweep_means(&rows);
        let etas: Vec<f64> = run.cfg.sweep_train_etas.clone();
        md.push_str("| model |");
        for e in &etas {
            let _ = write!(md, " η={e} |");
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(etas.len()));
        md.push('\n');
        for (tag, pts) in &means {
            let _ = write!(md, "| {tag} |");
            for e in &etas {
                match pts.iter().find(|p| p.0 == *e) {
                    Some(p) => {
                        let _ = write!(md, " {:.4} |", p.1);
                    }
                    None => md.push_str(" - |"),
                }
            }
            md.push('\n');
        }
        md.push_str("\nPlot data: `scaling.csv` (x = train_eta, y = accuracy).\n");
    }
    fs::write(run.dir.join("summary.md"), &md)?;
    fs::write(run.dir.join("summary.csv"), csv)?;
    Ok(md)
}
