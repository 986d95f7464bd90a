//! Synthetic multimodal data and the fixed missing-modality protocol.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::seed;

/// One input modality: its name, token count per sample and vocabulary size.
///
/// Token ids `0..vocab` are real tokens; id `vocab` is the reserved
/// placeholder substituted when the modality is missing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub seq_len: usize,
    pub vocab: usize,
}

impl ModalitySpec {
    pub fn new(name: &str, seq_len: usize, vocab: usize) -> Self {
        ModalitySpec {
            name: name.to_string(),
            seq_len,
            vocab,
        }
    }

    pub fn placeholder(&self) -> u32 {
        self.vocab as u32
    }
}

/// Text and image, the default dual-modal setting.
pub fn dual_modalities(seq_len: usize, vocab: usize) -> Vec<ModalitySpec> {
    vec![
        ModalitySpec::new("text", seq_len, vocab),
        ModalitySpec::new("image", seq_len, vocab),
    ]
}

/// Which modality (if any) a sample is missing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Complete,
    Missing(usize),
}

impl Pattern {
    pub fn observes(self, modality: usize) -> bool {
        self != Pattern::Missing(modality)
    }

    pub fn label(self, modalities: &[ModalitySpec]) -> String {
        match self {
            Pattern::Complete => "complete".into(),
            Pattern::Missing(m) => format!("{}_missing", modalities[m].name),
        }
    }

    pub fn parse(s: &str, modalities: &[ModalitySpec]) -> Result<Self> {
        if s == "complete" {
            return Ok(Pattern::Complete);
        }
        s.strip_suffix("_missing")
            .and_then(|name| modalities.iter().position(|m| m.name == name))
            .map(Pattern::Missing)
            .ok_or_else(|| Error::Input(format!("unknown missing pattern {s:?}")))
    }

    /// All patterns for `k` modalities, complete first.
    pub fn all(k: usize) -> Vec<Pattern> {
        std::iter::once(Pattern::Complete)
            .chain((0..k).map(Pattern::Missing))
            .collect()
    }

    /// Dense index: complete = 0, missing m = m + 1.
    pub fn index(self) -> usize {
        match self {
            Pattern::Complete => 0,
            Pattern::Missing(m) => m + 1,
        }
    }
}

/// A labeled multimodal instance. Token lists are always full length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: u64,
    /// One token list per modality, in modality order.
    pub tokens: Vec<Vec<u32>>,
    pub label: usize,
    pub pattern: Pattern,
}

/// Replaces the missing modality's tokens with its placeholder id.
pub fn apply_missing(sample: &Sample, pattern: Pattern, modalities: &[ModalitySpec]) -> Sample {
    let mut out = sample.clone();
    out.pattern = pattern;
    if let Pattern::Missing(m) = pattern {
        let ph = modalities[m].placeholder();
        out.tokens[m].iter_mut().for_each(|t| *t = ph);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    /// Probability that every modality carries the label directly. With
    /// probability `1 - rho` the per-modality latents are scrambled so that
    /// only their joint (sum mod classes) determines the label.
    pub rho: f64,
    /// Per modality: probability that a token is drawn from its latent's
    /// topic block rather than uniformly from the vocabulary.
    pub purity: Vec<f64>,
    /// Size of a separate complete corpus for backbone pretraining. Zero
    /// means the backbone is pretrained on the train split.
    pub n_pretrain: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_train: 400,
            n_val: 100,
            n_test: 200,
            num_classes: 4,
            modalities: dual_modalities(8, 32),
            rho: 0.9,
            purity: vec![0.5, 0.5],
            n_pretrain: 0,
            seed: 17,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.modalities.len() < 2 {
            return Err(Error::Config("at least two modalities are required".into()));
        }
        for m in &self.modalities {
            if m.seq_len == 0 || m.vocab < self.num_classes {
                return Err(Error::Config(format!(
                    "modality {} needs seq_len >= 1 and vocab >= num_classes",
                    m.name
                )));
            }
        }
        if self.purity.len() != self.modalities.len() {
            return Err(Error::Config(format!(
                "{} purity values given for {} modalities",
                self.purity.len(),
                self.modalities.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) || self.purity.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("rho and purity must lie in [0, 1]".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Complete pretraining corpus; empty when `n_pretrain` is zero.
    pub pretrain: Vec<Sample>,
}

impl Splits {
    /// The corpus the backbone is pretrained on.
    pub fn pretraining_corpus(&self) -> &[Sample] {
        if self.pretrain.is_empty() {
            &self.train
        } else {
            &self.pretrain
        }
    }
}

/// Topic block of `latent` inside a vocabulary of `vocab` tokens.
fn topic_range(latent: usize, vocab: usize, classes: usize) -> std::ops::Range<u32> {
    let width = vocab / classes;
    (latent * width) as u32..((latent + 1) * width) as u32
}

fn draw_split<R: Rng>(cfg: &GenConfig, n: usize, first_id: u64, rng: &mut R) -> Vec<Sample> {
    let c = cfg.num_classes;
    let k = cfg.modalities.len();
    // Balanced labels, then shuffled.
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, y)| {
            let latents: Vec<usize> = if rng.random_bool(cfg.rho) {
                vec![y; k]
            } else {
                let mut l: Vec<usize> = (0..k - 1).map(|_| rng.random_range(0..c)).collect();
                let partial: usize = l.iter().sum();
                l.push((y + c * k - partial % c) % c);
                l
            };
            let tokens = cfg
                .modalities
                .iter()
                .zip(&latents)
                .zip(&cfg.purity)
                .map(|((m, &lat), &purity)| {
                    let topic = topic_range(lat, m.vocab, c);
                    (0..m.seq_len)
                        .map(|_| {
                            if rng.random_bool(purity) {
                                rng.random_range(topic.clone())
                            } else {
                                rng.random_range(0..m.vocab as u32)
                            }
                        })
                        .collect()
                })
                .collect();
            Sample {
                id: first_id + i as u64,
                tokens,
                label: y,
                pattern: Pattern::Complete,
            }
        })
        .collect()
}

/// Class-conditional token sequences for every modality, split three ways.
/// Sample ids are unique across splits.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<Splits> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, "data");
    let train = draw_split(cfg, cfg.n_train, 0, &mut rng);
    let val = draw_split(cfg, cfg.n_val, cfg.n_train as u64, &mut rng);
    let test = draw_split(cfg, cfg.n_test, (cfg.n_train + cfg.n_val) as u64, &mut rng);
    let first = (cfg.n_train + cfg.n_val + cfg.n_test) as u64;
    let pretrain = draw_split(cfg, cfg.n_pretrain, first, &mut seed::rng(cfg.seed, "pretrain-corpus"));
    Ok(Splits {
        train,
        val,
        test,
        pretrain,
    })
}

/// How missingness is distributed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingKind {
    /// η% of samples miss this modality.
    Single(usize),
    /// η% of samples are incomplete, split evenly over the modalities.
    Each,
}

impl MissingKind {
    /// `text`/`image`/any modality name, or `both`/`each`.
    pub fn parse(s: &str, modalities: &[ModalitySpec]) -> Result<Self> {
        if s == "both" || s == "each" {
            return Ok(MissingKind::Each);
        }
        modalities
            .iter()
            .position(|m| m.name == s)
            .map(MissingKind::Single)
            .ok_or_else(|| Error::Input(format!("unknown missing kind {s:?}")))
    }

    pub fn label(self, modalities: &[ModalitySpec]) -> String {
        match self {
            MissingKind::Single(m) => modalities[m].name.clone(),
            MissingKind::Each if modalities.len() == 2 => "both".into(),
            MissingKind::Each => "each".into(),
        }
    }
}

/// A fixed, seeded assignment of missing patterns to sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingTable {
    pub eta: f64,
    pub kind: MissingKind,
    pub seed: u64,
    pub assignments: BTreeMap<u64, Pattern>,
}

/// Assigns patterns to `ids` by a seeded shuffle.
///
/// Counts are floored: with `kind = Single(m)`, `floor(η·n/100)` samples miss
/// `m`; with `Each`, every modality gets `floor(η·n/(100·K))` missing samples.
/// Everything else is complete.
pub fn build_missing_table(
    ids: &[u64],
    eta: f64,
    kind: MissingKind,
    seed: u64,
    num_modalities: usize,
) -> Result<MissingTable> {
    if !(0.0..=100.0).contains(&eta) || eta.is_nan() {
        return Err(Error::Input(format!("missing rate {eta} outside [0, 100]")));
    }
    if let MissingKind::Single(m) = kind {
        if m >= num_modalities {
            return Err(Error::Input(format!("modality {m} out of range")));
        }
    }
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "missing-table"));
    let mut patterns = vec![Pattern::Complete; n];
    let mut cursor = 0;
    let mut take = |count: usize, p: Pattern| {
        for &i in &order[cursor..cursor + count] {
            patterns[i] = p;
        }
        cursor += count;
    };
    match kind {
        MissingKind::Single(m) => {
            let count = (eta * n as f64 / 100.0 + 1e-9).floor() as usize;
            take(count.min(n), Pattern::Missing(m));
        }
        MissingKind::Each => {
            let per = (eta * n as f64 / (100.0 * num_modalities as f64) + 1e-9).floor() as usize;
            for m in 0..num_modalities {
                take(per, Pattern::Missing(m));
            }
        }
    }
    Ok(MissingTable {
        eta,
        kind,
        seed,
        assignments: ids.iter().copied().zip(patterns).collect(),
    })
}

impl MissingTable {
    pub fn pattern(&self, id: u64) -> Pattern {
        self.assignments.get(&id).copied().unwrap_or(Pattern::Complete)
    }

    pub fn count(&self, p: Pattern) -> usize {
        self.assignments.values().filter(|&&q| q == p).count()
    }

    /// Applies the table to a split.
    pub fn apply(&self, samples: &[Sample], modalities: &[ModalitySpec]) -> Vec<Sample> {
        samples
            .iter()
            .map(|s| apply_missing(s, self.pattern(s.id), modalities))
            .collect()
    }

    pub fn to_json(&self, modalities: &[ModalitySpec]) -> Value {
        let assignments: Map<String, Value> = self
            .assignments
            .iter()
            .map(|(id, p)| (id.to_string(), Value::String(p.label(modalities))))
            .collect();
        json!({
            "eta": self.eta,
            "kind": self.kind.label(modalities),
            "seed": self.seed,
            "assignments": assignments,
        })
    }

    pub fn from_json(v: &Value, modalities: &[ModalitySpec]) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("missing table: bad or missing {what}"));
        let eta = v["eta"].as_f64().ok_or_else(|| bad("eta"))?;
        let kind = MissingKind::parse(v["kind"].as_str().ok_or_else(|| bad("kind"))?, modalities)?;
        let seed = v["seed"].as_u64().ok_or_else(|| bad("seed"))?;
        let obj = v["assignments"].as_object().ok_or_else(|| bad("assignments"))?;
        let mut assignments = BTreeMap::new();
        for (k, p) in obj {
            let id: u64 = k.parse().map_err(|_| bad("sample id"))?;
            let p = Pattern::parse(p.as_str().ok_or_else(|| bad("pattern"))?, modalities)?;
            assignments.insert(id, p);
        }
        Ok(MissingTable {
            eta,
            kind,
            seed,
            assignments,
        })
    }

    pub fn save(&self, path: &Path, modalities: &[ModalitySpec]) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json(modalities)).expect("json value");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, modalities: &[ModalitySpec]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        Self::from_json(&v, modalities)
    }
}

/// Writes one JSON object per line: `{id, <modality name>: [...], label}`.
pub fn write_jsonl(path: &Path, samples: &[Sample], modalities: &[ModalitySpec]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let mut obj = Map::new();
        obj.insert("id".into(), json!(s.id));
        for (m, toks) in modalities.iter().zip(&s.tokens) {
            obj.insert(m.name.clone(), json!(toks));
        }
        obj.insert("label".into(), json!(s.label));
        writeln!(w, "{}", Value::Object(obj)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path, modalities: &[ModalitySpec]) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        let bad = |what: &str| {
            Error::Format(format!("{}:{}: bad {what}", path.display(), lineno + 1))
        };
        let id = v["id"].as_u64().ok_or_else(|| bad("id"))?;
        let label = v["label"].as_u64().ok_or_else(|| bad("label"))? as usize;
        let mut tokens = Vec::new();
        for m in modalities {
            let arr = v[&m.name].as_array().ok_or_else(|| bad(&m.name))?;
            let toks: Option<Vec<u32>> = arr.iter().map(|t| t.as_u64().map(|t| t as u32)).collect();
            let toks = toks.ok_or_else(|| bad(&m.name))?;
            if toks.len() != m.seq_len {
                return Err(bad(&format!("{} length", m.name)));
            }
            tokens.push(toks);
        }
        out.push(Sample {
            id,
            tokens,
            label,
            pattern: Pattern::Complete,
        });
    }
    Ok(out)
}
