//! Prompted forward pass, classifier head, training and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use aoept_tensor::{io as tio, AdamW, AdamWConfig, Graph, ParamStore, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax_rows, cross_entropy, pool_rows, Backbone, Bound};
use crate::dataset::{ModalitySpec, MissingTable, Pattern, Sample};
use crate::error::{Error, Result};
use crate::instantiation::{consistency_loss_graph, gate_graph, instantiate_graph};
use crate::mcp::{BankKind, McpBank};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Consistency-loss temperature.
    pub tau: f64,
    /// Weight of the consistency loss.
    pub lambda_cr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            weight_decay: 2e-2,
            epochs: 20,
            batch_size: 32,
            tau: 0.1,
            lambda_cr: 1.0,
            seed: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.lambda_cr < 0.0 {
            return Err(Error::Config("lr > 0, weight_decay >= 0, lambda_cr >= 0 required".into()));
        }
        Ok(())
    }
}

/// Trainable state: the prompt bank plus the linear classifier.
#[derive(Clone, Debug)]
pub struct PromptModel {
    pub bank: McpBank,
    pub head: ParamStore,
}

impl PromptModel {
    /// Wraps a bank with a zero-initialised `d → num_classes` head.
    pub fn new(bank: McpBank, num_classes: usize) -> Self {
        let d = bank.d;
        let mut head = ParamStore::new();
        head.insert("head.w", Tensor::zeros(&[d, num_classes]));
        head.insert("head.b", Tensor::zeros(&[num_classes]));
        head.set_requires_grad(true);
        PromptModel { bank, head }
    }

    pub fn num_trainable(&self) -> usize {
        self.bank.params.numel() + self.head.numel()
    }

    /// Whether training adds the consistency loss.
    pub fn uses_consistency(&self) -> bool {
        matches!(self.bank.kind, BankKind::Mcp { .. })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.bank.save(&dir.join("bank"))?;
        let hd = dir.join("head");
        std::fs::create_dir_all(&hd).map_err(|e| Error::io(&hd, e))?;
        for (_, name, t) in self.head.iter() {
            tio::save(hd.join(format!("{name}.aotn")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bank = McpBank::load(&dir.join("bank"))?;
        let mut head = ParamStore::new();
        for name in ["head.w", "head.b"] {
            head.insert(name, tio::load(dir.join("head").join(format!("{name}.aotn")))?);
        }
        head.set_requires_grad(true);
        Ok(PromptModel { bank, head })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOpts {
    pub tau: f64,
    /// Build the consistency loss.
    pub consistency: bool,
    /// Keep per-layer prompt slots and content states.
    pub trace: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts {
            tau: 0.1,
            consistency: false,
            trace: false,
        }
    }
}

/// Per-layer intermediate values of a prompted forward pass.
#[derive(Debug, Default)]
pub struct Trace {
    /// Prompt rows entering layer `l` at index `l - 1`, `[B·P×d]`.
    pub entering: Vec<Var>,
    /// Prompt rows leaving layer `l` at index `l - 1`, `[B·P×d]`.
    pub exiting: Vec<Var>,
    /// Sequence length entering each layer.
    pub seq_lens: Vec<usize>,
    /// Content rows `H^0..H^L`, `[B·S_c×d]`.
    pub content: Vec<Var>,
}

#[derive(Debug)]
pub struct ForwardOut {
    /// `[B×C]`
    pub logits: Var,
    /// Mean over prompted layers of the summed per-modality consistency
    /// losses; `None` when not requested or undefined.
    pub consistency: Option<Var>,
    pub trace: Trace,
}

/// Rows of several sample-major parts, reordered so each sample's rows from
/// every part are contiguous: `[p0_i; p1_i; …]`.
fn interleave(g: &mut Graph, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
    if parts.len() == 1 {
        return Ok(parts[0].0);
    }
    let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
    let stacked = g.concat(&vars, 0)?;
    let per: usize = parts.iter().map(|p| p.1).sum();
    let mut order = Vec::with_capacity(batch * per);
    for i in 0..batch {
        let mut base = 0;
        for &(_, r) in parts {
            order.extend(base + i * r..base + (i + 1) * r);
            base += batch * r;
        }
    }
    Ok(g.gather_rows(stacked, &order)?)
}

/// Which modalities condition the prompt of `target` for a sample with
/// pattern `p`: the other observed modalities, or all other modalities when
/// none of them is observed.
pub fn conditioning_set(target: usize, p: Pattern, k: usize) -> Vec<usize> {
    let others: Vec<usize> = (0..k).filter(|&j| j != target).collect();
    let observed: Vec<usize> = others.iter().copied().filter(|&j| p.observes(j)).collect();
    if observed.is_empty() {
        others
    } else {
        observed
    }
}

/// Fresh prompts for layer `l`: one `[B·M×d]` block per modality, plus the
/// per-modality pooled prompts used by the consistency loss.
fn fresh_prompts(
    g: &mut Graph,
    bb: &Backbone,
    bank: &McpBank,
    batch: &[&Sample],
    l: usize,
    conds: &[Var],
) -> Result<(Vec<Var>, Vec<Option<Var>>)> {
    let b = batch.len();
    let k = bb.config().modalities.len();
    let m = bank.prompt_len();
    let mut blocks = Vec::with_capacity(k);
    let mut pooled = Vec::with_capacity(k);
    match bank.kind {
        BankKind::Mcp { instantiate, .. } => {
            for target in 0..k {
                let p = bank.global_prompt(g, target, l)?;
                let mean = g.mean_rows(p)?;
                if instantiate {
                    let sets: Vec<Vec<usize>> = batch
                        .iter()
                        .map(|s| conditioning_set(target, s.pattern, k))
                        .collect();
                    let mut gate: Option<Var> = None;
                    for j in (0..k).filter(|&j| j != target) {
                        let weights: Vec<f64> = sets
                            .iter()
                            .map(|c| if c.contains(&j) { 1.0 / c.len() as f64 } else { 0.0 })
                            .collect();
                        if weights.iter().all(|&w| w == 0.0) {
                            continue;
                        }
                        let vars = bank.gate_vars(g, target, j, l)?;
                        let mut gj = gate_graph(g, conds[j], &vars)?;
                        if weights.iter().any(|&w| w != 1.0) {
                            let d = bank.d;
                            let wt = Tensor::new(
                                vec![b, d],
                                weights.iter().flat_map(|&w| std::iter::repeat_n(w, d)).collect(),
                            )?;
                            let wv = g.constant(&wt);
                            gj = g.mul(gj, wv)?;
                        }
                        gate = Some(match gate {
                            None => gj,
                            Some(acc) => g.add(acc, gj)?,
                        });
                    }
                    let gate = gate.ok_or_else(|| Error::Contract("no conditioning modality".into()))?;
                    blocks.push(instantiate_graph(g, p, gate)?);
                    pooled.push(Some(g.mul_row(gate, mean)?));
                } else {
                    let tile: Vec<usize> = (0..b).flat_map(|_| 0..m).collect();
                    blocks.push(g.gather_rows(p, &tile)?);
                    pooled.push(Some(g.gather_rows(mean, &vec![0; b])?));
                }
            }
        }
        BankKind::Random => {
            let mut patterns: Vec<Pattern> = batch.iter().map(|s| s.pattern).collect();
            patterns.sort();
            patterns.dedup();
            for target in 0..k {
                let tables = patterns
                    .iter()
                    .map(|&p| bank.random_prompt(g, p, target, l))
                    .collect::<Result<Vec<_>>>()?;
                let table = if tables.len() == 1 { tables[0] } else { g.concat(&tables, 0)? };
                let rows: Vec<usize> = batch
                    .iter()
                    .flat_map(|s| {
                        let z = patterns.iter().position(|&p| p == s.pattern).expect("listed");
                        z * m..(z + 1) * m
                    })
                    .collect();
                blocks.push(g.gather_rows(table, &rows)?);
                pooled.push(None);
            }
        }
        BankKind::Empty => {}
    }
    Ok((blocks, pooled))
}

/// Runs the frozen backbone with prompts.
///
/// For layers `1..=N` fresh instance prompts `[P_1; …; P_K]` are prepended
/// to the content rows and the prompt slots of the layer output are dropped.
/// The slots leaving layer `N` are kept and travel through layers `N+1..L`
/// unchanged in role. Logits come from the mean of the final content rows.
pub fn prompt_forward(
    g: &mut Graph,
    bb: &Backbone,
    bound: &Bound,
    model: &PromptModel,
    batch: &[&Sample],
    opts: ForwardOpts,
) -> Result<ForwardOut> {
    let cfg = bb.config();
    let bank = &model.bank;
    let (b, k, layers) = (batch.len(), cfg.modalities.len(), cfg.layers);
    if bank.depth() > layers {
        return Err(Error::Config(format!(
            "prompt depth {} exceeds backbone depth {layers}",
            bank.depth()
        )));
    }
    if bank.modalities.len() != k || bank.d != cfg.d {
        return Err(Error::Contract("prompt bank does not match the backbone".into()));
    }
    let sc = cfg.content_len();
    let p_rows = bank.rows_per_sample();
    let mut x = bb.embed_graph(g, bound, batch)?;
    let mut trace = Trace::default();
    if opts.trace {
        trace.content.push(x);
    }
    let mut carried: Option<Var> = None;
    let mut cr_terms = Vec::new();
    for l in 1..=layers {
        let prompts = if l <= bank.depth() {
            let conds = (0..k)
                .map(|j| pool_rows(g, x, &bb.modality_rows(b, 0, j)))
                .collect::<Result<Vec<_>>>()?;
            let (blocks, pooled) = fresh_prompts(g, bb, bank, batch, l, &conds)?;
            if opts.consistency && model.uses_consistency() {
                let mut layer_terms = Vec::new();
                for (target, pooled) in pooled.iter().enumerate() {
                    let Some(pooled) = *pooled else { continue };
                    let avail: Vec<usize> =
                        (0..b).filter(|&i| batch[i].pattern.observes(target)).collect();
                    if avail.is_empty() {
                        continue;
                    }
                    let targets = g.tensor(conds[target]);
                    let tv = g.constant(&targets);
                    let tv = g.gather_rows(tv, &avail)?;
                    let pv = g.gather_rows(pooled, &avail)?;
                    if let Some(t) = consistency_loss_graph(g, pv, tv, opts.tau)? {
                        layer_terms.push(t);
                    }
                }
                if !layer_terms.is_empty() {
                    let s = if layer_terms.len() == 1 {
                        layer_terms[0]
                    } else {
                        g.concat(&layer_terms, 0).and_then(|c| g.sum(c))?
                    };
                    cr_terms.push(s);
                }
            }
            if blocks.is_empty() {
                None
            } else {
                let parts: Vec<(Var, usize)> =
                    blocks.iter().map(|&v| (v, bank.prompt_len())).collect();
                Some(interleave(g, &parts, b)?)
            }
        } else {
            carried
        };
        let input = match prompts {
            Some(pv) => {
                if opts.trace {
                    trace.entering.push(pv);
                }
                interleave(g, &[(pv, p_rows), (x, sc)], b)?
            }
            None => x,
        };
        if opts.trace {
            trace.seq_lens.push(g.shape(input)[0] / b);
        }
        let y = bb.layer_graph(g, bound, l - 1, input, b)?;
        if p_rows > 0 {
            let s = p_rows + sc;
            let content: Vec<usize> = (0..b).flat_map(|i| i * s + p_rows..(i + 1) * s).collect();
            x = g.gather_rows(y, &content)?;
            if l >= bank.depth() || opts.trace {
                let prompt_rows: Vec<usize> = (0..b).flat_map(|i| i * s..i * s + p_rows).collect();
                let out = g.gather_rows(y, &prompt_rows)?;
                if opts.trace {
                    trace.exiting.push(out);
                }
                if l >= bank.depth() {
                    carried = Some(out);
                }
            }
        } else {
            x = y;
        }
        if opts.trace {
            trace.content.push(x);
        }
    }
    let pooled = pool_rows(g, x, &bb.content_rows(b, 0))?;
    let logits = classify_graph(g, model, pooled)?;
    let consistency = if cr_terms.is_empty() {
        None
    } else {
        let n = cr_terms.len() as f64;
        let all = g.concat(&cr_terms, 0)?;
        let s = g.sum(all)?;
        Some(g.scale(s, 1.0 / n)?)
    };
    Ok(ForwardOut {
        logits,
        consistency,
        trace,
    })
}

/// Linear head on pooled content features `[B×d]`.
pub fn classify_graph(g: &mut Graph, model: &PromptModel, pooled: Var) -> Result<Var> {
    let w = g.param(&model.head, model.head.id("head.w").expect("head.w"));
    let bias = g.param(&model.head, model.head.id("head.b").expect("head.b"));
    Ok(g.linear(pooled, w, bias)?)
}

/// Logits `[C]` for one final hidden state `[S×d]` whose first
/// `prompt_count` rows are prompt slots.
pub fn classify(h_last: &Tensor, prompt_count: usize, model: &PromptModel) -> Result<Tensor> {
    let s = h_last.rows();
    if prompt_count >= s {
        return Err(Error::Contract("no content rows to classify".into()));
    }
    let mut g = Graph::no_grad();
    let h = g.constant(h_last);
    let pooled = pool_rows(&mut g, h, &[(prompt_count..s).collect()])?;
    let logits = classify_graph(&mut g, model, pooled)?;
    Ok(Tensor::vector(g.value(logits).to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_cr: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub trainable_params: usize,
    pub backbone_params: usize,
}

/// Trains the bank and head with AdamW on `L_CE + λ·L_CR`, keeping the
/// parameters of the epoch with the best validation accuracy.
pub fn train(
    bb: &Backbone,
    model: &mut PromptModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !bb.is_frozen() {
        return Err(Error::Contract("prompt tuning requires a frozen backbone".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt_bank = AdamW::new(opt_cfg.clone());
    let mut opt_head = AdamW::new(opt_cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = seed::rng(cfg.seed, "train-order");
    let consistency = model.uses_consistency() && cfg.lambda_cr > 0.0;
    let opts = ForwardOpts {
        tau: cfg.tau,
        consistency,
        trace: false,
    };
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut cr_sum) = (0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let bound = bb.bind(&mut g);
            let numeric = |e| as_numeric(e, epoch, step);
            let out = prompt_forward(&mut g, bb, &bound, model, &batch, opts).map_err(numeric)?;
            let ce = cross_entropy(&mut g, out.logits, &batch).map_err(numeric)?;
            let (ce_v, cr_v) = (g.scalar(ce), out.consistency.map_or(0.0, |c| g.scalar(c)));
            if !ce_v.is_finite() || !cr_v.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    step,
                    msg: format!("loss is not finite (ce = {ce_v}, cr = {cr_v})"),
                });
            }
            ce_sum += ce_v * batch.len() as f64;
            cr_sum += cr_v * batch.len() as f64;
            let loss = match out.consistency {
                Some(cr) => {
                    let w = g.scale(cr, cfg.lambda_cr)?;
                    g.add(ce, w)?
                }
                None => ce,
            };
            let grads = g.backward(loss).map_err(|e| Error::Numeric {
                epoch,
                step,
                msg: e.to_string(),
            })?;
            model.bank.params.absorb(&grads)?;
            model.head.absorb(&grads)?;
            if !model.bank.params.is_empty() {
                opt_bank.step(&mut model.bank.params)?;
            }
            opt_head.step(&mut model.head)?;
        }
        let val_acc = if val_set.is_empty() {
            0.0
        } else {
            let steps = train_set.len().div_ceil(cfg.batch_size);
            evaluate(bb, model, val_set).map_err(|e| as_numeric(e, epoch, steps))?.accuracy
        };
        let n = train_set.len() as f64;
        history.push(EpochRecord {
            epoch,
            loss_ce: ce_sum / n,
            loss_cr: cr_sum / n,
            val_acc,
        });
        if best.as_ref().is_none_or(|b| val_acc > b.0) {
            best = Some((val_acc, epoch, model.bank.params.clone(), model.head.clone()));
        }
    }
    let (best_val_acc, best_epoch, bank_params, head) = best.expect("at least one epoch");
    model.bank.params = bank_params;
    model.head = head;
    model.bank.params.zero_grad();
    model.head.zero_grad();
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_acc,
        trainable_params: model.num_trainable(),
        backbone_params: bb.num_params(),
    })
}

// Overflow inside the forward pass is reported like a non-finite loss.
fn as_numeric(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Tensor(t @ TensorError::NonFinite { .. }) => Error::Numeric {
            epoch,
            step,
            msg: t.to_string(),
        },
        other => other,
    }
}

/// Class predictions, evaluated without gradients in fixed-size chunks.
pub fn predict(bb: &Backbone, model: &PromptModel, samples: &[Sample]) -> Result<Vec<usize>> {
    let c = bb.config().num_classes;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::no_grad();
        let bound = bb.bind(&mut g);
        let f = prompt_forward(&mut g, bb, &bound, model, &batch, ForwardOpts::default())?;
        out.extend(argmax_rows(g.value(f.logits), c));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternMetrics {
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_pattern: BTreeMap<String, PatternMetrics>,
}

/// Accuracy and macro-F1; the F1 average runs over classes present in the
/// labels or the predictions.
pub fn classification_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> (f64, f64) {
    if labels.is_empty() {
        return (0.0, 0.0);
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnn = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fnn[y] += 1;
        }
    }
    let mut f1_sum = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fnn[c];
        if denom == 0 {
            continue;
        }
        present += 1;
        f1_sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    (
        correct as f64 / labels.len() as f64,
        if present == 0 { 0.0 } else { f1_sum / present as f64 },
    )
}

/// Metrics on samples whose missing patterns have already been applied.
pub fn evaluate(bb: &Backbone, model: &PromptModel, samples: &[Sample]) -> Result<EvalReport> {
    let preds = predict(bb, model, samples)?;
    Ok(report_from(bb.config().num_classes, &bb.config().modalities, samples, &preds))
}

pub fn report_from(
    num_classes: usize,
    modalities: &[ModalitySpec],
    samples: &[Sample],
    preds: &[usize],
) -> EvalReport {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (accuracy, macro_f1) = classification_metrics(preds, &labels, num_classes);
    let mut per_pattern = BTreeMap::new();
    for p in Pattern::all(modalities.len()) {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].pattern == p).collect();
        if idx.is_empty() {
            continue;
        }
        let hit = idx.iter().filter(|&&i| preds[i] == labels[i]).count();
        let name = match p {
            Pattern::Complete => "complete".to_string(),
            Pattern::Missing(m) => format!("{}_missing", modalities[m].name),
        };
        per_pattern.insert(
            name,
            PatternMetrics {
                n: idx.len(),
                accuracy: hit as f64 / idx.len() as f64,
            },
        );
    }
    EvalReport {
        n: samples.len(),
        accuracy,
        macro_f1,
        per_pattern,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub per_table: Vec<EvalReport>,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
}

impl TableSummary {
    pub fn from_reports(per_table: Vec<EvalReport>) -> Self {
        let n = per_table.len().max(1) as f64;
        let accs: Vec<f64> = per_table.iter().map(|r| r.accuracy).collect();
        TableSummary {
            mean_accuracy: accs.iter().sum::<f64>() / n,
            mean_macro_f1: per_table.iter().map(|r| r.macro_f1).sum::<f64>() / n,
            min_accuracy: accs.iter().copied().fold(f64::INFINITY, f64::min),
            max_accuracy: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            per_table,
        }
    }
}

/// Evaluates one model under each missing table.
pub fn evaluate_tables(
    bb: &Backbone,
    model: &PromptModel,
    test: &[Sample],
    tables: &[MissingTable],
) -> Result<TableSummary> {
    let mods = &bb.config().modalities;
    let reports = tables
        .iter()
        .map(|t| evaluate(bb, model, &t.apply(test, mods)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TableSummary::from_reports(reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_of_perfect_and_constant_predictors() {
        let labels = vec![0, 1, 2, 2, 1, 0, 2];
        let (acc, f1) = classification_metrics(&labels, &labels, 3);
        assert_eq!((acc, f1), (1.0, 1.0));
        let constant = vec![2; labels.len()];
        let (acc, _) = classification_metrics(&constant, &labels, 3);
        assert!((acc - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn conditioning_sets() {
        assert_eq!(conditioning_set(0, Pattern::Complete, 2), vec![1]);
        assert_eq!(conditioning_set(0, Pattern::Missing(1), 2), vec![1]);
        assert_eq!(conditioning_set(0, Pattern::Missing(1), 3), vec![2]);
        assert_eq!(conditioning_set(0, Pattern::Complete, 3), vec![1, 2]);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
