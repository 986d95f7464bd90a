//! A small single-stream multimodal transformer used as the frozen backbone.

use std::path::Path;

use aoept_tensor::{io as tio, AdamW, AdamWConfig, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::dataset::{ModalitySpec, Sample};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub modalities: Vec<ModalitySpec>,
    pub num_classes: usize,
    /// Hidden width of the feed-forward block as a multiple of `d`.
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            d: 32,
            heads: 4,
            modalities: crate::dataset::dual_modalities(8, 32),
            num_classes: 4,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config("backbone needs at least 2 layers".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.modalities.is_empty() || self.modalities.iter().any(|m| m.seq_len == 0) {
            return Err(Error::Config("every modality needs seq_len >= 1".into()));
        }
        if self.mlp_ratio == 0 || self.num_classes < 2 {
            return Err(Error::Config("mlp_ratio >= 1 and num_classes >= 2 required".into()));
        }
        Ok(())
    }

    /// Non-prompt tokens per sample.
    pub fn content_len(&self) -> usize {
        self.modalities.iter().map(|m| m.seq_len).sum()
    }

    /// Row offset of modality `m` within a sample's content tokens.
    pub fn modality_offset(&self, m: usize) -> usize {
        self.modalities[..m].iter().map(|s| s.seq_len).sum()
    }
}

/// What a token row holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Prompt,
    Modality(usize),
}

/// Hidden states of a batch of same-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    /// `[B×S×d]`
    pub tokens: Tensor,
    /// One tag per sequence position.
    pub tags: Vec<Tag>,
    /// Number of leading prompt rows.
    pub prompt_count: usize,
}

impl TokenBatch {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Prepends the same prompt rows `[P×d]` to every sequence.
    pub fn with_prompts(&self, prompts: &Tensor) -> Result<TokenBatch> {
        let (b, s, d) = (self.batch(), self.seq_len(), self.tokens.shape()[2]);
        if prompts.cols() != d || prompts.shape().len() != 2 {
            return Err(Error::Contract("prompt rows must be [P×d]".into()));
        }
        let p = prompts.rows();
        let mut data = Vec::with_capacity(b * (s + p) * d);
        for i in 0..b {
            data.extend_from_slice(prompts.data());
            data.extend_from_slice(&self.tokens.data()[i * s * d..(i + 1) * s * d]);
        }
        let mut tags = vec![Tag::Prompt; p];
        tags.extend_from_slice(&self.tags);
        Ok(TokenBatch {
            tokens: Tensor::new(vec![b, s + p, d], data)?,
            tags,
            prompt_count: self.prompt_count + p,
        })
    }
}

/// Mean over the tokens tagged `tag`, one row per sequence: `[B×d]`.
pub fn pool_modality(batch: &TokenBatch, tag: Tag) -> Result<Tensor> {
    let rows: Vec<usize> = (0..batch.tags.len()).filter(|&i| batch.tags[i] == tag).collect();
    if rows.is_empty() {
        return Err(Error::Contract(format!("no tokens tagged {tag:?}")));
    }
    let (b, s, d) = (batch.batch(), batch.seq_len(), batch.tokens.shape()[2]);
    let mut out = vec![0.0; b * d];
    for i in 0..b {
        let o = &mut out[i * d..(i + 1) * d];
        for &r in &rows {
            let src = &batch.tokens.data()[(i * s + r) * d..(i * s + r + 1) * d];
            o.iter_mut().zip(src).for_each(|(a, v)| *a += v);
        }
        o.iter_mut().for_each(|a| *a /= rows.len() as f64);
    }
    Ok(Tensor::new(vec![b, d], out)?)
}

/// Constant `[G×R]` matrix whose row `g` averages the rows listed in `groups[g]`.
pub fn pooling_matrix(groups: &[Vec<usize>], total_rows: usize) -> Result<Tensor> {
    let mut data = vec![0.0; groups.len() * total_rows];
    for (gi, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::Contract("empty pooling group".into()));
        }
        let w = 1.0 / rows.len() as f64;
        for &r in rows {
            data[gi * total_rows + r] += w;
        }
    }
    Ok(Tensor::new(vec![groups.len(), total_rows], data)?)
}

/// Averages row groups of `x` on the graph: `[G×d]`.
pub fn pool_rows(g: &mut Graph, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
    let m = pooling_matrix(groups, g.shape(x)[0])?;
    let mv = g.constant(&m);
    Ok(g.matmul(mv, x)?)
}

struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pretrained transformer encoder with modality-aware embeddings.
///
/// Token id `vocab` of each modality is its missing-modality placeholder. It
/// receives the token and type embeddings but no positional embedding, so
/// every placeholder position of a modality embeds to the same vector.
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    tok: Vec<ParamId>,
    pos: Vec<ParamId>,
    typ: ParamId,
    layers: Vec<LayerIds>,
    frozen: bool,
}

/// Backbone parameters recorded on one graph.
pub struct Bound {
    tok: Vec<Var>,
    pos: Vec<Var>,
    typ: Vec<Var>,
    layers: Vec<[Var; 16]>,
    heads: usize,
}

fn linear_init<R: rand::Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Backbone {
    /// Randomly initialized, trainable backbone.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "backbone-init");
        let d = config.d;
        let h = d * config.mlp_ratio;
        let mut params = ParamStore::new();
        let mut tok = Vec::new();
        let mut pos = Vec::new();
        for m in &config.modalities {
            let name = &m.name;
            tok.push(params.insert(
                format!("embed.{name}.tokens"),
                Tensor::randn(&[m.vocab + 1, d], 1.0, &mut rng),
            ));
            pos.push(params.insert(
                format!("embed.{name}.pos"),
                Tensor::randn(&[m.seq_len, d], 0.1, &mut rng),
            ));
        }
        let typ = params.insert(
            "embed.type",
            Tensor::randn(&[config.modalities.len(), d], 0.1, &mut rng),
        );
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let mut add = |part: &str, t: Tensor| params.insert(format!("layer{l}.{part}"), t);
            layers.push(LayerIds {
                ln1_g: add("ln1.gamma", Tensor::filled(&[d], 1.0)),
                ln1_b: add("ln1.beta", Tensor::zeros(&[d])),
                wq: add("attn.wq", linear_init(d, d, &mut rng)),
                bq: add("attn.bq", Tensor::zeros(&[d])),
                wk: add("attn.wk", linear_init(d, d, &mut rng)),
                bk: add("attn.bk", Tensor::zeros(&[d])),
                wv: add("attn.wv", linear_init(d, d, &mut rng)),
                bv: add("attn.bv", Tensor::zeros(&[d])),
                wo: add("attn.wo", linear_init(d, d, &mut rng)),
                bo: add("attn.bo", Tensor::zeros(&[d])),
                ln2_g: add("ln2.gamma", Tensor::filled(&[d], 1.0)),
                ln2_b: add("ln2.beta", Tensor::zeros(&[d])),
                w1: add("mlp.w1", linear_init(d, h, &mut rng)),
                b1: add("mlp.b1", Tensor::zeros(&[h])),
                w2: add("mlp.w2", linear_init(h, d, &mut rng)),
                b2: add("mlp.b2", Tensor::zeros(&[d])),
            });
        }
        params.set_requires_grad(true);
        Ok(Backbone {
            config,
            params,
            tok,
            pos,
            typ,
            layers,
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameter access; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Contract("backbone is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.params.set_requires_grad(false);
        self.frozen = true;
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// SHA-256 over parameter names and their AOTN encodings, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.params.iter() {
            h.update(name.as_bytes());
            h.update(tio::to_bytes(t));
        }
        hex::encode(h.finalize())
    }

    /// Records the parameters on `g`. Frozen parameters become constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let p = |g: &mut Graph, id: ParamId| g.param(&self.params, id);
        let tok = self.tok.iter().map(|&id| p(g, id)).collect();
        let pos = self.pos.iter().map(|&id| p(g, id)).collect();
        let typ_all = p(g, self.typ);
        let typ = (0..self.config.modalities.len())
            .map(|m| g.slice(typ_all, 0, m, m + 1).expect("type row"))
            .collect();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                [
                    l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g,
                    l.ln2_b, l.w1, l.b1, l.w2, l.b2,
                ]
                .map(|id| p(g, id))
            })
            .collect();
        Bound {
            tok,
            pos,
            typ,
            layers,
            heads: self.config.heads,
        }
    }

    fn check_tokens(&self, samples: &[&Sample]) -> Result<()> {
        for s in samples {
            if s.tokens.len() != self.config.modalities.len() {
                return Err(Error::Input(format!(
                    "sample {} has {} modalities, expected {}",
                    s.id,
                    s.tokens.len(),
                    self.config.modalities.len()
                )));
            }
            for (m, toks) in self.config.modalities.iter().zip(&s.tokens) {
                if toks.len() != m.seq_len {
                    return Err(Error::Input(format!(
                        "sample {}: {} has {} tokens, expected {}",
                        s.id,
                        m.name,
                        toks.len(),
                        m.seq_len
                    )));
                }
                if let Some(bad) = toks.iter().find(|&&t| t as usize > m.vocab) {
                    return Err(Error::Input(format!(
                        "sample {}: {} token id {bad} outside vocabulary of {}",
                        s.id, m.name, m.vocab
                    )));
                }
            }
        }
        Ok(())
    }

    /// Embeds a batch into stacked content rows `[B·S_c × d]`, sample-major
    /// with modalities in order inside each sample.
    pub fn embed_graph(&self, g: &mut Graph, bound: &Bound, samples: &[&Sample]) -> Result<Var> {
        self.check_tokens(samples)?;
        let b = samples.len();
        let d = self.config.d;
        let mut blocks = Vec::new();
        for (m, spec) in self.config.modalities.iter().enumerate() {
            let ids: Vec<usize> = samples
                .iter()
                .flat_map(|s| s.tokens[m].iter().map(|&t| t as usize))
                .collect();
            let mut x = g.gather_rows(bound.tok[m], &ids)?;
            let positions: Vec<usize> = (0..b).flat_map(|_| 0..spec.seq_len).collect();
            let mut pe = g.gather_rows(bound.pos[m], &positions)?;
            if ids.iter().any(|&t| t == spec.vocab) {
                let mask: Vec<f64> = ids
                    .iter()
                    .flat_map(|&t| std::iter::repeat_n(if t == spec.vocab { 0.0 } else { 1.0 }, d))
                    .collect();
                let mv = g.constant(&Tensor::new(vec![ids.len(), d], mask)?);
                pe = g.mul(pe, mv)?;
            }
            x = g.add(x, pe)?;
            x = g.add_row(x, bound.typ[m])?;
            blocks.push(x);
        }
        let stacked = g.concat(&blocks, 0)?;
        // Reorder modality-major rows into sample-major.
        let mut order = Vec::with_capacity(b * self.config.content_len());
        for i in 0..b {
            let mut base = 0;
            for spec in &self.config.modalities {
                let start = base + i * spec.seq_len;
                order.extend(start..start + spec.seq_len);
                base += b * spec.seq_len;
            }
        }
        Ok(g.gather_rows(stacked, &order)?)
    }

    /// Runs encoder layer `l` (0-based) on `blocks` stacked sequences.
    pub fn layer_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        l: usize,
        x: Var,
        blocks: usize,
    ) -> Result<Var> {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
            bound.layers[l];
        let h = g.layer_norm(x, ln1_g, ln1_b)?;
        let q = g.linear(h, wq, bq)?;
        let k = g.linear(h, wk, bk)?;
        let v = g.linear(h, wv, bv)?;
        let a = g.block_attention(q, k, v, bound.heads, blocks)?;
        let o = g.linear(a, wo, bo)?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, ln2_g, ln2_b)?;
        let u = g.linear(h, w1, b1)?;
        let u = g.gelu(u)?;
        let m = g.linear(u, w2, b2)?;
        Ok(g.add(x, m)?)
    }

    /// Row groups selecting each sample's tokens of modality `m`, for rows
    /// laid out as `[prefix rows; content]` per sample.
    pub fn modality_rows(&self, batch: usize, prefix: usize, m: usize) -> Vec<Vec<usize>> {
        let s = prefix + self.config.content_len();
        let off = prefix + self.config.modality_offset(m);
        (0..batch)
            .map(|i| (i * s + off..i * s + off + self.config.modalities[m].seq_len).collect())
            .collect()
    }

    /// Row groups selecting each sample's content tokens.
    pub fn content_rows(&self, batch: usize, prefix: usize) -> Vec<Vec<usize>> {
        let s = prefix + self.config.content_len();
        (0..batch)
            .map(|i| (i * s + prefix..(i + 1) * s).collect())
            .collect()
    }

    /// Hidden states `H^0..H^L` of unprompted forward passes, each
    /// `[B·S_c × d]`, evaluated without recording gradients.
    pub fn hidden_states(&self, samples: &[&Sample]) -> Result<Vec<Tensor>> {
        let mut g = Graph::no_grad();
        let bound = self.bind(&mut g);
        let mut x = self.embed_graph(&mut g, &bound, samples)?;
        let mut out = vec![g.tensor(x)];
        for l in 0..self.config.layers {
            x = self.layer_graph(&mut g, &bound, l, x, samples.len())?;
            out.push(g.tensor(x));
        }
        Ok(out)
    }

    /// Embeds samples into a [`TokenBatch`] with no prompts.
    pub fn embed(&self, samples: &[&Sample]) -> Result<TokenBatch> {
        let mut g = Graph::no_grad();
        let bound = self.bind(&mut g);
        let x = self.embed_graph(&mut g, &bound, samples)?;
        let sc = self.config.content_len();
        let tags = (0..self.config.modalities.len())
            .flat_map(|m| std::iter::repeat_n(Tag::Modality(m), self.config.modalities[m].seq_len))
            .collect();
        Ok(TokenBatch {
            tokens: Tensor::new(vec![samples.len(), sc, self.config.d], g.value(x).to_vec())?,
            tags,
            prompt_count: 0,
        })
    }

    /// Applies encoder layer `l` (0-based) to every sequence of the batch.
    pub fn layer_forward(&self, l: usize, batch: &TokenBatch) -> Result<TokenBatch> {
        if l >= self.config.layers {
            return Err(Error::Contract(format!("layer {l} out of range")));
        }
        let (b, s, d) = (batch.batch(), batch.seq_len(), self.config.d);
        let mut g = Graph::no_grad();
        let bound = self.bind(&mut g);
        let x = g.constant(&batch.tokens.reshape(&[b * s, d])?);
        let y = self.layer_graph(&mut g, &bound, l, x, b)?;
        Ok(TokenBatch {
            tokens: Tensor::new(vec![b, s, d], g.value(y).to_vec())?,
            tags: batch.tags.clone(),
            prompt_count: batch.prompt_count,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for (_, name, t) in self.params.iter() {
            let path = dir.join(format!("{name}.aotn"));
            tio::save(&path, t)?;
            names.push(name.to_string());
        }
        let manifest = json!({
            "config": self.config,
            "params": names,
            "checksum": self.checksum(),
            "frozen": self.frozen,
        });
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json"))
            .map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint and verifies its checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?;
        let config: BackboneConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?;
        let mut bb = Backbone::init(config, 0)?;
        let entries: Vec<(ParamId, String)> =
            bb.params.iter().map(|(i, n, _)| (i, n.to_string())).collect();
        for (id, name) in entries {
            let t = tio::load(dir.join(format!("{name}.aotn")))?;
            if t.shape() != bb.params.get(id).shape() {
                return Err(Error::Format(format!("parameter {name} has wrong shape")));
            }
            *bb.params.get_mut(id) = t;
        }
        let expected = manifest["checksum"].as_str().unwrap_or_default();
        if bb.checksum() != expected {
            return Err(Error::Format(format!(
                "backbone checksum mismatch in {}",
                dir.display()
            )));
        }
        if manifest["frozen"].as_bool().unwrap_or(true) {
            bb.freeze();
        } else {
            bb.params.set_requires_grad(true);
        }
        Ok(bb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-2,
            seed: 23,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub checksum: String,
}

/// Trains every backbone parameter plus a throwaway linear head on
/// modality-complete data, then freezes the backbone.
pub fn pretrain_backbone(
    config: BackboneConfig,
    train: &[Sample],
    cfg: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::Input("pretraining needs data".into()));
    }
    if let Some(s) = train.iter().find(|s| s.pattern != crate::dataset::Pattern::Complete) {
        return Err(Error::Input(format!("sample {} is not modality-complete", s.id)));
    }
    let mut bb = Backbone::init(config, cfg.seed)?;
    let d = bb.config.d;
    let c = bb.config.num_classes;
    let mut head = ParamStore::new();
    let mut hrng = seed::rng(cfg.seed, "pretrain-head");
    let hw = head.insert("head.w", linear_init(d, c, &mut hrng));
    let hb = head.insert("head.b", Tensor::zeros(&[c]));
    head.set_requires_grad(true);

    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt_bb = AdamW::new(opt_cfg.clone());
    let mut opt_head = AdamW::new(opt_cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = seed::rng(cfg.seed, "pretrain-order");
    let mut epoch_loss = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let bound = bb.bind(&mut g);
            let logits = head_logits(&bb, &mut g, &bound, &head, hw, hb, &batch)?;
            let loss = cross_entropy(&mut g, logits, &batch)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    step,
                    msg: format!("pretraining loss is {value}"),
                });
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss).map_err(|e| Error::Numeric {
                epoch,
                step,
                msg: e.to_string(),
            })?;
            bb.params.absorb(&grads)?;
            head.absorb(&grads)?;
            opt_bb.step(&mut bb.params)?;
            opt_head.step(&mut head)?;
        }
        epoch_loss.push(total / train.len() as f64);
    }
    let mut correct = 0;
    for chunk in train.chunks(64) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::no_grad();
        let bound = bb.bind(&mut g);
        let logits = head_logits(&bb, &mut g, &bound, &head, hw, hb, &batch)?;
        correct += argmax_rows(g.value(logits), c)
            .iter()
            .zip(&batch)
            .filter(|(p, s)| **p == s.label)
            .count();
    }
    bb.freeze();
    let report = PretrainReport {
        epoch_loss,
        train_accuracy: correct as f64 / train.len() as f64,
        checksum: bb.checksum(),
    };
    Ok((bb, report))
}

fn head_logits(
    bb: &Backbone,
    g: &mut Graph,
    bound: &Bound,
    head: &ParamStore,
    hw: ParamId,
    hb: ParamId,
    batch: &[&Sample],
) -> Result<Var> {
    let mut x = bb.embed_graph(g, bound, batch)?;
    for l in 0..bb.config.layers {
        x = bb.layer_graph(g, bound, l, x, batch.len())?;
    }
    let pooled = pool_rows(g, x, &bb.content_rows(batch.len(), 0))?;
    let w = g.param(head, hw);
    let b = g.param(head, hb);
    Ok(g.linear(pooled, w, b)?)
}

/// Mean cross-entropy of `[B×C]` logits against the batch labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, batch: &[&Sample]) -> Result<Var> {
    let c = g.shape(logits)[1];
    let ls = g.log_softmax_rows(logits)?;
    let flat: Vec<usize> = batch.iter().enumerate().map(|(i, s)| i * c + s.label).collect();
    let picked = g.pick(ls, &flat)?;
    let mean = g.mean(picked)?;
    Ok(g.scale(mean, -1.0)?)
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{apply_missing, generate_synthetic, GenConfig, Pattern};

    fn small() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            d: 8,
            heads: 2,
            modalities: crate::dataset::dual_modalities(3, 8),
            num_classes: 4,
            mlp_ratio: 2,
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        let cfg = GenConfig {
            n_train: n,
            n_val: 1,
            n_test: 1,
            modalities: crate::dataset::dual_modalities(3, 8),
            ..GenConfig::default()
        };
        generate_synthetic(&cfg).unwrap().train
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small();
        c.layers = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embed_shape_and_determinism() {
        let bb = Backbone::init(small(), 1).unwrap();
        let s = samples(2);
        let a = bb.embed(&[&s[0]]).unwrap();
        assert_eq!(a.tokens.shape(), &[1, 6, 8]);
        let twin = s[0].clone();
        let b = bb.embed(&[&twin]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn placeholder_positions_are_identical() {
        let bb = Backbone::init(small(), 1).unwrap();
        let mods = small().modalities;
        let s = apply_missing(&samples(1)[0], Pattern::Missing(0), &mods);
        let e = bb.embed(&[&s]).unwrap();
        let row = |i: usize| e.tokens.data()[i * 8..(i + 1) * 8].to_vec();
        assert_eq!(row(0), row(1));
        assert_eq!(row(1), row(2));
        assert_ne!(row(3), row(4));
    }

    #[test]
    fn out_of_vocab_token_is_input_error() {
        let bb = Backbone::init(small(), 1).unwrap();
        let mut s = samples(1)[0].clone();
        s.tokens[1][0] = 9;
        assert!(matches!(bb.embed(&[&s]), Err(Error::Input(_))));
    }

    #[test]
    fn layer_preserves_shape_with_prompts() {
        let bb = Backbone::init(small(), 1).unwrap();
        let s = samples(2);
        let e = bb.embed(&[&s[0], &s[1]]).unwrap();
        for p in [0, 1, 5] {
            let batch = if p == 0 {
                e.clone()
            } else {
                e.with_prompts(&Tensor::filled(&[p, 8], 0.3)).unwrap()
            };
            let out = bb.layer_forward(0, &batch).unwrap();
            assert_eq!(out.tokens.shape(), batch.tokens.shape());
            assert_eq!(out.prompt_count, p);
        }
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let bb = Backbone::init(small(), 2).unwrap();
        let e = bb.embed(&[&samples(1)[0]]).unwrap();
        let mut swapped = e.clone();
        let data = swapped.tokens.data_mut();
        for c in 0..8 {
            data.swap(3 * 8 + c, 5 * 8 + c);
        }
        let a = bb.layer_forward(1, &e).unwrap();
        let b = bb.layer_forward(1, &swapped).unwrap();
        let row = |t: &TokenBatch, i: usize| t.tokens.data()[i * 8..(i + 1) * 8].to_vec();
        for (x, y) in row(&a, 3).iter().zip(row(&b, 5)) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in row(&a, 0).iter().zip(row(&b, 0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut bb = Backbone::init(small(), 3).unwrap();
        let params = bb.params_mut().unwrap();
        for name in ["layer0.attn.wo", "layer0.attn.bo", "layer0.mlp.w2", "layer0.mlp.b2"] {
            let id = params.id(name).unwrap();
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let e = bb.embed(&[&samples(1)[0]]).unwrap();
        assert_eq!(bb.layer_forward(0, &e).unwrap().tokens, e.tokens);
    }

    #[test]
    fn pooling_examples() {
        let batch = TokenBatch {
            tokens: Tensor::new(vec![1, 3, 2], vec![1.0, 1.0, 3.0, 3.0, 7.0, 7.0]).unwrap(),
            tags: vec![Tag::Modality(0), Tag::Modality(0), Tag::Modality(1)],
            prompt_count: 0,
        };
        assert_eq!(pool_modality(&batch, Tag::Modality(0)).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(pool_modality(&batch, Tag::Modality(1)).unwrap().data(), &[7.0, 7.0]);
        assert!(pool_modality(&batch, Tag::Prompt).is_err());
    }

    #[test]
    fn frozen_backbone_refuses_mutation_and_records_no_grads() {
        let mut bb = Backbone::init(small(), 1).unwrap();
        bb.freeze();
        assert!(bb.params_mut().is_err());
        let mut g = Graph::new();
        let bound = bb.bind(&mut g);
        let s = samples(1);
        let x = bb.embed_graph(&mut g, &bound, &[&s[0]]).unwrap();
        assert!(!g.requires_grad(x));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bb = Backbone::init(small(), 4).unwrap();
        bb.freeze();
        bb.save(dir.path()).unwrap();
        let back = Backbone::load(dir.path()).unwrap();
        assert_eq!(back.checksum(), bb.checksum());
        assert!(back.is_frozen());
    }

    #[test]
    fn argmax_ties_pick_first() {
        assert_eq!(argmax_rows(&[0.0, 0.0, 1.0, 2.0, 2.0, 1.0], 3), vec![2, 0]);
    }
}
