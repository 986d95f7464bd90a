//! Modal-contextualized prompt construction and the prompt bank.

use std::path::Path;

use aoept_tensor::{io as tio, Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::collections::CollectionSet;
use crate::dataset::Pattern;
use crate::error::{Error, Result};
use crate::instantiation::GateVars;
use crate::seed;

/// How global prompts are built from prototypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McpMethod {
    /// Learnable base prompts cross-attend to the prototypes.
    Attention,
    /// An MLP maps prototypes, then adaptive pooling keeps `M` rows.
    Mlp,
    /// Pooled prototypes initialize free prompt parameters.
    Init,
}

impl McpMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(McpMethod::Attention),
            "mlp" => Ok(McpMethod::Mlp),
            "init" => Ok(McpMethod::Init),
            _ => Err(Error::Input(format!(
                "unknown method {s:?} (expected attention, mlp or init)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            McpMethod::Attention => "attention",
            McpMethod::Mlp => "mlp",
            McpMethod::Init => "init",
        }
    }
}

/// Hidden activation of the construction MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Identity,
}

/// Sizes of the balanced partition of `s` rows into `m` windows: the first
/// `s mod m` windows get one extra row.
pub fn window_sizes(s: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || s < m {
        return Err(Error::Input(format!("cannot pool {s} rows into {m}")));
    }
    let (q, r) = (s / m, s % m);
    Ok((0..m).map(|i| if i < r { q + 1 } else { q }).collect())
}

fn window_groups(s: usize, m: usize) -> Result<Vec<Vec<usize>>> {
    let mut start = 0;
    Ok(window_sizes(s, m)?
        .into_iter()
        .map(|w| {
            let g = (start..start + w).collect();
            start += w;
            g
        })
        .collect())
}

/// Non-overlapping window means reducing `[S×d]` to `[M×d]`.
pub fn adaptive_pool(seq: &Tensor, m: usize) -> Result<Tensor> {
    let d = seq.cols();
    let mut out = Vec::with_capacity(m * d);
    for group in window_groups(seq.rows(), m)? {
        let mut mean = vec![0.0; d];
        for &r in &group {
            mean.iter_mut().zip(seq.row(r)).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= group.len() as f64);
        out.extend(mean);
    }
    Ok(Tensor::new(vec![m, d], out)?)
}

/// [`adaptive_pool`] on the graph.
pub fn adaptive_pool_graph(g: &mut Graph, x: Var, m: usize) -> Result<Var> {
    let groups = window_groups(g.shape(x)[0], m)?;
    crate::backbone::pool_rows(g, x, &groups)
}

/// `softmax(P Kᵀ/√d) K + P` with the prototypes as keys and values.
pub fn construct_attention(g: &mut Graph, base: Var, protos: Var) -> Result<Var> {
    if g.shape(protos).len() != 2 || g.shape(protos)[0] == 0 {
        return Err(Error::Contract("attention construction needs prototypes".into()));
    }
    let a = g.attention(base, protos, protos, 1)?;
    Ok(g.add(a, base)?)
}

/// Parameters of the two-layer construction MLP, bound to a graph.
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `pool_M(W2·act(W1·protos + b1) + b2)`.
pub fn construct_mlp(
    g: &mut Graph,
    protos: Var,
    m: usize,
    mlp: &MlpVars,
    act: Activation,
) -> Result<Var> {
    let h = g.linear(protos, mlp.w1, mlp.b1)?;
    let h = match act {
        Activation::Gelu => g.gelu(h)?,
        Activation::Identity => h,
    };
    let y = g.linear(h, mlp.w2, mlp.b2)?;
    adaptive_pool_graph(g, y, m)
}

/// Starting value of the free prompt parameters of the init method.
pub fn construct_init(protos: &Tensor, m: usize) -> Result<Tensor> {
    adaptive_pool(protos, m)
}

/// I.i.d. `N(0, 0.02²)` prompts that depend only on the seed.
pub fn init_random_prompts(m: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[m, d], 0.02, &mut seed::rng(seed, "random-prompts"))
}

/// What kind of prompts a bank holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BankKind {
    /// Prototype-derived prompts; `instantiate` enables the gating.
    Mcp { method: McpMethod, instantiate: bool },
    /// Random prompts, one set per missing pattern.
    Random,
    /// No prompts at all (frozen backbone plus head).
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    /// Prompt rows per modality, `M`.
    pub prompt_len: usize,
    /// Number of layers receiving fresh prompts, `N`.
    pub depth: usize,
    /// Gating bottleneck reduction ratio.
    pub reduction: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            prompt_len: 16,
            depth: 3,
            reduction: 4,
            activation: Activation::Gelu,
            seed: 11,
        }
    }
}

/// Per-layer, per-modality prompts plus the gating MLPs that instantiate them.
///
/// Layers are numbered `1..=depth`; prompts for layer `l` are built from the
/// prototypes of layer `l - 1`.
#[derive(Clone, Debug)]
pub struct McpBank {
    pub kind: BankKind,
    pub config: BankConfig,
    pub modalities: Vec<String>,
    pub d: usize,
    pub params: ParamStore,
    /// `[modality][l - 1]`, empty unless the kind is `Mcp`.
    pub prototypes: Vec<Vec<Tensor>>,
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl McpBank {
    pub fn new(
        kind: BankKind,
        config: BankConfig,
        modalities: &[String],
        d: usize,
        collections: Option<&CollectionSet>,
    ) -> Result<Self> {
        if config.prompt_len == 0 {
            return Err(Error::Config("prompt length M must be at least 1".into()));
        }
        if config.reduction == 0 || d / config.reduction == 0 {
            return Err(Error::Config("gating reduction must leave a hidden width >= 1".into()));
        }
        let k = modalities.len();
        let (m_len, n) = (config.prompt_len, config.depth);
        let mut params = ParamStore::new();
        let mut prototypes = Vec::new();
        let mut rng = seed::rng(config.seed, "bank");
        match kind {
            BankKind::Mcp { method, instantiate } => {
                let coll = collections
                    .ok_or_else(|| Error::Contract("prototype prompts need collections".into()))?;
                if coll.refined.len() != k {
                    return Err(Error::Contract("collections do not match modalities".into()));
                }
                if n > coll.layers() {
                    return Err(Error::Config(format!(
                        "depth {n} needs prototypes up to layer {}, have {}",
                        n - 1,
                        coll.layers()
                    )));
                }
                for (mi, name) in modalities.iter().enumerate() {
                    let mut per = Vec::new();
                    for l in 1..=n {
                        let protos = coll.prototypes(mi, l - 1).clone();
                        let key = format!("mcp.{name}.l{l}");
                        match method {
                            McpMethod::Attention => {
                                params.insert(
                                    format!("{key}.base"),
                                    Tensor::randn(&[m_len, d], 0.02, &mut rng),
                                );
                            }
                            McpMethod::Mlp => {
                                if protos.rows() < m_len {
                                    return Err(Error::Config(format!(
                                        "mlp construction needs at least M = {m_len} prototypes, layer {} has {}",
                                        l - 1,
                                        protos.rows()
                                    )));
                                }
                                params.insert(format!("{key}.mlp.w1"), xavier(d, d, &mut rng));
                                params.insert(format!("{key}.mlp.b1"), Tensor::zeros(&[d]));
                                params.insert(format!("{key}.mlp.w2"), xavier(d, d, &mut rng));
                                params.insert(format!("{key}.mlp.b2"), Tensor::zeros(&[d]));
                            }
                            McpMethod::Init => {
                                params.insert(format!("{key}.prompt"), construct_init(&protos, m_len)?);
                            }
                        }
                        per.push(protos);
                    }
                    prototypes.push(per);
                }
                if instantiate {
                    let h = d / config.reduction;
                    for target in modalities {
                        for source in modalities.iter().filter(|s| *s != target) {
                            for l in 1..=n {
                                let key = format!("gate.{target}.from.{source}.l{l}");
                                params.insert(format!("{key}.w1"), xavier(d, h, &mut rng));
                                params.insert(format!("{key}.b1"), Tensor::zeros(&[h]));
                                params.insert(format!("{key}.w2"), xavier(h, d, &mut rng));
                                params.insert(format!("{key}.b2"), Tensor::zeros(&[d]));
                            }
                        }
                    }
                }
            }
            BankKind::Random => {
                for p in Pattern::all(k) {
                    let label = pattern_key(p, modalities);
                    for name in modalities {
                        for l in 1..=n {
                            let s = seed::derive(config.seed, &format!("{label}.{name}.l{l}"));
                            params.insert(
                                format!("prompt.{label}.{name}.l{l}"),
                                init_random_prompts(m_len, d, s),
                            );
                        }
                    }
                }
            }
            BankKind::Empty => {}
        }
        params.set_requires_grad(true);
        Ok(McpBank {
            kind,
            config,
            modalities: modalities.to_vec(),
            d,
            params,
            prototypes,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.config.prompt_len
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    /// Prompt rows inserted per sample.
    pub fn rows_per_sample(&self) -> usize {
        match self.kind {
            BankKind::Empty => 0,
            _ => self.modalities.len() * self.config.prompt_len,
        }
    }

    fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .id(name)
            .ok_or_else(|| Error::Contract(format!("bank has no parameter {name}")))
    }

    /// Global prompt `[M×d]` of modality `m` for layer `l` (1-based).
    pub fn global_prompt(&self, g: &mut Graph, m: usize, l: usize) -> Result<Var> {
        let BankKind::Mcp { method, .. } = self.kind else {
            return Err(Error::Contract("global prompts exist only for MCP banks".into()));
        };
        if l == 0 || l > self.config.depth {
            return Err(Error::Contract(format!("no prompts for layer {l}")));
        }
        let key = format!("mcp.{}.l{l}", self.modalities[m]);
        let protos = &self.prototypes[m][l - 1];
        match method {
            McpMethod::Attention => {
                let base = g.param(&self.params, self.id(&format!("{key}.base"))?);
                let pv = g.constant(protos);
                construct_attention(g, base, pv)
            }
            McpMethod::Mlp => {
                let mut v = |part: &str| -> Result<Var> {
                    Ok(g.param(&self.params, self.id(&format!("{key}.mlp.{part}"))?))
                };
                let vars = MlpVars {
                    w1: v("w1")?,
                    b1: v("b1")?,
                    w2: v("w2")?,
                    b2: v("b2")?,
                };
                let pv = g.constant(protos);
                construct_mlp(g, pv, self.config.prompt_len, &vars, self.config.activation)
            }
            McpMethod::Init => Ok(g.param(&self.params, self.id(&format!("{key}.prompt"))?)),
        }
    }

    /// Gating MLP that conditions modality `target`'s prompt on modality
    /// `source`, for layer `l`.
    pub fn gate_vars(&self, g: &mut Graph, target: usize, source: usize, l: usize) -> Result<GateVars> {
        let key = format!(
            "gate.{}.from.{}.l{l}",
            self.modalities[target], self.modalities[source]
        );
        let mut v = |part: &str| -> Result<Var> {
            Ok(g.param(&self.params, self.id(&format!("{key}.{part}"))?))
        };
        Ok(GateVars {
            w1: v("w1")?,
            b1: v("b1")?,
            w2: v("w2")?,
            b2: v("b2")?,
        })
    }

    /// Random prompt of modality `m` for samples with pattern `p`.
    pub fn random_prompt(&self, g: &mut Graph, p: Pattern, m: usize, l: usize) -> Result<Var> {
        let name = format!(
            "prompt.{}.{}.l{l}",
            pattern_key(p, &self.modalities),
            self.modalities[m]
        );
        Ok(g.param(&self.params, self.id(&name)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for (_, name, t) in self.params.iter() {
            tio::save(dir.join(format!("{name}.aotn")), t)?;
            names.push(name.to_string());
        }
        for (m, per) in self.prototypes.iter().enumerate() {
            for (i, t) in per.iter().enumerate() {
                tio::save(dir.join(format!("protos.{}.l{}.aotn", self.modalities[m], i)), t)?;
            }
        }
        let manifest = json!({
            "kind": self.kind,
            "config": self.config,
            "modalities": self.modalities,
            "d": self.d,
            "params": names,
        });
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        let bad = |k: &str| Error::Format(format!("{}: bad {k}", path.display()));
        let kind: BankKind = serde_json::from_value(v["kind"].clone()).map_err(|_| bad("kind"))?;
        let config: BankConfig =
            serde_json::from_value(v["config"].clone()).map_err(|_| bad("config"))?;
        let modalities: Vec<String> =
            serde_json::from_value(v["modalities"].clone()).map_err(|_| bad("modalities"))?;
        let d = v["d"].as_u64().ok_or_else(|| bad("d"))? as usize;
        let names: Vec<String> =
            serde_json::from_value(v["params"].clone()).map_err(|_| bad("params"))?;
        let mut params = ParamStore::new();
        for name in names {
            let t = tio::load(dir.join(format!("{name}.aotn")))?;
            params.insert(name, t);
        }
        params.set_requires_grad(true);
        let mut prototypes = Vec::new();
        if matches!(kind, BankKind::Mcp { .. }) {
            for name in &modalities {
                let per = (0..config.depth)
                    .map(|i| Ok(tio::load(dir.join(format!("protos.{name}.l{i}.aotn")))?))
                    .collect::<Result<Vec<_>>>()?;
                prototypes.push(per);
            }
        }
        Ok(McpBank {
            kind,
            config,
            modalities,
            d,
            params,
            prototypes,
        })
    }
}

fn pattern_key(p: Pattern, modalities: &[String]) -> String {
    match p {
        Pattern::Complete => "complete".into(),
        Pattern::Missing(m) => format!("no_{}", modalities[m]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn adaptive_pool_examples() {
        let x = t(&[vec![0.0], vec![2.0], vec![4.0], vec![6.0]]);
        assert_eq!(adaptive_pool(&x, 4).unwrap(), x);
        assert_eq!(adaptive_pool(&x, 2).unwrap().data(), &[1.0, 5.0]);
        assert_eq!(window_sizes(5, 2).unwrap(), vec![3, 2]);
        assert_eq!(window_sizes(7, 3).unwrap(), vec![3, 2, 2]);
        assert!(matches!(adaptive_pool(&x, 5), Err(Error::Input(_))));
    }

    #[test]
    fn adaptive_pool_graph_matches_plain() {
        let x = Tensor::randn(&[7, 3], 1.0, &mut seed::rng(0, "t"));
        let mut g = Graph::no_grad();
        let xv = g.constant(&x);
        let y = adaptive_pool_graph(&mut g, xv, 3).unwrap();
        let plain = adaptive_pool(&x, 3).unwrap();
        for (a, b) in g.value(y).iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_with_one_prototype_adds_it() {
        let mut g = Graph::no_grad();
        let base = g.constant(&t(&[vec![1.0, 2.0], vec![-3.0, 0.5]]));
        let proto = g.constant(&t(&[vec![0.25, -1.0]]));
        let out = construct_attention(&mut g, base, proto).unwrap();
        assert_eq!(g.value(out), &[1.25, 1.0, -2.75, -0.5]);
    }

    #[test]
    fn attention_with_zero_prototypes_is_residual() {
        let mut g = Graph::no_grad();
        let b = t(&[vec![0.1, 0.2], vec![0.3, 0.4]]);
        let base = g.constant(&b);
        let protos = g.constant(&Tensor::zeros(&[3, 2]));
        let out = construct_attention(&mut g, base, protos).unwrap();
        assert_eq!(g.value(out), b.data());
    }

    #[test]
    fn mlp_construction_special_cases() {
        let d = 2;
        let protos = t(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0], vec![6.0, 7.0]]);
        let mut g = Graph::no_grad();
        let pv = g.constant(&protos);
        let eye = g.constant(&Tensor::identity(d));
        let zero_b = g.constant(&Tensor::zeros(&[d]));
        let id = MlpVars { w1: eye, b1: zero_b, w2: eye, b2: zero_b };
        let same = construct_mlp(&mut g, pv, 4, &id, Activation::Identity).unwrap();
        assert_eq!(g.value(same), protos.data());
        let pairs = construct_mlp(&mut g, pv, 2, &id, Activation::Identity).unwrap();
        assert_eq!(g.value(pairs), &[1.0, 2.0, 5.0, 6.0]);
        let zw = g.constant(&Tensor::zeros(&[d, d]));
        let zero = MlpVars { w1: zw, b1: zero_b, w2: zw, b2: zero_b };
        let z = construct_mlp(&mut g, pv, 2, &zero, Activation::Gelu).unwrap();
        assert!(g.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_prompts_statistics() {
        let a = init_random_prompts(16, 32, 9);
        assert_eq!(a, init_random_prompts(16, 32, 9));
        let n = a.numel() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((0.015..=0.025).contains(&std), "{std}");
    }

    #[test]
    fn method_names_round_trip() {
        for m in [McpMethod::Attention, McpMethod::Mlp, McpMethod::Init] {
            assert_eq!(McpMethod::parse(m.name()).unwrap(), m);
        }
        assert!(McpMethod::parse("conv").is_err());
    }
}
