//! Instance-aware prompt gating and the intra-modal consistency loss.

use aoept_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::seed;

/// Bottleneck MLP `d → d/r → d` whose sigmoid output gates a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Gating parameters recorded on a graph.
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GatingMlp {
    pub fn zeros(d: usize, reduction: usize) -> Self {
        let h = (d / reduction).max(1);
        GatingMlp {
            w1: Tensor::zeros(&[d, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn random(d: usize, reduction: usize, seed: u64) -> Self {
        let h = (d / reduction).max(1);
        let mut rng = seed::rng(seed, "gating");
        GatingMlp {
            w1: Tensor::randn(&[d, h], 1.0 / (d as f64).sqrt(), &mut rng),
            b1: Tensor::randn(&[h], 0.1, &mut rng),
            w2: Tensor::randn(&[h, d], 1.0 / (h as f64).sqrt(), &mut rng),
            b2: Tensor::randn(&[d], 0.1, &mut rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> GateVars {
        GateVars {
            w1: g.constant(&self.w1),
            b1: g.constant(&self.b1),
            w2: g.constant(&self.w2),
            b2: g.constant(&self.b2),
        }
    }
}

/// `sigmoid(W2·gelu(W1·cond + b1) + b2)` for conditioning rows `[B×d]`.
pub fn gate_graph(g: &mut Graph, cond: Var, v: &GateVars) -> Result<Var> {
    let h = g.linear(cond, v.w1, v.b1)?;
    let h = g.gelu(h)?;
    let o = g.linear(h, v.w2, v.b2)?;
    Ok(g.sigmoid(o)?)
}

/// Row-broadcast product: for every gate row `i`, the prompt `[M×d]` scaled
/// columnwise by that row. Output is `[B·M×d]`, sample-major.
pub fn instantiate_graph(g: &mut Graph, prompt: Var, gates: Var) -> Result<Var> {
    let m = g.shape(prompt)[0];
    let b = g.shape(gates)[0];
    let tiled = g.gather_rows(prompt, &(0..b).flat_map(|_| 0..m).collect::<Vec<_>>())?;
    let spread = g.gather_rows(gates, &(0..b).flat_map(|i| std::iter::repeat_n(i, m)).collect::<Vec<_>>())?;
    Ok(g.mul(tiled, spread)?)
}

/// A prompt specialised to one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrompt {
    /// `[M×d]`
    pub tensor: Tensor,
    /// `[d]`, entries in (0, 1).
    pub gate: Tensor,
}

fn check_cond(cond: &Tensor, d: usize) -> Result<()> {
    if cond.numel() != d {
        return Err(Error::Input(format!(
            "conditioning vector has {} entries, prompt width is {d}",
            cond.numel()
        )));
    }
    Ok(())
}

/// Gates the global prompt with `sigmoid(MLP(cond))`.
pub fn instantiate(prompt: &Tensor, cond: &Tensor, gmlp: &GatingMlp) -> Result<InstancePrompt> {
    instantiate_multi(prompt, std::slice::from_ref(cond), &[gmlp])
}

/// Gates the global prompt with the mean of the per-modality gates.
pub fn instantiate_multi(
    prompt: &Tensor,
    conds: &[Tensor],
    gmlps: &[&GatingMlp],
) -> Result<InstancePrompt> {
    if conds.is_empty() {
        return Err(Error::Contract("instantiation needs an observed modality".into()));
    }
    if conds.len() != gmlps.len() {
        return Err(Error::Contract(format!(
            "{} conditioning vectors but {} gating MLPs",
            conds.len(),
            gmlps.len()
        )));
    }
    let d = prompt.cols();
    let mut g = Graph::no_grad();
    let mut gates = Vec::new();
    for (cond, gmlp) in conds.iter().zip(gmlps) {
        check_cond(cond, d)?;
        let c = g.constant(&cond.reshape(&[1, d])?);
        let v = gmlp.bind(&mut g);
        gates.push(gate_graph(&mut g, c, &v)?);
    }
    let mut gate = gates[0];
    if gates.len() > 1 {
        for &other in &gates[1..] {
            gate = g.add(gate, other)?;
        }
        gate = g.scale(gate, 1.0 / gates.len() as f64)?;
    }
    let p = g.constant(prompt);
    let out = instantiate_graph(&mut g, p, gate)?;
    Ok(InstancePrompt {
        tensor: Tensor::new(prompt.shape().to_vec(), g.value(out).to_vec())?,
        gate: Tensor::vector(g.value(gate).to_vec()),
    })
}

/// InfoNCE over a `[B×B]` similarity matrix whose diagonal holds the
/// positives: `mean_j −log softmax(sims[j] / τ)[j]`.
pub fn info_nce_graph(g: &mut Graph, sims: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    let b = g.shape(sims)[0];
    let scaled = g.scale(sims, 1.0 / tau)?;
    let ls = g.log_softmax_rows(scaled)?;
    let diag: Vec<usize> = (0..b).map(|j| j * b + j).collect();
    let picked = g.pick(ls, &diag)?;
    let mean = g.mean(picked)?;
    Ok(g.scale(mean, -1.0)?)
}

/// Consistency loss between pooled prompts and pooled same-modality
/// representations `[B×d]`, with cosine similarity. `None` for an empty batch.
pub fn consistency_loss_graph(
    g: &mut Graph,
    prompt_pooled: Var,
    targets: Var,
    tau: f64,
) -> Result<Option<Var>> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    if g.shape(prompt_pooled) != g.shape(targets) {
        return Err(Error::Contract("prompt and target batches differ in shape".into()));
    }
    let p = g.normalize_rows(prompt_pooled)?;
    let t = g.normalize_rows(targets)?;
    let tt = g.transpose(t)?;
    let sims = g.matmul(p, tt)?;
    Ok(Some(info_nce_graph(g, sims, tau)?))
}

/// Plain evaluation of [`consistency_loss_graph`]; an empty batch gives 0.
pub fn consistency_loss(prompt_pooled: &[Vec<f64>], targets: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    if prompt_pooled.is_empty() && targets.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::no_grad();
    let p = g.constant(&Tensor::from_rows(prompt_pooled)?);
    let t = g.constant(&Tensor::from_rows(targets)?);
    let loss = consistency_loss_graph(&mut g, p, t, tau)?.expect("nonempty");
    Ok(g.scalar(loss))
}

/// InfoNCE of a given similarity matrix.
pub fn info_nce(sims: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::no_grad();
    let s = g.constant(sims);
    let l = info_nce_graph(&mut g, s, tau)?;
    Ok(g.scalar(l))
}
