//! Normalized mutual information between prompt tokens and the latent
//! tokens of the modality a sample is missing.

use std::collections::BTreeMap;

use aoept_tensor::{sigmoid, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::dataset::{apply_missing, MissingTable, Pattern, Sample};
use crate::error::{Error, Result};
use crate::tuner::{prompt_forward, ForwardOpts, PromptModel};

/// Row-major `[K×J]` probability table.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(rows: usize, cols: usize, probs: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || probs.len() != rows * cols {
            return Err(Error::Input("joint table has the wrong size".into()));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Input("joint table has a negative entry".into()));
        }
        Ok(JointDistribution { rows, cols, probs })
    }

    pub fn at(&self, k: usize, j: usize) -> f64 {
        self.probs[k * self.cols + j]
    }
}

/// `e(k, j) = σ(⟨p_k, m_j⟩) / Σ σ(⟨·,·⟩)` for prompt rows `[K×d]` and
/// modality rows `[J×d]`.
pub fn joint_distribution(p: &Tensor, m: &Tensor) -> Result<JointDistribution> {
    if p.cols() != m.cols() {
        return Err(Error::Input(format!(
            "prompt width {} differs from token width {}",
            p.cols(),
            m.cols()
        )));
    }
    let (k, j) = (p.rows(), m.rows());
    let mut probs = Vec::with_capacity(k * j);
    for a in 0..k {
        for b in 0..j {
            let dot: f64 = p.row(a).iter().zip(m.row(b)).map(|(x, y)| x * y).sum();
            probs.push(sigmoid(dot));
        }
    }
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Input("all pairwise scores vanish".into()));
    }
    probs.iter_mut().for_each(|v| *v /= total);
    JointDistribution::new(k, j, probs)
}

/// Row sums and column sums.
pub fn marginals(joint: &JointDistribution) -> (Vec<f64>, Vec<f64>) {
    let mut pr = vec![0.0; joint.rows];
    let mut pc = vec![0.0; joint.cols];
    for k in 0..joint.rows {
        for j in 0..joint.cols {
            let v = joint.at(k, j);
            pr[k] += v;
            pc[j] += v;
        }
    }
    (pr, pc)
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if let Some(bad) = dist.iter().find(|&&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Input(format!("probability {bad} is not valid")));
    }
    Ok(-dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

pub fn mutual_information(joint: &JointDistribution) -> f64 {
    let (pr, pc) = marginals(joint);
    let mut mi = 0.0;
    for k in 0..joint.rows {
        for j in 0..joint.cols {
            let e = joint.at(k, j);
            if e > 0.0 {
                mi += e * (e / (pr[k] * pc[j])).ln();
            }
        }
    }
    mi
}

/// The terms making up one NM²I value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nm2iTerms {
    pub nm2i: f64,
    pub mi: f64,
    pub h_p: f64,
    pub h_m: f64,
}

/// `MI / ((H(P) + H(M)) / 2)`, or 0 when both entropies vanish. Rounding
/// excursions outside `[0, 1]` are clamped.
pub fn nm2i_from_joint(joint: &JointDistribution) -> Result<Nm2iTerms> {
    let (pr, pc) = marginals(joint);
    let h_p = entropy(&pr)?;
    let h_m = entropy(&pc)?;
    let mi = mutual_information(joint);
    let denom = 0.5 * (h_p + h_m);
    let nm2i = if denom <= 0.0 { 0.0 } else { (mi / denom).clamp(0.0, 1.0) };
    Ok(Nm2iTerms { nm2i, mi, h_p, h_m })
}

pub fn nm2i(p: &Tensor, m: &Tensor) -> Result<f64> {
    Ok(nm2i_from_joint(&joint_distribution(p, m)?)?.nm2i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNm2i {
    pub layer: usize,
    pub nm2i: f64,
    pub mi: f64,
    pub h_p: f64,
    pub h_m: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nm2iReport {
    pub model_tag: String,
    pub eta: f64,
    pub kind: String,
    /// Averaged over every evaluated sample, per layer `1..=L`.
    pub per_layer: Vec<LayerNm2i>,
    /// The same, separately for each missing modality.
    pub per_modality: BTreeMap<String, Vec<LayerNm2i>>,
    /// Mean over layers and samples.
    pub mean: f64,
    pub evaluated: usize,
    pub skipped_count: usize,
}

#[derive(Default, Clone)]
struct Acc {
    sum: Nm2iTerms0,
    n: usize,
}

#[derive(Default, Clone, Copy)]
struct Nm2iTerms0 {
    nm2i: f64,
    mi: f64,
    h_p: f64,
    h_m: f64,
}

impl Acc {
    fn add(&mut self, t: &Nm2iTerms) {
        self.sum.nm2i += t.nm2i;
        self.sum.mi += t.mi;
        self.sum.h_p += t.h_p;
        self.sum.h_m += t.h_m;
        self.n += 1;
    }

    fn finish(&self, layer: usize) -> LayerNm2i {
        let n = self.n.max(1) as f64;
        LayerNm2i {
            layer,
            nm2i: self.sum.nm2i / n,
            mi: self.sum.mi / n,
            h_p: self.sum.h_p / n,
            h_m: self.sum.h_m / n,
            samples: self.n,
        }
    }
}

/// NM²I per layer between the prompt slots of each missing modality and the
/// frozen, unprompted token representations of that modality.
///
/// `test` holds the raw (complete) samples; `table` decides which modality
/// each one is missing. At layer `l` the prompt rows entering the layer are
/// compared with the true modality tokens entering the same layer.
pub fn nm2i_report(
    bb: &Backbone,
    model: &PromptModel,
    test: &[Sample],
    table: &MissingTable,
    model_tag: &str,
) -> Result<Nm2iReport> {
    let cfg = bb.config();
    let mods = &cfg.modalities;
    let (k, layers, d) = (mods.len(), cfg.layers, cfg.d);
    let m_len = model.bank.prompt_len();
    let p_rows = model.bank.rows_per_sample();
    if p_rows == 0 {
        return Err(Error::Contract("NM²I needs a model with prompts".into()));
    }
    let mut pooled = vec![Acc::default(); layers];
    let mut per_mod = vec![vec![Acc::default(); layers]; k];
    let mut skipped = 0;
    let mut evaluated = 0;
    let candidates: Vec<(&Sample, usize)> = test
        .iter()
        .filter_map(|s| match table.pattern(s.id) {
            Pattern::Missing(m) => Some((s, m)),
            Pattern::Complete => None,
        })
        .collect();
    for chunk in candidates.chunks(64) {
        let mut usable = Vec::new();
        for &(s, m) in chunk {
            if s.tokens[m].iter().all(|&t| t == mods[m].placeholder()) {
                skipped += 1;
            } else {
                usable.push((s, m));
            }
        }
        if usable.is_empty() {
            continue;
        }
        let masked: Vec<Sample> = usable
            .iter()
            .map(|&(s, m)| apply_missing(s, Pattern::Missing(m), mods))
            .collect();
        let masked_refs: Vec<&Sample> = masked.iter().collect();
        let raw_refs: Vec<&Sample> = usable.iter().map(|&(s, _)| s).collect();
        let mut g = Graph::no_grad();
        let bound = bb.bind(&mut g);
        let out = prompt_forward(
            &mut g,
            bb,
            &bound,
            model,
            &masked_refs,
            ForwardOpts {
                trace: true,
                ..ForwardOpts::default()
            },
        )?;
        let clean = bb.hidden_states(&raw_refs)?;
        let sc = cfg.content_len();
        for (i, &(_, m)) in usable.iter().enumerate() {
            let off = cfg.modality_offset(m);
            let seq = mods[m].seq_len;
            for l in 1..=layers {
                let prompts = g.value(out.trace.entering[l - 1]);
                let start = (i * p_rows + m * m_len) * d;
                let p = Tensor::new(vec![m_len, d], prompts[start..start + m_len * d].to_vec())?;
                let h = &clean[l - 1];
                let rows = (i * sc + off) * d;
                let t = Tensor::new(vec![seq, d], h.data()[rows..rows + seq * d].to_vec())?;
                let terms = nm2i_from_joint(&joint_distribution(&p, &t)?)?;
                pooled[l - 1].add(&terms);
                per_mod[m][l - 1].add(&terms);
            }
            evaluated += 1;
        }
    }
    let per_layer: Vec<LayerNm2i> = pooled.iter().enumerate().map(|(i, a)| a.finish(i + 1)).collect();
    let mean = if evaluated == 0 {
        0.0
    } else {
        per_layer.iter().map(|l| l.nm2i).sum::<f64>() / layers as f64
    };
    let per_modality = per_mod
        .iter()
        .enumerate()
        .filter(|(_, accs)| accs[0].n > 0)
        .map(|(m, accs)| {
            (
                mods[m].name.clone(),
                accs.iter().enumerate().map(|(i, a)| a.finish(i + 1)).collect(),
            )
        })
        .collect();
    Ok(Nm2iReport {
        model_tag: model_tag.to_string(),
        eta: table.eta,
        kind: table.kind.label(mods),
        per_layer,
        per_modality,
        mean,
        evaluated,
        skipped_count: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint(rows: usize, cols: usize, v: Vec<f64>) -> JointDistribution {
        JointDistribution::new(rows, cols, v).unwrap()
    }

    #[test]
    fn equal_dots_give_uniform_joint() {
        let p = Tensor::filled(&[3, 2], 0.5);
        let m = Tensor::filled(&[4, 2], -1.0);
        let j = joint_distribution(&p, &m).unwrap();
        for v in &j.probs {
            assert!((v - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        // Rows chosen so the dot products are [[0,0],[0,ln 3]].
        let s = 3f64.ln().sqrt();
        let p = Tensor::from_rows(&[vec![0.0, 0.0], vec![s, 0.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![0.0, 1.0], vec![s, 0.0]]).unwrap();
        let j = joint_distribution(&p, &m).unwrap();
        let want = [0.5 / 2.25, 0.5 / 2.25, 0.5 / 2.25, 0.75 / 2.25];
        for (a, b) in j.probs.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = entropy(&[0.25, 0.75]).unwrap();
        assert!((h - (0.25 * 4f64.ln() + 0.75 * (4.0f64 / 3.0).ln())).abs() < 1e-15);
        assert!((h - 0.5623).abs() < 1e-4);
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn marginals_of_diagonal() {
        let j = joint(2, 2, vec![0.3, 0.0, 0.0, 0.7]);
        let (a, b) = marginals(&j);
        assert_eq!(a, vec![0.3, 0.7]);
        assert_eq!(b, vec![0.3, 0.7]);
    }

    #[test]
    fn extremes() {
        let diag = joint(3, 3, vec![1.0 / 3.0, 0.0, 0.0, 0.0, 1.0 / 3.0, 0.0, 0.0, 0.0, 1.0 / 3.0]);
        let t = nm2i_from_joint(&diag).unwrap();
        assert!((t.mi - 3f64.ln()).abs() < 1e-12);
        assert!((t.nm2i - 1.0).abs() < 1e-9);
        let a = [0.2, 0.8];
        let b = [0.1, 0.6, 0.3];
        let prod: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
        let t = nm2i_from_joint(&joint(2, 3, prod)).unwrap();
        assert!(t.nm2i.abs() < 1e-9);
        let point = joint(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(nm2i_from_joint(&point).unwrap().nm2i, 0.0);
    }

    #[test]
    fn permutation_invariance() {
        let p = Tensor::from_rows(&[vec![1.0, -0.5], vec![0.2, 2.0], vec![-1.0, 0.3]]).unwrap();
        let m = Tensor::from_rows(&[vec![0.5, 0.5], vec![-2.0, 1.0]]).unwrap();
        let a = nm2i(&p, &m).unwrap();
        let p2 = Tensor::from_rows(&[vec![-1.0, 0.3], vec![1.0, -0.5], vec![0.2, 2.0]]).unwrap();
        let m2 = Tensor::from_rows(&[vec![-2.0, 1.0], vec![0.5, 0.5]]).unwrap();
        assert!((a - nm2i(&p2, &m2).unwrap()).abs() < 1e-12);
    }
}
