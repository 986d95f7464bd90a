//! Central finite-difference checks for graph operations.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward implementations it audits.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Builds an op from its input vars; the output may have any shape.
pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

/// A named operation with its input generator.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Box<dyn Fn(&mut dyn rand::RngCore) -> Vec<Tensor> + Send + Sync>,
    pub build: Builder,
}

/// Evaluates `sum(w ⊙ op(inputs))` without recording gradients.
fn probe(build: &Builder, inputs: &[Tensor], weights: &[f64]) -> Result<f64> {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).iter().zip(weights).map(|(a, b)| a * b).sum())
}

/// Maximum over inputs of `‖autodiff − fd‖∞ / max(‖autodiff‖∞, ‖fd‖∞, 1e-8)`.
pub fn max_relative_error<R: Rng + ?Sized>(
    build: &Builder,
    inputs: &[Tensor],
    h: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_grad()))
        .collect();
    let out = build(&mut g, &vars)?;
    let n = g.value(out).len();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv = g.constant(&Tensor::new(g.shape(out).to_vec(), weights.clone())?);
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *slot = (probe(build, &plus, &weights)? - probe(build, &minus, &weights)?) / (2.0 * h);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(1e-8, f64::max);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

fn randn(rng: &mut dyn rand::RngCore, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(rng: &mut dyn rand::RngCore, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    t
}

macro_rules! case {
    ($name:expr, |$r:ident| $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
        OpCase {
            name: $name,
            inputs: Box::new(move |$r: &mut dyn rand::RngCore| $inputs),
            build: Box::new(move |$g: &mut Graph, $v: &[Var]| $body),
        }
    };
}

/// Every differentiable graph operation, with representative shapes.
pub fn standard_cases() -> Vec<OpCase> {
    vec![
        case!("add", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| g.add(v[0], v[1])),
        case!("sub", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| g.sub(v[0], v[1])),
        case!("mul", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| g.mul(v[0], v[1])),
        case!("scale", |r| vec![randn(r, &[5])], |g, v| g.scale(v[0], -1.7)),
        case!("add_scalar", |r| vec![randn(r, &[5])], |g, v| g.add_scalar(v[0], 0.3)),
        case!("matmul", |r| vec![randn(r, &[3, 3]), randn(r, &[3, 3])], |g, v| g.matmul(v[0], v[1])),
        case!("matmul_rect", |r| vec![randn(r, &[2, 4]), randn(r, &[4, 3])], |g, v| g.matmul(v[0], v[1])),
        case!("transpose", |r| vec![randn(r, &[2, 3])], |g, v| g.transpose(v[0])),
        case!("sigmoid", |r| vec![randn(r, &[6])], |g, v| g.sigmoid(v[0])),
        case!("exp", |r| vec![randn(r, &[6])], |g, v| g.exp(v[0])),
        case!("log", |r| vec![positive(r, &[6])], |g, v| g.log(v[0])),
        case!("gelu", |r| vec![randn(r, &[8])], |g, v| g.gelu(v[0])),
        case!("sum", |r| vec![randn(r, &[2, 3])], |g, v| g.sum(v[0])),
        case!("mean", |r| vec![randn(r, &[2, 3])], |g, v| g.mean(v[0])),
        case!("mean_rows", |r| vec![randn(r, &[4, 3])], |g, v| g.mean_rows(v[0])),
        case!("softmax_vec", |r| vec![randn(r, &[5])], |g, v| g.softmax(v[0], 0)),
        case!("softmax_axis0", |r| vec![randn(r, &[3, 4])], |g, v| g.softmax(v[0], 0)),
        case!("softmax_axis1", |r| vec![randn(r, &[3, 4])], |g, v| g.softmax(v[0], 1)),
        case!("log_softmax_rows", |r| vec![randn(r, &[3, 4])], |g, v| g.log_softmax_rows(v[0])),
        case!("concat_axis0", |r| vec![randn(r, &[2, 3]), randn(r, &[1, 3])], |g, v| g.concat(v, 0)),
        case!("concat_axis1", |r| vec![randn(r, &[2, 3]), randn(r, &[2, 2])], |g, v| g.concat(v, 1)),
        case!("slice_axis0", |r| vec![randn(r, &[4, 3])], |g, v| g.slice(v[0], 0, 1, 3)),
        case!("slice_axis1", |r| vec![randn(r, &[3, 4])], |g, v| g.slice(v[0], 1, 2, 4)),
        case!("reshape", |r| vec![randn(r, &[2, 3])], |g, v| g.reshape(v[0], &[3, 2])),
        case!("add_row", |r| vec![randn(r, &[3, 4]), randn(r, &[4])], |g, v| g.add_row(v[0], v[1])),
        case!("mul_row", |r| vec![randn(r, &[3, 4]), randn(r, &[4])], |g, v| g.mul_row(v[0], v[1])),
        case!(
            "linear",
            |r| vec![randn(r, &[3, 4]), randn(r, &[4, 2]), randn(r, &[2])],
            |g, v| g.linear(v[0], v[1], v[2])
        ),
        case!(
            "layer_norm",
            |r| vec![randn(r, &[3, 5]), randn(r, &[5]), randn(r, &[5])],
            |g, v| g.layer_norm(v[0], v[1], v[2])
        ),
        case!(
            "attention_1head",
            |r| vec![randn(r, &[3, 4]), randn(r, &[5, 4]), randn(r, &[5, 4])],
            |g, v| g.attention(v[0], v[1], v[2], 1)
        ),
        case!(
            "attention_2head",
            |r| vec![randn(r, &[4, 6]), randn(r, &[4, 6]), randn(r, &[4, 6])],
            |g, v| g.attention(v[0], v[1], v[2], 2)
        ),
        case!(
            "block_attention",
            |r| vec![randn(r, &[6, 4]), randn(r, &[4, 4]), randn(r, &[4, 4])],
            |g, v| g.block_attention(v[0], v[1], v[2], 2, 2)
        ),
        case!("normalize_rows", |r| vec![randn(r, &[3, 4])], |g, v| g.normalize_rows(v[0])),
        case!("gather_rows", |r| vec![randn(r, &[5, 3])], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2])),
        case!("pick", |r| vec![randn(r, &[3, 4])], |g, v| g.pick(v[0], &[0, 5, 5, 11])),
        case!(
            "softmax_matmul_sigmoid_chain",
            |r| vec![randn(r, &[3, 4]), randn(r, &[4, 2])],
            |g, v| {
                let s = g.softmax(v[0], 1)?;
                let m = g.matmul(s, v[1])?;
                g.sigmoid(m)
            }
        ),
    ]
}
