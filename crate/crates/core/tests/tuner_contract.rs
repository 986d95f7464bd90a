mod common;

use aoept_core::backbone::{cross_entropy, Backbone};
use aoept_core::dataset::{apply_missing, MissingKind, Pattern, Sample};
use aoept_core::mcp::BankKind;
use aoept_core::tuner::{
    classification_metrics, classify, evaluate, predict, prompt_forward, train, ForwardOpts, PromptModel,
    TrainConfig,
};
use aoept_core::Error;
use aoept_tensor::{Graph, Tensor};
use common::{aoept, fixture};

fn trace(bb: &Backbone, model: &PromptModel, batch: &[&Sample]) -> (Graph, aoept_core::tuner::ForwardOut) {
    let mut g = Graph::no_grad();
    let bound = bb.bind(&mut g);
    let opts = ForwardOpts {
        trace: true,
        ..ForwardOpts::default()
    };
    let out = prompt_forward(&mut g, bb, &bound, model, batch, opts).unwrap();
    (g, out)
}

#[test]
fn every_layer_sees_all_prompts_plus_content() {
    let f = fixture(2, 3);
    let train_set = f.masked(&f.splits.train, 50.0, MissingKind::Single(0), 1);
    let coll = f.collections(&train_set);
    for depth in [1, 2, 3] {
        let model = f.model(aoept(), 4, depth, Some(&coll));
        let batch: Vec<&Sample> = train_set.iter().take(5).collect();
        let (_, out) = trace(&f.bb, &model, &batch);
        assert_eq!(out.trace.seq_lens, vec![2 * 4 + 6; 3], "depth {depth}");
    }
}

#[test]
fn fresh_prompts_up_to_depth_then_propagation() {
    let f = fixture(2, 4);
    let train_set = f.masked(&f.splits.train, 50.0, MissingKind::Single(0), 1);
    let coll = f.collections(&train_set);
    let model = f.model(aoept(), 3, 2, Some(&coll));
    let batch: Vec<&Sample> = train_set.iter().take(4).collect();
    let (g, out) = trace(&f.bb, &model, &batch);
    let t = &out.trace;
    for l in 2..=4 {
        let entering = g.value(t.entering[l - 1]);
        let exiting_prev = g.value(t.exiting[l - 2]);
        if l <= 2 {
            assert_ne!(entering, exiting_prev, "layer {l} must be freshly instantiated");
        } else {
            assert_eq!(entering, exiting_prev, "layer {l} must inherit the previous slots");
        }
    }
}

#[test]
fn full_depth_has_no_propagation_and_excess_depth_is_rejected() {
    let f = fixture(2, 2);
    let train_set = f.masked(&f.splits.train, 50.0, MissingKind::Single(1), 1);
    let coll = f.collections(&train_set);
    let model = f.model(aoept(), 2, 2, Some(&coll));
    let batch: Vec<&Sample> = train_set.iter().take(3).collect();
    let (g, out) = trace(&f.bb, &model, &batch);
    assert_eq!(out.trace.entering.len(), 2);
    assert_ne!(g.value(out.trace.entering[1]), g.value(out.trace.exiting[0]));
    // Content rows after the last layer exclude every prompt slot.
    assert_eq!(g.shape(*out.trace.content.last().unwrap()), &[3 * 6, 8]);

    let mut deep = f.model(BankKind::Random, 2, 2, None);
    deep.bank.config.depth = 3;
    let mut g = Graph::no_grad();
    let bound = f.bb.bind(&mut g);
    let err = prompt_forward(&mut g, &f.bb, &bound, &deep, &batch, ForwardOpts::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn zero_gates_give_half_the_constructed_prompt() {
    let f = fixture(2, 3);
    let train_set = f.masked(&f.splits.train, 50.0, MissingKind::Single(0), 1);
    let coll = f.collections(&train_set);
    let mut model = f.model(aoept(), 4, 2, Some(&coll));
    let gate_ids: Vec<_> = model
        .bank
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with("gate."))
        .map(|(id, _, _)| id)
        .collect();
    for id in gate_ids {
        model.bank.params.get_mut(id).data_mut().fill(0.0);
    }
    let batch: Vec<&Sample> = train_set.iter().take(3).collect();
    let (g, out) = trace(&f.bb, &model, &batch);
    let entering = g.value(out.trace.entering[0]);
    let mut g2 = Graph::no_grad();
    for m in 0..2 {
        let p = model.bank.global_prompt(&mut g2, m, 1).unwrap();
        let p = g2.value(p).to_vec();
        for i in 0..3 {
            let start = (i * 8 + m * 4) * 8;
            let got = &entering[start..start + 4 * 8];
            let want: Vec<f64> = p.iter().map(|v| 0.5 * v).collect();
            assert_eq!(got, &want[..], "sample {i} modality {m}");
        }
    }
}

#[test]
fn backbone_is_untouched_by_training() {
    let f = fixture(2, 3);
    let train_set = f.masked(&f.splits.train, 70.0, MissingKind::Single(0), 1);
    let val = f.masked(&f.splits.val, 70.0, MissingKind::Single(0), 2);
    let coll = f.collections(&train_set);
    let mut model = f.model(aoept(), 3, 2, Some(&coll));
    let before = f.bb.checksum();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train(&f.bb, &mut model, &train_set, &val, &cfg).unwrap();
    assert_eq!(f.bb.checksum(), before);
    assert!(f.bb.params().iter().all(|(_, _, t)| t.grad().is_none()));
    assert!(out.trainable_params < out.backbone_params);

    // One backward pass by hand: only bank and head receive gradients.
    let batch: Vec<&Sample> = train_set.iter().take(8).collect();
    let mut g = Graph::new();
    let bound = f.bb.bind(&mut g);
    let fw = prompt_forward(&mut g, &f.bb, &bound, &model, &batch, ForwardOpts::default()).unwrap();
    let loss = cross_entropy(&mut g, fw.logits, &batch).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut bb_copy = f.bb.params().clone();
    bb_copy.absorb(&grads).unwrap();
    assert!(bb_copy.iter().all(|(_, _, t)| t.grad().is_none()));
}

#[test]
fn unfrozen_backbone_is_refused() {
    let f = fixture(2, 2);
    let raw = Backbone::init(f.bb.config().clone(), 1).unwrap();
    let mut model = f.model(BankKind::Empty, 2, 1, None);
    let err = train(&raw, &mut model, &f.splits.train, &f.splits.val, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let f = fixture(2, 2);
    let mut model = f.model(BankKind::Random, 2, 1, None);
    let id = model.bank.params.iter().next().unwrap().0;
    model.bank.params.get_mut(id).data_mut()[0] = f64::NAN;
    let train_set = f.masked(&f.splits.train, 100.0, MissingKind::Single(0), 1);
    let err = train(&f.bb, &mut model, &train_set, &f.splits.val, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Numeric { epoch: 1, .. }), "{err}");
}

#[test]
fn random_prompts_ignore_the_sample() {
    // The baseline prompt is a function of the pattern alone.
    let f = fixture(2, 3);
    let model = f.model(BankKind::Random, 3, 2, None);
    let p = Pattern::Missing(0);
    let batch: Vec<Sample> = f.splits.test.iter().take(6).map(|s| apply_missing(s, p, &f.mods)).collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let (g, out) = trace(&f.bb, &model, &refs);
    for l in 0..2 {
        let e = g.value(out.trace.entering[l]);
        let rows = 6 * 8;
        for i in 1..6 {
            assert_eq!(&e[i * rows..(i + 1) * rows], &e[..rows], "layer {} sample {i}", l + 1);
        }
    }
}

#[test]
fn instance_prompts_vary_with_the_observed_modality() {
    // Generic gating parameters give per-sample prompts.
    let f = fixture(2, 3);
    let train_set = f.masked(&f.splits.train, 50.0, MissingKind::Single(0), 1);
    let coll = f.collections(&train_set);
    let model = f.model(aoept(), 3, 2, Some(&coll));
    let p = Pattern::Missing(0);
    let batch: Vec<Sample> = f.splits.test.iter().take(6).map(|s| apply_missing(s, p, &f.mods)).collect();
    let refs: Vec<&Sample> = batch.iter().collect();
    let (g, out) = trace(&f.bb, &model, &refs);
    let e = g.value(out.trace.entering[0]);
    let rows = 6 * 8;
    let mean: Vec<f64> = (0..rows).map(|j| (0..6).map(|i| e[i * rows + j]).sum::<f64>() / 6.0).collect();
    let var: f64 = (0..6)
        .flat_map(|i| (0..rows).map(move |j| (i, j)))
        .map(|(i, j)| (e[i * rows + j] - mean[j]).powi(2))
        .sum::<f64>()
        / (6 * rows) as f64;
    assert!(var > 1e-12, "prompt variance {var}");
}

#[test]
fn zero_head_gives_uniform_logits_and_row_order_does_not_matter() {
    let f = fixture(2, 2);
    let model = f.model(BankKind::Empty, 2, 1, None);
    let batch: Vec<&Sample> = f.splits.test.iter().take(4).collect();
    let mut g = Graph::no_grad();
    let bound = f.bb.bind(&mut g);
    let out = prompt_forward(&mut g, &f.bb, &bound, &model, &batch, ForwardOpts::default()).unwrap();
    assert!(g.value(out.logits).iter().all(|&v| v == 0.0));
    let ce = cross_entropy(&mut g, out.logits, &batch).unwrap();
    assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-12);

    let mut trained = model.clone();
    let w = trained.head.id("head.w").unwrap();
    for (i, v) in trained.head.get_mut(w).data_mut().iter_mut().enumerate() {
        *v = ((i * 7 % 11) as f64 - 5.0) / 10.0;
    }
    let h = Tensor::from_rows(&(0..7).map(|r| (0..8).map(|c| ((r * 8 + c) as f64).sin()).collect()).collect::<Vec<_>>())
        .unwrap();
    let a = classify(&h, 2, &trained).unwrap();
    assert_eq!(a.shape(), &[4]);
    // Swap two content rows of the "image" block.
    let mut rows: Vec<Vec<f64>> = (0..7).map(|r| h.row(r).to_vec()).collect();
    rows.swap(5, 6);
    let b = classify(&Tensor::from_rows(&rows).unwrap(), 2, &trained).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let f = fixture(2, 3);
    let train_set = f.masked(&f.splits.train, 70.0, MissingKind::Single(0), 1);
    let val = f.masked(&f.splits.val, 70.0, MissingKind::Single(0), 2);
    let test = f.masked(&f.splits.test, 70.0, MissingKind::Single(0), 3);
    let coll = f.collections(&train_set);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = f.model(aoept(), 3, 2, Some(&coll));
        let out = train(&f.bb, &mut model, &train_set, &val, &cfg).unwrap();
        (out, evaluate(&f.bb, &model, &test).unwrap(), predict(&f.bb, &model, &test).unwrap())
    };
    let (a, ra, pa) = run();
    let (b, rb, pb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(pa, pb);
    let first = &a.history[0];
    let last = a.history.last().unwrap();
    assert!(
        last.loss_ce + last.loss_cr < first.loss_ce + first.loss_cr,
        "{first:?} -> {last:?}"
    );
}

#[test]
fn metric_reference_points() {
    let labels = [0, 0, 0, 1, 2, 1, 0];
    let constant = vec![0; labels.len()];
    let (acc, _) = classification_metrics(&constant, &labels, 3);
    assert_eq!(acc, 4.0 / 7.0);
    let (acc, f1) = classification_metrics(&labels, &labels, 3);
    assert_eq!((acc, f1), (1.0, 1.0));
}
