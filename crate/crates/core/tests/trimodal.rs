mod common;

use aoept_core::backbone::pool_rows;
use aoept_core::dataset::{apply_missing, MissingKind, Pattern, Sample};
use aoept_core::instantiation::{instantiate, instantiate_multi, GatingMlp};
use aoept_core::tuner::{evaluate, prompt_forward, train, ForwardOpts, TrainConfig};
use aoept_tensor::{Graph, Tensor};
use common::{aoept, fixture};

#[test]
fn three_modalities_train_end_to_end() {
    let f = fixture(3, 3);
    let train_set = f.masked(&f.splits.train, 60.0, MissingKind::Each, 1);
    let val = f.masked(&f.splits.val, 60.0, MissingKind::Each, 2);
    let test = f.masked(&f.splits.test, 60.0, MissingKind::Each, 3);
    for p in [Pattern::Missing(0), Pattern::Missing(1), Pattern::Missing(2)] {
        assert!(train_set.iter().any(|s| s.pattern == p));
    }
    let coll = f.collections(&train_set);
    assert_eq!(coll.layers(), 3);
    let mut model = f.model(aoept(), 3, 2, Some(&coll));
    let before = f.bb.checksum();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train(&f.bb, &mut model, &train_set, &val, &cfg).unwrap();
    assert_eq!(f.bb.checksum(), before);
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().all(|h| h.loss_cr > 0.0));
    let report = evaluate(&f.bb, &model, &test).unwrap();
    assert_eq!(report.per_pattern.values().map(|p| p.n).sum::<usize>(), test.len());
}

#[test]
fn prompt_is_gated_by_the_observed_partner() {
    // With text missing, the image prompt is conditioned on audio alone.
    let f = fixture(3, 2);
    let train_set = f.masked(&f.splits.train, 50.0, MissingKind::Each, 1);
    let coll = f.collections(&train_set);
    let model = f.model(aoept(), 2, 1, Some(&coll));
    let sample = apply_missing(&f.splits.test[0], Pattern::Missing(0), &f.mods);
    let batch: Vec<&Sample> = vec![&sample];

    let mut g = Graph::no_grad();
    let bound = f.bb.bind(&mut g);
    let opts = ForwardOpts {
        trace: true,
        ..ForwardOpts::default()
    };
    let out = prompt_forward(&mut g, &f.bb, &bound, &model, &batch, opts).unwrap();
    let entering = g.value(out.trace.entering[0]).to_vec();
    let m = 2;
    let d = 8;
    let got = &entering[m * d..2 * m * d];

    let h0 = f.bb.embed_graph(&mut g, &bound, &batch).unwrap();
    let cond = pool_rows(&mut g, h0, &f.bb.modality_rows(1, 0, 2)).unwrap();
    let cond = Tensor::vector(g.value(cond).to_vec());
    let prompt = model.bank.global_prompt(&mut g, 1, 1).unwrap();
    let prompt = g.tensor(prompt);
    let param = |part: &str| {
        let id = model.bank.params.id(&format!("gate.image.from.audio.l1.{part}")).unwrap();
        model.bank.params.get(id).clone()
    };
    let gmlp = GatingMlp {
        w1: param("w1"),
        b1: param("b1"),
        w2: param("w2"),
        b2: param("b2"),
    };
    let want = instantiate(&prompt, &cond, &gmlp).unwrap();
    assert_eq!(got, want.tensor.data());
    assert!(want.gate.data().iter().all(|&v| v > 0.0 && v < 1.0));

    let multi = instantiate_multi(&prompt, std::slice::from_ref(&cond), &[&gmlp]).unwrap();
    assert_eq!(multi, want);
}
