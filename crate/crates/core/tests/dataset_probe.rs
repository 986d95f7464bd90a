use aoept_core::dataset::{generate_synthetic, GenConfig, Sample};

// Multinomial logistic regression on token counts of one modality.
fn fit_probe(train: &[Sample], m: usize, vocab: usize, classes: usize) -> Vec<f64> {
    let dim = vocab + 1;
    let mut w = vec![0.0; classes * dim];
    let feats: Vec<Vec<f64>> = train.iter().map(|s| bag(s, m, vocab)).collect();
    for _ in 0..300 {
        let mut grad = vec![0.0; classes * dim];
        for (x, s) in feats.iter().zip(train) {
            let p = softmax(&scores(&w, x, classes));
            for c in 0..classes {
                let err = p[c] - f64::from(u8::from(c == s.label));
                for j in 0..dim {
                    grad[c * dim + j] += err * x[j];
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * gi / train.len() as f64;
        }
    }
    w
}

fn bag(s: &Sample, m: usize, vocab: usize) -> Vec<f64> {
    let mut x = vec![0.0; vocab + 1];
    for &t in &s.tokens[m] {
        x[t as usize] += 1.0 / s.tokens[m].len() as f64;
    }
    x[vocab] = 1.0;
    x
}

fn scores(w: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let dim = x.len();
    (0..classes).map(|c| (0..dim).map(|j| w[c * dim + j] * x[j]).sum()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn each_modality_alone_predicts_the_label() {
    let cfg = GenConfig::default();
    let splits = generate_synthetic(&cfg).unwrap();
    let chance = 1.0 / cfg.num_classes as f64;
    for (m, spec) in cfg.modalities.iter().enumerate() {
        let w = fit_probe(&splits.train, m, spec.vocab, cfg.num_classes);
        let hits = splits
            .test
            .iter()
            .filter(|s| {
                let z = scores(&w, &bag(s, m, spec.vocab), cfg.num_classes);
                let best = (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
                best == s.label
            })
            .count();
        let acc = hits as f64 / splits.test.len() as f64;
        assert!(acc > 2.0 * chance, "{}: probe accuracy {acc}", spec.name);
    }
}

#[test]
fn splits_are_disjoint_and_reproducible() {
    let cfg = GenConfig {
        n_pretrain: 50,
        ..GenConfig::default()
    };
    let a = generate_synthetic(&cfg).unwrap();
    let b = generate_synthetic(&cfg).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.pretrain, b.pretrain);
    let mut ids: Vec<u64> = [&a.train, &a.val, &a.test, &a.pretrain]
        .iter()
        .flat_map(|s| s.iter().map(|x| x.id))
        .collect();
    let n = ids.len();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), n);
    assert_eq!(a.pretraining_corpus().len(), 50);
}
