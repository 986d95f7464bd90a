#![allow(dead_code)]

use aoept_core::backbone::{pretrain_backbone, Backbone, BackboneConfig, PretrainConfig};
use aoept_core::collections::{CollectionSet, RefineConfig};
use aoept_core::dataset::{
    build_missing_table, generate_synthetic, GenConfig, MissingKind, ModalitySpec, Sample, Splits,
};
use aoept_core::mcp::{BankConfig, BankKind, McpBank, McpMethod};
use aoept_core::tuner::PromptModel;

pub struct Fixture {
    pub bb: Backbone,
    pub splits: Splits,
    pub mods: Vec<ModalitySpec>,
    pub names: Vec<String>,
}

/// A small pretrained backbone over `k` modalities.
pub fn fixture(k: usize, layers: usize) -> Fixture {
    let all = ["text", "image", "audio"];
    let mods: Vec<ModalitySpec> = all[..k].iter().map(|n| ModalitySpec::new(n, 3, 8)).collect();
    let gen = GenConfig {
        n_train: 64,
        n_val: 16,
        n_test: 24,
        num_classes: 4,
        modalities: mods.clone(),
        rho: 0.9,
        purity: vec![0.7; k],
        n_pretrain: 0,
        seed: 3,
    };
    let splits = generate_synthetic(&gen).unwrap();
    let cfg = BackboneConfig {
        layers,
        d: 8,
        heads: 2,
        modalities: mods.clone(),
        num_classes: 4,
        mlp_ratio: 2,
    };
    let pre = PretrainConfig {
        epochs: 2,
        ..PretrainConfig::default()
    };
    let (bb, _) = pretrain_backbone(cfg, &splits.train, &pre).unwrap();
    let names = mods.iter().map(|m| m.name.clone()).collect();
    Fixture {
        bb,
        splits,
        mods,
        names,
    }
}

impl Fixture {
    /// `split` with η% of samples missing `kind`.
    pub fn masked(&self, split: &[Sample], eta: f64, kind: MissingKind, seed: u64) -> Vec<Sample> {
        let ids: Vec<u64> = split.iter().map(|s| s.id).collect();
        build_missing_table(&ids, eta, kind, seed, self.mods.len())
            .unwrap()
            .apply(split, &self.mods)
    }

    pub fn collections(&self, train: &[Sample]) -> CollectionSet {
        let cfg = RefineConfig {
            n_proto: 6,
            iters: 50,
            ..RefineConfig::default()
        };
        CollectionSet::build(&self.bb, train, &cfg).unwrap()
    }

    pub fn model(&self, kind: BankKind, m: usize, depth: usize, coll: Option<&CollectionSet>) -> PromptModel {
        let cfg = BankConfig {
            prompt_len: m,
            depth,
            reduction: 2,
            ..BankConfig::default()
        };
        let bank = McpBank::new(kind, cfg, &self.names, 8, coll).unwrap();
        PromptModel::new(bank, 4)
    }
}

pub fn aoept() -> BankKind {
    BankKind::Mcp {
        method: McpMethod::Attention,
        instantiate: true,
    }
}
