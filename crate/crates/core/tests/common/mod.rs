#![allow(dead_code)]

use cll_core::corpus::{
    build_condition, generate_corpus, make_languages, ConditionKind, CorpusSpec, DataCondition, GeneratedCorpus,
    LanguageRegistry, LengthRange,
};
use cll_core::model::{LanguageSet, ModelConfig, TransformerModel, Variant};
use cll_core::Real;

pub fn ids(langs: &[&str]) -> Vec<String> {
    langs.iter().map(|s| s.to_string()).collect()
}

pub fn registry(langs: &[&str], base_vocab: usize) -> LanguageRegistry {
    LanguageRegistry::new(make_languages(&ids(langs), base_vocab, 11).unwrap()).unwrap()
}

pub fn small_config(variant: Variant, layers: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(variant, layers, 16, 32, 2);
    cfg.lsl_inner = 8;
    cfg.max_positions = 64;
    cfg
}

/// Untrained model over a centered language set (first language central).
pub fn model<T: Real>(cfg: ModelConfig, langs: &[&str], seed: u64) -> TransformerModel<T> {
    let reg = registry(langs, 12);
    TransformerModel::new(cfg, LanguageSet::centered(ids(langs)).unwrap(), reg.vocab(), seed).unwrap()
}

pub fn corpus(kind: ConditionKind, langs: &[&str], base_vocab: usize, n: usize, n_test: usize) -> (DataCondition, LanguageRegistry, GeneratedCorpus) {
    let reg = registry(langs, base_vocab);
    let set = match kind {
        ConditionKind::Centered => LanguageSet::centered(ids(langs)).unwrap(),
        _ => LanguageSet::non_centered_only(ids(langs)).unwrap(),
    };
    let cond = build_condition(kind, &set, &Default::default()).unwrap();
    let spec = CorpusSpec {
        n_per_direction: n,
        n_test,
        lengths: LengthRange { min: 3, max: 6 },
        seed: 5,
    };
    let data = generate_corpus(&cond, &reg, &spec).unwrap();
    (cond, reg, data)
}
