use std::fs;

use cll::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use cll::config::ExperimentConfig;
use cll::corpus_io::{build_corpus, load_corpus, read_bundle, save_corpus, write_bundle};
use cll::hash::file_hash;
use cll::Error;
use cll_core::model::{LanguageSet, TransformerModel, Variant};
use cll_core::training::{HyperParams, Trainer};

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.languages = ["en", "a", "b"].map(String::from).to_vec();
    c.data.n_per_direction = 40;
    c.data.n_test = 3;
    c.data.base_vocab = 12;
    c.model.d_model = 16;
    c.model.ffn_inner = 16;
    c.model.heads = 2;
    c.model.variant = Variant::Sd;
    c
}

fn trained(steps: usize) -> (TransformerModel<f32>, Trainer, cll_core::corpus::Corpus) {
    let cfg = small();
    let (condition, registry, data) =
        build_corpus(&cfg.language_recipe(), cfg.data.condition, &cfg.extra_pairs().unwrap(), &cfg.corpus_spec()).unwrap();
    let mut model = TransformerModel::new(
        cfg.model.model_config().unwrap(),
        condition.languages.clone(),
        registry.vocab(),
        5,
    )
    .unwrap();
    let hyper = HyperParams {
        max_steps: steps,
        warmup_steps: 2,
        batch_tokens: 64,
        ..HyperParams::default()
    };
    let mut trainer = Trainer::new(hyper);
    trainer.run(&mut model, &data.train, None, &mut |_| {}).unwrap();
    (model, trainer, data.train)
}

fn flat(m: &TransformerModel<f32>) -> Vec<(String, Vec<u32>)> {
    m.params()
        .iter()
        .map(|(k, t)| (k.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let (model, trainer, _) = trained(3);
    let prov = serde_json::json!({"note": "x"});
    let bytes = encode(&model, Some(&trainer), &prov).unwrap();
    let back = decode(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(flat(&back.model), flat(&model));
    assert_eq!(back.model.config(), model.config());
    assert_eq!(back.model.vocab(), model.vocab());
    assert_eq!(back.provenance, prov);
    let t = back.trainer.unwrap();
    assert_eq!(t.step, 3);
    assert_eq!(t.hyper, trainer.hyper);
    assert_eq!(t.adam.steps, trainer.adam.steps);
    assert_eq!(t.adam.m, trainer.adam.m);
    assert_eq!(t.adam.v, trainer.adam.v);
    // Encoding is deterministic.
    assert_eq!(encode(&back.model, Some(&t), &prov).unwrap(), bytes);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (straight, _, _) = trained(6);
    let (model, trainer, corpus) = trained(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &model, Some(&trainer), &serde_json::Value::Null).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let (mut model, mut trainer) = (ck.model, ck.trainer.unwrap());
    trainer.hyper.max_steps = 6;
    trainer.run(&mut model, &corpus, None, &mut |_| {}).unwrap();
    assert_eq!(flat(&model), flat(&straight));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (model, trainer, _) = trained(1);
    let bytes = encode(&model, Some(&trainer), &serde_json::Value::Null).unwrap();
    let is_checkpoint_error = |b: &[u8]| matches!(decode(b, std::path::Path::new("mem")), Err(Error::Checkpoint { .. }));
    assert!(is_checkpoint_error(&bytes[..bytes.len() - 1]));
    assert!(is_checkpoint_error(&[bytes.clone(), vec![0]].concat()));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(is_checkpoint_error(&magic));
    let mut version = bytes.clone();
    version[8] = 9;
    assert!(is_checkpoint_error(&version));
    assert!(is_checkpoint_error(&bytes[..5]));
}

#[test]
fn bundles_verify_their_hashes() {
    let cfg = small();
    let recipe = cfg.language_recipe();
    let spec = cfg.corpus_spec();
    let (condition, _, data) = build_corpus(&recipe, cfg.data.condition, &Default::default(), &spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_bundle(dir.path(), &recipe, &condition, &spec, &data, serde_json::Value::Null).unwrap();
    let bundle = read_bundle(dir.path()).unwrap();
    assert_eq!(bundle.data.train, data.train);
    assert_eq!(bundle.data.test, data.test);
    assert_eq!(bundle.manifest, manifest);
    assert_eq!(bundle.manifest.condition, condition);
    for f in &manifest.train {
        assert_eq!(file_hash(&dir.path().join(&f.path)).unwrap(), f.hash);
    }
    assert_eq!(
        LanguageSet::centered(cfg.data.languages.clone()).unwrap(),
        bundle.manifest.languages.language_set().unwrap()
    );

    let victim = dir.path().join(&manifest.test[0].path);
    let mut text = fs::read_to_string(&victim).unwrap();
    text.push('\n');
    fs::write(&victim, text).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(Error::Integrity { .. })));
}

#[test]
fn corpus_files_round_trip() {
    let (_, _, corpus) = trained(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tsv");
    save_corpus(&path, &corpus).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), corpus);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        n += 1;
    }
    assert!(n >= 3);
}
