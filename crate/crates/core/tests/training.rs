mod common;

use cll_core::corpus::{ConditionKind, Corpus, Example, LanguageSpec, ReorderRule};
use cll_core::model::{ForwardOptions, TransformerModel, Variant, BOS};
use cll_core::training::{
    extend_with_language, integrate_language, lr_schedule, multi_seed_run, population_variance, train,
    HyperParams, IntegrationOptions, SeedMetrics, Trainer,
};
use cll_core::Error;
use common::{corpus, ids, model, small_config};

const LANGS: [&str; 3] = ["en", "a", "b"];

fn toy_hyper(steps: usize) -> HyperParams {
    HyperParams {
        max_steps: steps,
        warmup_steps: 20,
        peak_lr: 3e-3,
        batch_tokens: 128,
        seed: 4,
        ..HyperParams::default()
    }
}

fn params_of(m: &TransformerModel<f32>) -> Vec<(String, Vec<f32>)> {
    m.params().iter().map(|(k, t)| (k.to_string(), t.data().to_vec())).collect()
}

#[test]
fn same_seed_gives_bit_identical_parameters() {
    let (_, _, data) = corpus(ConditionKind::Centered, &LANGS, 12, 60, 5);
    let run = || {
        let mut m = model::<f32>(small_config(Variant::Fcll, 2), &LANGS, 1);
        let log = train(&mut m, &data.train, &toy_hyper(30)).unwrap();
        (params_of(&m), log)
    };
    let (p1, l1) = run();
    let (p2, l2) = run();
    assert_eq!(p1, p2);
    assert_eq!(l1, l2);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (_, _, data) = corpus(ConditionKind::Centered, &LANGS, 12, 60, 5);
    let mut straight = model::<f32>(small_config(Variant::Sd, 2), &LANGS, 1);
    let full = train(&mut straight, &data.train, &toy_hyper(24)).unwrap();

    let mut resumed = model::<f32>(small_config(Variant::Sd, 2), &LANGS, 1);
    let mut trainer = Trainer::new(toy_hyper(10));
    let first = trainer.run(&mut resumed, &data.train, None, &mut |_| {}).unwrap();
    trainer.hyper.max_steps = 24;
    let second = trainer.run(&mut resumed, &data.train, None, &mut |_| {}).unwrap();
    assert_eq!(params_of(&straight), params_of(&resumed));
    let joined: Vec<_> = first.steps.iter().chain(&second.steps).cloned().collect();
    assert_eq!(joined, full.steps);
}

#[test]
fn freezing_everything_keeps_the_initial_parameters() {
    let (_, _, data) = corpus(ConditionKind::Centered, &LANGS, 12, 30, 5);
    let mut m = model::<f32>(small_config(Variant::Fcll, 2), &LANGS, 1);
    let before = params_of(&m);
    let hyper = HyperParams {
        freeze: vec!["*".into()],
        ..toy_hyper(10)
    };
    train(&mut m, &data.train, &hyper).unwrap();
    assert_eq!(before, params_of(&m));
}

#[test]
fn partial_freeze_is_airtight_and_the_rest_moves() {
    let (_, _, data) = corpus(ConditionKind::Centered, &LANGS, 12, 30, 5);
    let mut m = model::<f32>(small_config(Variant::Fcll, 2), &LANGS, 1);
    let before = params_of(&m);
    let hyper = HyperParams {
        freeze: vec!["decoder.*.cll.*".into(), "encoder.1.*".into()],
        ..toy_hyper(10)
    };
    train(&mut m, &data.train, &hyper).unwrap();
    for ((name, a), (_, b)) in before.iter().zip(params_of(&m)) {
        if name.contains(".cll.") || name.starts_with("encoder.1.") {
            assert_eq!(*a, b, "{name} moved");
        } else if name.ends_with(".W") || name.ends_with("W1") || name == "embed.tokens" {
            assert_ne!(*a, b, "{name} did not move");
        }
    }
}

#[test]
fn logged_learning_rate_follows_the_schedule() {
    let (_, _, data) = corpus(ConditionKind::Centered, &LANGS, 12, 30, 5);
    let mut m = model::<f32>(small_config(Variant::Baseline, 2), &LANGS, 1);
    let hyper = toy_hyper(40);
    let log = train(&mut m, &data.train, &hyper).unwrap();
    assert_eq!(log.steps.len(), 40);
    for (i, rec) in log.steps.iter().enumerate() {
        assert_eq!(rec.step, i + 1);
        assert_eq!(rec.lr, lr_schedule(rec.step, hyper.warmup_steps, hyper.peak_lr));
        assert!(rec.loss.is_finite() && rec.grad_norm.is_finite());
    }
}

#[test]
fn two_hundred_steps_beat_the_uniform_loss() {
    let (_, _, data) = corpus(ConditionKind::Centered, &["en", "a"], 12, 200, 5);
    let mut m = model::<f32>(small_config(Variant::Baseline, 2), &["en", "a"], 1);
    let log = train(&mut m, &data.train, &toy_hyper(200)).unwrap();
    let uniform = (m.vocab().target_support().iter().filter(|&&s| s).count() as f64).ln();
    let tail: f64 = log.steps[180..].iter().map(|s| s.loss).sum::<f64>() / 20.0;
    assert!(tail < uniform, "final loss {tail} vs uniform {uniform}");
    assert!(tail < log.steps[0].loss);
}

fn logits_by_token(m: &TransformerModel<f32>, src: &[&str], lang: &str) -> Vec<(String, f32)> {
    let src = m.source_ids(&ids(src), lang, false).unwrap();
    let mut fwd = m.forward(0, false, false, ForwardOptions::default());
    let enc = fwd.encode(&[src]).unwrap();
    let out = fwd.decode(&enc, &[vec![BOS, m.vocab().id("a:2").unwrap()]], lang).unwrap();
    let v = m.vocab().len();
    let data = fwd.graph.value(out).data().to_vec();
    (0..2 * v)
        .map(|i| (m.vocab().token(i % v).unwrap().to_string(), data[i]))
        .collect()
}

#[test]
fn extension_is_local_and_initializes_from_the_mean() {
    let mut m = model::<f32>(small_config(Variant::Fcll, 2), &LANGS, 1);
    let before = logits_by_token(&m, &["en:1", "en:5", "en:3"], "a");
    let spec = LanguageSpec::new(12, "c", 3, ReorderRule::Identity).unwrap();
    extend_with_language(&mut m, &spec, 1, &IntegrationOptions::default()).unwrap();
    assert!(m.languages().contains("c"));
    let after: std::collections::BTreeMap<String, f32> =
        logits_by_token(&m, &["en:1", "en:5", "en:3"], "a").into_iter().collect();
    // Same source, so every old token keeps its exact logit at the last position.
    let v_old = before.len() / 2;
    for (tok, val) in &before[v_old..] {
        assert_eq!(after.get(tok), Some(val), "{tok}");
    }
    for layer in 1..=2 {
        let get = |lang: &str| m.params().by_name(&format!("decoder.{layer}.cll.lsl.{lang}.W1")).unwrap().data().to_vec();
        let (a, b, c) = (get("a"), get("b"), get("c"));
        for i in 0..c.len() {
            assert_eq!(c[i], (a[i] + b[i]) / 2.0);
        }
        let t = m.params().by_name(&format!("decoder.{layer}.cll.t.c")).unwrap().item();
        assert!((t - 0.1).abs() < 1e-7);
    }
    let spec_dup = LanguageSpec::new(12, "a", 3, ReorderRule::Identity).unwrap();
    assert!(matches!(
        extend_with_language(&mut m, &spec_dup, 1, &IntegrationOptions::default()),
        Err(Error::LanguageAlreadyPresent(_))
    ));
}

fn bilingual(new: &str, partner: &str, n: usize) -> Corpus {
    let mut examples = Vec::new();
    for i in 0..n {
        let x: Vec<String> = (0..4).map(|j| format!("{partner}:{}", (i + j) % 12)).collect();
        let y: Vec<String> = (0..4).map(|j| format!("{new}:{}", (i * 3 + j) % 12)).collect();
        examples.push(Example {
            src_lang: partner.into(),
            tgt_lang: new.into(),
            src: x.clone(),
            tgt: y.clone(),
        });
        examples.push(Example {
            src_lang: new.into(),
            tgt_lang: partner.into(),
            src: y,
            tgt: x,
        });
    }
    Corpus {
        descriptor: "bilingual".into(),
        examples,
    }
}

#[test]
fn integration_keeps_existing_language_layers_frozen() {
    let (_, _, data) = corpus(ConditionKind::Centered, &LANGS, 12, 40, 5);
    let mut m = model::<f32>(small_config(Variant::Fcll, 2), &LANGS, 1);
    train(&mut m, &data.train, &toy_hyper(20)).unwrap();
    let t_before: Vec<_> = m.mixing_weights();
    let spec = LanguageSpec::new(12, "c", 3, ReorderRule::Identity).unwrap();
    let outcome = integrate_language(
        &mut m,
        &spec,
        &bilingual("c", "en", 20),
        &data.train,
        &toy_hyper(15),
        20,
        &IntegrationOptions::default(),
    )
    .unwrap();
    assert_eq!(outcome.frozen_drift, 0.0);
    assert_eq!(outcome.log.steps.len(), 15);
    let expected_lr = lr_schedule(20, 20, 3e-3);
    assert!(outcome.log.steps.iter().all(|s| s.lr == expected_lr));
    assert!(outcome.frozen.iter().any(|n| n == "decoder.1.cll.t.a"));
    assert!(!outcome.frozen.iter().any(|n| n.ends_with(".c") || n.contains(".c.")));
    let t_after = m.mixing_weights();
    for (layer, lang, t) in &t_before {
        let now = t_after.iter().find(|(l, g, _)| l == layer && g == lang).unwrap().2;
        assert_eq!(*t, now, "t of {lang} in layer {layer}");
    }
    assert!(t_after.iter().any(|(_, g, t)| g == "c" && (*t - 0.1).abs() > 0.0));
}

#[test]
fn integration_rejects_bad_inputs() {
    let (_, _, data) = corpus(ConditionKind::Centered, &LANGS, 12, 10, 5);
    let mut m = model::<f32>(small_config(Variant::Fcll, 2), &LANGS, 1);
    let spec = LanguageSpec::new(12, "c", 3, ReorderRule::Identity).unwrap();
    let opts = IntegrationOptions::default();
    let empty = Corpus {
        descriptor: String::new(),
        examples: Vec::new(),
    };
    assert!(matches!(
        integrate_language(&mut m, &spec, &empty, &data.train, &toy_hyper(1), 1, &opts),
        Err(Error::EmptyCorpus)
    ));
    let one_way = bilingual("c", "en", 3).filter(|e| e.src_lang == "en");
    assert!(integrate_language(&mut m, &spec, &one_way, &data.train, &toy_hyper(1), 1, &opts).is_err());
    let dup = LanguageSpec::new(12, "a", 3, ReorderRule::Identity).unwrap();
    assert!(matches!(
        integrate_language(&mut m, &dup, &bilingual("a", "en", 3), &data.train, &toy_hyper(1), 1, &opts),
        Err(Error::LanguageAlreadyPresent(_))
    ));
}

#[test]
fn multi_seed_summary() {
    let s = multi_seed_run(&[1, 2, 3], |seed| {
        Ok(SeedMetrics {
            seed,
            supervised_bleu: 40.0,
            zero_shot_bleu: seed as f64,
        })
    })
    .unwrap();
    assert_eq!(s.rows.len(), 3);
    assert_eq!(s.supervised_variance, 0.0);
    let xs = [1.0, 2.0, 3.0];
    let m = xs.iter().sum::<f64>() / 3.0;
    let hand = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0;
    assert!((s.zero_shot_variance - hand).abs() < 1e-12);
    assert_eq!(population_variance(&xs), s.zero_shot_variance);
    assert!(multi_seed_run(&[1], |seed| Ok(SeedMetrics {
        seed,
        supervised_bleu: 0.0,
        zero_shot_bleu: 0.0
    }))
    .is_err());
}
