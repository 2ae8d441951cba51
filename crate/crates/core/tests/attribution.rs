mod common;

use std::collections::BTreeSet;

use cll_core::attribution::{
    ablate_lsl, attribute, dump_mixing_weights, export_attention, rollback_score, AttributionRequest,
};
use cll_core::corpus::{ConditionKind, Example};
use cll_core::evaluation::beam_search;
use cll_core::model::{Component, ForwardOptions, TransformerModel, Variant};
use cll_core::training::{train, HyperParams};
use cll_core::Error;
use common::{corpus, ids, model, small_config};

const LANGS: [&str; 3] = ["en", "a", "b"];

fn zero_lsl(m: &mut TransformerModel<f64>, lang: &str) {
    let targets: Vec<_> = m
        .params()
        .ids()
        .filter(|&id| m.params().name(id).contains(&format!(".cll.lsl.{lang}.")))
        .collect();
    assert!(!targets.is_empty());
    for id in targets {
        m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn snapshot(m: &TransformerModel<f64>) -> Vec<Vec<f64>> {
    m.params().iter().map(|(_, t)| t.data().to_vec()).collect()
}

fn decode_all(m: &TransformerModel<f64>, lang: &str, opts: &ForwardOptions) -> Vec<Vec<String>> {
    (0..6)
        .map(|i| {
            let src: Vec<String> = (0..4).map(|j| format!("a:{}", (i * 5 + j * 3) % 12)).collect();
            beam_search(m, &src, lang, 3, false, opts).unwrap()
        })
        .collect()
}

#[test]
fn ablation_leaves_the_central_direction_and_the_checkpoint_untouched() {
    let m = model::<f64>(small_config(Variant::Fcll, 2), &LANGS, 3);
    let before = snapshot(&m);
    let all = ablate_lsl(&m, None).unwrap();
    assert_eq!(all.ablated, ["a", "b"].iter().map(|s| s.to_string()).collect());
    assert_eq!(decode_all(&m, "en", &ForwardOptions::default()), decode_all(&m, "en", &all));
    assert_eq!(before, snapshot(&m));
}

#[test]
fn ablating_zero_language_layers_changes_nothing() {
    let mut m = model::<f64>(small_config(Variant::Sd, 2), &LANGS, 3);
    zero_lsl(&mut m, "a");
    zero_lsl(&mut m, "b");
    let all = ablate_lsl(&m, None).unwrap();
    for lang in ["a", "b"] {
        assert_eq!(decode_all(&m, lang, &ForwardOptions::default()), decode_all(&m, lang, &all));
    }
}

#[test]
fn ablation_rejects_models_and_languages_without_language_layers() {
    let base = model::<f64>(small_config(Variant::Baseline, 2), &LANGS, 3);
    assert!(matches!(ablate_lsl(&base, None), Err(Error::NoLanguageLayer(_))));
    let m = model::<f64>(small_config(Variant::Fcll, 2), &LANGS, 3);
    let central: BTreeSet<String> = ["en".to_string()].into();
    assert!(matches!(ablate_lsl(&m, Some(&central)), Err(Error::NoLanguageLayer(_))));
    let unknown: BTreeSet<String> = ["zz".to_string()].into();
    assert!(ablate_lsl(&m, Some(&unknown)).is_err());
}

#[test]
fn rollback_score_examples() {
    let ex = |tgt: &str, t: &[&str]| Example {
        src_lang: "a".into(),
        tgt_lang: tgt.into(),
        src: ids(&["a:1", "a:2", "a:3", "a:4"]),
        tgt: ids(t),
    };
    let zs = [ex("c", &["c:1", "c:2", "c:3", "c:4"])];
    let sup = [ex("b", &["b:4", "b:3", "b:2", "b:1"])];
    let zs_refs: Vec<&Example> = zs.iter().collect();
    let sup_refs: Vec<&Example> = sup.iter().collect();
    let perfect = vec![sup[0].tgt.clone()];
    assert_eq!(rollback_score(&perfect, &zs_refs, &sup_refs).unwrap(), 100.0);
    let unrelated = vec![ids(&["c:9", "c:8", "c:7", "c:6"])];
    assert_eq!(rollback_score(&unrelated, &zs_refs, &sup_refs).unwrap(), 0.0);
    let mut other = sup[0].clone();
    other.src = ids(&["a:9"]);
    assert!(matches!(
        rollback_score(&perfect, &zs_refs, &[&other]),
        Err(Error::MisalignedSources)
    ));
}

fn trained_sd() -> (TransformerModel<f64>, Vec<Example>) {
    let (_, _, data) = corpus(ConditionKind::Centered, &LANGS, 12, 100, 5);
    let mut m = model::<f32>(small_config(Variant::Fcll, 2), &LANGS, 1);
    let hyper = HyperParams {
        max_steps: 60,
        warmup_steps: 20,
        peak_lr: 3e-3,
        batch_tokens: 128,
        ..HyperParams::default()
    };
    train(&mut m, &data.train, &hyper).unwrap();
    let tests = data.test.filter(|e| e.tgt_lang != "en").examples;
    (m.cast(), tests)
}

/// Rows for the same 20 sampled tokens at a given step count.
fn sampled_rows(m: &TransformerModel<f64>, tests: &[Example], steps: usize) -> Vec<(f64, f64)> {
    let mut rows = Vec::new();
    let mut i = 0;
    while rows.len() < 20 {
        let e = &tests[i % tests.len()];
        let request = AttributionRequest {
            layers: [1 + i % 2].into(),
            components: [Component::ALL[i % 4]].into(),
            positions: [i % (e.tgt.len() + 1)].into(),
            steps,
        };
        let report = attribute(m, e, i, &request).unwrap();
        assert_eq!(report.steps, steps);
        assert_eq!(report.baseline, "zero-activation");
        rows.extend(report.rows.iter().map(|r| (r.score, r.delta)));
        i += 1;
    }
    rows
}

#[test]
fn integrated_gradients_converge_to_the_endpoint_difference() {
    let (m, tests) = trained_sd();
    let coarse = sampled_rows(&m, &tests, 128);
    let fine = sampled_rows(&m, &tests, 1024);
    let gap = |rows: &[(f64, f64)]| rows.iter().map(|(s, d)| (s - d).abs()).sum::<f64>();
    let scale: f64 = coarse.iter().map(|(_, d)| d.abs()).sum();
    for ((_, d0), (_, d1)) in coarse.iter().zip(&fine) {
        assert!(d0.abs() > 1e-9);
        assert_eq!(d0, d1);
    }
    // The sum is a first-order rule, so eight times the steps cuts the gap well below half.
    assert!(gap(&fine) < 0.5 * gap(&coarse), "{} vs {}", gap(&fine), gap(&coarse));
    assert!(gap(&coarse) < 0.05 * scale, "{} of {scale}", gap(&coarse));
}

#[test]
fn zero_language_layers_get_exactly_zero_attribution() {
    let (mut m, tests) = trained_sd();
    zero_lsl(&mut m, "b");
    let e = tests.iter().find(|e| e.tgt_lang == "b").unwrap();
    let request = AttributionRequest {
        components: [Component::Lsl1, Component::Lsl2].into(),
        steps: 16,
        ..AttributionRequest::default()
    };
    let report = attribute(&m, e, 0, &request).unwrap();
    assert_eq!(report.rows.len(), 2 * 2 * (e.tgt.len() + 1));
    assert!(report.rows.iter().all(|r| r.score == 0.0), "{:?}", report.rows);

    // Central targets never reach a language-specific layer.
    let central = tests[0].clone();
    let central = Example {
        tgt_lang: "en".into(),
        tgt: ids(&["en:1", "en:2"]),
        ..central
    };
    assert!(attribute(&m, &central, 0, &request).unwrap().rows.is_empty());
}

#[test]
fn attention_export_structure() {
    let m = model::<f64>(small_config(Variant::Sd, 2), &LANGS, 2);
    let src = ids(&["a:1", "a:2", "a:3"]);
    let with = export_attention(&m, &src, "b", false).unwrap();
    let without = export_attention(&m, &src, "b", true).unwrap();
    assert_eq!(with.len(), 5);
    assert_eq!(without.len(), 4);
    assert_eq!(with.tokens[0], m.vocab().token(m.vocab().language_token("b").unwrap()).unwrap());
    assert!(!without.tokens.contains(&with.tokens[0]));
    for maps in [&with, &without] {
        let s = maps.len();
        assert_eq!(maps.maps.len(), 2);
        for head in maps.maps.iter().flatten() {
            assert_eq!(head.len(), s * s);
            for row in head.chunks(s) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            // The tag column carries weight.
            if s == 5 {
                assert!(head.chunks(s).all(|row| row[0] > 0.0));
            }
        }
    }
}

#[test]
fn mixing_weights_table() {
    let m = model::<f32>(small_config(Variant::Fcll, 3), &LANGS, 2);
    let table = dump_mixing_weights(&m);
    assert_eq!(table.rows.len(), 3 * 2);
    assert!(table.rows.iter().all(|(_, _, t)| (*t - 0.1).abs() < 1e-7));
    let (mut m, _) = trained_sd();
    let id = m.params().id("decoder.2.cll.t.a").unwrap();
    m.params_mut().get_mut(id).data_mut()[0] = 0.7;
    let table = dump_mixing_weights(&m);
    for (lang, avg) in &table.averages {
        let vals: Vec<f64> = table.rows.iter().filter(|(_, l, _)| l == lang).map(|r| r.2).collect();
        assert!((avg - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12);
    }
}
