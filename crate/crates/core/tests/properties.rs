mod common;

use cll_core::corpus::{build_condition, generate_corpus, ConditionKind, CorpusSpec, LengthRange};
use cll_core::evaluation::corpus_bleu;
use cll_core::graph::Graph;
use cll_core::model::{cll_forward, ffn_forward, CllNodes, FfnNodes, LanguageSet};
use cll_core::training::{lr_schedule, Adam, HyperParams};
use cll_core::Tensor;
use common::{ids, registry};
use proptest::prelude::*;

fn tensor(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), values[..n].to_vec()).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, v in values(40)) {
        let mut g = Graph::<f64>::new(0, false);
        let x = g.constant(tensor(&[rows, cols], &v));
        let p = g.softmax(x);
        let lp = g.log_softmax(x);
        for row in g.value(p).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for row in g.value(lp).data().chunks(cols) {
            prop_assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn same_seed_same_dropout_and_gradients(seed in any::<u64>(), v in values(24)) {
        let run = || {
            let mut g = Graph::<f64>::new(seed, true);
            let x = g.parameter(tensor(&[4, 6], &v));
            let d = g.dropout(x, 0.3);
            let s = g.sum(d);
            let grads = g.backward(s).unwrap();
            (g.value(d).data().to_vec(), grads.get(x).unwrap().data().to_vec())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn central_target_is_bit_identical_to_the_ffn(v in values(20 + 2 * 31), t in -1.0f64..1.0) {
        let mut g = Graph::<f64>::new(0, false);
        let mut at = 0;
        let mut take = |g: &mut Graph<f64>, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let node = g.constant(tensor(shape, &v[at..]));
            at += n;
            node
        };
        let h = take(&mut g, &[5, 4]);
        let ffn = FfnNodes { w1: take(&mut g, &[4, 3]), b1: take(&mut g, &[3]), w2: take(&mut g, &[3, 4]), b2: take(&mut g, &[4]) };
        let lsl = FfnNodes { w1: take(&mut g, &[4, 3]), b1: take(&mut g, &[3]), w2: take(&mut g, &[3, 4]), b2: take(&mut g, &[4]) };
        let mut block = CllNodes::default();
        block.lsl.insert("a".into(), lsl);
        let t_node = g.constant(Tensor::scalar(t));
        block.t.insert("a".into(), t_node);
        let langs = LanguageSet::centered(ids(&["en", "a"])).unwrap();
        let plain = ffn_forward(&mut g, h, &ffn).unwrap();
        let central = cll_forward(&mut g, h, "en", &langs, &ffn, &block, 0.0).unwrap();
        prop_assert_eq!(g.value(plain).data(), g.value(central).data());
    }

    #[test]
    fn cipher_round_trips(base in prop::collection::vec(0usize..12, 1..20)) {
        let reg = registry(&["a", "b", "c"], 12);
        let a = reg.get("a").unwrap();
        let rendered = a.render(&base);
        prop_assert_eq!(a.parse(&rendered).unwrap(), base);
        prop_assert_eq!(reg.identify(&rendered), Some("a"));
        let there = reg.oracle_translate(&rendered, "a", "c").unwrap();
        prop_assert_eq!(reg.identify(&there), Some("c"));
        prop_assert_eq!(reg.oracle_translate(&there, "c", "a").unwrap(), rendered);
    }

    #[test]
    fn corpus_generation_is_pure_and_languages_are_identifiable(seed in 0u64..1000, n in 1usize..8) {
        let langs = ["en", "a", "b"];
        let reg = registry(&langs, 12);
        let cond = build_condition(ConditionKind::Centered, &LanguageSet::centered(ids(&langs)).unwrap(), &Default::default()).unwrap();
        let spec = CorpusSpec { n_per_direction: n, n_test: 2, lengths: LengthRange { min: 2, max: 7 }, seed };
        let first = generate_corpus(&cond, &reg, &spec).unwrap();
        prop_assert_eq!(&first, &generate_corpus(&cond, &reg, &spec).unwrap());
        for e in first.train.examples.iter().chain(&first.test.examples) {
            prop_assert_eq!(reg.identify(&e.src), Some(e.src_lang.as_str()));
            prop_assert_eq!(reg.identify(&e.tgt), Some(e.tgt_lang.as_str()));
        }
    }

    #[test]
    fn bleu_ignores_sentence_order(
        pairs in prop::collection::vec((prop::collection::vec(0u8..5, 1..9), prop::collection::vec(0u8..5, 1..9)), 1..8),
        rotate in 0usize..8,
    ) {
        let words = |s: &[u8]| s.iter().map(|w| format!("w{w}")).collect::<Vec<_>>();
        let hyps: Vec<_> = pairs.iter().map(|(h, _)| words(h)).collect();
        let refs: Vec<_> = pairs.iter().map(|(_, r)| words(r)).collect();
        let k = rotate % hyps.len();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        h2.reverse();
        r2.reverse();
        let a = corpus_bleu(&hyps, &refs).unwrap();
        prop_assert_eq!(a, corpus_bleu(&h2, &r2).unwrap());
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn schedule_warms_up_then_decays(warmup in 1usize..500, peak in 1e-5f64..1e-2, step in 1usize..5000) {
        let lr = lr_schedule(step, warmup, peak);
        prop_assert!(lr > 0.0 && lr <= peak * (1.0 + 1e-12));
        prop_assert!((lr_schedule(warmup, warmup, peak) - peak).abs() <= peak * 1e-12);
        if step < warmup {
            prop_assert!(lr < lr_schedule(step + 1, warmup, peak));
        } else {
            prop_assert!(lr >= lr_schedule(step + 1, warmup, peak));
        }
    }

    #[test]
    fn adam_with_zero_gradient_keeps_parameters(v in prop::collection::vec(-5.0f32..5.0, 6), lr in 1e-5f64..1.0) {
        let mut adam = Adam::new(1);
        let mut p = Tensor::new(vec![2, 3], v.clone()).unwrap();
        let zero = Tensor::zeros(&[2, 3]);
        for _ in 0..3 {
            adam.update(0, &mut p, &zero, lr, &HyperParams::default());
        }
        prop_assert_eq!(p.data(), &v[..]);
    }
}
