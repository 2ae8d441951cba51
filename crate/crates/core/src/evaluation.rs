//! Beam search, corpus BLEU, off-target ratio and per-direction reports.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DataCondition, Direction, Example};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, TransformerModel, BOS, EOS, PAD};
use crate::tensor::Real;

/// A finished hypothesis: generated ids (without `<s>`/`</s>`) and its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Total log-probability, including `</s>` when the hypothesis finished.
    pub log_prob: f64,
    /// `log_prob` divided by the number of scored tokens.
    pub score: f64,
}

/// Default decoding budget.
pub fn max_decode_len(src_len: usize) -> usize {
    2 * src_len + 8
}

/// Length-normalized beam search over already-encoded source ids.
///
/// With `beam == 1` this is greedy decoding. Candidates are ranked by total
/// log-probability; ties go to the lower beam index, then the lower token id.
pub fn beam_search_ids<T: Real>(
    model: &TransformerModel<T>,
    src_ids: &[usize],
    target_lang: &str,
    beam: usize,
    max_len: usize,
    options: &ForwardOptions,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam must be >= 1".into()));
    }
    let source = model.encode_source(src_ids, options)?;
    let max_len = max_len.min(model.config().max_positions.saturating_sub(1)).max(1);
    let mut active: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<usize>> = active.iter().map(|(p, _)| p.clone()).collect();
        let lps = model.decode_step(&source, &prefixes, target_lang, options)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, row) in lps.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                if tok == PAD || tok == BOS {
                    continue;
                }
                cands.push((active[bi].1 + lp.as_f64(), bi, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let width = beam - finished.len();
        let mut next = Vec::with_capacity(width);
        for &(score, bi, tok) in cands.iter().take(width) {
            let mut seq = active[bi].0.clone();
            if tok == EOS {
                let len = seq.len(); // generated tokens plus </s>
                finished.push(Hypothesis {
                    tokens: seq[1..].to_vec(),
                    log_prob: score,
                    score: score / len as f64,
                });
            } else {
                seq.push(tok);
                next.push((seq, score));
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
        if step + 1 == max_len {
            for (seq, score) in &active {
                let len = seq.len() - 1;
                finished.push(Hypothesis {
                    tokens: seq[1..].to_vec(),
                    log_prob: *score,
                    score: score / len.max(1) as f64,
                });
            }
        }
    }
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().map_or(true, |b| h.score > b.score) {
            best = Some(h);
        }
    }
    best.ok_or(Error::Config("decoding produced no hypothesis".into()))
}

/// Translates surface tokens into `target_lang`; the language tag is omitted when `omit_token`.
pub fn beam_search<T: Real>(
    model: &TransformerModel<T>,
    src: &[String],
    target_lang: &str,
    beam: usize,
    omit_token: bool,
    options: &ForwardOptions,
) -> Result<Vec<String>> {
    let ids = model.source_ids(src, target_lang, omit_token)?;
    let hyp = beam_search_ids(model, &ids, target_lang, beam, max_decode_len(src.len()), options)?;
    Ok(model.vocab().decode(&hyp.tokens)?.into_iter().map(String::from).collect())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of corpus BLEU: clipped matches and totals per order, lengths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, hyp: &[String], reference: &[String]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_p: f64 = (0..4)
            .map(|i| (self.matches[i] as f64 / self.totals[i] as f64).ln())
            .sum::<f64>()
            / 4.0;
        let bp = if self.hyp_len >= self.ref_len {
            0.0
        } else {
            1.0 - self.ref_len as f64 / self.hyp_len as f64
        };
        100.0 * (log_p + bp).exp()
    }
}

/// Corpus BLEU over atomic tokens, on a 0-100 scale.
pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::CountMismatch(hypotheses.len(), references.len()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h, r);
    }
    Ok(stats.score())
}

/// Majority language of a sentence under `owner`; `None` on ties or when nothing is owned.
pub fn majority_language<'a>(tokens: &[String], owner: impl Fn(&str) -> Option<&'a str>) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        if let Some(l) = owner(t) {
            *counts.entry(l).or_default() += 1;
        }
    }
    let best = counts.values().copied().max()?;
    let mut winners = counts.into_iter().filter(|&(_, c)| c == best);
    let (lang, _) = winners.next()?;
    winners.next().is_none().then_some(lang)
}

/// Fraction of sentences whose majority language is not `target`; ties count as off-target.
pub fn off_target_ratio<'a>(
    hypotheses: &[Vec<String>],
    target: &str,
    owner: impl Fn(&str) -> Option<&'a str> + Copy,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let off = hypotheses
        .iter()
        .filter(|h| majority_language(h, owner) != Some(target))
        .count();
    Ok(off as f64 / hypotheses.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionClass {
    Supervised,
    ZeroShot,
}

impl DirectionClass {
    pub fn name(self) -> &'static str {
        match self {
            DirectionClass::Supervised => "supervised",
            DirectionClass::ZeroShot => "zero-shot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(DirectionClass::Supervised),
            "zero-shot" => Ok(DirectionClass::ZeroShot),
            other => Err(Error::Config(alloc::format!("unknown direction class `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub src: String,
    pub tgt: String,
    pub class: DirectionClass,
    pub bleu: f64,
    pub off_target: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Mean BLEU of the rows in `class`, if any.
    pub fn average_bleu(&self, class: DirectionClass) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.class == class).map(|r| r.bleu).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn average_off_target(&self, class: DirectionClass) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.class == class)
            .map(|r| r.off_target)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn row(&self, src: &str, tgt: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.src == src && r.tgt == tgt)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub beam: usize,
    pub omit_token: bool,
    /// Directions to evaluate; empty means every direction in the corpus.
    pub directions: BTreeSet<Direction>,
    /// Score a direction against another direction's references (same sources required).
    pub reference_for: BTreeMap<Direction, Direction>,
    /// Cap on sentences per direction.
    pub max_sentences: Option<usize>,
    pub forward: ForwardOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            beam: 4,
            omit_token: false,
            directions: BTreeSet::new(),
            reference_for: BTreeMap::new(),
            max_sentences: None,
            forward: ForwardOptions::default(),
        }
    }
}

/// Report plus the decoded outputs, keyed by direction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub hypotheses: BTreeMap<Direction, Vec<Vec<String>>>,
}

fn owner_in<'a, T: Real>(model: &'a TransformerModel<T>) -> impl Fn(&str) -> Option<&'a str> + Copy + 'a {
    move |tok: &str| model.vocab().id(tok).ok().and_then(|id| model.vocab().owner(id))
}

/// Examples of one direction, in corpus order, capped.
fn direction_examples<'c>(test: &'c Corpus, d: &Direction, cap: Option<usize>) -> Vec<&'c Example> {
    let mut ex = test.direction(&d.0, &d.1);
    if let Some(c) = cap {
        ex.truncate(c);
    }
    ex
}

/// Decodes every selected direction and scores it against the corpus references.
pub fn evaluate<T: Real>(
    model: &TransformerModel<T>,
    test: &Corpus,
    condition: &DataCondition,
    options: &EvalOptions,
) -> Result<Evaluation> {
    let dirs: Vec<Direction> = test
        .directions()
        .into_iter()
        .filter(|d| options.directions.is_empty() || options.directions.contains(d))
        .collect();
    let owner = owner_in(model);
    let mut out = Evaluation::default();
    for d in dirs {
        let examples = direction_examples(test, &d, options.max_sentences);
        let mut hyps = Vec::with_capacity(examples.len());
        for e in &examples {
            hyps.push(beam_search(model, &e.src, &d.1, options.beam, options.omit_token, &options.forward)?);
        }
        let refs: Vec<Vec<String>> = match options.reference_for.get(&d) {
            Some(r) => {
                let other = direction_examples(test, r, options.max_sentences);
                if other.len() != examples.len() || other.iter().zip(&examples).any(|(a, b)| a.src != b.src) {
                    return Err(Error::MisalignedSources);
                }
                other.iter().map(|e| e.tgt.clone()).collect()
            }
            None => examples.iter().map(|e| e.tgt.clone()).collect(),
        };
        let class = if condition.is_supervised(&d.0, &d.1) {
            DirectionClass::Supervised
        } else {
            DirectionClass::ZeroShot
        };
        let bleu = corpus_bleu(&hyps, &refs)?;
        let off_target = off_target_ratio(&hyps, &d.1, owner)?;
        out.report.rows.push(EvalRow {
            src: d.0.clone(),
            tgt: d.1.clone(),
            class,
            bleu,
            off_target,
            n: hyps.len(),
        });
        out.hypotheses.insert(d, hyps);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(ToString::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_zero() {
        let h = vec![toks("a b c d e"), toks("x y z w")];
        assert!((corpus_bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        let r = vec![toks("a b c d e"), toks("x y z w")];
        let bad = vec![toks("e d c b a"), toks("w z y x")];
        assert_eq!(corpus_bleu(&bad, &r).unwrap(), 0.0);
        assert!(matches!(corpus_bleu(&h[..1], &r), Err(Error::CountMismatch(1, 2))));
    }

    #[test]
    fn bleu_brevity_penalty() {
        let r = vec![toks("a b c d e f g h")];
        let h = vec![toks("a b c d")];
        let expect = 100.0 * (1.0f64 - 2.0).exp();
        assert!((corpus_bleu(&h, &r).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn off_target_counting() {
        fn owner(t: &str) -> Option<&'static str> {
            ["a", "b"].into_iter().find(|l| t.starts_with(&alloc::format!("{l}:")))
        }
        let mut hyps = Vec::new();
        for i in 0..10 {
            hyps.push(if i < 3 { toks("b:1 b:2 a:1") } else { toks("a:1 a:2 b:3") });
        }
        assert!((off_target_ratio(&hyps, "a", owner).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(off_target_ratio(&[toks("a:1 a:2")], "a", owner).unwrap(), 0.0);
        assert_eq!(off_target_ratio(&[toks("b:1")], "a", owner).unwrap(), 1.0);
        assert_eq!(off_target_ratio(&[toks("a:1 b:1")], "a", owner).unwrap(), 1.0);
        assert!(off_target_ratio(&[], "a", owner).is_err());
    }

    #[test]
    fn report_averages() {
        let row = |bleu, class| EvalRow {
            src: "a".into(),
            tgt: "b".into(),
            class,
            bleu,
            off_target: 0.0,
            n: 1,
        };
        let r = EvalReport {
            rows: vec![
                row(10.0, DirectionClass::ZeroShot),
                row(20.0, DirectionClass::ZeroShot),
                row(50.0, DirectionClass::Supervised),
            ],
        };
        assert!((r.average_bleu(DirectionClass::ZeroShot).unwrap() - 15.0).abs() < 1e-9);
        assert_eq!(r.average_bleu(DirectionClass::Supervised), Some(50.0));
    }
}
