//! Synthetic cipher languages, data conditions and parallel-corpus generation.
//!
//! Every language renders a shared base form through its own bijective cipher
//! (and, for some languages, a fixed local reordering), so the ground-truth
//! translation between any two languages is known exactly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LanguageSet, Vocab};
use crate::rng::rng_for;

/// Deterministic local permutation applied to the base form before enciphering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReorderRule {
    Identity,
    /// Swap positions (0,1), (2,3), ...; a trailing odd token stays put.
    SwapPairs,
}

impl ReorderRule {
    fn apply<X: Clone>(self, seq: &[X]) -> Vec<X> {
        let mut out = seq.to_vec();
        if self == ReorderRule::SwapPairs {
            for pair in out.chunks_exact_mut(2) {
                pair.swap(0, 1);
            }
        }
        out
    }

    fn invert<X: Clone>(self, seq: &[X]) -> Vec<X> {
        // Pair swapping is its own inverse.
        self.apply(seq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageSpec {
    id: String,
    cipher: Vec<usize>,
    decipher: Vec<usize>,
    reorder: ReorderRule,
}

impl LanguageSpec {
    /// A language over `base_vocab_size` base tokens; deterministic in `(id, seed)`.
    pub fn new(base_vocab_size: usize, id: &str, seed: u64, reorder: ReorderRule) -> Result<Self> {
        if base_vocab_size < 10 {
            return Err(Error::Config(format!(
                "base vocabulary must have at least 10 tokens, got {base_vocab_size}"
            )));
        }
        if id.is_empty() || id.contains(|c: char| c.is_whitespace() || c == ':' || c == '-') {
            return Err(Error::Config(format!("invalid language id `{id}`")));
        }
        let mut cipher: Vec<usize> = (0..base_vocab_size).collect();
        cipher.shuffle(&mut rng_for(seed, &format!("cipher/{id}")));
        let mut decipher = alloc::vec![0; base_vocab_size];
        for (base, &surface) in cipher.iter().enumerate() {
            decipher[surface] = base;
        }
        Ok(Self {
            id: id.into(),
            cipher,
            decipher,
            reorder,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn reorder(&self) -> ReorderRule {
        self.reorder
    }

    pub fn base_vocab_size(&self) -> usize {
        self.cipher.len()
    }

    /// Surface token names are namespaced as `<id>:<index>`.
    pub fn surface_token(&self, index: usize) -> String {
        format!("{}:{index}", self.id)
    }

    pub fn surface_vocab(&self) -> Vec<String> {
        (0..self.cipher.len()).map(|i| self.surface_token(i)).collect()
    }

    pub fn encipher(&self, base: usize) -> usize {
        self.cipher[base]
    }

    pub fn decipher(&self, surface: usize) -> usize {
        self.decipher[surface]
    }

    /// Base form to surface sentence.
    pub fn render(&self, base: &[usize]) -> Vec<String> {
        self.reorder
            .apply(base)
            .into_iter()
            .map(|b| self.surface_token(self.cipher[b]))
            .collect()
    }

    /// Surface sentence back to base form.
    pub fn parse(&self, tokens: &[String]) -> Result<Vec<usize>> {
        let mut ciphered = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let idx = self
                .surface_index(tok)
                .ok_or_else(|| Error::ForeignToken {
                    token: tok.clone(),
                    lang: self.id.clone(),
                })?;
            ciphered.push(self.decipher[idx]);
        }
        Ok(self.reorder.invert(&ciphered))
    }

    fn surface_index(&self, tok: &str) -> Option<usize> {
        let (lang, idx) = tok.rsplit_once(':')?;
        if lang != self.id {
            return None;
        }
        let idx: usize = idx.parse().ok()?;
        (idx < self.cipher.len()).then_some(idx)
    }
}

/// Languages in order; odd positions get the pair-swap reordering.
pub fn make_languages(ids: &[String], base_vocab_size: usize, seed: u64) -> Result<Vec<LanguageSpec>> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let reorder = if i % 2 == 1 {
                ReorderRule::SwapPairs
            } else {
                ReorderRule::Identity
            };
            LanguageSpec::new(base_vocab_size, id, seed, reorder)
        })
        .collect()
}

/// Every language of an experiment, with exact language identification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageRegistry {
    specs: Vec<LanguageSpec>,
}

impl LanguageRegistry {
    pub fn new(specs: Vec<LanguageSpec>) -> Result<Self> {
        let ids: BTreeSet<&str> = specs.iter().map(LanguageSpec::id).collect();
        if ids.len() != specs.len() {
            return Err(Error::Condition("duplicate language id".into()));
        }
        Ok(Self { specs })
    }

    pub fn specs(&self) -> &[LanguageSpec] {
        &self.specs
    }

    pub fn get(&self, id: &str) -> Result<&LanguageSpec> {
        self.specs
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownLanguage(id.into()))
    }

    pub fn push(&mut self, spec: LanguageSpec) -> Result<()> {
        if self.get(spec.id()).is_ok() {
            return Err(Error::LanguageAlreadyPresent(spec.id));
        }
        self.specs.push(spec);
        Ok(())
    }

    /// Ground-truth translation via the shared base form.
    pub fn oracle_translate(&self, tokens: &[String], src: &str, tgt: &str) -> Result<Vec<String>> {
        let s = self.get(src)?;
        let base = s.parse(tokens)?;
        if src == tgt {
            return Ok(tokens.to_vec());
        }
        Ok(self.get(tgt)?.render(&base))
    }

    /// Language owning a surface token.
    pub fn owner(&self, token: &str) -> Option<&str> {
        let (lang, _) = token.rsplit_once(':')?;
        let spec = self.specs.iter().find(|s| s.id == lang)?;
        spec.surface_index(token).map(|_| spec.id())
    }

    /// Strict-majority language of a sentence; `None` on ties or when no token is owned.
    pub fn identify(&self, tokens: &[String]) -> Option<&str> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            if let Some(l) = self.owner(t) {
                *counts.entry(l).or_default() += 1;
            }
        }
        let best = counts.values().copied().max()?;
        let mut winners = counts.iter().filter(|(_, &c)| c == best);
        let (lang, _) = winners.next()?;
        winners.next().is_none().then_some(*lang)
    }

    /// Joint vocabulary: one tag per language, then every surface token.
    pub fn vocab(&self) -> Vocab {
        let mut v = Vocab::new();
        for s in &self.specs {
            v.add_language(s.id());
        }
        for s in &self.specs {
            v.add_surface(s.id(), s.surface_vocab());
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Centered,
    Triangle,
    Square,
    Custom,
}

impl ConditionKind {
    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Centered => "centered",
            ConditionKind::Triangle => "triangle",
            ConditionKind::Square => "square",
            ConditionKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(ConditionKind::Centered),
            "triangle" => Ok(ConditionKind::Triangle),
            "square" => Ok(ConditionKind::Square),
            "custom" => Ok(ConditionKind::Custom),
            other => Err(Error::Condition(format!("unknown condition `{other}`"))),
        }
    }
}

pub type Direction = (String, String);

/// Which directed pairs are supervised.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCondition {
    pub kind: ConditionKind,
    pub languages: LanguageSet,
    pub supervised: BTreeSet<Direction>,
}

impl DataCondition {
    /// All ordered pairs of distinct languages that are not supervised.
    pub fn zero_shot(&self) -> BTreeSet<Direction> {
        self.all_pairs()
            .into_iter()
            .filter(|p| !self.supervised.contains(p))
            .collect()
    }

    pub fn all_pairs(&self) -> BTreeSet<Direction> {
        let langs = self.languages.languages();
        let mut out = BTreeSet::new();
        for a in langs {
            for b in langs {
                if a != b {
                    out.insert((a.clone(), b.clone()));
                }
            }
        }
        out
    }

    pub fn is_supervised(&self, src: &str, tgt: &str) -> bool {
        self.supervised.contains(&(src.to_string(), tgt.to_string()))
    }

    /// The supervised target reached from `src` (for rollback analysis), if unique.
    pub fn supervised_target_of(&self, src: &str) -> Option<&str> {
        let mut it = self.supervised.iter().filter(|(s, _)| s == src);
        let (_, t) = it.next()?;
        it.next().is_none().then_some(t.as_str())
    }
}

fn pair(a: &str, b: &str) -> Direction {
    (a.to_string(), b.to_string())
}

/// Supervised/zero-shot partition for the named condition; `extra_pairs` become supervised.
pub fn build_condition(
    kind: ConditionKind,
    languages: &LanguageSet,
    extra_pairs: &BTreeSet<Direction>,
) -> Result<DataCondition> {
    let langs = languages.languages();
    let mut supervised = BTreeSet::new();
    match kind {
        ConditionKind::Centered => {
            let c = languages
                .central()
                .ok_or_else(|| Error::Condition("centered condition requires a central language".into()))?;
            for l in languages.non_centered() {
                supervised.insert(pair(c, &l));
                supervised.insert(pair(&l, c));
            }
        }
        ConditionKind::Triangle => {
            if langs.len() != 3 || languages.central().is_some() {
                return Err(Error::Condition(
                    "triangle requires exactly 3 languages and no central language".into(),
                ));
            }
            for i in 0..3 {
                supervised.insert(pair(&langs[i], &langs[(i + 1) % 3]));
            }
        }
        ConditionKind::Square => {
            if langs.len() != 4 || languages.central().is_some() {
                return Err(Error::Condition(
                    "square requires exactly 4 languages and no central language".into(),
                ));
            }
            for i in 0..4 {
                let j = (i + 1) % 4;
                supervised.insert(pair(&langs[i], &langs[j]));
                supervised.insert(pair(&langs[j], &langs[i]));
            }
        }
        ConditionKind::Custom => {}
    }
    for (a, b) in extra_pairs {
        languages.check(a)?;
        languages.check(b)?;
        if a == b {
            return Err(Error::Condition(format!("pair {a}-{b} is not a translation direction")));
        }
        supervised.insert((a.clone(), b.clone()));
    }
    if supervised.is_empty() {
        return Err(Error::Condition("no supervised directions".into()));
    }
    Ok(DataCondition {
        kind,
        languages: languages.clone(),
        supervised,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    /// Free-form condition descriptor carried in the file header.
    pub descriptor: String,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Directed pairs present, in first-seen order.
    pub fn directions(&self) -> Vec<Direction> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in &self.examples {
            let d = (e.src_lang.clone(), e.tgt_lang.clone());
            if seen.insert(d.clone()) {
                out.push(d);
            }
        }
        out
    }

    pub fn direction(&self, src: &str, tgt: &str) -> Vec<&Example> {
        self.examples
            .iter()
            .filter(|e| e.src_lang == src && e.tgt_lang == tgt)
            .collect()
    }

    pub fn filter(&self, keep: impl Fn(&Example) -> bool) -> Corpus {
        Corpus {
            descriptor: self.descriptor.clone(),
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

impl Default for LengthRange {
    fn default() -> Self {
        Self { min: 4, max: 16 }
    }
}

/// Corpus-generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_per_direction: usize,
    pub n_test: usize,
    pub lengths: LengthRange,
    pub seed: u64,
}

/// Training pairs for the supervised directions plus held-out tests for every pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedCorpus {
    pub train: Corpus,
    pub test: Corpus,
}

fn random_base(rng: &mut impl Rng, vocab: usize, lengths: LengthRange) -> Vec<usize> {
    let len = rng.gen_range(lengths.min..=lengths.max);
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Condition descriptor written into corpus headers.
pub fn describe(condition: &DataCondition, registry: &LanguageRegistry, seed: u64) -> String {
    let langs = condition.languages.languages().join(",");
    let sup: Vec<String> = condition
        .supervised
        .iter()
        .map(|(a, b)| format!("{a}-{b}"))
        .collect();
    let base = registry.specs().first().map_or(0, LanguageSpec::base_vocab_size);
    format!(
        "kind={} languages={} central={} supervised={} base_vocab={} seed={}",
        condition.kind.name(),
        langs,
        condition.languages.central().unwrap_or("-"),
        sup.join(","),
        base,
        seed
    )
}

/// Pure function of `(condition, spec)`. Test base forms never occur in training;
/// every directed test set renders the same base sentences so directions sharing a
/// source language share their source sentences.
pub fn generate_corpus(
    condition: &DataCondition,
    registry: &LanguageRegistry,
    spec: &CorpusSpec,
) -> Result<GeneratedCorpus> {
    if spec.n_per_direction == 0 {
        return Err(Error::Config("n_per_direction must be >= 1".into()));
    }
    if spec.lengths.min == 0 || spec.lengths.min > spec.lengths.max {
        return Err(Error::Config("invalid length range".into()));
    }
    for l in condition.languages.languages() {
        registry.get(l)?;
    }
    let vocab = registry
        .specs()
        .first()
        .map(LanguageSpec::base_vocab_size)
        .ok_or(Error::EmptyCorpus)?;
    let descriptor = describe(condition, registry, spec.seed);

    let mut train_bases = BTreeSet::new();
    let mut train = Vec::with_capacity(condition.supervised.len() * spec.n_per_direction);
    for (src, tgt) in &condition.supervised {
        let mut rng = rng_for(spec.seed, &format!("train/{src}-{tgt}"));
        let (s, t) = (registry.get(src)?, registry.get(tgt)?);
        for _ in 0..spec.n_per_direction {
            let base = random_base(&mut rng, vocab, spec.lengths);
            train.push(Example {
                src_lang: src.clone(),
                tgt_lang: tgt.clone(),
                src: s.render(&base),
                tgt: t.render(&base),
            });
            train_bases.insert(base);
        }
    }

    let mut rng = rng_for(spec.seed, "test");
    let mut test_bases = Vec::with_capacity(spec.n_test);
    let mut guard = 0usize;
    while test_bases.len() < spec.n_test {
        let base = random_base(&mut rng, vocab, spec.lengths);
        guard += 1;
        if guard > spec.n_test.saturating_mul(1000).max(10_000) {
            return Err(Error::Config("cannot draw enough held-out sentences".into()));
        }
        if !train_bases.contains(&base) && !test_bases.contains(&base) {
            test_bases.push(base);
        }
    }
    let mut test = Vec::with_capacity(condition.all_pairs().len() * spec.n_test);
    for (src, tgt) in condition.all_pairs() {
        let (s, t) = (registry.get(&src)?, registry.get(&tgt)?);
        for base in &test_bases {
            test.push(Example {
                src_lang: src.clone(),
                tgt_lang: tgt.clone(),
                src: s.render(base),
                tgt: t.render(base),
            });
        }
    }
    Ok(GeneratedCorpus {
        train: Corpus {
            descriptor: descriptor.clone(),
            examples: train,
        },
        test: Corpus {
            descriptor,
            examples: test,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn registry(langs: &[&str]) -> LanguageRegistry {
        LanguageRegistry::new(make_languages(&ids(langs), 12, 5).unwrap()).unwrap()
    }

    #[test]
    fn make_language_is_deterministic_and_bijective() {
        let a = LanguageSpec::new(12, "a", 3, ReorderRule::Identity).unwrap();
        assert_eq!(a, LanguageSpec::new(12, "a", 3, ReorderRule::Identity).unwrap());
        for b in 0..12 {
            assert_eq!(a.decipher(a.encipher(b)), b);
        }
        let b = LanguageSpec::new(12, "b", 3, ReorderRule::Identity).unwrap();
        let va: BTreeSet<String> = a.surface_vocab().into_iter().collect();
        assert!(b.surface_vocab().iter().all(|t| !va.contains(t)));
        assert!(LanguageSpec::new(9, "a", 3, ReorderRule::Identity).is_err());
    }

    #[test]
    fn render_parse_round_trip_with_reorder() {
        let s = LanguageSpec::new(12, "x", 1, ReorderRule::SwapPairs).unwrap();
        let base = vec![1, 2, 3, 4, 5];
        let surface = s.render(&base);
        assert_eq!(s.parse(&surface).unwrap(), base);
        assert_eq!(surface[0], s.surface_token(s.encipher(2)));
        assert_eq!(surface[4], s.surface_token(s.encipher(5)));
    }

    #[test]
    fn oracle_examples() {
        let r = registry(&["a", "b", "c"]);
        let sent = r.get("a").unwrap().render(&[0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(r.oracle_translate(&sent, "a", "a").unwrap(), sent);
        let ab = r.oracle_translate(&sent, "a", "b").unwrap();
        assert_eq!(r.oracle_translate(&ab, "b", "a").unwrap(), sent);
        assert!(matches!(
            r.oracle_translate(&ab, "a", "c"),
            Err(Error::ForeignToken { .. })
        ));
    }

    #[test]
    fn condition_counts() {
        let cen = LanguageSet::centered(ids(&["en", "a", "b", "c"])).unwrap();
        let c = build_condition(ConditionKind::Centered, &cen, &BTreeSet::new()).unwrap();
        assert_eq!((c.supervised.len(), c.zero_shot().len()), (6, 6));
        let tri = LanguageSet::non_centered_only(ids(&["a", "b", "c"])).unwrap();
        let t = build_condition(ConditionKind::Triangle, &tri, &BTreeSet::new()).unwrap();
        assert_eq!((t.supervised.len(), t.zero_shot().len()), (3, 3));
        let sq = LanguageSet::non_centered_only(ids(&["a", "b", "c", "d"])).unwrap();
        let s = build_condition(ConditionKind::Square, &sq, &BTreeSet::new()).unwrap();
        assert_eq!((s.supervised.len(), s.zero_shot().len()), (8, 4));
        for l in sq.languages() {
            assert_eq!(s.supervised.iter().filter(|(a, _)| a == l).count(), 2);
            assert_eq!(s.supervised.iter().filter(|(_, b)| b == l).count(), 2);
        }
    }

    #[test]
    fn triangle_is_strictly_dependent() {
        let tri = LanguageSet::non_centered_only(ids(&["a", "b", "c"])).unwrap();
        let t = build_condition(ConditionKind::Triangle, &tri, &BTreeSet::new()).unwrap();
        for l in tri.languages() {
            assert_eq!(t.supervised.iter().filter(|(a, _)| a == l).count(), 1);
            assert_eq!(t.supervised.iter().filter(|(_, b)| b == l).count(), 1);
        }
        assert_eq!(t.supervised_target_of("a"), Some("b"));
    }

    #[test]
    fn condition_errors_and_extra_pairs() {
        let four = LanguageSet::non_centered_only(ids(&["a", "b", "c", "d"])).unwrap();
        assert!(build_condition(ConditionKind::Triangle, &four, &BTreeSet::new()).is_err());
        assert!(build_condition(ConditionKind::Centered, &four, &BTreeSet::new()).is_err());
        let cen = LanguageSet::centered(ids(&["en", "a", "b", "c"])).unwrap();
        assert!(build_condition(ConditionKind::Square, &cen, &BTreeSet::new()).is_err());
        let extra: BTreeSet<Direction> = [pair("a", "b"), pair("b", "c"), pair("c", "a")].into();
        let c = build_condition(ConditionKind::Centered, &cen, &extra).unwrap();
        assert_eq!((c.supervised.len(), c.zero_shot().len()), (9, 3));
    }

    #[test]
    fn corpus_generation_contract() {
        let r = registry(&["a", "b", "c"]);
        let tri = LanguageSet::non_centered_only(ids(&["a", "b", "c"])).unwrap();
        let cond = build_condition(ConditionKind::Triangle, &tri, &BTreeSet::new()).unwrap();
        let spec = CorpusSpec {
            n_per_direction: 2,
            n_test: 5,
            lengths: LengthRange::default(),
            seed: 9,
        };
        let g = generate_corpus(&cond, &r, &spec).unwrap();
        assert_eq!(g.train.len(), 6);
        assert_eq!(g.test.len(), 6 * 5);
        assert_eq!(g, generate_corpus(&cond, &r, &spec).unwrap());
        for e in g.train.examples.iter().chain(&g.test.examples) {
            assert_eq!(r.oracle_translate(&e.src, &e.src_lang, &e.tgt_lang).unwrap(), e.tgt);
            assert_eq!(r.identify(&e.src), Some(e.src_lang.as_str()));
            assert_eq!(r.identify(&e.tgt), Some(e.tgt_lang.as_str()));
        }
        let train_bases: BTreeSet<Vec<usize>> = g
            .train
            .examples
            .iter()
            .map(|e| r.get(&e.src_lang).unwrap().parse(&e.src).unwrap())
            .collect();
        assert!(g
            .test
            .examples
            .iter()
            .all(|e| !train_bases.contains(&r.get(&e.src_lang).unwrap().parse(&e.src).unwrap())));
    }

    #[test]
    fn identify_ties_are_none() {
        let r = registry(&["a", "b"]);
        let mixed = vec!["a:1".to_string(), "b:2".to_string()];
        assert_eq!(r.identify(&mixed), None);
        assert_eq!(r.identify(&[]), None);
    }
}
