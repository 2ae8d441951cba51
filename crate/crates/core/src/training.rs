//! Optimization: schedule, smoothed loss, Adam, token-capped batching, the training
//! loop, new-language integration and multi-seed summaries.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LanguageSpec};
use crate::error::{Error, Result};
use crate::graph::{log_softmax_in_place, Graph, NodeId};
use crate::model::{ForwardOptions, ParamId, TransformerModel, BOS, EOS};
use crate::rng::{mix64, rng_for, substream};
use crate::tensor::{Real, Tensor};

/// Inverse square-root schedule with linear warmup.
pub fn lr_schedule(step: usize, warmup: usize, peak: f64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    if step <= warmup {
        peak * step / warmup
    } else {
        peak * (warmup / step).sqrt()
    }
}

/// Smoothed negative log-likelihood of one position.
///
/// `support` marks the ids that share the smoothing mass.
pub fn label_smoothed_nll(logits: &[f64], target: usize, eps: f64, support: &[bool]) -> f64 {
    let mut lp = logits.to_vec();
    log_softmax_in_place(&mut lp);
    let n = support.iter().filter(|&&s| s).count().max(1) as f64;
    let smooth: f64 = lp
        .iter()
        .zip(support)
        .filter(|(_, &s)| s)
        .map(|(&v, _)| -v)
        .sum::<f64>()
        / n;
    (1.0 - eps) * -lp[target] + eps * smooth
}

/// Mean smoothed loss over the non-padding positions of `logits` `[B, T, V]`.
///
/// `targets[b][t]` is `None` for padding.
pub fn smoothed_loss<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[Vec<Option<usize>>],
    eps: f64,
    support: &[bool],
) -> Result<(NodeId, usize)> {
    let shape = g.shape(logits).to_vec();
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    if targets.len() != b || support.len() != v {
        return Err(Error::ShapeMismatch {
            op: "smoothed-loss",
            lhs: shape,
            rhs: vec![targets.len(), support.len()],
        });
    }
    let count = targets.iter().flatten().filter(|x| x.is_some()).count();
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    let n_support = support.iter().filter(|&&s| s).count().max(1) as f64;
    let denom = count as f64;
    let hit = T::from_f64_lossy(-(1.0 - eps) / denom);
    let spread = T::from_f64_lossy(-eps / (n_support * denom));
    let mut weights = vec![T::zero(); b * t * v];
    for (bi, row) in targets.iter().enumerate() {
        for (ti, tgt) in row.iter().enumerate().take(t) {
            let Some(y) = *tgt else { continue };
            let base = (bi * t + ti) * v;
            for (j, &s) in support.iter().enumerate() {
                if s {
                    weights[base + j] = spread;
                }
            }
            weights[base + y] = weights[base + y] + hit;
        }
    }
    let lp = g.log_softmax(logits);
    Ok((g.weighted_sum(lp, weights)?, count))
}

/// Matches parameter names against `*` wildcard patterns.
pub fn name_matches(pattern: &str, name: &str) -> bool {
    fn go(p: &[u8], s: &[u8]) -> bool {
        match p.split_first() {
            None => s.is_empty(),
            Some((b'*', rest)) => (0..=s.len()).any(|i| go(rest, &s[i..])),
            Some((c, rest)) => s.first() == Some(c) && go(rest, &s[1..]),
        }
    }
    go(pattern.as_bytes(), name.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Wildcard patterns of parameter names that never receive updates.
    pub freeze: Vec<String>,
    /// Overrides the schedule with a fixed rate (used when fine-tuning).
    pub constant_lr: Option<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            peak_lr: 5e-4,
            warmup_steps: 400,
            max_steps: 5000,
            batch_tokens: 512,
            label_smoothing: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            seed: 1,
            freeze: Vec::new(),
            constant_lr: None,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.constant_lr
            .unwrap_or_else(|| lr_schedule(step, self.warmup_steps, self.peak_lr))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.freeze.iter().any(|p| name_matches(p, name))
    }
}

/// Per-parameter Adam moments; a parameter's step counter only advances when it gets a gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub m: Vec<Option<Tensor<f32>>>,
    pub v: Vec<Option<Tensor<f32>>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![None; n_params],
            v: vec![None; n_params],
            steps: vec![0; n_params],
        }
    }

    fn ensure(&mut self, n: usize) {
        if self.m.len() < n {
            self.m.resize(n, None);
            self.v.resize(n, None);
            self.steps.resize(n, 0);
        }
    }

    /// One bias-corrected update of `param` in place.
    pub fn update(&mut self, idx: usize, param: &mut Tensor<f32>, grad: &Tensor<f32>, lr: f64, hyper: &HyperParams) {
        self.ensure(idx + 1);
        let shape = param.shape().to_vec();
        let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(&shape));
        let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(&shape));
        self.steps[idx] += 1;
        let t = self.steps[idx] as i32;
        let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);
        let c1 = 1.0 - hyper.beta1.powi(t);
        let c2 = 1.0 - hyper.beta2.powi(t);
        let step = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = hyper.adam_eps as f32;
        let (p, g) = (param.data_mut(), grad.data());
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= step * m[i] / (v[i].sqrt() / c2_sqrt + eps);
        }
    }
}

/// One step's worth of same-target-language examples, already encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub target_lang: String,
    pub src: Vec<Vec<usize>>,
    pub tgt_in: Vec<Vec<usize>>,
    pub tgt_out: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Padded-token footprint: sentences times the longest side.
    pub fn tokens(&self) -> usize {
        let s = self.src.iter().map(Vec::len).max().unwrap_or(0);
        let t = self.tgt_in.iter().map(Vec::len).max().unwrap_or(0);
        self.len() * s.max(t)
    }
}

#[derive(Clone, Debug)]
struct Encoded {
    lang: String,
    src: Vec<usize>,
    tgt: Vec<usize>,
}

fn encode_corpus(model: &TransformerModel<f32>, corpus: &Corpus) -> Result<Vec<Encoded>> {
    corpus
        .examples
        .iter()
        .map(|e| {
            let src = model
                .source_ids(&e.src, &e.tgt_lang, false)
                .map_err(|err| Error::VocabMismatch(err.to_string()))?;
            let tgt = model
                .vocab()
                .encode(&e.tgt)
                .map_err(|err| Error::VocabMismatch(err.to_string()))?;
            Ok(Encoded {
                lang: e.tgt_lang.clone(),
                src,
                tgt,
            })
        })
        .collect()
}

fn make_batch(lang: &str, items: &[&Encoded]) -> Batch {
    let mut b = Batch {
        target_lang: lang.to_string(),
        src: Vec::with_capacity(items.len()),
        tgt_in: Vec::with_capacity(items.len()),
        tgt_out: Vec::with_capacity(items.len()),
    };
    for e in items {
        b.src.push(e.src.clone());
        let mut tin = vec![BOS];
        tin.extend_from_slice(&e.tgt);
        let mut tout = e.tgt.clone();
        tout.push(EOS);
        b.tgt_in.push(tin);
        b.tgt_out.push(tout);
    }
    b
}

/// Shuffled, length-bucketed, token-capped batches for one epoch.
/// Every batch holds a single target language so routing is per batch.
fn epoch_batches(data: &[Encoded], batch_tokens: usize, seed: u64, epoch: usize) -> Vec<Batch> {
    let mut rng = rng_for(seed, &format!("batches/{epoch}"));
    let mut by_lang: BTreeMap<&str, Vec<&Encoded>> = BTreeMap::new();
    for e in data {
        by_lang.entry(e.lang.as_str()).or_default().push(e);
    }
    let mut batches = Vec::new();
    for (lang, mut items) in by_lang {
        items.shuffle(&mut rng);
        // Sort within windows so lengths cluster without losing randomness.
        for window in items.chunks_mut(4096) {
            window.sort_by_key(|e| e.src.len().max(e.tgt.len() + 1));
            let mut start = 0;
            while start < window.len() {
                let mut end = start;
                let mut longest = 0;
                while end < window.len() {
                    let l = window[end].src.len().max(window[end].tgt.len() + 1);
                    let longest_next = longest.max(l);
                    if end > start && longest_next * (end - start + 1) > batch_tokens {
                        break;
                    }
                    longest = longest_next;
                    end += 1;
                }
                batches.push(make_batch(lang, &window[start..end]));
                start = end;
            }
        }
    }
    batches.shuffle(&mut rng);
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub hyper: HyperParams,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(hyper: HyperParams) -> Self {
        Self {
            hyper,
            adam: Adam::default(),
            step: 0,
        }
    }

    /// Trains until `hyper.max_steps`; `on_step` sees every record as it is produced.
    pub fn run(
        &mut self,
        model: &mut TransformerModel<f32>,
        corpus: &Corpus,
        validation: Option<&Corpus>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<TrainLog> {
        self.hyper.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let data = encode_corpus(model, corpus)?;
        let valid = validation.map(|v| encode_corpus(model, v)).transpose()?;
        let frozen: Vec<bool> = model
            .params()
            .ids()
            .map(|id| self.hyper.is_frozen(model.params().name(id)))
            .collect();
        let support = model.vocab().target_support();
        self.adam.ensure(model.params().len());

        let mut log = TrainLog::default();
        let mut epoch = 0;
        let mut batches = epoch_batches(&data, self.hyper.batch_tokens, self.hyper.seed, epoch);
        // Skip what a resumed run has already consumed.
        let mut cursor = self.step;
        while cursor >= batches.len() {
            cursor -= batches.len();
            epoch += 1;
            batches = epoch_batches(&data, self.hyper.batch_tokens, self.hyper.seed, epoch);
        }
        while self.step < self.hyper.max_steps {
            if cursor == batches.len() {
                if let Some(v) = &valid {
                    log.validation.push(ValidationRecord {
                        epoch,
                        step: self.step,
                        loss: mean_loss(model, v, self.hyper.batch_tokens, self.hyper.label_smoothing)?,
                    });
                }
                epoch += 1;
                cursor = 0;
                batches = epoch_batches(&data, self.hyper.batch_tokens, self.hyper.seed, epoch);
            }
            let step = self.step + 1;
            let record = self.train_step(model, &batches[cursor], step, &frozen, &support)?;
            on_step(&record);
            log.steps.push(record);
            self.step = step;
            cursor += 1;
        }
        if let Some(v) = &valid {
            log.validation.push(ValidationRecord {
                epoch,
                step: self.step,
                loss: mean_loss(model, v, self.hyper.batch_tokens, self.hyper.label_smoothing)?,
            });
        }
        Ok(log)
    }

    fn train_step(
        &mut self,
        model: &mut TransformerModel<f32>,
        batch: &Batch,
        step: usize,
        frozen: &[bool],
        support: &[bool],
    ) -> Result<StepRecord> {
        let seed = mix64(substream(self.hyper.seed, "dropout") ^ step as u64);
        let mut fwd = model.forward(seed, true, true, ForwardOptions::default());
        fwd.freeze(frozen.to_vec());
        let enc = fwd.encode(&batch.src)?;
        let logits = fwd.decode(&enc, &batch.tgt_in, &batch.target_lang)?;
        let targets = padded_targets(&batch.tgt_out);
        let (loss, _) = smoothed_loss(&mut fwd.graph, logits, &targets, self.hyper.label_smoothing, support)?;
        let loss_value = fwd.graph.value(loss).item().as_f64();
        let mut grads = fwd.graph.backward(loss)?;
        let updates: Vec<(ParamId, Tensor<f32>)> = fwd
            .bound_params()
            .filter(|(id, _)| !frozen[id.index()])
            .filter_map(|(id, node)| grads.take(node).map(|g| (id, g)))
            .collect();
        drop(fwd);
        let grad_norm = updates
            .iter()
            .map(|(_, g)| g.l2_norm_sq().as_f64())
            .sum::<f64>()
            .sqrt();
        let lr = self.hyper.lr_at(step);
        for (id, g) in &updates {
            self.adam
                .update(id.index(), model.params_mut().get_mut(*id), g, lr, &self.hyper);
        }
        Ok(StepRecord {
            step,
            lr,
            loss: loss_value,
            grad_norm,
        })
    }
}

fn padded_targets(tgt_out: &[Vec<usize>]) -> Vec<Vec<Option<usize>>> {
    let t = tgt_out.iter().map(Vec::len).max().unwrap_or(0);
    tgt_out
        .iter()
        .map(|row| (0..t).map(|i| row.get(i).copied()).collect())
        .collect()
}

/// Teacher-forced mean smoothed loss over a corpus, without dropout.
fn mean_loss(model: &TransformerModel<f32>, data: &[Encoded], batch_tokens: usize, eps: f64) -> Result<f64> {
    let support = model.vocab().target_support();
    let (mut total, mut count) = (0.0, 0usize);
    for batch in epoch_batches(data, batch_tokens, 0, 0) {
        let mut fwd = model.forward(0, false, false, ForwardOptions::default());
        let enc = fwd.encode(&batch.src)?;
        let logits = fwd.decode(&enc, &batch.tgt_in, &batch.target_lang)?;
        let (loss, n) = smoothed_loss(&mut fwd.graph, logits, &padded_targets(&batch.tgt_out), eps, &support)?;
        total += fwd.graph.value(loss).item().as_f64() * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Teacher-forced mean smoothed loss of `model` on `corpus`.
pub fn corpus_loss(model: &TransformerModel<f32>, corpus: &Corpus, batch_tokens: usize, eps: f64) -> Result<f64> {
    mean_loss(model, &encode_corpus(model, corpus)?, batch_tokens, eps)
}

/// Trains `model` from scratch with `hyper`.
pub fn train(model: &mut TransformerModel<f32>, corpus: &Corpus, hyper: &HyperParams) -> Result<TrainLog> {
    Trainer::new(hyper.clone()).run(model, corpus, None, &mut |_| {})
}

/// Knobs of [`integrate_language`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationOptions {
    /// Noise std relative to the std of the existing embedding entries.
    pub embedding_noise: f64,
    /// Freeze the language-specific layers of existing languages.
    pub freeze_existing: bool,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            embedding_noise: 0.01,
            freeze_existing: true,
        }
    }
}

/// Result of adding a language: the fine-tuning log and the frozen-parameter audit.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationOutcome {
    pub log: TrainLog,
    /// Names of parameters that were frozen during fine-tuning.
    pub frozen: Vec<String>,
    /// Largest absolute change over every frozen parameter (0 when the freeze held).
    pub frozen_drift: f64,
}

/// Extends vocabulary, embeddings and every CLL block with `new_lang`, without training.
pub fn extend_with_language(
    model: &mut TransformerModel<f32>,
    new_lang: &LanguageSpec,
    seed: u64,
    options: &IntegrationOptions,
) -> Result<()> {
    let lang = new_lang.id();
    if model.languages().contains(lang) {
        return Err(Error::LanguageAlreadyPresent(lang.into()));
    }
    let d = model.config().d_model;
    let mut vocab = model.vocab().clone();
    let before = vocab.len();
    vocab.add_language(lang);
    vocab.add_surface(lang, new_lang.surface_vocab());
    let added = vocab.len() - before;

    let table = model.params().get(model.embed_id());
    let rows = table.rows();
    let mut mean = vec![0.0f64; d];
    for r in 1..rows {
        for (m, &x) in mean.iter_mut().zip(table.row(r)) {
            *m += x as f64;
        }
    }
    let real_rows = (rows - 1).max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= real_rows);
    let all: Vec<f64> = (1..rows).flat_map(|r| table.row(r).iter().map(|&x| x as f64)).collect();
    let mu = all.iter().sum::<f64>() / all.len().max(1) as f64;
    let std = (all.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / all.len().max(1) as f64).sqrt();
    // Uniform noise with the requested standard deviation.
    let half_width = 3f64.sqrt() * options.embedding_noise * std;
    let mut rng = rng_for(seed, &format!("integrate/embed/{lang}"));
    let mut new_rows = Vec::with_capacity(added * d);
    for _ in 0..added {
        for &m in &mean {
            let noise = if half_width > 0.0 {
                rng.gen_range(-half_width..=half_width)
            } else {
                0.0
            };
            new_rows.push((m + noise) as f32);
        }
    }
    model.extend_vocab(vocab, new_rows)?;

    model.add_language_layers(lang, |layer, lang, params, cll| {
        let n = cll.lsl.len();
        if n == 0 {
            return Err(Error::NoLanguageLayer(format!("layer {layer} has no language-specific layers")));
        }
        let prefix = format!("decoder.{layer}.cll.lsl.{lang}");
        let mut out = Vec::new();
        for (suffix, pick) in [("W1", 0usize), ("b1", 1), ("W2", 2), ("b2", 3)] {
            let mut acc: Option<Vec<f64>> = None;
            let mut shape = Vec::new();
            for ids in cll.lsl.values() {
                let t = params.get(ids.all()[pick]);
                shape = t.shape().to_vec();
                let acc = acc.get_or_insert_with(|| vec![0.0; t.numel()]);
                for (a, &x) in acc.iter_mut().zip(t.data()) {
                    *a += x as f64;
                }
            }
            let data = acc
                .unwrap_or_default()
                .into_iter()
                .map(|a| (a / n as f64) as f32)
                .collect();
            out.push((format!("{prefix}.{suffix}"), Tensor::new(shape, data)?));
        }
        let t_mean = cll.t.values().map(|&id| params.get(id).item() as f64).sum::<f64>() / n as f64;
        out.push((
            format!("decoder.{layer}.cll.t.{lang}"),
            Tensor::scalar(t_mean as f32),
        ));
        Ok(out)
    })
}

/// Adds `new_lang` and fine-tunes on `bilingual` plus `replay` at a fixed rate.
///
/// The fixed rate is `hyper.constant_lr` when set, otherwise the schedule's value at `hyper.max_steps`
/// of the original run, which callers pass via `original_steps`.
pub fn integrate_language(
    model: &mut TransformerModel<f32>,
    new_lang: &LanguageSpec,
    bilingual: &Corpus,
    replay: &Corpus,
    hyper: &HyperParams,
    original_steps: usize,
    options: &IntegrationOptions,
) -> Result<IntegrationOutcome> {
    let lang = new_lang.id();
    if model.languages().contains(lang) {
        return Err(Error::LanguageAlreadyPresent(lang.into()));
    }
    if bilingual.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut partners = BTreeSet::new();
    let mut dirs = BTreeSet::new();
    for e in &bilingual.examples {
        let partner = if e.src_lang == lang {
            &e.tgt_lang
        } else if e.tgt_lang == lang {
            &e.src_lang
        } else {
            return Err(Error::Condition(format!(
                "bilingual example {}-{} does not involve {lang}",
                e.src_lang, e.tgt_lang
            )));
        };
        model.languages().check(partner)?;
        partners.insert(partner.clone());
        dirs.insert((e.src_lang.clone(), e.tgt_lang.clone()));
    }
    if partners.len() != 1 || dirs.len() != 2 {
        return Err(Error::Condition(format!(
            "bilingual corpus must pair {lang} with exactly one language in both directions"
        )));
    }

    let old_langs: Vec<String> = model.languages().non_centered();
    extend_with_language(model, new_lang, hyper.seed, options)?;

    let mut hyper = hyper.clone();
    if hyper.constant_lr.is_none() {
        hyper.constant_lr = Some(lr_schedule(original_steps.max(1), hyper.warmup_steps, hyper.peak_lr));
    }
    if options.freeze_existing {
        for l in &old_langs {
            hyper.freeze.push(format!("decoder.*.cll.lsl.{l}.*"));
            hyper.freeze.push(format!("decoder.*.cll.t.{l}"));
        }
    }
    let frozen: Vec<(ParamId, String)> = model
        .params()
        .ids()
        .filter(|&id| hyper.is_frozen(model.params().name(id)))
        .map(|id| (id, model.params().name(id).to_string()))
        .collect();
    let snapshot: Vec<Tensor<f32>> = frozen.iter().map(|(id, _)| model.params().get(*id).clone()).collect();

    let mut data = bilingual.clone();
    data.examples.extend(replay.examples.iter().cloned());
    let log = Trainer::new(hyper).run(model, &data, None, &mut |_| {})?;

    let frozen_drift = frozen
        .iter()
        .zip(&snapshot)
        .flat_map(|((id, _), before)| {
            model
                .params()
                .get(*id)
                .data()
                .iter()
                .zip(before.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    Ok(IntegrationOutcome {
        log,
        frozen: frozen.into_iter().map(|(_, n)| n).collect(),
        frozen_drift,
    })
}

/// Population variance `sum (x - mean)^2 / n`.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub supervised_bleu: f64,
    pub zero_shot_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub rows: Vec<SeedMetrics>,
    pub supervised_mean: f64,
    pub supervised_variance: f64,
    pub zero_shot_mean: f64,
    pub zero_shot_variance: f64,
}

/// Runs `run` once per seed and summarizes the spread.
pub fn multi_seed_run(seeds: &[u64], mut run: impl FnMut(u64) -> Result<SeedMetrics>) -> Result<MultiSeedSummary> {
    if seeds.len() < 2 {
        return Err(Error::Config("multi-seed runs need at least 2 seeds".into()));
    }
    let rows = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    let sup: Vec<f64> = rows.iter().map(|r| r.supervised_bleu).collect();
    let zs: Vec<f64> = rows.iter().map(|r| r.zero_shot_bleu).collect();
    Ok(MultiSeedSummary {
        supervised_mean: mean(&sup),
        supervised_variance: population_variance(&sup),
        zero_shot_mean: mean(&zs),
        zero_shot_variance: population_variance(&zs),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(4000, 4000, 5e-4), 5e-4);
        assert!((lr_schedule(16000, 4000, 5e-4) - 2.5e-4).abs() < 1e-18);
        assert!((lr_schedule(1, 4000, 5e-4) - 1.25e-7).abs() < 1e-20);
    }

    #[test]
    fn smoothing_examples() {
        let support = vec![true; 4];
        let logits = [0.3, -1.2, 2.0, 0.1];
        let mut lp = logits.to_vec();
        log_softmax_in_place(&mut lp);
        assert!((label_smoothed_nll(&logits, 2, 0.0, &support) + lp[2]).abs() < 1e-12);
        let uniform = label_smoothed_nll(&[0.0; 4], 1, 0.1, &support);
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothing_matches_direct_sum() {
        let logits = [9.0, -3.0, 0.5, 1.0, -7.0];
        let support = [false, true, true, true, true];
        let eps = 0.1;
        let z: f64 = logits.iter().map(|&x: &f64| x.exp()).sum();
        let mut direct = 0.0;
        for (j, &s) in support.iter().enumerate() {
            let nll = -(logits[j].exp() / z).ln();
            let mut w = if s { eps / 4.0 } else { 0.0 };
            if j == 3 {
                w += 1.0 - eps;
            }
            direct += w * nll;
        }
        assert!((label_smoothed_nll(&logits, 3, eps, &support) - direct).abs() < 1e-10);
    }

    #[test]
    fn graph_loss_matches_scalar_and_skips_padding() {
        let mut g = Graph::<f64>::new(0, false);
        let vals = [0.2, -0.4, 1.5, 0.0, 0.7, -2.0, 0.3, 0.9, 1.0, 1.0, 1.0, 1.0];
        let logits = g.constant(Tensor::from_f64(&[1, 3, 4], &vals).unwrap());
        let support = vec![false, true, true, true];
        let targets = vec![vec![Some(1), Some(3), None]];
        let (loss, n) = smoothed_loss(&mut g, logits, &targets, 0.1, &support).unwrap();
        assert_eq!(n, 2);
        let expect = (label_smoothed_nll(&vals[0..4], 1, 0.1, &support)
            + label_smoothed_nll(&vals[4..8], 3, 0.1, &support))
            / 2.0;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_from_fresh_state() {
        let mut adam = Adam::new(1);
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap().cast::<f32>();
        let before = p.clone();
        adam.update(0, &mut p, &Tensor::zeros(&[3]), 1e-3, &HyperParams::default());
        assert_eq!(p, before);
    }

    #[test]
    fn wildcard_matching() {
        assert!(name_matches("decoder.*.cll.lsl.a.*", "decoder.2.cll.lsl.a.W1"));
        assert!(!name_matches("decoder.*.cll.lsl.a.*", "decoder.2.cll.lsl.b.W1"));
        assert!(name_matches("*", "anything"));
        assert!(name_matches("embed.tokens", "embed.tokens"));
        assert!(!name_matches("embed", "embed.tokens"));
    }

    #[test]
    fn variance_definition() {
        assert_eq!(population_variance(&[2.0, 2.0, 2.0]), 0.0);
        let xs = [1.0, 2.5, 4.0];
        let m = 2.5;
        let hand = ((1.0f64 - m).powi(2) + 0.0 + (4.0f64 - m).powi(2)) / 3.0;
        assert!((population_variance(&xs) - hand).abs() < 1e-12);
        let s = multi_seed_run(&[1, 2, 3], |seed| {
            Ok(SeedMetrics {
                seed,
                supervised_bleu: 10.0,
                zero_shot_bleu: seed as f64,
            })
        })
        .unwrap();
        assert_eq!(s.rows.len(), 3);
        assert_eq!(s.supervised_variance, 0.0);
        assert!(multi_seed_run(&[1], |_| unreachable!()).is_err());
    }
}
