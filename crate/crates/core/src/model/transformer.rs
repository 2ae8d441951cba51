use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::config::{LanguageSet, ModelConfig};
use crate::model::layers::{cll_forward_tapped, ffn_forward_tapped, CllNodes, CllTaps, FfnNodes, Stage, Tap, Tapped};
use crate::model::params::{ParamId, ParamStore};
use crate::model::vocab::{Vocab, EOS, PAD};
use crate::rng::rng_for;
use crate::tensor::{Real, Tensor};

const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnIds {
    pub fn all(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: AttnIds,
    attn_norm: NormIds,
    ffn: FfnIds,
    ffn_norm: NormIds,
}

/// Parameter ids of one CLL block's language-specific part.
#[derive(Clone, Debug, Default)]
pub struct CllIds {
    pub lsl: BTreeMap<String, FfnIds>,
    pub t: BTreeMap<String, ParamId>,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttnIds,
    self_norm: NormIds,
    cross_attn: AttnIds,
    cross_norm: NormIds,
    ffn: FfnIds,
    cll: Option<CllIds>,
    ffn_norm: NormIds,
}

/// Sub-network probed by integrated gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Ffn1,
    Ffn2,
    Lsl1,
    Lsl2,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Ffn1, Component::Ffn2, Component::Lsl1, Component::Lsl2];

    pub fn name(self) -> &'static str {
        match self {
            Component::Ffn1 => "ffn1",
            Component::Ffn2 => "ffn2",
            Component::Lsl1 => "lsl1",
            Component::Lsl2 => "lsl2",
        }
    }

    fn stage(self) -> Stage {
        match self {
            Component::Ffn1 | Component::Lsl1 => Stage::First,
            Component::Ffn2 | Component::Lsl2 => Stage::Second,
        }
    }
}

/// Scales the input of one decoder component by `alpha`.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    /// 1-based decoder layer.
    pub layer: usize,
    pub component: Component,
    pub alpha: f64,
}

/// Switches applied during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Languages whose language-specific path is skipped.
    pub ablated: BTreeSet<String>,
    pub probe: Option<Probe>,
}

/// Encoder-decoder Transformer whose designated decoder layers carry CLL blocks.
#[derive(Clone, Debug)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    languages: LanguageSet,
    vocab: Vocab,
    params: ParamStore<T>,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    positions: Tensor<T>,
}

fn sinusoid<T: Real>(max_len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(max_len * d);
    for pos in 0..max_len {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / libm_pow(10000.0, 2.0 * i / d as f64);
            data.push(T::from_f64_lossy(if j % 2 == 0 {
                num_traits::Float::sin(angle)
            } else {
                num_traits::Float::cos(angle)
            }));
        }
    }
    Tensor::from_parts(vec![max_len, d], data)
}

fn libm_pow(a: f64, b: f64) -> f64 {
    num_traits::Float::powf(a, b)
}

/// Parameter factory: every tensor draws from its own named substream of the seed.
struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<ParamId> {
        let mut rng = rng_for(self.seed, &format!("init/{name}"));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
            .collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64);
        self.uniform(name, &[fan_in, fan_out], bound)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, T::from_f64_lossy(value)))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            q_w: self.xavier(format!("{prefix}.q.W"), d, d)?,
            q_b: self.fill(format!("{prefix}.q.b"), &[d], 0.0)?,
            k_w: self.xavier(format!("{prefix}.k.W"), d, d)?,
            k_b: self.fill(format!("{prefix}.k.b"), &[d], 0.0)?,
            v_w: self.xavier(format!("{prefix}.v.W"), d, d)?,
            v_b: self.fill(format!("{prefix}.v.b"), &[d], 0.0)?,
            o_w: self.xavier(format!("{prefix}.o.W"), d, d)?,
            o_b: self.fill(format!("{prefix}.o.b"), &[d], 0.0)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, inner: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.xavier(format!("{prefix}.W1"), d, inner)?,
            b1: self.fill(format!("{prefix}.b1"), &[inner], 0.0)?,
            w2: self.xavier(format!("{prefix}.W2"), inner, d)?,
            b2: self.fill(format!("{prefix}.b2"), &[d], 0.0)?,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.fill(format!("{prefix}.gain"), &[d], 1.0)?,
            bias: self.fill(format!("{prefix}.bias"), &[d], 0.0)?,
        })
    }
}

pub(crate) fn lsl_name(layer: usize, lang: &str) -> String {
    format!("decoder.{layer}.cll.lsl.{lang}")
}

pub(crate) fn t_name(layer: usize, lang: &str) -> String {
    format!("decoder.{layer}.cll.t.{lang}")
}

impl<T: Real> TransformerModel<T> {
    /// Freshly initialized model; every language in `languages` must have a tag in `vocab`.
    pub fn new(config: ModelConfig, languages: LanguageSet, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        for l in languages.languages() {
            vocab.language_token(l)?;
        }
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed,
        };
        let bound = num_traits::Float::sqrt(3.0 / d as f64);
        let embed = init.uniform("embed.tokens".into(), &[vocab.len(), d], bound)?;
        init.store.get_mut(embed).data_mut()[PAD * d..(PAD + 1) * d]
            .iter_mut()
            .for_each(|v| *v = T::zero());

        let mut encoder = Vec::with_capacity(config.num_layers);
        for i in 1..=config.num_layers {
            encoder.push(EncoderLayer {
                attn: init.attn(&format!("encoder.{i}.self_attn"), d)?,
                attn_norm: init.norm(&format!("encoder.{i}.self_attn_norm"), d)?,
                ffn: init.ffn(&format!("encoder.{i}.ffn"), d, config.ffn_inner)?,
                ffn_norm: init.norm(&format!("encoder.{i}.ffn_norm"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.num_layers);
        for i in 1..=config.num_layers {
            let self_attn = init.attn(&format!("decoder.{i}.self_attn"), d)?;
            let self_norm = init.norm(&format!("decoder.{i}.self_attn_norm"), d)?;
            let cross_attn = init.attn(&format!("decoder.{i}.cross_attn"), d)?;
            let cross_norm = init.norm(&format!("decoder.{i}.cross_attn_norm"), d)?;
            let ffn = init.ffn(&format!("decoder.{i}.ffn"), d, config.ffn_inner)?;
            let ffn_norm = init.norm(&format!("decoder.{i}.ffn_norm"), d)?;
            let cll = if config.cll_layers.contains(&i) {
                let mut ids = CllIds::default();
                for lang in languages.non_centered() {
                    let lsl = init.ffn(&lsl_name(i, &lang), d, config.lsl_inner)?;
                    let t = init.fill(t_name(i, &lang), &[1], config.t_init)?;
                    ids.lsl.insert(lang.clone(), lsl);
                    ids.t.insert(lang, t);
                }
                Some(ids)
            } else {
                None
            };
            decoder.push(DecoderLayer {
                self_attn,
                self_norm,
                cross_attn,
                cross_norm,
                ffn,
                cll,
                ffn_norm,
            });
        }
        let positions = sinusoid(config.max_positions, d);
        Ok(Self {
            config,
            languages,
            vocab,
            params: store,
            embed,
            encoder,
            decoder,
            positions,
        })
    }

    /// Rebuilds a model around existing parameters (checkpoint loading).
    pub fn from_parts(config: ModelConfig, languages: LanguageSet, vocab: Vocab, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, languages, vocab, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::VocabMismatch(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let t = params
                .by_name(&name)
                .ok_or_else(|| Error::VocabMismatch(format!("missing parameter `{name}`")))?;
            model.params.set(id, t.clone())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn languages(&self) -> &LanguageSet {
        &self.languages
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    /// Language-specific ids of the CLL block at 1-based decoder `layer`.
    pub fn cll_block(&self, layer: usize) -> Option<&CllIds> {
        self.decoder.get(layer.checked_sub(1)?)?.cll.as_ref()
    }

    /// Shared FFN ids of 1-based decoder `layer`.
    pub fn decoder_ffn(&self, layer: usize) -> Option<FfnIds> {
        Some(self.decoder.get(layer.checked_sub(1)?)?.ffn)
    }

    pub fn has_cll(&self) -> bool {
        self.decoder.iter().any(|l| l.cll.is_some())
    }

    /// `(layer, language, t)` for every CLL block.
    pub fn mixing_weights(&self) -> Vec<(usize, String, f64)> {
        let mut out = Vec::new();
        for (i, layer) in self.decoder.iter().enumerate() {
            if let Some(cll) = &layer.cll {
                for (lang, &id) in &cll.t {
                    out.push((i + 1, lang.clone(), self.params.get(id).item().as_f64()));
                }
            }
        }
        out
    }

    /// Parameter count of the language-specific additions in this model.
    pub fn extra_param_count(&self) -> usize {
        self.decoder
            .iter()
            .filter_map(|l| l.cll.as_ref())
            .map(|c| {
                c.lsl.values().flat_map(FfnIds::all).chain(c.t.values().copied())
                    .map(|id| self.params.get(id).numel())
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            languages: self.languages.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            embed: self.embed,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            positions: self.positions.cast(),
        }
    }

    /// `x' = (<l>, x)`, or `x` unchanged when tokens are disabled or `omit` is set.
    pub fn insert_language_token(&self, tokens: &[String], target_lang: &str, omit: bool) -> Result<Vec<String>> {
        self.languages.check(target_lang)?;
        Ok(insert_language_token(tokens, target_lang, self.config.use_language_tokens && !omit))
    }

    /// Encoder input ids: optional language tag, the sentence, then `</s>`.
    pub fn source_ids(&self, tokens: &[String], target_lang: &str, omit: bool) -> Result<Vec<usize>> {
        let with_tag = self.insert_language_token(tokens, target_lang, omit)?;
        let mut ids = self.vocab.encode(&with_tag)?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Starts a forward pass. `trainable` binds parameters as differentiable leaves.
    pub fn forward(&self, seed: u64, training: bool, trainable: bool, options: ForwardOptions) -> Forward<'_, T> {
        Forward {
            model: self,
            graph: Graph::new(seed, training),
            bound: vec![None; self.params.len()],
            trainable,
            options,
            tapped: None,
            frozen: Vec::new(),
        }
    }

    // --- structural edits used when integrating a new language ---

    pub(crate) fn extend_vocab(&mut self, vocab: Vocab, new_rows: Vec<T>) -> Result<()> {
        let d = self.config.d_model;
        let old = self.params.get(self.embed);
        if vocab.len() * d != old.numel() + new_rows.len() {
            return Err(Error::VocabMismatch("embedding rows do not match vocabulary".into()));
        }
        let mut data = old.data().to_vec();
        data.extend(new_rows);
        self.params.set_unchecked(self.embed, Tensor::new(vec![vocab.len(), d], data)?);
        self.vocab = vocab;
        Ok(())
    }

    pub(crate) fn add_language_layers(
        &mut self,
        lang: &str,
        mut init: impl FnMut(usize, &str, &ParamStore<T>, &CllIds) -> Result<Vec<(String, Tensor<T>)>>,
    ) -> Result<()> {
        self.languages.push(lang.into())?;
        for i in 0..self.decoder.len() {
            let Some(cll) = self.decoder[i].cll.clone() else {
                continue;
            };
            let tensors = init(i + 1, lang, &self.params, &cll)?;
            let mut ids = BTreeMap::new();
            for (name, t) in tensors {
                ids.insert(name.clone(), self.params.insert(name, t)?);
            }
            let prefix = lsl_name(i + 1, lang);
            let get = |suffix: &str| -> Result<ParamId> {
                ids.get(&format!("{prefix}.{suffix}"))
                    .copied()
                    .ok_or_else(|| Error::Config(format!("missing {prefix}.{suffix}")))
            };
            let lsl = FfnIds {
                w1: get("W1")?,
                b1: get("b1")?,
                w2: get("W2")?,
                b2: get("b2")?,
            };
            let t = *ids
                .get(&t_name(i + 1, lang))
                .ok_or_else(|| Error::Config(format!("missing {}", t_name(i + 1, lang))))?;
            let block = self.decoder[i].cll.as_mut().expect("checked above");
            block.lsl.insert(lang.into(), lsl);
            block.t.insert(lang.into(), t);
        }
        Ok(())
    }
}

impl<T: Real> ParamStore<T> {
    pub(crate) fn set_unchecked(&mut self, id: ParamId, tensor: Tensor<T>) {
        *self.get_mut(id) = tensor;
    }
}

/// Prepends the tag of `target_lang` when `enabled`.
pub fn insert_language_token(tokens: &[String], target_lang: &str, enabled: bool) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    if enabled {
        out.push(crate::model::vocab::language_tag(target_lang));
    }
    out.extend(tokens.iter().cloned());
    out
}

/// Encoder result inside a [`Forward`] graph.
pub struct EncoderOutput {
    pub states: NodeId,
    pub lengths: Vec<usize>,
    /// `[layer][head]` attention probabilities, each `[B, S, S]`.
    pub attention: Vec<Vec<NodeId>>,
}

/// One forward pass over a model: owns the graph and binds parameters lazily.
pub struct Forward<'m, T> {
    model: &'m TransformerModel<T>,
    pub graph: Graph<T>,
    bound: Vec<Option<NodeId>>,
    trainable: bool,
    options: ForwardOptions,
    tapped: Option<Tapped<T>>,
    frozen: Vec<bool>,
}

fn pad_batch(seqs: &[Vec<usize>]) -> (Vec<usize>, usize, Vec<usize>) {
    let max = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * max);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(core::iter::repeat(PAD).take(max - s.len()));
    }
    (ids, max, seqs.iter().map(Vec::len).collect())
}

impl<'m, T: Real> Forward<'m, T> {
    pub fn model(&self) -> &'m TransformerModel<T> {
        self.model
    }

    /// Graph node of parameter `id` (inserted on first use).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let value = self.model.params.get(id).clone();
        let frozen = self.frozen.get(id.0).copied().unwrap_or(false);
        let n = if self.trainable && !frozen {
            self.graph.parameter(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(n);
        n
    }

    /// Binds the parameters flagged in `mask` as constants. Call before any parameter is used.
    pub fn freeze(&mut self, mask: Vec<bool>) {
        self.frozen = mask;
    }

    /// Parameters bound so far, with their graph nodes.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (ParamId(i), n)))
    }

    /// The activation intercepted by the probe, if the probed component was evaluated.
    pub fn take_tapped(&mut self) -> Option<Tapped<T>> {
        self.tapped.take()
    }

    fn embed(&mut self, ids: &[usize], batch: usize, len: usize) -> Result<NodeId> {
        let cfg = &self.model.config;
        if len > cfg.max_positions {
            return Err(Error::PrefixTooLong {
                len,
                max: cfg.max_positions,
            });
        }
        let table = self.param(self.model.embed);
        let x = self.graph.embedding(table, ids, &[batch, len])?;
        let x = self.graph.scale(x, num_traits::Float::sqrt(cfg.d_model as f64));
        let d = cfg.d_model;
        let pos = Tensor::from_parts(vec![len, d], self.model.positions.data()[..len * d].to_vec());
        let pos = self.graph.constant(pos);
        let x = self.graph.add(x, pos)?;
        Ok(self.graph.dropout(x, cfg.dropout))
    }

    fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.graph.matmul(x, w)?;
        self.graph.add(y, b)
    }

    fn norm(&mut self, x: NodeId, ids: NormIds) -> Result<NodeId> {
        let g = self.param(ids.gain);
        let b = self.param(ids.bias);
        self.graph.layer_norm(x, g, b)
    }

    fn ffn_nodes(&mut self, ids: FfnIds) -> FfnNodes {
        FfnNodes {
            w1: self.param(ids.w1),
            b1: self.param(ids.b1),
            w2: self.param(ids.w2),
            b2: self.param(ids.b2),
        }
    }

    fn attention(&mut self, ids: &AttnIds, x: NodeId, mem: NodeId, mask: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let cfg = &self.model.config;
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let q = self.linear(x, ids.q_w, ids.q_b)?;
        let q = self.graph.scale(q, 1.0 / num_traits::Float::sqrt(dh as f64));
        let k = self.linear(mem, ids.k_w, ids.k_b)?;
        let v = self.linear(mem, ids.v_w, ids.v_b)?;
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.graph.slice(q, h * dh, dh)?,
                    self.graph.slice(k, h * dh, dh)?,
                    self.graph.slice(v, h * dh, dh)?,
                )
            };
            let scores = self.graph.matmul_t(qh, kh)?;
            let scores = self.graph.add(scores, mask)?;
            let p = self.graph.softmax(scores);
            probs.push(p);
            outs.push(self.graph.matmul(p, vh)?);
        }
        let ctx = if heads == 1 { outs[0] } else { self.graph.concat(&outs)? };
        Ok((self.linear(ctx, ids.o_w, ids.o_b)?, probs))
    }

    fn key_padding_mask(&mut self, lengths: &[usize], tq: usize, tk: usize, causal: bool) -> NodeId {
        let neg = T::from_f64_lossy(MASKED);
        let mut data = vec![T::zero(); lengths.len() * tq * tk];
        for (b, &len) in lengths.iter().enumerate() {
            for i in 0..tq {
                for j in 0..tk {
                    if j >= len || (causal && j > i) {
                        data[(b * tq + i) * tk + j] = neg;
                    }
                }
            }
        }
        self.graph
            .constant(Tensor::from_parts(vec![lengths.len(), tq, tk], data))
    }

    /// Post-norm encoder; the FFN residual is dropped at `remove_residual_layer`.
    pub fn encode(&mut self, src: &[Vec<usize>]) -> Result<EncoderOutput> {
        let model = self.model;
        let vocab_len = model.vocab.len();
        if let Some(&bad) = src.iter().flatten().find(|&&t| t >= vocab_len) {
            return Err(Error::TokenIdOutOfRange(bad));
        }
        if src.is_empty() || src.iter().any(Vec::is_empty) {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![src.len()],
                rhs: vec![0],
            });
        }
        let (ids, s, lengths) = pad_batch(src);
        let b = src.len();
        let mut x = self.embed(&ids, b, s)?;
        let mask = self.key_padding_mask(&lengths, s, s, false);
        let rate = model.config.dropout;
        let mut attention = Vec::with_capacity(model.encoder.len());
        for (i, layer) in model.encoder.iter().enumerate() {
            let (a, probs) = self.attention(&layer.attn, x, x, mask)?;
            attention.push(probs);
            let a = self.graph.dropout(a, rate);
            let r = self.graph.add(x, a)?;
            x = self.norm(r, layer.attn_norm)?;
            let p = self.ffn_nodes(layer.ffn);
            let (f, _) = ffn_forward_tapped(&mut self.graph, x, &p, None)?;
            let f = self.graph.dropout(f, rate);
            let pre = if model.config.remove_residual_layer == Some(i + 1) {
                f
            } else {
                self.graph.add(x, f)?
            };
            x = self.norm(pre, layer.ffn_norm)?;
        }
        Ok(EncoderOutput {
            states: x,
            lengths,
            attention,
        })
    }

    /// Registers externally computed encoder states `[B, S, d]` as a constant.
    pub fn encoder_states(&mut self, states: Tensor<T>, lengths: Vec<usize>) -> EncoderOutput {
        let states = self.graph.constant(states);
        EncoderOutput {
            states,
            lengths,
            attention: Vec::new(),
        }
    }

    /// Teacher-forced decoder; returns logits `[B, T, V]`. Every prefix starts with `<s>`.
    pub fn decode(&mut self, enc: &EncoderOutput, tgt_in: &[Vec<usize>], target_lang: &str) -> Result<NodeId> {
        let model = self.model;
        model.languages.check(target_lang)?;
        let vocab_len = model.vocab.len();
        if let Some(&bad) = tgt_in.iter().flatten().find(|&&t| t >= vocab_len) {
            return Err(Error::TokenIdOutOfRange(bad));
        }
        let b = tgt_in.len();
        if b != enc.lengths.len() {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: vec![b],
                rhs: vec![enc.lengths.len()],
            });
        }
        let (ids, t, lengths) = pad_batch(tgt_in);
        let s = self.graph.shape(enc.states)[1];
        let mut x = self.embed(&ids, b, t)?;
        let self_mask = self.key_padding_mask(&lengths, t, t, true);
        let cross_mask = self.key_padding_mask(&enc.lengths, t, s, false);
        let rate = model.config.dropout;
        let cll_rate = model.config.cll_dropout;
        let ablate = self.options.ablated.contains(target_lang);
        let probe = self.options.probe;
        for (i, layer) in model.decoder.iter().enumerate() {
            let (a, _) = self.attention(&layer.self_attn, x, x, self_mask)?;
            let a = self.graph.dropout(a, rate);
            let r = self.graph.add(x, a)?;
            x = self.norm(r, layer.self_norm)?;
            let (c, _) = self.attention(&layer.cross_attn, x, enc.states, cross_mask)?;
            let c = self.graph.dropout(c, rate);
            let r = self.graph.add(x, c)?;
            x = self.norm(r, layer.cross_norm)?;

            let here = probe.filter(|p| p.layer == i + 1);
            let tap_for = |want: [Component; 2]| {
                here.filter(|p| want.contains(&p.component)).map(|p| Tap {
                    stage: p.component.stage(),
                    alpha: p.alpha,
                })
            };
            let ffn_tap = tap_for([Component::Ffn1, Component::Ffn2]);
            let lsl_tap = tap_for([Component::Lsl1, Component::Lsl2]);
            let ffn = self.ffn_nodes(layer.ffn);
            let (f, tapped) = match &layer.cll {
                Some(cll) => {
                    let mut block = CllNodes::default();
                    if !model.languages.is_central(target_lang) && !ablate {
                        if let (Some(lsl), Some(&tid)) = (cll.lsl.get(target_lang), cll.t.get(target_lang)) {
                            let nodes = self.ffn_nodes(*lsl);
                            let tn = self.param(tid);
                            block.lsl.insert(target_lang.to_string(), nodes);
                            block.t.insert(target_lang.to_string(), tn);
                        }
                    }
                    let taps = CllTaps {
                        ffn: ffn_tap,
                        lsl: lsl_tap,
                        ablate,
                    };
                    cll_forward_tapped(&mut self.graph, x, target_lang, &model.languages, &ffn, &block, cll_rate, taps)?
                }
                None => ffn_forward_tapped(&mut self.graph, x, &ffn, ffn_tap)?,
            };
            if tapped.is_some() {
                self.tapped = tapped;
            }
            let f = self.graph.dropout(f, rate);
            let r = self.graph.add(x, f)?;
            x = self.norm(r, layer.ffn_norm)?;
        }
        let table = self.param(model.embed);
        self.graph.matmul_t(x, table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_token_examples() {
        let toks: Vec<String> = vec!["w1".into(), "w2".into()];
        assert_eq!(insert_language_token(&toks, "L2", true), vec!["<L2>", "w1", "w2"]);
        assert_eq!(insert_language_token(&toks, "L2", false), vec!["w1", "w2"]);
        assert_eq!(insert_language_token(&[], "L2", true), vec!["<L2>"]);
    }
}
