//! Analysis instruments: LSL ablation and rollback, integrated-gradients layer
//! attribution, encoder attention export and mixing-weight tables.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::evaluation::corpus_bleu;
use crate::model::{Component, ForwardOptions, Probe, TransformerModel, BOS, EOS};
use crate::tensor::{Real, Tensor};

/// Forward options that route the named languages (or all non-centered ones) through the shared FFN only.
pub fn ablate_lsl<T: Real>(model: &TransformerModel<T>, languages: Option<&BTreeSet<String>>) -> Result<ForwardOptions> {
    if !model.has_cll() {
        return Err(Error::NoLanguageLayer("model has no CLL blocks".into()));
    }
    let ablated = match languages {
        None => model.languages().non_centered().into_iter().collect(),
        Some(set) => {
            for l in set {
                model.languages().check(l)?;
                if model.languages().is_central(l) {
                    return Err(Error::NoLanguageLayer(l.clone()));
                }
            }
            set.clone()
        }
    };
    Ok(ForwardOptions {
        ablated,
        probe: None,
    })
}

/// BLEU of ablated zero-shot outputs against the supervised direction's references.
///
/// `zero_shot` and `supervised` must share their source sentences, in order.
pub fn rollback_score(ablated: &[Vec<String>], zero_shot: &[&Example], supervised: &[&Example]) -> Result<f64> {
    if zero_shot.len() != supervised.len() || zero_shot.iter().zip(supervised).any(|(a, b)| a.src != b.src) {
        return Err(Error::MisalignedSources);
    }
    let refs: Vec<Vec<String>> = supervised.iter().map(|e| e.tgt.clone()).collect();
    corpus_bleu(ablated, &refs)
}

/// Integrated gradients along the straight path from the zero baseline to `x`.
///
/// `grad(a)` returns `dF/dx` evaluated at the point `a`.
pub fn integrated_gradients(x: &[f64], steps: usize, mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let mut point = vec![0.0; x.len()];
    integrated_gradients_scaled(x, steps, |alpha| {
        for (p, &xi) in point.iter_mut().zip(x) {
            *p = alpha * xi;
        }
        grad(&point)
    })
}

/// Same rule when the caller evaluates the gradient at `alpha * x` itself.
pub fn integrated_gradients_scaled(
    x: &[f64],
    steps: usize,
    mut grad_at: impl FnMut(f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients need steps >= 1".into()));
    }
    let mut acc = vec![0.0; x.len()];
    for k in 1..=steps {
        let g = grad_at(k as f64 / steps as f64)?;
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += gi;
        }
    }
    Ok(acc.iter().zip(x).map(|(a, &xi)| xi * a / steps as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub layer: usize,
    pub component: String,
    pub output_token_index: usize,
    pub token: String,
    pub score: f64,
    /// `F(x) - F(x0)` for this component and token.
    pub delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub src_lang: String,
    pub tgt_lang: String,
    pub sentence_id: usize,
    pub steps: usize,
    pub baseline: String,
    pub rows: Vec<AttributionRow>,
}

/// Which output tokens, layers and components to attribute.
#[derive(Clone, Debug, Default)]
pub struct AttributionRequest {
    /// Empty means every decoder layer.
    pub layers: BTreeSet<usize>,
    /// Empty means all four components.
    pub components: BTreeSet<Component>,
    /// Empty means every reference position (including `</s>`).
    pub positions: BTreeSet<usize>,
    pub steps: usize,
}

struct Scorer<'m, T> {
    model: &'m TransformerModel<T>,
    src: Vec<usize>,
    tgt_in: Vec<usize>,
    tgt_out: Vec<usize>,
    lang: String,
}

impl<T: Real> Scorer<'_, T> {
    /// `F` at `alpha` and its gradient w.r.t. the scaled component input, or `None`
    /// when the component is not on the routed path.
    fn eval(&self, probe: Probe, position: usize) -> Result<Option<(f64, Tensor<T>, Tensor<T>)>> {
        let opts = ForwardOptions {
            ablated: BTreeSet::new(),
            probe: Some(probe),
        };
        let mut fwd = self.model.forward(0, false, false, opts);
        let enc = fwd.encode(&[self.src.clone()])?;
        let logits = fwd.decode(&enc, &[self.tgt_in.clone()], &self.lang)?;
        let Some(tapped) = fwd.take_tapped() else {
            return Ok(None);
        };
        let lp = fwd.graph.log_softmax(logits);
        let v = self.model.vocab().len();
        let mut w = vec![T::zero(); self.tgt_in.len() * v];
        w[position * v + self.tgt_out[position]] = T::one();
        let f = fwd.graph.weighted_sum(lp, w)?;
        let value = fwd.graph.value(f).item().as_f64();
        let mut grads = fwd.graph.backward_retaining(f, &[tapped.node])?;
        let g = grads
            .take(tapped.node)
            .unwrap_or_else(|| Tensor::zeros(fwd.graph.shape(tapped.node)));
        Ok(Some((value, tapped.input, g)))
    }
}

/// Token-level layer attribution of a teacher-forced reference under the zero-activation baseline.
pub fn attribute<T: Real>(
    model: &TransformerModel<T>,
    example: &Example,
    sentence_id: usize,
    request: &AttributionRequest,
) -> Result<AttributionReport> {
    if request.steps == 0 {
        return Err(Error::Config("integrated gradients need steps >= 1".into()));
    }
    let src = model.source_ids(&example.src, &example.tgt_lang, false)?;
    let tgt = model.vocab().encode(&example.tgt)?;
    let mut tgt_in = vec![BOS];
    tgt_in.extend_from_slice(&tgt);
    let mut tgt_out = tgt.clone();
    tgt_out.push(EOS);
    let scorer = Scorer {
        model,
        src,
        tgt_in,
        tgt_out,
        lang: example.tgt_lang.clone(),
    };
    let layers: Vec<usize> = if request.layers.is_empty() {
        (1..=model.config().num_layers).collect()
    } else {
        request.layers.iter().copied().collect()
    };
    let components: Vec<Component> = if request.components.is_empty() {
        Component::ALL.to_vec()
    } else {
        request.components.iter().copied().collect()
    };
    let positions: Vec<usize> = if request.positions.is_empty() {
        (0..scorer.tgt_out.len()).collect()
    } else {
        request.positions.iter().copied().collect()
    };
    let mut report = AttributionReport {
        src_lang: example.src_lang.clone(),
        tgt_lang: example.tgt_lang.clone(),
        sentence_id,
        steps: request.steps,
        baseline: "zero-activation".into(),
        rows: Vec::new(),
    };
    for &layer in &layers {
        for &component in &components {
            for &pos in &positions {
                if pos >= scorer.tgt_out.len() {
                    return Err(Error::Config(alloc::format!("position {pos} is past the reference")));
                }
                let probe = |alpha| Probe {
                    layer,
                    component,
                    alpha,
                };
                let Some((f_x, x, _)) = scorer.eval(probe(1.0), pos)? else {
                    continue;
                };
                let (f_0, _, _) = scorer.eval(probe(0.0), pos)?.expect("same routing at every alpha");
                let x64 = x.to_f64_vec();
                let attr = integrated_gradients_scaled(&x64, request.steps, |alpha| {
                    Ok(match scorer.eval(probe(alpha), pos)? {
                        Some((_, _, g)) => g.to_f64_vec(),
                        None => vec![0.0; x64.len()],
                    })
                })?;
                let token = model.vocab().token(scorer.tgt_out[pos])?.into();
                report.rows.push(AttributionRow {
                    layer,
                    component: component.name().into(),
                    output_token_index: pos,
                    token,
                    score: attr.iter().sum(),
                    delta: f_x - f_0,
                });
            }
        }
    }
    Ok(report)
}

/// Encoder self-attention `[layer][head]`, each a row-major `len x len` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub tokens: Vec<String>,
    pub maps: Vec<Vec<Vec<f64>>>,
}

impl AttentionMaps {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn export_attention<T: Real>(
    model: &TransformerModel<T>,
    src: &[String],
    target_lang: &str,
    omit_token: bool,
) -> Result<AttentionMaps> {
    let ids = model.source_ids(src, target_lang, omit_token)?;
    let tokens = model.vocab().decode(&ids)?.into_iter().map(String::from).collect();
    let mut fwd = model.forward(0, false, false, ForwardOptions::default());
    let enc = fwd.encode(&[ids])?;
    let maps = enc
        .attention
        .iter()
        .map(|heads| heads.iter().map(|&n| fwd.graph.value(n).to_f64_vec()).collect())
        .collect();
    Ok(AttentionMaps { tokens, maps })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingTable {
    /// `(layer, language, t)`.
    pub rows: Vec<(usize, String, f64)>,
    /// Per-language mean over layers.
    pub averages: BTreeMap<String, f64>,
}

pub fn dump_mixing_weights<T: Real>(model: &TransformerModel<T>) -> MixingTable {
    let rows = model.mixing_weights();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (_, lang, t) in &rows {
        let e = sums.entry(lang.clone()).or_default();
        e.0 += t;
        e.1 += 1;
    }
    let averages = sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect();
    MixingTable { rows, averages }
}
