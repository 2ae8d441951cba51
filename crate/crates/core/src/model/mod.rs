//! Encoder-decoder Transformer with central-language-aware decoder layers.

mod config;
mod layers;
mod params;
mod transformer;
mod vocab;

pub use config::{count_extra_params, count_extra_params_for, middle_layer, LanguageSet, ModelConfig, Variant};
pub use layers::{
    cll_forward, cll_forward_tapped, ffn_forward, ffn_forward_tapped, lsl_forward, lsl_forward_tapped, CllNodes,
    CllTaps, FfnNodes, Stage, Tap, Tapped,
};
pub use params::{ParamId, ParamStore};
pub use transformer::{
    insert_language_token, CllIds, Component, EncoderOutput, FfnIds, Forward, ForwardOptions, Probe,
    TransformerModel,
};
pub use vocab::{language_tag, TokenKind, Vocab, BOS, EOS, PAD};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::log_softmax_in_place;
use crate::tensor::{Real, Tensor};

/// Encoder states of one source sentence, reusable across decoding steps.
#[derive(Clone, Debug)]
pub struct EncodedSource<T> {
    pub states: Tensor<T>,
    pub len: usize,
}

impl<T: Real> TransformerModel<T> {
    /// Encodes one source id sequence (already tagged and terminated) in inference mode.
    pub fn encode_source(&self, src: &[usize], options: &ForwardOptions) -> Result<EncodedSource<T>> {
        let mut fwd = self.forward(0, false, false, options.clone());
        let enc = fwd.encode(&[src.to_vec()])?;
        Ok(EncodedSource {
            states: fwd.graph.value(enc.states).clone(),
            len: src.len(),
        })
    }

    /// Next-token log-probabilities `[prefixes.len()][vocab]` for each prefix.
    pub fn decode_step(
        &self,
        source: &EncodedSource<T>,
        prefixes: &[Vec<usize>],
        target_lang: &str,
        options: &ForwardOptions,
    ) -> Result<Vec<Vec<T>>> {
        let logits = self.decode_step_logits(source, prefixes, target_lang, options)?;
        Ok(logits
            .into_iter()
            .map(|mut row| {
                log_softmax_in_place(&mut row);
                row
            })
            .collect())
    }

    /// Raw next-token logits for each prefix.
    pub fn decode_step_logits(
        &self,
        source: &EncodedSource<T>,
        prefixes: &[Vec<usize>],
        target_lang: &str,
        options: &ForwardOptions,
    ) -> Result<Vec<Vec<T>>> {
        let n = prefixes.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let len = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != len || p.first() != Some(&BOS)) {
            return Err(Error::Config("prefixes must share a length and start with <s>".into()));
        }
        if len > self.config().max_positions {
            return Err(Error::PrefixTooLong {
                len,
                max: self.config().max_positions,
            });
        }
        let one = source.states.data();
        let mut tiled = Vec::with_capacity(one.len() * n);
        for _ in 0..n {
            tiled.extend_from_slice(one);
        }
        let mut shape = source.states.shape().to_vec();
        shape[0] = n;
        let mut fwd = self.forward(0, false, false, options.clone());
        let enc = fwd.encoder_states(Tensor::new(shape, tiled)?, vec![source.len; n]);
        let logits = fwd.decode(&enc, prefixes, target_lang)?;
        let out = fwd.graph.value(logits);
        let v = out.last_dim();
        Ok((0..n)
            .map(|b| {
                let row = (b * len + len - 1) * v;
                out.data()[row..row + v].to_vec()
            })
            .collect())
    }
}
