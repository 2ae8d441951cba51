//! Experiment configuration files (JSON, versioned by `schema_version`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cll_core::corpus::{ConditionKind, CorpusSpec, Direction, LengthRange};
use cll_core::model::{Component, ModelConfig, Variant};
use cll_core::rng::substream;
use cll_core::training::{HyperParams, IntegrationOptions};
use serde::{Deserialize, Serialize};

use crate::corpus_io::LanguageRecipe;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub condition: ConditionKind,
    /// For the centered condition the first language is central.
    pub languages: Vec<String>,
    /// Zero-shot pairs promoted to supervised, written `src-tgt`.
    #[serde(default)]
    pub extra_pairs: Vec<String>,
    #[serde(default = "defaults::base_vocab")]
    pub base_vocab: usize,
    pub n_per_direction: usize,
    #[serde(default = "defaults::n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub lengths: LengthRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub num_layers: usize,
    pub d_model: usize,
    pub ffn_inner: usize,
    pub heads: usize,
    /// Defaults to `d_model`.
    #[serde(default)]
    pub lsl_inner: Option<usize>,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::dropout")]
    pub cll_dropout: f64,
    /// Only for the `custom` variant.
    #[serde(default)]
    pub cll_layers: Option<BTreeSet<usize>>,
    /// Only for the `custom` variant: remove the encoder FFN residual at the middle layer.
    #[serde(default)]
    pub remove_residual: bool,
    #[serde(default = "defaults::yes")]
    pub use_language_tokens: bool,
    #[serde(default = "defaults::t_init")]
    pub t_init: f64,
    #[serde(default = "defaults::max_positions")]
    pub max_positions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam: usize,
    pub max_sentences: Option<usize>,
    pub omit_token: bool,
    /// Score zero-shot directions against the references of the supervised direction from the same source.
    pub substituted_reference: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Keep sets to train, first to last; derived by shrinking toward the middle when absent.
    pub keep: Option<Vec<BTreeSet<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub steps: usize,
    /// `src-tgt`; defaults to the first direction into a language with language-specific layers.
    pub direction: Option<String>,
    pub sentences: Vec<usize>,
    /// Empty means every decoder layer.
    pub layers: BTreeSet<usize>,
    /// Empty means all four components.
    pub components: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationConfig {
    pub language: String,
    /// Defaults to the central language, else the first language.
    pub partner: Option<String>,
    pub pairs_per_direction: usize,
    pub steps: usize,
    /// Cap on replayed original examples per direction; absent replays the whole training set.
    pub replay_per_direction: Option<usize>,
    pub embedding_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiSeedConfig {
    pub variants: Vec<Variant>,
}

/// Everything one experiment needs.
///
/// `seed` drives the data (languages and corpus); each entry of `seeds` is a training
/// run seed (initialization, batching and dropout).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub training: HyperParams,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub attribution: AttributionConfig,
    #[serde(default)]
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub multiseed: MultiSeedConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

mod defaults {
    pub fn base_vocab() -> usize {
        24
    }
    pub fn n_test() -> usize {
        500
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn t_init() -> f64 {
        0.1
    }
    pub fn max_positions() -> usize {
        256
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            max_sentences: None,
            omit_token: false,
            substituted_reference: false,
        }
    }
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            steps: 128,
            direction: None,
            sentences: vec![0],
            layers: BTreeSet::new(),
            components: Vec::new(),
        }
    }
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            language: "new".into(),
            partner: None,
            pairs_per_direction: 1000,
            steps: 1000,
            replay_per_direction: None,
            embedding_noise: IntegrationOptions::default().embedding_noise,
        }
    }
}

impl Default for MultiSeedConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Baseline, Variant::Fcll, Variant::Sd],
        }
    }
}

impl Default for ExperimentConfig {
    /// A small centered experiment that trains in a few minutes.
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            seeds: vec![1, 2, 3],
            data: DataConfig {
                condition: ConditionKind::Centered,
                languages: ["en", "a", "b", "c"].map(String::from).to_vec(),
                extra_pairs: Vec::new(),
                base_vocab: defaults::base_vocab(),
                n_per_direction: 2000,
                n_test: 100,
                lengths: LengthRange::default(),
            },
            model: ModelSection {
                variant: Variant::Fcll,
                num_layers: 2,
                d_model: 64,
                ffn_inner: 128,
                heads: 4,
                lsl_inner: None,
                dropout: defaults::dropout(),
                cll_dropout: defaults::dropout(),
                cll_layers: None,
                remove_residual: false,
                use_language_tokens: true,
                t_init: defaults::t_init(),
                max_positions: defaults::max_positions(),
            },
            training: HyperParams {
                peak_lr: 2e-3,
                max_steps: 1000,
                ..HyperParams::default()
            },
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            attribution: AttributionConfig::default(),
            integration: IntegrationConfig::default(),
            multiseed: MultiSeedConfig::default(),
            out: None,
        }
    }
}

pub fn parse_direction(s: &str) -> Result<Direction> {
    match s.split_once('-') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.into(), b.into())),
        _ => Err(Error::Config(format!("direction `{s}` is not of the form src-tgt"))),
    }
}

impl ModelSection {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.variant, self.num_layers, self.d_model, self.ffn_inner, self.heads);
        cfg.lsl_inner = self.lsl_inner.unwrap_or(self.d_model);
        cfg.dropout = self.dropout;
        cfg.cll_dropout = self.cll_dropout;
        cfg.use_language_tokens = self.use_language_tokens;
        cfg.t_init = self.t_init;
        cfg.max_positions = self.max_positions;
        match (self.variant, &self.cll_layers) {
            (Variant::Custom, Some(layers)) => cfg = cfg.custom(layers.iter().copied(), self.remove_residual),
            (Variant::Custom, None) => return Err(Error::Config("the custom variant needs cll_layers".into())),
            (_, Some(_)) => return Err(Error::Config("cll_layers is only valid for the custom variant".into())),
            (_, None) if self.remove_residual => {
                return Err(Error::Config("remove_residual is only valid for the custom variant".into()))
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(Error::Config(format!("unsupported schema_version {v}"))),
            None => return Err(Error::Config("missing schema_version".into())),
        }
        let cfg: Self = serde_json::from_value(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.model_config()?;
        self.training.validate()?;
        self.extra_pairs()?;
        if self.data.languages.len() < 2 {
            return Err(Error::Config("at least two languages are needed".into()));
        }
        if self.eval.beam == 0 {
            return Err(Error::Config("beam must be >= 1".into()));
        }
        if self.attribution.steps == 0 {
            return Err(Error::Config("attribution steps must be >= 1".into()));
        }
        self.components()?;
        Ok(())
    }

    pub fn extra_pairs(&self) -> Result<BTreeSet<Direction>> {
        self.data.extra_pairs.iter().map(|s| parse_direction(s)).collect()
    }

    pub fn components(&self) -> Result<BTreeSet<Component>> {
        self.attribution
            .components
            .iter()
            .map(|c| {
                Component::ALL
                    .into_iter()
                    .find(|k| k.name() == c)
                    .ok_or_else(|| Error::Config(format!("unknown component `{c}`")))
            })
            .collect()
    }

    /// Seeds of the training runs; falls back to `seed`.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn language_recipe(&self) -> LanguageRecipe {
        let central = (self.data.condition == ConditionKind::Centered)
            .then(|| self.data.languages.first().cloned())
            .flatten();
        LanguageRecipe {
            ids: self.data.languages.clone(),
            central,
            base_vocab: self.data.base_vocab,
            seed: substream(self.seed, "languages"),
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_per_direction: self.data.n_per_direction,
            n_test: self.data.n_test,
            lengths: self.data.lengths,
            seed: substream(self.seed, "corpus"),
        }
    }

    /// Hyperparameters of the run with seed `run_seed`.
    pub fn hyper_for(&self, run_seed: u64) -> HyperParams {
        HyperParams {
            seed: substream(run_seed, "train"),
            ..self.training.clone()
        }
    }

    /// Initialization seed of the run with seed `run_seed`.
    pub fn init_seed(run_seed: u64) -> u64 {
        substream(run_seed, "init")
    }

    /// The config as embedded in artifacts: output location stripped so reruns elsewhere hash the same.
    pub fn for_provenance(&self) -> Self {
        Self {
            out: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let text = r#"{
            "schema_version": 1,
            "seed": 7,
            "data": {"condition": "triangle", "languages": ["a", "b", "c"], "n_per_direction": 10},
            "model": {"variant": "sd", "num_layers": 2, "d_model": 16, "ffn_inner": 32, "heads": 2},
            "training": {"max_steps": 5}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.training.max_steps, 5);
        assert_eq!(cfg.training.warmup_steps, HyperParams::default().warmup_steps);
        assert_eq!(cfg.data.n_test, 500);
        assert_eq!(cfg.run_seeds(), vec![7]);
        assert_eq!(cfg.language_recipe().central, None);
        assert_eq!(cfg.model.model_config().unwrap().cll_layers, [2].into());
    }

    #[test]
    fn bad_files_are_rejected() {
        let good = ExperimentConfig::default().to_json();
        assert!(ExperimentConfig::from_json(&good.replace("\"schema_version\": 1", "\"schema_version\": 2")).is_err());
        assert!(ExperimentConfig::from_json(&good.replace("\"schema_version\": 1,", "")).is_err());
        assert!(ExperimentConfig::from_json(&good.replace("\"seed\": 1,", "\"seed\": 1, \"bogus\": 0,")).is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.cll_layers = Some([1].into());
        assert!(cfg.validate().is_err());
        cfg.model.variant = Variant::Custom;
        assert!(cfg.validate().is_ok());
        cfg.data.extra_pairs = vec!["ab".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn data_and_run_seeds_are_separate_streams() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.corpus_spec().seed, cfg.language_recipe().seed);
        assert_ne!(cfg.hyper_for(1).seed, ExperimentConfig::init_seed(1));
        assert_eq!(cfg.hyper_for(2), cfg.hyper_for(2));
    }
}
