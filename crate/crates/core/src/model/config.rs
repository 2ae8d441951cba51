use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which decoder layers carry a CLL block and whether an encoder residual is removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain Transformer.
    Baseline,
    /// Encoder FFN residual removed at the middle layer, no CLL.
    Residual,
    /// CLL in every decoder layer.
    Fcll,
    /// One CLL in the middle decoder layer plus encoder FFN residual removal at the middle layer.
    Sd,
    /// Explicit `cll_layers` / `remove_residual_layer`.
    Custom,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Residual => "residual",
            Variant::Fcll => "fcll",
            Variant::Sd => "sd",
            Variant::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "residual" => Ok(Variant::Residual),
            "fcll" => Ok(Variant::Fcll),
            "sd" => Ok(Variant::Sd),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// The 1-based middle layer index `floor(N/2) + 1`.
pub fn middle_layer(num_layers: usize) -> usize {
    num_layers / 2 + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub ffn_inner: usize,
    pub lsl_inner: usize,
    pub heads: usize,
    pub dropout: f64,
    pub cll_dropout: f64,
    pub variant: Variant,
    /// 1-based decoder layer indices holding a CLL block.
    pub cll_layers: BTreeSet<usize>,
    /// 1-based encoder layer whose FFN residual is removed.
    pub remove_residual_layer: Option<usize>,
    pub use_language_tokens: bool,
    pub t_init: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    /// A config for one of the named variants with the derived layer placement.
    pub fn new(variant: Variant, num_layers: usize, d_model: usize, ffn_inner: usize, heads: usize) -> Self {
        let mut cfg = Self {
            num_layers,
            d_model,
            ffn_inner,
            lsl_inner: d_model,
            heads,
            dropout: 0.1,
            cll_dropout: 0.1,
            variant,
            cll_layers: BTreeSet::new(),
            remove_residual_layer: None,
            use_language_tokens: true,
            t_init: 0.1,
            max_positions: 256,
        };
        cfg.apply_variant_placement();
        cfg
    }

    /// Overwrites `cll_layers` / `remove_residual_layer` from the variant (no-op for `Custom`).
    pub fn apply_variant_placement(&mut self) {
        let mid = middle_layer(self.num_layers);
        match self.variant {
            Variant::Baseline => {
                self.cll_layers.clear();
                self.remove_residual_layer = None;
            }
            Variant::Residual => {
                self.cll_layers.clear();
                self.remove_residual_layer = Some(mid);
            }
            Variant::Fcll => {
                self.cll_layers = (1..=self.num_layers).collect();
                self.remove_residual_layer = None;
            }
            Variant::Sd => {
                self.cll_layers = [mid].into_iter().collect();
                self.remove_residual_layer = Some(mid);
            }
            Variant::Custom => {}
        }
    }

    /// A custom placement: CLL in `layers`, optional encoder residual removal at the middle layer.
    pub fn custom(mut self, layers: impl IntoIterator<Item = usize>, remove_residual: bool) -> Self {
        self.variant = Variant::Custom;
        self.cll_layers = layers.into_iter().collect();
        self.remove_residual_layer = remove_residual.then(|| middle_layer(self.num_layers));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_layers < 2 {
            return fail(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.d_model == 0 || self.ffn_inner == 0 || self.lsl_inner == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.cll_dropout) {
            return fail("dropout rates must lie in [0, 1)".into());
        }
        if let Some(&bad) = self.cll_layers.iter().find(|&&l| l == 0 || l > self.num_layers) {
            return fail(format!("cll layer {bad} outside 1..={}", self.num_layers));
        }
        if let Some(l) = self.remove_residual_layer {
            if l == 0 || l > self.num_layers {
                return fail(format!("residual layer {l} outside 1..={}", self.num_layers));
            }
        }
        let mid = middle_layer(self.num_layers);
        let ok = match self.variant {
            Variant::Baseline => self.cll_layers.is_empty() && self.remove_residual_layer.is_none(),
            Variant::Residual => self.cll_layers.is_empty() && self.remove_residual_layer == Some(mid),
            Variant::Fcll => {
                self.cll_layers.len() == self.num_layers && self.remove_residual_layer.is_none()
            }
            Variant::Sd => {
                self.cll_layers.len() == 1
                    && self.cll_layers.contains(&mid)
                    && self.remove_residual_layer == Some(mid)
            }
            Variant::Custom => true,
        };
        if !ok {
            return fail(format!(
                "layer placement does not match variant `{}`",
                self.variant.name()
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Parameters per language-specific layer: `d*i + i + i*d + d`.
    pub fn lsl_params(&self) -> usize {
        2 * self.d_model * self.lsl_inner + self.lsl_inner + self.d_model
    }
}

/// Added parameters versus the baseline for `m` languages with one central language.
pub fn count_extra_params(config: &ModelConfig, m: usize) -> usize {
    count_extra_params_for(config, m.saturating_sub(1))
}

/// Added parameters for `non_centered` language-specific layers per CLL block (each `k + 1` with the scalar).
pub fn count_extra_params_for(config: &ModelConfig, non_centered: usize) -> usize {
    config.cll_layers.len() * non_centered * (config.lsl_params() + 1)
}

/// Ordered language inventory with an optional central language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSet {
    languages: Vec<String>,
    central: Option<String>,
}

impl LanguageSet {
    pub fn new(languages: Vec<String>, central: Option<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = languages.iter().collect();
        if unique.len() != languages.len() {
            return Err(Error::Condition("duplicate language id".into()));
        }
        if languages.iter().any(|l| l.is_empty() || l.contains(char::is_whitespace)) {
            return Err(Error::Condition("language ids must be non-empty without whitespace".into()));
        }
        if let Some(c) = &central {
            if !languages.contains(c) {
                return Err(Error::UnknownLanguage(c.clone()));
            }
        }
        Ok(Self { languages, central })
    }

    /// The first language is central.
    pub fn centered(languages: Vec<String>) -> Result<Self> {
        let central = languages.first().cloned();
        Self::new(languages, central)
    }

    pub fn non_centered_only(languages: Vec<String>) -> Result<Self> {
        Self::new(languages, None)
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn central(&self) -> Option<&str> {
        self.central.as_deref()
    }

    pub fn contains(&self, lang: &str) -> bool {
        self.languages.iter().any(|l| l == lang)
    }

    pub fn is_central(&self, lang: &str) -> bool {
        self.central.as_deref() == Some(lang)
    }

    /// All languages except the central one.
    pub fn non_centered(&self) -> Vec<String> {
        self.languages
            .iter()
            .filter(|l| !self.is_central(l))
            .cloned()
            .collect()
    }

    pub fn check(&self, lang: &str) -> Result<()> {
        if self.contains(lang) {
            Ok(())
        } else {
            Err(Error::UnknownLanguage(lang.into()))
        }
    }

    pub(crate) fn push(&mut self, lang: String) -> Result<()> {
        if self.contains(&lang) {
            return Err(Error::LanguageAlreadyPresent(lang));
        }
        self.languages.push(lang);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sd_and_fcll_placement() {
        let sd = ModelConfig::new(Variant::Sd, 5, 16, 32, 2);
        assert_eq!(sd.cll_layers.iter().copied().collect::<Vec<_>>(), vec![3]);
        assert_eq!(sd.remove_residual_layer, Some(3));
        let f = ModelConfig::new(Variant::Fcll, 4, 16, 32, 2);
        assert_eq!(f.cll_layers.len(), 4);
        assert_eq!(f.remove_residual_layer, None);
        assert!(sd.validate().is_ok() && f.validate().is_ok());
        assert_eq!(f.t_init, 0.1);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut c = ModelConfig::new(Variant::Baseline, 1, 16, 32, 2);
        assert!(c.validate().is_err());
        c.num_layers = 2;
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut sd = ModelConfig::new(Variant::Sd, 4, 16, 32, 2);
        sd.cll_layers.insert(1);
        assert!(sd.validate().is_err());
    }

    #[test]
    fn extra_param_examples() {
        let mut f = ModelConfig::new(Variant::Fcll, 4, 8, 32, 2);
        f.lsl_inner = 16;
        assert_eq!(f.lsl_params(), 280);
        assert_eq!(count_extra_params(&f, 4), 3372);
        let mut sd = ModelConfig::new(Variant::Sd, 4, 8, 32, 2);
        sd.lsl_inner = 16;
        assert_eq!(count_extra_params(&sd, 4), 843);
        assert_eq!(count_extra_params(&f, 1), 0);
        assert_eq!(count_extra_params(&sd, 4) * 4, count_extra_params(&f, 4));
        let b = ModelConfig::new(Variant::Baseline, 4, 8, 32, 2);
        assert_eq!(count_extra_params(&b, 4), 0);
    }

    #[test]
    fn language_set_invariants() {
        let s = LanguageSet::centered(vec!["en".into(), "a".into(), "b".into()]).unwrap();
        assert_eq!(s.central(), Some("en"));
        assert_eq!(s.non_centered(), vec!["a".to_string(), "b".to_string()]);
        let t = LanguageSet::non_centered_only(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(t.non_centered().len(), 3);
        assert!(LanguageSet::new(vec!["a".into()], Some("z".into())).is_err());
        assert!(LanguageSet::new(vec!["a".into(), "a".into()], None).is_err());
    }
}
