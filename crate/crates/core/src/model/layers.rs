//! FFN, language-specific layer and the CLL mixture, expressed over graph nodes.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::config::LanguageSet;
use crate::tensor::{Real, Tensor};

/// The four parameters of a two-layer feed-forward network, bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct FfnNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Which linear map of a feed-forward network a tap intercepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    First,
    Second,
}

/// Replaces the input of one linear map by `alpha * input` and records it.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub stage: Stage,
    pub alpha: f64,
}

/// The intercepted activation: the scaled node and the unscaled value.
pub struct Tapped<T> {
    pub node: NodeId,
    pub input: Tensor<T>,
}

/// `max(0, h W1 + b1) W2 + b2`.
pub fn ffn_forward<T: Real>(g: &mut Graph<T>, h: NodeId, p: &FfnNodes) -> Result<NodeId> {
    ffn_forward_tapped(g, h, p, None).map(|(out, _)| out)
}

pub fn ffn_forward_tapped<T: Real>(
    g: &mut Graph<T>,
    h: NodeId,
    p: &FfnNodes,
    tap: Option<Tap>,
) -> Result<(NodeId, Option<Tapped<T>>)> {
    let mut tapped = None;
    let mut intercept = |g: &mut Graph<T>, x: NodeId, stage: Stage| -> NodeId {
        match tap {
            Some(t) if t.stage == stage => {
                // A fresh leaf, so the gradient reaches it even when nothing upstream trains.
                let input = g.value(x).clone();
                let alpha = T::from_f64_lossy(t.alpha);
                let node = g.parameter(input.map(|v| v * alpha));
                tapped = Some(Tapped { node, input });
                node
            }
            _ => x,
        }
    };
    let x = intercept(g, h, Stage::First);
    let z = g.matmul(x, p.w1)?;
    let z = g.add(z, p.b1)?;
    let a = g.relu(z);
    let a = intercept(g, a, Stage::Second);
    let y = g.matmul(a, p.w2)?;
    let y = g.add(y, p.b2)?;
    Ok((y, tapped))
}

/// Language-specific layers and mixing scalars of one CLL block, keyed by non-centered language.
#[derive(Clone, Debug, Default)]
pub struct CllNodes {
    pub lsl: BTreeMap<String, FfnNodes>,
    pub t: BTreeMap<String, NodeId>,
}

/// `LSL_l(h)` followed by dropout at `rate` on its output (active only when the graph trains).
pub fn lsl_forward<T: Real>(
    g: &mut Graph<T>,
    h: NodeId,
    block: &CllNodes,
    lang: &str,
    rate: f64,
) -> Result<NodeId> {
    lsl_forward_tapped(g, h, block, lang, rate, None).map(|(y, _)| y)
}

pub fn lsl_forward_tapped<T: Real>(
    g: &mut Graph<T>,
    h: NodeId,
    block: &CllNodes,
    lang: &str,
    rate: f64,
    tap: Option<Tap>,
) -> Result<(NodeId, Option<Tapped<T>>)> {
    let p = block
        .lsl
        .get(lang)
        .ok_or_else(|| Error::NoLanguageLayer(lang.into()))?;
    let (y, tapped) = ffn_forward_tapped(g, h, p, tap)?;
    Ok((g.dropout(y, rate), tapped))
}

/// Per-call switches for [`cll_forward_tapped`].
#[derive(Clone, Copy, Debug, Default)]
pub struct CllTaps {
    pub ffn: Option<Tap>,
    pub lsl: Option<Tap>,
    /// Skip the language-specific path (ablation).
    pub ablate: bool,
}

/// `FFN(h)` for the central language, `FFN(h) + t_l * LSL_l(h)` otherwise.
pub fn cll_forward<T: Real>(
    g: &mut Graph<T>,
    h: NodeId,
    target: &str,
    languages: &LanguageSet,
    ffn: &FfnNodes,
    block: &CllNodes,
    rate: f64,
) -> Result<NodeId> {
    cll_forward_tapped(g, h, target, languages, ffn, block, rate, CllTaps::default()).map(|(y, _)| y)
}

#[allow(clippy::too_many_arguments)]
pub fn cll_forward_tapped<T: Real>(
    g: &mut Graph<T>,
    h: NodeId,
    target: &str,
    languages: &LanguageSet,
    ffn: &FfnNodes,
    block: &CllNodes,
    rate: f64,
    taps: CllTaps,
) -> Result<(NodeId, Option<Tapped<T>>)> {
    languages.check(target)?;
    let (shared, mut tapped) = ffn_forward_tapped(g, h, ffn, taps.ffn)?;
    if languages.is_central(target) || taps.ablate {
        return Ok((shared, tapped));
    }
    let t = *block
        .t
        .get(target)
        .ok_or_else(|| Error::NoLanguageLayer(target.into()))?;
    let (ls, lsl_tap) = lsl_forward_tapped(g, h, block, target, rate, taps.lsl)?;
    if lsl_tap.is_some() {
        tapped = lsl_tap;
    }
    let weighted = g.scale_by(ls, t)?;
    Ok((g.add(shared, weighted)?, tapped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn eye(d: usize) -> Tensor<f64> {
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        Tensor::new(vec![d, d], v).unwrap()
    }

    fn identity_ffn(g: &mut Graph<f64>, b2: &[f64]) -> FfnNodes {
        let d = b2.len();
        FfnNodes {
            w1: g.constant(eye(d)),
            b1: g.constant(Tensor::zeros(&[d])),
            w2: g.constant(eye(d)),
            b2: g.constant(Tensor::from_f64(&[d], b2).unwrap()),
        }
    }

    fn langs() -> LanguageSet {
        LanguageSet::centered(vec!["en".into(), "a".into()]).unwrap()
    }

    #[test]
    fn ffn_identity_reduces_to_relu() {
        let mut g = Graph::new(0, false);
        let p = identity_ffn(&mut g, &[0.0, 0.0]);
        let h = g.constant(Tensor::from_f64(&[1, 2], &[1.0, -2.0]).unwrap());
        let y = ffn_forward(&mut g, h, &p).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn ffn_output_bias() {
        let mut g = Graph::new(0, false);
        let p = identity_ffn(&mut g, &[0.5, 0.5]);
        let h = g.constant(Tensor::from_f64(&[1, 2], &[1.0, -2.0]).unwrap());
        let y = ffn_forward(&mut g, h, &p).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 0.5]);
    }

    #[test]
    fn ffn_shape_mismatch() {
        let mut g = Graph::new(0, false);
        let p = identity_ffn(&mut g, &[0.0, 0.0]);
        let h = g.constant(Tensor::<f64>::zeros(&[1, 3]));
        assert!(matches!(ffn_forward(&mut g, h, &p), Err(Error::ShapeMismatch { .. })));
    }

    fn block_with(g: &mut Graph<f64>, lang: &str, p: FfnNodes, t: f64) -> CllNodes {
        let mut b = CllNodes::default();
        b.lsl.insert(lang.into(), p);
        let t = g.parameter(Tensor::scalar(t));
        b.t.insert(lang.into(), t);
        b
    }

    #[test]
    fn lsl_zero_params_give_zero() {
        let mut g = Graph::new(0, false);
        let zero = FfnNodes {
            w1: g.constant(Tensor::zeros(&[2, 2])),
            b1: g.constant(Tensor::zeros(&[2])),
            w2: g.constant(Tensor::zeros(&[2, 2])),
            b2: g.constant(Tensor::zeros(&[2])),
        };
        let block = block_with(&mut g, "a", zero, 0.1);
        let h = g.constant(Tensor::from_f64(&[1, 2], &[3.0, -7.0]).unwrap());
        let y = lsl_forward(&mut g, h, &block, "a", 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lsl_identity_and_unknown_language() {
        let mut g = Graph::new(0, false);
        let p = identity_ffn(&mut g, &[0.0, 0.0]);
        let block = block_with(&mut g, "a", p, 0.1);
        let h = g.constant(Tensor::from_f64(&[1, 2], &[2.0, 3.0]).unwrap());
        let y = lsl_forward(&mut g, h, &block, "a", 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
        assert!(matches!(
            lsl_forward(&mut g, h, &block, "en", 0.0),
            Err(Error::NoLanguageLayer(_))
        ));
    }

    #[test]
    fn cll_identity_weights_scale_by_one_plus_t() {
        let mut g = Graph::new(0, false);
        let ffn = identity_ffn(&mut g, &[0.0, 0.0]);
        let lsl = identity_ffn(&mut g, &[0.0, 0.0]);
        let block = block_with(&mut g, "a", lsl, 0.1);
        let h = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let y = cll_forward(&mut g, h, "a", &langs(), &ffn, &block, 0.0).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 1.1).abs() <= 1e-12);
        assert!((out[1] - 2.2).abs() <= 1e-12);
    }

    #[test]
    fn cll_central_branch_is_plain_ffn() {
        let mut g = Graph::new(0, false);
        let ffn = identity_ffn(&mut g, &[0.25, -0.5]);
        let lsl = identity_ffn(&mut g, &[9.0, 9.0]);
        let block = block_with(&mut g, "a", lsl, 0.7);
        let h = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let before = g.len();
        let y = cll_forward(&mut g, h, "en", &langs(), &ffn, &block, 0.0).unwrap();
        let nodes_cll = g.len() - before;
        let f = ffn_forward(&mut g, h, &ffn).unwrap();
        assert_eq!(g.value(y).data(), g.value(f).data());
        // Same node count as a plain FFN: no LSL was evaluated.
        assert_eq!(nodes_cll, g.len() - before - nodes_cll);
        assert!(matches!(
            cll_forward(&mut g, h, "zz", &langs(), &ffn, &block, 0.0),
            Err(Error::UnknownLanguage(_))
        ));
    }

    #[test]
    fn cll_zero_lsl_is_plain_ffn() {
        let mut g = Graph::new(0, false);
        let ffn = identity_ffn(&mut g, &[0.1, 0.2]);
        let zero = FfnNodes {
            w1: g.constant(Tensor::zeros(&[2, 2])),
            b1: g.constant(Tensor::zeros(&[2])),
            w2: g.constant(Tensor::zeros(&[2, 2])),
            b2: g.constant(Tensor::zeros(&[2])),
        };
        let block = block_with(&mut g, "a", zero, 3.0);
        let h = g.constant(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 4.0]).unwrap());
        let y = cll_forward(&mut g, h, "a", &langs(), &ffn, &block, 0.0).unwrap();
        let f = ffn_forward(&mut g, h, &ffn).unwrap();
        let a: Vec<f64> = g.value(y).data().to_vec();
        assert_eq!(a, g.value(f).data());
    }
}
