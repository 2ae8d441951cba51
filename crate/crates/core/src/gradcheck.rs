//! Finite-difference verification of the reverse-mode rules.
//!
//! Coordinates whose `x ± eps` evaluations land on a different linear piece of any
//! relu are skipped: central differences are meaningless across a kink.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{make_languages, LanguageRegistry};
use crate::error::Result;
use crate::graph::{Attrs, Graph, NodeId, PrimitiveKind};
use crate::model::{ForwardOptions, LanguageSet, ModelConfig, ParamId, TransformerModel, Variant, BOS};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::training::smoothed_loss;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Description of the worst coordinate.
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = what();
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Checks every input coordinate of a scalar function built on a fresh graph.
pub fn check_graph_fn(
    inputs: &[Tensor<f64>],
    eps: f64,
    seed: u64,
    training: bool,
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheck> {
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new(seed, training);
        let ids: Vec<NodeId> = xs.iter().map(|x| g.parameter(x.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok((g.value(out).item(), g.relu_pattern()))
    };
    let mut g = Graph::new(seed, training);
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.parameter(x.clone())).collect();
    let out = build(&mut g, &ids)?;
    let pattern = g.relu_pattern();
    let grads = g.backward(out)?;
    let mut report = GradCheck::default();
    let mut xs = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            xs[i].data_mut()[j] = orig + eps;
            let (fp, pp) = eval(&xs)?;
            xs[i].data_mut()[j] = orig - eps;
            let (fm, pm) = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            if pp != pattern || pm != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            report.record(relative_error(a, numeric), || {
                format!("input {i}[{j}]: analytic {a:e} vs numeric {numeric:e}")
            });
        }
    }
    Ok(report)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Reduces any output to a scalar with fixed random weights.
fn project(g: &mut Graph<f64>, out: NodeId, weights: &[f64]) -> Result<NodeId> {
    let n = g.value(out).numel();
    g.weighted_sum(out, weights[..n].to_vec())
}

/// One random trial of `kind`.
pub fn check_primitive(kind: PrimitiveKind, trial: u64, eps: f64) -> Result<GradCheck> {
    let mut rng = rng_for(trial, &format!("gradcheck/{}", kind.name()));
    let proj: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (m, k, n) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 4), dim(&mut rng, 2, 5));
    let mut attrs = Attrs::default();
    let inputs: Vec<Tensor<f64>> = match kind {
        PrimitiveKind::MatMul => {
            attrs.trans_b = rng.gen_bool(0.5);
            let b_shape = |b: Option<usize>| {
                let mut s: Vec<usize> = b.into_iter().collect();
                s.extend(if attrs.trans_b { [n, k] } else { [k, n] });
                s
            };
            match rng.gen_range(0..3) {
                0 => vec![rand_tensor(&mut rng, &[m, k], 1.0), rand_tensor(&mut rng, &b_shape(None), 1.0)],
                1 => {
                    let b = dim(&mut rng, 1, 3);
                    vec![rand_tensor(&mut rng, &[b, m, k], 1.0), rand_tensor(&mut rng, &b_shape(None), 1.0)]
                }
                _ => {
                    let b = dim(&mut rng, 1, 3);
                    vec![rand_tensor(&mut rng, &[b, m, k], 1.0), rand_tensor(&mut rng, &b_shape(Some(b)), 1.0)]
                }
            }
        }
        PrimitiveKind::Add => {
            let rhs = if rng.gen_bool(0.5) { vec![n] } else { vec![m, n] };
            vec![rand_tensor(&mut rng, &[m, n], 1.0), rand_tensor(&mut rng, &rhs, 1.0)]
        }
        PrimitiveKind::Scale => {
            if rng.gen_bool(0.5) {
                attrs.factor = Some(rng.gen_range(-2.0..2.0));
                vec![rand_tensor(&mut rng, &[m, n], 1.0)]
            } else {
                vec![rand_tensor(&mut rng, &[m, n], 1.0), rand_tensor(&mut rng, &[1], 1.0)]
            }
        }
        PrimitiveKind::Relu | PrimitiveKind::Softmax | PrimitiveKind::LogSoftmax => {
            vec![rand_tensor(&mut rng, &[m, n], 2.0)]
        }
        PrimitiveKind::LayerNorm => vec![
            rand_tensor(&mut rng, &[m, n + 2], 2.0),
            rand_tensor(&mut rng, &[n + 2], 1.5),
            rand_tensor(&mut rng, &[n + 2], 1.0),
        ],
        PrimitiveKind::Embedding => {
            let v = dim(&mut rng, 2, 6);
            let count = dim(&mut rng, 1, 6);
            attrs.ids = Some((0..count).map(|_| rng.gen_range(0..v)).collect());
            vec![rand_tensor(&mut rng, &[v, n], 1.0)]
        }
        PrimitiveKind::Dropout => {
            attrs.training = true;
            attrs.rate = Some(rng.gen_range(0.1..0.6));
            vec![rand_tensor(&mut rng, &[m, n], 1.0)]
        }
        PrimitiveKind::Concat => {
            let parts = dim(&mut rng, 1, 3);
            (0..parts)
                .map(|_| {
                    let w = dim(&mut rng, 1, 3);
                    rand_tensor(&mut rng, &[m, w], 1.0)
                })
                .collect()
        }
        PrimitiveKind::Slice => {
            let start = rng.gen_range(0..n);
            attrs.start = Some(start);
            attrs.len = Some(rng.gen_range(1..=n - start));
            vec![rand_tensor(&mut rng, &[m, n], 1.0)]
        }
        PrimitiveKind::WeightedSum => {
            attrs.weights = Some((0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            vec![rand_tensor(&mut rng, &[m, n], 1.0)]
        }
    };
    let seed = rng.gen();
    check_graph_fn(&inputs, eps, seed, attrs.training, |g, ids| {
        let out = g.apply(kind, ids, &attrs)?;
        if kind == PrimitiveKind::WeightedSum {
            Ok(out)
        } else {
            project(g, out, &proj)
        }
    })
}

/// A small FCLL model over three languages with every parameter randomized, in f64.
pub fn tiny_fcll_model(seed: u64) -> Result<TransformerModel<f64>> {
    let ids: Vec<String> = ["en", "a", "b"].iter().map(|s| String::from(*s)).collect();
    let registry = LanguageRegistry::new(make_languages(&ids, 10, seed)?)?;
    let mut cfg = ModelConfig::new(Variant::Fcll, 2, 16, 24, 2);
    cfg.lsl_inner = 12;
    cfg.max_positions = 32;
    cfg.apply_variant_placement();
    let mut model = TransformerModel::new(cfg, LanguageSet::centered(ids)?, registry.vocab(), seed)?;
    let mut rng = rng_for(seed, "gradcheck/perturb");
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    Ok(model)
}

/// A random teacher-forced batch for one non-centered target, with fixed dropout masks.
pub struct DecodeStepCase {
    pub model: TransformerModel<f64>,
    src: Vec<Vec<usize>>,
    tgt_in: Vec<Vec<usize>>,
    targets: Vec<Vec<Option<usize>>>,
    lang: &'static str,
    dropout_seed: u64,
    rng: ChaCha8Rng,
}

impl DecodeStepCase {
    pub fn new(trial: u64) -> Result<Self> {
        let model = tiny_fcll_model(trial)?;
        let mut rng = rng_for(trial, "gradcheck/fcll-batch");
        let lang = if rng.gen_bool(0.5) { "a" } else { "b" };
        let vocab_len = model.vocab().len();
        let first_surface = vocab_len - 30;
        let batch = dim(&mut rng, 1, 2);
        let mut src = Vec::new();
        let mut tgt_in = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..batch {
            let s = dim(&mut rng, 2, 5);
            src.push((0..s).map(|_| rng.gen_range(first_surface..vocab_len)).collect::<Vec<_>>());
            let t = dim(&mut rng, 1, 4);
            let y: Vec<usize> = (0..t).map(|_| rng.gen_range(first_surface..vocab_len)).collect();
            let mut tin = vec![BOS];
            tin.extend_from_slice(&y[..t - 1]);
            tgt_in.push(tin);
            targets.push(y.into_iter().map(Some).collect::<Vec<_>>());
        }
        let t_max = targets.iter().map(Vec::len).max().unwrap_or(0);
        for row in &mut targets {
            row.resize(t_max, None);
        }
        let dropout_seed = rng.gen();
        Ok(Self {
            model,
            src,
            tgt_in,
            targets,
            lang,
            dropout_seed,
            rng,
        })
    }

    fn run(&self, trainable: bool) -> Result<(Graph<f64>, NodeId, Vec<(ParamId, NodeId)>)> {
        let mut fwd = self.model.forward(self.dropout_seed, true, trainable, ForwardOptions::default());
        let enc = fwd.encode(&self.src)?;
        let logits = fwd.decode(&enc, &self.tgt_in, self.lang)?;
        let support = self.model.vocab().target_support();
        let (loss, _) = smoothed_loss(&mut fwd.graph, logits, &self.targets, 0.1, &support)?;
        let bound: Vec<(ParamId, NodeId)> = fwd.bound_params().collect();
        Ok((fwd.graph, loss, bound))
    }

    /// Loss value and relu pattern.
    pub fn loss(&self) -> Result<(f64, Vec<bool>)> {
        let (g, l, _) = self.run(false)?;
        Ok((g.value(l).item(), g.relu_pattern()))
    }

    /// Analytic gradient of every parameter the loss touches, and the relu pattern.
    pub fn gradients(&self) -> Result<(Vec<(ParamId, Tensor<f64>)>, Vec<bool>)> {
        let (g, loss, bound) = self.run(true)?;
        let pattern = g.relu_pattern();
        let mut grads = g.backward(loss)?;
        let out = bound
            .into_iter()
            .map(|(id, node)| {
                let t = grads.take(node).unwrap_or_else(|| Tensor::zeros(self.model.params().get(id).shape()));
                (id, t)
            })
            .collect();
        Ok((out, pattern))
    }

    fn random_direction(&mut self, shapes: &[(ParamId, &[usize])]) -> Vec<(ParamId, Vec<f64>)> {
        let mut dir: Vec<(ParamId, Vec<f64>)> = shapes
            .iter()
            .map(|(id, shape)| {
                let n: usize = shape.iter().product();
                (*id, (0..n).map(|_| self.rng.gen_range(-1.0..1.0)).collect())
            })
            .collect();
        let norm = dir.iter().flat_map(|(_, d)| d.iter()).map(|d| d * d).sum::<f64>().sqrt();
        for (_, d) in &mut dir {
            d.iter_mut().for_each(|x| *x /= norm);
        }
        dir
    }

    /// Central difference of the loss along `dir`, or `None` across a relu kink.
    fn directional_fd(&mut self, dir: &[(ParamId, Vec<f64>)], eps: f64, pattern: &[bool]) -> Result<Option<f64>> {
        let originals: Vec<Tensor<f64>> = dir.iter().map(|(id, _)| self.model.params().get(*id).clone()).collect();
        let side = |step: f64, model: &mut TransformerModel<f64>| {
            for ((id, d), orig) in dir.iter().zip(&originals) {
                let p = model.params_mut().get_mut(*id);
                for ((v, o), di) in p.data_mut().iter_mut().zip(orig.data()).zip(d) {
                    *v = o + step * di;
                }
            }
        };
        side(eps, &mut self.model);
        let (fp, pp) = self.loss()?;
        side(-eps, &mut self.model);
        let (fm, pm) = self.loss()?;
        for ((id, _), orig) in dir.iter().zip(originals) {
            *self.model.params_mut().get_mut(*id) = orig;
        }
        if pp != pattern || pm != pattern {
            return Ok(None);
        }
        Ok(Some((fp - fm) / (2.0 * eps)))
    }
}

fn dot(grads: &[(ParamId, Tensor<f64>)], dir: &[(ParamId, Vec<f64>)]) -> f64 {
    grads
        .iter()
        .zip(dir)
        .map(|((_, g), (_, d))| g.data().iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// One trial of the full FCLL decode-step loss along `directions` random unit
/// directions in the joint parameter space.
///
/// Single coordinates with near-zero gradient make the relative error meaningless at
/// eps 1e-3; a projection onto a random direction does not. [`check_fcll_per_tensor`]
/// localises any mismatch to a tensor.
pub fn check_fcll_decode_step(trial: u64, directions: usize, eps: f64) -> Result<GradCheck> {
    let mut case = DecodeStepCase::new(trial)?;
    let (grads, pattern) = case.gradients()?;
    let shapes: Vec<(ParamId, Vec<usize>)> = grads.iter().map(|(id, g)| (*id, g.shape().to_vec())).collect();
    let shape_refs: Vec<(ParamId, &[usize])> = shapes.iter().map(|(id, s)| (*id, s.as_slice())).collect();
    let mut report = GradCheck::default();
    for k in 0..directions {
        let dir = case.random_direction(&shape_refs);
        let Some(numeric) = case.directional_fd(&dir, eps, &pattern)? else {
            report.skipped += 1;
            continue;
        };
        let a = dot(&grads, &dir);
        report.record(relative_error(a, numeric), || {
            format!("trial {trial} direction {k}: analytic {a:e} vs numeric {numeric:e}")
        });
    }
    Ok(report)
}

/// Same loss, one random direction inside each parameter tensor.
///
/// Tensors whose gradient is identically zero by symmetry (attention key biases) are
/// reported with their absolute numeric derivative instead of a relative error.
pub fn check_fcll_per_tensor(trial: u64, eps: f64) -> Result<GradCheck> {
    let mut case = DecodeStepCase::new(trial)?;
    let (grads, pattern) = case.gradients()?;
    let mut report = GradCheck::default();
    for (id, g) in &grads {
        let name = String::from(case.model.params().name(*id));
        let dir = case.random_direction(&[(*id, g.shape())]);
        let Some(numeric) = case.directional_fd(&dir, eps, &pattern)? else {
            report.skipped += 1;
            continue;
        };
        let single = [(*id, g.clone())];
        let a = dot(&single, &dir);
        let err = if g.max_abs() < 1e-12 {
            numeric.abs()
        } else {
            relative_error(a, numeric)
        };
        report.record(err, || format!("{name}: analytic {a:e} vs numeric {numeric:e}"));
    }
    Ok(report)
}
