//! Drivers behind the command-line verbs. Each writes its artifacts into an output
//! directory it owns and returns the numbers it wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use cll_core::attribution::{
    ablate_lsl, attribute as attribute_example, dump_mixing_weights, export_attention, rollback_score,
    AttributionReport, AttributionRequest,
};
use cll_core::corpus::{generate_corpus, make_languages, Corpus, DataCondition, Direction, Example};
use cll_core::evaluation::{evaluate, majority_language, DirectionClass, EvalOptions, EvalReport, Evaluation};
use cll_core::model::{count_extra_params_for, middle_layer, LanguageSet, TransformerModel, Variant};
use cll_core::rng::substream;
use cll_core::training::{
    integrate_language, multi_seed_run, HyperParams, IntegrationOptions, SeedMetrics, StepRecord, TrainLog, Trainer,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint};
use crate::config::{parse_direction, ExperimentConfig};
use crate::corpus_io::{build_corpus, read_bundle, write_bundle, CorpusBundle, CorpusFile};
use crate::error::{Error, Result};
use crate::hash::Inputs;
use crate::report::{
    attribution_rows, class_averages, mixing_rows, parse_train_log, train_log_rows, write_attention, write_csv,
    write_eval, write_json, EvalSummary, Provenance, ATTRIBUTION_HEADER, MIXING_HEADER, TRAIN_LOG_HEADER,
};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CORPUS_DIR: &str = "corpus";

/// Progress lines for long commands.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn direction_name((s, t): &Direction) -> String {
    format!("{s}-{t}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub train: Vec<CorpusFile>,
    pub test: Vec<(CorpusFile, DirectionClass)>,
}

/// Writes the corpus directory described by the data section of `cfg`.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateSummary> {
    let recipe = cfg.language_recipe();
    let spec = cfg.corpus_spec();
    let (condition, _, data) = build_corpus(&recipe, cfg.data.condition, &cfg.extra_pairs()?, &spec)?;
    let provenance = Provenance::new("generate", cfg, Inputs::new());
    let manifest = write_bundle(out, &recipe, &condition, &spec, &data, provenance.to_value())?;
    let test = manifest
        .test
        .iter()
        .map(|f| {
            let class = if condition.is_supervised(&f.src, &f.tgt) {
                DirectionClass::Supervised
            } else {
                DirectionClass::ZeroShot
            };
            (f.clone(), class)
        })
        .collect();
    Ok(GenerateSummary {
        train: manifest.train,
        test,
    })
}

/// Reads a corpus directory and checks it was generated from the data section of `cfg`.
pub fn open_corpus(cfg: &ExperimentConfig, dir: &Path) -> Result<CorpusBundle> {
    let bundle = read_bundle(dir)?;
    if bundle.manifest.languages != cfg.language_recipe() || bundle.manifest.spec != cfg.corpus_spec() {
        return Err(Error::Config(format!(
            "corpus in {} was generated from a different data section or seed",
            dir.display()
        )));
    }
    Ok(bundle)
}

/// Reads the corpus at `dir`, generating it first when it does not exist yet.
pub fn corpus_for(cfg: &ExperimentConfig, dir: &Path) -> Result<CorpusBundle> {
    if !dir.join("manifest.json").exists() {
        generate(cfg, dir)?;
    }
    open_corpus(cfg, dir)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TransformerModel<f32>,
    pub trainer: Trainer,
    /// Every step record of the run so far, including resumed ones.
    pub log: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub hash: String,
    pub extra_params: usize,
}

/// The config of one training run.
pub fn run_config(cfg: &ExperimentConfig, run_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![run_seed],
        ..cfg.clone()
    }
}

fn train_provenance(cfg: &ExperimentConfig, bundle: &CorpusBundle, run_seed: u64) -> Provenance {
    Provenance::new("train", &run_config(cfg, run_seed), bundle.inputs())
}

/// Trains one `(variant, seed)` run into `out`, resuming from `resume` when given.
pub fn train_run(
    cfg: &ExperimentConfig,
    bundle: &CorpusBundle,
    run_seed: u64,
    out: &Path,
    resume: Option<&Path>,
    progress: Progress,
) -> Result<TrainOutcome> {
    mkdir(out)?;
    let model_cfg = cfg.model.model_config()?;
    let languages = bundle.manifest.languages.language_set()?;
    let vocab = bundle.registry()?.vocab();
    let hyper = cfg.hyper_for(run_seed);
    let (mut model, mut trainer, mut log) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mismatch = |what: &str| {
                Error::Config(format!("checkpoint {} was trained with a different {what}", path.display()))
            };
            if ck.model.config() != &model_cfg {
                return Err(mismatch("model config"));
            }
            if ck.model.languages() != &languages || ck.model.vocab() != &vocab {
                return Err(mismatch("language set"));
            }
            let mut trainer = ck.trainer.ok_or_else(|| mismatch("(missing) optimizer state"))?;
            let same_recipe = HyperParams {
                max_steps: hyper.max_steps,
                ..trainer.hyper.clone()
            } == hyper;
            if !same_recipe {
                return Err(mismatch("training recipe"));
            }
            trainer.hyper.max_steps = hyper.max_steps;
            let log_path = path.with_file_name(TRAIN_LOG);
            let mut log = if log_path.exists() { parse_train_log(&log_path)? } else { Vec::new() };
            log.retain(|r| r.step <= trainer.step);
            (ck.model, trainer, log)
        }
        None => {
            let model = TransformerModel::new(model_cfg, languages, vocab, ExperimentConfig::init_seed(run_seed))?;
            (model, Trainer::new(hyper), Vec::new())
        }
    };
    let non_centered = model.languages().non_centered().len();
    let extra = model.extra_param_count();
    let expected = count_extra_params_for(model.config(), non_centered);
    if extra != expected {
        return Err(Error::Config(format!(
            "model carries {extra} extra parameters but the accounting gives {expected}"
        )));
    }
    let total = trainer.hyper.max_steps;
    let new = trainer.run(&mut model, &bundle.data.train, None, &mut |r| {
        if r.step % 500 == 0 || r.step == total {
            progress(&format!("step {}/{total} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr));
        }
    })?;
    log.extend(new.steps);

    let provenance = train_provenance(cfg, bundle, run_seed);
    let checkpoint = out.join(CHECKPOINT);
    let hash = save_checkpoint(&checkpoint, &model, Some(&trainer), &provenance.to_value())?;
    let tl = TrainLog {
        steps: log.clone(),
        validation: Vec::new(),
    };
    write_csv(&out.join(TRAIN_LOG), &provenance, &TRAIN_LOG_HEADER, &train_log_rows(&tl))?;
    Ok(TrainOutcome {
        model,
        trainer,
        log,
        checkpoint,
        hash,
        extra_params: extra,
    })
}


/// Trains into `dir`, continuing an existing checkpoint there when it came from the same run config.
pub fn train_in_dir(
    cfg: &ExperimentConfig,
    bundle: &CorpusBundle,
    run_seed: u64,
    dir: &Path,
    progress: Progress,
) -> Result<TrainOutcome> {
    let path = dir.join(CHECKPOINT);
    let reusable = path.exists()
        && read_header(&path)
            .map(|h| h.provenance == train_provenance(cfg, bundle, run_seed).to_value())
            .unwrap_or(false);
    train_run(cfg, bundle, run_seed, dir, reusable.then_some(path.as_path()), progress)
}

/// Evaluation switches shared by several commands.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalFlags {
    pub omit_token: bool,
    pub substituted_reference: bool,
}

/// Maps every zero-shot direction to the supervised direction leaving the same source.
pub fn substituted_references(condition: &DataCondition, test: &Corpus) -> BTreeMap<Direction, Direction> {
    test.directions()
        .into_iter()
        .filter(|(s, t)| !condition.is_supervised(s, t))
        .filter_map(|(s, t)| {
            let u = condition.supervised_target_of(&s)?.to_string();
            Some(((s.clone(), t), (s, u)))
        })
        .collect()
}

fn check_languages(model: &TransformerModel<f32>, test: &Corpus) -> Result<()> {
    for (s, t) in test.directions() {
        for l in [s, t] {
            if !model.languages().contains(&l) {
                return Err(cll_core::Error::VocabMismatch(format!("model has no language `{l}`")).into());
            }
        }
    }
    Ok(())
}

pub fn eval_options(cfg: &ExperimentConfig, flags: &EvalFlags, condition: &DataCondition, test: &Corpus) -> EvalOptions {
    EvalOptions {
        beam: cfg.eval.beam,
        omit_token: flags.omit_token,
        max_sentences: cfg.eval.max_sentences,
        reference_for: if flags.substituted_reference {
            substituted_references(condition, test)
        } else {
            BTreeMap::new()
        },
        ..EvalOptions::default()
    }
}

/// Decodes and scores every test direction of `bundle`.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &TransformerModel<f32>,
    bundle: &CorpusBundle,
    flags: &EvalFlags,
) -> Result<Evaluation> {
    check_languages(model, &bundle.data.test)?;
    let condition = &bundle.manifest.condition;
    let opts = eval_options(cfg, flags, condition, &bundle.data.test);
    Ok(evaluate(model, &bundle.data.test, condition, &opts)?)
}

fn eval_summary(provenance: Provenance, flags: &EvalFlags, report: &EvalReport) -> EvalSummary {
    EvalSummary {
        provenance,
        omit_token: flags.omit_token,
        substituted_reference: flags.substituted_reference,
        rows: report.rows.clone(),
        averages: class_averages(report),
    }
}

/// Evaluates `checkpoint` and writes `eval.csv` / `eval.json` into `out`.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    bundle: &CorpusBundle,
    flags: &EvalFlags,
    out: &Path,
) -> Result<EvalSummary> {
    mkdir(out)?;
    let ck = load_checkpoint(checkpoint)?;
    let eval = evaluate_model(cfg, &ck.model, bundle, flags)?;
    let mut inputs = bundle.inputs();
    inputs.insert("checkpoint".into(), crate::hash::file_hash(checkpoint)?);
    let summary = eval_summary(Provenance::new("evaluate", cfg, inputs), flags, &eval.report);
    write_eval(out, "eval", &eval.report, &summary)?;
    Ok(summary)
}

/// Keep sets from every decoder layer down to the middle one, dropping the
/// top-most or bottom-most layer in turn (whichever is farther from the middle).
pub fn keep_sequence(num_layers: usize) -> Vec<BTreeSet<usize>> {
    let mid = middle_layer(num_layers);
    let (mut lo, mut hi) = (1, num_layers);
    let mut out = vec![(lo..=hi).collect()];
    while (lo, hi) != (mid, mid) {
        if hi > mid && hi - mid >= mid - lo {
            hi -= 1;
        } else {
            lo += 1;
        }
        out.push((lo..=hi).collect());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub keep: BTreeSet<usize>,
    pub residual_removed: bool,
    pub supervised_bleu: f64,
    pub zero_shot_bleu: f64,
    pub zero_shot_off_target: f64,
    /// Zero-shot BLEU with the language token omitted at test time.
    pub zero_shot_bleu_omit: f64,
}

fn average(report: &EvalReport, class: DirectionClass) -> f64 {
    report.average_bleu(class).unwrap_or(0.0)
}

/// Trains one model per keep set, with and without encoder residual removal.
pub fn sweep(cfg: &ExperimentConfig, bundle: &CorpusBundle, out: &Path, progress: Progress) -> Result<Vec<SweepRow>> {
    mkdir(out)?;
    let n = cfg.model.num_layers;
    let keeps = match &cfg.sweep.keep {
        Some(k) => k.clone(),
        None => keep_sequence(n),
    };
    let seed = cfg.run_seeds()[0];
    let mut rows = Vec::new();
    for keep in &keeps {
        for removed in [true, false] {
            let mut c = cfg.clone();
            c.model.variant = Variant::Custom;
            c.model.cll_layers = Some(keep.clone());
            c.model.remove_residual = removed;
            let label = format!(
                "keep-{}-residual-{}",
                keep.iter().map(usize::to_string).collect::<Vec<_>>().join("_"),
                if removed { "removed" } else { "kept" }
            );
            progress(&format!("sweep {label}"));
            let run = train_in_dir(&c, bundle, seed, &out.join(&label), progress)?;
            let normal = evaluate_model(&c, &run.model, bundle, &EvalFlags::default())?.report;
            let omit = EvalFlags {
                omit_token: true,
                ..EvalFlags::default()
            };
            let omitted = evaluate_model(&c, &run.model, bundle, &omit)?.report;
            rows.push(SweepRow {
                keep: keep.clone(),
                residual_removed: removed,
                supervised_bleu: average(&normal, DirectionClass::Supervised),
                zero_shot_bleu: average(&normal, DirectionClass::ZeroShot),
                zero_shot_off_target: normal.average_off_target(DirectionClass::ZeroShot).unwrap_or(0.0),
                zero_shot_bleu_omit: average(&omitted, DirectionClass::ZeroShot),
            });
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.keep.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
                r.residual_removed.to_string(),
                format!("{:?}", r.supervised_bleu),
                format!("{:?}", r.zero_shot_bleu),
                format!("{:?}", r.zero_shot_off_target),
                format!("{:?}", r.zero_shot_bleu_omit),
            ]
        })
        .collect();
    write_csv(
        &out.join("sweep.csv"),
        &Provenance::new("sweep", cfg, bundle.inputs()),
        &[
            "keep",
            "residual_removed",
            "supervised_bleu",
            "zero_shot_bleu",
            "zero_shot_off_target",
            "zero_shot_bleu_omit",
        ],
        &table,
    )?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub src: String,
    pub tgt: String,
    pub class: DirectionClass,
    pub bleu: f64,
    pub ablated_bleu: f64,
    /// Supervised target reached from the same source, for zero-shot rows.
    pub rollback_target: Option<String>,
    /// Ablated outputs scored against that supervised direction's references.
    pub rollback_bleu: Option<f64>,
    /// Share of ablated outputs whose majority language is the rollback target.
    pub rollback_majority: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub provenance: Provenance,
    pub ablated_languages: BTreeSet<String>,
    pub supervised_bleu: f64,
    pub rows: Vec<AblationRow>,
}

/// Decodes with every language-specific layer switched off and measures rollback.
pub fn ablate(cfg: &ExperimentConfig, model: &TransformerModel<f32>, bundle: &CorpusBundle, inputs: Inputs, out: &Path) -> Result<AblationSummary> {
    mkdir(out)?;
    check_languages(model, &bundle.data.test)?;
    let condition = &bundle.manifest.condition;
    let test = &bundle.data.test;
    let opts = eval_options(cfg, &EvalFlags::default(), condition, test);
    let normal = evaluate(model, test, condition, &opts)?;
    let view = ablate_lsl(model, None)?;
    let ablated = evaluate(
        model,
        test,
        condition,
        &EvalOptions {
            forward: view.clone(),
            ..opts.clone()
        },
    )?;
    let owner = |tok: &str| model.vocab().id(tok).ok().and_then(|id| model.vocab().owner(id));
    let cap = |v: Vec<&Example>| -> Vec<Example> {
        v.into_iter().take(cfg.eval.max_sentences.unwrap_or(usize::MAX)).cloned().collect()
    };
    let mut rows = Vec::new();
    for (r, a) in normal.report.rows.iter().zip(&ablated.report.rows) {
        let mut row = AblationRow {
            src: r.src.clone(),
            tgt: r.tgt.clone(),
            class: r.class,
            bleu: r.bleu,
            ablated_bleu: a.bleu,
            rollback_target: None,
            rollback_bleu: None,
            rollback_majority: None,
        };
        if r.class == DirectionClass::ZeroShot {
            if let Some(u) = condition.supervised_target_of(&r.src) {
                let zs = cap(test.direction(&r.src, &r.tgt));
                let sup = cap(test.direction(&r.src, u));
                let hyps = &ablated.hypotheses[&(r.src.clone(), r.tgt.clone())];
                let zs_refs: Vec<&Example> = zs.iter().collect();
                let sup_refs: Vec<&Example> = sup.iter().collect();
                row.rollback_bleu = Some(rollback_score(hyps, &zs_refs, &sup_refs)?);
                let hits = hyps.iter().filter(|h| majority_language(h, owner) == Some(u)).count();
                row.rollback_majority = Some(hits as f64 / hyps.len().max(1) as f64);
                row.rollback_target = Some(u.to_string());
            }
        }
        rows.push(row);
    }
    let summary = AblationSummary {
        provenance: Provenance::new("ablate", cfg, inputs),
        ablated_languages: view.ablated.clone(),
        supervised_bleu: average(&normal.report, DirectionClass::Supervised),
        rows,
    };
    let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
    let table: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                format!("{}-{}", r.src, r.tgt),
                r.class.name().into(),
                format!("{:?}", r.bleu),
                format!("{:?}", r.ablated_bleu),
                r.rollback_target.clone().unwrap_or_default(),
                opt(r.rollback_bleu),
                opt(r.rollback_majority),
            ]
        })
        .collect();
    write_csv(
        &out.join("ablation.csv"),
        &summary.provenance,
        &[
            "direction",
            "class",
            "bleu",
            "ablated_bleu",
            "rollback_target",
            "rollback_bleu",
            "rollback_majority",
        ],
        &table,
    )?;
    write_json(&out.join("ablation.json"), &summary)?;
    write_csv(
        &out.join("mixing.csv"),
        &summary.provenance,
        &MIXING_HEADER,
        &mixing_rows(&dump_mixing_weights(model)),
    )?;
    Ok(summary)
}

/// First zero-shot direction into a language with language-specific layers, else the first direction.
fn default_attribution_direction(model: &TransformerModel<f32>, condition: &DataCondition, test: &Corpus) -> Option<Direction> {
    let dirs = test.directions();
    dirs.iter()
        .find(|(s, t)| !condition.is_supervised(s, t) && !model.languages().is_central(t))
        .or_else(|| dirs.first())
        .cloned()
}

/// Integrated-gradients attribution, attention maps and mixing weights for selected test sentences.
pub fn attribute(
    cfg: &ExperimentConfig,
    model: &TransformerModel<f32>,
    bundle: &CorpusBundle,
    inputs: Inputs,
    out: &Path,
) -> Result<Vec<AttributionReport>> {
    mkdir(out)?;
    check_languages(model, &bundle.data.test)?;
    let test = &bundle.data.test;
    let direction = match &cfg.attribution.direction {
        Some(d) => parse_direction(d)?,
        None => default_attribution_direction(model, &bundle.manifest.condition, test).ok_or(cll_core::Error::EmptyCorpus)?,
    };
    let examples = test.direction(&direction.0, &direction.1);
    if examples.is_empty() {
        return Err(Error::Config(format!("no test sentences for {}", direction_name(&direction))));
    }
    let request = AttributionRequest {
        layers: cfg.attribution.layers.clone(),
        components: cfg.components()?,
        positions: BTreeSet::new(),
        steps: cfg.attribution.steps,
    };
    let provenance = Provenance::new("attribute", cfg, inputs);
    let exact = model.cast::<f64>();
    let mut reports = Vec::new();
    for &id in &cfg.attribution.sentences {
        let e = examples
            .get(id)
            .ok_or_else(|| Error::Config(format!("sentence {id} is past the {} test sentences", examples.len())))?;
        let report = attribute_example(&exact, e, id, &request)?;
        let stem = format!("{}_{id}", direction_name(&direction));
        write_csv(
            &out.join(format!("attribution_{stem}.csv")),
            &provenance,
            &ATTRIBUTION_HEADER,
            &attribution_rows(&report),
        )?;
        for omit in [false, true] {
            let maps = export_attention(model, &e.src, &e.tgt_lang, omit)?;
            let descriptor = format!(
                "direction={} sentence={id} omit_token={omit} layers={} heads={}",
                direction_name(&direction),
                model.config().num_layers,
                model.config().heads
            );
            let name = if omit { format!("attention_{stem}_omit.txt") } else { format!("attention_{stem}.txt") };
            write_attention(&out.join(name), &descriptor, &maps)?;
        }
        reports.push(report);
    }
    write_csv(&out.join("mixing.csv"), &provenance, &MIXING_HEADER, &mixing_rows(&dump_mixing_weights(model)))?;
    write_json(
        &out.join("attribution.json"),
        &serde_json::json!({
            "provenance": provenance,
            "baseline": "zero-activation",
            "steps": cfg.attribution.steps,
            "reports": reports,
        }),
    )?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationAudit {
    pub frozen_tensors: usize,
    pub frozen_drift: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationSummary {
    pub provenance: Provenance,
    pub language: String,
    pub partner: String,
    pub audit: IntegrationAudit,
    pub report: EvalReport,
    /// Mean BLEU from the new language into the languages it never saw paired.
    pub zero_shot_into_untouched: f64,
    /// Mean BLEU from those languages into the new one.
    pub zero_shot_from_untouched: f64,
}

/// Adds the configured new language to a trained model and fine-tunes it.
pub fn integrate(
    cfg: &ExperimentConfig,
    checkpoint: Checkpoint,
    bundle: &CorpusBundle,
    inputs: Inputs,
    out: &Path,
    progress: Progress,
) -> Result<(TransformerModel<f32>, IntegrationSummary)> {
    mkdir(out)?;
    let icfg = &cfg.integration;
    let mut model = checkpoint.model;
    let recipe = &bundle.manifest.languages;
    let condition = &bundle.manifest.condition;
    let new = icfg.language.clone();
    if recipe.ids.contains(&new) {
        return Err(cll_core::Error::LanguageAlreadyPresent(new).into());
    }
    let partner = match &icfg.partner {
        Some(p) => p.clone(),
        None => recipe.central.clone().unwrap_or_else(|| recipe.ids[0].clone()),
    };
    let mut ids = recipe.ids.clone();
    ids.push(new.clone());
    let specs = make_languages(&ids, recipe.base_vocab, recipe.seed)?;
    let spec = specs.last().expect("non-empty").clone();
    let registry = cll_core::corpus::LanguageRegistry::new(specs)?;
    let mut supervised = condition.supervised.clone();
    supervised.insert((new.clone(), partner.clone()));
    supervised.insert((partner.clone(), new.clone()));
    let extended = DataCondition {
        kind: condition.kind,
        languages: LanguageSet::new(ids, recipe.central.clone())?,
        supervised,
    };
    extended.languages.check(&partner)?;
    let data = generate_corpus(&extended, &registry, &bundle.manifest.spec)?;
    let mut bilingual = Corpus {
        descriptor: data.train.descriptor.clone(),
        examples: Vec::new(),
    };
    for d in [(new.clone(), partner.clone()), (partner.clone(), new.clone())] {
        bilingual
            .examples
            .extend(data.train.direction(&d.0, &d.1).into_iter().take(icfg.pairs_per_direction).cloned());
    }
    let replay = match icfg.replay_per_direction {
        None => bundle.data.train.clone(),
        Some(cap) => {
            let mut r = Corpus {
                descriptor: bundle.data.train.descriptor.clone(),
                examples: Vec::new(),
            };
            for (s, t) in bundle.data.train.directions() {
                r.examples.extend(bundle.data.train.direction(&s, &t).into_iter().take(cap).cloned());
            }
            r
        }
    };
    let run_seed = cfg.run_seeds()[0];
    let hyper = HyperParams {
        max_steps: icfg.steps,
        seed: substream(run_seed, "integrate"),
        freeze: Vec::new(),
        constant_lr: None,
        ..cfg.training.clone()
    };
    let original_steps = checkpoint.trainer.as_ref().map_or(cfg.training.max_steps, |t| t.step);
    let options = IntegrationOptions {
        embedding_noise: icfg.embedding_noise,
        freeze_existing: true,
    };
    progress(&format!(
        "integrating {new} with {} pairs per direction against {partner}, {} steps",
        icfg.pairs_per_direction, icfg.steps
    ));
    let outcome = integrate_language(&mut model, &spec, &bilingual, &replay, &hyper, original_steps, &options)?;

    let test = data.test.filter(|e| e.src_lang == new || e.tgt_lang == new);
    let opts = EvalOptions {
        beam: cfg.eval.beam,
        max_sentences: cfg.eval.max_sentences,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &test, &extended, &opts)?.report;
    let mean_of = |keep: &dyn Fn(&str, &str) -> bool| {
        let v: Vec<f64> = report.rows.iter().filter(|r| keep(&r.src, &r.tgt)).map(|r| r.bleu).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let into = mean_of(&|s, t| s == new && t != partner);
    let from = mean_of(&|s, t| t == new && s != partner);
    let provenance = Provenance::new("integrate", cfg, inputs);
    let summary = IntegrationSummary {
        provenance: provenance.clone(),
        language: new,
        partner,
        audit: IntegrationAudit {
            frozen_tensors: outcome.frozen.len(),
            frozen_drift: outcome.frozen_drift,
            passed: outcome.frozen_drift == 0.0,
        },
        zero_shot_into_untouched: into,
        zero_shot_from_untouched: from,
        report: report.clone(),
    };
    save_checkpoint(&out.join(CHECKPOINT), &model, None, &provenance.to_value())?;
    write_csv(&out.join(TRAIN_LOG), &provenance, &TRAIN_LOG_HEADER, &train_log_rows(&outcome.log))?;
    let eval = eval_summary(provenance, &EvalFlags::default(), &report);
    write_eval(out, "eval", &report, &eval)?;
    write_json(&out.join("integration.json"), &summary)?;
    Ok((model, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub variant: Variant,
    pub class: DirectionClass,
    pub mean_bleu: f64,
    pub variance_bleu: f64,
    pub mean_off_target: f64,
}

/// Trains every configured variant once per seed and tabulates the spread.
pub fn multiseed(
    cfg: &ExperimentConfig,
    bundle: &CorpusBundle,
    out: &Path,
    progress: Progress,
) -> Result<(Vec<SeedRun>, Vec<VarianceRow>)> {
    mkdir(out)?;
    let seeds = cfg.run_seeds();
    let mut runs = Vec::new();
    let mut table = Vec::new();
    for &variant in &cfg.multiseed.variants {
        let mut c = cfg.clone();
        c.model.variant = variant;
        c.model.cll_layers = None;
        c.model.remove_residual = false;
        let mut off_targets: BTreeMap<DirectionClass, Vec<f64>> = BTreeMap::new();
        let summary = multi_seed_run(&seeds, |seed| {
            progress(&format!("{} seed {seed}", variant.name()));
            let dir = out.join(variant.name()).join(format!("seed-{seed}"));
            let run = train_in_dir(&c, bundle, seed, &dir, progress).map_err(into_core)?;
            let report = evaluate_model(&c, &run.model, bundle, &EvalFlags::default())
                .map_err(into_core)?
                .report;
            let summary = eval_summary(train_provenance(&c, bundle, seed), &EvalFlags::default(), &report);
            write_eval(&dir, "eval", &report, &summary).map_err(into_core)?;
            for class in [DirectionClass::Supervised, DirectionClass::ZeroShot] {
                off_targets
                    .entry(class)
                    .or_default()
                    .push(report.average_off_target(class).unwrap_or(0.0));
            }
            let metrics = SeedMetrics {
                seed,
                supervised_bleu: average(&report, DirectionClass::Supervised),
                zero_shot_bleu: average(&report, DirectionClass::ZeroShot),
            };
            runs.push(SeedRun { variant, seed, report });
            Ok(metrics)
        })?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        table.push(VarianceRow {
            variant,
            class: DirectionClass::Supervised,
            mean_bleu: summary.supervised_mean,
            variance_bleu: summary.supervised_variance,
            mean_off_target: mean(&off_targets[&DirectionClass::Supervised]),
        });
        table.push(VarianceRow {
            variant,
            class: DirectionClass::ZeroShot,
            mean_bleu: summary.zero_shot_mean,
            variance_bleu: summary.zero_shot_variance,
            mean_off_target: mean(&off_targets[&DirectionClass::ZeroShot]),
        });
    }
    let provenance = Provenance::new("multiseed", cfg, bundle.inputs());
    let run_rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            vec![
                r.variant.name().into(),
                r.seed.to_string(),
                format!("{:?}", average(&r.report, DirectionClass::Supervised)),
                format!("{:?}", average(&r.report, DirectionClass::ZeroShot)),
                format!("{:?}", r.report.average_off_target(DirectionClass::ZeroShot).unwrap_or(0.0)),
            ]
        })
        .collect();
    write_csv(
        &out.join("multiseed_runs.csv"),
        &provenance,
        &["variant", "seed", "supervised_bleu", "zero_shot_bleu", "zero_shot_off_target"],
        &run_rows,
    )?;
    let var_rows: Vec<Vec<String>> = table
        .iter()
        .map(|r| {
            vec![
                r.variant.name().into(),
                r.class.name().into(),
                format!("{:?}", r.mean_bleu),
                format!("{:?}", r.variance_bleu),
                format!("{:?}", r.mean_off_target),
            ]
        })
        .collect();
    write_csv(
        &out.join("multiseed_variance.csv"),
        &provenance,
        &["variant", "class", "mean_bleu", "variance_bleu", "mean_off_target"],
        &var_rows,
    )?;
    Ok((runs, table))
}

/// Carries a driver error through a core callback.
fn into_core(e: Error) -> cll_core::Error {
    match e {
        Error::Core(c) => c,
        other => cll_core::Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_sequences_shrink_to_the_middle() {
        assert_eq!(keep_sequence(2), vec![[1, 2].into(), [2].into()]);
        let six = keep_sequence(6);
        assert_eq!(six.first().unwrap(), &(1..=6).collect::<BTreeSet<_>>());
        assert_eq!(six.last().unwrap(), &[4].into());
        for w in six.windows(2) {
            assert_eq!(w[0].len(), w[1].len() + 1);
            assert!(w[1].is_subset(&w[0]));
        }
        for n in 2..=8 {
            assert_eq!(keep_sequence(n).last().unwrap(), &[middle_layer(n)].into());
        }
    }
}
