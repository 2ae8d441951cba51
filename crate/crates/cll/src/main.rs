use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cll::checkpoint::load_checkpoint;
use cll::config::ExperimentConfig;
use cll::corpus_io::CorpusBundle;
use cll::error::{Error, Result};
use cll::experiment::{self, EvalFlags, CORPUS_DIR};
use cll::hash::file_hash;

#[derive(Parser)]
#[command(name = "cll", version, about = "Multilingual zero-shot translation with cipher languages")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in small experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the data seed and the run seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to read (or to resume from, for `train`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus directory. Generated there when missing.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the synthetic corpus.
    Generate(Common),
    /// Train one model.
    Train(Common),
    /// Score a checkpoint on every test direction.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Drop the target-language token at test time.
        #[arg(long)]
        omit_token: bool,
        /// Score zero-shot outputs against the supervised direction's references.
        #[arg(long)]
        substituted_reference: bool,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Train one model per kept-layer set, with and without residual removal.
    Sweep(Common),
    /// Decode with the language-specific layers switched off.
    Ablate(Common),
    /// Integrated gradients, attention maps and mixing weights.
    Attribute {
        #[command(flatten)]
        common: Common,
        /// Direction as `src-tgt`.
        #[arg(long)]
        direction: Option<String>,
        /// Test sentence index, repeatable.
        #[arg(long = "sentence")]
        sentences: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Add a new language to a trained model.
    Integrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        language: Option<String>,
    },
    /// Train every configured variant under several seeds.
    Multiseed {
        #[command(flatten)]
        common: Common,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, verb: &str) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| Error::Config(format!("`{verb}` needs --out or `out` in the config")))
}

fn checkpoint_path(c: &Common, verb: &str) -> Result<PathBuf> {
    let p = c
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config(format!("`{verb}` needs --checkpoint")))?;
    if !p.is_file() {
        return Err(Error::io(&p, std::io::ErrorKind::NotFound.into()));
    }
    Ok(p)
}

fn parent(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Corpus next to the checkpoint unless given.
fn corpus_near_checkpoint(c: &Common, cfg: &ExperimentConfig, checkpoint: &Path) -> Result<CorpusBundle> {
    let dir = c.corpus.clone().unwrap_or_else(|| parent(checkpoint).join(CORPUS_DIR));
    experiment::open_corpus(cfg, &dir)
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn run(verb: Verb) -> Result<()> {
    let mut say = |l: &str| progress(l);
    match verb {
        Verb::Generate(c) => {
            let cfg = load_config(&c)?;
            let out = out_dir(&cfg, "generate")?;
            let summary = experiment::generate(&cfg, &out)?;
            for f in &summary.train {
                println!("train\t{}-{}\t{}\t{}", f.src, f.tgt, f.examples, f.path);
            }
            for (f, class) in &summary.test {
                println!("test\t{}-{}\t{}\t{}\t{}", f.src, f.tgt, class.name(), f.examples, f.path);
            }
        }
        Verb::Train(c) => {
            let cfg = load_config(&c)?;
            let out = out_dir(&cfg, "train")?;
            let corpus = c.corpus.clone().unwrap_or_else(|| out.join(CORPUS_DIR));
            let bundle = experiment::corpus_for(&cfg, &corpus)?;
            let seed = cfg.run_seeds()[0];
            let run = experiment::train_run(&cfg, &bundle, seed, &out, c.checkpoint.as_deref(), &mut say)?;
            println!("checkpoint\t{}\t{}", run.checkpoint.display(), run.hash);
            println!("steps\t{}", run.trainer.step);
            println!("extra_params\t{}", run.extra_params);
            if let Some(last) = run.log.last() {
                println!("final_loss\t{:?}", last.loss);
            }
        }
        Verb::Evaluate {
            common: c,
            omit_token,
            substituted_reference,
            beam,
        } => {
            let mut cfg = load_config(&c)?;
            if let Some(b) = beam {
                cfg.eval.beam = b;
            }
            cfg.validate()?;
            let ck = checkpoint_path(&c, "evaluate")?;
            let out = cfg.out.clone().unwrap_or_else(|| parent(&ck));
            let bundle = corpus_near_checkpoint(&c, &cfg, &ck)?;
            let flags = EvalFlags {
                omit_token: omit_token || cfg.eval.omit_token,
                substituted_reference: substituted_reference || cfg.eval.substituted_reference,
            };
            let summary = experiment::evaluate_checkpoint(&cfg, &ck, &bundle, &flags, &out)?;
            for r in &summary.rows {
                println!("{}-{}\t{}\t{:.2}\t{:.3}", r.src, r.tgt, r.class.name(), r.bleu, r.off_target);
            }
            for a in &summary.averages {
                println!("mean\t{}\t{:.2}\t{:.3}", a.class.name(), a.bleu, a.off_target);
            }
        }
        Verb::Sweep(c) => {
            let cfg = load_config(&c)?;
            let out = out_dir(&cfg, "sweep")?;
            let corpus = c.corpus.clone().unwrap_or_else(|| out.join(CORPUS_DIR));
            let bundle = experiment::corpus_for(&cfg, &corpus)?;
            for r in experiment::sweep(&cfg, &bundle, &out, &mut say)? {
                println!(
                    "{:?}\tresidual_removed={}\tsupervised={:.2}\tzero_shot={:.2}\toff_target={:.3}\tzero_shot_omit={:.2}",
                    r.keep, r.residual_removed, r.supervised_bleu, r.zero_shot_bleu, r.zero_shot_off_target, r.zero_shot_bleu_omit
                );
            }
        }
        Verb::Ablate(c) => {
            let cfg = load_config(&c)?;
            let ck = checkpoint_path(&c, "ablate")?;
            let out = cfg.out.clone().unwrap_or_else(|| parent(&ck));
            let bundle = corpus_near_checkpoint(&c, &cfg, &ck)?;
            let model = load_checkpoint(&ck)?.model;
            let mut inputs = bundle.inputs();
            inputs.insert("checkpoint".into(), file_hash(&ck)?);
            let s = experiment::ablate(&cfg, &model, &bundle, inputs, &out)?;
            for r in &s.rows {
                println!(
                    "{}-{}\t{}\t{:.2}\t{:.2}\t{}",
                    r.src,
                    r.tgt,
                    r.class.name(),
                    r.bleu,
                    r.ablated_bleu,
                    r.rollback_bleu.map(|b| format!("{b:.2}")).unwrap_or_default()
                );
            }
        }
        Verb::Attribute {
            common: c,
            direction,
            sentences,
            steps,
        } => {
            let mut cfg = load_config(&c)?;
            if direction.is_some() {
                cfg.attribution.direction = direction;
            }
            if !sentences.is_empty() {
                cfg.attribution.sentences = sentences;
            }
            if let Some(s) = steps {
                cfg.attribution.steps = s;
            }
            cfg.validate()?;
            let ck = checkpoint_path(&c, "attribute")?;
            let out = cfg.out.clone().unwrap_or_else(|| parent(&ck));
            let bundle = corpus_near_checkpoint(&c, &cfg, &ck)?;
            let model = load_checkpoint(&ck)?.model;
            let mut inputs = bundle.inputs();
            inputs.insert("checkpoint".into(), file_hash(&ck)?);
            let reports = experiment::attribute(&cfg, &model, &bundle, inputs, &out)?;
            println!("attributed\t{} sentences\t{}", reports.len(), out.display());
        }
        Verb::Integrate { common: c, language } => {
            let mut cfg = load_config(&c)?;
            if let Some(l) = language {
                cfg.integration.language = l;
            }
            let ck = checkpoint_path(&c, "integrate")?;
            let out = out_dir(&cfg, "integrate")?;
            let bundle = corpus_near_checkpoint(&c, &cfg, &ck)?;
            let mut inputs = bundle.inputs();
            inputs.insert("checkpoint".into(), file_hash(&ck)?);
            let checkpoint = load_checkpoint(&ck)?;
            let (_, s) = experiment::integrate(&cfg, checkpoint, &bundle, inputs, &out, &mut say)?;
            println!("frozen_tensors\t{}\tdrift\t{:?}\tpassed\t{}", s.audit.frozen_tensors, s.audit.frozen_drift, s.audit.passed);
            println!("zero_shot_into_untouched\t{:.2}", s.zero_shot_into_untouched);
            println!("zero_shot_from_untouched\t{:.2}", s.zero_shot_from_untouched);
        }
        Verb::Multiseed { common: c, seeds } => {
            let mut cfg = load_config(&c)?;
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            let out = out_dir(&cfg, "multiseed")?;
            let corpus = c.corpus.clone().unwrap_or_else(|| out.join(CORPUS_DIR));
            let bundle = experiment::corpus_for(&cfg, &corpus)?;
            let (_, table) = experiment::multiseed(&cfg, &bundle, &out, &mut say)?;
            for r in &table {
                println!(
                    "{}\t{}\tmean={:.2}\tvariance={:.3}\toff_target={:.3}",
                    r.variant.name(),
                    r.class.name(),
                    r.mean_bleu,
                    r.variance_bleu,
                    r.mean_off_target
                );
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
