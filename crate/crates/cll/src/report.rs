//! CSV, JSON and text artifacts.
//!
//! Every CSV starts with one `#` line holding the provenance as compact JSON, then a
//! header row.

use std::fs;
use std::io::Write;
use std::path::Path;

use cll_core::attribution::{AttentionMaps, AttributionReport, MixingTable};
use cll_core::evaluation::{DirectionClass, EvalReport, EvalRow};
use cll_core::training::{StepRecord, TrainLog};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::hash::Inputs;

/// Resolved config plus input hashes, embedded in every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub inputs: Inputs,
}

impl Provenance {
    pub fn new(command: &str, config: &ExperimentConfig, inputs: Inputs) -> Self {
        Self {
            tool: format!("cll {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            config: config.for_provenance(),
            inputs,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serializes")
    }
}

/// Writes `# <provenance>` followed by CSV `rows` under `header`.
pub fn write_csv<R: AsRef<[String]>>(path: &Path, provenance: &Provenance, header: &[&str], rows: &[R]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# {}", serde_json::to_string(provenance)?).expect("write to memory");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.as_ref())?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_csv`]: provenance, header and rows.
pub fn read_csv(path: &Path) -> Result<(Option<Provenance>, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let provenance = match text.lines().next().and_then(|l| l.strip_prefix("# ")) {
        Some(json) => Some(serde_json::from_str(json)?),
        None => None,
    };
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((provenance, header, rows))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn num(x: f64) -> String {
    // Shortest representation that parses back to the same value.
    format!("{x:?}")
}

pub const TRAIN_LOG_HEADER: [&str; 4] = ["step", "lr", "loss", "grad_norm"];

pub fn train_log_rows(log: &TrainLog) -> Vec<Vec<String>> {
    log.steps
        .iter()
        .map(|s| vec![s.step.to_string(), num(s.lr), num(s.loss), num(s.grad_norm)])
        .collect()
}

pub fn parse_train_log(path: &Path) -> Result<Vec<StepRecord>> {
    let (_, _, rows) = read_csv(path)?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let bad = || Error::Malformed {
                path: path.to_path_buf(),
                line: i + 3,
                msg: "bad train log row".into(),
            };
            if r.len() != 4 {
                return Err(bad());
            }
            Ok(StepRecord {
                step: r[0].parse().map_err(|_| bad())?,
                lr: r[1].parse().map_err(|_| bad())?,
                loss: r[2].parse().map_err(|_| bad())?,
                grad_norm: r[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub const EVAL_HEADER: [&str; 5] = ["direction", "class", "bleu", "off_target", "n"];

fn eval_row(r: &EvalRow) -> Vec<String> {
    vec![
        format!("{}-{}", r.src, r.tgt),
        r.class.name().into(),
        num(r.bleu),
        num(r.off_target),
        r.n.to_string(),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAverage {
    pub class: DirectionClass,
    pub directions: usize,
    pub bleu: f64,
    pub off_target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub provenance: Provenance,
    pub omit_token: bool,
    pub substituted_reference: bool,
    pub rows: Vec<EvalRow>,
    pub averages: Vec<ClassAverage>,
}

pub fn class_averages(report: &EvalReport) -> Vec<ClassAverage> {
    [DirectionClass::Supervised, DirectionClass::ZeroShot]
        .into_iter()
        .filter_map(|class| {
            Some(ClassAverage {
                class,
                directions: report.rows.iter().filter(|r| r.class == class).count(),
                bleu: report.average_bleu(class)?,
                off_target: report.average_off_target(class)?,
            })
        })
        .collect()
}

/// `<stem>.csv` and `<stem>.json`.
pub fn write_eval(dir: &Path, stem: &str, report: &EvalReport, summary: &EvalSummary) -> Result<()> {
    let rows: Vec<Vec<String>> = report.rows.iter().map(eval_row).collect();
    write_csv(&dir.join(format!("{stem}.csv")), &summary.provenance, &EVAL_HEADER, &rows)?;
    write_json(&dir.join(format!("{stem}.json")), summary)
}

pub const ATTRIBUTION_HEADER: [&str; 5] = ["layer", "component", "output_token_index", "token", "score"];

pub fn attribution_rows(report: &AttributionReport) -> Vec<Vec<String>> {
    report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.layer.to_string(),
                r.component.clone(),
                r.output_token_index.to_string(),
                r.token.clone(),
                num(r.score),
            ]
        })
        .collect()
}

pub const MIXING_HEADER: [&str; 3] = ["layer", "language", "t"];

pub fn mixing_rows(table: &MixingTable) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|(l, lang, t)| vec![l.to_string(), lang.clone(), num(*t)])
        .collect();
    rows.extend(table.averages.iter().map(|(lang, t)| vec!["mean".into(), lang.clone(), num(*t)]));
    rows
}

pub const ATTENTION_VERSION: u32 = 1;

/// Header line `#cll-attention v1<TAB>descriptor`, then `layer head row weights...` per line.
pub fn write_attention(path: &Path, descriptor: &str, maps: &AttentionMaps) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "#cll-attention v{ATTENTION_VERSION}\t{descriptor} tokens={}\n",
        maps.tokens.join(",")
    ));
    let s = maps.len();
    for (layer, heads) in maps.maps.iter().enumerate() {
        for (head, weights) in heads.iter().enumerate() {
            for (row, w) in weights.chunks(s).enumerate() {
                let vals: Vec<String> = w.iter().map(|x| num(*x)).collect();
                out.push_str(&format!("{}\t{}\t{}\t{}\n", layer + 1, head + 1, row, vals.join(" ")));
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
