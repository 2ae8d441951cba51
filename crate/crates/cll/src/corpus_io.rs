//! Tab-separated corpus files and generated corpus directories.
//!
//! A corpus file starts with `#cll-corpus v1<TAB>descriptor` and then holds one
//! example per line: `src_lang, tgt_lang, src tokens, tgt tokens`, tokens joined by
//! single spaces.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cll_core::corpus::{
    build_condition, generate_corpus, make_languages, Corpus, CorpusSpec, DataCondition, Direction, Example,
    GeneratedCorpus, LanguageRegistry,
};
use cll_core::model::LanguageSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{blob_hash, Inputs};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "#cll-corpus v";

fn check_field(s: &str, what: &str) -> std::io::Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r', ' ']) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("{what} `{s}` cannot be written to a corpus file"),
        ));
    }
    Ok(())
}

pub fn write_corpus(mut w: impl Write, corpus: &Corpus) -> std::io::Result<()> {
    if corpus.descriptor.contains(['\n', '\r']) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "descriptor spans several lines",
        ));
    }
    writeln!(w, "{MAGIC}{FORMAT_VERSION}\t{}", corpus.descriptor)?;
    for e in &corpus.examples {
        check_field(&e.src_lang, "language")?;
        check_field(&e.tgt_lang, "language")?;
        for t in e.src.iter().chain(&e.tgt) {
            check_field(t, "token")?;
        }
        writeln!(w, "{}\t{}\t{}\t{}", e.src_lang, e.tgt_lang, e.src.join(" "), e.tgt.join(" "))?;
    }
    w.flush()
}

fn tokens(field: &str) -> Vec<String> {
    if field.is_empty() {
        Vec::new()
    } else {
        field.split(' ').map(str::to_string).collect()
    }
}

/// Parses a corpus; `source` only labels errors.
pub fn read_corpus(r: impl BufRead, source: &Path) -> Result<Corpus> {
    let bad = |line: usize, msg: String| Error::Malformed {
        path: source.to_path_buf(),
        line,
        msg,
    };
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(source, e))?,
        None => return Err(bad(1, "missing header".into())),
    };
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad(1, format!("header must start with `{MAGIC}`")))?;
    let (version, descriptor) = rest.split_once('\t').unwrap_or((rest, ""));
    match version.parse::<u32>() {
        Ok(FORMAT_VERSION) => {}
        _ => return Err(bad(1, format!("unsupported format version `{version}`"))),
    }
    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(|e| Error::io(source, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(n, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(bad(n, "empty language id".into()));
        }
        let (src, tgt) = (tokens(fields[2]), tokens(fields[3]));
        if src.iter().chain(&tgt).any(String::is_empty) {
            return Err(bad(n, "empty token".into()));
        }
        examples.push(Example {
            src_lang: fields[0].into(),
            tgt_lang: fields[1].into(),
            src,
            tgt,
        });
    }
    Ok(Corpus {
        descriptor: descriptor.into(),
        examples,
    })
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(BufWriter::new(f), corpus).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(f), path)
}

/// How the languages of a corpus directory were built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageRecipe {
    pub ids: Vec<String>,
    pub central: Option<String>,
    pub base_vocab: usize,
    pub seed: u64,
}

impl LanguageRecipe {
    pub fn language_set(&self) -> Result<LanguageSet> {
        Ok(LanguageSet::new(self.ids.clone(), self.central.clone())?)
    }

    pub fn registry(&self) -> Result<LanguageRegistry> {
        Ok(LanguageRegistry::new(make_languages(&self.ids, self.base_vocab, self.seed)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub path: String,
    pub src: String,
    pub tgt: String,
    pub examples: usize,
    pub hash: String,
}

/// `manifest.json` of a corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub languages: LanguageRecipe,
    pub condition: DataCondition,
    pub spec: CorpusSpec,
    pub train: Vec<CorpusFile>,
    pub test: Vec<CorpusFile>,
    /// Resolved experiment config and inputs of the command that wrote the directory.
    pub provenance: serde_json::Value,
}

/// A corpus directory read back into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusBundle {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
    pub data: GeneratedCorpus,
}

impl CorpusBundle {
    /// File hashes keyed by their path inside the directory.
    pub fn inputs(&self) -> Inputs {
        self.manifest
            .train
            .iter()
            .chain(&self.manifest.test)
            .map(|f| (format!("corpus/{}", f.path), f.hash.clone()))
            .collect()
    }

    pub fn registry(&self) -> Result<LanguageRegistry> {
        self.manifest.languages.registry()
    }
}

fn direction_file(split: &str, (src, tgt): &Direction) -> String {
    format!("{split}/{src}-{tgt}.tsv")
}

/// Builds languages, condition and corpus from a recipe.
pub fn build_corpus(
    recipe: &LanguageRecipe,
    kind: cll_core::corpus::ConditionKind,
    extra_pairs: &std::collections::BTreeSet<Direction>,
    spec: &CorpusSpec,
) -> Result<(DataCondition, LanguageRegistry, GeneratedCorpus)> {
    let set = recipe.language_set()?;
    let condition = build_condition(kind, &set, extra_pairs)?;
    let registry = recipe.registry()?;
    let data = generate_corpus(&condition, &registry, spec)?;
    Ok((condition, registry, data))
}

fn write_split(dir: &Path, split: &str, corpus: &Corpus) -> Result<Vec<CorpusFile>> {
    let sub = dir.join(split);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut files = Vec::new();
    for d in corpus.directions() {
        let part = Corpus {
            descriptor: corpus.descriptor.clone(),
            examples: corpus.direction(&d.0, &d.1).into_iter().cloned().collect(),
        };
        let mut bytes = Vec::new();
        write_corpus(&mut bytes, &part).map_err(|e| Error::io(&sub, e))?;
        let rel = direction_file(split, &d);
        let path = dir.join(&rel);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(CorpusFile {
            path: rel,
            src: d.0,
            tgt: d.1,
            examples: part.examples.len(),
            hash: blob_hash(&bytes),
        });
    }
    Ok(files)
}

/// Writes one file per direction under `train/` and `test/` plus `manifest.json`.
pub fn write_bundle(
    dir: &Path,
    recipe: &LanguageRecipe,
    condition: &DataCondition,
    spec: &CorpusSpec,
    data: &GeneratedCorpus,
    provenance: serde_json::Value,
) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CorpusManifest {
        format_version: FORMAT_VERSION,
        languages: recipe.clone(),
        condition: condition.clone(),
        spec: spec.clone(),
        train: write_split(dir, "train", &data.train)?,
        test: write_split(dir, "test", &data.test)?,
        provenance,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_split(dir: &Path, files: &[CorpusFile]) -> Result<Corpus> {
    let mut out = Corpus::default();
    for f in files {
        let path = dir.join(&f.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let found = blob_hash(&bytes);
        if found != f.hash {
            return Err(Error::Integrity {
                path,
                expected: f.hash.clone(),
                found,
            });
        }
        let part = read_corpus(bytes.as_slice(), &path)?;
        if part.examples.len() != f.examples || part.examples.iter().any(|e| e.src_lang != f.src || e.tgt_lang != f.tgt) {
            return Err(Error::Malformed {
                path,
                line: 1,
                msg: format!("content does not match the manifest entry {}-{}", f.src, f.tgt),
            });
        }
        out.descriptor = part.descriptor;
        out.examples.extend(part.examples);
    }
    Ok(out)
}

/// Reads a corpus directory, verifying every file against the manifest hashes.
pub fn read_bundle(dir: &Path) -> Result<CorpusBundle> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingCorpus(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Malformed {
            path,
            line: 1,
            msg: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let data = GeneratedCorpus {
        train: read_split(dir, &manifest.train)?,
        test: read_split(dir, &manifest.test)?,
    };
    Ok(CorpusBundle {
        dir: dir.to_path_buf(),
        manifest,
        data,
    })
}
