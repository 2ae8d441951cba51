//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `CLLCKPT\0`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every tensor as
//! little-endian `f32` in header order. When the header carries optimizer state,
//! the Adam first and second moments follow in the same way.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use cll_core::model::{LanguageSet, ModelConfig, ParamStore, TokenKind, TransformerModel, Vocab};
use cll_core::training::{Adam, HyperParams, Trainer};
use cll_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::blob_hash;

pub const MAGIC: &[u8; 8] = b"CLLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub hyper: HyperParams,
    pub step: usize,
    /// Parameters with Adam moments, in data order.
    pub moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub languages: Vec<String>,
    pub central: Option<String>,
    pub vocab: Vec<(String, TokenKind)>,
    pub tensors: Vec<TensorEntry>,
    pub trainer: Option<TrainerState>,
    pub provenance: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TransformerModel<f32>,
    pub trainer: Option<Trainer>,
    pub provenance: serde_json::Value,
}

fn push_f32(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model and optional trainer state.
pub fn encode(model: &TransformerModel<f32>, trainer: Option<&Trainer>, provenance: &serde_json::Value) -> Result<Vec<u8>> {
    let params = model.params();
    let tensors = params
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let mut moments = Vec::new();
    let mut moment_data: Vec<(&Tensor<f32>, &Tensor<f32>)> = Vec::new();
    if let Some(tr) = trainer {
        for id in params.ids() {
            let i = id.index();
            if let (Some(Some(m)), Some(Some(v))) = (tr.adam.m.get(i), tr.adam.v.get(i)) {
                moments.push(MomentEntry {
                    name: params.name(id).into(),
                    steps: tr.adam.steps[i],
                });
                moment_data.push((m, v));
            }
        }
    }
    let header = Header {
        config: model.config().clone(),
        languages: model.languages().languages().to_vec(),
        central: model.languages().central().map(str::to_string),
        vocab: model.vocab().entries().map(|(t, k)| (t.to_string(), k.clone())).collect(),
        tensors,
        trainer: trainer.map(|tr| TrainerState {
            hyper: tr.hyper.clone(),
            step: tr.step,
            moments,
        }),
        provenance: provenance.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        push_f32(&mut out, t.data());
    }
    for (m, v) in moment_data {
        push_f32(&mut out, m.data());
        push_f32(&mut out, v.data());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: format!("truncated at byte {}", self.at),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn f32s(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut cur = Cursor { bytes, at: 0, path };
    if cur.take(8)? != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| fail("header too large".into()))?;
    let header: Header = serde_json::from_slice(cur.take(len)?)?;

    let mut store = ParamStore::new();
    for t in &header.tensors {
        let tensor = cur.f32s(&t.shape)?;
        store.insert(t.name.clone(), tensor)?;
    }
    let languages = LanguageSet::new(header.languages.clone(), header.central.clone())?;
    let vocab = Vocab::from_entries(header.vocab.clone())?;
    let model = TransformerModel::from_parts(header.config.clone(), languages, vocab, store)?;
    for id in model.params().ids() {
        let name = model.params().name(id);
        let stored = header.tensors.iter().find(|t| t.name == name).expect("from_parts checked names");
        if stored.shape != model.params().get(id).shape() {
            return Err(fail(format!("tensor `{name}` has shape {:?}", stored.shape)));
        }
    }

    let trainer = match &header.trainer {
        None => None,
        Some(state) => {
            let mut adam = Adam::new(model.params().len());
            for entry in &state.moments {
                let id = model
                    .params()
                    .id(&entry.name)
                    .ok_or_else(|| fail(format!("optimizer state for unknown tensor `{}`", entry.name)))?;
                let shape = model.params().get(id).shape().to_vec();
                adam.m[id.index()] = Some(cur.f32s(&shape)?);
                adam.v[id.index()] = Some(cur.f32s(&shape)?);
                adam.steps[id.index()] = entry.steps;
            }
            Some(Trainer {
                hyper: state.hyper.clone(),
                adam,
                step: state.step,
            })
        }
    };
    if cur.at != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - cur.at)));
    }
    Ok(Checkpoint {
        model,
        trainer,
        provenance: header.provenance,
    })
}

/// Writes the checkpoint and returns its content hash.
pub fn save_checkpoint(
    path: &Path,
    model: &TransformerModel<f32>,
    trainer: Option<&Trainer>,
    provenance: &serde_json::Value,
) -> Result<String> {
    let bytes = encode(model, trainer, provenance)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(blob_hash(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads only the JSON header.
pub fn read_header(path: &Path) -> Result<Header> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut fixed = [0u8; 20];
    f.read_exact(&mut fixed).map_err(|e| Error::io(path, e))?;
    if &fixed[..8] != MAGIC {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let len = u64::from_le_bytes(fixed[12..20].try_into().expect("8 bytes")) as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&json)?)
}
