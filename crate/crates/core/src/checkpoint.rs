//! Binary checkpoint: an 8-byte little-endian header length, a JSON header,
//! then every parameter as little-endian f64 in header order.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::ByteEncoder;
use crate::error::{Error, Result};
use crate::model::{Model, Representation};
use crate::params::ParameterStore;
use crate::scorer::{Family, ScorerConfig};
use crate::tensor::Tensor;
use crate::tokenizer::{BpeVocab, TokenizerConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const FLATTEN_ORDER: &str = "token-major";

/// Tokenizer files a byte-mode checkpoint depends on. File names are
/// resolved next to the checkpoint unless the caller supplies paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerRef {
    pub vocab_file: String,
    pub merges_file: String,
    pub vocab_sha256: String,
    pub merges_sha256: String,
}

impl TokenizerRef {
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let name = |p: &Path| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| Error::Config(format!("{} has no file name", p.display())))
        };
        Ok(Self {
            vocab_file: name(vocab)?,
            merges_file: name(merges)?,
            vocab_sha256: sha256_file(vocab)?,
            merges_sha256: sha256_file(merges)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub family: Family,
    pub dim: usize,
    pub p: usize,
    pub q: usize,
    pub byte_mode: bool,
    pub max_len: Option<usize>,
    pub pad_token: Option<String>,
    pub pad_id: Option<u32>,
    pub attention: bool,
    pub bias: bool,
    pub normalize: bool,
    pub dropout: f64,
    pub flatten_order: String,
    pub tokenizer: Option<TokenizerRef>,
    pub seed: u64,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub blobs: Vec<BlobMeta>,
}

impl Header {
    pub fn describe(model: &Model, seed: u64, tokenizer: Option<TokenizerRef>) -> Result<Self> {
        let byte = model.byte_repr();
        if byte.is_some() != tokenizer.is_some() {
            return Err(Error::Checkpoint(
                "byte-mode checkpoints need tokenizer files (and plain ones none)".into(),
            ));
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            family: model.scorer.family,
            dim: model.scorer.dim,
            p: model.scorer.p,
            q: model.scorer.q,
            byte_mode: byte.is_some(),
            max_len: byte.map(|b| b.tokenizer.max_len),
            pad_token: byte.map(|b| b.tokenizer.pad_token.clone()),
            pad_id: byte.map(|b| b.tokenizer.pad_id),
            attention: byte.is_some_and(|b| b.encoder.attention.is_some()),
            bias: byte.is_some_and(|b| b.encoder.bias.is_some()),
            normalize: model.normalize,
            dropout: model.dropout,
            flatten_order: FLATTEN_ORDER.to_string(),
            tokenizer,
            seed,
            entities: model.entities().to_vec(),
            relations: model.relations().to_vec(),
            blobs: model
                .params
                .iter()
                .map(|(name, t)| BlobMeta {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        })
    }
}

pub fn to_bytes(model: &Model, seed: u64, tokenizer: Option<TokenizerRef>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header::describe(model, seed, tokenizer)?)?;
    let mut out = Vec::with_capacity(8 + header.len() + 8 * model.num_parameters());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.params.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, seed: u64, tokenizer: Option<TokenizerRef>) -> Result<()> {
    fs::write(path, to_bytes(model, seed, tokenizer)?)?;
    Ok(())
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), msg.into()))
}

/// Header plus named parameter tensors, without any tokenizer checks.
pub fn read_raw(path: &Path) -> Result<(Header, ParameterStore)> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| corrupt(path, "truncated length prefix"))?;
    let hlen = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| corrupt(path, "header length overflows"))?;
    let body = bytes
        .get(8..8usize.saturating_add(hlen))
        .filter(|b| b.len() == hlen)
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {}", header.format_version)));
    }
    if header.flatten_order != FLATTEN_ORDER {
        return Err(corrupt(path, format!("unknown flatten order {:?}", header.flatten_order)));
    }
    let mut blobs = &bytes[8 + hlen..];
    let mut params = ParameterStore::new();
    for meta in &header.blobs {
        let n: usize = meta.shape.iter().product();
        if blobs.len() < 8 * n {
            return Err(corrupt(path, format!("blob {} is truncated", meta.name)));
        }
        let (head, rest) = blobs.split_at(8 * n);
        let data = head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if params.id(&meta.name).is_some() {
            return Err(corrupt(path, format!("duplicate blob {}", meta.name)));
        }
        params.add(meta.name.clone(), Tensor::new(&meta.shape, data)?);
        blobs = rest;
    }
    if !blobs.is_empty() {
        return Err(corrupt(path, format!("{} trailing bytes after the last blob", blobs.len())));
    }
    Ok((header, params))
}

/// Restores a model. Byte-mode checkpoints look for their tokenizer files
/// in `tokenizer_files` or next to the checkpoint, and refuse files whose
/// hashes differ from the recorded ones.
pub fn load(path: &Path, tokenizer_files: Option<(&Path, &Path)>) -> Result<(Model, Header)> {
    let (header, params) = read_raw(path)?;
    let scorer = ScorerConfig::new(header.family, header.dim, header.p, header.q)?;
    let byte = if header.byte_mode {
        let tref = header
            .tokenizer
            .as_ref()
            .ok_or_else(|| corrupt(path, "byte-mode header without tokenizer files"))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let (vocab_path, merges_path): (PathBuf, PathBuf) = match tokenizer_files {
            Some((v, m)) => (v.to_path_buf(), m.to_path_buf()),
            None => (dir.join(&tref.vocab_file), dir.join(&tref.merges_file)),
        };
        for (p, want) in [(&vocab_path, &tref.vocab_sha256), (&merges_path, &tref.merges_sha256)] {
            let got = sha256_file(p)?;
            if &got != want {
                return Err(Error::Checkpoint(format!(
                    "tokenizer file {} has sha256 {got}, checkpoint expects {want}",
                    p.display()
                )));
            }
        }
        let vocab = Arc::new(BpeVocab::load(&vocab_path, &merges_path)?);
        let max_len = header.max_len.ok_or_else(|| corrupt(path, "missing max_len"))?;
        let pad_token = header.pad_token.clone().ok_or_else(|| corrupt(path, "missing pad_token"))?;
        let tok = TokenizerConfig::new(&vocab, max_len, &pad_token)?;
        if Some(tok.pad_id) != header.pad_id {
            return Err(corrupt(path, "pad id does not match the tokenizer"));
        }
        let enc = ByteEncoder::from_params(&params, max_len)?;
        if enc.vocab_size != vocab.vocab_size() {
            return Err(corrupt(path, "subword table size differs from the tokenizer vocabulary"));
        }
        Some((enc, vocab, tok))
    } else {
        None
    };
    let model = Model::assemble(
        scorer,
        params,
        byte,
        header.entities.clone(),
        header.relations.clone(),
        header.normalize,
        header.dropout,
    )?;
    if let Representation::Byte(b) = &model.repr {
        if b.encoder.attention.is_some() != header.attention || b.encoder.bias.is_some() != header.bias {
            return Err(corrupt(path, "header flags disagree with stored blobs"));
        }
    }
    Ok((model, header))
}
