//! The subword encoder: token ids → shared embedding table → optional
//! single-head self-attention → token-major flatten → shared linear map.
//!
//! All inputs are batched: `n` sequences of exactly `max_len` ids produce an
//! `[n, dim]` matrix. One encoder instance serves entities and relations
//! alike, so the trainable parameter count depends only on the tokenizer
//! vocabulary, `dim` and `max_len`.

use rand::{Rng, RngCore};

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::TokenId;

pub const SUBWORD_TABLE: &str = "subword_embeddings";
pub const PROJECTION_WEIGHT: &str = "projection.weight";
pub const PROJECTION_BIAS: &str = "projection.bias";
pub const ATTENTION_QUERY: &str = "attention.query";
pub const ATTENTION_KEY: &str = "attention.key";
pub const ATTENTION_VALUE: &str = "attention.value";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ByteEncoder {
    pub table: ParamId,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub attention: Option<AttentionParams>,
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
}

/// Uniform samples on `[-1/√d, 1/√d]`.
pub fn uniform_init(rng: &mut dyn RngCore, shape: &[usize], dim: usize) -> Tensor {
    let bound = 1.0 / (dim as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl ByteEncoder {
    /// Registers fresh parameters in `params`.
    pub fn init(
        params: &mut ParameterStore,
        rng: &mut dyn RngCore,
        vocab_size: usize,
        dim: usize,
        max_len: usize,
        attention: bool,
        bias: bool,
    ) -> Self {
        let table = params.add(SUBWORD_TABLE, uniform_init(rng, &[vocab_size, dim], dim));
        let weight = params.add(
            PROJECTION_WEIGHT,
            uniform_init(rng, &[dim, max_len * dim], dim),
        );
        let bias = bias.then(|| params.add(PROJECTION_BIAS, Tensor::zeros(&[dim])));
        let attention = attention.then(|| AttentionParams {
            query: params.add(ATTENTION_QUERY, uniform_init(rng, &[dim, dim], dim)),
            key: params.add(ATTENTION_KEY, uniform_init(rng, &[dim, dim], dim)),
            value: params.add(ATTENTION_VALUE, uniform_init(rng, &[dim, dim], dim)),
        });
        Self {
            table,
            weight,
            bias,
            attention,
            vocab_size,
            dim,
            max_len,
        }
    }

    /// Re-binds an encoder to parameters already present in `params`
    /// (e.g. after loading a checkpoint).
    pub fn from_params(params: &ParameterStore, max_len: usize) -> Result<Self> {
        let need = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let table = need(SUBWORD_TABLE)?;
        let weight = need(PROJECTION_WEIGHT)?;
        let shape = params.get(table).shape().to_vec();
        let [vocab_size, dim] = shape[..] else {
            return Err(Error::Checkpoint(format!("bad subword table shape {shape:?}")));
        };
        if params.get(weight).shape() != [dim, max_len * dim] {
            return Err(shape_err(
                "projection weight",
                params.get(weight).shape(),
                &[dim, max_len * dim],
            ));
        }
        let attention = match params.id(ATTENTION_QUERY) {
            Some(query) => Some(AttentionParams {
                query,
                key: need(ATTENTION_KEY)?,
                value: need(ATTENTION_VALUE)?,
            }),
            None => None,
        };
        Ok(Self {
            table,
            weight,
            bias: params.id(PROJECTION_BIAS),
            attention,
            vocab_size,
            dim,
            max_len,
        })
    }

    /// Trainable scalars owned by the encoder.
    pub fn num_parameters(&self) -> usize {
        let d = self.dim;
        self.vocab_size * d
            + d * self.max_len * d
            + if self.bias.is_some() { d } else { 0 }
            + if self.attention.is_some() { 3 * d * d } else { 0 }
    }

    /// `[n, m, d]` lookup of every id of every sequence.
    pub fn embed_tokens(&self, tape: &mut Tape<'_>, seqs: &[Vec<TokenId>]) -> Result<Var> {
        let mut ids = Vec::with_capacity(seqs.len() * self.max_len);
        for s in seqs {
            if s.len() != self.max_len {
                return Err(shape_err("embed_tokens", &[self.max_len], &[s.len()]));
            }
            for &id in s {
                if id as usize >= self.vocab_size {
                    return Err(Error::OutOfRange {
                        what: "subword table",
                        index: id as usize,
                        size: self.vocab_size,
                    });
                }
                ids.push(id as usize);
            }
        }
        let table = tape.param(self.table)?;
        let rows = tape.gather(table, &ids)?;
        tape.reshape(rows, &[seqs.len(), self.max_len, self.dim])
    }

    /// `softmax((x Wq)(x Wk)ᵀ / √d) (x Wv)` per sequence, no masking.
    pub fn attend(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let att = self
            .attention
            .ok_or_else(|| Error::Contract("attention is disabled for this encoder".into()))?;
        let shape = tape.shape(x).to_vec();
        let [n, m, d] = shape[..] else {
            return Err(shape_err("attend", &shape, &[self.max_len, self.dim]));
        };
        let flat = tape.reshape(x, &[n * m, d])?;
        let mut proj = |id: ParamId| -> Result<Var> {
            let w = tape.param(id)?;
            let y = tape.matmul(flat, w)?;
            tape.reshape(y, &[n, m, d])
        };
        let (q, k, v) = (proj(att.query)?, proj(att.key)?, proj(att.value)?);
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = tape.softmax_rows(scores)?;
        tape.batch_matmul(weights, v, false)
    }

    /// Flattens each `[m, d]` block token-major and applies `W v + b`.
    pub fn project(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.max_len || shape[2] != self.dim {
            return Err(shape_err("project", &shape, &[self.max_len, self.dim]));
        }
        let flat = tape.reshape(x, &[shape[0], self.max_len * self.dim])?;
        let w = tape.param(self.weight)?;
        let out = tape.matmul_nt(flat, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b)?;
                tape.add_row(out, b)
            }
            None => Ok(out),
        }
    }

    /// Full pipeline for a batch of padded sequences. With `dropout`, each
    /// token-embedding entry is zeroed with probability `rate` and the rest
    /// rescaled by `1/(1-rate)`.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        seqs: &[Vec<TokenId>],
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        let mut x = self.embed_tokens(tape, seqs)?;
        if let Some((rate, rng)) = dropout {
            x = apply_dropout(tape, x, rate, rng)?;
        }
        if self.attention.is_some() {
            x = self.attend(tape, x)?;
        }
        self.project(tape, x)
    }
}

/// Inverted dropout with a constant mask recorded on the tape.
pub fn apply_dropout(tape: &mut Tape<'_>, x: Var, rate: f64, rng: &mut dyn RngCore) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(Error::Config(format!("dropout rate {rate} must be below 1")));
    }
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(rate) { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, mask)
}
