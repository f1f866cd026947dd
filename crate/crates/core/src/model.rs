//! A scorer plus one of two representations: per-symbol lookup tables
//! ("plain") or the shared subword encoder ("byte mode").

use std::collections::HashMap;
use std::sync::Arc;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{apply_dropout, uniform_init, ByteEncoder};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::params::{ParamId, ParameterStore};
use crate::scorer::{Family, ScorerConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{encode_padded, max_seq_len, BpeVocab, TokenId, TokenizerConfig, DEFAULT_PAD_TOKEN};

pub const ENTITY_TABLE: &str = "entity_embeddings";
pub const RELATION_TABLE: &str = "relation_embeddings";

/// Byte-mode options.
#[derive(Debug, Clone)]
pub struct ByteSpec {
    pub vocab: Arc<BpeVocab>,
    /// `None` picks the longest encoding in the graph.
    pub max_len: Option<usize>,
    pub pad_token: String,
    pub attention: bool,
    pub bias: bool,
}

impl ByteSpec {
    pub fn new(vocab: Arc<BpeVocab>) -> Self {
        Self {
            vocab,
            max_len: None,
            pad_token: DEFAULT_PAD_TOKEN.to_string(),
            attention: false,
            bias: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub family: Family,
    pub dim: usize,
    pub p: usize,
    pub q: usize,
    pub byte: Option<ByteSpec>,
    pub normalize: bool,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(family: Family, dim: usize) -> Self {
        let (p, q) = default_pq(family);
        Self {
            family,
            dim,
            p,
            q,
            byte: None,
            normalize: false,
            dropout: 0.0,
        }
    }
}

/// `(p, q)` used when the caller does not set them. Keci with `(0, 1)`
/// starts from the complex-number algebra.
pub fn default_pq(family: Family) -> (usize, usize) {
    match family {
        Family::Keci => (0, 1),
        _ => (0, 0),
    }
}

#[derive(Debug, Clone)]
pub struct ByteRepr {
    pub encoder: ByteEncoder,
    pub vocab: Arc<BpeVocab>,
    pub tokenizer: TokenizerConfig,
    entity_tokens: Vec<Vec<TokenId>>,
    relation_tokens: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone)]
pub enum Representation {
    Lookup { entity: ParamId, relation: ParamId },
    Byte(Box<ByteRepr>),
}

/// Which vocabulary a raw string belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Entity,
    Relation,
}

impl TermKind {
    fn name(self) -> &'static str {
        match self {
            TermKind::Entity => "entity",
            TermKind::Relation => "relation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub scorer: ScorerConfig,
    pub params: ParameterStore,
    pub repr: Representation,
    pub normalize: bool,
    pub dropout: f64,
    entities: Vec<String>,
    relations: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
}

impl Model {
    /// Fresh parameters for every entity and relation of `g`.
    pub fn new(spec: &ModelSpec, g: &KnowledgeGraph, rng: &mut dyn RngCore) -> Result<Self> {
        let scorer = ScorerConfig::new(spec.family, spec.dim, spec.p, spec.q)?;
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", spec.dropout)));
        }
        let d = spec.dim;
        let mut params = ParameterStore::new();
        let byte = match &spec.byte {
            None => None,
            Some(b) => {
                let max_len = match b.max_len {
                    Some(0) => return Err(Error::Config("max_len must be at least 1".into())),
                    Some(m) => m,
                    None => max_seq_len(g, &b.vocab),
                };
                let tok = TokenizerConfig::new(&b.vocab, max_len, &b.pad_token)?;
                let enc = ByteEncoder::init(
                    &mut params,
                    rng,
                    b.vocab.vocab_size(),
                    d,
                    max_len,
                    b.attention,
                    b.bias,
                );
                Some((enc, b.vocab.clone(), tok))
            }
        };
        if byte.is_none() {
            params.add(ENTITY_TABLE, uniform_init(rng, &[g.num_entities(), d], d));
            params.add(RELATION_TABLE, uniform_init(rng, &[g.num_relations(), d], d));
        }
        Self::assemble(
            scorer,
            params,
            byte,
            g.entities().to_vec(),
            g.relations().to_vec(),
            spec.normalize,
            spec.dropout,
        )
    }

    /// Binds existing parameters (e.g. from a checkpoint) to a vocabulary.
    pub fn assemble(
        scorer: ScorerConfig,
        params: ParameterStore,
        byte: Option<(ByteEncoder, Arc<BpeVocab>, TokenizerConfig)>,
        entities: Vec<String>,
        relations: Vec<String>,
        normalize: bool,
        dropout: f64,
    ) -> Result<Self> {
        let index = |names: &[String]| -> HashMap<String, usize> {
            names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
        };
        let repr = match byte {
            Some((encoder, vocab, tokenizer)) => {
                if encoder.dim != scorer.dim || encoder.max_len != tokenizer.max_len {
                    return Err(Error::Config("encoder does not match scorer/tokenizer".into()));
                }
                let enc = |names: &[String]| -> Vec<Vec<TokenId>> {
                    names.iter().map(|s| encode_padded(s, &tokenizer, &vocab)).collect()
                };
                Representation::Byte(Box::new(ByteRepr {
                    entity_tokens: enc(&entities),
                    relation_tokens: enc(&relations),
                    encoder,
                    vocab,
                    tokenizer,
                }))
            }
            None => {
                let need = |name: &str, rows: usize| -> Result<ParamId> {
                    let id = params
                        .id(name)
                        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
                    if params.get(id).shape() != [rows, scorer.dim] {
                        return Err(Error::Config(format!(
                            "{name} has shape {:?}, expected [{rows}, {}]",
                            params.get(id).shape(),
                            scorer.dim
                        )));
                    }
                    Ok(id)
                };
                Representation::Lookup {
                    entity: need(ENTITY_TABLE, entities.len())?,
                    relation: need(RELATION_TABLE, relations.len())?,
                }
            }
        };
        Ok(Self {
            scorer,
            params,
            repr,
            normalize,
            dropout,
            entity_index: index(&entities),
            relation_index: index(&relations),
            entities,
            relations,
        })
    }

    pub fn dim(&self) -> usize {
        self.scorer.dim
    }

    pub fn is_byte(&self) -> bool {
        matches!(self.repr, Representation::Byte(_))
    }

    pub fn byte_repr(&self) -> Option<&ByteRepr> {
        match &self.repr {
            Representation::Byte(b) => Some(b),
            Representation::Lookup { .. } => None,
        }
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// All entity and relation embeddings on the tape. Dropout (when
    /// `rng` is given) hits the token embeddings in byte mode and the
    /// looked-up rows otherwise.
    fn tables(&self, tape: &mut Tape<'_>, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Var, Var)> {
        match &self.repr {
            Representation::Lookup { entity, relation } => {
                Ok((tape.param(*entity)?, tape.param(*relation)?))
            }
            Representation::Byte(b) => {
                let drop = rng.as_deref_mut().map(|r| (self.dropout, r as &mut dyn RngCore));
                let e = b.encoder.encode(tape, &b.entity_tokens, drop)?;
                let drop = rng.map(|r| (self.dropout, r as &mut dyn RngCore));
                let r = b.encoder.encode(tape, &b.relation_tokens, drop)?;
                Ok((e, r))
            }
        }
    }

    /// Gathers and (optionally) normalizes head and relation rows, then
    /// composes them into query vectors `[n, d]`.
    fn queries(
        &self,
        tape: &mut Tape<'_>,
        ent: Var,
        rel: Var,
        pairs: &[(usize, usize)],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let rels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let mut h = tape.gather(ent, &heads)?;
        let mut r = tape.gather(rel, &rels)?;
        if let (false, Some(rng)) = (self.is_byte(), rng) {
            h = apply_dropout(tape, h, self.dropout, rng)?;
            r = apply_dropout(tape, r, self.dropout, rng)?;
        }
        if self.normalize {
            h = tape.normalize_rows(h)?;
            r = tape.normalize_rows(r)?;
        }
        self.scorer.compose_tape(tape, h, r)
    }

    fn check_pairs(&self, pairs: &[(usize, usize)]) -> Result<()> {
        for &(h, r) in pairs {
            if h >= self.entities.len() {
                return Err(Error::OutOfRange { what: "entity", index: h, size: self.entities.len() });
            }
            if r >= self.relations.len() {
                return Err(Error::OutOfRange { what: "relation", index: r, size: self.relations.len() });
            }
        }
        Ok(())
    }

    /// Logits `[B, |E|]` of every `(h, r)` pair against all entities.
    pub fn forward_all_tails(
        &self,
        tape: &mut Tape<'_>,
        pairs: &[(usize, usize)],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_pairs(pairs)?;
        let (ent, rel) = self.tables(tape, rng.as_deref_mut())?;
        let q = self.queries(tape, ent, rel, pairs, rng)?;
        tape.matmul_nt(q, ent)
    }

    /// Logits `[n]` of individual triples.
    pub fn forward_triples(
        &self,
        tape: &mut Tape<'_>,
        triples: &[Triple],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let pairs: Vec<(usize, usize)> = triples.iter().map(|t| (t.head, t.relation)).collect();
        self.check_pairs(&pairs)?;
        let tails: Vec<usize> = triples.iter().map(|t| t.tail).collect();
        if let Some(&bad) = tails.iter().find(|&&t| t >= self.entities.len()) {
            return Err(Error::OutOfRange { what: "entity", index: bad, size: self.entities.len() });
        }
        let (ent, rel) = self.tables(tape, rng.as_deref_mut())?;
        let q = self.queries(tape, ent, rel, &pairs, rng)?;
        let t = tape.gather(ent, &tails)?;
        let prod = tape.mul(q, t)?;
        tape.sum_rows(prod)
    }

    /// Current entity and relation embedding matrices (no dropout).
    pub fn embeddings(&self) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::with_params(&self.params);
        let (e, r) = self.tables(&mut tape, None)?;
        Ok((tape.value(e).clone(), tape.value(r).clone()))
    }

    /// Query vector for a head and relation embedding, applying the same
    /// normalization as training.
    pub fn query(&self, h: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        if self.normalize {
            self.scorer.compose(&unit(h), &unit(r))
        } else {
            self.scorer.compose(h, r)
        }
    }

    /// Embedding of an arbitrary string. Byte mode accepts anything; plain
    /// mode only knows its training vocabulary.
    pub fn embed_term(&self, term: &str, kind: TermKind) -> Result<Vec<f64>> {
        match &self.repr {
            Representation::Lookup { entity, relation } => {
                let (index, table) = match kind {
                    TermKind::Entity => (&self.entity_index, *entity),
                    TermKind::Relation => (&self.relation_index, *relation),
                };
                let row = index.get(term).ok_or_else(|| Error::UnknownTerm {
                    kind: kind.name(),
                    term: term.to_string(),
                })?;
                Ok(self.params.get(table).row(*row).to_vec())
            }
            Representation::Byte(b) => {
                let ids = encode_padded(term, &b.tokenizer, &b.vocab);
                let mut tape = Tape::with_params(&self.params);
                let v = b.encoder.encode(&mut tape, &[ids], None)?;
                Ok(tape.value(v).data().to_vec())
            }
        }
    }

    /// Token ids the encoder sees for `term` (byte mode only).
    pub fn term_tokens(&self, term: &str) -> Option<Vec<TokenId>> {
        self.byte_repr()
            .map(|b| encode_padded(term, &b.tokenizer, &b.vocab))
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> KnowledgeGraph {
        KnowledgeGraph::from_string_triples([
            (Split::Train, &[("a", "r", "b"), ("b", "r", "c")][..]),
            (Split::Valid, &[("a", "r", "c")][..]),
            (Split::Test, &[("c", "r", "a")][..]),
        ])
        .add_reciprocals()
        .unwrap()
    }

    #[test]
    fn all_tails_agree_with_triples() {
        let g = toy();
        for byte in [false, true] {
            let mut spec = ModelSpec::new(Family::ComplEx, 4);
            spec.normalize = byte;
            if byte {
                spec.byte = Some(ByteSpec::new(Arc::new(BpeVocab::byte_level())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let model = Model::new(&spec, &g, &mut rng).unwrap();
            let mut tape = Tape::with_params(&model.params);
            let all = model.forward_all_tails(&mut tape, &[(0, 1)], None).unwrap();
            let all = tape.value(all).clone();
            let triples: Vec<Triple> = (0..3).map(|t| Triple::new(0, 1, t)).collect();
            let each = model.forward_triples(&mut tape, &triples, None).unwrap();
            let (e, r) = model.embeddings().unwrap();
            let q = model.query(e.row(0), r.row(1)).unwrap();
            for t in 0..3 {
                let direct: f64 = q.iter().zip(e.row(t)).map(|(a, b)| a * b).sum();
                assert!((all.data()[t] - direct).abs() < 1e-12);
                assert!((tape.value(each).data()[t] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn plain_mode_rejects_unknown_terms() {
        let g = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(&ModelSpec::new(Family::DistMult, 4), &g, &mut rng).unwrap();
        assert!(model.embed_term("a", TermKind::Entity).is_ok());
        match model.embed_term("located", TermKind::Relation) {
            Err(Error::UnknownTerm { term, .. }) => assert_eq!(term, "located"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn byte_mode_embeds_anything() {
        let g = toy();
        let mut spec = ModelSpec::new(Family::Keci, 4);
        spec.byte = Some(ByteSpec::new(Arc::new(BpeVocab::byte_level())));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(&spec, &g, &mut rng).unwrap();
        let v = model.embed_term("never seen ∆", TermKind::Entity).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|x| x.is_finite()));
        let (e, _) = model.embeddings().unwrap();
        assert_eq!(model.embed_term("b", TermKind::Entity).unwrap(), e.row(1));
    }
}
