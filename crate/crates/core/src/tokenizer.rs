//! Byte-level byte-pair encoding in the GPT-2 style.
//!
//! Every byte is first mapped to a printable character through a fixed
//! bijection, the text is split with GPT-2's pre-tokenization pattern, and
//! each piece is merged greedily by merge rank. Because every byte has a
//! base token, any input can be encoded.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

pub type TokenId = u32;

const PRETOKENIZE: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

pub const DEFAULT_PAD_TOKEN: &str = "\t";

/// GPT-2's byte → character table: printable Latin-1 bytes map to
/// themselves, the rest are shifted past U+0100.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0;
    for b in 0..256u32 {
        let c = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

#[derive(Debug, Clone)]
pub struct BpeVocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pretokenizer: Regex,
}

impl BpeVocab {
    /// Builds a vocabulary from an id table and ranked merges, checking the
    /// invariants (dense ids, every byte representable, every merge result
    /// present).
    pub fn from_parts(
        token_to_id: HashMap<String, TokenId>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let n = token_to_id.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| {
                Error::Config(format!("token {tok:?} has id {id} outside 0..{n}"))
            })?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Config(format!("id {id} assigned twice")));
            }
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();
        let byte_encoder = bytes_to_unicode();
        for c in byte_encoder {
            if !token_to_id.contains_key(c.encode_utf8(&mut [0; 4]) as &str) {
                return Err(Error::Config(format!("base byte token {c:?} missing")));
            }
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let joined = format!("{a}{b}");
            if !token_to_id.contains_key(&joined) {
                return Err(Error::Config(format!(
                    "merge #{rank} ({a} {b}) produces unknown token {joined:?}"
                )));
            }
            merge_ranks.entry((a.clone(), b.clone())).or_insert(rank);
        }
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            merges,
            merge_ranks,
            byte_encoder,
            byte_decoder,
            pretokenizer: Regex::new(PRETOKENIZE).expect("static pattern"),
        })
    }

    /// Reads a `vocab.json` (token → id) and a `merges.txt` (one
    /// space-separated pair per line, optional `#` header).
    pub fn load(vocab_file: &Path, merges_file: &Path) -> Result<Self> {
        let load_err = |path: &Path, msg: String| Error::Load {
            path: path.to_path_buf(),
            msg,
        };
        let raw = fs::read_to_string(vocab_file).map_err(|e| load_err(vocab_file, e.to_string()))?;
        let json: HashMap<String, serde_json::Value> =
            serde_json::from_str(&raw).map_err(|e| load_err(vocab_file, e.to_string()))?;
        let mut token_to_id = HashMap::with_capacity(json.len());
        for (tok, v) in json {
            let id = v
                .as_u64()
                .and_then(|x| TokenId::try_from(x).ok())
                .ok_or_else(|| load_err(vocab_file, format!("key {tok:?}: id {v} is not a token id")))?;
            token_to_id.insert(tok, id);
        }

        let text = fs::read_to_string(merges_file).map_err(|e| load_err(merges_file, e.to_string()))?;
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if (i == 0 && line.starts_with('#')) || line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    path: merges_file.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected two space-separated tokens, got {line:?}"),
                });
            };
            let joined = format!("{a}{b}");
            if !token_to_id.contains_key(&joined) {
                return Err(Error::Parse {
                    path: merges_file.to_path_buf(),
                    line: i + 1,
                    msg: format!("merged token {joined:?} not in vocabulary"),
                });
            }
            merges.push((a.to_string(), b.to_string()));
        }
        Self::from_parts(token_to_id, merges).map_err(|e| load_err(vocab_file, e.to_string()))
    }

    /// The 256 single-byte tokens and nothing else.
    pub fn byte_level() -> Self {
        let enc = bytes_to_unicode();
        let token_to_id = (0..256)
            .map(|b| (enc[b].to_string(), b as TokenId))
            .collect();
        Self::from_parts(token_to_id, Vec::new()).expect("byte vocabulary is valid")
    }

    /// Learns merges from `corpus` until `target_size` tokens exist or no
    /// adjacent pair occurs more than once. Ties go to the
    /// lexicographically smallest pair.
    pub fn train(corpus: &[&str], target_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Training("empty tokenizer corpus".into()));
        }
        if target_size < 256 {
            return Err(Error::Config(format!(
                "target vocabulary size {target_size} is below the 256 byte tokens"
            )));
        }
        let base = Self::byte_level();
        let mut word_freq: HashMap<Vec<String>, usize> = HashMap::new();
        for text in corpus {
            for piece in base.pretokenize(text.as_bytes()) {
                let symbols = piece
                    .iter()
                    .map(|&b| base.byte_encoder[b as usize].to_string())
                    .collect();
                *word_freq.entry(symbols).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = word_freq.into_iter().collect();
        words.sort();

        let mut token_to_id = base.token_to_id.clone();
        let mut merges = Vec::new();
        while token_to_id.len() < target_size {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (w, f) in &words {
                for pair in w.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += f;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((a, b), _)) = best else { break };
            let (a, b) = (a.to_string(), b.to_string());
            let joined = format!("{a}{b}");
            for (w, _) in &mut words {
                merge_word(w, &a, &b, &joined);
            }
            let next = token_to_id.len() as TokenId;
            token_to_id.entry(joined).or_insert(next);
            merges.push((a, b));
        }
        Self::from_parts(token_to_id, merges)
    }

    /// Writes `vocab.json` and `merges.txt` readable by [`BpeVocab::load`].
    pub fn save(&self, vocab_file: &Path, merges_file: &Path) -> Result<()> {
        let map: serde_json::Map<String, serde_json::Value> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), serde_json::Value::from(i)))
            .collect();
        fs::write(vocab_file, serde_json::to_string(&map)?)?;
        let mut text = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            text.push_str(a);
            text.push(' ');
            text.push_str(b);
            text.push('\n');
        }
        fs::write(merges_file, text)?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn byte_encoder(&self) -> &[char; 256] {
        &self.byte_encoder
    }

    /// Splits bytes into pre-tokens. Invalid UTF-8 runs become their own
    /// pieces so arbitrary byte strings survive the round trip.
    fn pretokenize<'a>(&self, mut bytes: &'a [u8]) -> Vec<&'a [u8]> {
        let mut out = Vec::new();
        while !bytes.is_empty() {
            let (valid, rest) = match std::str::from_utf8(bytes) {
                Ok(s) => (s, &bytes[bytes.len()..]),
                Err(e) => {
                    let (ok, tail) = bytes.split_at(e.valid_up_to());
                    (std::str::from_utf8(ok).expect("validated prefix"), tail)
                }
            };
            let mut last = 0;
            for m in self.pretokenizer.find_iter(valid) {
                let m = m.expect("pattern has bounded backtracking");
                if m.start() > last {
                    out.push(&valid.as_bytes()[last..m.start()]);
                }
                out.push(&valid.as_bytes()[m.start()..m.end()]);
                last = m.end();
            }
            if last < valid.len() {
                out.push(&valid.as_bytes()[last..]);
            }
            bytes = rest;
            if !bytes.is_empty() {
                let bad = match std::str::from_utf8(bytes) {
                    Err(e) if e.valid_up_to() == 0 => e.error_len().unwrap_or(bytes.len()),
                    _ => 0,
                };
                if bad > 0 {
                    out.push(&bytes[..bad]);
                    bytes = &bytes[bad..];
                }
            }
        }
        out
    }

    fn bpe(&self, piece: &[u8]) -> Vec<String> {
        let mut word: Vec<String> = piece
            .iter()
            .map(|&b| self.byte_encoder[b as usize].to_string())
            .collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|p| {
                    self.merge_ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, p))
                })
                .min_by_key(|&(r, _)| r);
            let Some((_, pair)) = best else { break };
            let (a, b) = (pair[0].clone(), pair[1].clone());
            let joined = format!("{a}{b}");
            merge_word(&mut word, &a, &b, &joined);
        }
        word
    }

    pub fn encode(&self, s: &str) -> Vec<TokenId> {
        self.encode_bytes(s.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        self.pretokenize(bytes)
            .into_iter()
            .flat_map(|piece| self.bpe(piece))
            .map(|tok| self.token_to_id[&tok])
            .collect()
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::OutOfRange {
                what: "vocabulary",
                index: id as usize,
                size: self.vocab_size(),
            })?;
            for c in tok.chars() {
                let b = self.byte_decoder.get(&c).ok_or_else(|| {
                    Error::Contract(format!("token {tok:?} contains non-byte character {c:?}"))
                })?;
                out.push(*b);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| Error::Contract(format!("decoded bytes are not UTF-8: {e}")))
    }
}

fn merge_word(word: &mut Vec<String>, a: &str, b: &str, joined: &str) {
    let mut i = 0;
    let mut out = Vec::with_capacity(word.len());
    while i < word.len() {
        if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
            out.push(joined.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut word[i]));
            i += 1;
        }
    }
    *word = out;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub max_len: usize,
    pub pad_token: String,
    pub pad_id: TokenId,
}

impl TokenizerConfig {
    /// Resolves the pad id by encoding `pad_token` with `vocab`.
    pub fn new(vocab: &BpeVocab, max_len: usize, pad_token: &str) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        match vocab.encode(pad_token).as_slice() {
            [id] => Ok(Self {
                max_len,
                pad_token: pad_token.to_string(),
                pad_id: *id,
            }),
            ids => Err(Error::Config(format!(
                "pad token {pad_token:?} must encode to one id, got {ids:?}"
            ))),
        }
    }
}

/// Truncates or right-pads an encoding to exactly `cfg.max_len` ids.
pub fn encode_padded(s: &str, cfg: &TokenizerConfig, vocab: &BpeVocab) -> Vec<TokenId> {
    let mut ids = vocab.encode(s);
    ids.resize(cfg.max_len, cfg.pad_id);
    ids
}

/// Longest encoding among every entity and relation string (at least 1).
pub fn max_seq_len(graph: &KnowledgeGraph, vocab: &BpeVocab) -> usize {
    graph
        .entities()
        .iter()
        .chain(graph.relations())
        .map(|s| vocab.encode(s).len())
        .max()
        .unwrap_or(1)
        .max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_table_is_bijective() {
        let t = bytes_to_unicode();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b'A' as usize], 'A');
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'\t' as usize], 'ĉ');
    }

    #[test]
    fn no_merges_gives_raw_bytes() {
        let v = BpeVocab::byte_level();
        assert_eq!(v.vocab_size(), 256);
        assert_eq!(v.encode("ab"), vec![b'a' as TokenId, b'b' as TokenId]);
        assert_eq!(v.encode(""), Vec::<TokenId>::new());
    }

    #[test]
    fn first_learned_merge_is_most_frequent() {
        let v = BpeVocab::train(&["aaab", "aaab"], 258).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn train_identity_and_early_stop() {
        let v = BpeVocab::train(&["hello world"], 256).unwrap();
        assert_eq!(v.vocab_size(), 256);
        assert!(v.merges().is_empty());
        let v = BpeVocab::train(&["a"], 300).unwrap();
        assert_eq!(v.vocab_size(), 256);
        assert!(BpeVocab::train(&[], 300).is_err());
        assert!(BpeVocab::train(&["x"], 10).is_err());
    }

    #[test]
    fn train_tie_break_is_lexicographic() {
        // "ab" and "cd" both occur twice; ("a","b") sorts first.
        let v = BpeVocab::train(&["cd ab", "ab cd"], 257).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn trained_vocab_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let v = BpeVocab::train(&["western_europe", "eastern_europe", "europe"], 280).unwrap();
        let (vf, mf) = (dir.path().join("vocab.json"), dir.path().join("merges.txt"));
        v.save(&vf, &mf).unwrap();
        let back = BpeVocab::load(&vf, &mf).unwrap();
        assert_eq!(back.vocab_size(), v.vocab_size());
        for s in ["western_europe", "europe", "unseen thing"] {
            assert_eq!(back.encode(s), v.encode(s));
        }
        assert!(v.encode("europe").len() < "europe".len());
    }

    #[test]
    fn load_rejects_unknown_merge() {
        let dir = tempfile::tempdir().unwrap();
        let v = BpeVocab::byte_level();
        let (vf, mf) = (dir.path().join("vocab.json"), dir.path().join("merges.txt"));
        v.save(&vf, &mf).unwrap();
        fs::write(&mf, "#version: 0.2\nĠ unknowntoken\n").unwrap();
        match BpeVocab::load(&vf, &mf) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(BpeVocab::load(&dir.path().join("missing.json"), &mf).is_err());
        fs::write(&vf, "{not json").unwrap();
        assert!(matches!(BpeVocab::load(&vf, &mf), Err(Error::Load { .. })));
    }

    #[test]
    fn padding_and_truncation() {
        let v = BpeVocab::byte_level();
        let cfg = TokenizerConfig::new(&v, 3, DEFAULT_PAD_TOKEN).unwrap();
        assert_eq!(cfg.pad_id, b'\t' as TokenId);
        assert_eq!(encode_padded("a", &cfg, &v), vec![97, 9, 9]);
        assert_eq!(encode_padded("abcd", &cfg, &v), vec![97, 98, 99]);
        assert!(TokenizerConfig::new(&v, 0, DEFAULT_PAD_TOKEN).is_err());
        assert!(TokenizerConfig::new(&v, 2, "ab").is_err());
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = BpeVocab::byte_level();
        assert!(matches!(v.decode(&[256]), Err(Error::OutOfRange { .. })));
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    proptest! {
        #[test]
        fn bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let v = BpeVocab::train(&["the quick brown fox", "jumps over the lazy dog"], 300).unwrap();
            let ids = v.encode_bytes(&bytes);
            prop_assert!(ids.iter().all(|&i| (i as usize) < v.vocab_size()));
            prop_assert_eq!(v.decode_bytes(&ids).unwrap(), bytes);
        }

        #[test]
        fn padded_length_is_exact(s in ".{0,40}", m in 1usize..12) {
            let v = BpeVocab::byte_level();
            let cfg = TokenizerConfig::new(&v, m, DEFAULT_PAD_TOKEN).unwrap();
            prop_assert_eq!(encode_padded(&s, &cfg, &v).len(), m);
        }
    }
}
