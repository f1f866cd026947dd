//! Triple storage, reciprocal augmentation and training targets.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INVERSE_SUFFIX: &str = "_inverse";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// `(head, relation) → sorted tails` over some set of splits.
pub type TailIndex = HashMap<(usize, usize), BTreeSet<usize>>;

#[derive(Debug, Clone, Default)]
struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn intern(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        self.names.push(s.to_string());
        self.index.insert(s.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    augmented: bool,
}

impl KnowledgeGraph {
    /// Reads `train.txt`, `valid.txt` and `test.txt` (tab-separated
    /// `head relation tail`) from `dir`. Vocabularies follow first appearance
    /// across train, valid, test.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut g = Self::default();
        for split in Split::ALL {
            let path = dir.join(format!("{}.txt", split.name()));
            let text = fs::read_to_string(&path).map_err(|e| Error::Load {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            for (i, line) in text.lines().enumerate() {
                let line = line.strip_suffix('\r').unwrap_or(line);
                if line.is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                let [h, r, t] = fields[..] else {
                    return Err(Error::Parse {
                        path: path.clone(),
                        line: i + 1,
                        msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                    });
                };
                g.push_strings(split, h, r, t);
            }
        }
        Ok(g)
    }

    /// Builds a graph from string triples (handy for tests and tooling).
    pub fn from_string_triples<'a>(
        splits: impl IntoIterator<Item = (Split, &'a [(&'a str, &'a str, &'a str)])>,
    ) -> Self {
        let mut g = Self::default();
        for (split, triples) in splits {
            for (h, r, t) in triples {
                g.push_strings(split, h, r, t);
            }
        }
        g
    }

    fn push_strings(&mut self, split: Split, h: &str, r: &str, t: &str) {
        let head = self.entities.intern(h);
        let relation = self.relations.intern(r);
        let tail = self.entities.intern(t);
        self.split_mut(split).push(Triple::new(head, relation, tail));
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Triple> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn entities(&self) -> &[String] {
        &self.entities.names
    }

    pub fn relations(&self) -> &[String] {
        &self.relations.names
    }

    pub fn num_entities(&self) -> usize {
        self.entities.names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.names.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entities.index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.index.get(name).copied()
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Appends `r_inverse` for every relation and `(t, r_inverse, h)` for
    /// every triple of every split. Relation `i + n` is the inverse of `i`.
    pub fn add_reciprocals(mut self) -> Result<Self> {
        if self.augmented {
            return Err(Error::Contract("reciprocal triples already added".into()));
        }
        let n = self.num_relations();
        for i in 0..n {
            let name = format!("{}{INVERSE_SUFFIX}", self.relations.names[i]);
            let id = self.relations.intern(&name);
            if id != i + n {
                return Err(Error::Contract(format!(
                    "relation {name:?} already exists; cannot add inverses"
                )));
            }
        }
        for split in Split::ALL {
            let triples = self.split_mut(split);
            let inverses: Vec<Triple> = triples
                .iter()
                .map(|t| Triple::new(t.tail, t.relation + n, t.head))
                .collect();
            triples.extend(inverses);
        }
        self.augmented = true;
        Ok(self)
    }

    pub fn tail_index(&self, splits: &[Split]) -> TailIndex {
        let mut idx = TailIndex::new();
        for &s in splits {
            for t in self.split(s) {
                idx.entry((t.head, t.relation)).or_default().insert(t.tail);
            }
        }
        idx
    }

    /// Distinct `(head, relation)` pairs of the training split, sorted.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> =
            self.train.iter().map(|t| (t.head, t.relation)).collect();
        set.into_iter().collect()
    }
}

/// Multi-label targets: one row per `(head, relation)` pair, one column per
/// entity.
#[derive(Debug, Clone, PartialEq)]
pub struct KvsAllBatch {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Tensor,
}

/// Rows of 1s at every training tail of each pair.
pub fn kvsall_targets(g: &KnowledgeGraph, index: &TailIndex, pairs: &[(usize, usize)]) -> KvsAllBatch {
    let n = g.num_entities();
    let mut labels = Tensor::zeros(&[pairs.len(), n]);
    let data = labels.data_mut();
    for (row, pair) in pairs.iter().enumerate() {
        if let Some(tails) = index.get(pair) {
            for &t in tails {
                data[row * n + t] = 1.0;
            }
        }
    }
    KvsAllBatch {
        pairs: pairs.to_vec(),
        labels,
    }
}

/// One-hot rows at each triple's gold tail.
pub fn onevsall_targets(g: &KnowledgeGraph, triples: &[Triple]) -> Result<KvsAllBatch> {
    if !g.is_augmented() {
        return Err(Error::Contract(
            "1vsAll targets require reciprocal triples".into(),
        ));
    }
    let n = g.num_entities();
    let mut labels = Tensor::zeros(&[triples.len(), n]);
    let data = labels.data_mut();
    for (row, t) in triples.iter().enumerate() {
        data[row * n + t.tail] = 1.0;
    }
    Ok(KvsAllBatch {
        pairs: triples.iter().map(|t| (t.head, t.relation)).collect(),
        labels,
    })
}

/// Corrupts head or tail (fair coin) with a uniformly drawn different entity.
/// Negatives are not checked against known triples.
pub fn sample_negatives<R: Rng>(
    g: &KnowledgeGraph,
    triple: Triple,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    let n = g.num_entities();
    if n < 2 {
        return Err(Error::Contract("negative sampling needs at least 2 entities".into()));
    }
    if k == 0 {
        return Err(Error::Contract("negative sample count must be at least 1".into()));
    }
    let other = |rng: &mut R, orig: usize| {
        let r = rng.gen_range(0..n - 1);
        if r >= orig {
            r + 1
        } else {
            r
        }
    };
    Ok((0..k)
        .map(|_| {
            if rng.gen_bool(0.5) {
                Triple::new(other(rng, triple.head), triple.relation, triple.tail)
            } else {
                Triple::new(triple.head, triple.relation, other(rng, triple.tail))
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> KnowledgeGraph {
        KnowledgeGraph::from_string_triples([
            (
                Split::Train,
                &[("a", "r", "b"), ("a", "r", "c"), ("b", "s", "c")][..],
            ),
            (Split::Valid, &[("c", "r", "a")][..]),
            (Split::Test, &[("d", "s", "a")][..]),
        ])
    }

    #[test]
    fn vocab_first_appearance() {
        let g = toy();
        assert_eq!(g.entities(), &["a", "b", "c", "d"]);
        assert_eq!(g.relations(), &["r", "s"]);
        assert_eq!(g.split(Split::Train).len(), 3);
    }

    #[test]
    fn reciprocals_double_everything() {
        let g = toy().add_reciprocals().unwrap();
        assert_eq!(g.relations(), &["r", "s", "r_inverse", "s_inverse"]);
        assert_eq!(g.split(Split::Train).len(), 6);
        assert_eq!(g.split(Split::Train)[3], Triple::new(1, 2, 0));
        assert_eq!(g.split(Split::Test).len(), 2);
        assert!(g.add_reciprocals().is_err());
    }

    #[test]
    fn single_triple_inverse() {
        let g = KnowledgeGraph::from_string_triples([(Split::Train, &[("a", "r", "b")][..])])
            .add_reciprocals()
            .unwrap();
        assert_eq!(g.split(Split::Train), &[Triple::new(0, 0, 1), Triple::new(1, 1, 0)]);
    }

    #[test]
    fn kvsall_rows_match_tail_sets() {
        let g = toy().add_reciprocals().unwrap();
        let idx = g.tail_index(&[Split::Train]);
        let pairs = g.train_pairs();
        let batch = kvsall_targets(&g, &idx, &pairs);
        for (row, pair) in pairs.iter().enumerate() {
            let ones: Vec<usize> = batch
                .labels
                .row(row)
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == 1.0)
                .map(|(j, _)| j)
                .collect();
            let expect: Vec<usize> = idx[pair].iter().copied().collect();
            assert_eq!(ones, expect);
        }
        let row = pairs.iter().position(|&p| p == (0, 0)).unwrap();
        assert_eq!(batch.labels.row(row), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn onevsall_is_one_hot_and_below_kvsall() {
        let g = toy().add_reciprocals().unwrap();
        let idx = g.tail_index(&[Split::Train]);
        let triples = g.split(Split::Train).to_vec();
        let one = onevsall_targets(&g, &triples).unwrap();
        let all = kvsall_targets(&g, &idx, &one.pairs);
        for (row, t) in triples.iter().enumerate() {
            let r = one.labels.row(row);
            assert_eq!(r.iter().sum::<f64>(), 1.0);
            assert_eq!(r[t.tail], 1.0);
            assert!(r.iter().zip(all.labels.row(row)).all(|(a, b)| a <= b));
        }
        assert!(onevsall_targets(&toy(), &triples).is_err());
    }

    #[test]
    fn negatives_forced_with_two_entities() {
        let g = KnowledgeGraph::from_string_triples([(Split::Train, &[("a", "r", "b")][..])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Triple::new(0, 0, 1);
        for n in sample_negatives(&g, t, 50, &mut rng).unwrap() {
            assert!(n == Triple::new(1, 0, 1) || n == Triple::new(0, 0, 0));
        }
    }

    #[test]
    fn negatives_deterministic_and_fair() {
        let g = toy();
        let t = Triple::new(0, 0, 1);
        let a = sample_negatives(&g, t, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_negatives(&g, t, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let many = sample_negatives(&g, t, 10_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let heads = many.iter().filter(|n| n.head != t.head).count() as f64 / 10_000.0;
        assert!((heads - 0.5).abs() < 0.03, "{heads}");
        assert!(many.iter().all(|n| n != &t));
    }

    #[test]
    fn load_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), "").unwrap();
        fs::write(dir.path().join("valid.txt"), "a\tr\tb\n").unwrap();
        fs::write(dir.path().join("test.txt"), "a\tr\tb\nbroken line\n").unwrap();
        match KnowledgeGraph::load(dir.path()) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 2);
                assert!(path.ends_with("test.txt"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(dir.path().join("test.txt"), "").unwrap();
        let g = KnowledgeGraph::load(dir.path()).unwrap();
        assert_eq!(g.split(Split::Train).len(), 0);
        fs::remove_file(dir.path().join("valid.txt")).unwrap();
        assert!(matches!(KnowledgeGraph::load(dir.path()), Err(Error::Load { .. })));
    }
}
